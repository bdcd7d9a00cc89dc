"""Policy optimization over confidence cells.

Deterministic optimal policies, the best monotone policy (an up-set
selection problem solved exactly by enumeration or min-cut), a repair
procedure that renders an arbitrary policy monotone, and the utility
bound that controls how much the repair can cost on an aligned process.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from fractions import Fraction

from .core import (
    CellPolicy,
    DecisionProcess,
    PolicyError,
    Utility,
    decision_threshold,
    expected_utility,
    leq,
)

__all__ = [
    "PolicyResult",
    "is_monotone",
    "optimal_policy",
    "optimal_monotone_policy",
    "monotone_repair",
    "alignment_utility_bound",
]


@dataclass(frozen=True)
class PolicyResult:
    """A policy together with its value and its distance from the optimum."""

    policy: CellPolicy
    utility: object
    is_monotone: bool
    gap_to_optimal: object

    def __post_init__(self):
        if not leq(0, self.gap_to_optimal):
            raise PolicyError(
                f"gap_to_optimal must be >= 0, got {self.gap_to_optimal}"
            )

    def to_json_dict(self) -> dict:
        up_set = [
            [i, j]
            for i, row in enumerate(self.policy.p)
            for j, v in enumerate(row)
            if v == 1
        ]
        return {
            "policy": [
                [None if v is None else float(v) for v in row]
                for row in self.policy.p
            ],
            "up_set": up_set,
            "utility": float(self.utility),
            "is_monotone": self.is_monotone,
            "gap_to_optimal": float(self.gap_to_optimal),
        }


def _support_entries(proc: DecisionProcess, pol: CellPolicy):
    """(i, j, p) for every positive-weight cell; error if p is undefined."""
    if len(pol.p) != proc.n_h or any(len(row) != proc.n_b for row in pol.p):
        raise PolicyError("policy shape does not match the process grid")
    out = []
    for i, j, _, _ in proc.support():
        v = pol.p[i][j]
        if v is None:
            raise PolicyError(f"policy undefined on support cell ({i}, {j})")
        out.append((i, j, v))
    return out


def is_monotone(pol: CellPolicy, proc: DecisionProcess) -> bool:
    """True iff the decision probability never drops as (h, b) increases.

    Only positive-weight cells are compared; zero-weight cells carry no
    outcomes and are left unconstrained.
    """
    cells = _support_entries(proc, pol)
    for i1, j1, v1 in cells:
        for i2, j2, v2 in cells:
            if i1 <= i2 and j1 <= j2 and not leq(v1, v2):
                return False
    return True


def _cell_gains(proc: DecisionProcess):
    """Marginal utility of switching a support cell from decide-0 to decide-1.

    Expected utility decomposes as  EU(always 0) + sum over cells of
    p * gain, with gain = w * (r*(u11-u01) + (1-r)*(u10-u00)).  Every
    policy question below reduces to choosing which gains to collect.
    """
    u = proc.utility
    base = 0
    gains = []
    for i, j, w, r in proc.support():
        base = base + w * (r * u.u01 + (1 - r) * u.u00)
        gains.append(((i, j), w * (r * (u.u11 - u.u01) + (1 - r) * (u.u10 - u.u00))))
    return base, gains


def _policy_from_ones(proc: DecisionProcess, ones: set) -> CellPolicy:
    p = tuple(
        tuple(
            (1 if (i, j) in ones else 0) if proc.weight[i][j] > 0 else None
            for j in range(proc.n_b)
        )
        for i in range(proc.n_h)
    )
    return CellPolicy(p=p)


def optimal_policy(proc: DecisionProcess) -> PolicyResult:
    """Unconstrained optimum: decide 1 exactly where the rate beats c.

    Ties at the threshold are decided 0 (the two choices have equal value
    there, so a fixed convention keeps the output deterministic).
    """
    c = decision_threshold(proc.utility)
    ones = {(i, j) for i, j, _, r in proc.support() if r > c}
    pol = _policy_from_ones(proc, ones)
    util = expected_utility(proc, pol)
    return PolicyResult(
        policy=pol,
        utility=util,
        is_monotone=is_monotone(pol, proc),
        gap_to_optimal=0,
    )


def _best_upset_exhaustive(cells, gains):
    """Try every upward-closed subset of the support cells.

    Cells are visited in decreasing order of i+j so that every strict
    successor of a cell is decided before the cell itself; a cell may then
    join only if all its successors already did.  Feasible prefixes are
    walked depth-first with set membership kept in a bitmask.
    """
    n = len(cells)
    order = sorted(range(n), key=lambda t: -(cells[t][0] + cells[t][1]))
    succ = [0] * n
    for a in range(n):
        ia, ja = cells[a]
        for b in range(n):
            ib, jb = cells[b]
            if (ia, ja) != (ib, jb) and ia <= ib and ja <= jb:
                succ[a] |= 1 << b

    best_gain = 0  # the empty up-set
    best_mask = 0
    stack = [(0, 0, 0)]
    while stack:
        t, mask, total = stack.pop()
        if t == n:
            if total > best_gain:
                best_gain, best_mask = total, mask
            continue
        idx = order[t]
        stack.append((t + 1, mask, total))
        if mask & succ[idx] == succ[idx]:
            stack.append((t + 1, mask | (1 << idx), total + gains[idx]))
    chosen = {cells[t] for t in range(n) if best_mask >> t & 1}
    return best_gain, chosen


class _Dinic:
    """Max-flow on a small graph with exact (Fraction-friendly) capacities."""

    def __init__(self, n):
        self.n = n
        self.to = []
        self.cap = []
        self.adj = [[] for _ in range(n)]

    def add_edge(self, u, v, c):
        self.adj[u].append(len(self.to))
        self.to.append(v)
        self.cap.append(c)
        self.adj[v].append(len(self.to))
        self.to.append(u)
        self.cap.append(0)

    def _bfs(self, s, t):
        self.level = [-1] * self.n
        self.level[s] = 0
        q = deque([s])
        while q:
            u = q.popleft()
            for eid in self.adj[u]:
                v = self.to[eid]
                if self.cap[eid] > 0 and self.level[v] < 0:
                    self.level[v] = self.level[u] + 1
                    q.append(v)
        return self.level[t] >= 0

    def _dfs(self, u, t, f):
        if u == t:
            return f
        while self.it[u] < len(self.adj[u]):
            eid = self.adj[u][self.it[u]]
            v = self.to[eid]
            if self.cap[eid] > 0 and self.level[v] == self.level[u] + 1:
                d = self._dfs(v, t, min(f, self.cap[eid]))
                if d > 0:
                    self.cap[eid] -= d
                    self.cap[eid ^ 1] += d
                    return d
            self.it[u] += 1
        return 0

    def max_flow(self, s, t):
        flow = 0
        big = sum(c for c in self.cap if c > 0) + 1
        while self._bfs(s, t):
            self.it = [0] * self.n
            while True:
                f = self._dfs(s, t, big)
                if f == 0:
                    break
                flow += f
        return flow

    def min_cut_source_side(self, s):
        # call after max_flow: residual-reachable vertices form the cut
        seen = [False] * self.n
        seen[s] = True
        q = deque([s])
        while q:
            u = q.popleft()
            for eid in self.adj[u]:
                v = self.to[eid]
                if self.cap[eid] > 0 and not seen[v]:
                    seen[v] = True
                    q.append(v)
        return seen


def _best_upset_mincut(cells, gains):
    """Maximum-weight closure reduction.

    Source feeds positive-gain cells, negative-gain cells feed the sink,
    and an uncuttable edge runs from each cell to each of its successors;
    the source side of a min cut is then the most valuable up-set.
    """
    n = len(cells)
    s, t = n, n + 1
    net = _Dinic(n + 2)
    pos_total = sum(g for g in gains if g > 0)
    inf = pos_total + 1
    for a, g in enumerate(gains):
        if g > 0:
            net.add_edge(s, a, g)
        elif g < 0:
            net.add_edge(a, t, -g)
    for a in range(n):
        ia, ja = cells[a]
        for b in range(n):
            ib, jb = cells[b]
            if (ia, ja) != (ib, jb) and ia <= ib and ja <= jb:
                net.add_edge(a, b, inf)
    cut = net.max_flow(s, t)
    side = net.min_cut_source_side(s)
    chosen = {cells[a] for a in range(n) if side[a]}
    return pos_total - cut, chosen


def optimal_monotone_policy(proc: DecisionProcess, solver: str = "auto") -> PolicyResult:
    """Best policy whose decisions never drop as (h, b) increases.

    The objective is affine in each cell probability, so a deterministic
    optimum exists: pick an upward-closed set of support cells maximizing
    the summed switch gains.  Small supports (<= 20 cells) are solved by
    exhaustive up-set enumeration, larger ones through the closure/min-cut
    reduction; ``solver`` can force either ("exhaustive" / "mincut").
    """
    if solver not in ("auto", "exhaustive", "mincut"):
        raise PolicyError(f"unknown solver {solver!r}")
    base, gain_list = _cell_gains(proc)
    cells = [cell for cell, _ in gain_list]
    gains = [g for _, g in gain_list]
    if solver == "auto":
        solver = "exhaustive" if len(cells) <= 20 else "mincut"
    if solver == "exhaustive":
        best_gain, chosen = _best_upset_exhaustive(cells, gains)
    else:
        best_gain, chosen = _best_upset_mincut(cells, gains)
    pol = CellPolicy(
        p=_policy_from_ones(proc, chosen).p,
        monotone=True,
    )
    util = base + best_gain
    opt = optimal_policy(proc)
    gap = opt.utility - util
    if gap < 0:
        gap = 0  # guard against float round-off on inexact processes
    return PolicyResult(
        policy=pol, utility=util, is_monotone=True, gap_to_optimal=gap
    )


def monotone_repair(proc: DecisionProcess, pol: CellPolicy, report=None) -> CellPolicy:
    """Minimal surgery turning ``pol`` into a monotone policy.

    Per human-confidence level h the repair finds the smallest b whose
    trusted cell at some h' <= h has a positive rate at least the decision
    threshold; cells implicated in a monotonicity violation are rewritten
    to the step policy 1{b >= b_hat(h)} while untouched cells keep their
    input decision.  ``report`` is an alignment audit result whose
    ``kept_cells`` delimit the trusted cells; without one, every support
    cell is trusted.

    Rewriting can expose violations that the input masked, so the sweep
    repeats until the policy is clean; each pass only grows the rewritten
    set, and the all-rewritten fixed point is a step policy, hence monotone.
    """
    cells = _support_entries(proc, pol)
    if report is not None and report.kept_cells is not None:
        kept = set(report.kept_cells)
    else:
        kept = {(i, j) for i, j, _ in cells}

    c = decision_threshold(proc.utility)
    b_hat = []
    cheapest = None  # min qualifying b over rows 0..i
    for i in range(proc.n_h):
        for j in range(proc.n_b):
            r = proc.rate[i][j]
            if (i, j) in kept and r is not None and leq(c, r):
                b = proc.b_values[j]
                if cheapest is None or b < cheapest:
                    cheapest = b
        b_hat.append(cheapest)

    def violating(entries):
        bad = set()
        for i1, j1, v1 in entries:
            for i2, j2, v2 in entries:
                if i1 <= i2 and j1 <= j2 and not leq(v1, v2):
                    bad.add((i1, j1))
                    bad.add((i2, j2))
        return bad

    rewrite = violating(cells)
    grid = [list(row) for row in pol.p]
    while True:
        for i, j, v in cells:
            if (i, j) in rewrite:
                grid[i][j] = (
                    1 if b_hat[i] is not None and proc.b_values[j] >= b_hat[i] else 0
                )
        current = [(i, j, grid[i][j]) for i, j, _ in cells]
        bad = violating(current)
        if not bad - rewrite:
            break
        rewrite |= bad
    return CellPolicy(p=tuple(tuple(row) for row in grid))


def alignment_utility_bound(alpha, u: Utility):
    """Worst-case utility loss of the best monotone policy on an
    alpha-aligned process: alpha * [u11 - u01 + 1.5 * (u00 - u10)]."""
    if not 0 <= alpha <= 1:
        raise PolicyError(f"alpha must lie in [0, 1], got {alpha}")
    return alpha * (u.u11 - u.u01 + Fraction(3, 2) * (u.u00 - u.u10))
