"""Calibration/alignment audits and binned error metrics.

Two families live here:

1. Boolean audits with existential slack.  ``check_calibration`` asks whether,
   after exempting at most an alpha-fraction of the scope's mass, every
   remaining confidence level predicts its empirical positive rate within
   alpha.  ``check_alignment`` asks whether per-h kept subsets covering at
   least (1 - alpha/2) of each h-stratum exist on which the positive rate
   never drops by more than alpha along the product order of (h, b).
   ``check_discretized_multicalibration`` is the width-lambda variant with an
   alpha*lambda group-size floor.

   The existential subsets are searched greedily (largest-violation-first,
   respecting mass budgets), with an exact cover search as fallback when few
   cells participate in violations.  A pass is always sound.  A fail is exact
   when the fallback ran; otherwise it is flagged as possibly a search
   artifact.

2. Scalar metrics over binned tables: expected/maximum alignment error over
   ordered comparable cell pairs, and expected/maximum calibration error over
   the b-marginal bins.

Both families accept either a :class:`~aligncal.core.DecisionProcess` (cells
are its support, masses are exact weights, the predicted confidence of a cell
is its b level) or a :class:`CellTable` of empirical counts.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .core import (
    FLOAT_TOL,
    DecisionProcess,
    ModelError,
    close,
    is_exact_number,
    leq,
)

__all__ = [
    "AuditError",
    "CellTable",
    "AuditReport",
    "GroupWitness",
    "PairWitness",
    "MisalignmentMetrics",
    "MiscalibrationMetrics",
    "lambda_edges",
    "bin_index",
    "cell_table_from_samples",
    "check_calibration",
    "check_alignment",
    "misalignment_metrics",
    "miscalibration_metrics",
    "check_discretized_multicalibration",
]


class AuditError(ModelError):
    """Audit invoked on an empty/ill-matched scope or malformed table."""


def _exact_div(num, den):
    # keep mass fractions exact when both operands are (int/Fraction counts)
    if is_exact_number(num) and is_exact_number(den):
        return Fraction(num) / Fraction(den)
    return num / den


def lambda_edges(lam) -> tuple:
    """Bin edges of the width-``lam`` partition of [0, 1].

    Bins are [0, lam), [lam, 2*lam), ...; the final bin is closed on the
    right and ends at 1 (narrower than lam when 1/lam is not an integer).
    """
    if not 0 < lam <= 1:
        raise AuditError(f"bin width must lie in (0, 1], got {lam}")
    n = int(np.ceil(float(1 / lam) - 1e-12))
    edges = [j * lam for j in range(n)]
    edges.append(1)
    return tuple(edges)


def bin_index(value, edges) -> int:
    """Index of the half-open bin containing ``value`` (last bin closed)."""
    if not 0 <= value <= 1:
        raise AuditError(f"confidence {value} outside [0, 1]")
    for idx in range(len(edges) - 1):
        if edges[idx] <= value < edges[idx + 1]:
            return idx
    return len(edges) - 2  # value == 1 -> closed final bin


@dataclass(frozen=True, slots=True)
class CellTable:
    """Empirical (h-bin, b-bin) grid at bin width ``lam``.

    ``h_bins`` holds the representative value of each human-confidence bin
    (strictly increasing).  b-bins are the uniform width-``lam`` partition of
    [0, 1]; ``count``, ``pos_rate`` and ``mean_b`` are |h_bins| x n_bins
    nested tuples, with ``None`` entries exactly where the count is zero.
    ``min_count`` is the inclusion floor used by the scalar metrics.
    """

    lam: object
    h_bins: tuple
    count: tuple
    pos_rate: tuple
    mean_b: tuple
    min_count: int = 30

    def __post_init__(self):
        object.__setattr__(self, "h_bins", tuple(self.h_bins))
        object.__setattr__(self, "count", tuple(tuple(r) for r in self.count))
        object.__setattr__(self, "pos_rate", tuple(tuple(r) for r in self.pos_rate))
        object.__setattr__(self, "mean_b", tuple(tuple(r) for r in self.mean_b))
        edges = lambda_edges(self.lam)
        n = len(edges) - 1
        if not self.h_bins:
            raise AuditError("table needs at least one h bin")
        if any(not b > a for a, b in zip(self.h_bins, self.h_bins[1:])):
            raise AuditError("h_bins must be strictly increasing")
        for name, mat in (("count", self.count), ("pos_rate", self.pos_rate),
                          ("mean_b", self.mean_b)):
            if len(mat) != len(self.h_bins) or any(len(r) != n for r in mat):
                raise AuditError(f"{name} must be |h_bins| x {n}")
        for i, row in enumerate(self.count):
            for j, cnt in enumerate(row):
                if cnt < 0:
                    raise AuditError(f"negative count at cell ({i},{j})")
                has = cnt > 0
                if (self.pos_rate[i][j] is None) == has:
                    raise AuditError(f"pos_rate defined iff count > 0 at ({i},{j})")
                if (self.mean_b[i][j] is None) == has:
                    raise AuditError(f"mean_b defined iff count > 0 at ({i},{j})")
                if has and not 0 <= self.pos_rate[i][j] <= 1:
                    raise AuditError(f"pos_rate outside [0,1] at ({i},{j})")

    @property
    def b_edges(self) -> tuple:
        return lambda_edges(self.lam)

    @property
    def b_centers(self) -> tuple:
        e = self.b_edges
        return tuple((a + b) / 2 for a, b in zip(e, e[1:]))

    @property
    def n_b(self) -> int:
        return len(self.b_edges) - 1

    def total_count(self):
        return sum(c for row in self.count for c in row)


def cell_table_from_samples(
    h, b, y, lam, min_count: int = 0, h_levels=None
) -> CellTable:
    """Bin samples (h level, confidence, binary label) into a CellTable."""
    h = np.asarray(h)
    b = np.asarray(b, dtype=float)
    y = np.asarray(y)
    if not (len(h) == len(b) == len(y)):
        raise AuditError("h, b, y must have equal lengths")
    if len(h) == 0:
        raise AuditError("no samples")
    if b.min() < 0 or b.max() > 1:
        raise AuditError("confidences must lie in [0, 1]")
    levels = tuple(h_levels) if h_levels is not None else tuple(sorted(set(h.tolist())))
    edges = np.asarray(lambda_edges(lam), dtype=float)
    n_bins = len(edges) - 1
    bi = np.clip(np.searchsorted(edges, b, side="right") - 1, 0, n_bins - 1)
    count, rate, mean = [], [], []
    for lev in levels:
        in_h = h == lev
        crow, rrow, mrow = [], [], []
        for j in range(n_bins):
            mask = in_h & (bi == j)
            n = int(mask.sum())
            crow.append(n)
            rrow.append(float(y[mask].mean()) if n else None)
            mrow.append(float(b[mask].mean()) if n else None)
        count.append(tuple(crow))
        rate.append(tuple(rrow))
        mean.append(tuple(mrow))
    unbinned = set(h.tolist()) - set(levels)
    if unbinned:
        raise AuditError(f"sample h values outside the given levels: {sorted(unbinned)}")
    return CellTable(
        lam=lam, h_bins=levels, count=tuple(count), pos_rate=tuple(rate),
        mean_b=tuple(mean), min_count=min_count,
    )


# --------------------------------------------------------------------------
# Neutral cell view shared by audits and metrics.

@dataclass(frozen=True, slots=True)
class _Cell:
    hi: int
    bi: int
    h: object
    b: object
    mass: object
    rate: object
    mean_conf: object
    included: bool  # meets the table's min_count (processes: always True)


def _cells_of(obj) -> list[_Cell]:
    if isinstance(obj, DecisionProcess):
        return [
            _Cell(i, j, obj.h_values[i], obj.b_values[j], w, r, obj.b_values[j], True)
            for i, j, w, r in obj.support()
        ]
    if isinstance(obj, CellTable):
        centers = obj.b_centers
        out = []
        for i, hv in enumerate(obj.h_bins):
            for j in range(obj.n_b):
                cnt = obj.count[i][j]
                if cnt > 0:
                    out.append(
                        _Cell(i, j, hv, centers[j], cnt, obj.pos_rate[i][j],
                              obj.mean_b[i][j], cnt >= obj.min_count)
                    )
        return out
    raise AuditError(f"expected a DecisionProcess or CellTable, got {type(obj)!r}")


@dataclass(frozen=True, slots=True)
class GroupWitness:
    """A confidence group violating a calibration-style inequality."""

    h: object  # stratum value, or None for a full-scope group
    b: object
    gap: object
    mass_fraction: object


@dataclass(frozen=True, slots=True)
class PairWitness:
    """An ordered comparable cell pair whose positive rate drops too far."""

    lo: tuple  # (h, b) of the smaller cell
    hi: tuple  # (h, b) of the larger cell
    gap: object


@dataclass(frozen=True, slots=True)
class AuditReport:
    passed: bool
    alpha: object
    witnesses: tuple
    excluded_mass: object
    exact_search: bool = True
    kept_cells: tuple | None = None  # (h index, b index) pairs, alignment only
    note: str = ""

    def __post_init__(self):
        if self.passed != (len(self.witnesses) == 0):
            raise AuditError("witnesses must be empty iff the audit passed")


def _validate_alpha(alpha):
    if not 0 <= alpha <= 1:
        raise AuditError(f"alpha must lie in [0, 1], got {alpha}")


def check_calibration(obj, alpha, scope: int | None = None) -> AuditReport:
    """Audit: confidence levels match positive rates within ``alpha``
    after exempting at most an alpha-fraction of the scope's mass.

    ``scope`` restricts the audit to one h stratum (by index); ``None`` means
    the full space.  Groups are whole confidence levels; since they are
    disjoint, removing one never changes another's conditional rate, so the
    audit passes exactly when the total mass of violating levels fits the
    exemption budget.
    """
    _validate_alpha(alpha)
    cells = _cells_of(obj)
    if scope is not None:
        cells = [c for c in cells if c.hi == scope]
    if not cells:
        raise AuditError("empty audit scope")
    groups: dict[int, list[_Cell]] = {}
    for c in cells:
        groups.setdefault(c.bi, []).append(c)
    scope_mass = sum(c.mass for c in cells)
    witnesses = []
    violating_mass = 0
    for bi in sorted(groups):
        members = groups[bi]
        mass = sum(c.mass for c in members)
        rate = sum(c.mass * c.rate for c in members) / mass
        conf = sum(c.mass * c.mean_conf for c in members) / mass
        gap = abs(rate - conf)
        if not leq(gap, alpha):
            violating_mass = violating_mass + mass
            witnesses.append(
                GroupWitness(h=None if scope is None else members[0].h,
                             b=members[0].b, gap=gap,
                             mass_fraction=_exact_div(mass, scope_mass))
            )
    excluded = _exact_div(violating_mass, scope_mass)
    passed = leq(violating_mass, alpha * scope_mass)
    witnesses.sort(key=lambda w: (-float(w.gap), float(w.b)))
    return AuditReport(
        passed=passed,
        alpha=alpha,
        witnesses=() if passed else tuple(witnesses),
        excluded_mass=excluded,
    )


def _violating_pairs(cells: list[_Cell], alpha) -> list[tuple[int, int, object]]:
    """Indices into ``cells`` of ordered comparable pairs with rate drop > alpha."""
    out = []
    for a, ca in enumerate(cells):
        for b, cb in enumerate(cells):
            if ca.hi <= cb.hi and ca.bi <= cb.bi:
                gap = ca.rate - cb.rate
                if not leq(gap, alpha):
                    out.append((a, b, gap))
    return out


def _exact_cover_search(cells, pairs, budgets, masses):
    """Smallest-mass removal set covering all violating pairs within per-h
    budgets, or None.  DFS over participating cells only (removing a cell
    that touches no violating pair can never help)."""
    participating = sorted({i for a, b, _ in pairs for i in (a, b)})
    if len(participating) > 20:
        return None, False  # out of the exact regime
    pair_masks = []
    for a, b, _ in pairs:
        mask = 0
        for pos, idx in enumerate(participating):
            if idx in (a, b):
                mask |= 1 << pos
        pair_masks.append(mask)
    full_cover_needed = list(range(len(pairs)))
    best: dict = {"mass": None, "subset": None}

    def feasible(subset_bits):
        spent: dict[int, object] = {}
        for pos, idx in enumerate(participating):
            if subset_bits >> pos & 1:
                h = cells[idx].hi
                spent[h] = spent.get(h, 0) + masses[idx]
        return all(leq(v, budgets[h]) for h, v in spent.items())

    n = len(participating)
    for bits in range(1 << n):
        if all(bits & pm for pm in pair_masks):
            if feasible(bits):
                total = sum(
                    masses[participating[pos]] for pos in range(n) if bits >> pos & 1
                )
                if best["mass"] is None or total < best["mass"]:
                    best["mass"], best["subset"] = total, bits
    if best["subset"] is None:
        return None, True  # exhaustively proven infeasible
    removed = {
        participating[pos] for pos in range(n) if best["subset"] >> pos & 1
    }
    return removed, True


def check_alignment(obj, alpha, exhaustive: bool | None = None) -> AuditReport:
    """Audit: per-h kept subsets covering >= (1 - alpha/2) of each h stratum
    exist such that the positive rate never drops by more than ``alpha``
    along the product order of kept cells.

    Search: greedy removal of the cell participating in the largest total
    violation, respecting per-h mass budgets; when the greedy search fails
    and at most 20 cells participate in violations, an exact cover search
    decides the instance.  A pass is sound; a greedy-only fail is flagged.
    """
    _validate_alpha(alpha)
    cells = _cells_of(obj)
    if not cells:
        raise AuditError("empty table")
    masses = [c.mass for c in cells]
    row_mass: dict[int, object] = {}
    for c in cells:
        row_mass[c.hi] = row_mass.get(c.hi, 0) + c.mass
    budgets = {h: Fraction(1, 2) * alpha * m if is_exact_number(alpha) and is_exact_number(m)
               else 0.5 * float(alpha) * float(m)
               for h, m in row_mass.items()}
    total_mass = sum(masses)

    pairs = _violating_pairs(cells, alpha)
    removed: set[int] = set()
    exact = True
    note = ""
    if pairs:
        # Greedy phase.
        spent = {h: 0 for h in row_mass}
        while True:
            live = [
                (a, b, g) for a, b, g in pairs
                if a not in removed and b not in removed
            ]
            if not live:
                break
            score: dict[int, object] = {}
            for a, b, g in live:
                score[a] = score.get(a, 0) + g
                score[b] = score.get(b, 0) + g
            candidates = [
                i for i in score
                if leq(spent[cells[i].hi] + masses[i], budgets[cells[i].hi])
            ]
            if not candidates:
                # Greedy is stuck; try the exact cover search.
                exact_removed, decided = _exact_cover_search(
                    cells, pairs, budgets, masses
                )
                if exact_removed is not None:
                    removed = exact_removed
                    live = []
                elif decided:
                    note = "no admissible exemption exists (exact search)"
                else:
                    exact = False
                    note = (
                        "greedy search found no admissible exemption; "
                        "failure may be a search artifact"
                    )
                break
            pick = max(
                candidates,
                key=lambda i: (float(score[i]), -float(masses[i]),
                               -cells[i].hi, -cells[i].bi),
            )
            removed.add(pick)
            spent[cells[pick].hi] = spent[cells[pick].hi] + masses[pick]
        passed = not [
            1 for a, b, _ in pairs if a not in removed and b not in removed
        ]
    else:
        passed = True

    kept = tuple(
        (c.hi, c.bi) for i, c in enumerate(cells) if i not in removed
    )
    witnesses: tuple = ()
    if not passed:
        remaining = [
            PairWitness(lo=(cells[a].h, cells[a].b), hi=(cells[b].h, cells[b].b), gap=g)
            for a, b, g in pairs
            if a not in removed and b not in removed
        ]
        remaining.sort(key=lambda w: -float(w.gap))
        witnesses = tuple(remaining)
        kept = tuple((c.hi, c.bi) for c in cells)  # nothing validly exempted
        removed = set()
    excluded = (
        _exact_div(sum(masses[i] for i in removed), total_mass) if removed else 0
    )
    return AuditReport(
        passed=passed,
        alpha=alpha,
        witnesses=witnesses,
        excluded_mass=excluded,
        exact_search=exact,
        kept_cells=kept,
        note=note,
    )


@dataclass(frozen=True, slots=True)
class MisalignmentMetrics:
    violation_count: int
    eae: object  # mean positive rate drop over ordered comparable pairs
    mae: object  # max positive rate drop
    degenerate: bool = False


def misalignment_metrics(obj) -> MisalignmentMetrics:
    """Expected/maximum alignment error over ordered comparable cell pairs.

    The pair universe includes self-pairs and pairs equal in one coordinate
    (they contribute gap 0).  Cells below the table's min_count are excluded;
    process support cells are always included.
    """
    cells = [c for c in _cells_of(obj) if c.included]
    if len(cells) < 2:
        warnings.warn("fewer than 2 included cells; misalignment metrics degenerate")
        return MisalignmentMetrics(0, 0, 0, degenerate=True)
    n_pairs = 0
    total = 0
    worst = 0
    violations = 0
    for ca in cells:
        for cb in cells:
            if ca.hi <= cb.hi and ca.bi <= cb.bi:
                n_pairs += 1
                gap = ca.rate - cb.rate
                if gap > 0:
                    violations += 1
                    total = total + gap
                    worst = max(worst, gap)
    return MisalignmentMetrics(violations, total / n_pairs, worst)


@dataclass(frozen=True, slots=True)
class MiscalibrationMetrics:
    ece: object
    mce: object
    degenerate: bool = False  # no b bin met min_count for the MCE


def miscalibration_metrics(obj) -> MiscalibrationMetrics:
    """Mass-weighted expected and maximum |rate - mean confidence| over the
    b-marginal bins.  Bins below min_count are excluded from the MCE but kept
    in the ECE (they still carry mass)."""
    cells = _cells_of(obj)
    if not cells:
        raise AuditError("empty table")
    min_count = obj.min_count if isinstance(obj, CellTable) else 0
    by_b: dict[int, list[_Cell]] = {}
    for c in cells:
        by_b.setdefault(c.bi, []).append(c)
    total = sum(c.mass for c in cells)
    ece = 0
    mce = 0
    any_qualifying = False
    for bi in sorted(by_b):
        members = by_b[bi]
        mass = sum(c.mass for c in members)
        rate = sum(c.mass * c.rate for c in members) / mass
        conf = sum(c.mass * c.mean_conf for c in members) / mass
        gap = abs(rate - conf)
        ece = ece + _exact_div(mass, total) * gap
        if mass >= min_count:
            any_qualifying = True
            mce = max(mce, gap)
    return MiscalibrationMetrics(ece, mce, degenerate=not any_qualifying)


def check_discretized_multicalibration(table: CellTable, alpha, lam) -> AuditReport:
    """Audit: every (h, width-lam b-bin) group carrying at least an
    alpha*lam fraction of its h stratum has |mean confidence - rate| <= alpha.
    """
    _validate_alpha(alpha)
    if not isinstance(table, CellTable):
        raise AuditError("discretized multicalibration audits a CellTable")
    if not close(float(table.lam), float(lam), tol=1e-9):
        raise AuditError(
            f"table binned at lambda={table.lam}, audit requested lambda={lam}"
        )
    cells = _cells_of(table)
    if not cells:
        raise AuditError("empty table")
    row_mass: dict[int, object] = {}
    for c in cells:
        row_mass[c.hi] = row_mass.get(c.hi, 0) + c.mass
    total = sum(c.mass for c in cells)
    witnesses = []
    small_mass = 0
    for c in cells:
        floor = alpha * lam * row_mass[c.hi]
        if c.mass < floor:
            small_mass = small_mass + c.mass
            continue
        gap = abs(c.mean_conf - c.rate)
        if not leq(gap, alpha):
            witnesses.append(
                GroupWitness(h=c.h, b=c.b, gap=gap,
                             mass_fraction=_exact_div(c.mass, total))
            )
    witnesses.sort(key=lambda w: -float(w.gap))
    passed = not witnesses
    return AuditReport(
        passed=passed,
        alpha=alpha,
        witnesses=tuple(witnesses),
        excluded_mass=_exact_div(small_mass, total),
    )
