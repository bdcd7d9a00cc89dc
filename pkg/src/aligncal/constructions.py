"""Synthetic decision processes.

Three analytic families share one property: the classifier confidence is
perfectly calibrated and the human's conditional positive rate is monotone in
her confidence level, yet every monotone decision policy is strictly
suboptimal.  They are built from two rates p_minus < c < p_plus (c the
decision threshold of the utility):

- ``small_3x3``: six cells of weight 1/6 on the lower triangle of a 3x3 grid.
- ``grid``: a k x m grid (m > k >= 2) where column j mixes p_minus and p_plus
  with weights (m-j+1)/m and (j-1)/m, so the column confidence
  b_j = ((m-j+1) p_minus + (j-1) p_plus)/m is calibrated by construction.
  Low-b columns concentrate near the diagonal; high-b columns split their
  mass between the lowest and highest human level, which is what breaks
  monotone policies.
- ``continuous``: a latent feature X ~ Uniform[0,1] cut into k+1 equal-mass
  intervals; the human level is determined up to one step by the interval,
  label rates follow two strictly increasing affine curves f_minus (below c)
  and f_plus (above c), and the classifier reports their interval-dependent
  mixture.  The process is materialized exactly: each interval is split into
  ``n_discretization`` sub-bins and the affine curves are integrated in
  closed form (the mean over a sub-bin is the value at its midpoint).

All three are exact: parameters are normalized to ``fractions.Fraction``
(floats are read as their shortest decimal literal, so 0.2 means 1/5), and
every weight, rate and confidence in the output is a Fraction.

``build_random_aligned`` is the property-test generator: a random positive
weight table with rates = (monotone random field) + (uniform perturbation in
[-alpha/2, alpha/2]), clipped to [0,1].  Clipping is monotone and
1-Lipschitz, so comparable-pair rate drops stay <= alpha and the output
passes the alignment audit at alpha by construction; the audit is still run
post-hoc before returning.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .core import DecisionProcess, ModelError, Utility, decision_threshold
from .metrics import check_alignment

__all__ = [
    "ConstructionError",
    "ConstructionSpec",
    "build_small_example",
    "build_grid",
    "build_continuous",
    "build_random_aligned",
    "sample_process",
]


class ConstructionError(ModelError):
    """Construction parameters violate the family's preconditions."""


def _exactify(x) -> Fraction:
    """Exact rational from a number; floats via their repr decimal literal."""
    if isinstance(x, bool):
        raise ConstructionError(f"not a number: {x!r}")
    if isinstance(x, (int, Fraction)):
        return Fraction(x)
    if isinstance(x, float):
        return Fraction(repr(x))
    if isinstance(x, str):
        return Fraction(x)
    raise ConstructionError(f"cannot interpret {x!r} as an exact rational")


def _exact_utility(u: Utility) -> Utility:
    return Utility(
        _exactify(u.u11), _exactify(u.u10), _exactify(u.u00), _exactify(u.u01)
    )


def _h_levels(k: int) -> tuple:
    return tuple(Fraction(i, k + 1) for i in range(1, k + 1))


@dataclass(frozen=True, slots=True)
class ConstructionSpec:
    """Parameters of one analytic construction.

    ``seed`` is accepted for interface stability but unused: every
    construction here is deterministic and closed-form.
    """

    kind: str
    p_minus: object
    p_plus: object
    utility: Utility
    k: int | None = None
    m: int | None = None
    n_discretization: int = 16
    seed: int | None = None

    def __post_init__(self):
        if self.kind not in ("small_3x3", "grid", "continuous"):
            raise ConstructionError(f"unknown construction kind {self.kind!r}")
        object.__setattr__(self, "p_minus", _exactify(self.p_minus))
        object.__setattr__(self, "p_plus", _exactify(self.p_plus))
        object.__setattr__(self, "utility", _exact_utility(self.utility))
        c = decision_threshold(self.utility)
        if not (0 <= self.p_minus < c < self.p_plus <= 1):
            raise ConstructionError(
                f"need 0 <= p_minus < c < p_plus <= 1; got p_minus={self.p_minus}, "
                f"c={c}, p_plus={self.p_plus}"
            )
        if self.kind == "grid":
            if self.k is None or self.m is None or not self.m > self.k >= 2:
                raise ConstructionError(
                    f"grid needs m > k >= 2, got k={self.k}, m={self.m}"
                )
        if self.kind == "continuous":
            if self.k is None or self.k < 2:
                raise ConstructionError(f"continuous needs k >= 2, got k={self.k}")
            if self.n_discretization < 1:
                raise ConstructionError("n_discretization must be >= 1")


def build_small_example(spec: ConstructionSpec) -> DecisionProcess:
    """Six-cell counterexample on a 3x3 grid; all entries exact."""
    if spec.kind != "small_3x3":
        raise ConstructionError(f"spec kind is {spec.kind!r}, not small_3x3")
    pm, pp = spec.p_minus, spec.p_plus
    w = Fraction(1, 6)
    b_values = (
        Fraction(2, 3) * pm + Fraction(1, 3) * pp,
        Fraction(1, 2) * pm + Fraction(1, 2) * pp,
        pp,
    )
    weight = ((w, 0, 0), (w, w, 0), (w, w, w))
    rate = ((pm, None, None), (pm, pp, None), (pp, pm, pp))
    return DecisionProcess(
        h_values=_h_levels(3), b_values=b_values,
        weight=weight, rate=rate, utility=spec.utility,
    )


def build_grid(spec: ConstructionSpec) -> DecisionProcess:
    """k x m counterexample; column confidences calibrated by construction."""
    if spec.kind != "grid":
        raise ConstructionError(f"spec kind is {spec.kind!r}, not grid")
    k, m = spec.k, spec.m
    pm, pp = spec.p_minus, spec.p_plus
    b_values = tuple(
        (Fraction(m - j + 1, m) * pm + Fraction(j - 1, m) * pp) for j in range(1, m + 1)
    )
    weight = [[Fraction(0)] * m for _ in range(k)]
    rate: list[list] = [[None] * m for _ in range(k)]
    for j in range(1, m + 1):  # 1-indexed as in the defining formulas
        col_mass = Fraction(1, m)
        lo_share = Fraction(m - j + 1, m)   # the p_minus share of column j
        hi_share = Fraction(j - 1, m)       # the p_plus share
        if j <= k:
            pairs = [(j, lo_share, pm), (j - 1, hi_share, pp)]
        else:
            pairs = [(1, lo_share, pm), (k, hi_share, pp)]
        for i, share, r in pairs:
            if 1 <= i <= k and share > 0:
                weight[i - 1][j - 1] += col_mass * share
                rate[i - 1][j - 1] = r
    return DecisionProcess(
        h_values=_h_levels(k), b_values=b_values,
        weight=tuple(tuple(row) for row in weight),
        rate=tuple(tuple(row) for row in rate),
        utility=spec.utility,
    )


def _affine_or_default(coeffs, *, default, lo, hi, lo_open, hi_open, name):
    """Validate (slope, intercept) for a strictly increasing affine curve on
    [0,1] with range inside the given interval; return exact coefficients."""
    if coeffs is None:
        return default
    a, b = (_exactify(coeffs[0]), _exactify(coeffs[1]))
    if a <= 0:
        raise ConstructionError(f"{name} must be strictly increasing")
    at0, at1 = b, a + b
    lo_ok = at0 > lo if lo_open else at0 >= lo
    hi_ok = at1 < hi if hi_open else at1 <= hi
    if not (lo_ok and hi_ok):
        raise ConstructionError(
            f"{name} range [{at0}, {at1}] must stay within the required interval"
        )
    return a, b


def build_continuous(spec: ConstructionSpec, f_minus=None, f_plus=None) -> DecisionProcess:
    """Discretized continuous counterexample.

    ``f_minus``/``f_plus`` are optional (slope, intercept) pairs for the two
    affine rate curves; the defaults are

        f_minus(x) = c * (x + 0.01) / 1.02          range inside [0, c)
        f_plus(x)  = c + (1 - c) * (x + 0.01) / 1.02 range inside (c, 1]

    Exactness: sub-bin boundaries, midpoints and all affine evaluations are
    rational, and the mean of an affine function over an interval is its
    midpoint value, so the emitted confidences equal the exact conditional
    means.
    """
    if spec.kind != "continuous":
        raise ConstructionError(f"spec kind is {spec.kind!r}, not continuous")
    k, n = spec.k, spec.n_discretization
    c = decision_threshold(spec.utility)
    pad, den = Fraction(1, 100), Fraction(51, 50)
    a_minus = _affine_or_default(
        f_minus, default=(c / den, c * pad / den),
        lo=0, hi=c, lo_open=False, hi_open=True, name="f_minus",
    )
    a_plus = _affine_or_default(
        f_plus, default=((1 - c) / den, c + (1 - c) * pad / den),
        lo=c, hi=1, lo_open=True, hi_open=False, name="f_plus",
    )
    fm = lambda x: a_minus[0] * x + a_minus[1]
    fp = lambda x: a_plus[0] * x + a_plus[1]

    n_cols = (k + 1) * n
    cell_w = Fraction(1, (k + 1) * n)
    b_values: list[Fraction] = []
    weight = [[Fraction(0)] * n_cols for _ in range(k)]
    rate: list[list] = [[None] * n_cols for _ in range(k)]
    col = 0
    for j in range(1, k + 2):  # intervals I_1 .. I_{k+1}
        lo = Fraction(j - 1, k + 1)
        for s in range(n):
            mid = lo + Fraction(2 * s + 1, 2 * n * (k + 1))
            lo_rate, hi_rate = fm(mid), fp(mid)
            if j == 1:
                b = lo_rate
                parts = [(0, cell_w, lo_rate)]
            elif j == k + 1:
                b = hi_rate
                parts = [(k - 1, cell_w, hi_rate)]
            else:
                b = (lo_rate + hi_rate) / 2
                # level h_{j-1} (index j-2) sees the upper curve, h_j the lower
                parts = [(j - 2, cell_w / 2, hi_rate), (j - 1, cell_w / 2, lo_rate)]
            b_values.append(b)
            for i, w, r in parts:
                weight[i][col] += w
                rate[i][col] = r
            col += 1
    for prev, nxt in zip(b_values, b_values[1:]):
        if not nxt > prev:  # proven increasing for the affine defaults; guard anyway
            raise ConstructionError("discretized confidences are not strictly increasing")
    return DecisionProcess(
        h_values=_h_levels(k), b_values=tuple(b_values),
        weight=tuple(tuple(row) for row in weight),
        rate=tuple(tuple(row) for row in rate),
        utility=spec.utility,
    )


def build_random_aligned(alpha, grid_size, seed, utility: Utility) -> DecisionProcess:
    """Random strictly-positive-weight process whose rate table violates
    joint monotonicity by at most ``alpha`` (exact Fractions throughout).

    The rate table is a running-maximum random field plus an independent
    perturbation drawn from [-alpha/2, alpha/2], clipped to [0,1]; the
    alignment audit at ``alpha`` is run before returning.
    """
    alpha = _exactify(alpha)
    if not 0 <= alpha <= 1:
        raise ConstructionError(f"alpha must lie in [0, 1], got {alpha}")
    k, m = grid_size
    if k < 1 or m < 1:
        raise ConstructionError(f"grid_size must be positive, got {grid_size}")
    utility = _exact_utility(utility)
    rng = random.Random(seed)
    denom = 10**6
    for _ in range(10_000):
        raw = [[rng.randint(1, 999) for _ in range(m)] for _ in range(k)]
        total = sum(sum(row) for row in raw)
        weight = tuple(
            tuple(Fraction(raw[i][j], total) for j in range(m)) for i in range(k)
        )
        base = [[Fraction(0)] * m for _ in range(k)]
        for i in range(k):
            for j in range(m):
                u = Fraction(rng.randint(0, denom), denom)
                if i > 0:
                    u = max(u, base[i - 1][j])
                if j > 0:
                    u = max(u, base[i][j - 1])
                base[i][j] = u
        rate = tuple(
            tuple(
                min(Fraction(1), max(Fraction(0),
                    base[i][j]
                    + alpha * Fraction(rng.randint(-denom, denom), 2 * denom)))
                for j in range(m)
            )
            for i in range(k)
        )
        proc = DecisionProcess(
            h_values=_h_levels(k),
            b_values=tuple(Fraction(j, m + 1) for j in range(1, m + 1)),
            weight=weight, rate=rate, utility=utility,
        )
        if check_alignment(proc, alpha).passed:
            return proc
    raise ConstructionError(
        f"no alpha={alpha} aligned table found in 10000 attempts"
    )


def sample_process(proc: DecisionProcess, n: int, seed) -> tuple:
    """Draw ``n`` iid records (h, b, y) from the process.

    Returns float arrays for h and b (the level values) and an int array for
    y.  One uniform draws the cell through the inverse CDF of the weights,
    a second draws the label.
    """
    cells = list(proc.support())
    probs = np.array([float(w) for _, _, w, _ in cells])
    cum = np.cumsum(probs)
    cum[-1] = 1.0
    rates = np.array([float(r) for _, _, _, r in cells])
    h_of = np.array([float(proc.h_values[i]) for i, _, _, _ in cells])
    b_of = np.array([float(proc.b_values[j]) for _, j, _, _ in cells])
    rng = np.random.default_rng(seed)
    idx = np.searchsorted(cum, rng.random(n), side="right")
    idx = np.minimum(idx, len(cells) - 1)
    y = (rng.random(n) < rates[idx]).astype(int)
    return h_of[idx], b_of[idx], y
