"""Multicalibration of classifier confidences within human-confidence strata.

Two fitters produce the same artifact, a per-stratum step function from raw
confidence to a recalibrated level: an iterative patching algorithm that
shifts whole discretization bins until every sizable (h, bin) group is
internally consistent, and a quantile (uniform-mass) binning calibrator.
Sample-size calculators for the statistical guarantees live here too.
"""

from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .core import DecisionProcess, ModelError, close, is_exact_number, leq
from .metrics import bin_index, lambda_edges

__all__ = [
    "MulticalError",
    "ConvergenceError",
    "CalibrationSample",
    "DiscretizedConfidenceFunction",
    "UpdateStep",
    "multicalibrate_iterative",
    "multicalibrate_umd",
    "umd_min_group_size",
    "required_calibration_set_size",
    "pushforward_process",
]


class MulticalError(ModelError):
    """Raised for malformed samples or calibrator preconditions."""


class ConvergenceError(MulticalError):
    """Update budget exhausted with a violating group still present."""

    def __init__(self, message, h=None, bin=None, gap=None):
        super().__init__(message)
        self.h = h
        self.bin = bin
        self.gap = gap


@dataclass(frozen=True, slots=True)
class CalibrationSample:
    """One labeled record: human level, raw classifier confidence, outcome."""

    h: object
    b_raw: object
    y: int

    def __post_init__(self):
        if not 0 <= self.b_raw <= 1:
            raise MulticalError(f"b_raw {self.b_raw} outside [0, 1]")
        if self.y not in (0, 1):
            raise MulticalError(f"label must be 0 or 1, got {self.y}")


@dataclass(frozen=True)
class DiscretizedConfidenceFunction:
    """Per-stratum step function from raw confidence to an output level.

    For stratum ``h_levels[i]`` the bins are the half-open intervals between
    consecutive ``bin_edges[i]`` entries (the last interval is closed), and a
    query inside bin j returns ``output_values[i][j]``.
    """

    h_levels: tuple
    bin_edges: tuple
    output_values: tuple

    def __post_init__(self):
        object.__setattr__(self, "h_levels", tuple(self.h_levels))
        object.__setattr__(
            self, "bin_edges", tuple(tuple(e) for e in self.bin_edges)
        )
        object.__setattr__(
            self, "output_values", tuple(tuple(o) for o in self.output_values)
        )
        if not self.h_levels:
            raise MulticalError("at least one stratum is required")
        if any(
            not b > a for a, b in zip(self.h_levels, self.h_levels[1:])
        ):
            raise MulticalError("h_levels must be strictly increasing")
        if len(self.bin_edges) != len(self.h_levels) or len(
            self.output_values
        ) != len(self.h_levels):
            raise MulticalError("one edge array and one output array per stratum")
        for edges, outs in zip(self.bin_edges, self.output_values):
            if len(edges) < 2 or edges[0] != 0 or edges[-1] != 1:
                raise MulticalError("bin edges must run from 0 to 1")
            if any(not b > a for a, b in zip(edges, edges[1:])):
                raise MulticalError("bin edges must be strictly increasing")
            if len(outs) != len(edges) - 1:
                raise MulticalError("need exactly one output per bin")
            if any(not 0 <= v <= 1 for v in outs):
                raise MulticalError("output levels must lie in [0, 1]")

    def _stratum(self, h) -> int:
        for idx, level in enumerate(self.h_levels):
            if close(level, h):
                return idx
        raise MulticalError(f"unknown stratum {h}")

    def value(self, h, b_raw):
        """Output level for a raw confidence observed at stratum ``h``."""
        idx = self._stratum(h)
        if not 0 <= b_raw <= 1:
            raise MulticalError(f"b_raw {b_raw} outside [0, 1]")
        return self.output_values[idx][bin_index(b_raw, self.bin_edges[idx])]

    __call__ = value

    def to_json_dict(self) -> dict:
        return {
            "h_levels": [float(h) for h in self.h_levels],
            "bin_edges": [[float(e) for e in row] for row in self.bin_edges],
            "output_values": [
                [float(v) for v in row] for row in self.output_values
            ],
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "DiscretizedConfidenceFunction":
        try:
            return cls(
                h_levels=tuple(d["h_levels"]),
                bin_edges=tuple(tuple(e) for e in d["bin_edges"]),
                output_values=tuple(tuple(o) for o in d["output_values"]),
            )
        except (KeyError, TypeError) as exc:
            raise MulticalError(f"malformed confidence-function JSON: {exc}")


@dataclass(frozen=True, slots=True)
class UpdateStep:
    """Trace record of one accepted patch of the iterative fitter."""

    h: object
    bin: int
    delta: object
    clamped: bool
    potential: object


def _normalize(samples):
    out = []
    for s in samples:
        if isinstance(s, CalibrationSample):
            out.append(s)
        else:
            h, b, y = s
            out.append(CalibrationSample(h, b, y))
    if not out:
        raise MulticalError("no calibration samples given")
    return out


def _by_stratum(samples):
    strata = {}
    for s in samples:
        strata.setdefault(s.h, []).append(s)
    return dict(sorted(strata.items()))


# ---------------------------------------------------------------------------
# the iterative fitter keeps, per stratum, an exact piecewise map from raw
# confidence to the current adjusted confidence.  Pieces are (lo, hi, affine,
# a): the transform is x + a when affine else the constant a (constants arise
# from clamping).  Every piece is kept narrow enough to land inside a single
# discretization bin, so "shift bin k of stratum h" is exactly "add delta to
# the pieces assigned to k" and the training samples follow the same map the
# emitted function will use.


def _piece_value(piece, x):
    lo, hi, affine, a = piece
    return x + a if affine else a


def _piece_bin(piece, edges) -> int:
    lo, hi, affine, a = piece
    return bin_index(lo + a if affine else a, edges)


def _split_pieces(pieces, edges):
    """Split affine pieces at bin-edge preimages so each maps into one bin."""
    out = []
    for lo, hi, affine, a in pieces:
        if not affine:
            out.append((lo, hi, affine, a))
            continue
        cuts = [lo]
        for e in edges[1:-1]:
            x = e - a
            if lo < x < hi:
                cuts.append(x)
        cuts.append(hi)
        for s, t in zip(cuts, cuts[1:]):
            out.append((s, t, True, a))
    return out


def _shift_bin(pieces, edges, k, delta):
    """Add ``delta`` to every piece assigned to bin ``k``, clamping to [0,1].

    Affine pieces whose shifted image crosses a boundary split into an affine
    part and a constant (clamped) part.  Returns the new piece list and
    whether any clamping occurred.
    """
    out = []
    clamped = False
    for piece in pieces:
        lo, hi, affine, a = piece
        if _piece_bin(piece, edges) != k:
            out.append(piece)
            continue
        a = a + delta
        if not affine:
            if a < 0 or a > 1:
                clamped = True
                a = 0 if a < 0 else 1
            out.append((lo, hi, False, a))
            continue
        img_lo, img_hi = lo + a, hi + a
        if img_lo >= 1:
            out.append((lo, hi, False, 1))
            clamped = True
        elif img_hi > 1:
            x = 1 - a
            out.append((lo, x, True, a))
            out.append((x, hi, False, 1))
            clamped = True
        elif img_hi <= 0:
            out.append((lo, hi, False, 0))
            clamped = True
        elif img_lo < 0:
            x = -a
            out.append((lo, x, False, 0))
            out.append((x, hi, True, a))
            clamped = True
        else:
            out.append((lo, hi, True, a))
    return out, clamped


def _assign(pieces, edges, xs):
    """Piece index, adjusted value, and bin of each raw confidence."""
    los = [p[0] for p in pieces]
    values, bins = [], []
    for x in xs:
        idx = bisect_right(los, x) - 1
        if idx < 0:
            idx = 0
        v = _piece_value(pieces[idx], x)
        values.append(v)
        bins.append(_piece_bin(pieces[idx], edges))
    return values, bins


def _mean(values):
    total = 0
    for v in values:
        total = total + v
    return _exact_ratio(total, len(values))


def _exact_ratio(num, den):
    if is_exact_number(num):
        return Fraction(num) / den if isinstance(num, Fraction) else Fraction(num, den)
    return num / den


def _potential(values, ys):
    total = 0
    for v, y in zip(values, ys):
        d = v - y
        total = total + d * d
    return total


def _bin_center(edges, k):
    return _exact_ratio(edges[k] + edges[k + 1], 2)


def multicalibrate_iterative(
    samples, alpha_prime, lam, max_rounds=None, full_output=False
):
    """Fit a discretized confidence function by iterative bin patching.

    Samples are grouped by (stratum, current discretization bin).  While any
    group holding at least an ``alpha_prime * lam`` fraction of its stratum
    has |empirical rate - mean confidence| > ``alpha_prime``, that group's
    confidences shift by the difference (clamped to [0,1]); groups are
    scanned in fixed lexicographic (h, bin) order for determinism.  On
    termination each stratum's bins emit their group's mean adjusted
    confidence (bin centers where no sample lands).

    ``max_rounds`` caps accepted updates (default ``10 * ceil(1/(a'^2 lam))``,
    from the potential argument); exceeding it raises ConvergenceError.
    With ``full_output=True`` returns ``(function, trace)`` where the trace
    lists every accepted update with the squared-error potential after it;
    the potential strictly decreases by at least count * delta**2 per step.
    """
    if not 0 < alpha_prime < 1:
        raise MulticalError(f"alpha_prime must lie in (0, 1), got {alpha_prime}")
    if not 0 < lam <= 1:
        raise MulticalError(f"lam must lie in (0, 1], got {lam}")
    strata = _by_stratum(_normalize(samples))
    edges = lambda_edges(lam)
    n_bins = len(edges) - 1
    if max_rounds is None:
        max_rounds = 10 * math.ceil(1 / float(alpha_prime * alpha_prime * lam))

    pieces = {h: [(0, 1, True, 0)] for h in strata}
    xs = {h: [s.b_raw for s in group] for h, group in strata.items()}
    ys = {h: [s.y for s in group] for h, group in strata.items()}
    pot = {h: _potential(xs[h], ys[h]) for h in strata}
    trace = []
    updates = 0

    while True:
        any_update = False
        for h, group in strata.items():
            n_h = len(group)
            floor = alpha_prime * lam * n_h
            k = 0
            while k < n_bins:
                pieces[h] = _split_pieces(pieces[h], edges)
                values, bins = _assign(pieces[h], edges, xs[h])
                members = [i for i, b in enumerate(bins) if b == k]
                if len(members) >= floor and members:
                    rate = _exact_ratio(
                        sum(ys[h][i] for i in members), len(members)
                    )
                    mean_v = _mean([values[i] for i in members])
                    gap = rate - mean_v
                    if not leq(abs(gap), alpha_prime):
                        if updates >= max_rounds:
                            raise ConvergenceError(
                                f"no convergence within {max_rounds} updates; "
                                f"stratum {h} bin {k} still off by {gap}",
                                h=h,
                                bin=k,
                                gap=gap,
                            )
                        pieces[h], clamped = _shift_bin(
                            pieces[h], edges, k, gap
                        )
                        new_values, _ = _assign(pieces[h], edges, xs[h])
                        new_pot = _potential(new_values, ys[h])
                        if not new_pot < pot[h]:
                            raise MulticalError(
                                "potential failed to decrease; "
                                "inconsistent sample data"
                            )
                        pot[h] = new_pot
                        updates += 1
                        any_update = True
                        trace.append(
                            UpdateStep(
                                h=h,
                                bin=k,
                                delta=gap,
                                clamped=clamped,
                                potential=sum(pot.values()),
                            )
                        )
                k += 1
        if not any_update:
            break

    h_levels, all_edges, all_outputs = [], [], []
    for h, group in strata.items():
        pieces[h] = _split_pieces(pieces[h], edges)
        values, bins = _assign(pieces[h], edges, xs[h])
        mean_by_bin = {}
        for k in range(n_bins):
            member_vals = [v for v, b in zip(values, bins) if b == k]
            if member_vals:
                mean_by_bin[k] = _mean(member_vals)
        cur_edges = [0]
        cur_outs = []
        for piece in pieces[h]:
            out = mean_by_bin.get(
                _piece_bin(piece, edges), None
            )
            if out is None:
                out = _bin_center(edges, _piece_bin(piece, edges))
            if cur_outs and out == cur_outs[-1]:
                cur_edges[-1] = piece[1]
            else:
                cur_edges.append(piece[1])
                cur_outs.append(out)
        cur_edges[-1] = 1
        h_levels.append(h)
        all_edges.append(tuple(cur_edges))
        all_outputs.append(tuple(cur_outs))

    func = DiscretizedConfidenceFunction(
        h_levels=tuple(h_levels),
        bin_edges=tuple(all_edges),
        output_values=tuple(all_outputs),
    )
    if full_output:
        return func, tuple(trace)
    return func


def multicalibrate_umd(samples, n_bins, jitter=False, seed=None):
    """Uniform-mass (quantile) calibration per stratum.

    Bin edges sit at the i/n_bins empirical quantiles of the stratum's raw
    confidences; each bin outputs the empirical positive rate of the samples
    it contains (assignment follows the half-open edge convention, so
    duplicates straddling a quantile all land in the upper bin).  ``jitter``
    adds uniform noise of width 1e-9 to tied confidences first, restoring
    distinctness when the data are heavily discretized.
    """
    if n_bins < 1:
        raise MulticalError(f"n_bins must be >= 1, got {n_bins}")
    strata = _by_stratum(_normalize(samples))
    rng = np.random.default_rng(seed) if jitter else None

    h_levels, all_edges, all_outputs = [], [], []
    for h, group in strata.items():
        if len(group) < 2 * n_bins:
            raise MulticalError(
                f"stratum {h} has {len(group)} samples but needs at least "
                f"{2 * n_bins} for {n_bins} bins; see umd_min_group_size for "
                "a statistically sufficient count"
            )
        b = np.asarray([float(s.b_raw) for s in group])
        y = np.asarray([s.y for s in group])
        if jitter:
            _, inverse, counts = np.unique(
                b, return_inverse=True, return_counts=True
            )
            tied = counts[inverse] > 1
            if tied.any():
                b = b.copy()
                b[tied] = np.minimum(
                    b[tied] + rng.uniform(0, 1e-9, int(tied.sum())), 1.0
                )
        interior = np.quantile(b, [i / n_bins for i in range(1, n_bins)])
        edges = np.unique(np.concatenate(([0.0], interior, [1.0])))
        idx = np.clip(np.searchsorted(edges, b, side="right") - 1, 0,
                      len(edges) - 2)
        outs = []
        overall = float(y.mean())
        for j in range(len(edges) - 1):
            mask = idx == j
            outs.append(float(y[mask].mean()) if mask.any() else overall)
        h_levels.append(h)
        all_edges.append(tuple(float(e) for e in edges))
        all_outputs.append(tuple(outs))

    return DiscretizedConfidenceFunction(
        h_levels=tuple(h_levels),
        bin_edges=tuple(all_edges),
        output_values=tuple(all_outputs),
    )


def _check_unit(name, value, closed_top=False):
    top_ok = value <= 1 if closed_top else value < 1
    if not (0 < value and top_ok):
        bracket = "(0, 1]" if closed_top else "(0, 1)"
        raise MulticalError(f"{name} must lie in {bracket}, got {value}")


def umd_min_group_size(alpha, lam, xi, n_groups) -> int:
    """Samples per stratum for uniform-mass binning to calibrate reliably.

    ceil((2 ln(2 n_groups / xi * ceil(1/lam)) / alpha^2 + 2) * ceil(1/lam)):
    enough that every quantile bin's empirical rate concentrates within
    alpha simultaneously across all strata with failure probability xi.
    """
    _check_unit("alpha", alpha)
    _check_unit("lam", lam, closed_top=True)
    _check_unit("xi", xi)
    if n_groups < 1:
        raise MulticalError(f"n_groups must be >= 1, got {n_groups}")
    n_inner = math.ceil(1 / float(lam))
    per_bin = 2 * math.log(2 * n_groups / float(xi) * n_inner) / float(alpha) ** 2
    return math.ceil((per_bin + 2) * n_inner)


def required_calibration_set_size(alpha, lam, xi, gamma, n_groups) -> int:
    """Total calibration-set size so every stratum receives enough samples.

    gamma lower-bounds the probability mass of the rarest stratum.  The
    per-stratum requirement is evaluated at confidence xi/2 (hence the
    4*n_groups/xi term) and inflated by 2*n_groups*ln(2/xi)/gamma so that
    with probability 1 - xi the random stratum counts all clear it.
    """
    _check_unit("alpha", alpha)
    _check_unit("lam", lam, closed_top=True)
    _check_unit("xi", xi)
    if not 0 < gamma <= 1:
        raise MulticalError(f"gamma must lie in (0, 1], got {gamma}")
    if n_groups < 2:
        raise MulticalError(
            f"n_groups must be >= 2 for this bound, got {n_groups}"
        )
    n_inner = math.ceil(1 / float(lam))
    per_bin = (
        2 * math.log(4 * n_groups / float(xi) * n_inner) / float(alpha) ** 2
    )
    group_min = (per_bin + 2) * n_inner
    return math.ceil(
        2 * n_groups * math.log(2 / float(xi)) / float(gamma) * group_min
    )


def pushforward_process(proc: DecisionProcess, func) -> DecisionProcess:
    """The decision process induced by reporting ``func(h, b)`` instead of b.

    Support cells of each stratum that map to the same output level merge:
    weights add and rates mix weight-proportionally.  The new confidence
    axis is the sorted set of attained output levels.
    """
    outputs = sorted(
        {
            func.value(proc.h_values[i], proc.b_values[j])
            for i, j, _, _ in proc.support()
        }
    )
    col = {v: idx for idx, v in enumerate(outputs)}
    n_b = len(outputs)
    weight = [[0] * n_b for _ in range(proc.n_h)]
    mass_rate = [[0] * n_b for _ in range(proc.n_h)]
    for i, j, w, r in proc.support():
        jj = col[func.value(proc.h_values[i], proc.b_values[j])]
        weight[i][jj] += w
        mass_rate[i][jj] += w * r
    rate = tuple(
        tuple(
            mass_rate[i][j] / weight[i][j] if weight[i][j] > 0 else None
            for j in range(n_b)
        )
        for i in range(proc.n_h)
    )
    return DecisionProcess(
        h_values=proc.h_values,
        b_values=tuple(outputs),
        weight=tuple(tuple(row) for row in weight),
        rate=rate,
        utility=proc.utility,
    )
