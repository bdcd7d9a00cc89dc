"""Prediction-log ingestion and empirical analysis.

Reads CSV logs of human/AI confidence reports, rescales the raw [-1, 1]
confidences to probabilities, bins them into the standard cell grid
(8 uniform classifier-confidence bins, 3 equal-mass human bins), and
computes the downstream tables: positive-rate cells, pre/post-advice
confidence shifts with bootstrap intervals, and ROC/AUC per score source.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .core import ModelError
from .metrics import CellTable, bin_index, lambda_edges

__all__ = [
    "DataError",
    "PredictionRecord",
    "TransformedRecord",
    "ShiftTable",
    "transform_confidence",
    "inverse_transform_confidence",
    "read_records",
    "write_records",
    "transform_records",
    "filter_cohort",
    "build_cell_table",
    "advice_shift_table",
    "policy_auc",
    "synthesize_log",
    "cell_table_rows",
    "shift_table_rows",
    "roc_rows",
]

LAMBDA = 0.125  # 8 uniform classifier-confidence bins
N_H_BINS = 3
MIN_COUNT = 30


class DataError(ModelError):
    """Malformed log rows, unknown tasks, or undefined statistics."""


@dataclass(frozen=True, slots=True)
class PredictionRecord:
    """One logged prediction, confidences still on the raw [-1, 1] scale."""

    task: str
    participant: str
    instance: str
    y: int
    b_hat: float
    h_hat: float
    h_ai_hat: float
    country: str = ""
    told_accuracy: float | None = None
    group: str = ""

    def __post_init__(self):
        if self.y not in (0, 1):
            raise DataError(f"label must be 0 or 1, got {self.y}")
        for name in ("b_hat", "h_hat", "h_ai_hat"):
            v = getattr(self, name)
            if not -1 <= v <= 1:
                raise DataError(f"{name}={v} outside [-1, 1]")


@dataclass(frozen=True, slots=True)
class TransformedRecord:
    """A prediction with confidences mapped to [0, 1] probabilities."""

    task: str
    participant: str
    instance: str
    y: int
    b: float
    h: float
    h_ai: float

    def __post_init__(self):
        for name in ("b", "h", "h_ai"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise DataError(f"{name}={v} outside [0, 1]")


def transform_confidence(raw, y):
    """Raw signed confidence -> probability that the label is 1.

    Reported confidence is in the correctness of the chosen label, scaled
    to [-1, 1]; (raw+1)/2 when the label is 1, one minus that when it is 0.
    """
    if not -1 <= raw <= 1:
        raise DataError(f"raw confidence {raw} outside [-1, 1]")
    if y not in (0, 1):
        raise DataError(f"label must be 0 or 1, got {y}")
    v = (raw + 1) / 2
    return v if y == 1 else 1 - v


def inverse_transform_confidence(value, y):
    """Probability back to the raw [-1, 1] reporting scale."""
    if not 0 <= value <= 1:
        raise DataError(f"confidence {value} outside [0, 1]")
    if y not in (0, 1):
        raise DataError(f"label must be 0 or 1, got {y}")
    v = value if y == 1 else 1 - value
    return 2 * v - 1


_REQUIRED = ("task", "participant", "instance", "y", "b_hat", "h_hat", "h_ai_hat")
_OPTIONAL = ("country", "told_accuracy", "group")


def read_records(path, column_map=None, skip_bad_rows=False):
    """Parse a prediction log CSV into records.

    Columns are looked up by the canonical field names unless ``column_map``
    renames them ({canonical: actual}); unknown columns are ignored.
    Returns ``(records, n_skipped)``; a malformed row raises unless
    ``skip_bad_rows`` is set, in which case it is counted and warned about.
    """
    column_map = column_map or {}

    def col(row, name):
        return row.get(column_map.get(name, name))

    records = []
    skipped = 0
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: empty file (no header row)")
        for lineno, row in enumerate(reader, start=2):
            try:
                values = {name: col(row, name) for name in _REQUIRED}
                if any(v is None or v == "" for v in values.values()):
                    missing = [k for k, v in values.items() if v in (None, "")]
                    raise DataError(f"missing {', '.join(missing)}")
                told = col(row, "told_accuracy")
                records.append(
                    PredictionRecord(
                        task=values["task"],
                        participant=values["participant"],
                        instance=values["instance"],
                        y=int(values["y"]),
                        b_hat=float(values["b_hat"]),
                        h_hat=float(values["h_hat"]),
                        h_ai_hat=float(values["h_ai_hat"]),
                        country=col(row, "country") or "",
                        told_accuracy=float(told) if told not in (None, "") else None,
                        group=col(row, "group") or "",
                    )
                )
            except (DataError, ValueError) as exc:
                if not skip_bad_rows:
                    raise DataError(f"{path}:{lineno}: {exc}")
                skipped += 1
    if skipped:
        warnings.warn(f"{path}: skipped {skipped} malformed rows")
    if not records:
        raise DataError(f"{path}: no usable records")
    return records, skipped


def write_records(path, records):
    """Write records as CSV under the canonical header (inverse of read)."""
    fields = _REQUIRED + _OPTIONAL
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for r in records:
            writer.writerow(
                [
                    r.task,
                    r.participant,
                    r.instance,
                    r.y,
                    repr(float(r.b_hat)),
                    repr(float(r.h_hat)),
                    repr(float(r.h_ai_hat)),
                    r.country,
                    "" if r.told_accuracy is None else repr(float(r.told_accuracy)),
                    r.group,
                ]
            )


def transform_records(records) -> list:
    """Apply the [-1,1] -> [0,1] confidence transform to a batch."""
    return [
        TransformedRecord(
            task=r.task,
            participant=r.participant,
            instance=r.instance,
            y=r.y,
            b=transform_confidence(r.b_hat, r.y),
            h=transform_confidence(r.h_hat, r.y),
            h_ai=transform_confidence(r.h_ai_hat, r.y),
        )
        for r in records
    ]


def filter_cohort(records, country=None, told_accuracy=None):
    """Subset of records matching the given cohort filters.

    Treatment and control groups are both retained on purpose; an empty
    result is allowed but warned about.
    """
    out = [
        r
        for r in records
        if (country is None or r.country == country)
        and (
            told_accuracy is None
            or (r.told_accuracy is not None and r.told_accuracy == told_accuracy)
        )
    ]
    if not out:
        warnings.warn(
            f"cohort filter (country={country!r}, told_accuracy={told_accuracy!r})"
            " matched no records"
        )
    return out


def _task_records(records, task):
    sub = [r for r in records if r.task == task]
    if not sub:
        raise DataError(f"no records for task {task!r}")
    return sub


def _equal_mass_h_bins(records):
    """Assign each record an h-bin index; ties go to the lower bin.

    Records are cut into N_H_BINS rank slices of near-equal size; when a cut
    would split records sharing an h value, the whole run stays in the lower
    slice.  Returns (bin index per record, bins actually used) — degenerate
    h distributions can leave fewer than N_H_BINS non-empty bins.
    """
    n = len(records)
    order = sorted(range(n), key=lambda i: records[i].h)
    base = n // N_H_BINS
    extra = n % N_H_BINS
    cuts = []
    pos = 0
    for k in range(N_H_BINS - 1):
        pos += base + (1 if k < extra else 0)
        cuts.append(pos)
    assign = [0] * n
    bin_no = 0
    cut_iter = iter(cuts + [n])
    next_cut = next(cut_iter)
    for rank, idx in enumerate(order):
        while rank >= next_cut and not (
            rank > 0 and records[order[rank - 1]].h == records[idx].h
        ):
            bin_no += 1
            next_cut = next(cut_iter)
        assign[idx] = bin_no
    used = sorted(set(assign))
    remap = {b: i for i, b in enumerate(used)}
    return [remap[a] for a in assign], len(used)


def _binned(records):
    """(h-bin, b-bin) assignment plus the mean-h representative values."""
    h_assign, n_h = _equal_mass_h_bins(records)
    edges = lambda_edges(LAMBDA)
    b_assign = [bin_index(r.b, edges) for r in records]
    h_values = []
    for k in range(n_h):
        members = [r.h for r, a in zip(records, h_assign) if a == k]
        h_values.append(sum(members) / len(members))
    return h_assign, b_assign, h_values, len(edges) - 1


def build_cell_table(records, task) -> CellTable:
    """Empirical (h-bin, b-bin) table for one task.

    b-bins are the 8 uniform width-1/8 intervals; h-bins are three
    equal-mass rank slices represented by their mean h.
    """
    sub = _task_records(records, task)
    h_assign, b_assign, h_values, n_b = _binned(sub)
    n_h = len(h_values)
    count = [[0] * n_b for _ in range(n_h)]
    pos = [[0] * n_b for _ in range(n_h)]
    mean_b = [[0.0] * n_b for _ in range(n_h)]
    for r, hi, bi in zip(sub, h_assign, b_assign):
        count[hi][bi] += 1
        pos[hi][bi] += r.y
        mean_b[hi][bi] += r.b
    rate = [
        [
            Fraction(pos[i][j], count[i][j]) if count[i][j] else None
            for j in range(n_b)
        ]
        for i in range(n_h)
    ]
    mean = [
        [
            mean_b[i][j] / count[i][j] if count[i][j] else None
            for j in range(n_b)
        ]
        for i in range(n_h)
    ]
    return CellTable(
        lam=LAMBDA,
        h_bins=tuple(h_values),
        count=tuple(tuple(row) for row in count),
        pos_rate=tuple(tuple(row) for row in rate),
        mean_b=tuple(tuple(row) for row in mean),
        min_count=MIN_COUNT,
    )


@dataclass(frozen=True, slots=True)
class ShiftTable:
    """Per-cell mean advice-induced confidence shift with 90% intervals."""

    lam: object
    h_bins: tuple
    count: tuple
    mean_shift: tuple
    ci_low: tuple
    ci_high: tuple


def advice_shift_table(
    records, task, n_boot=1000, seed=0, cluster_by_participant=False
) -> ShiftTable:
    """Average h_ai - h per cell, with percentile-bootstrap 90% intervals.

    Resamples records within each cell (or whole participants' cell records
    when ``cluster_by_participant``); each cell draws from its own seeded
    substream so tables are reproducible cell by cell.
    """
    sub = _task_records(records, task)
    h_assign, b_assign, h_values, n_b = _binned(sub)
    n_h = len(h_values)
    cells = {}
    for r, hi, bi in zip(sub, h_assign, b_assign):
        cells.setdefault((hi, bi), []).append(r)

    count = [[0] * n_b for _ in range(n_h)]
    mean_shift = [[None] * n_b for _ in range(n_h)]
    ci_low = [[None] * n_b for _ in range(n_h)]
    ci_high = [[None] * n_b for _ in range(n_h)]
    for (hi, bi), members in sorted(cells.items()):
        shifts = np.array([r.h_ai - r.h for r in members])
        count[hi][bi] = len(members)
        mean_shift[hi][bi] = float(shifts.mean())
        rng = np.random.default_rng([seed, hi, bi])
        if cluster_by_participant:
            groups = {}
            for r in members:
                groups.setdefault(r.participant, []).append(r.h_ai - r.h)
            keys = sorted(groups)
            boots = np.empty(n_boot)
            for t in range(n_boot):
                chosen = rng.integers(0, len(keys), len(keys))
                pooled = [s for c in chosen for s in groups[keys[c]]]
                boots[t] = float(np.mean(pooled))
        else:
            draws = rng.integers(0, len(shifts), (n_boot, len(shifts)))
            boots = shifts[draws].mean(axis=1)
        ci_low[hi][bi] = float(np.quantile(boots, 0.05))
        ci_high[hi][bi] = float(np.quantile(boots, 0.95))

    return ShiftTable(
        lam=LAMBDA,
        h_bins=tuple(h_values),
        count=tuple(tuple(r) for r in count),
        mean_shift=tuple(tuple(r) for r in mean_shift),
        ci_low=tuple(tuple(r) for r in ci_low),
        ci_high=tuple(tuple(r) for r in ci_high),
    )


_SOURCES = {"B": "b", "H": "h", "H_AI": "h_ai"}


def policy_auc(records, task, source):
    """ROC points and trapezoidal AUC for thresholding one score source.

    Sweeps thresholds down through the distinct scores; returns
    ``(points, auc)`` with points as (threshold, fpr, tpr) rows from
    (0, 0) to (1, 1).
    """
    if source not in _SOURCES:
        raise DataError(f"source must be one of {sorted(_SOURCES)}, got {source!r}")
    sub = _task_records(records, task)
    scores = np.array([getattr(r, _SOURCES[source]) for r in sub])
    ys = np.array([r.y for r in sub])
    n_pos = int(ys.sum())
    n_neg = len(ys) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError(
            f"task {task!r} has single-class labels; AUC is undefined"
        )
    order = np.argsort(-scores, kind="stable")
    scores = scores[order]
    ys = ys[order]
    tp = np.cumsum(ys)
    fp = np.cumsum(1 - ys)
    # keep only the last index of each run of equal scores
    last = np.nonzero(np.append(np.diff(scores) != 0, True))[0]
    tpr = tp[last] / n_pos
    fpr = fp[last] / n_neg
    points = [(math.inf, 0.0, 0.0)]
    points += [
        (float(scores[i]), float(f), float(t))
        for i, f, t in zip(last, fpr, tpr)
    ]
    auc = float(
        np.trapezoid(np.concatenate(([0.0], tpr)), np.concatenate(([0.0], fpr)))
    )
    return points, auc


def synthesize_log(proc, n, seed, task="synthetic"):
    """Draw a synthetic prediction log from a decision process.

    Human confidence h and classifier confidence b come straight from the
    process (levels must lie in [0, 1]); the post-advice confidence is the
    midpoint (h + b) / 2.  Confidences are written back on the raw [-1, 1]
    reporting scale so the log exercises the full ingestion path.
    """
    from .constructions import sample_process

    h, b, y = sample_process(proc, n, seed)
    records = []
    for i in range(n):
        yi = int(y[i])
        hi, bi = float(h[i]), float(b[i])
        h_ai = (hi + bi) / 2
        records.append(
            PredictionRecord(
                task=task,
                participant=f"p{i % 97:03d}",
                instance=f"i{i:06d}",
                y=yi,
                b_hat=inverse_transform_confidence(bi, yi),
                h_hat=inverse_transform_confidence(hi, yi),
                h_ai_hat=inverse_transform_confidence(h_ai, yi),
                country="US",
                told_accuracy=80.0,
                group="treatment" if i % 2 == 0 else "control",
            )
        )
    return records


def cell_table_rows(tbl: CellTable):
    """Flatten a CellTable for CSV export."""
    rows = [("h_bin", "b_bin", "h_value", "b_center", "count", "pos_rate", "mean_b")]
    centers = tbl.b_centers
    for i, hv in enumerate(tbl.h_bins):
        for j in range(tbl.n_b):
            cnt = tbl.count[i][j]
            rows.append(
                (
                    i,
                    j,
                    f"{float(hv):.6f}",
                    f"{float(centers[j]):.6f}",
                    cnt,
                    f"{float(tbl.pos_rate[i][j]):.6f}" if cnt else "",
                    f"{float(tbl.mean_b[i][j]):.6f}" if cnt else "",
                )
            )
    return rows


def shift_table_rows(tbl: ShiftTable):
    rows = [("h_bin", "b_bin", "h_value", "count", "mean_shift", "ci_low", "ci_high")]
    for i, hv in enumerate(tbl.h_bins):
        for j in range(len(tbl.count[i])):
            cnt = tbl.count[i][j]
            rows.append(
                (
                    i,
                    j,
                    f"{float(hv):.6f}",
                    cnt,
                    f"{tbl.mean_shift[i][j]:.6f}" if cnt else "",
                    f"{tbl.ci_low[i][j]:.6f}" if cnt else "",
                    f"{tbl.ci_high[i][j]:.6f}" if cnt else "",
                )
            )
    return rows


def roc_rows(points):
    rows = [("threshold", "fpr", "tpr")]
    for thr, fpr, tpr in points:
        rows.append((f"{thr:.6f}" if math.isfinite(thr) else "inf",
                     f"{fpr:.6f}", f"{tpr:.6f}"))
    return rows
