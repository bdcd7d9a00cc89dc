"""Tabular core for AI-assisted binary decision making.

The model: a human sees an instance together with a classifier's confidence
``b`` that the binary label ``Y`` is 1, forms her own confidence ``h`` from a
finite ordered set of levels, and takes a binary decision ``T``.  Payoffs are
``u(t, y)`` with the usual dominance conditions

    u(1,1) > u(1,0),   u(1,1) > u(0,1),   u(0,0) > u(1,0),   u(0,0) >= u(0,1),

i.e. deciding 1 is strictly best when the label is 1, deciding 0 is best when
it is 0.  Under these conditions the indifference point

    c = (u00 - u10) / (u11 - u10 + u00 - u01)

lies strictly inside (0, 1), and deciding T=1 beats T=0 exactly when
P(Y=1) > c.

Everything downstream (audits, constructions, policy optimization) works on
the induced finite joint over (H, B, Y), stored here as :class:`DecisionProcess`:
a grid of cells (h, b) with joint weights P(H=h, B=b) and conditional positive
rates P(Y=1 | H=h, B=b).  Latent features and noise variables are deliberately
not represented: every quantity of interest is a functional of this marginal.

Conventions that the rest of the package relies on:

- Analytically constructed processes carry exact ``fractions.Fraction`` entries
  and all derived identities hold with exact equality.  Data-derived processes
  carry floats; comparisons then allow the global ``FLOAT_TOL`` slack.
- Zero-weight cells carry ``None`` instead of a rate (there is nothing to
  condition on) and every operation skips them explicitly.
- A stochastic policy is a per-cell Bernoulli parameter ``p[h][b]``.  The
  per-cell noise is coupled comonotonically across cells, which makes
  "monotone policy" equivalent to "p non-decreasing along both axes on the
  support" and hence checkable from the parameters alone.

All types are immutable; all operations are pure functions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterator, Sequence

__all__ = [
    "FLOAT_TOL",
    "ModelError",
    "UtilityError",
    "ProcessError",
    "PolicyError",
    "Utility",
    "DecisionProcess",
    "CellPolicy",
    "decision_threshold",
    "expected_utility",
    "marginal_rates",
    "constant_policy",
    "is_exact_number",
    "leq",
    "close",
    "process_to_json_dict",
    "process_from_json_dict",
]

#: Absolute slack for comparisons involving floating-point quantities.
#: Exact (int / Fraction) quantities are always compared exactly.
FLOAT_TOL = 1e-12


class ModelError(ValueError):
    """Base class for model-construction and evaluation errors."""


class UtilityError(ModelError):
    """Payoffs violate the dominance conditions (ill-posed decision problem)."""


class ProcessError(ModelError):
    """Malformed decision process (weights, rates, or level sets invalid)."""


class PolicyError(ModelError):
    """Malformed policy, or policy undefined on a positive-weight cell."""


def is_exact_number(x) -> bool:
    """True for ints and Fractions (exact arithmetic), False for floats."""
    return isinstance(x, (int, Fraction)) and not isinstance(x, bool)


def leq(x, y, tol: float = FLOAT_TOL) -> bool:
    """``x <= y``, with ``tol`` slack when either side is floating point."""
    if is_exact_number(x) and is_exact_number(y):
        return x <= y
    return float(x) <= float(y) + tol


def close(x, y, tol: float = FLOAT_TOL) -> bool:
    """Equality up to ``tol`` for floats; exact equality for exact numbers."""
    if is_exact_number(x) and is_exact_number(y):
        return x == y
    return abs(float(x) - float(y)) <= tol


@dataclass(frozen=True, slots=True)
class Utility:
    """Payoffs u(t, y) indexed as u<decision><label>."""

    u11: object
    u10: object
    u00: object
    u01: object

    def __post_init__(self):
        u11, u10, u00, u01 = self.u11, self.u10, self.u00, self.u01
        if not (u11 > u10 and u11 > u01 and u00 > u10 and u00 >= u01):
            raise UtilityError(
                "payoffs must satisfy u11 > u10, u11 > u01, u00 > u10, u00 >= u01; "
                f"got u11={u11}, u10={u10}, u00={u00}, u01={u01}"
            )


def decision_threshold(u: Utility):
    """Positive-rate level above which deciding T=1 beats T=0.

    Exact Fraction when all payoffs are exact; float otherwise.  Always lies
    strictly inside (0, 1) for valid payoffs.
    """
    num = u.u00 - u.u10
    den = (u.u11 - u.u10) + (u.u00 - u.u01)
    if is_exact_number(num) and is_exact_number(den):
        return Fraction(num) / Fraction(den)
    return num / den


def _check_strictly_increasing(values: Sequence, what: str) -> None:
    for a, b in zip(values, values[1:]):
        if not b > a:
            raise ProcessError(f"{what} must be strictly increasing, got {values}")


@dataclass(frozen=True, slots=True)
class DecisionProcess:
    """Finite joint over (H, B, Y) plus the payoff structure.

    ``weight[i][j]`` is P(H=h_values[i], B=b_values[j]); ``rate[i][j]`` is
    P(Y=1 | that cell) where the weight is positive and ``None`` elsewhere.
    """

    h_values: tuple
    b_values: tuple
    weight: tuple
    rate: tuple
    utility: Utility

    def __post_init__(self):
        object.__setattr__(self, "h_values", tuple(self.h_values))
        object.__setattr__(self, "b_values", tuple(self.b_values))
        object.__setattr__(self, "weight", tuple(tuple(row) for row in self.weight))
        object.__setattr__(self, "rate", tuple(tuple(row) for row in self.rate))
        self._validate()

    def _validate(self) -> None:
        if not self.h_values or not self.b_values:
            raise ProcessError("h_values and b_values must be non-empty")
        _check_strictly_increasing(self.h_values, "h_values")
        _check_strictly_increasing(self.b_values, "b_values")
        for b in self.b_values:
            if not (0 <= b <= 1):
                raise ProcessError(f"b_values must lie in [0,1], got {b}")
        k, m = len(self.h_values), len(self.b_values)
        if len(self.weight) != k or any(len(row) != m for row in self.weight):
            raise ProcessError("weight matrix shape must be |H| x |B|")
        if len(self.rate) != k or any(len(row) != m for row in self.rate):
            raise ProcessError("rate matrix shape must be |H| x |B|")
        total = 0
        exact = True
        for i in range(k):
            for j in range(m):
                w, r = self.weight[i][j], self.rate[i][j]
                if w < 0:
                    raise ProcessError(f"negative weight at cell ({i},{j})")
                exact = exact and is_exact_number(w)
                total = total + w
                if w > 0:
                    if r is None:
                        raise ProcessError(
                            f"cell ({i},{j}) has positive weight but no rate"
                        )
                    if not (0 <= r <= 1):
                        raise ProcessError(f"rate at cell ({i},{j}) outside [0,1]")
                elif r is not None:
                    raise ProcessError(
                        f"cell ({i},{j}) has zero weight and must not carry a rate"
                    )
        if exact:
            if total != 1:
                raise ProcessError(f"weights must sum to 1 exactly, got {total}")
        elif abs(float(total) - 1.0) > FLOAT_TOL:
            raise ProcessError(f"weights must sum to 1 within {FLOAT_TOL}, got {total}")

    @property
    def n_h(self) -> int:
        return len(self.h_values)

    @property
    def n_b(self) -> int:
        return len(self.b_values)

    def support(self) -> Iterator[tuple[int, int, object, object]]:
        """Yield (i, j, weight, rate) over positive-weight cells, row-major."""
        for i in range(self.n_h):
            for j in range(self.n_b):
                w = self.weight[i][j]
                if w > 0:
                    yield i, j, w, self.rate[i][j]


@dataclass(frozen=True, slots=True)
class CellPolicy:
    """Per-cell probability of deciding T=1; ``None`` marks don't-care cells.

    ``monotone=True`` additionally asserts that the defined entries are
    non-decreasing along both axes (checked at construction).
    """

    p: tuple
    monotone: bool = False

    def __post_init__(self):
        object.__setattr__(self, "p", tuple(tuple(row) for row in self.p))
        for row in self.p:
            for v in row:
                if v is not None and not (0 <= v <= 1):
                    raise PolicyError(f"policy entry {v} outside [0,1]")
        if self.monotone and not self._entries_monotone():
            raise PolicyError("policy flagged monotone but entries are not")

    def _entries_monotone(self) -> bool:
        cells = [
            (i, j, v)
            for i, row in enumerate(self.p)
            for j, v in enumerate(row)
            if v is not None
        ]
        for i, j, v in cells:
            for i2, j2, v2 in cells:
                if i <= i2 and j <= j2 and not leq(v, v2):
                    return False
        return True


def constant_policy(proc: DecisionProcess, q) -> CellPolicy:
    """Policy deciding T=1 with probability ``q`` on every support cell."""
    p = tuple(
        tuple(q if proc.weight[i][j] > 0 else None for j in range(proc.n_b))
        for i in range(proc.n_h)
    )
    return CellPolicy(p=p)


def expected_utility(proc: DecisionProcess, pol: CellPolicy):
    """Expected payoff of ``pol`` on ``proc``.

    For each support cell: with probability p the decision is 1, earning
    rate*u11 + (1-rate)*u10; otherwise it is 0, earning rate*u01 + (1-rate)*u00.
    The cell terms are averaged under the joint weights.  Exact when all
    inputs are exact.
    """
    if len(pol.p) != proc.n_h or any(len(row) != proc.n_b for row in pol.p):
        raise PolicyError("policy shape must match the process grid")
    u = proc.utility
    total = 0
    for i, j, w, r in proc.support():
        p = pol.p[i][j]
        if p is None:
            raise PolicyError(f"policy undefined on positive-weight cell ({i},{j})")
        act = r * u.u11 + (1 - r) * u.u10
        hold = r * u.u01 + (1 - r) * u.u00
        total = total + w * (p * act + (1 - p) * hold)
    return total


def marginal_rates(proc: DecisionProcess) -> tuple[tuple, tuple]:
    """Weight-averaged positive rates per h level and per b level.

    Levels with zero total mass get ``None`` (undefined, not zero).
    """
    h_mass = [0] * proc.n_h
    h_acc = [0] * proc.n_h
    b_mass = [0] * proc.n_b
    b_acc = [0] * proc.n_b
    for i, j, w, r in proc.support():
        h_mass[i] += w
        h_acc[i] += w * r
        b_mass[j] += w
        b_acc[j] += w * r
    h_rates = tuple(
        h_acc[i] / h_mass[i] if h_mass[i] > 0 else None for i in range(proc.n_h)
    )
    b_rates = tuple(
        b_acc[j] / b_mass[j] if b_mass[j] > 0 else None for j in range(proc.n_b)
    )
    return h_rates, b_rates


# --------------------------------------------------------------------------
# JSON serialization.  Numbers are emitted as floats (exactness is an
# in-memory property of analytic constructions; the interchange format is
# deliberately plain).

def process_to_json_dict(proc: DecisionProcess) -> dict:
    return {
        "h_values": [float(h) for h in proc.h_values],
        "b_values": [float(b) for b in proc.b_values],
        "weight": [[float(w) for w in row] for row in proc.weight],
        "rate": [
            [None if r is None else float(r) for r in row] for row in proc.rate
        ],
        "utility": {
            "u11": float(proc.utility.u11),
            "u10": float(proc.utility.u10),
            "u00": float(proc.utility.u00),
            "u01": float(proc.utility.u01),
        },
    }


def process_from_json_dict(doc: dict) -> DecisionProcess:
    try:
        utility = Utility(
            u11=doc["utility"]["u11"],
            u10=doc["utility"]["u10"],
            u00=doc["utility"]["u00"],
            u01=doc["utility"]["u01"],
        )
        return DecisionProcess(
            h_values=tuple(doc["h_values"]),
            b_values=tuple(doc["b_values"]),
            weight=tuple(tuple(row) for row in doc["weight"]),
            rate=tuple(tuple(row) for row in doc["rate"]),
            utility=utility,
        )
    except (KeyError, TypeError) as exc:
        raise ProcessError(f"malformed process document: {exc}") from exc
