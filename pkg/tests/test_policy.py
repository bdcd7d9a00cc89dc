import random
from fractions import Fraction as F

import pytest

from aligncal.constructions import (
    ConstructionSpec,
    build_grid,
    build_random_aligned,
    build_small_example,
)
from aligncal.core import (
    CellPolicy,
    DecisionProcess,
    PolicyError,
    Utility,
    constant_policy,
    decision_threshold,
    expected_utility,
)
from aligncal.metrics import check_alignment
from aligncal.policy import (
    PolicyResult,
    alignment_utility_bound,
    is_monotone,
    monotone_repair,
    optimal_monotone_policy,
    optimal_policy,
)

SYM = Utility(1, 0, 1, 0)


def small():
    return build_small_example(
        ConstructionSpec("small_3x3", F(1, 5), F(4, 5), SYM)
    )


def random_process(rng, n_h=3, n_b=3, utility=SYM):
    h = tuple(F(i + 1, n_h + 1) for i in range(n_h))
    b = tuple(F(j + 1, n_b + 1) for j in range(n_b))
    raw = [[rng.randint(0, 9) for _ in range(n_b)] for _ in range(n_h)]
    total = sum(sum(row) for row in raw) or 1
    weight = tuple(tuple(F(v, total) for v in row) for row in raw)
    c = decision_threshold(utility)
    rate = tuple(
        tuple(
            None if weight[i][j] == 0 else _rate_avoiding(rng, c)
            for j in range(n_b)
        )
        for i in range(n_h)
    )
    return DecisionProcess(h, b, weight, rate, utility)


def _rate_avoiding(rng, c):
    while True:
        r = F(rng.randint(0, 100), 100)
        if r != c:
            return r


# ---------------------------------------------------------------------------
# monotonicity checking


def test_constant_policy_is_monotone():
    proc = small()
    assert is_monotone(constant_policy(proc, F(1, 3)), proc)


def test_threshold_policies_are_monotone():
    proc = small()
    for tau in (0, F(2, 5), F(1, 2), F(9, 10), 1):
        p = tuple(
            tuple(
                (1 if proc.b_values[j] >= tau else 0)
                if proc.weight[i][j] > 0
                else None
                for j in range(proc.n_b)
            )
            for i in range(proc.n_h)
        )
        assert is_monotone(CellPolicy(p), proc)


def test_per_cell_optimal_policy_on_small_example_is_not_monotone():
    proc = small()
    res = optimal_policy(proc)
    # (h2,b2) decides 1 while the larger cell (h3,b2) decides 0
    assert res.policy.p[1][1] == 1
    assert res.policy.p[2][1] == 0
    assert not res.is_monotone
    assert not is_monotone(res.policy, proc)


def test_is_monotone_requires_policy_on_support():
    proc = small()
    p = [[None] * 3 for _ in range(3)]
    with pytest.raises(PolicyError):
        is_monotone(CellPolicy(p), proc)


# ---------------------------------------------------------------------------
# optimal_policy


def test_small_example_optimal_utility():
    res = optimal_policy(small())
    assert res.utility == F(4, 5)
    assert res.gap_to_optimal == 0


def test_all_rates_above_threshold_means_always_act():
    u = Utility(1, 0, 1, 0)
    proc = DecisionProcess(
        h_values=(F(1, 3), F(2, 3)),
        b_values=(F(3, 5), F(4, 5)),
        weight=((F(1, 4), F(1, 4)), (F(1, 4), F(1, 4))),
        rate=((F(3, 5), F(7, 10)), (F(4, 5), F(9, 10))),
        utility=u,
    )
    res = optimal_policy(proc)
    assert all(v == 1 for row in res.policy.p for v in row)
    p_y1 = F(1, 4) * (F(3, 5) + F(7, 10) + F(4, 5) + F(9, 10))
    assert res.utility == p_y1 * u.u11 + (1 - p_y1) * u.u10


def test_threshold_ties_decide_zero_and_lose_nothing():
    c = decision_threshold(SYM)
    proc = DecisionProcess(
        h_values=(F(1, 2),),
        b_values=(c,),
        weight=((F(1),),),
        rate=((c,),),
        utility=SYM,
    )
    res = optimal_policy(proc)
    assert res.policy.p[0][0] == 0
    assert res.utility == expected_utility(proc, constant_policy(proc, 0))
    assert res.utility == expected_utility(proc, constant_policy(proc, 1))


# ---------------------------------------------------------------------------
# optimal_monotone_policy


def test_small_example_monotone_optimum_frozen():
    res = optimal_monotone_policy(small())
    assert res.utility == F(7, 10)
    assert res.gap_to_optimal == F(1, 10)
    assert res.is_monotone
    ones = {
        (i, j)
        for i, row in enumerate(res.policy.p)
        for j, v in enumerate(row)
        if v == 1
    }
    assert ones == {(1, 1), (2, 0), (2, 1), (2, 2)}


def test_grid_2x3_monotone_optimum_frozen():
    proc = build_grid(ConstructionSpec("grid", F(1, 5), F(4, 5), SYM, k=2, m=3))
    opt = optimal_policy(proc)
    mono = optimal_monotone_policy(proc)
    assert opt.utility == F(4, 5)
    assert mono.utility == F(11, 15)
    assert mono.gap_to_optimal == F(1, 15)
    ones = {
        (i, j)
        for i, row in enumerate(mono.policy.p)
        for j, v in enumerate(row)
        if v == 1
    }
    assert ones == {(1, 2)}


def test_monotone_rate_table_closes_the_gap():
    proc = DecisionProcess(
        h_values=(F(1, 3), F(2, 3)),
        b_values=(F(1, 4), F(3, 4)),
        weight=((F(1, 4),) * 2, (F(1, 4),) * 2),
        rate=((F(1, 10), F(3, 5)), (F(2, 5), F(9, 10))),
        utility=SYM,
    )
    opt = optimal_policy(proc)
    assert opt.is_monotone
    mono = optimal_monotone_policy(proc)
    assert mono.utility == opt.utility
    assert mono.gap_to_optimal == 0


def test_grid_3x5_monotone_strictly_suboptimal():
    proc = build_grid(ConstructionSpec("grid", F(1, 5), F(4, 5), SYM, k=3, m=5))
    opt = optimal_policy(proc)
    mono = optimal_monotone_policy(proc)
    assert mono.utility < opt.utility
    assert mono.gap_to_optimal > 0


def _monotonized(proc):
    """Same process with rates replaced by their running max (row then col)."""
    rate = [list(row) for row in proc.rate]
    for i in range(proc.n_h):
        for j in range(proc.n_b):
            if rate[i][j] is None:
                continue
            above = [
                rate[a][b]
                for a in range(i + 1)
                for b in range(j + 1)
                if rate[a][b] is not None
            ]
            rate[i][j] = max(above)
    return DecisionProcess(
        proc.h_values,
        proc.b_values,
        proc.weight,
        tuple(tuple(row) for row in rate),
        proc.utility,
    )


def test_gap_zero_iff_threshold_set_is_upward_closed():
    rng = random.Random(11)
    seen_equal = seen_gap = False
    for trial in range(40):
        proc = random_process(rng)
        if trial % 2 == 0:
            proc = _monotonized(proc)
        opt = optimal_policy(proc)
        mono = optimal_monotone_policy(proc)
        assert mono.utility <= opt.utility
        if opt.is_monotone:
            assert mono.gap_to_optimal == 0
            seen_equal = True
        else:
            assert mono.gap_to_optimal > 0
            seen_gap = True
    assert seen_equal and seen_gap


def test_solvers_agree_exactly():
    rng = random.Random(23)
    for trial in range(60):
        n_h = rng.randint(2, 5)
        n_b = rng.randint(2, 5)
        proc = random_process(rng, n_h=n_h, n_b=n_b)
        a = optimal_monotone_policy(proc, solver="exhaustive")
        b = optimal_monotone_policy(proc, solver="mincut")
        assert a.utility == b.utility, f"trial {trial}"
        assert expected_utility(proc, a.policy) == a.utility
        assert expected_utility(proc, b.policy) == b.utility
        assert is_monotone(b.policy, proc)


def test_solver_name_is_validated():
    with pytest.raises(PolicyError):
        optimal_monotone_policy(small(), solver="simplex")


def test_large_support_uses_mincut_path():
    rng = random.Random(99)
    proc = DecisionProcess(
        h_values=tuple(F(i + 1, 6) for i in range(5)),
        b_values=tuple(F(j + 1, 6) for j in range(5)),
        weight=((F(1, 25),) * 5,) * 5,
        rate=tuple(
            tuple(_rate_avoiding(rng, F(1, 2)) for _ in range(5)) for _ in range(5)
        ),
        utility=SYM,
    )
    assert sum(1 for _ in proc.support()) > 20
    res = optimal_monotone_policy(proc)  # auto -> mincut
    assert is_monotone(res.policy, proc)
    assert res.utility == expected_utility(proc, res.policy)
    assert res.utility == optimal_monotone_policy(proc, solver="exhaustive").utility


# ---------------------------------------------------------------------------
# monotone_repair


def test_repair_leaves_monotone_policy_alone():
    proc = small()
    pol = constant_policy(proc, F(2, 3))
    out = monotone_repair(proc, pol)
    assert out.p == pol.p


def test_repair_of_small_example_optimal_recovers_best_monotone():
    proc = small()
    out = monotone_repair(proc, optimal_policy(proc).policy)
    assert is_monotone(out, proc)
    assert expected_utility(proc, out) == F(7, 10)
    ones = {
        (i, j) for i, row in enumerate(out.p) for j, v in enumerate(row) if v == 1
    }
    assert ones == {(1, 1), (2, 0), (2, 1), (2, 2)}


def test_repair_with_no_qualifying_level_decides_zero():
    # every rate sits below the threshold, so violating cells collapse to 0
    proc = DecisionProcess(
        h_values=(F(1, 3), F(2, 3)),
        b_values=(F(1, 4), F(3, 4)),
        weight=((F(1, 4),) * 2, (F(1, 4),) * 2),
        rate=((F(2, 5), F(1, 10)), (F(3, 10), F(1, 5))),
        utility=SYM,
    )
    pol = CellPolicy(((1, 0), (0, 1)))
    out = monotone_repair(proc, pol)
    assert is_monotone(out, proc)
    assert out.p[0][0] == 0 and out.p[0][1] == 0
    assert out.p[1][1] == 1  # untouched: (1,1) violates nothing


def test_repair_output_is_always_monotone():
    rng = random.Random(5)
    for _ in range(80):
        proc = random_process(rng)
        p = tuple(
            tuple(
                rng.choice((0, 1, F(1, 2))) if proc.weight[i][j] > 0 else None
                for j in range(proc.n_b)
            )
            for i in range(proc.n_h)
        )
        out = monotone_repair(proc, CellPolicy(p))
        assert is_monotone(out, proc)


def test_repair_on_aligned_processes_meets_utility_bound():
    for seed in range(25):
        for alpha in (F(1, 20), F(1, 10)):
            proc = build_random_aligned(alpha, (3, 3), seed, SYM)
            report = check_alignment(proc, alpha)
            assert report.passed
            opt = optimal_policy(proc)
            repaired = monotone_repair(proc, opt.policy, report)
            assert is_monotone(repaired, proc)
            loss = opt.utility - expected_utility(proc, repaired)
            assert loss <= alignment_utility_bound(alpha, SYM) + F(1, 10**9)


def test_repair_on_perfectly_aligned_process_is_lossless():
    for seed in (0, 1, 2):
        proc = build_random_aligned(0, (3, 3), seed, SYM)
        opt = optimal_policy(proc)
        repaired = monotone_repair(proc, opt.policy, check_alignment(proc, 0))
        assert expected_utility(proc, repaired) == opt.utility


# ---------------------------------------------------------------------------
# bound + result plumbing


def test_alignment_utility_bound_values():
    assert alignment_utility_bound(F(1, 10), SYM) == F(1, 4)
    assert alignment_utility_bound(0, SYM) == 0
    assert alignment_utility_bound(F(1, 10), Utility(2, 0, 1, 0)) == F(7, 20)
    assert alignment_utility_bound(0.1, Utility(2, 0, 1, 0)) == pytest.approx(0.35)


def test_alignment_utility_bound_rejects_bad_alpha():
    with pytest.raises(PolicyError):
        alignment_utility_bound(-0.1, SYM)
    with pytest.raises(PolicyError):
        alignment_utility_bound(2, SYM)


def test_policy_result_serialization():
    res = optimal_monotone_policy(small())
    d = res.to_json_dict()
    assert d["utility"] == 0.7
    assert d["is_monotone"] is True
    assert sorted(map(tuple, d["up_set"])) == [(1, 1), (2, 0), (2, 1), (2, 2)]
    assert d["policy"][0][1] is None


def test_policy_result_rejects_negative_gap():
    pol = constant_policy(small(), 0)
    with pytest.raises(PolicyError):
        PolicyResult(policy=pol, utility=1, is_monotone=True, gap_to_optimal=-0.5)
