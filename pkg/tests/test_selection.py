import math
from decimal import Decimal
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cartsel.cart import empirical_contrast, tree_from_dict
from cartsel.data import Dataset, Framework, Method, gen_breiman, split_three
from cartsel.selection import (
    DEFAULT_ALPHA_GRID,
    DEFAULT_BETA_GRID,
    EstimatorFamily,
    ExhaustiveCapError,
    ModelChoice,
    PenaltySpec,
    RunConfig,
    Theoretical,
    all_subsets,
    build_collection,
    final_holdout,
    grid_select,
    leaf_coefficient,
    penalty_value,
    run_procedure,
    select_model,
    select_tree,
)
from oracles import brute_force_select

REG, M1, M2 = Framework.REGRESSION, Method.M1, Method.M2


def spec(method=M1, alpha=1.0, beta=1.0, n_eff=100, p=10, **kw):
    return PenaltySpec(REG, method, alpha, beta, n_eff, p, **kw)


def test_penalty_m1_worked_value():
    assert abs(penalty_value(spec(), 2, 5) - (0.05 + 0.02 * (1 + math.log(5)))) <= 1e-12
    ref = Decimal("0.05") + Decimal("0.02") * (1 + Decimal(5).ln())
    assert abs(penalty_value(spec(), 2, 5) - float(ref)) <= 1e-12
    assert str(ref).startswith("0.102188758")


def test_penalty_m1_full_subset():
    assert penalty_value(spec(alpha=0.7, beta=3.0), 10, 4) == pytest.approx(0.7 * 4 / 100 + 3.0 * 10 / 100, abs=1e-15)


def test_penalty_m2_worked_value():
    value = penalty_value(spec(M2, beta=0.0), 1, 3)
    # High-precision reference for 0.03 * (1 + 2 * (1 + ln 50)).
    ref = Decimal("0.03") * (1 + 2 * (1 + Decimal(50).ln()))
    assert abs(value - float(ref)) <= 1e-12


@given(
    alpha=st.floats(1e-6, 100), beta=st.floats(0, 100), n=st.integers(3, 10_000),
    p=st.integers(1, 30), t=st.integers(1, 200), data=st.data(),
)
def test_m2_exceeds_m1(alpha, beta, n, p, t, data):
    m = data.draw(st.integers(1, min(p, n - 1)))
    assert penalty_value(spec(M2, alpha, beta, n, p), m, t) > penalty_value(spec(M1, alpha, beta, n, p), m, t)


@given(n=st.integers(3, 50), m=st.integers(1, 200))
def test_m2_tree_factor_boundary(n, m):
    # The M2 leaf factor exceeds one exactly when m + 1 < e * n.
    above = leaf_coefficient(spec(M2, 1.0, 0.0, n, 200), m) > leaf_coefficient(spec(M1, 1.0, 0.0, n, 200), m)
    assert above == (1 + math.log(n / (m + 1)) > 0)


def test_penalty_rejects_bad_sizes():
    with pytest.raises(ValueError):
        penalty_value(spec(), 0, 1)
    with pytest.raises(ValueError):
        penalty_value(spec(), 11, 1)
    with pytest.raises(ValueError):
        penalty_value(spec(), 1, 0)
    with pytest.raises(ValueError):
        spec(alpha=-1.0)


def test_theoretical_multipliers():
    th = Theoretical(sigma2=2.0, rho=0.5, R=4.0, h=0.25)
    assert spec(theoretical=th).multiplier() == 2.0 + 0.5 * 4.0
    cls = PenaltySpec(Framework.CLASSIFICATION, M1, 1, 1, 100, 10, th)
    assert cls.multiplier() == 4.0
    m2 = spec(M2, n_eff=1000, theoretical=th).multiplier()
    assert m2 == pytest.approx(2.0 * (1 + 0.5 ** 4 / 4.0 * math.log(100) ** 2) + 2.0)
    assert leaf_coefficient(spec(theoretical=th), 3) == pytest.approx(4.0 / 100)


@pytest.fixture(scope="module")
def breiman_setup():
    ds = gen_breiman(400, 21)
    split = split_three(ds, (0.5, 0.25, 0.25), 21, "m1")
    return ds, split, build_collection(ds, split, all_subsets(3), 5)


def test_select_tree_extremes(breiman_setup):
    ds, split, coll = breiman_setup
    seq = coll[(0, 1, 2)]
    assert select_tree(seq, spec(alpha=0.0, n_eff=100), 3) is seq.subtrees[0]
    assert select_tree(seq, spec(alpha=1e6, n_eff=100), 3).n_leaves == 1
    # lambda = alpha / n equal to a critical value gives the smaller member.
    k = len(seq) // 2
    s = spec(alpha=seq.criticals[k] * 100, n_eff=100)
    assert select_tree(seq, s, 3) is seq.subtrees[k]


def test_collection_keys(breiman_setup):
    _, _, coll = breiman_setup
    assert len(coll) == 7
    assert set(coll) == {(0,), (1,), (2,), (0, 1), (0, 2), (1, 2), (0, 1, 2)}
    for subset, seq in coll.items():
        assert seq.subtrees[0].used_variables() <= set(subset)


def test_collection_parallel_identical(breiman_setup):
    ds, split, coll = breiman_setup
    par = build_collection(ds, split, all_subsets(3), 5, jobs=3)
    for key in coll:
        assert par[key].criticals == coll[key].criticals
        assert par[key].risks == coll[key].risks


def test_all_subsets_cap():
    assert len(all_subsets(10)) == 1023
    with pytest.raises(ExhaustiveCapError, match="force-exhaustive"):
        all_subsets(25)
    assert len(all_subsets(3, cap=2, force=True)) == 7


def _exact_x1_data():
    rng = np.random.default_rng(3)
    x = rng.integers(0, 3, size=(300, 2)).astype(float)
    return Dataset(x, x[:, 0].copy(), "regression")


def test_select_model_exact_first_variable():
    ds = _exact_x1_data()
    split = split_three(ds, (0.5, 0.25, 0.25), 3, "m1")
    coll = build_collection(ds, split, all_subsets(2), 1)
    s = PenaltySpec(REG, M1, 0.5, 2.0, len(split.i2), 2)
    choice = select_model(coll, s)
    assert choice.subset == (0,)
    assert choice.criterion == brute_force_select(coll, s)[0]


def test_select_model_large_beta_gives_one_variable(breiman_setup):
    _, split, coll = breiman_setup
    choice = select_model(coll, spec(alpha=0.0, beta=1e9, n_eff=len(split.i2), p=3))
    assert len(choice.subset) == 1


def test_select_model_zero_penalty_ties():
    ds = _exact_x1_data()
    split = split_three(ds, (0.5, 0.25, 0.25), 3, "m1")
    coll = build_collection(ds, split, all_subsets(2), 1)
    choice = select_model(coll, PenaltySpec(REG, M1, 0.0, 0.0, len(split.i2), 2))
    # {0} and {0,1} both fit exactly; the smaller subset wins, then the smaller tree.
    assert choice.subset == (0,)
    assert choice.tree.n_leaves == 3


@pytest.mark.parametrize("method", ["m1", "m2"])
def test_two_step_equals_brute_force(method):
    for seed in range(5):
        ds = gen_breiman(300, 100 + seed)
        fr = (0.5, 0.25, 0.25) if method == "m1" else (0.75, 0.0, 0.25)
        split = split_three(ds, fr, seed, method)
        coll = build_collection(ds, split, all_subsets(3), 5)
        base = PenaltySpec(REG, method, 0.0, 0.0, len(split.pruning_rows), 3)
        for a in (0.0, 0.05, 0.5, 2.0, 20.0):
            for b in (0.0, 1.0, 10.0, 100.0, 1000.0):
                s = replace(base, alpha=a, beta=b)
                choice = select_model(coll, s)
                crit, subset, k = brute_force_select(coll, s)
                assert choice.criterion == crit
                assert choice.key == (subset, k)


def test_grid_single_point(breiman_setup):
    _, split, coll = breiman_setup
    fam = grid_select(coll, [1.0], [10.0], spec(n_eff=len(split.i2), p=3))
    assert fam.K == 1 and len(fam.entries) == 1


def test_grid_dedup(breiman_setup):
    _, split, coll = breiman_setup
    fam = grid_select(coll, [1e6], [1e6, 2e6], spec(n_eff=len(split.i2), p=3))
    assert len(fam.entries) == 2 and fam.K == 1


def test_grid_rejects_empty(breiman_setup):
    _, split, coll = breiman_setup
    with pytest.raises(ValueError):
        grid_select(coll, [], [1.0], spec(n_eff=len(split.i2), p=3))


def _constant_model(subset, value):
    tree = tree_from_dict({"framework": "regression", "subset": list(subset), "n_total": 1,
                           "n_min": 1, "root": {"value": value, "count": 1}})
    return ModelChoice(tuple(subset), 0, tree, 0.0)


def _holdout_setup(models):
    ds = Dataset(np.zeros((8, 3)), np.zeros(8), "regression")
    split = split_three(ds, (0.5, 0.25, 0.25), 0, "m1")
    fam = EstimatorFamily(
        {(float(i), 0.0): m.key for i, m in enumerate(models)},
        {m.key: m for m in models},
    )
    return final_holdout(fam, ds, split)


def test_final_holdout_smallest_contrast():
    res = _holdout_setup([_constant_model((0,), math.sqrt(0.1)), _constant_model((1,), math.sqrt(0.2))])
    assert res.subset == (0,)
    assert res.holdout_risk == pytest.approx(0.1)


def test_final_holdout_tie_prefers_smaller_subset():
    res = _holdout_setup([_constant_model((0, 1, 2), 0.5), _constant_model((0, 1), 0.5)])
    assert res.subset == (0, 1)
    assert (res.alpha, res.beta) == (1.0, 0.0)


def test_reported_pair_is_smallest_preimage(breiman_setup):
    ds, split, coll = breiman_setup
    fam = grid_select(coll, [0.0, 1.0, 1e6], [0.0, 1e6], spec(n_eff=len(split.i2), p=3))
    res = final_holdout(fam, ds, split)
    pre = [pair for pair, key in fam.entries.items() if key == (res.subset, fam.models[
        next(k for k in fam.models if k[0] == res.subset and fam.models[k].tree is res.tree)].index)]
    assert (res.alpha, res.beta) == min(pre)
    assert res.holdout_risk == min(empirical_contrast(m.tree, ds, split.i3) for m in fam.distinct_models)


@settings(max_examples=10)
@given(seed=st.integers(0, 10_000), method=st.sampled_from(["m1", "m2"]))
def test_monotone_in_alpha_and_beta(seed, method):
    ds = gen_breiman(300, seed)
    fr = (0.5, 0.25, 0.25) if method == "m1" else (0.75, 0.0, 0.25)
    split = split_three(ds, fr, seed, method)
    coll = build_collection(ds, split, all_subsets(4), 5)
    base = PenaltySpec(REG, method, 0.0, 0.0, len(split.pruning_rows), 4)
    for subset, seq in coll.items():
        sizes = [select_tree(seq, replace(base, alpha=a), len(subset)).n_leaves for a in DEFAULT_ALPHA_GRID]
        assert all(x >= y for x, y in zip(sizes, sizes[1:]))
    f = lambda m: m * (1 + math.log(4 / m))
    for a in DEFAULT_ALPHA_GRID:
        fs = [f(len(select_model(coll, replace(base, alpha=a, beta=b)).subset)) for b in DEFAULT_BETA_GRID]
        assert all(x >= y - 1e-12 for x, y in zip(fs, fs[1:]))


def test_run_procedure_deterministic_and_exact():
    ds = gen_breiman(500, 31)
    a = run_procedure(ds, RunConfig(seed=31))
    b = run_procedure(ds, RunConfig(seed=31))
    assert a.to_dict() == b.to_dict()
    assert a.holdout_risk == min(a.holdout_risks.values())
    assert a.subsets_processed == len(a.pstar.sets) <= 10
    assert set(a.subset) in [set(s) for s in a.pstar.sets]
    doc = a.to_dict()
    assert set(doc) >= {"chosen", "holdout_risk", "grid_map", "K"}
    assert len(doc["grid_map"]) == len(DEFAULT_ALPHA_GRID) * len(DEFAULT_BETA_GRID)


def test_run_procedure_m2():
    ds = gen_breiman(500, 32)
    res = run_procedure(ds, RunConfig(method=Method.M2, seed=32))
    assert res.config["fractions"] == [0.75, 0.0, 0.25]
    assert res.holdout_risk == min(res.holdout_risks.values())


def test_run_procedure_exhaustive_small():
    rng = np.random.default_rng(5)
    x = rng.integers(-1, 2, size=(400, 4)).astype(float)
    ds = Dataset(x, 2 * x[:, 0] + x[:, 1] + rng.normal(size=400), "regression")
    res = run_procedure(ds, RunConfig(seed=5, mode="exhaustive"))
    assert res.subsets_processed == 15
    assert res.pstar is None and res.importance is not None


def test_run_procedure_cap_checked_first():
    ds = Dataset(np.zeros((10, 25)), np.zeros(10), "regression")
    with pytest.raises(ExhaustiveCapError):
        run_procedure(ds, RunConfig(mode="exhaustive"))


def test_sigma2_plugin_changes_scale():
    ds = gen_breiman(500, 33)
    res = run_procedure(ds, RunConfig(seed=33, sigma2_plugin=True))
    assert res.holdout_risk == min(res.holdout_risks.values())


def test_classification_run():
    rng = np.random.default_rng(6)
    x = rng.integers(0, 3, size=(600, 4)).astype(float)
    y = ((x[:, 0] + 0.5 * x[:, 1] + rng.normal(scale=0.5, size=600)) > 1.5).astype(float)
    ds = Dataset(x, y, "classification")
    res = run_procedure(ds, RunConfig(seed=6))
    assert 0.0 <= res.holdout_risk <= 0.5
    assert 0 in res.subset
