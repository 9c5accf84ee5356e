import numpy as np
import pytest

from treeg.continuous import ContinuousCore, GaussianMixtureData, GMMDenoiser
from treeg.discrete import DiscreteCore, TabularDataDistribution, TabularDenoiser
from treeg.guidance import GuidanceConfig
from treeg.objectives import (
    SoftCountPredictor,
    TokenCountPredictor,
    count_above_threshold_rule,
    token_count_rule,
)
from treeg.rng import stream
from treeg.schedules import build_schedule
from treeg.tree_search import (
    ConfigurationError,
    budget_pairs,
    predict_cost,
    run_tree_search,
    select_top,
    sweep_fixed_budget,
)


def discrete_toy(T=32):
    data = TabularDataDistribution.count_weighted(8, 4, [0.0, 0.5, 0.5, 0.5], 0.3)
    return DiscreteCore(T, TabularDenoiser(data)), token_count_rule(0, 6), TokenCountPredictor(0, 6)


def continuous_toy(D=16, T=100):
    sched = build_schedule("linear-alphabar", T)
    gmm = GaussianMixtureData([0.5, 0.5], np.stack([-np.ones(D), np.ones(D)]), [0.5, 0.5])
    return ContinuousCore(sched, GMMDenoiser(gmm, sched)), count_above_threshold_rule(0.0, 12), \
        SoftCountPredictor(0.0, 12)


def test_select_top_tie_break():
    v = np.array([1.0, 3.0, 3.0, np.nan, 3.0])
    parents = np.array([0, 1, 0, 0, 1])
    branches = np.array([0, 1, 1, 2, 0])
    np.testing.assert_array_equal(select_top(v, parents, branches, 3), [2, 4, 1])


def test_unguided_trajectory_equality_continuous():
    core, obj, _ = continuous_toy(4, 20)
    seed = 3
    x, tr = run_tree_search(core, obj, GuidanceConfig(family="sample-current"), 1, 1, seed)
    s = core.prior(stream(seed, "init", 0))
    for step in range(core.T):
        s = core.step(s, stream(seed, "propose", step, 0, 0))
    np.testing.assert_array_equal(x, s.x)


def test_unguided_trajectory_equality_discrete():
    core, obj, _ = discrete_toy(12)
    for fam in ("sample-current", "none"):
        seed = 5
        x, _ = run_tree_search(core, obj, GuidanceConfig(family=fam), 1, 1, seed)
        s = core.prior()
        role = "propose" if fam == "sample-current" else "unguided"
        for step in range(core.T):
            path = (role, step, 0, 0) if fam == "sample-current" else (role, step, 0)
            s = core.step(s, stream(seed, *path))
        np.testing.assert_array_equal(x, s.tokens)


def test_best_of_n_reduction():
    # K = 1 keeps every member; the engine only reorders them.  Replaying the
    # recorded order with plain sampler steps must give the same final set.
    core, obj, _ = discrete_toy(12)
    seed, A = 2, 6
    x, tr = run_tree_search(core, obj, GuidanceConfig(family="sample-current", n_mc=2), A, 1, seed)
    states = [core.prior() for _ in range(A)]
    for rec in tr.steps:
        assert sorted(rec.selected.tolist()) == list(range(A))
        nxt = [core.step(s, stream(seed, "propose", rec.step, i, 0)) for i, s in enumerate(states)]
        states = [nxt[k] for k in rec.selected]
    finals = [s.tokens for s in states]
    np.testing.assert_array_equal(tr.final_values, [obj(f) for f in finals])
    assert tr.final_fy == max(obj(f) for f in finals)
    np.testing.assert_array_equal(x, finals[tr.best_index])


@pytest.mark.parametrize("fam", ["sample-current", "sample-destination", "gradient"])
def test_active_set_size_and_final_max(fam):
    core, obj, pred = discrete_toy(10)
    _, tr = run_tree_search(core, obj, GuidanceConfig(family=fam, n_mc=4), 3, 2, 0, predictor=pred)
    assert all(r.selected.size == 3 for r in tr.steps)
    assert tr.final_values.size == 3
    assert tr.final_fy == tr.final_values.max()
    for r in tr.steps:
        kept = r.values[r.selected]
        assert np.all(kept >= np.max(np.delete(r.values, r.selected), initial=-np.inf))


def test_window_skips_steps():
    core, obj, _ = discrete_toy(10)
    cfg = GuidanceConfig(family="sample-current", window=(0.5, 0.8))
    _, tr = run_tree_search(core, obj, cfg, 2, 3, 0)
    assert [r.step for r in tr.steps] == [5, 6, 7, 8]


@pytest.mark.parametrize("kind", ["discrete", "continuous"])
def test_replay_and_parallel_identical(kind):
    core, obj, pred = discrete_toy(10) if kind == "discrete" else continuous_toy(6, 20)
    for fam in ("sample-current", "sample-destination", "gradient"):
        cfg = GuidanceConfig(family=fam, n_mc=4, n_iter=2, dsg=kind == "continuous")
        xa, a = run_tree_search(core, obj, cfg, 3, 3, 17, predictor=pred)
        xb, b = run_tree_search(core, obj, cfg, 3, 3, 17, predictor=pred)
        xc, c = run_tree_search(core, obj, cfg, 3, 3, 17, predictor=pred, workers=4)
        assert np.array_equal(xa, xb) and np.array_equal(xa, xc)
        for ra, rb, rc in zip(a.steps, b.steps, c.steps):
            assert np.array_equal(ra.values, rb.values) and np.array_equal(ra.values, rc.values)
            assert np.array_equal(ra.selected, rc.selected)


def test_gradient_needs_predictor():
    core, obj, _ = discrete_toy(5)
    with pytest.raises(ConfigurationError):
        run_tree_search(core, obj, GuidanceConfig(family="gradient"), 1, 1, 0)
    with pytest.raises(ConfigurationError):
        run_tree_search(core, obj, GuidanceConfig(), 0, 1, 0)


def test_predict_cost_examples():
    cfg = GuidanceConfig(family="sample-destination", n_iter=1)
    for kind in ("discrete", "continuous"):
        c = predict_cost(cfg, 1, 16, 100, kind)
        assert (c.model, c.pred, c.backprop) == (100, 1600, 0)
    g = GuidanceConfig(family="gradient", n_mc=8)
    c = predict_cost(g, 3, 1, 1, "discrete")
    assert c.as_tuple() == (3 * 1, 3 * 8, 3)
    for fam in ("sample-current", "sample-destination", "gradient"):
        cfg = GuidanceConfig(family=fam, n_mc=5, n_iter=2, window=(0.1, 0.7))
        a = predict_cost(cfg, 2, 4, 40, "continuous").as_tuple()
        b = predict_cost(cfg, 4, 4, 40, "continuous").as_tuple()
        assert b == tuple(2 * v for v in a)
    with pytest.raises(ValueError):
        predict_cost(GuidanceConfig(family="gradient", ratio_mode="exact"), 1, 1, 10, "discrete")


def test_budget_pairs():
    assert budget_pairs(1) == [(1, 1)]
    assert budget_pairs(16) == [(1, 16), (2, 8), (4, 4), (8, 2), (16, 1)]
    with pytest.raises(ValueError):
        budget_pairs(0)


def test_sweep_rows_share_budget():
    core, obj, _ = discrete_toy(8)
    rows = sweep_fixed_budget(core, obj, GuidanceConfig(n_mc=2), 4, range(3))
    assert [(r["A"], r["K"]) for r in rows] == [(1, 4), (2, 2), (4, 1)]
    assert all(r["A"] * r["K"] == 4 and r["n"] == 3 for r in rows)


def test_exact_ratio_mode_runs():
    core, obj, pred = discrete_toy(6)
    cfg = GuidanceConfig(family="gradient", ratio_mode="exact", n_mc=4, gamma=2.0)
    x, tr = run_tree_search(core, obj, cfg, 2, 2, 0, predictor=pred)
    assert np.all(x != core.S) and tr.cost.backprop == 0


def _mean_se(v):
    v = np.asarray(v)
    return v.mean(), v.std(ddof=1) / np.sqrt(v.size)


@pytest.mark.parametrize("kind", ["discrete", "continuous"])
def test_anytime_dominance_in_K(kind):
    core, obj, _ = discrete_toy(16) if kind == "discrete" else continuous_toy(16, 50)
    cfg = GuidanceConfig(family="sample-current", n_mc=8)
    means = []
    for K in (1, 2, 4, 8):
        m, se = _mean_se([run_tree_search(core, obj, cfg, 1, K, s, record=False)[1].final_fy
                          for s in range(200)])
        means.append((m, se))
    for (m0, s0), (m1, s1) in zip(means, means[1:]):
        assert m1 >= m0 - 2 * np.hypot(s0, s1)
