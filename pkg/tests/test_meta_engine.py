import dataclasses
from types import SimpleNamespace

import numpy as np
import pytest

from metabearing import data
from metabearing import model as mdl
from metabearing.meta_engine import (
    AdaptationError,
    InnerLRTable,
    LeakageError,
    MetaConfig,
    OptimizerState,
    inner_adapt,
    meta_step,
    meta_test,
    meta_train,
    outer_optimizer_step,
)
from metabearing.tensor_core import ParamSet, ShapeError, Tape, Tensor, backward, ops


def scalar_theta(value):
    return ParamSet([("t", Tensor(np.array(value, dtype=np.float64), requires_grad=True))])


def quadratic(params, target, _):
    d = ops.sub(params["t"], Tensor(np.array(target, dtype=np.float64)))
    return ops.mul(d, d)


def linear_sq(params, x, y):
    r = ops.sub(ops.scale(params["t"], x), Tensor(np.array(y, dtype=np.float64)))
    return ops.mul(r, r)


def task(a, b):
    return SimpleNamespace(support_x=a, support_y=None, query_x=b, query_y=None)


def cfg_for(**kw):
    base = dict(inner_lr_mode="fixed", alpha=0.25, meta_batch=1, outer_optimizer="sgd", outer_lr=0.1)
    base.update(kw)
    return MetaConfig(**base)


# -------------------------------------------------------------- inner loop


@pytest.mark.parametrize("steps, expected", [(1, 0.8), (2, 0.64)])
def test_inner_adapt_scalar_closed_form(steps, expected):
    theta = scalar_theta(1.0)
    with Tape() as tape:
        res = inner_adapt(theta, 1.0, 0.0, 0.1, steps, tape, loss_fn=linear_sq)
    assert res.phi["t"].item() == pytest.approx(expected, abs=1e-15)
    assert len(res.support_loss_trace) == steps


def test_zero_rate_keeps_theta():
    theta = scalar_theta(0.7)
    res = inner_adapt(theta, 1.0, 0.0, 0.0, 1, track_for_meta=False, loss_fn=linear_sq)
    assert res.phi["t"].item() == 0.7


@pytest.fixture(scope="module")
def tiny_pools(tmp_path_factory):
    root = data.write_corpus(tmp_path_factory.mktemp("c"), data.cwru_layout(6), segments_per_record=3, seed=1)
    return data.load_corpus(root)


def model_task(pools, classes, seed, k=1, q=2):
    return data.sample_episode(pools, data.EpisodeSpec(len(classes), k, q, tuple(classes)), seed)


def test_update_equals_theta_minus_alpha_grad(tiny_pools):
    theta = mdl.init_params(mdl.ModelSpec(2), 0, dtype=np.float64)
    ep = model_task(tiny_pools, (1, 2), 0)
    x = ep.support_x.astype(np.float64)
    with Tape() as tape:
        res = inner_adapt(theta, x, ep.support_y, 0.01, 1, tape)
    # Independent gradient on a fresh tape.
    fresh = theta.detached(requires_grad=True)
    with Tape() as t2:
        loss = mdl.loss(mdl.forward(fresh, x), ep.support_y)
    g = backward(t2, loss, fresh)
    for n in theta.names:
        np.testing.assert_allclose(res.phi[n].data, theta[n].data - 0.01 * g[n].data, atol=1e-6, rtol=0)


def test_tracked_and_detached_adaptation_agree(tiny_pools):
    theta = mdl.init_params(mdl.ModelSpec(2), 0, dtype=np.float64)
    ep = model_task(tiny_pools, (3, 4), 1)
    x = ep.support_x.astype(np.float64)
    table = InnerLRTable.filled(theta.names, 2, 0.02, dtype=np.float64)
    with Tape() as tape:
        a = inner_adapt(theta, x, ep.support_y, table.leaves(True), 2, tape)
    b = inner_adapt(theta, x, ep.support_y, table, 2, track_for_meta=False)
    for n in theta.names:
        np.testing.assert_allclose(a.phi[n].data, b.phi[n].data, rtol=1e-12, atol=1e-12)


@pytest.mark.filterwarnings("ignore:overflow")
def test_non_finite_loss_aborts_adaptation():
    theta = scalar_theta(1e200)
    with pytest.raises(AdaptationError, match="inner step 1/1"):
        inner_adapt(theta, 0.0, None, 0.1, 1, track_for_meta=False, loss_fn=quadratic)


def test_track_for_meta_needs_tape():
    with pytest.raises(ValueError, match="tape"):
        inner_adapt(scalar_theta(0.0), 1.0, None, 0.1, 1, loss_fn=quadratic)


# ----------------------------------------------------- meta-gradient oracles


def test_quadratic_second_order_meta_gradient():
    _, _, _, diag = meta_step(scalar_theta(0.0), None, [task(1.0, 0.0)], cfg_for(), None, loss_fn=quadratic)
    # phi = 0.5 and 2*phi*(1-2*alpha) = 0.5
    assert abs(diag.grads["t"] - 0.5) < 1e-10


def test_quadratic_first_order_meta_gradient():
    _, _, _, diag = meta_step(scalar_theta(0.0), None, [task(1.0, 0.0)], cfg_for(order="first"), None,
                              loss_fn=quadratic)
    assert abs(diag.grads["t"] - 1.0) < 1e-10


def test_sgd_outer_step_on_quadratic():
    theta, _, _, _ = meta_step(scalar_theta(0.0), None, [task(1.0, 0.0)], cfg_for(), None, loss_fn=quadratic)
    assert theta["t"].item() == pytest.approx(-0.05, abs=1e-15)


def test_two_step_quadratic_against_hand_derivation():
    # phi1 = (1-2a)theta + 2a*a_, phi2 = (1-2a)phi1 + 2a*a_;
    # dL/dtheta = 2(phi2-b)(1-2a)^2 (second order) or 2(phi2-b) (first order).
    alpha, a, b = 0.25, 1.0, 0.0
    phi1 = 2 * alpha * a
    phi2 = (1 - 2 * alpha) * phi1 + 2 * alpha * a
    for order, expected in (("second", 2 * (phi2 - b) * (1 - 2 * alpha) ** 2), ("first", 2 * (phi2 - b))):
        _, _, _, diag = meta_step(scalar_theta(0.0), None, [task(a, b)], cfg_for(inner_steps=2, order=order),
                                  None, loss_fn=quadratic)
        assert abs(diag.grads["t"] - expected) < 1e-10
    assert (phi2, 2 * phi2 * 0.25) == (0.75, 0.375)


def test_two_step_rate_gradients():
    # With rates r1, r2: dL/dr2 = 2(phi2-b) * -2(phi1-a), dL/dr1 = 2(phi2-b)(1-2 r2) * -2(theta-a).
    table = InnerLRTable.filled(["t"], 2, 0.25, dtype=np.float64)
    cfg = cfg_for(inner_lr_mode="learnable", inner_steps=2)
    _, new_table, _, diag = meta_step(scalar_theta(0.0), table, [task(1.0, 0.0)], cfg, None, loss_fn=quadratic)
    np.testing.assert_allclose(diag.rate_grad, [[1.5, 1.5]], atol=1e-12)
    np.testing.assert_allclose(new_table.rates, [[0.25 - 0.15, 0.25 - 0.15]], atol=1e-12)


def test_identical_tasks_scale_the_meta_gradient():
    one = meta_step(scalar_theta(0.3), None, [task(1.0, -0.2)], cfg_for(), None, loss_fn=quadratic)[3]
    five = meta_step(scalar_theta(0.3), None, [task(1.0, -0.2)] * 5, cfg_for(meta_batch=5), None,
                     loss_fn=quadratic)[3]
    assert five.grads["t"] == pytest.approx(5 * one.grads["t"], abs=1e-12)
    assert five.query_loss == pytest.approx(one.query_loss)
    assert five.query_loss_sum == pytest.approx(5 * one.query_loss)


def test_sum_aggregation_on_model(tiny_pools):
    theta = mdl.init_params(mdl.ModelSpec(2), 0, dtype=np.float64)
    tasks = [model_task(tiny_pools, (1, 2), 0), model_task(tiny_pools, (3, 4), 1)]
    tasks = [dataclasses.replace(t, support_x=t.support_x.astype(np.float64),
                                 query_x=t.query_x.astype(np.float64)) for t in tasks]
    cfg = MetaConfig(meta_batch=2, inner_lr_mode="learnable", outer_optimizer="sgd")
    table = InnerLRTable.filled(theta.names, 1, 0.01, dtype=np.float64)
    both = meta_step(theta, table, tasks, cfg, None)[3]
    single = [meta_step(theta, table, [t], dataclasses.replace(cfg, meta_batch=1), None)[3] for t in tasks]
    for n in theta.names:
        np.testing.assert_allclose(both.grads[n], single[0].grads[n] + single[1].grads[n], atol=1e-6, rtol=0)
    np.testing.assert_allclose(both.rate_grad, single[0].rate_grad + single[1].rate_grad, atol=1e-6)


def test_threaded_meta_step_matches_sequential(tiny_pools):
    theta = mdl.init_params(mdl.ModelSpec(2), 0)
    tasks = [model_task(tiny_pools, (1, 2), s) for s in range(3)]
    table = InnerLRTable.filled(theta.names, 1)
    cfg = MetaConfig(meta_batch=3)
    seq = meta_step(theta, table, tasks, cfg, None)
    par = meta_step(theta, table, tasks, dataclasses.replace(cfg, threads=3), None)
    for n in theta.names:
        assert seq[0][n].data.tobytes() == par[0][n].data.tobytes()
    assert seq[1].rates.tobytes() == par[1].rates.tobytes()


def test_meta_step_checks_batch_size():
    with pytest.raises(ValueError, match="expects 2 tasks"):
        meta_step(scalar_theta(0.0), None, [task(1.0, 0.0)], cfg_for(meta_batch=2), None, loss_fn=quadratic)


def test_lr_clamp():
    table = InnerLRTable.filled(["t"], 1, 1e-5, dtype=np.float64)
    cfg = cfg_for(inner_lr_mode="learnable", alpha=1e-5, outer_lr=10.0, lr_clamp=1e-6)
    # Pushes the rate strongly negative without the clamp.
    _, new, _, _ = meta_step(scalar_theta(0.0), table, [task(1.0, -2.0)], cfg, None, loss_fn=quadratic)
    assert new.rates[0, 0] == 1e-6
    _, free, _, _ = meta_step(scalar_theta(0.0), table, [task(1.0, -2.0)], dataclasses.replace(cfg, lr_clamp=None),
                              None, loss_fn=quadratic)
    assert free.rates[0, 0] < 0


# -------------------------------------------------------------- optimizers


def test_sgd_definition():
    out, _ = outer_optimizer_step("sgd", {"p": np.array(1.0)}, {"p": np.array(2.0)}, None, 0.1)
    assert out["p"] == pytest.approx(0.8)


@pytest.mark.parametrize("g", [1e-3, 0.5, 40.0, -7.0])
def test_adam_first_step_is_about_lr(g):
    out, state = outer_optimizer_step("adam", {"p": np.array(0.0)}, {"p": np.array(g)}, None, 0.01)
    assert abs(out["p"]) == pytest.approx(0.01, rel=1e-4)
    assert np.sign(out["p"]) == -np.sign(g) and state.step == 1


def test_zero_gradient_leaves_parameters():
    p = {"p": np.array([1.0, -2.0])}
    zero = {"p": np.zeros(2)}
    for kind in ("sgd", "rmsprop", "adam"):
        out, _ = outer_optimizer_step(kind, p, zero, None, 0.1)
        np.testing.assert_array_equal(out["p"], p["p"])
    _, state = outer_optimizer_step("rmsprop", p, {"p": np.ones(2)}, None, 0.1)
    out, later = outer_optimizer_step("rmsprop", p, zero, state, 0.1)
    np.testing.assert_array_equal(out["p"], p["p"])
    np.testing.assert_allclose(later.v["p"], 0.9 * state.v["p"])
    _, state = outer_optimizer_step("adam", p, {"p": np.ones(2)}, None, 0.1)
    _, later = outer_optimizer_step("adam", p, zero, state, 0.1)
    np.testing.assert_allclose(later.m["p"], 0.9 * state.m["p"])
    np.testing.assert_allclose(later.v["p"], 0.999 * state.v["p"])


def test_rmsprop_rule():
    out, state = outer_optimizer_step("rmsprop", {"p": np.array(1.0)}, {"p": np.array(2.0)}, None, 0.01)
    v = 0.1 * 4.0
    assert state.v["p"] == pytest.approx(v)
    assert out["p"] == pytest.approx(1.0 - 0.01 * 2.0 / (np.sqrt(v) + 1e-8))


def test_optimizer_state_mismatch():
    state = OptimizerState("adam", 1, {"p": np.zeros(3)}, {"p": np.zeros(3)})
    with pytest.raises(ShapeError, match="state"):
        outer_optimizer_step("adam", {"p": np.zeros(2)}, {"p": np.zeros(2)}, state, 0.1)
    with pytest.raises(ValueError, match="not aligned"):
        outer_optimizer_step("sgd", {"p": np.zeros(2)}, {"q": np.zeros(2)}, None, 0.1)
    with pytest.raises(ValueError, match="'sgd'"):
        outer_optimizer_step("sgd", {"p": np.zeros(2)}, {"p": np.zeros(2)}, state, 0.1)


# ---------------------------------------------------------- configuration


def test_config_defaults_and_validation():
    cfg = MetaConfig()
    assert (cfg.inner_steps, cfg.alpha, cfg.outer_lr, cfg.meta_batch, cfg.iterations) == (1, 0.01, 0.001, 25, 1500)
    assert cfg.order == "second" and cfg.outer_optimizer == "adam"
    assert MetaConfig.from_dict(cfg.to_dict()) == cfg
    for bad in (dict(inner_steps=0), dict(alpha=0), dict(outer_lr=-1), dict(meta_batch=0),
                dict(outer_optimizer="lbfgs"), dict(order="third")):
        with pytest.raises(ValueError):
            MetaConfig(**bad)
    with pytest.raises(ValueError, match="unknown"):
        MetaConfig.from_dict({"beta": 0.1})


def test_rate_table_shape_checked():
    with pytest.raises(ShapeError):
        InnerLRTable(("a", "b"), np.zeros((3, 1)))
    with pytest.raises(ValueError, match="finite"):
        InnerLRTable(("a",), np.array([[np.nan]]))
    table = InnerLRTable.filled(("a", "b"), 3)
    assert table.rates.shape == (2, 3) and np.all(table.rates == np.float32(0.01))


# --------------------------------------------------------- train and test


def small_run(pools, **kw):
    base = dict(meta_batch=2, iterations=3, seed=5)
    base.update(kw)
    cfg = MetaConfig(**base)
    spec = data.EpisodeSpec(2, 1, 2, (1, 2, 3, 4))
    return meta_train(cfg, pools, spec)


def test_zero_iterations_returns_initial_theta(tiny_pools):
    res = small_run(tiny_pools, iterations=0)
    init = mdl.init_params(mdl.ModelSpec(2), [5, 0])
    assert all(res.theta[n].data.tobytes() == init[n].data.tobytes() for n in init.names)
    assert res.curve == []


def test_training_is_deterministic_and_rates_move(tiny_pools):
    a, b = small_run(tiny_pools), small_run(tiny_pools)
    assert a.curve == b.curve
    assert all(a.theta[n].data.tobytes() == b.theta[n].data.tobytes() for n in a.theta.names)
    assert np.abs(a.lr_table.rates - 0.01).max() > 1e-4
    assert set(a.curve[0]) == {"iter", "query_loss", "query_acc", "lr_table"}
    assert np.array(a.curve[-1]["lr_table"]).shape == (14, 1)


def test_fixed_mode_equals_frozen_learnable(tiny_pools):
    fixed = small_run(tiny_pools, inner_lr_mode="fixed")
    frozen = small_run(tiny_pools, inner_lr_mode="learnable", freeze_lr=True)
    assert all(fixed.theta[n].data.tobytes() == frozen.theta[n].data.tobytes() for n in fixed.theta.names)
    assert [r["query_loss"] for r in fixed.curve] == [r["query_loss"] for r in frozen.curve]
    assert np.all(frozen.lr_table.rates == np.float32(0.01))


def test_first_order_training_runs(tiny_pools):
    res = small_run(tiny_pools, order="first", iterations=2)
    assert len(res.curve) == 2


def test_meta_test_never_mutates_theta(tiny_pools):
    res = small_run(tiny_pools, iterations=1)
    before = {n: t.data.tobytes() for n, t in res.theta.items()}
    rates = res.lr_table.rates.tobytes()
    spec = data.EpisodeSpec(2, 1, None, (5, 6))
    out = meta_test(res.theta, res.lr_table, tiny_pools, spec, 3, 1, seed=0, train_labels=(1, 2, 3, 4))
    assert len(out.accuracies) == 3 and 0 <= out.mean <= 1
    assert {n: t.data.tobytes() for n, t in res.theta.items()} == before
    assert res.lr_table.rates.tobytes() == rates


def test_one_way_is_trivially_correct(tiny_pools):
    theta = mdl.init_params(mdl.ModelSpec(1), 0)
    table = InnerLRTable.filled(theta.names, 1)
    out = meta_test(theta, table, tiny_pools, data.EpisodeSpec(1, 3, None, (5, 6)), 4, 3, seed=1)
    assert out.accuracies == [1.0] * 4 and out.std == 0.0


def test_leakage_is_a_hard_error(tiny_pools):
    theta = mdl.init_params(mdl.ModelSpec(2), 0)
    table = InnerLRTable.filled(theta.names, 1)
    with pytest.raises(LeakageError, match=r"\[2\]"):
        meta_test(theta, table, tiny_pools, data.EpisodeSpec(2, 1, None, (2, 5)), 1, 1, 0, train_labels=(1, 2))


def test_way_mismatch_is_a_shape_error(tiny_pools):
    theta = mdl.init_params(mdl.ModelSpec(3), 0)
    table = InnerLRTable.filled(theta.names, 1)
    with pytest.raises(ShapeError, match="3 output classes"):
        meta_test(theta, table, tiny_pools, data.EpisodeSpec(2, 1, None, (5, 6)), 1, 1, 0)


def test_untrained_model_is_at_chance(tiny_pools):
    # Zero rates keep the random initialization; with balanced queries its
    # accuracy is 1/3 up to binomial noise.
    n = 40 * 3 * 8
    band = 3 * np.sqrt((1 / 3) * (2 / 3) / n)
    for seed in range(3):
        theta = mdl.init_params(mdl.ModelSpec(3), seed)
        table = InnerLRTable.filled(theta.names, 1, 0.0)
        out = meta_test(theta, table, tiny_pools, data.EpisodeSpec(3, 1, None, (1, 2, 3, 4, 5, 6)), 40, 1, seed=3)
        assert abs(out.mean - 1 / 3) < band
