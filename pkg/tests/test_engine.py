import math
import warnings
from dataclasses import replace

import numpy as np
import pytest

from mctta import binfmt
from mctta.engine import (
    AdaptConfig,
    DistributionSet,
    LossReport,
    adapt_batch,
    backward_batch,
    build_views,
    check_loss_bounds,
    consistency_loss,
    contrastive_loss,
    derive_seed,
    embed_views,
    final_loss,
    forward_batch,
    forward_embeddings,
    initial_state,
    load_run,
    loss_and_grad,
    loss_gradient,
    run,
    save_run,
    write_trace,
)
from mctta.errors import ConfigError, NumericalError
from mctta.gradcheck import check_instance, random_instance
from mctta.optim import AdamWState, adamw_step
from mctta.prompt_nets import init_prompt_state
from mctta.toy_alm import zero_shot_probs
from conftest import make_random_model


# -- losses -----------------------------------------------------------------


def test_consistency_oracles():
    assert consistency_loss([0.5, 0.5]) == pytest.approx(math.log(2), abs=1e-9)
    assert consistency_loss([0.25] * 4) == pytest.approx(math.log(4), abs=1e-9)
    assert consistency_loss([1.0, 0.0, 0.0]) == pytest.approx(0.0, abs=1e-9)
    # batch mean
    assert consistency_loss([[0.5, 0.5], [1.0, 0.0]]) == pytest.approx(math.log(2) / 2, abs=1e-9)


def test_contrastive_oracles():
    assert contrastive_loss([[1, 0], [0, 1]]) == pytest.approx(-1.0, abs=1e-9)
    assert contrastive_loss([[1, 0], [1, 0], [0, 1]]) == pytest.approx(-2 / 3, abs=1e-9)
    assert contrastive_loss([[0.3, 0.7]] * 4) == 0.0


def test_contrastive_single_sample_warns():
    with pytest.warns(RuntimeWarning):
        assert contrastive_loss([[0.2, 0.8]]) == 0.0


def test_final_loss_combinations():
    assert final_loss(math.log(2), -1.0, 1.0) == pytest.approx(-0.306853, abs=1e-6)
    assert final_loss(0.4, -0.2, 0.0) == 0.4
    assert final_loss(None, -0.2, 3.0) == pytest.approx(-0.6)
    with pytest.raises(ConfigError):
        final_loss(None, None, 1.0)


def test_loss_ablation_flags():
    g = np.array([[0.7, 0.3], [0.2, 0.8]])
    rep, _ = loss_and_grad(g, AdaptConfig(disable_entropy=True, lambda_contrastive=2.0))
    assert rep.consistency is None and rep.final == pytest.approx(2.0 * contrastive_loss(g))
    rep, _ = loss_and_grad(g, AdaptConfig(disable_contrastive=True))
    assert rep.contrastive is None and rep.final == pytest.approx(consistency_loss(g))
    assert "consistency" not in LossReport(None, -0.1, -0.1).as_dict()


def _fd_wrt_gavg(g, cfg, h=1e-6):
    out = np.zeros_like(g)
    for idx in np.ndindex(g.shape):
        gp, gm = g.copy(), g.copy()
        gp[idx] += h
        gm[idx] -= h
        out[idx] = (loss_and_grad(gp, cfg)[0].final - loss_and_grad(gm, cfg)[0].final) / (2 * h)
    return out


@pytest.mark.parametrize("b", [1, 2, 5])
def test_loss_gradient_wrt_gavg(b, rng):
    g = rng.dirichlet(np.ones(4), size=b)
    cfg = AdaptConfig(lambda_contrastive=1.3)
    _, analytic = loss_and_grad(g, cfg)
    assert np.allclose(analytic, _fd_wrt_gavg(g, cfg), rtol=1e-6, atol=1e-8)


def test_loss_bounds_checked():
    check_loss_bounds(LossReport(math.log(3), -0.1, 0.0), 3)
    with pytest.raises(NumericalError):
        check_loss_bounds(LossReport(2.0, None, 2.0), 3)
    with pytest.raises(NumericalError):
        check_loss_bounds(LossReport(None, 0.1, 0.1), 3)


# -- optimizer --------------------------------------------------------------


def test_adamw_first_step_hand_value():
    st = AdamWState.zeros_like({"w": np.array(1.0)}, weight_decay=0.0)
    new, st2 = adamw_step({"w": np.array(1.0)}, {"w": np.array(1.0)}, st, lr=0.1)
    assert float(new["w"]) == pytest.approx(0.9, abs=1e-6)
    assert st2.step == 1


def test_adamw_zero_grad_no_decay_is_identity():
    p = {"w": np.array([0.5, -2.0])}
    new, _ = adamw_step(p, {"w": np.zeros(2)}, AdamWState.zeros_like(p, weight_decay=0.0), lr=0.3)
    assert np.array_equal(new["w"], p["w"])


def test_adamw_pure_decay():
    p = {"w": np.array([0.5, -2.0])}
    new, _ = adamw_step(p, {"w": np.zeros(2)}, AdamWState.zeros_like(p, weight_decay=0.01), lr=0.1)
    assert np.allclose(new["w"], p["w"] * (1 - 0.1 * 0.01), rtol=0, atol=1e-15)


def test_adamw_second_step_matches_reference():
    # reference computed directly from the update equations
    b1, b2, eps, lr, wd = 0.9, 0.999, 1e-8, 0.05, 0.01
    w, m, v = 2.0, 0.0, 0.0
    p = {"w": np.array(w)}
    st = AdamWState.zeros_like(p)
    for t, g in enumerate([0.3, -1.2], start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w - lr * ((m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps) + wd * w)
        p, st = adamw_step(p, {"w": np.array(g)}, st, lr)
    assert float(p["w"]) == pytest.approx(w, abs=1e-15)


def test_adamw_rejects_nonfinite():
    p = {"w": np.zeros(2)}
    with pytest.raises(NumericalError):
        adamw_step(p, {"w": np.array([np.nan, 0.0])}, AdamWState.zeros_like(p), 0.1)


# -- forward / backward -----------------------------------------------------


def test_distributions_are_valid(rng):
    model, state, v = random_instance(3, batch=4, n_views=5)
    dist, _ = forward_embeddings(v, state, model)
    dist.check()
    assert np.allclose(dist.g.sum(-1), 1, atol=1e-6)
    assert np.allclose(dist.g_avg, dist.g.mean(axis=1))


def test_duplicating_views_keeps_gavg(rng):
    model, state, v = random_instance(4, n_views=3)
    a, _ = forward_embeddings(v, state, model)
    b, _ = forward_embeddings(np.concatenate([v, v], axis=1), state, model)
    assert np.allclose(a.g_avg, b.g_avg, atol=1e-15)


def test_mean_conditioning_mode_runs(rng):
    model, state, v = random_instance(5)
    cfg = AdaptConfig(conditioning="mean")
    rep, grads, dist = loss_gradient(v, state, model, cfg)
    dist.check()
    assert all(np.all(np.isfinite(g)) for g in grads.values())


def test_zero_init_equivalence_single_view(random_model, rng):
    state = init_prompt_state(random_model.p_origin(), random_model.d, use_dnet=False, max_len=16)
    mels = rng.normal(size=(6, 1, 12, 8))
    dist = forward_batch(list(mels), state, random_model)
    zs = zero_shot_probs(mels[:, 0], random_model)
    assert np.max(np.abs(dist.g_avg - zs)) < 1e-9


@pytest.mark.parametrize("seed", range(4))
def test_full_gradient_matches_fd(seed):
    assert check_instance(seed).max_rel_error < 1e-4


@pytest.mark.parametrize("flags", [
    dict(disable_dnet=True), dict(disable_cnet=True), dict(disable_entropy=True),
    dict(disable_contrastive=True), dict(conditioning="mean"), dict(lambda_contrastive=0.0),
])
def test_gradient_matches_fd_under_ablations(flags):
    assert check_instance(11, AdaptConfig(**flags)).max_rel_error < 1e-4


def test_gradient_matches_fd_with_domain_reshape():
    # several domain tokens exercise the d-net output reshape
    assert check_instance(21, n_domain=3, depth=2).max_rel_error < 1e-4


def test_disable_cnet_zero_gradient():
    model, state, v = random_instance(7, use_cnet=False)
    _, grads, _ = loss_gradient(v, state, model, AdaptConfig(disable_cnet=True))
    assert all(np.all(grads[k] == 0) for k in grads if k.startswith("cnet"))


def test_symmetric_stationary_point():
    # identical, uniform distributions for every sample: entropy is maximal and
    # every pairwise difference is zero, so the total gradient vanishes
    model, state, v = random_instance(8, batch=3)
    state = state.with_theta({k: np.zeros_like(a) for k, a in state.theta.items()})
    state.p_origin[:] = 0.0  # every class prompt identical
    v = np.repeat(v[:1], 3, axis=0)
    rep, grads, dist = loss_gradient(v, state, model, AdaptConfig())
    assert np.allclose(dist.g_avg, 1 / 3, atol=1e-12)
    assert np.sqrt(sum(np.sum(g**2) for g in grads.values())) < 1e-8


def test_backward_batch_wrapper(random_model, rng):
    state = init_prompt_state(random_model.p_origin(), random_model.d, n_domain=2)
    grads = backward_batch(list(rng.normal(size=(2, 3, 12, 8))), state, random_model, AdaptConfig())
    assert set(grads) == set(state.theta)


# -- adaptation protocol ----------------------------------------------------


@pytest.fixture
def stream(random_model, rng):
    return [rng.normal(size=(30, 8)) for _ in range(11)]


def small_cfg(**kw):
    base = dict(n_views=4, max_time_mask=5, max_freq_mask=2, batch_size=3, lr=1e-2, seed=5)
    base.update(kw)
    return AdaptConfig(**base)


def test_adapt_batch_steps_zero_is_zero_shot(random_model, stream):
    cfg = small_cfg(steps_per_batch=0, disable_dnet=True, n_views=1)
    state = initial_state(random_model, cfg)
    v = embed_views(build_views(stream[:3], cfg), random_model)
    res = adapt_batch(v, state, AdamWState.zeros_like(state.theta), random_model, cfg)
    assert res.trace == []
    zs = np.argmax(zero_shot_probs(np.stack(stream[:3]), random_model), -1)
    assert np.array_equal(res.predictions, zs)


def test_adapt_batch_trace_length(random_model, stream):
    cfg = small_cfg(steps_per_batch=4)
    state = initial_state(random_model, cfg)
    v = embed_views(build_views(stream[:3], cfg), random_model)
    res = adapt_batch(v, state, AdamWState.zeros_like(state.theta), random_model, cfg)
    assert len(res.trace) == 4 and res.opt.step == 4


def test_run_episodic_resets(random_model, stream):
    r = run(stream, random_model, small_cfg(mode="episodic"))
    assert r.resets == [1, 2, 3]
    assert len(set(r.theta_digests)) == 1
    assert r.theta_digests[0] == binfmt.digest_arrays(r.initial_theta)
    assert len(r.predictions) == len(stream)


def test_run_online_never_resets(random_model, stream):
    r = run(stream, random_model, small_cfg(mode="online"))
    assert r.resets == [] and len(set(r.theta_digests)) == 4


def test_episodic_single_batch_equals_online(random_model, stream):
    a = run(stream, random_model, small_cfg(mode="episodic", batch_size=len(stream)))
    b = run(stream, random_model, small_cfg(mode="online", batch_size=len(stream)))
    assert np.array_equal(a.predictions, b.predictions) and a.trace == b.trace


def test_episodic_batch_order_invariance(random_model, stream):
    cfg = small_cfg(mode="episodic")
    clips = stream[:9]
    batches = [clips[0:3], clips[3:6], clips[6:9]]
    a = run([c for b in batches for c in b], random_model, cfg)
    order = [2, 0, 1]
    b = run([c for i in order for c in batches[i]], random_model, cfg)
    pa = a.predictions.reshape(3, 3)
    pb = b.predictions.reshape(3, 3)
    for new_pos, old in enumerate(order):
        assert np.array_equal(pb[new_pos], pa[old])


def test_run_deterministic(random_model, stream):
    a = run(stream, random_model, small_cfg())
    b = run(stream, random_model, small_cfg())
    assert a.trace == b.trace and np.array_equal(a.predictions, b.predictions)
    assert binfmt.digest_arrays(a.final_theta) == binfmt.digest_arrays(b.final_theta)


def test_run_does_not_touch_model(random_model, stream):
    before = random_model.to_bytes()
    run(stream, random_model, small_cfg(steps_per_batch=2))
    assert random_model.to_bytes() == before


def test_run_rejects_bad_configs(random_model, stream):
    with pytest.raises(ConfigError):
        run([], random_model, small_cfg())
    with pytest.raises(ConfigError):
        run(stream, random_model, small_cfg(disable_cnet=True, disable_dnet=True))
    with pytest.raises(ConfigError):
        run(stream, random_model, small_cfg(mode="weekly"))


def test_full_scale_overrides():
    eff = AdaptConfig(full_scale=True).effective()
    assert eff.lr == 1e-6 and eff.n_views == 50


def test_run_checkpoint_roundtrip(tmp_path, random_model, stream):
    r = run(stream, random_model, small_cfg())
    data = save_run(tmp_path / "run.bin", r)
    header, theta, opt = load_run(tmp_path / "run.bin")
    assert header["model_hash"] == random_model.model_hash
    assert header["config"]["batch_size"] == 3
    for k in r.final_theta:
        assert theta[k].tobytes() == r.final_theta[k].tobytes()
        assert opt.m[k].tobytes() == r.optimizer.m[k].tobytes()
    assert opt.step == r.optimizer.step
    r2 = run(stream, random_model, small_cfg())
    assert save_run(tmp_path / "run2.bin", r2) == data


def test_trace_jsonl(tmp_path, random_model, stream):
    import json

    r = run(stream, random_model, small_cfg(steps_per_batch=2))
    write_trace(tmp_path / "t.jsonl", r)
    recs = [json.loads(line) for line in (tmp_path / "t.jsonl").read_text().splitlines()]
    assert sum(x["type"] == "step" for x in recs) == 8
    assert sum(x["type"] == "prediction" for x in recs) == len(stream)


def test_derive_seed_is_stable_and_distinct():
    assert derive_seed(1, "a") == derive_seed(1, "a")
    assert derive_seed(1, "a") != derive_seed(1, "b") != derive_seed(2, "a")
