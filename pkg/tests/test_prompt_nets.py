import numpy as np
import pytest

from mctta.errors import ConfigError, LengthError
from mctta.prompt_nets import (
    PromptState,
    c_net_forward,
    compose_all,
    compose_prompt,
    d_net_forward,
    init_prompt_state,
    mlp_forward,
    prompt_vjp,
)
from mctta.toy_alm import text_backward, text_forward
from conftest import make_random_model


@pytest.fixture
def p_origin(rng):
    return rng.normal(size=(3, 2, 6))


def test_zero_init_outputs(p_origin, rng):
    st = init_prompt_state(p_origin, 6, n_domain=2, seed=1)
    v = rng.normal(size=(5, 6))
    off, _ = c_net_forward(st, v)
    dom, _ = d_net_forward(st, v)
    assert np.all(off == 0) and off.shape == (5, 6)
    assert np.all(dom == 0) and dom.shape == (5, 2, 6)


def test_one_layer_identity_net(p_origin):
    st = init_prompt_state(p_origin, 6, depth=1, seed=0)
    st.theta["cnet.w0"] = np.eye(6)
    e1 = np.eye(6)[0]
    off, _ = c_net_forward(st, e1)
    assert np.array_equal(off, e1)


def test_depth_and_width(p_origin):
    for depth in (1, 2, 3, 4):
        st = init_prompt_state(p_origin, 6, depth=depth, width_mult=2)
        ws = [k for k in st.theta if k.startswith("cnet.w")]
        assert len(ws) == depth
        if depth > 1:
            assert st.theta["cnet.w0"].shape == (6, 12)
    with pytest.raises(ConfigError):
        init_prompt_state(p_origin, 6, depth=5)
    with pytest.raises(ConfigError):
        init_prompt_state(p_origin, 6, use_cnet=False, use_dnet=False)


def test_compose_prompt_definition(p_origin):
    st = init_prompt_state(p_origin, 6, n_domain=1)
    off = np.arange(6.0)
    dom = np.ones((1, 6))
    seq = compose_prompt(st, 1, off, dom)
    assert seq.shape == (3, 6)
    assert np.array_equal(seq[0], dom[0])
    assert np.array_equal(seq[1:], p_origin[1] + off)
    diffs = seq[1:] - p_origin[1]
    assert np.allclose(diffs, diffs[0])


def test_compose_ablated_is_origin(p_origin):
    st = init_prompt_state(p_origin, 6, use_dnet=False)
    off, _ = c_net_forward(st, np.ones(6))
    dom, _ = d_net_forward(st, np.ones(6))
    assert np.array_equal(compose_prompt(st, 2, off, dom), p_origin[2])
    assert np.array_equal(compose_all(st, off, dom), p_origin)


def test_compose_length_error(p_origin):
    with pytest.raises(LengthError):
        init_prompt_state(p_origin, 6, n_domain=15, max_len=16)
    st = init_prompt_state(p_origin, 6, n_domain=1, max_len=3)
    with pytest.raises(LengthError):
        compose_prompt(st, 0, np.zeros(6), np.zeros((2, 6)))


def test_compose_all_matches_single(p_origin, rng):
    st = init_prompt_state(p_origin, 6, n_domain=2)
    off = rng.normal(size=(4, 6))
    dom = rng.normal(size=(4, 2, 6))
    allp = compose_all(st, off, dom)
    for i in range(4):
        for c in range(3):
            assert np.array_equal(allp[i, c], compose_prompt(st, c, off[i], dom[i]))


def _random_state(seed, use_dnet=True, use_cnet=True):
    rng = np.random.default_rng(seed)
    model = make_random_model(seed, n_classes=3, prefix=1, d=6, max_len=8)
    st = init_prompt_state(model.p_origin(), 6, n_domain=1, use_dnet=use_dnet, use_cnet=use_cnet, max_len=8)
    st = st.with_theta({k: rng.normal(0, 0.5, a.shape) for k, a in st.theta.items()})
    return model, st, rng


def _scalar(st, model, v, up):
    off, _ = c_net_forward(st, v)
    dom, _ = d_net_forward(st, v)
    u, _ = text_forward(compose_all(st, off, dom), model.params)
    return float(np.sum(up * u))


@pytest.mark.parametrize("seed", range(5))
def test_prompt_vjp_matches_finite_differences(seed):
    model, st, rng = _random_state(seed)
    v = rng.normal(size=(2, 6))
    up = rng.normal(size=(2, 3, 6))
    off, _ = c_net_forward(st, v)
    dom, _ = d_net_forward(st, v)
    _, cache = text_forward(compose_all(st, off, dom), model.params)
    tok_grads, _ = text_backward(cache, up, model.params)
    analytic = prompt_vjp(st, v, tok_grads)
    h = 1e-5
    for name, arr in st.theta.items():
        for idx in np.ndindex(arr.shape):
            plus = {k: a.copy() for k, a in st.theta.items()}
            minus = {k: a.copy() for k, a in st.theta.items()}
            plus[name][idx] += h
            minus[name][idx] -= h
            fd = (_scalar(st.with_theta(plus), model, v, up) - _scalar(st.with_theta(minus), model, v, up)) / (2 * h)
            a = analytic[name][idx]
            assert abs(a - fd) <= 1e-4 * max(abs(a), abs(fd), 1e-6), (name, idx)


def test_prompt_vjp_zero_upstream(p_origin, rng):
    st = init_prompt_state(p_origin, 6, n_domain=1)
    grads = prompt_vjp(st, rng.normal(size=6), np.zeros((3, 3, 6)))
    assert all(np.all(g == 0) for g in grads.values())


def test_disabled_dnet_gets_zero_gradient():
    model, st, rng = _random_state(0, use_dnet=False)
    grads = prompt_vjp(st, rng.normal(size=(6,)), rng.normal(size=(3, 2, 6)))
    assert all(np.all(grads[k] == 0) for k in grads if k.startswith("dnet"))
    assert any(np.any(grads[k] != 0) for k in grads if k.startswith("cnet"))


def test_mlp_tanh_between_layers_only(rng):
    st = init_prompt_state(rng.normal(size=(2, 1, 4)), 4, depth=2)
    st.theta["cnet.w1"] = np.eye(4) * 10
    out, _ = mlp_forward(st.theta, "cnet", np.ones(4) * 100)
    # final layer is linear, so outputs can exceed the tanh range
    assert np.max(np.abs(out)) > 1
