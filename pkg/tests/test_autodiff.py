"""Tape autodiff: finite-difference oracles and tape contracts."""

import numpy as np
import pytest

from splatact import autodiff as ad


def numeric_grad(fn, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function of one array."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(x)
        flat[i] = orig - h
        fm = fn(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g


def tape_grad(build, x: np.ndarray) -> np.ndarray:
    t = ad.Tensor(x.copy(), requires_grad=True)
    with ad.Tape() as tape:
        loss = build(t)
        tape.backward(loss)
    return t.grad


def check_op(build, x, h=1e-6, tol=1e-5):
    got = tape_grad(build, x)
    want = numeric_grad(lambda a: float(build(ad.Tensor(a)).data), x, h=h)
    denom = np.maximum(np.maximum(np.abs(got), np.abs(want)), 1e-10)
    rel = np.abs(got - want) / denom
    assert ((np.abs(got - want) < 1e-8) | (rel < tol)).all(), rel.max()


RNG = np.random.default_rng(101)


def w(*shape):
    """A fixed random weighting, frozen at case-construction time."""
    return ad.constant(RNG.standard_normal(shape))


# (name, loss builder, sample input) -- inputs chosen away from non-smooth loci
CASES = [
    ("add", lambda t, c=w(3, 4): (t + c).sum(), RNG.standard_normal((3, 4))),
    ("sub", lambda t: (t - 1.5).mean(), RNG.standard_normal((3, 4))),
    ("mul", lambda t, c=w(3, 4): (t * c).sum(), RNG.standard_normal((3, 4))),
    ("mul_broadcast", lambda t, c=w(1, 4): (t * c).sum(), RNG.standard_normal((3, 4))),
    ("div", lambda t, c=ad.constant(2.0 + np.abs(RNG.standard_normal((3, 4)))): (t / c).sum(), RNG.standard_normal((3, 4))),
    ("div_denominator", lambda t, c=w(3, 4): (c / t).sum(), 2.0 + np.abs(RNG.standard_normal((3, 4)))),
    ("neg", lambda t: (-t).sum(), RNG.standard_normal((5,))),
    ("matmul", lambda t, c=w(4, 2): (t @ c).sum(), RNG.standard_normal((3, 4))),
    ("matmul_fold", lambda t, c=w(4, 2): (t @ c).sum(), RNG.standard_normal((2, 3, 4))),
    ("matmul_batched", lambda t, c=w(2, 4, 3): ad.matmul(t, c).sum(), RNG.standard_normal((2, 3, 4))),
    ("exp", lambda t: ad.exp(t).sum(), RNG.standard_normal((3, 3))),
    ("log", lambda t: ad.log(t).sum(), 0.5 + np.abs(RNG.standard_normal((3, 3)))),
    ("log1p", lambda t: ad.log1p(t).sum(), 0.4 * RNG.standard_normal((3, 3)).clip(-1, 1)),
    ("sqrt", lambda t: ad.sqrt(t).sum(), 0.5 + np.abs(RNG.standard_normal((4,)))),
    ("sin", lambda t: ad.sin(t).sum(), RNG.standard_normal((3, 3))),
    ("cos", lambda t: ad.cos(t).sum(), RNG.standard_normal((3, 3))),
    ("tanh", lambda t: ad.tanh(t).sum(), RNG.standard_normal((3, 3))),
    ("sigmoid", lambda t: ad.sigmoid(t).sum(), RNG.standard_normal((3, 3))),
    ("gelu", lambda t: ad.gelu(t).sum(), RNG.standard_normal((3, 3))),
    ("silu", lambda t: ad.silu(t).sum(), RNG.standard_normal((3, 3))),
    ("max_floor", lambda t: ad.max_floor(t, 0.0).sum(), 0.3 + np.abs(RNG.standard_normal((3, 3)))),
    ("sum_axis", lambda t, c=w(3): (t.sum(axis=1) * c).sum(), RNG.standard_normal((3, 4))),
    ("mean_axes", lambda t, c=w(4): (t.mean(axis=(0, 2)) * c).sum(), RNG.standard_normal((2, 4, 3))),
    ("softmax", lambda t, c=w(3, 5): (ad.softmax_lastdim(t) * c).sum(), RNG.standard_normal((3, 5))),
    ("log_softmax", lambda t, c=w(3, 5): (ad.log_softmax_lastdim(t) * c).sum(), RNG.standard_normal((3, 5))),
    ("cumsum_excl", lambda t, c=w(2, 6): (ad.cumsum_exclusive_lastdim(t) * c).sum(), RNG.standard_normal((2, 6))),
    ("reshape", lambda t, c=w(2, 1): (t.reshape(6, 2) @ c).sum(), RNG.standard_normal((3, 4))),
    ("transpose", lambda t, c=w(3, 2): (t.transpose((1, 0)) @ c).sum(), RNG.standard_normal((3, 4))),
    ("broadcast_to", lambda t, c=w(5, 3): (ad.broadcast_to(t, (5, 3)) * c).sum(), RNG.standard_normal((3,))),
    ("concat", lambda t, c=w(2, 6): (ad.concat([t, t * 2.0], axis=1) * c).sum(), RNG.standard_normal((2, 3))),
    ("slice_axis", lambda t, c=w(3, 2): (ad.slice_axis(t, 1, 1, 3) * c).sum(), RNG.standard_normal((3, 4))),
    ("gather_rows", lambda t, c=w(2, 2, 3): (ad.gather_rows(t, np.array([[0, 2], [1, 1]])) * c).sum(), RNG.standard_normal((4, 3))),
    ("take_index", lambda t, c=w(3): (ad.take_index_lastdim(t, np.array([1, 0, 3])) * c).sum(), RNG.standard_normal((3, 4))),
    ("take_index_multi", lambda t, c=w(3, 2): (ad.take_index_lastdim(t, np.array([[1, 0], [3, 3], [2, 0]])) * c).sum(), RNG.standard_normal((3, 4))),
    ("scatter_rows_add", lambda t, c=w(3, 2): (ad.scatter_rows_add(t, np.array([0, 2, 2, 1]), 3) * c).sum(), RNG.standard_normal((4, 2))),
]


@pytest.mark.parametrize("name,build,x", CASES, ids=[c[0] for c in CASES])
def test_primitive_matches_finite_difference(name, build, x):
    check_op(build, x)


def test_layernorm_matches_finite_difference():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((2, 3, 8))
    gamma = ad.Tensor(rng.standard_normal(8), requires_grad=True)
    beta = ad.Tensor(rng.standard_normal(8), requires_grad=True)
    w = rng.standard_normal((2, 3, 8))

    def build(t):
        return (ad.layernorm_lastdim(t, gamma, beta) * ad.constant(w)).sum()

    check_op(build, x, tol=1e-4)
    # parameter gradients too
    report = ad.grad_check(
        lambda: (ad.layernorm_lastdim(ad.constant(x), gamma, beta) * ad.constant(w)).sum(),
        {"gamma": gamma, "beta": beta},
        step=1e-5,
        tol=1e-5,
    )
    assert all(r["ok"] for r in report.values())


def test_permute_lastdim_roundtrip_and_grad():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 5))
    perm = np.stack([rng.permutation(5), rng.permutation(5)])
    inv = np.argsort(perm, axis=-1)
    w = rng.standard_normal((2, 3, 5))

    t = ad.Tensor(x, requires_grad=True)
    with ad.Tape() as tape:
        y = ad.permute_lastdim(t, perm, inv)
        back = ad.permute_lastdim(y, inv, perm)
        loss = (back * ad.constant(w)).sum()
        tape.backward(loss)
    # permuting then unpermuting is the identity, so grad == w
    np.testing.assert_allclose(t.grad, w, atol=1e-12)
    np.testing.assert_allclose(back.data, x, atol=0)


def mlp_loss(params, x):
    h = ad.gelu(ad.constant(x) @ params["w0"] + params["b0"])
    h = ad.gelu(h @ params["w1"] + params["b1"])
    out = h @ params["w2"] + params["b2"]
    return (out * out).mean()


def make_mlp_params(seed=11):
    store = ad.ParamStore(seed)
    return store, {
        "w0": store.param("w0", (5, 7)),
        "b0": store.param("b0", (7,), init="zeros"),
        "w1": store.param("w1", (7, 6)),
        "b1": store.param("b1", (6,), init="zeros"),
        "w2": store.param("w2", (6, 2)),
        "b2": store.param("b2", (2,), init="zeros"),
    }


def test_three_layer_mlp_gradients_match_fd():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((4, 5))
    _, params = make_mlp_params()
    report = ad.grad_check(lambda: mlp_loss(params, x), params, step=1e-5, tol=1e-5)
    for name, r in report.items():
        assert r["ok"], (name, r)
        assert r["n_flagged"] == 0


def test_grad_check_rejects_bad_step():
    _, params = make_mlp_params()
    x = np.ones((2, 5))
    with pytest.raises(ValueError):
        ad.grad_check(lambda: mlp_loss(params, x), params, step=1e-8)
    with pytest.raises(ValueError):
        ad.grad_check(lambda: mlp_loss(params, x), params, step=1e-2)


def test_grad_check_flags_non_finite_instead_of_crashing():
    store = ad.ParamStore(1)
    p = store.param("p", (2,), init="zeros")
    p.data = np.array([1e-6, 1.0])  # log goes negative-domain under perturbation

    def fn():
        return ad.log(p).sum()

    report = ad.grad_check(fn, {"p": p}, step=1e-4, tol=1e-3)
    assert report["p"]["n_flagged"] >= 1


def test_backward_twice_is_an_error():
    t = ad.Tensor(np.ones(3), requires_grad=True)
    with ad.Tape() as tape:
        loss = (t * t).sum()
        tape.backward(loss)
        with pytest.raises(RuntimeError):
            tape.backward(loss)


def test_backward_rejects_non_scalar():
    t = ad.Tensor(np.ones(3), requires_grad=True)
    with ad.Tape() as tape:
        y = t * 2.0
        with pytest.raises(ValueError):
            tape.backward(y)


def test_shape_mismatch_reports_both_shapes():
    a = ad.Tensor(np.ones((2, 3)))
    b = ad.Tensor(np.ones((4, 5)))
    with pytest.raises(ad.ShapeError) as ei:
        ad.add(a, b)
    assert "(2, 3)" in str(ei.value) and "(4, 5)" in str(ei.value)
    with pytest.raises(ad.ShapeError) as ei:
        ad.matmul(a, b)
    assert "(2, 3)" in str(ei.value)


def test_gradient_accumulation_is_additive_and_linear():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((3, 3))

    def run(build):
        t = ad.Tensor(x.copy(), requires_grad=True)
        with ad.Tape() as tape:
            tape.backward(build(t))
        return t.grad

    g1 = run(lambda t: (t * t).sum())
    g2 = run(lambda t: ad.exp(t).mean())
    g12 = run(lambda t: (t * t).sum() + ad.exp(t).mean())
    np.testing.assert_allclose(g12, g1 + g2, rtol=1e-12)

    # two backward passes through separate tapes accumulate into one buffer
    t = ad.Tensor(x.copy(), requires_grad=True)
    with ad.Tape() as tape:
        tape.backward((t * t).sum())
    with ad.Tape() as tape:
        tape.backward(ad.exp(t).mean())
    np.testing.assert_allclose(t.grad, g1 + g2, rtol=1e-12)


def test_fanout_accumulates_within_one_tape():
    t = ad.Tensor(np.array([2.0]), requires_grad=True)
    with ad.Tape() as tape:
        y = t * t + t * 3.0  # d/dt = 2t + 3 = 7
        tape.backward(y.sum())
    np.testing.assert_allclose(t.grad, [7.0])


def test_forward_and_gradient_bit_identical_across_reruns():
    rng = np.random.default_rng(21)
    x = rng.standard_normal((6, 6))

    def once():
        t = ad.Tensor(x.copy(), requires_grad=True)
        with ad.Tape() as tape:
            y = ad.softmax_lastdim(t @ ad.constant(x.T))
            loss = (y * y).mean()
            tape.backward(loss)
        return loss.data.copy(), t.grad.copy()

    l1, g1 = once()
    l2, g2 = once()
    assert l1.tobytes() == l2.tobytes()
    assert g1.tobytes() == g2.tobytes()


def test_no_grad_suppresses_recording():
    t = ad.Tensor(np.ones(3), requires_grad=True)
    with ad.Tape() as tape:
        with ad.no_grad():
            y = (t * t).sum()
        assert not y.requires_grad
        z = (t * 2.0).sum()
        tape.backward(z)
    np.testing.assert_allclose(t.grad, 2 * np.ones(3))


def test_detach_blocks_gradient():
    t = ad.Tensor(np.ones(3), requires_grad=True)
    with ad.Tape() as tape:
        y = (t * 3.0).sum() + (t.detach() * 100.0).sum()
        tape.backward(y)
    np.testing.assert_allclose(t.grad, 3 * np.ones(3))


def test_param_store_init_is_per_name_stable():
    a = ad.ParamStore(42)
    w_only = a.param("block.w", (4, 4)).data.copy()
    b = ad.ParamStore(42)
    b.param("unrelated", (9,))
    w_again = b.param("block.w", (4, 4)).data.copy()
    assert w_only.tobytes() == w_again.tobytes()
    c = ad.ParamStore(43)
    assert c.param("block.w", (4, 4)).data.tobytes() != w_only.tobytes()


def test_param_store_rejects_duplicates_and_bad_shapes():
    s = ad.ParamStore(1)
    s.param("w", (2, 2))
    with pytest.raises(ValueError):
        s.param("w", (2, 2))
    with pytest.raises(ad.ShapeError):
        s.load_state({"w": np.zeros((3, 3))})


def test_param_store_init_modes():
    s = ad.ParamStore(5)
    assert np.array_equal(s.param("z", (3, 2), init="zeros").data, np.zeros((3, 2)))
    assert np.array_equal(s.param("o", (4,), init="ones").data, np.ones(4))
    fan = s.param("f", (25, 4), init="fanin").data
    assert np.abs(fan).max() <= 1.0 / 5.0
    nrm = s.param("n", (200,), init="normal", scale=0.5).data
    assert 0.1 < nrm.std() < 1.0
    with pytest.raises(ValueError):
        s.param("bad", (2,), init="uniformish")
