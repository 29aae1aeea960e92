import numpy as np
import pytest

from gdnstream import autodiff as ad
from gdnstream import hybrid
from gdnstream.autodiff import UnregisteredOpError, Var

from conftest import random_layer


def _fd(f, x, eps=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        up, down = x.copy(), x.copy()
        up[idx] += eps
        down[idx] -= eps
        g[idx] = (f(up) - f(down)) / (2 * eps)
    return g


def _check(build, x, tol=1e-6):
    """build(Var or array) -> scalar; compare reverse-mode with central differences."""
    leaf = Var(x.copy())
    out = build(leaf)
    ad.backward(out)
    numeric = _fd(lambda a: float(build(a).value), x)
    assert np.max(np.abs(leaf.grad - numeric)) <= tol * max(1.0, np.max(np.abs(numeric)))


def _weights(rng, shape):
    return rng.standard_normal(shape)


def test_elementwise_and_matmul_adjoints(rng):
    w = _weights(rng, (4, 3))
    c = _weights(rng, (5, 3))
    _check(lambda x: ad.sum_all(ad.tanh(ad.matmul(x, w)) * c - x[:, :3] * 0.5), rng.standard_normal((5, 4)))
    _check(lambda x: ad.sum_all(ad.matmul(_weights(np.random.default_rng(0), (2, 5)), x) * 1.0),
           rng.standard_normal((5, 2)))


def test_softmax_l2norm_rope_sigmoid_adjoints(rng):
    c = _weights(rng, (3, 2, 4))
    pos = [3, 9, 40]

    def build(x):
        y = ad.l2norm_rows(ad.rope(x, pos)) + ad.softmax_rows(x) * ad.sigmoid(x)
        return ad.sum_all(y * c)
    _check(build, rng.standard_normal((3, 2, 4)))


def test_concat_reshape_transpose_getitem(rng):
    c = _weights(rng, (6, 4))

    def build(x):
        y = ad.concat([x, x * 2.0], axis=0).reshape((4, 6)).transpose((1, 0))
        return ad.sum_all(y * c) + ad.sum_all(x[1:, ::2] * 3.0)
    _check(build, rng.standard_normal((2, 6)))


def test_broadcast_add_reduces_gradient(rng):
    x = Var(rng.standard_normal(3))
    y = ad.sum_all(ad.add(rng.standard_normal((4, 3)), x))
    ad.backward(y)
    assert np.array_equal(x.grad, np.full(3, 4.0))


def test_gdn_update_adjoint_matches_differences(rng):
    H, D, L = 2, 3, 4
    k = rng.standard_normal((L, H, D))
    k /= np.linalg.norm(k, axis=-1, keepdims=True)
    v = rng.standard_normal((L, H, D))
    a = rng.uniform(0.3, 0.9, (L, H))
    b = rng.uniform(0.1, 0.9, (L, H))
    S0 = rng.standard_normal((H, D, D))
    c = rng.standard_normal((H, D, D))
    parts = dict(S=S0, k=k, v=v, alpha=a, beta=b)
    for name in parts:
        def build(x, name=name):
            args = dict(parts)
            args[name] = x
            return ad.sum_all(ad.gdn_update(**args) * c)
        _check(build, parts[name].copy())


def test_gdn_update_forward_matches_kernel(rng):
    from gdnstream import gdn
    k = rng.standard_normal((5, 2, 4))
    args = (rng.standard_normal((2, 4, 4)), k, rng.standard_normal((5, 2, 4)),
            rng.uniform(0, 1, (5, 2)), rng.uniform(0, 1, (5, 2)))
    assert np.array_equal(ad.gdn_update(*args).value, gdn.delta_rule_sequential(*args))


def test_unregistered_operations_raise(rng):
    x = Var(rng.standard_normal(3))
    with pytest.raises(UnregisteredOpError):
        np.exp(x)
    with pytest.raises(UnregisteredOpError):
        np.asarray(x) + 1
    with pytest.raises(UnregisteredOpError):
        1.0 / x
    with pytest.raises(UnregisteredOpError):
        np.add(x, 1.0, out=np.zeros(3))


def test_ufunc_dispatch_uses_registered_adjoints(rng):
    x = Var(rng.standard_normal(3))
    y = ad.sum_all(np.tanh(x) * np.multiply(x, 2.0) - np.negative(x))
    ad.backward(y)
    t = np.tanh(x.value)
    assert np.allclose(x.grad, (1 - t * t) * 2 * x.value + 2 * t + 1, rtol=1e-14, atol=0)


def test_graph_forward_is_bitwise_identical_to_array_path(rng):
    layer = random_layer(21, granularity="elementwise")
    hybrid.absorb_clean_frame(layer, rng.standard_normal((4, 8)), 0)
    x = rng.standard_normal((4, 8))
    fm = hybrid.FeatureMaps(Var(layer.fmaps.phi_q), Var(layer.fmaps.phi_k), Var(layer.fmaps.phi_v))
    gates = hybrid.GateParams(Var(layer.gates.w_g), layer.gates.b_g, layer.gates.granularity)
    graph = hybrid.hybrid_output(x, layer.proj, fm, gates, Var(layer.state.S), 1, ops=ad)
    assert np.array_equal(graph.value, hybrid.forward(layer, x, 1))


def test_backward_needs_scalar(rng):
    with pytest.raises(ValueError):
        ad.backward(Var(rng.standard_normal(2)))


def test_shared_subexpression_accumulates(rng):
    x = Var(np.array([1.5, -2.0]))
    y = x * x
    ad.backward(ad.sum_all(y + y))
    assert np.array_equal(x.grad, 4 * x.value)
