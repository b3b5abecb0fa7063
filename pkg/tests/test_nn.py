"""Conv/embedding building blocks against independent oracles."""
import numpy as np
import pytest
from scipy.signal import correlate2d

from sonarsynth.nn import (MomentumSGD, ParamVector, conv2d, conv2d_backward,
                           fan_in_uniform, sinusoidal_embedding)


def _naive_conv(x, w, b):
    # correlate2d per (batch, out-channel, in-channel), zero 'same' padding
    B, Cin, H, W = x.shape
    Cout = w.shape[0]
    out = np.zeros((B, Cout, H, W))
    for n in range(B):
        for o in range(Cout):
            acc = np.zeros((H, W))
            for i in range(Cin):
                acc += correlate2d(x[n, i], w[o, i], mode="same")
            out[n, o] = acc + b[o]
    return out


def test_conv2d_matches_scipy_oracle():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 7, 5))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    got = conv2d(x, w, b)
    want = _naive_conv(x, w, b)
    assert np.allclose(got, want, atol=1e-12)


def test_conv2d_returns_reusable_cols():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((1, 2, 6, 6))
    w = rng.standard_normal((3, 2, 3, 3))
    b = np.zeros(3)
    out1 = conv2d(x, w, b)
    out2, cols = conv2d(x, w, b, return_cols=True)
    assert np.array_equal(out1, out2)
    dout = rng.standard_normal(out1.shape)
    dx_a, dw_a, db_a = conv2d_backward(x, w, dout)
    dx_b, dw_b, db_b = conv2d_backward(x, w, dout, cols=cols)
    assert np.array_equal(dx_a, dx_b)
    assert np.array_equal(dw_a, dw_b)
    assert np.array_equal(db_a, db_b)


def test_conv2d_backward_finite_differences():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 2, 5, 4))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    dout = rng.standard_normal((2, 3, 5, 4))

    def loss(xv, wv, bv):
        return float(np.sum(conv2d(xv, wv, bv) * dout))

    dx, dw, db = conv2d_backward(x, w, dout)
    h = 1e-6
    for arr, grad in ((x, dx), (w, dw), (b, db)):
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        for i in rng.choice(flat.size, size=min(12, flat.size), replace=False):
            keep = flat[i]
            flat[i] = keep + h
            up = loss(x, w, b)
            flat[i] = keep - h
            dn = loss(x, w, b)
            flat[i] = keep
            fd = (up - dn) / (2 * h)
            assert abs(fd - gflat[i]) <= 1e-4 * max(1.0, abs(fd))


def test_sinusoidal_embedding_values_and_shape():
    emb = sinusoidal_embedding(np.array([0, 1, 7]), 8)
    assert emb.shape == (3, 8)
    # t = 0: all sines 0, all cosines 1
    assert np.allclose(emb[0, :4], 0.0)
    assert np.allclose(emb[0, 4:], 1.0)
    # first frequency is 1, so emb[t, 0] = sin(t)
    assert np.isclose(emb[1, 0], np.sin(1.0))
    assert np.isclose(emb[2, 4], np.cos(7.0))
    # distinct steps embed distinctly
    assert not np.allclose(emb[1], emb[2])


def test_param_vector_views_share_storage():
    p = ParamVector([("a", (2, 3)), ("b", (4,))])
    assert p.size == 10
    p["a"][:] = 1.0
    p["b"][:] = 2.0
    assert p.data[:6].sum() == 6.0 and p.data[6:].sum() == 8.0
    p.data[:] = 0.0
    assert p["a"].sum() == 0.0
    q = p.copy()
    q["b"][:] = 5.0
    assert p["b"].sum() == 0.0  # deep copy


def test_momentum_sgd_hand_arithmetic():
    p = ParamVector([("w", (2,))])
    p["w"][:] = [1.0, -1.0]
    g = p.grad_like()
    g["w"][:] = [0.5, 0.5]
    opt = MomentumSGD(lr=0.1, momentum=0.9)
    opt.step(p, g)
    # v1 = -lr * g = [-0.05, -0.05]
    assert np.allclose(p["w"], [0.95, -1.05])
    opt.step(p, g)
    # v2 = 0.9 * v1 - lr * g = [-0.095, -0.095]
    assert np.allclose(p["w"], [0.855, -1.145])


def test_fan_in_uniform_bounds():
    rng = np.random.default_rng(0)
    w = fan_in_uniform(rng, (64, 64), 9)
    assert np.all(np.abs(w) <= 1.0 / 3.0 + 1e-12)
    assert w.std() > 0.05


def test_conv2d_rejects_bad_shapes():
    x = np.zeros((1, 2, 5, 5))
    w = np.zeros((3, 4, 3, 3))  # in-channels mismatch
    with pytest.raises(ValueError):
        conv2d(x, w, np.zeros(3))
