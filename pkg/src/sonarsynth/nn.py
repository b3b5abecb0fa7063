"""Minimal numpy building blocks shared by the denoising and segmentation nets.

Everything runs in float64 and is deterministic given the caller's RNG. The
convolutions are stride-1, zero-padded 'same', implemented via im2col so the
backward pass is two matmuls plus a transposed convolution.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, k):
    """Extract k x k patches of a (B, C, H, W) array with 'same' zero padding.

    Returns a (B, H, W, C*k*k) array; patches are contiguous copies so they
    can be fed straight into a matmul.
    """
    b, c, h, w = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # (B, C, H, W, k, k)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b, h, w, c * k * k)


def conv2d(x, weight, bias, return_cols=False):
    """Stride-1 'same' convolution (cross-correlation) of (B, Cin, H, W) input.

    weight: (Cout, Cin, k, k), bias: (Cout,). Returns (B, Cout, H, W); with
    return_cols=True also hands back the im2col matrix for backward reuse.
    """
    cout = weight.shape[0]
    k = weight.shape[2]
    cols = im2col(x, k)
    out = (cols @ weight.reshape(cout, -1).T + bias).transpose(0, 3, 1, 2)
    if return_cols:
        return out, cols
    return out


def conv2d_backward(x, weight, dout, cols=None):
    """Gradients of conv2d. Returns (dx, dweight, dbias).

    dout has the output's shape (B, Cout, H, W). dx is computed as a 'same'
    convolution of dout with the spatially flipped, channel-swapped kernels,
    which is exact for stride 1 and symmetric zero padding. Passing the cols
    saved from the forward call skips recomputing im2col.
    """
    cout, cin, k, _ = weight.shape
    if cols is None:
        cols = im2col(x, k)
    dout_flat = dout.transpose(0, 2, 3, 1).reshape(-1, cout)
    dweight = (dout_flat.T @ cols.reshape(-1, cin * k * k)).reshape(cout, cin, k, k)
    dbias = dout_flat.sum(axis=0)
    w_t = weight.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1]
    dx = conv2d(dout, np.ascontiguousarray(w_t), np.zeros(cin))
    return dx, dweight, dbias


def sinusoidal_embedding(t, dim):
    """Sinusoidal embedding of integer step indices.

    t: scalar or (B,) array of step indices. Returns (B, dim) with interleaved
    sin/cos at geometrically spaced frequencies (base period 10000).
    """
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def fan_in_uniform(rng, shape, fan_in):
    """Seeded uniform init with 1/sqrt(fan_in) scaling."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class ParamVector:
    """A flat float64 parameter vector with named reshaped views.

    Layers index into one contiguous buffer, so optimizer updates on the flat
    vector are visible through the views and vice versa.
    """

    def __init__(self, spec):
        # spec: list of (name, shape)
        self.spec = list(spec)
        total = sum(int(np.prod(shape)) for _, shape in self.spec)
        self.data = np.zeros(total, dtype=np.float64)
        self.views = {}
        off = 0
        for name, shape in self.spec:
            n = int(np.prod(shape))
            self.views[name] = self.data[off:off + n].reshape(shape)
            off += n

    def __getitem__(self, name):
        return self.views[name]

    @property
    def size(self):
        return self.data.size

    def copy(self):
        other = ParamVector(self.spec)
        other.data[:] = self.data
        return other

    def grad_like(self):
        """A zeroed ParamVector with the same layout, for accumulating grads."""
        return ParamVector(self.spec)


class MomentumSGD:
    """Plain momentum SGD on a flat parameter vector. Deterministic."""

    def __init__(self, lr, momentum=0.9):
        self.lr = lr
        self.momentum = momentum
        self.velocity = None

    def step(self, params, grad):
        if self.velocity is None:
            self.velocity = np.zeros_like(params.data)
        self.velocity = self.momentum * self.velocity - self.lr * grad.data
        params.data += self.velocity
