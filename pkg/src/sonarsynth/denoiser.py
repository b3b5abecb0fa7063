"""Small time-conditioned noise predictor with manual backprop.

Architecture: input scaling -> conv3x3 -> (+ time-embedding projection)
-> tanh -> conv3x3 -> tanh -> conv3x3 to one channel. The output layer is
zero-initialized so an untrained model predicts exactly zero noise.

The input is divided by sqrt(1 - abar_t) before the first convolution.
The ideal eps-predictor has slope 1/sqrt(1 - abar_t) in x_t, which spans
two orders of magnitude across t; pre-scaling flattens that to slope ~1 so
the additive time conditioning only has to supply per-step offsets.
"""
import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from .nn import (MomentumSGD, ParamVector, conv2d, conv2d_backward,
                 fan_in_uniform, sinusoidal_embedding)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class DenoiserConfig:
    channels: int = 24
    temb_dim: int = 48
    kernel: int = 3
    init_seed: int = 0


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    batch_size: int = 16
    lr: float = 0.02
    momentum: float = 0.9
    seed: int = 0

    def validate(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0.0:
            raise ValueError(f"bad train config: {self}")


class Denoiser:
    """eps_theta(x_t, t). Parameters live in one flat float64 vector."""

    def __init__(self, config=None):
        self.config = config or DenoiserConfig()
        c, d, k = self.config.channels, self.config.temb_dim, self.config.kernel
        self.params = ParamVector([
            ("W1", (c, 1, k, k)), ("b1", (c,)),
            ("Wt", (c, d)), ("bt", (c,)),
            ("W2", (c, c, k, k)), ("b2", (c,)),
            ("W3", (1, c, k, k)), ("b3", (1,)),
        ])
        self._init_weights()
        self.train_steps = 0

    def _init_weights(self):
        rng = np.random.default_rng(self.config.init_seed)
        c, d, k = self.config.channels, self.config.temb_dim, self.config.kernel
        p = self.params
        p["W1"][:] = fan_in_uniform(rng, p["W1"].shape, 1 * k * k)
        p["Wt"][:] = fan_in_uniform(rng, p["Wt"].shape, d)
        p["W2"][:] = fan_in_uniform(rng, p["W2"].shape, c * k * k)
        # W3, b3 and the biases stay zero: untrained model emits zero noise

    # -- forward / backward -------------------------------------------------

    def _scale(self, t, schedule):
        abars = np.array([schedule.alpha_bar(int(ti)) for ti in np.atleast_1d(t)])
        return 1.0 / np.sqrt(1.0 - abars)

    def forward(self, x, t, schedule, want_cache=False):
        """x: (B,1,H,W) internal-space batch; t: (B,) ints. Returns eps_hat."""
        p = self.params
        t = np.atleast_1d(t)
        cin = self._scale(t, schedule)[:, None, None, None]
        xs = x * cin
        emb = sinusoidal_embedding(t, self.config.temb_dim)
        shift = emb @ p["Wt"].T + p["bt"]                       # (B, C)
        if want_cache:
            c1, cols1 = conv2d(xs, p["W1"], p["b1"], return_cols=True)
            h1 = np.tanh(c1 + shift[:, :, None, None])
            c2, cols2 = conv2d(h1, p["W2"], p["b2"], return_cols=True)
            h2 = np.tanh(c2)
            out, cols3 = conv2d(h2, p["W3"], p["b3"], return_cols=True)
            return out, (xs, emb, h1, h2, cols1, cols2, cols3)
        h1 = np.tanh(conv2d(xs, p["W1"], p["b1"]) + shift[:, :, None, None])
        h2 = np.tanh(conv2d(h1, p["W2"], p["b2"]))
        return conv2d(h2, p["W3"], p["b3"])

    def predict_eps(self, x_t, t, schedule):
        """Predict the driving noise for x_t at step t. Shape-preserving."""
        x_t = np.asarray(x_t, dtype=np.float64)
        if x_t.ndim == 2:
            out = self.forward(x_t[None, None], np.array([t]), schedule)
            return out[0, 0]
        if x_t.ndim == 3:  # (B, H, W)
            tt = np.full(x_t.shape[0], t) if np.isscalar(t) else np.asarray(t)
            out = self.forward(x_t[:, None], tt, schedule)
            return out[:, 0]
        if x_t.ndim == 4:
            tt = np.full(x_t.shape[0], t) if np.isscalar(t) else np.asarray(t)
            return self.forward(x_t, tt, schedule)
        raise ValueError(f"bad input rank {x_t.ndim}; expected image or batch")

    def loss_and_grad(self, x0, eps, t, schedule):
        """MSE between predicted and injected noise, plus the full gradient.

        x0, eps: (B,1,H,W); t: (B,) in 1..T. x_t is formed internally via the
        closed-form jump, so callers supply clean images and target noise.
        """
        if x0.shape[0] == 0:
            raise ValueError("empty batch")
        p = self.params
        abars = np.array([schedule.alpha_bar(int(ti)) for ti in t])
        a = np.sqrt(abars)[:, None, None, None]
        s = np.sqrt(1.0 - abars)[:, None, None, None]
        x_t = a * x0 + s * eps

        out, (xs, emb, h1, h2, cols1, cols2, cols3) = self.forward(
            x_t, t, schedule, want_cache=True)
        diff = out - eps
        n = diff.size
        loss = float(np.sum(diff * diff) / n)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss {loss}")

        grad = self.params.grad_like()
        dout = 2.0 * diff / n
        dh2, dW3, db3 = conv2d_backward(h2, p["W3"], dout, cols=cols3)
        grad["W3"][:] = dW3
        grad["b3"][:] = db3
        dpre2 = dh2 * (1.0 - h2 * h2)
        dh1, dW2, db2 = conv2d_backward(h1, p["W2"], dpre2, cols=cols2)
        grad["W2"][:] = dW2
        grad["b2"][:] = db2
        dpre1 = dh1 * (1.0 - h1 * h1)
        _, dW1, db1 = conv2d_backward(xs, p["W1"], dpre1, cols=cols1)
        grad["W1"][:] = dW1
        grad["b1"][:] = db1
        dshift = dpre1.sum(axis=(2, 3))                          # (B, C)
        grad["Wt"][:] = dshift.T @ emb
        grad["bt"][:] = dshift.sum(axis=0)
        return loss, grad

    # -- training -----------------------------------------------------------

    def probe_loss(self, probe, schedule):
        x0, eps, t = probe
        out = self.forward(forward_closed_batch(x0, eps, t, schedule), t, schedule)
        d = out - eps
        return float(np.sum(d * d) / d.size)

    def train(self, dataset, config, schedule, probe=None, log_every=0):
        """SGD with momentum over random (image, eps, t) draws.

        Each step samples batch_size images with replacement; an epoch is
        ceil(N / batch_size) steps. Aborts if the loss turns non-finite or
        exceeds 10x the initial probe loss. Returns the probe-loss history
        (first entry = at initialization, last = after the final epoch).
        """
        config.validate()
        xs = _as_internal_batch(dataset)
        n = xs.shape[0]
        rng = np.random.default_rng(config.seed)
        if probe is None:
            probe = make_probe(xs, schedule, seed=config.seed + 1)
        opt = MomentumSGD(config.lr, config.momentum)
        initial = self.probe_loss(probe, schedule)
        history = [initial]
        steps_per_epoch = max(1, -(-n // config.batch_size))
        probe_every = max(1, config.epochs // 20)
        for epoch in range(config.epochs):
            for _ in range(steps_per_epoch):
                idx = rng.integers(0, n, size=config.batch_size)
                t = rng.integers(1, schedule.num_steps + 1, size=config.batch_size)
                eps = rng.standard_normal((config.batch_size, 1) + xs.shape[2:])
                loss, grad = self.loss_and_grad(xs[idx], eps, t, schedule)
                if loss > 10.0 * max(initial, 1e-12):
                    raise TrainingDiverged(
                        f"loss {loss:.4g} exceeded 10x initial {initial:.4g} "
                        f"at epoch {epoch}")
                opt.step(self.params, grad)
                if not np.all(np.isfinite(self.params.data)):
                    raise TrainingDiverged(f"non-finite parameters at epoch {epoch}")
                self.train_steps += 1
            if (epoch + 1) % probe_every == 0 or epoch == config.epochs - 1:
                history.append(self.probe_loss(probe, schedule))
                if log_every and (epoch + 1) % log_every == 0:
                    print(f"epoch {epoch + 1:4d}  probe {history[-1]:.5f}")
        return history

    # -- persistence ----------------------------------------------------------

    def save(self, path):
        header = {"config": asdict(self.config), "train_steps": self.train_steps,
                  "param_count": int(self.params.size)}
        with open(path, "wb") as f:
            f.write((json.dumps(header) + "\n").encode("ascii"))
            f.write(self.params.data.astype("<f4").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            header = json.loads(f.readline().decode("ascii"))
            flat = np.frombuffer(f.read(), dtype="<f4").astype(np.float64)
        model = cls(DenoiserConfig(**header["config"]))
        if flat.size != model.params.size:
            raise ValueError(f"parameter count mismatch: file has {flat.size}, "
                             f"config wants {model.params.size}")
        model.params.data[:] = flat
        model.train_steps = int(header.get("train_steps", 0))
        return model


def _as_internal_batch(dataset):
    """Accept LabeledImages or [0,1] arrays; return (N,1,H,W) in [-1,1]."""
    imgs = []
    for item in dataset:
        px = item.pixels if hasattr(item, "pixels") else np.asarray(item)
        imgs.append(2.0 * px.astype(np.float64) - 1.0)
    if not imgs:
        raise ValueError("empty dataset")
    return np.stack(imgs)[:, None]


def forward_closed_batch(x0, eps, t, schedule):
    abars = np.array([schedule.alpha_bar(int(ti)) for ti in t])
    a = np.sqrt(abars)[:, None, None, None]
    s = np.sqrt(1.0 - abars)[:, None, None, None]
    return a * x0 + s * eps


def make_probe(xs, schedule, seed, size=64):
    """A fixed batch of (x0, eps, t) for monitoring training progress."""
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, xs.shape[0], size=size)
    t = rng.integers(1, schedule.num_steps + 1, size=size)
    eps = rng.standard_normal((size, 1) + xs.shape[2:])
    return xs[idx], eps, t


def save_denoiser(model, path):
    os.makedirs(os.path.dirname(os.fspath(path)) or ".", exist_ok=True)
    model.save(path)


def load_denoiser(path):
    return Denoiser.load(path)
