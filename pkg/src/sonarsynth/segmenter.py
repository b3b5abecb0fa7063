"""Per-pixel mine segmentation with a small conv net and BCE+Focal loss.

The net maps a [0,1] grayscale image to per-pixel mine probability through
three 3x3 convolutions (tanh, tanh, sigmoid). Instances are extracted from
the probability map by thresholding and 4-connected component labeling.
"""
import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .nn import MomentumSGD, ParamVector, conv2d, conv2d_backward, fan_in_uniform


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class SegConfig:
    channels: int = 8
    kernel: int = 3
    init_seed: int = 0
    normalize: bool = True    # per-image median/MAD standardization of the
                              # input, so brightness and contrast shifts
                              # between acquisition sources cancel out


@dataclass(frozen=True)
class SegTrainConfig:
    epochs: int = 30
    batch_size: int = 4
    lr: float = 0.04          # larger rates collapse to all-background
    momentum: float = 0.9
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    seed: int = 0

    def validate(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0.0:
            raise ValueError(f"bad train config: {self}")
        if self.focal_gamma < 0.0 or not 0.0 < self.focal_alpha <= 1.0:
            raise ValueError(f"bad focal parameters: {self}")


@dataclass
class InstancePrediction:
    mask: np.ndarray     # boolean component
    score: float         # mean pixel probability over the component

    @property
    def area(self):
        return int(self.mask.sum())


_CROSS = ndimage.generate_binary_structure(2, 1)


def _log_sigmoid(u):
    # log(sigmoid(u)) = -log(1 + exp(-u)), stable for large |u|
    return -np.logaddexp(0.0, -u)


def bce_focal_loss(z, y, gamma=2.0, alpha=0.25):
    """Mean per-pixel BCE(p,y) + FL(p,y) and its gradient in the logit z.

    FL = -alpha (1 - p_t)^gamma log(p_t) with p_t the probability assigned
    to the true class. gamma=0, alpha=1 makes the focal term equal BCE.
    """
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    s = 2.0 * y - 1.0
    log_pt = _log_sigmoid(s * z)
    pt = np.exp(log_pt)
    one_m_pt = 1.0 / (1.0 + np.exp(s * z))      # sigmoid(-s z) = 1 - p_t
    bce = -log_pt
    focal = -alpha * one_m_pt ** gamma * log_pt
    loss = float(np.mean(bce + focal))
    n = z.size
    dbce = -s * one_m_pt                         # = p - y
    dfocal = alpha * s * (gamma * pt * one_m_pt ** gamma * log_pt
                          - one_m_pt ** (gamma + 1.0))
    dz = (dbce + dfocal) / n
    return loss, dz


class SegModel:
    """Three-conv semantic net; parameters in one flat float64 vector."""

    def __init__(self, config=None):
        self.config = config or SegConfig()
        c, k = self.config.channels, self.config.kernel
        self.params = ParamVector([
            ("W1", (c, 1, k, k)), ("b1", (c,)),
            ("W2", (c, c, k, k)), ("b2", (c,)),
            ("W3", (1, c, k, k)), ("b3", (1,)),
        ])
        rng = np.random.default_rng(self.config.init_seed)
        p = self.params
        p["W1"][:] = fan_in_uniform(rng, p["W1"].shape, k * k)
        p["W2"][:] = fan_in_uniform(rng, p["W2"].shape, c * k * k)
        # output layer zero: untrained model says p = 0.5 everywhere
        self.train_steps = 0

    def _prep(self, x):
        if not self.config.normalize:
            return x
        med = np.median(x, axis=(-2, -1), keepdims=True)
        mad = np.median(np.abs(x - med), axis=(-2, -1), keepdims=True)
        rob = np.maximum(1.4826 * mad, 1e-3)
        # 0.2 keeps standardized values near the [0,1] span the init expects
        return 0.2 * (x - med) / rob

    def logits(self, x, want_cache=False):
        """x: (B,1,H,W) in [0,1] -> (B,1,H,W) logits."""
        p = self.params
        x = self._prep(x)
        if want_cache:
            c1, cols1 = conv2d(x, p["W1"], p["b1"], return_cols=True)
            h1 = np.tanh(c1)
            c2, cols2 = conv2d(h1, p["W2"], p["b2"], return_cols=True)
            h2 = np.tanh(c2)
            z, cols3 = conv2d(h2, p["W3"], p["b3"], return_cols=True)
            return z, (h1, h2, cols1, cols2, cols3)
        h1 = np.tanh(conv2d(x, p["W1"], p["b1"]))
        h2 = np.tanh(conv2d(h1, p["W2"], p["b2"]))
        return conv2d(h2, p["W3"], p["b3"])

    def predict_proba(self, img):
        """img: (H, W) in [0,1] -> (H, W) probabilities in (0, 1)."""
        z = self.logits(np.asarray(img, dtype=np.float64)[None, None])[0, 0]
        return 1.0 / (1.0 + np.exp(-z))

    def loss_and_grad(self, x, y, gamma=2.0, alpha=0.25):
        """x: (B,1,H,W) images, y: (B,1,H,W) binary masks."""
        if x.shape[0] == 0:
            raise ValueError("empty batch")
        p = self.params
        z, (h1, h2, cols1, cols2, cols3) = self.logits(x, want_cache=True)
        loss, dz = bce_focal_loss(z, y, gamma=gamma, alpha=alpha)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss {loss}")
        grad = self.params.grad_like()
        dh2, dW3, db3 = conv2d_backward(h2, p["W3"], dz, cols=cols3)
        grad["W3"][:] = dW3
        grad["b3"][:] = db3
        dpre2 = dh2 * (1.0 - h2 * h2)
        dh1, dW2, db2 = conv2d_backward(h1, p["W2"], dpre2, cols=cols2)
        grad["W2"][:] = dW2
        grad["b2"][:] = db2
        dpre1 = dh1 * (1.0 - h1 * h1)
        _, dW1, db1 = conv2d_backward(x, p["W1"], dpre1, cols=cols1)
        grad["W1"][:] = dW1
        grad["b1"][:] = db1
        return loss, grad

    def save(self, path):
        header = {"config": asdict(self.config), "train_steps": self.train_steps}
        with open(path, "wb") as f:
            f.write((json.dumps(header) + "\n").encode("ascii"))
            f.write(self.params.data.astype("<f4").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            header = json.loads(f.readline().decode("ascii"))
            flat = np.frombuffer(f.read(), dtype="<f4").astype(np.float64)
        model = cls(SegConfig(**header["config"]))
        if flat.size != model.params.size:
            raise ValueError("parameter count mismatch")
        model.params.data[:] = flat
        model.train_steps = int(header.get("train_steps", 0))
        return model


def _dataset_arrays(dataset):
    """LabeledImages (or manifest) -> (x, y) as (N,1,H,W) float arrays."""
    if hasattr(dataset, "load_images"):
        dataset = dataset.load_images()
    xs, ys = [], []
    for item in dataset:
        xs.append(np.asarray(item.pixels, dtype=np.float64))
        ys.append(np.asarray(item.mask, dtype=np.float64))
    if not xs:
        raise ValueError("empty dataset")
    return np.stack(xs)[:, None], np.stack(ys)[:, None]


def train_seg(dataset, config=SegTrainConfig(), seg_config=None, probe_size=32):
    """Train a SegModel; returns (model, probe-loss history).

    Sampling mirrors the diffusion trainer: batch_size images drawn with
    replacement per step, ceil(N / batch_size) steps per epoch. Aborts on
    non-finite loss or loss exceeding 10x the initial probe loss.
    """
    config.validate()
    x, y = _dataset_arrays(dataset)
    n = x.shape[0]
    rng = np.random.default_rng(config.seed)
    probe_rng = np.random.default_rng(config.seed + 1)
    probe_idx = probe_rng.integers(0, n, size=min(probe_size, max(n, 1)))
    model = SegModel(seg_config)

    def probe_loss():
        z = model.logits(x[probe_idx])
        loss, _ = bce_focal_loss(z, y[probe_idx], gamma=config.focal_gamma,
                                 alpha=config.focal_alpha)
        return loss

    opt = MomentumSGD(config.lr, config.momentum)
    initial = probe_loss()
    history = [initial]
    steps_per_epoch = max(1, -(-n // config.batch_size))
    probe_every = max(1, config.epochs // 20)
    for epoch in range(config.epochs):
        for _ in range(steps_per_epoch):
            idx = rng.integers(0, n, size=config.batch_size)
            loss, grad = model.loss_and_grad(x[idx], y[idx],
                                             gamma=config.focal_gamma,
                                             alpha=config.focal_alpha)
            if loss > 10.0 * max(initial, 1e-12):
                raise TrainingDiverged(
                    f"loss {loss:.4g} exceeded 10x initial {initial:.4g} "
                    f"at epoch {epoch}")
            opt.step(model.params, grad)
            if not np.all(np.isfinite(model.params.data)):
                raise TrainingDiverged(f"non-finite parameters at epoch {epoch}")
            model.train_steps += 1
        if (epoch + 1) % probe_every == 0 or epoch == config.epochs - 1:
            history.append(probe_loss())
    return model, history


def predict_instances(model, img, p_thresh=0.5, min_area=4):
    """Threshold the probability map and extract scored components.

    Components are 4-connected, must reach min_area pixels, and are scored
    by mean probability; the list is sorted by descending score (ties by
    discovery order, which is deterministic).
    """
    if not 0.0 < p_thresh < 1.0:
        raise ValueError("p_thresh must be in (0, 1)")
    prob = model.predict_proba(img) if hasattr(model, "predict_proba") else model
    binary = prob >= p_thresh
    labels, n_comp = ndimage.label(binary, structure=_CROSS)
    preds = []
    for comp_id in range(1, n_comp + 1):
        comp = labels == comp_id
        if int(comp.sum()) < min_area:
            continue
        preds.append(InstancePrediction(mask=comp, score=float(prob[comp].mean())))
    preds.sort(key=lambda p: -p.score)
    return preds
