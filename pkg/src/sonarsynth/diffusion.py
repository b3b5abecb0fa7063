"""Forward diffusion and DDPM/DDIM reverse samplers.

All sampling happens in a symmetric [-1, 1] image space (x = 2*img - 1);
the final output is mapped back to [0, 1] and clamped once, at the end.
Both samplers are expressed through per-step linear update coefficients so
the DDPM <-> DDIM(eta=1, S=T) equivalence is a structural identity rather
than a coincidence of two code paths.
"""
import math
from dataclasses import dataclass

import numpy as np

from .schedule import subsequence
from .storage import LabeledImage, MineClass, Provenance


class SamplingError(RuntimeError):
    """Raised when a trajectory turns non-finite (reports the step index)."""


def to_internal(img01):
    """Map [0,1] pixels to the [-1,1] space the denoiser is trained in."""
    return 2.0 * np.asarray(img01, dtype=np.float64) - 1.0


def to_image(x):
    """Map internal values back to clamped [0,1] pixels."""
    return np.clip((np.asarray(x, dtype=np.float64) + 1.0) / 2.0, 0.0, 1.0)


def forward_step(x_prev, t, eps, schedule):
    """One Markov noising step: x_t = sqrt(1-beta_t) x_{t-1} + sqrt(beta_t) eps."""
    x_prev = np.asarray(x_prev, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x_prev.shape != eps.shape:
        raise ValueError(f"shape mismatch: {x_prev.shape} vs {eps.shape}")
    beta = schedule.beta(t)
    return math.sqrt(1.0 - beta) * x_prev + math.sqrt(beta) * eps


def forward_closed(x0, t, eps, schedule):
    """Closed-form jump to step t: x_t = sqrt(abar_t) x_0 + sqrt(1-abar_t) eps."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: {x0.shape} vs {eps.shape}")
    abar = schedule.alpha_bar(t)
    return math.sqrt(abar) * x0 + math.sqrt(1.0 - abar) * eps


def ddpm_coefficients(schedule, t):
    """(coef_x, coef_eps, sigma) for x_{t-1} = coef_x*x_t + coef_eps*eps_hat + sigma*z.

    sigma^2 is the posterior variance beta_tilde_t; sigma = 0 at t = 1.
    """
    alpha = schedule.alpha(t)
    abar = schedule.alpha_bar(t)
    coef_x = 1.0 / math.sqrt(alpha)
    coef_eps = -schedule.beta(t) / (math.sqrt(alpha) * math.sqrt(1.0 - abar))
    sigma = math.sqrt(schedule.posterior_variance(t))
    return coef_x, coef_eps, sigma


def ddim_coefficients(schedule, t, t_prev, eta):
    """(coef_x, coef_eps, sigma) for the DDIM jump t -> t_prev.

    Derived from x0_hat = (x_t - sqrt(1-abar_t) eps)/sqrt(abar_t) and
    x_prev = sqrt(abar_p) x0_hat + sqrt(1-abar_p-sigma^2) eps + sigma z,
    with sigma = eta sqrt((1-abar_p)/(1-abar_t)) sqrt(1-abar_t/abar_p).
    """
    if not 0 <= t_prev < t:
        raise ValueError(f"need 0 <= t_prev < t, got t={t}, t_prev={t_prev}")
    abar_t = schedule.alpha_bar(t)
    abar_p = schedule.alpha_bar(t_prev)
    sigma = (eta * math.sqrt((1.0 - abar_p) / (1.0 - abar_t))
             * math.sqrt(1.0 - abar_t / abar_p))
    rad = 1.0 - abar_p - sigma ** 2
    if rad < 0.0:
        # numerical guard: the exact value is >= 0, clamp tiny negatives
        if rad < -1e-9:
            import warnings
            warnings.warn(f"DDIM direction radicand {rad:.3e} clamped to 0 at t={t}")
        rad = 0.0
    coef_x = math.sqrt(abar_p / abar_t)
    coef_eps = math.sqrt(rad) - math.sqrt(abar_p / abar_t) * math.sqrt(1.0 - abar_t)
    return coef_x, coef_eps, sigma


@dataclass(frozen=True)
class SamplerConfig:
    kind: str = "ddpm"              # "ddpm" | "ddim"
    steps: int = 0                  # DDIM subsequence length; 0 = full T
    eta: float = 0.0                # DDIM stochasticity; ignored for DDPM
    seed: int = 0

    def validate(self, schedule):
        if self.kind not in ("ddpm", "ddim"):
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        s = self.steps or schedule.num_steps
        if not 1 <= s <= schedule.num_steps:
            raise ValueError(f"steps {s} outside 1..{schedule.num_steps}")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta {self.eta} outside [0, 1]")
        return s


def _check_finite(x, t):
    if not np.all(np.isfinite(x)):
        raise SamplingError(f"non-finite state at step t={t}")


def sample_ddpm(model, schedule, seed, shape=(32, 32), z_rng=None):
    """Full-T ancestral sampling. Returns internal-space x_0 (not clamped).

    x_T and the per-step z noises are drawn from independent streams spawned
    from the seed, so a caller-supplied z_rng can replace the z stream
    without touching x_T.
    """
    ss = np.random.SeedSequence(seed)
    xT_rng, z_default = [np.random.default_rng(c) for c in ss.spawn(2)]
    if z_rng is None:
        z_rng = z_default
    x = xT_rng.standard_normal(shape)
    for t in range(schedule.num_steps, 0, -1):
        eps_hat = model.predict_eps(x, t, schedule)
        coef_x, coef_eps, sigma = ddpm_coefficients(schedule, t)
        x = coef_x * x + coef_eps * eps_hat
        if t > 1:
            x = x + sigma * z_rng.standard_normal(shape)
        _check_finite(x, t)
    return x


def sample_ddim(model, schedule, config, shape=(32, 32), z_rng=None):
    """Subsequence sampling per SamplerConfig. Returns internal-space x_0."""
    s = config.validate(schedule)
    idx = subsequence(schedule, s)
    pairs = list(zip(idx[::-1], (idx[::-1] + [0])[1:]))  # (t, t_prev), ends at 0
    ss = np.random.SeedSequence(config.seed)
    xT_rng, z_default = [np.random.default_rng(c) for c in ss.spawn(2)]
    if z_rng is None:
        z_rng = z_default
    x = xT_rng.standard_normal(shape)
    for t, t_prev in pairs:
        eps_hat = model.predict_eps(x, t, schedule)
        coef_x, coef_eps, sigma = ddim_coefficients(schedule, t, t_prev, config.eta)
        x = coef_x * x + coef_eps * eps_hat
        if sigma > 0.0 and t_prev > 0:
            x = x + sigma * z_rng.standard_normal(shape)
        _check_finite(x, t)
    return x


def sample_batch(model, schedule, config, n, shape=(32, 32), chunk=64):
    """n independent samples; per-image seeds spawned from config.seed.

    Images are batched through the denoiser in chunks for speed, which is
    bit-equivalent to sampling one at a time because every image owns its
    own noise streams.
    """
    children = np.random.SeedSequence(config.seed).spawn(n)
    out = np.empty((n,) + shape)
    T = schedule.num_steps
    if config.kind == "ddim":
        s = config.validate(schedule)
        idx = subsequence(schedule, s)
        pairs = list(zip(idx[::-1], (idx[::-1] + [0])[1:]))
    else:
        pairs = [(t, t - 1) for t in range(T, 0, -1)]
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        rngs = [[np.random.default_rng(c) for c in children[i].spawn(2)]
                for i in range(lo, hi)]
        x = np.stack([r[0].standard_normal(shape) for r in rngs])
        for t, t_prev in pairs:
            eps_hat = model.predict_eps(x, t, schedule)
            if config.kind == "ddim":
                coef_x, coef_eps, sigma = ddim_coefficients(schedule, t, t_prev, config.eta)
            else:
                coef_x, coef_eps, sigma = ddpm_coefficients(schedule, t)
            x = coef_x * x + coef_eps * eps_hat
            if sigma > 0.0 and t_prev > 0:
                z = np.stack([r[1].standard_normal(shape) for r in rngs])
                x = x + sigma * z
            _check_finite(x, t)
        out[lo:hi] = x
    return out


class EvalCountingModel:
    """Wrapper that counts denoiser evaluations (performance contract)."""

    def __init__(self, model):
        self.model = model
        self.calls = 0

    def predict_eps(self, x, t, schedule):
        self.calls += 1
        return self.model.predict_eps(x, t, schedule)


def generate_set(model, schedule, config, n, out_dir, shape=(32, 32),
                 dump_trajectory=False, detector=None):
    """Sample n images, pseudo-label them, and persist a DatasetManifest.

    Generated images carry DDPM/DDIM provenance. Masks come from the same
    kind of highlight detector the ORR metric uses (optionally with its own
    thresholds); images where no mine-like highlight is found are kept as
    unlabeled (class None) negatives.
    """
    from .genmetrics import DetectorConfig, detect_highlight_shadow

    if n < 1:
        raise ValueError("n must be >= 1")
    if detector is None:
        detector = DetectorConfig()
    prov = Provenance.DDPM if config.kind == "ddpm" else Provenance.DDIM
    if dump_trajectory:
        _dump_one_trajectory(model, schedule, config, shape, out_dir)
    xs = sample_batch(model, schedule, config, n, shape=shape)
    images = []
    for i in range(n):
        pixels = to_image(xs[i])
        det = detect_highlight_shadow(pixels, detector)
        mask = det.mask if det.accepted else np.zeros(shape, dtype=bool)
        cls = det.mine_class if det.accepted else MineClass.NONE
        images.append(LabeledImage(pixels=pixels, mask=mask, mine_class=cls,
                                   provenance=prov, seed=int(config.seed) + i))
    from .storage import write_dataset
    return write_dataset(images, out_dir, base_seed=config.seed,
                         prefix=prov.value.lower())


def _dump_one_trajectory(model, schedule, config, shape, out_dir):
    """Debug aid: write every intermediate x_t of one trajectory to disk."""
    import json
    import os

    os.makedirs(out_dir, exist_ok=True)
    states = []
    T = schedule.num_steps
    if config.kind == "ddim":
        s = config.validate(schedule)
        idx = subsequence(schedule, s)
        pairs = list(zip(idx[::-1], (idx[::-1] + [0])[1:]))
    else:
        pairs = [(t, t - 1) for t in range(T, 0, -1)]
    ss = np.random.SeedSequence(config.seed)
    xT_rng, z_rng = [np.random.default_rng(c) for c in ss.spawn(2)]
    x = xT_rng.standard_normal(shape)
    entries = []

    def record(tag, arr):
        fname = f"traj_{len(entries):04d}_{tag}.f32"
        with open(os.path.join(out_dir, fname), "wb") as f:
            f.write(np.asarray(arr, dtype="<f4").tobytes())
        entries.append({"file": fname, "tag": tag, "shape": list(arr.shape)})

    record(f"x_t{pairs[0][0]}", x)
    for t, t_prev in pairs:
        eps_hat = model.predict_eps(x, t, schedule)
        if config.kind == "ddim":
            coef_x, coef_eps, sigma = ddim_coefficients(schedule, t, t_prev, config.eta)
        else:
            coef_x, coef_eps, sigma = ddpm_coefficients(schedule, t)
        x = coef_x * x + coef_eps * eps_hat
        if sigma > 0.0 and t_prev > 0:
            x = x + sigma * z_rng.standard_normal(shape)
        record(f"x_t{t_prev}", x)
    with open(os.path.join(out_dir, "trajectory_index.json"), "w") as f:
        json.dump({"kind": config.kind, "seed": config.seed, "states": entries}, f,
                  indent=2)
    return states
