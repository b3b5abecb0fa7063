"""Diffusion noise schedules: per-step variances and their cumulative products.

Step indices are 1-based (t = 1..T, with x_0 the clean image); array storage
is 0-based, so accessor methods do the shift. alpha_bar(0) is defined as 1.
"""
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step noise rates beta_t with derived alpha_t and alpha_bar_t.

    alphas[t-1] = 1 - betas[t-1] exactly; alpha_bars[t-1] is the running
    product of alphas computed in extended precision (the tail underflows
    float32 for long schedules) and rounded once to float64.
    """
    betas: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)
    kind: str = "linear"

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ValueError("betas must be a non-empty 1-D array")
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise ValueError("every beta_t must lie strictly in (0, 1)")
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas.astype(np.longdouble)).astype(np.float64)
        if np.any(np.diff(alpha_bars) >= 0.0):
            raise ValueError("alpha_bar must be strictly decreasing")
        if not (0.0 < alpha_bars[-1] <= alpha_bars[0] < 1.0):
            raise ValueError("alpha_bar out of (0, 1)")
        for arr in (betas, alphas, alpha_bars):
            arr.flags.writeable = False
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", alpha_bars)

    @property
    def num_steps(self):
        return int(self.betas.size)

    def _check_t(self, t):
        if not 1 <= t <= self.num_steps:
            raise ValueError(f"step index {t} outside 1..{self.num_steps}")

    def beta(self, t):
        self._check_t(t)
        return float(self.betas[t - 1])

    def alpha(self, t):
        self._check_t(t)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t):
        if t == 0:
            return 1.0
        self._check_t(t)
        return float(self.alpha_bars[t - 1])

    def posterior_variance(self, t):
        """Variance of the reverse-step posterior at t:
        beta_tilde_t = (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t) * beta_t.
        Zero at t = 1.
        """
        self._check_t(t)
        return (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t)) * self.beta(t)

    def to_json_dict(self):
        """Serializable description; derived arrays are recomputed on load."""
        if self.kind != "linear":
            raise ValueError(f"cannot serialize schedule of kind {self.kind!r}")
        return {
            "kind": self.kind,
            "num_steps": self.num_steps,
            "beta_start": float(self.betas[0]),
            "beta_end": float(self.betas[-1]),
        }

    @staticmethod
    def from_json_dict(d):
        if d.get("kind") != "linear":
            raise ValueError(f"unsupported schedule kind {d.get('kind')!r}")
        return linear_schedule(int(d["num_steps"]), float(d["beta_start"]), float(d["beta_end"]))


def linear_schedule(num_steps, beta_start, beta_end):
    """Linearly interpolated betas from beta_start (t=1) to beta_end (t=T).

    Requires num_steps >= 1 and 0 < beta_start <= beta_end < 1. A single-step
    schedule uses beta_start (== beta_end).
    """
    if num_steps < 1:
        raise ValueError("num_steps must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    if num_steps == 1:
        if beta_start != beta_end:
            raise ValueError("single-step schedule needs beta_start == beta_end")
        betas = np.array([beta_start])
    else:
        betas = np.linspace(beta_start, beta_end, num_steps)
    return NoiseSchedule(betas=betas, kind="linear")


def subsequence(sched, length):
    """Evenly spaced 1-based step indices of the given length, ending at T.

    The k-th index (k = 1..length) is round(k * T / length) with half-up
    rounding in exact integer arithmetic, which is strictly increasing for
    any 1 <= length <= T. length == T yields the identity sequence.
    """
    t_max = sched.num_steps
    if not 1 <= length <= t_max:
        raise ValueError(f"subsequence length {length} outside 1..{t_max}")
    idx = np.array([(2 * k * t_max + length) // (2 * length) for k in range(1, length + 1)],
                   dtype=np.int64)
    assert idx[-1] == t_max and np.all(np.diff(idx) > 0)
    return [int(i) for i in idx]
