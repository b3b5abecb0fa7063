"""Generative-set metrics: FID, KID, SNR/noise, ORR proxy, inference time.

The feature space for FID/KID is a fixed, seeded random conv filter bank
with tanh and global average pooling — a tiny stand-in for the usual
Inception embedding that preserves every algebraic property the metrics
are tested on. Published FID/KID magnitudes are therefore not comparable;
orderings are.
"""
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .storage import MineClass


class InfiniteSnrError(ValueError):
    """Constant image: noise power is zero, SNR is unbounded."""


# ---------------------------------------------------------------------------
# feature embedding

class FeatureEmbedder:
    """Seeded random conv filters + tanh + global average pool -> d features."""

    def __init__(self, dim=64, kernel=5, seed=0):
        self.dim = dim
        self.kernel = kernel
        self.seed = seed
        rng = np.random.default_rng(seed)
        k2 = kernel * kernel
        self.filters = rng.normal(0.0, 1.0 / math.sqrt(k2), size=(dim, k2))
        self.offsets = rng.uniform(-0.5, 0.5, size=dim)

    def embed(self, img):
        """img: (H, W) in [0, 1] -> (dim,) feature vector."""
        from numpy.lib.stride_tricks import sliding_window_view

        a = np.asarray(img, dtype=np.float64)
        win = sliding_window_view(a, (self.kernel, self.kernel))
        cols = win.reshape(-1, self.kernel * self.kernel)
        feats = np.tanh(cols @ self.filters.T + self.offsets)
        return feats.mean(axis=0)

    def embed_many(self, images):
        return np.stack([self.embed(im) for im in images])


@dataclass
class FeatureStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int


def embed_stats(images, embedder):
    """Mean and unbiased covariance of embedded features. Needs >= 2 images."""
    if len(images) < 2:
        raise ValueError(f"need at least 2 images for covariance, got {len(images)}")
    feats = embedder.embed_many(images)
    mu = feats.mean(axis=0)
    centered = feats - mu
    sigma = centered.T @ centered / (feats.shape[0] - 1)
    return FeatureStats(mu=mu, sigma=sigma, n=feats.shape[0])


# ---------------------------------------------------------------------------
# FID

def sqrtm_psd(a, sym_tol=1e-8):
    """Symmetric PSD square root via eigendecomposition.

    Eigenvalues in [-1e-8 * scale, 0) are clamped to zero; an asymmetric
    input is rejected.
    """
    a = np.asarray(a, dtype=np.float64)
    scale = max(1.0, float(np.abs(a).max()))
    if np.abs(a - a.T).max() > sym_tol * scale:
        raise ValueError("matrix is not symmetric")
    vals, vecs = np.linalg.eigh((a + a.T) / 2.0)
    if vals.min() < -1e-8 * scale:
        raise ValueError(f"matrix is not PSD: min eigenvalue {vals.min():.3e}")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid(real, fake):
    """Frechet distance between Gaussian feature fits.

    ||mu_r - mu_f||^2 + Tr(S_r + S_f - 2 (S_r S_f)^{1/2}), with the product
    root evaluated in the symmetrized form sqrt(S_r) S_f sqrt(S_r), which
    has the same trace. Tiny negative totals (>= -1e-6) clamp to 0.
    """
    if real.mu.shape != fake.mu.shape:
        raise ValueError(f"dimension mismatch: {real.mu.shape} vs {fake.mu.shape}")
    diff = real.mu - fake.mu
    root_r = sqrtm_psd(real.sigma)
    inner = root_r @ fake.sigma @ root_r
    vals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    tr_sqrt = np.sqrt(np.clip(vals, 0.0, None)).sum()
    val = float(diff @ diff + np.trace(real.sigma) + np.trace(fake.sigma)
                - 2.0 * tr_sqrt)
    if val < 0.0:
        if val < -1e-6:
            raise ValueError(f"FID {val:.3e} below numerical floor")
        val = 0.0
    return val


# ---------------------------------------------------------------------------
# KID

def rbf_kernel(x, y, sigma):
    """Gaussian kernel exp(-||x - y||^2 / (2 sigma^2))."""
    if sigma <= 0:
        raise ValueError("bandwidth sigma must be positive")
    d = np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    return float(np.exp(-(d @ d) / (2.0 * sigma * sigma)))


def _gram(a, b, sigma):
    d2 = (np.sum(a * a, 1)[:, None] + np.sum(b * b, 1)[None, :]
          - 2.0 * a @ b.T)
    return np.exp(-np.maximum(d2, 0.0) / (2.0 * sigma * sigma))


def median_bandwidth(feats):
    """Median pairwise Euclidean distance over the pooled feature set."""
    a = np.asarray(feats, dtype=np.float64)
    d2 = (np.sum(a * a, 1)[:, None] + np.sum(a * a, 1)[None, :] - 2.0 * a @ a.T)
    iu = np.triu_indices(len(a), k=1)
    if iu[0].size == 0:
        return 1.0
    med = float(np.median(np.sqrt(np.maximum(d2[iu], 0.0))))
    return med if med > 0.0 else 1.0


def kid(real_feats, fake_feats, sigma=None, unbiased=False):
    """Kernel MMD^2 between feature sets.

    Default is the V-statistic exactly as published: diagonal terms kept
    and the cross term weighted 2/n^2 (n = len(real)). The standard
    unbiased estimator (diagonals dropped, cross term 2/(n m)) is available
    behind the flag.
    """
    x = np.asarray(real_feats, dtype=np.float64)
    y = np.asarray(fake_feats, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if y.ndim == 1:
        y = y[None, :]
    n, m = len(x), len(y)
    if n == 0 or m == 0:
        raise ValueError("KID needs nonempty feature sets")
    if sigma is None:
        sigma = median_bandwidth(np.concatenate([x, y]))
    kxx = _gram(x, x, sigma)
    kyy = _gram(y, y, sigma)
    kxy = _gram(x, y, sigma)
    if unbiased:
        if n < 2 or m < 2:
            raise ValueError("unbiased KID needs n, m >= 2")
        term_x = (kxx.sum() - np.trace(kxx)) / (n * (n - 1))
        term_y = (kyy.sum() - np.trace(kyy)) / (m * (m - 1))
        cross = 2.0 * kxy.sum() / (n * m)
    else:
        term_x = kxx.sum() / (n * n)
        term_y = kyy.sum() / (m * m)
        cross = 2.0 * kxy.sum() / (n * n)
    return float(term_x + term_y - cross)


# ---------------------------------------------------------------------------
# SNR / noise (8-bit scale, matching sonar-report conventions)

def snr(img):
    """(avg_noise, snr_db): P_s = pixel mean, P_n = pixel std, on 0..255.

    SNR = 10 log10(P_s / P_n). Constant images raise InfiniteSnrError.
    """
    a = np.asarray(img, dtype=np.float64) * 255.0
    if a.size == 0:
        raise ValueError("empty image")
    p_s = float(a.mean())
    p_n = float(a.std())
    if p_n == 0.0:
        raise InfiniteSnrError("constant image has zero noise power")
    if p_s <= 0.0:
        raise ValueError(f"non-positive signal power {p_s}")
    return p_n, 10.0 * math.log10(p_s / p_n)


# ---------------------------------------------------------------------------
# ORR proxy: automated highlight+shadow detector

@dataclass(frozen=True)
class DetectorConfig:
    k_highlight: float = 2.0     # bright threshold, in robust stds over median
    k_shadow: float = 1.75       # dark threshold below median
    min_area: int = 6            # bright component minimum size (pixels)
    min_shadow: int = 4          # adjacent dark pixels required (floor; see below)
    adjacency: int = 4           # dilation radius defining "adjacent"
    elongation: float = 1.8      # axis ratio separating cylindrical from conical
    k_mask: float = 0.0          # optional hysteresis: grow the output mask
                                 # into the connected region above this weaker
                                 # threshold (0 disables; detection unchanged)
    mask_all: bool = False       # mask every qualifying blob instead of only
                                 # the largest; an image holding several
                                 # objects then gets a consistent label


@dataclass
class DetectionResult:
    accepted: bool
    mask: np.ndarray = None
    mine_class: MineClass = MineClass.NONE
    details: dict = field(default_factory=dict)


_CROSS = ndimage.generate_binary_structure(2, 1)  # 4-connectivity


def _shape_mask(a, med, rob, comp, area, config):
    """Post-process one accepted component into its reported mask."""
    if 0.0 < config.k_mask < config.k_highlight:
        # hysteresis: acceptance used the strong threshold; the reported mask
        # may grow into the weak-threshold component around the strong core
        # (bounded, so a noisy background cannot balloon it)
        weak = a >= med + config.k_mask * rob
        wlab, _ = ndimage.label(weak, structure=_CROSS)
        ids = np.unique(wlab[comp])
        grown = np.isin(wlab, ids[ids > 0])
        if area <= int(grown.sum()) <= 4 * area:
            comp = grown
    return comp


def detect_highlight_shadow(pixels, config=DetectorConfig()):
    """Find bright mine-like blobs with adjacent dark shadows.

    Background statistics are the median and the MAD-based robust std of
    the whole image, so a small highlight cannot drag its own threshold.
    The shadow requirement scales with the ring size: under a Gaussian
    background a fraction Phi(-k_shadow) of ring pixels is dark by chance,
    so we demand three binomial sigmas more than that, never less than
    min_shadow.  A large shadowless blob therefore cannot sneak through on
    speckle alone.  The reported mask covers the largest qualifying blob
    (all of them under mask_all); the class comes from the largest.
    """
    a = np.asarray(pixels, dtype=np.float64)
    med = float(np.median(a))
    rob = float(1.4826 * np.median(np.abs(a - med)))
    if rob <= 0.0:
        return DetectionResult(accepted=False, details={"reason": "flat image"})
    bright = a >= med + config.k_highlight * rob
    dark = a <= med - config.k_shadow * rob
    p_chance = 0.5 * math.erfc(config.k_shadow / math.sqrt(2.0))
    labels, n_comp = ndimage.label(bright, structure=_CROSS)
    hits = []
    for comp_id in range(1, n_comp + 1):
        comp = labels == comp_id
        area = int(comp.sum())
        if area < config.min_area:
            continue
        ring = ndimage.binary_dilation(comp, structure=_CROSS,
                                       iterations=config.adjacency) & ~comp
        n_ring = int(ring.sum())
        mu = n_ring * p_chance
        need = max(config.min_shadow,
                   int(math.ceil(mu + 3.0 * math.sqrt(mu * (1.0 - p_chance)))))
        shadow_px = int((ring & dark).sum())
        if shadow_px < need:
            continue
        hits.append((comp, area, shadow_px))
    if not hits:
        return DetectionResult(accepted=False, details={"reason": "no blob"})
    hits.sort(key=lambda h: -h[1])
    chosen = hits if config.mask_all else hits[:1]
    shaped = [_shape_mask(a, med, rob, comp, area, config)
              for comp, area, _ in chosen]
    mask = np.zeros_like(bright)
    for s in shaped:
        mask |= s
    primary = shaped[0]
    shadow_px = chosen[0][2]
    ys, xs = np.nonzero(primary)
    coords = np.stack([xs, ys]).astype(np.float64)
    cov = np.cov(coords) if primary.sum() > 1 else np.eye(2)
    evals = np.sort(np.linalg.eigvalsh(np.atleast_2d(cov)))[::-1]
    ratio = math.sqrt(max(evals[0], 1e-12) / max(evals[-1], 1e-12))
    cls = MineClass.CYLINDRICAL if ratio >= config.elongation else MineClass.CONICAL
    return DetectionResult(accepted=True, mask=mask, mine_class=cls,
                           details={"area": int(mask.sum()),
                                    "shadow_px": shadow_px,
                                    "elongation": ratio,
                                    "n_blobs": len(chosen)})


def orr_proxy(images, config=DetectorConfig()):
    """Fraction of images with a detected highlight+shadow pair."""
    if len(images) == 0:
        raise ValueError("empty image list")
    hits = sum(detect_highlight_shadow(im, config).accepted for im in images)
    return hits / len(images)


# ---------------------------------------------------------------------------
# inference time

def time_inference(sample_fn, n_runs=3, images_per_run=1):
    """Median wall-clock seconds per image; one untimed warm-up run."""
    if n_runs < 1 or images_per_run < 1:
        raise ValueError("n_runs and images_per_run must be >= 1")
    sample_fn()
    times = []
    for _ in range(n_runs):
        t0 = time.perf_counter()
        sample_fn()
        times.append((time.perf_counter() - t0) / images_per_run)
    return float(np.median(times))


# ---------------------------------------------------------------------------
# Table I/II-shaped report

@dataclass
class GenEvalRow:
    model: str
    mine_class: str
    fid: float
    kid: float
    avg_noise: float
    avg_snr_db: float
    orr: float
    it_seconds: float


@dataclass
class GenEvalReport:
    rows: list

    CSV_HEADER = "model,class,fid,kid,avg_noise,avg_snr_db,orr,it_seconds"

    def to_csv(self, path):
        lines = [self.CSV_HEADER]
        for r in self.rows:
            lines.append(",".join([r.model, r.mine_class] + [
                repr(v) for v in (r.fid, r.kid, r.avg_noise, r.avg_snr_db,
                                  r.orr, r.it_seconds)]))
        with open(path, "w") as f:
            f.write("\n".join(lines) + "\n")

    def to_json_dict(self):
        return {"rows": [vars(r) for r in self.rows]}


def evaluate_generated(real_images, fake_images, embedder, model_name,
                       mine_class, it_seconds=float("nan"), kid_sigma=None,
                       detector=DetectorConfig()):
    """One Table I/II row for a generated set against its real reference."""
    rs = embed_stats(real_images, embedder)
    fs = embed_stats(fake_images, embedder)
    fid_v = fid(rs, fs)
    kid_v = kid(embedder.embed_many(real_images),
                embedder.embed_many(fake_images), sigma=kid_sigma)
    noises, snrs = [], []
    for im in fake_images:
        try:
            n_v, s_v = snr(im)
        except InfiniteSnrError:
            continue
        noises.append(n_v)
        snrs.append(s_v)
    return GenEvalRow(model=model_name, mine_class=mine_class, fid=fid_v,
                      kid=kid_v,
                      avg_noise=float(np.mean(noises)) if noises else float("nan"),
                      avg_snr_db=float(np.mean(snrs)) if snrs else float("nan"),
                      orr=orr_proxy(fake_images, detector),
                      it_seconds=it_seconds)
