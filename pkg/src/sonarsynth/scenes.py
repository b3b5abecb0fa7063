"""Procedural side-scan-sonar-like scenes.

A scene is a smooth low-frequency seabed field plus per-pixel Gaussian
speckle. A mine, when present, contributes a bright elliptical highlight
(near-circular and center-tapered for conical mines, elongated and flat for
cylindrical ones) and a darkened trapezoidal acoustic shadow cast opposite
the insonification direction. Everything is a pure function of the spec,
including its seed.

Coordinates are (x, y) = (column, row); direction vectors use the same axes.
"""
import math
from dataclasses import dataclass, replace

import numpy as np

from .storage import LabeledImage, MineClass, Provenance

# Calibration constants (the acceptance margins below are asserted by tests):
# shadow attenuation leaves shadows well under background - 1 sigma, and the
# background field stays small against the speckle std.
SHADOW_ATTENUATION = 0.35
FIELD_COMPONENTS = 3
FIELD_AMPLITUDE = (0.010, 0.035)


class SceneError(ValueError):
    """Raised when a scene spec cannot be rendered (e.g. mine out of bounds)."""


@dataclass(frozen=True)
class SceneSpec:
    """Full description of one synthetic scene. Rendering is deterministic.

    clutter holds (x, y, radius, gain) tuples: small bright bumps (rocks,
    debris) that cast no shadow and are never part of the mask. Telling
    them apart from mine highlights requires the highlight+shadow pairing.
    """
    width: int = 32
    height: int = 32
    mine_class: MineClass = MineClass.NONE
    mine_center: tuple = (16.0, 16.0)        # (x, y) pixels
    mine_extent: tuple = (4.0, 3.0)          # (major, minor) semi-axes, pixels
    insonify_dir: tuple = (1.0, 0.0)         # unit vector, direction of illumination
    highlight_gain: float = 0.5
    shadow_len: float = 8.0
    speckle_mean: float = 0.35
    speckle_std: float = 0.06
    clutter: tuple = ()
    seed: int = 0

    def validate(self):
        if self.width < 4 or self.height < 4:
            raise SceneError("image too small")
        if not 0.0 < self.highlight_gain <= 1.0:
            raise SceneError("highlight_gain must be in (0, 1]")
        if self.shadow_len < 0.0:
            raise SceneError("shadow_len must be >= 0")
        if self.speckle_std <= 0.0 or not 0.0 <= self.speckle_mean <= 1.0:
            raise SceneError("speckle parameters out of range")
        for c in self.clutter:
            x, y, radius, gain = c
            if not (0 <= x <= self.width - 1 and 0 <= y <= self.height - 1):
                raise SceneError(f"clutter center out of bounds: {c}")
            if radius <= 0 or not 0.0 < gain <= 1.0:
                raise SceneError(f"clutter radius/gain out of range: {c}")
        nx, ny = self.insonify_dir
        if math.hypot(nx, ny) < 1e-9:
            raise SceneError("insonify_dir must be a nonzero vector")
        if self.mine_class != MineClass.NONE:
            major, minor = self.mine_extent
            if major <= 0 or minor <= 0:
                raise SceneError("mine_extent axes must be positive")
            ex, ey = self._footprint_half_extents()
            cx, cy = self.mine_center
            if (cx - ex < 0 or cx + ex > self.width - 1
                    or cy - ey < 0 or cy + ey > self.height - 1):
                raise SceneError(
                    f"mine footprint out of bounds: center={self.mine_center}, "
                    f"half-extents=({ex:.2f}, {ey:.2f}), image={self.width}x{self.height}")

    def _unit_dir(self):
        nx, ny = self.insonify_dir
        n = math.hypot(nx, ny)
        return nx / n, ny / n

    def _footprint_half_extents(self):
        # Tight bounding box of the rotated ellipse (major axis across-track).
        ux, uy = self._unit_dir()
        vx, vy = -uy, ux
        major, minor = self.mine_extent
        ex = math.sqrt((major * vx) ** 2 + (minor * ux) ** 2)
        ey = math.sqrt((major * vy) ** 2 + (minor * uy) ** 2)
        return ex, ey


def synth_scene(spec):
    """Render a SceneSpec into a LabeledImage. Bit-deterministic per spec."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    h, w = spec.height, spec.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    # Smooth seabed field around speckle_mean: a few low-frequency cosines.
    field = np.full((h, w), spec.speckle_mean)
    for _ in range(FIELD_COMPONENTS):
        amp = rng.uniform(*FIELD_AMPLITUDE)
        fx = rng.uniform(-2.0, 2.0)
        fy = rng.uniform(-2.0, 2.0)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        field += amp * np.cos(2.0 * math.pi * (fx * xx / w + fy * yy / h) + phase)

    mask = np.zeros((h, w), dtype=bool)
    clean = field
    if spec.mine_class != MineClass.NONE:
        ux, uy = spec._unit_dir()
        vx, vy = -uy, ux
        cx, cy = spec.mine_center
        major, minor = spec.mine_extent
        dx, dy = xx - cx, yy - cy
        s = dx * ux + dy * uy          # along illumination
        r = dx * vx + dy * vy          # across-track
        rho = np.sqrt((r / major) ** 2 + (s / minor) ** 2)
        mask = rho <= 1.0

        if spec.mine_class == MineClass.CONICAL:
            taper = 1.0 - 0.5 * np.minimum(rho, 1.0)
        else:
            taper = np.ones_like(rho)

        # Shadow: trapezoid cast along -insonify_dir, slightly widening.
        back = -s
        span = max(spec.shadow_len, 1e-9)
        widen = 1.0 + 0.2 * np.clip((back - minor) / span, 0.0, 1.0)
        shadow = ((back >= 0.6 * minor)
                  & (back <= minor + spec.shadow_len)
                  & (np.abs(r) <= major * widen)
                  & ~mask)

        clean = field.copy()
        clean[shadow] *= SHADOW_ATTENUATION
        clean[mask] += spec.highlight_gain * taper[mask]

    if spec.clutter:
        clean = clean if clean is not field else field.copy()
        for ccx, ccy, radius, gain in spec.clutter:
            rho_c = np.hypot(xx - ccx, yy - ccy) / radius
            clean += gain * np.clip(1.0 - rho_c, 0.0, 1.0)

    pixels = clean + rng.normal(0.0, spec.speckle_std, size=(h, w))
    np.clip(pixels, 0.0, 1.0, out=pixels)
    return LabeledImage(pixels=pixels, mask=mask, mine_class=spec.mine_class,
                        provenance=Provenance.ORIGINAL, seed=spec.seed)


def random_scene_spec(rng, mine_class, width=32, height=32, seed=None,
                      speckle_mean=0.35, speckle_std=0.06):
    """Draw a plausible SceneSpec from the given generator.

    speckle_mean and speckle_std are centers: every scene gets its own
    seafloor brightness and noise level around them, and mines vary in
    size, contrast and shadow length, so a small dataset cannot cover the
    distribution. Placement retries until the mine footprint and at least
    half of the shadow run stay inside the image, so the shadow is always
    observable.
    """
    if seed is None:
        seed = int(rng.integers(0, 2 ** 63 - 1))
    jittered_mean = speckle_mean + rng.uniform(-0.10, 0.10)
    jittered_std = speckle_std * rng.uniform(0.75, 1.40)
    n_clutter = int(rng.integers(0, 4))
    if mine_class == MineClass.NONE:
        clutter = _place_clutter(rng, n_clutter, width, height)
        return SceneSpec(width=width, height=height, mine_class=mine_class,
                         speckle_mean=jittered_mean, speckle_std=jittered_std,
                         clutter=clutter, seed=seed)

    if mine_class == MineClass.CONICAL:
        major = rng.uniform(2.2, 4.5)
        minor = major * rng.uniform(0.80, 1.0)
    else:
        # the axis ratio stays >= 2.2 so the two classes remain separable
        major = rng.uniform(5.0, 9.0)
        minor = major * rng.uniform(0.30, 0.45)
    gain = rng.uniform(0.32, 0.68)
    shadow_len = rng.uniform(4.0, 12.0)

    for _ in range(64):
        theta = rng.uniform(0.0, 2.0 * math.pi)
        ux, uy = math.cos(theta), math.sin(theta)
        margin = max(major, minor) + 1.0
        cx = rng.uniform(margin, width - 1 - margin)
        cy = rng.uniform(margin, height - 1 - margin)
        # keep at least half the shadow run in frame
        bx = cx - ux * (minor + 0.5 * shadow_len)
        by = cy - uy * (minor + 0.5 * shadow_len)
        if 0.0 <= bx <= width - 1 and 0.0 <= by <= height - 1:
            clutter = _place_clutter(rng, n_clutter, width, height,
                                     keep_out=((cx, cy), (ux, uy),
                                               (major, minor), shadow_len))
            spec = SceneSpec(width=width, height=height, mine_class=mine_class,
                             mine_center=(cx, cy), mine_extent=(major, minor),
                             insonify_dir=(ux, uy), highlight_gain=gain,
                             shadow_len=shadow_len, speckle_mean=jittered_mean,
                             speckle_std=jittered_std, clutter=clutter, seed=seed)
            try:
                spec.validate()
            except SceneError:
                continue
            return spec
    raise SceneError("could not place mine with visible shadow after 64 tries")


def _place_clutter(rng, n, width, height, keep_out=None):
    """Up to n clutter bumps, kept clear of the mine body and its shadow."""
    placed = []
    for _ in range(n):
        radius = rng.uniform(1.0, 1.8)
        gain = rng.uniform(0.25, 0.60)
        for _try in range(40):
            x = rng.uniform(2.0, width - 3.0)
            y = rng.uniform(2.0, height - 3.0)
            if keep_out is not None:
                (cx, cy), (ux, uy), (major, minor), shadow_len = keep_out
                dx, dy = x - cx, y - cy
                s = dx * ux + dy * uy
                r = dx * (-uy) + dy * ux
                inside_mine = (r / (major + radius + 1.0)) ** 2 + \
                    (s / (minor + radius + 1.0)) ** 2 <= 1.0
                in_shadow = (-(minor + shadow_len + radius + 1.0) <= s <= 0.0
                             and abs(r) <= 1.2 * major + radius + 1.0)
                if inside_mine or in_shadow:
                    continue
            if any((x - px) ** 2 + (y - py) ** 2 < (radius + pr + 1.0) ** 2
                   for px, py, pr, _ in placed):
                continue
            placed.append((x, y, radius, gain))
            break
    return tuple(placed)


def synth_dataset(n_per_class, classes, base_seed, out_dir, width=32, height=32,
                  speckle_mean=0.35, speckle_std=0.06, prefix="img"):
    """Generate n_per_class scenes for each class and persist them.

    Per-image seeds are spawned from base_seed, so the same call always
    produces the same manifest and the same image bytes.
    """
    from .storage import write_dataset

    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    classes = [MineClass(c) for c in classes]
    children = np.random.SeedSequence(base_seed).spawn(n_per_class * len(classes))
    images = []
    i = 0
    for cls in classes:
        for _ in range(n_per_class):
            rng = np.random.default_rng(children[i])
            i += 1
            spec = random_scene_spec(rng, cls, width=width, height=height,
                                     speckle_mean=speckle_mean, speckle_std=speckle_std)
            images.append(synth_scene(spec))
    return write_dataset(images, out_dir, base_seed, prefix=prefix)


# ---------------------------------------------------------------------------
# Augmentations. Each op is a small frozen dataclass; geometric ops transform
# pixels and mask identically, intensity ops leave the mask alone.

@dataclass(frozen=True)
class HFlip:
    pass


@dataclass(frozen=True)
class VFlip:
    pass


@dataclass(frozen=True)
class IntensityJitter:
    delta: float = 0.0


@dataclass(frozen=True)
class CropResize:
    """Crop the given box (pixel units) and resize back to the full frame."""
    top: int
    left: int
    height: int
    width: int


def _resize_bilinear(img, out_h, out_w):
    in_h, in_w = img.shape
    y = (np.arange(out_h) + 0.5) * in_h / out_h - 0.5
    x = (np.arange(out_w) + 0.5) * in_w / out_w - 0.5
    y0 = np.floor(y).astype(int)
    x0 = np.floor(x).astype(int)
    wy = (y - y0)[:, None]
    wx = (x - x0)[None, :]
    y0c = np.clip(y0, 0, in_h - 1)
    y1c = np.clip(y0 + 1, 0, in_h - 1)
    x0c = np.clip(x0, 0, in_w - 1)
    x1c = np.clip(x0 + 1, 0, in_w - 1)
    i00 = img[np.ix_(y0c, x0c)]
    i01 = img[np.ix_(y0c, x1c)]
    i10 = img[np.ix_(y1c, x0c)]
    i11 = img[np.ix_(y1c, x1c)]
    top = (1.0 - wx) * i00 + wx * i01
    bot = (1.0 - wx) * i10 + wx * i11
    return (1.0 - wy) * top + wy * bot


def _resize_nearest(mask, out_h, out_w):
    in_h, in_w = mask.shape
    y = np.clip(np.rint((np.arange(out_h) + 0.5) * in_h / out_h - 0.5), 0, in_h - 1).astype(int)
    x = np.clip(np.rint((np.arange(out_w) + 0.5) * in_w / out_w - 0.5), 0, in_w - 1).astype(int)
    return mask[np.ix_(y, x)]


def augment(img, ops):
    """Apply augmentation ops in order; an empty list is the identity.

    Raises SceneError if a crop removes the whole mine from a labeled image.
    """
    pixels = img.pixels.copy()
    mask = img.mask.copy()
    h, w = pixels.shape
    for op in ops:
        if isinstance(op, HFlip):
            pixels = pixels[:, ::-1]
            mask = mask[:, ::-1]
        elif isinstance(op, VFlip):
            pixels = pixels[::-1, :]
            mask = mask[::-1, :]
        elif isinstance(op, IntensityJitter):
            pixels = np.clip(pixels + op.delta, 0.0, 1.0)
        elif isinstance(op, CropResize):
            if (op.top < 0 or op.left < 0 or op.height < 1 or op.width < 1
                    or op.top + op.height > h or op.left + op.width > w):
                raise SceneError(f"crop box {op} outside {w}x{h} image")
            sub_p = pixels[op.top:op.top + op.height, op.left:op.left + op.width]
            sub_m = mask[op.top:op.top + op.height, op.left:op.left + op.width]
            pixels = np.clip(_resize_bilinear(sub_p, h, w), 0.0, 1.0)
            mask = _resize_nearest(sub_m, h, w)
        else:
            raise TypeError(f"unknown augmentation op: {op!r}")
    if img.mine_class != MineClass.NONE and not mask.any():
        raise SceneError("augmentation removed the mine from a labeled image")
    return LabeledImage(pixels=np.ascontiguousarray(pixels),
                        mask=np.ascontiguousarray(mask),
                        mine_class=img.mine_class, provenance=img.provenance,
                        seed=img.seed)


def random_augment_ops(rng, max_jitter=0.08):
    """A seeded, mild augmentation recipe: flips plus intensity jitter."""
    ops = []
    if rng.random() < 0.5:
        ops.append(HFlip())
    if rng.random() < 0.5:
        ops.append(VFlip())
    ops.append(IntensityJitter(delta=float(rng.uniform(-max_jitter, max_jitter))))
    return ops
