"""Image and dataset persistence.

Images are written twice: an 8-bit binary PGM (P5) for eyeballing, and a
sidecar raw file of 32-bit little-endian floats for lossless round trips.
Masks are PGM with values 0/255. A dataset is a JSON manifest listing
relative paths, labels, provenance and per-image seeds.
"""
import json
import os
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

RAW_SUFFIX = ".f32"


class MineClass(str, Enum):
    CONICAL = "conical"
    CYLINDRICAL = "cylindrical"
    NONE = "none"


class Provenance(str, Enum):
    ORIGINAL = "original"
    DDPM = "ddpm"
    DDIM = "ddim"


@dataclass
class LabeledImage:
    """A grayscale scene in [0, 1] with its ground-truth highlight mask."""
    pixels: np.ndarray          # (H, W) float64 in [0, 1]
    mask: np.ndarray            # (H, W) bool, True on the mine highlight
    mine_class: MineClass
    provenance: Provenance
    seed: int

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.pixels.shape != self.mask.shape:
            raise ValueError("pixels and mask shapes differ")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise ValueError("pixels must lie in [0, 1]")
        has_mask = bool(self.mask.any())
        if has_mask != (self.mine_class != MineClass.NONE):
            raise ValueError("mask must be nonempty exactly when a mine is present")


def save_pgm(path, values):
    """Write a (H, W) array as binary PGM. Floats in [0, 1] are scaled to 0..255."""
    arr = np.asarray(values)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(arr.tobytes())


def load_pgm(path):
    """Read a binary PGM written by save_pgm. Returns a (H, W) uint8 array."""
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM")
    # header: magic, width height, maxval, then raster
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    raster = np.frombuffer(data, dtype=np.uint8, count=h * w, offset=pos)
    return raster.reshape(h, w).copy()


def save_image(path_pgm, pixels):
    """Write PGM plus the lossless float32 sidecar next to it."""
    save_pgm(path_pgm, pixels)
    raw = np.asarray(pixels, dtype="<f4")
    with open(os.fspath(path_pgm) + RAW_SUFFIX, "wb") as f:
        f.write(raw.tobytes())


def load_image(path_pgm):
    """Read pixels in [0, 1]; prefers the float32 sidecar when present."""
    quantized = load_pgm(path_pgm)
    raw_path = os.fspath(path_pgm) + RAW_SUFFIX
    if os.path.exists(raw_path):
        raw = np.fromfile(raw_path, dtype="<f4")
        return raw.reshape(quantized.shape).astype(np.float64)
    return quantized.astype(np.float64) / 255.0


def save_mask(path_pgm, mask):
    save_pgm(path_pgm, np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8))


def load_mask(path_pgm):
    return load_pgm(path_pgm) > 127


@dataclass
class ManifestEntry:
    image: str                  # path relative to the manifest file
    mask: str
    mine_class: MineClass
    provenance: Provenance
    seed: int


@dataclass
class DatasetManifest:
    """An on-disk dataset: entry list plus the seed that generated it."""
    entries: list
    base_seed: int
    root: str = "."             # directory the relative paths resolve against

    def counts(self):
        """Counts per mine class and per provenance; partitions the entries."""
        by_class = {}
        by_prov = {}
        for e in self.entries:
            by_class[e.mine_class.value] = by_class.get(e.mine_class.value, 0) + 1
            by_prov[e.provenance.value] = by_prov.get(e.provenance.value, 0) + 1
        return {"total": len(self.entries), "by_class": by_class, "by_provenance": by_prov}

    def to_json_dict(self):
        return {
            "base_seed": self.base_seed,
            "counts": self.counts(),
            "entries": [
                {
                    "image": e.image,
                    "mask": e.mask,
                    "mine_class": e.mine_class.value,
                    "provenance": e.provenance.value,
                    "seed": e.seed,
                }
                for e in self.entries
            ],
        }

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json_dict(), f, indent=1)
            f.write("\n")

    @staticmethod
    def load(path):
        with open(path) as f:
            d = json.load(f)
        root = os.path.dirname(os.path.abspath(path))
        entries = [
            ManifestEntry(
                image=e["image"],
                mask=e["mask"],
                mine_class=MineClass(e["mine_class"]),
                provenance=Provenance(e["provenance"]),
                seed=int(e["seed"]),
            )
            for e in d["entries"]
        ]
        manifest = DatasetManifest(entries=entries, base_seed=int(d["base_seed"]), root=root)
        counts = manifest.counts()
        if counts != d.get("counts", counts):
            raise ValueError(f"{path}: stored counts disagree with entry list")
        missing = [p for e in entries for p in (e.image, e.mask)
                   if not os.path.exists(os.path.join(root, p))]
        if missing:
            raise FileNotFoundError(f"{path}: missing dataset files: {missing[:5]}")
        return manifest

    def load_images(self):
        """Materialize every entry as a LabeledImage."""
        out = []
        for e in self.entries:
            pixels = load_image(os.path.join(self.root, e.image))
            mask = load_mask(os.path.join(self.root, e.mask))
            out.append(LabeledImage(pixels=pixels, mask=mask, mine_class=e.mine_class,
                                    provenance=e.provenance, seed=e.seed))
        return out


def write_dataset(images, out_dir, base_seed, prefix="img"):
    """Persist LabeledImages under out_dir and return the saved manifest."""
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for i, img in enumerate(images):
        name = f"{prefix}_{i:05d}"
        image_rel = name + ".pgm"
        mask_rel = name + "_mask.pgm"
        save_image(os.path.join(out_dir, image_rel), img.pixels)
        save_mask(os.path.join(out_dir, mask_rel), img.mask)
        entries.append(ManifestEntry(image=image_rel, mask=mask_rel,
                                     mine_class=img.mine_class,
                                     provenance=img.provenance, seed=img.seed))
    manifest = DatasetManifest(entries=entries, base_seed=base_seed, root=out_dir)
    manifest.save(os.path.join(out_dir, "manifest.json"))
    return manifest


def concat_manifests(parts, root=None):
    """Concatenate manifests without deduplication; provenance is preserved.

    Entries keep their original files; relative paths are rewritten against
    the given root (default: root of the first part).
    """
    parts = list(parts)
    if not parts or any(not p.entries for p in parts):
        raise ValueError("cannot combine empty manifests")
    root = os.path.abspath(root if root is not None else parts[0].root)
    entries = []
    for p in parts:
        for e in p.entries:
            abs_img = os.path.join(os.path.abspath(p.root), e.image)
            abs_msk = os.path.join(os.path.abspath(p.root), e.mask)
            entries.append(ManifestEntry(
                image=os.path.relpath(abs_img, root),
                mask=os.path.relpath(abs_msk, root),
                mine_class=e.mine_class, provenance=e.provenance, seed=e.seed))
    return DatasetManifest(entries=entries, base_seed=parts[0].base_seed, root=root)
