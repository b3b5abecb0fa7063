"""Image/mask persistence and dataset manifests."""
import numpy as np
import pytest

from sonarsynth.storage import (
    DatasetManifest, LabeledImage, MineClass, Provenance,
    concat_manifests, load_image, load_mask, load_pgm, save_image, save_mask,
    save_pgm, write_dataset,
)


def _img(seed=0, cls=MineClass.CONICAL):
    rng = np.random.default_rng(seed)
    px = rng.uniform(0.0, 1.0, (32, 32))
    mask = np.zeros((32, 32), dtype=bool)
    if cls != MineClass.NONE:
        mask[10:14, 12:17] = True
    return LabeledImage(pixels=px, mask=mask, mine_class=cls,
                        provenance=Provenance.ORIGINAL, seed=seed)


def test_labeled_image_invariants():
    with pytest.raises(ValueError):
        LabeledImage(pixels=np.full((8, 8), 1.5), mask=np.zeros((8, 8), bool),
                     mine_class=MineClass.NONE, provenance=Provenance.ORIGINAL, seed=0)
    with pytest.raises(ValueError):
        # class set but empty mask
        LabeledImage(pixels=np.zeros((8, 8)), mask=np.zeros((8, 8), bool),
                     mine_class=MineClass.CONICAL, provenance=Provenance.ORIGINAL, seed=0)
    with pytest.raises(ValueError):
        # mask set but class None
        m = np.zeros((8, 8), bool)
        m[0, 0] = True
        LabeledImage(pixels=np.zeros((8, 8)), mask=m,
                     mine_class=MineClass.NONE, provenance=Provenance.ORIGINAL, seed=0)


def test_pgm_roundtrip_quantized(tmp_path):
    px = np.linspace(0.0, 1.0, 64).reshape(8, 8)
    path = tmp_path / "a.pgm"
    save_pgm(path, px)
    back = load_pgm(path)
    assert back.dtype == np.uint8
    # 8-bit storage: error bounded by half a quantization step
    assert np.max(np.abs(back / 255.0 - px)) <= 0.5 / 255 + 1e-12
    raw = path.read_bytes()
    assert raw.startswith(b"P5")


def test_float_sidecar_is_lossless_at_f32(tmp_path):
    img = _img(3)
    save_image(tmp_path / "b.pgm", img.pixels)
    back = load_image(tmp_path / "b.pgm")
    assert np.array_equal(back, img.pixels.astype(np.float32).astype(np.float64))
    assert (tmp_path / "b.pgm.f32").exists()


def test_mask_roundtrip_exact(tmp_path):
    img = _img(4)
    save_mask(tmp_path / "m.pgm", img.mask)
    back = load_mask(tmp_path / "m.pgm")
    assert np.array_equal(back, img.mask)


def test_write_dataset_and_reload(tmp_path):
    imgs = [_img(i) for i in range(5)] + [_img(9, cls=MineClass.NONE)]
    man = write_dataset(imgs, tmp_path / "ds", base_seed=11)
    assert len(man.entries) == 6
    counts = man.counts()
    assert counts["total"] == 6
    assert counts["by_class"][MineClass.CONICAL.value] == 5
    assert counts["by_class"][MineClass.NONE.value] == 1
    assert counts["by_provenance"][Provenance.ORIGINAL.value] == 6

    man2 = DatasetManifest.load(tmp_path / "ds" / "manifest.json")
    assert man2.base_seed == 11
    loaded = man2.load_images()
    assert len(loaded) == 6
    for a, b in zip(imgs, loaded):
        assert np.array_equal(b.pixels, a.pixels.astype(np.float32).astype(np.float64))
        assert np.array_equal(b.mask, a.mask)
        assert b.mine_class == a.mine_class
        assert b.seed == a.seed


def test_manifest_load_rejects_missing_file(tmp_path):
    imgs = [_img(i) for i in range(2)]
    write_dataset(imgs, tmp_path / "ds", base_seed=1)
    (tmp_path / "ds" / "img_00001.pgm").unlink()
    with pytest.raises(FileNotFoundError):
        DatasetManifest.load(tmp_path / "ds" / "manifest.json")


def test_concat_manifests(tmp_path):
    a = write_dataset([_img(i) for i in range(3)], tmp_path / "a", base_seed=1)
    b = write_dataset([_img(10 + i, cls=MineClass.NONE) for i in range(2)],
                      tmp_path / "b", base_seed=2)
    merged = concat_manifests([a, b], root=tmp_path)
    assert len(merged.entries) == 5
    imgs = merged.load_images()
    assert sum(1 for im in imgs if im.mine_class == MineClass.NONE) == 2
    with pytest.raises(ValueError):
        concat_manifests([], root=tmp_path)
