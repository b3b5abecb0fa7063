"""Scene synthesis: determinism, intensity margins, geometry, augmentation."""
import numpy as np
import pytest

from sonarsynth.scenes import (
    CropResize, HFlip, IntensityJitter, SceneError, SceneSpec, VFlip,
    augment, random_scene_spec, synth_dataset, synth_scene,
)
from sonarsynth.storage import MineClass, Provenance


def test_no_mine_gives_pure_speckle_empty_mask():
    img = synth_scene(SceneSpec(mine_class=MineClass.NONE, seed=5))
    assert not img.mask.any()
    assert img.mine_class == MineClass.NONE
    assert 0.0 <= img.pixels.min() and img.pixels.max() <= 1.0


def test_determinism_bit_identical():
    spec = SceneSpec(mine_class=MineClass.CYLINDRICAL, mine_center=(14.0, 18.0),
                     mine_extent=(7.0, 3.0), insonify_dir=(0.6, -0.8), seed=123)
    a, b = synth_scene(spec), synth_scene(spec)
    assert np.array_equal(a.pixels, b.pixels)
    assert np.array_equal(a.mask, b.mask)


def test_conical_margin_over_background():
    # Calibrated contract: with std=0.05 and gain=0.6 the mask-mean exceeds
    # the background mean by more than 0.2, for any seed.
    for seed in range(25):
        spec = SceneSpec(mine_class=MineClass.CONICAL, mine_extent=(4.0, 3.5),
                         highlight_gain=0.6, speckle_std=0.05, seed=seed)
        img = synth_scene(spec)
        margin = img.pixels[img.mask].mean() - img.pixels[~img.mask].mean()
        assert margin > 0.2


def test_highlight_and_shadow_intensity_margins():
    rng = np.random.default_rng(7)
    for i in range(40):
        cls = MineClass.CONICAL if i % 2 else MineClass.CYLINDRICAL
        spec = random_scene_spec(rng, cls)
        img = synth_scene(spec)
        px, mask = img.pixels, img.mask
        bg = px[~mask].mean()
        assert px[mask].mean() >= bg + 2 * spec.speckle_std
        # sample the cast-shadow zone directly behind the mine
        ux, uy = spec._unit_dir()
        cx, cy = spec.mine_center
        yy, xx = np.mgrid[0:spec.height, 0:spec.width]
        s = (xx - cx) * ux + (yy - cy) * uy
        r = (xx - cx) * (-uy) + (yy - cy) * ux
        zone = (~mask & (s <= -0.6 * spec.mine_extent[1])
                & (s >= -(spec.mine_extent[1] + spec.shadow_len))
                & (np.abs(r) <= spec.mine_extent[0]))
        if zone.sum() >= 8:
            assert px[zone].mean() <= bg - spec.speckle_std


def test_shadow_side_property():
    # Centroid of darkest decile near the mine lies behind it (along -dir).
    rng = np.random.default_rng(21)
    for i in range(50):
        cls = MineClass.CONICAL if i % 2 else MineClass.CYLINDRICAL
        spec = random_scene_spec(rng, cls)
        img = synth_scene(spec)
        ux, uy = spec._unit_dir()
        cx, cy = spec.mine_center
        yy, xx = np.mgrid[0:spec.height, 0:spec.width]
        near = (np.hypot(xx - cx, yy - cy) <= spec.mine_extent[1] + spec.shadow_len) & ~img.mask
        vals = img.pixels[near]
        k = max(1, int(round(0.10 * vals.size)))
        thresh = np.partition(vals, k - 1)[k - 1]
        dark = near & (img.pixels <= thresh)
        proj = ((xx[dark].mean() - cx) * ux + (yy[dark].mean() - cy) * uy)
        assert proj < 0


def test_out_of_bounds_footprint_rejected():
    spec = SceneSpec(mine_class=MineClass.CONICAL, mine_center=(2.0, 16.0),
                     mine_extent=(5.0, 4.0))
    with pytest.raises(SceneError):
        synth_scene(spec)


def test_mask_marks_exact_ellipse_footprint():
    spec = SceneSpec(mine_class=MineClass.CONICAL, mine_center=(16.0, 16.0),
                     mine_extent=(5.0, 4.0), insonify_dir=(0.0, 1.0), seed=2)
    img = synth_scene(spec)
    yy, xx = np.mgrid[0:32, 0:32]
    # dir=(0,1): along = y, across = -x ... footprint is axis-aligned here
    rho = ((xx - 16.0) / 5.0) ** 2 + ((yy - 16.0) / 4.0) ** 2
    assert np.array_equal(img.mask, rho <= 1.0)


def test_synth_dataset_counts_and_determinism(tmp_path):
    man = synth_dataset(4, [MineClass.CONICAL, MineClass.CYLINDRICAL], 7,
                        tmp_path / "d1")
    counts = man.counts()["by_class"]
    assert counts[MineClass.CONICAL.value] == 4
    assert counts[MineClass.CYLINDRICAL.value] == 4
    assert all(e.provenance == Provenance.ORIGINAL for e in man.entries)

    man2 = synth_dataset(4, [MineClass.CONICAL, MineClass.CYLINDRICAL], 7,
                         tmp_path / "d2")
    for a, b in zip(man.load_images(), man2.load_images()):
        assert np.array_equal(a.pixels, b.pixels)
        assert np.array_equal(a.mask, b.mask)
        assert a.seed == b.seed


def test_synth_dataset_single_each(tmp_path):
    man = synth_dataset(1, [MineClass.CONICAL, MineClass.CYLINDRICAL], 0,
                        tmp_path / "d")
    assert len(man.entries) == 2
    classes = {e.mine_class for e in man.entries}
    assert classes == {MineClass.CONICAL, MineClass.CYLINDRICAL}


def test_hflip_is_involution_and_moves_centroid():
    rng = np.random.default_rng(3)
    spec = random_scene_spec(rng, MineClass.CYLINDRICAL)
    img = synth_scene(spec)
    once = augment(img, [HFlip()])
    twice = augment(once, [HFlip()])
    assert np.array_equal(twice.pixels, img.pixels)
    assert np.array_equal(twice.mask, img.mask)

    w = img.pixels.shape[1]
    c_before = np.where(img.mask)[1].mean()
    c_after = np.where(once.mask)[1].mean()
    assert c_after == pytest.approx((w - 1) - c_before, abs=1e-9)


def test_vflip_geometric_consistency():
    rng = np.random.default_rng(4)
    img = synth_scene(random_scene_spec(rng, MineClass.CONICAL))
    out = augment(img, [VFlip()])
    assert np.array_equal(out.mask, img.mask[::-1, :])
    assert np.array_equal(out.pixels, img.pixels[::-1, :])


def test_intensity_jitter_identity_and_mask_untouched():
    rng = np.random.default_rng(5)
    img = synth_scene(random_scene_spec(rng, MineClass.CONICAL))
    same = augment(img, [IntensityJitter(0.0)])
    assert np.array_equal(same.pixels, img.pixels)
    shifted = augment(img, [IntensityJitter(0.1)])
    assert np.array_equal(shifted.mask, img.mask)
    assert shifted.pixels.max() <= 1.0


def test_empty_op_list_is_identity():
    img = synth_scene(SceneSpec(mine_class=MineClass.NONE, seed=1))
    out = augment(img, [])
    assert np.array_equal(out.pixels, img.pixels)
    assert np.array_equal(out.mask, img.mask)


def test_crop_resize_keeps_mask_consistent():
    spec = SceneSpec(mine_class=MineClass.CONICAL, mine_center=(16.0, 16.0),
                     mine_extent=(4.0, 3.5), seed=6)
    img = synth_scene(spec)
    out = augment(img, [CropResize(top=4, left=4, height=24, width=24)])
    assert out.pixels.shape == img.pixels.shape
    assert out.mask.any()
    # mine grows under upscale of a centered crop
    assert out.mask.sum() > img.mask.sum()
    with pytest.raises(SceneError):
        augment(img, [CropResize(top=0, left=0, height=40, width=40)])
    with pytest.raises(SceneError):
        # crop that excises the mine entirely
        augment(img, [CropResize(top=0, left=0, height=6, width=6)])
