import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.ndimage import map_coordinates

from recoverflow.datasynth import (
    AugmentPolicy,
    Motion,
    SceneRecipe,
    augment,
    generate,
    recipe_by_name,
    stage_recipes,
)


def warp_error(sample) -> float:
    """Mean |frame2(x + flow) - frame1(x)| over non-occluded pixels (bilinear sampling)."""
    f1, f2 = sample.frame1.data, sample.frame2.data
    h, w = f1.shape[1:]
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    tx, ty = xs + sample.gt_flow.uv[0], ys + sample.gt_flow.uv[1]
    keep = ~sample.occlusion & (tx >= 0) & (tx <= w - 1) & (ty >= 0) & (ty <= h - 1)
    warped = np.stack([map_coordinates(f2[c], [ty, tx], order=1, mode="nearest") for c in range(3)])
    return float(np.abs(warped - f1)[:, keep].mean())


def test_static_recipe_has_zero_flow_and_no_occlusion():
    r = SceneRecipe("static", (32, 48), n_layers=3, motion_model="per-layer-deforming", max_displacement=0.0)
    for i in range(3):
        s = generate(r, i)
        assert np.count_nonzero(s.gt_flow.uv) == 0
        assert not s.occlusion.any()


def test_pure_translation_is_constant_on_rigid_pixels():
    r = SceneRecipe("t", (32, 48), n_layers=2, max_displacement=5.0, max_rotation_deg=0.0, max_scale_change=0.0)
    s = generate(r, 3)
    uv = s.gt_flow.uv[:, s.rigid]
    assert s.rigid.all()
    assert np.allclose(uv, uv[:, :1], atol=1e-5)
    assert np.abs(uv[:, 0]).max() > 0


def test_generate_is_deterministic():
    r = stage_recipes()[2]
    a, b = generate(r, 5), generate(r, 5)
    assert np.array_equal(a.frame1.data, b.frame1.data)
    assert np.array_equal(a.frame2.data, b.frame2.data)
    assert np.array_equal(a.gt_flow.uv, b.gt_flow.uv)
    assert np.array_equal(a.occlusion, b.occlusion)
    assert np.array_equal(a.rigid, b.rigid)


def test_masks_have_frame_resolution():
    s = generate(stage_recipes()[3], 0)
    assert s.occlusion.shape == s.rigid.shape == s.frame1.shape == s.gt_flow.shape


@pytest.mark.parametrize("stage", range(4))
def test_brightness_constancy_on_heldout_probe(stage):
    r = stage_recipes()[stage].heldout()
    errs = [warp_error(generate(r, i)) for i in range(12)]
    assert np.mean(errs) < 0.02


def test_stage_recipes_ladder():
    recipes = stage_recipes()
    assert len(recipes) == 4
    assert recipes[0].motion_model == "global-rigid"
    assert recipes[1].motion_model == "per-layer-affine" and not recipes[1].occlusion_allowed
    assert recipes[2].motion_model == "per-layer-deforming" and recipes[2].occlusion_allowed
    assert recipes[2].texture_spectrum == "fine"
    assert recipes[3].max_displacement >= 48 and recipes[3].components


def test_mean_displacement_strictly_increases():
    means = []
    for r in stage_recipes():
        means.append(np.mean([generate(r, i).gt_flow.magnitude().mean() for i in range(100)]))
    assert all(a < b for a, b in zip(means, means[1:])), means


def test_stage4_magnitude_coverage():
    r = stage_recipes()[3]
    mags = np.concatenate([generate(r, i).gt_flow.magnitude().ravel() for i in range(500)])
    for lo, hi in ((0, 10), (10, 40), (40, np.inf)):
        assert np.mean((mags >= lo) & (mags < hi)) >= 0.05


def test_no_occlusion_recipe_layers_never_hidden():
    # layers may cover background, but no layer is ever hidden by another one
    r = stage_recipes()[1]
    for i in range(10):
        s = generate(r, i)
        h, w = s.frame1.shape
        ys, xs = np.mgrid[0:h, 0:w]
        tx, ty = xs + s.gt_flow.uv[0], ys + s.gt_flow.uv[1]
        inside = (tx >= 0) & (tx <= w - 1) & (ty >= 0) & (ty <= h - 1)
        assert not (s.occlusion & inside & ~s.rigid).any()


def test_occluded_pixels_are_covered_or_out_of_frame():
    # re-render frame 2 at the forward-warped location: an occluded pixel's colour
    # generally disagrees with frame 1, while out-of-frame targets are flagged too
    r = stage_recipes()[2]
    s = generate(r, 1)
    h, w = s.frame1.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    tx, ty = xs + s.gt_flow.uv[0], ys + s.gt_flow.uv[1]
    out = (tx < 0) | (tx > w - 1) | (ty < 0) | (ty > h - 1)
    assert not (out & ~s.occlusion).any()
    inside_occ = s.occlusion & ~out
    if inside_occ.any():
        warped = np.stack([map_coordinates(s.frame2.data[c], [ty, tx], order=1) for c in range(3)])
        err = np.abs(warped - s.frame1.data).mean(axis=0)
        assert err[inside_occ].mean() > 5 * err[~s.occlusion].mean()


def test_motion_inverse_round_trip():
    # steepest warp the generator draws: wavelength 24 px, Lipschitz 0.25
    wavelength = 24.0
    k = np.array([[np.cos(0.4), np.sin(0.4)], [np.cos(2.0), np.sin(2.0)]]) / wavelength
    amp = 0.25 * wavelength / (2 * np.pi)
    m = Motion(np.array([10.0, 8.0]), np.array([[1.02, 0.01], [-0.02, 0.99]]), np.array([1.5, -2.0]),
               amp=(amp, amp), wavevec=k, phase=(0.3, 1.1))
    x, y = np.meshgrid(np.arange(20.0), np.arange(16.0))
    xp, yp = m.forward(x, y)
    xb, yb = m.inverse(xp, yp)
    assert np.abs(xb - x).max() < 1e-5 and np.abs(yb - y).max() < 1e-5


def test_augment_none_is_identity():
    s = generate(stage_recipes()[1], 2)
    a = augment(s, AugmentPolicy.none(), 9)
    assert np.array_equal(a.frame1.data, s.frame1.data)
    assert np.array_equal(a.gt_flow.uv, s.gt_flow.uv)


def test_double_horizontal_flip_is_identity():
    s = generate(stage_recipes()[2], 2)
    p = AugmentPolicy.flip()
    twice = augment(augment(s, p, 1), p, 2)
    assert np.array_equal(twice.frame1.data, s.frame1.data)
    assert np.array_equal(twice.frame2.data, s.frame2.data)
    assert np.array_equal(twice.gt_flow.uv, s.gt_flow.uv)
    assert np.array_equal(twice.occlusion, s.occlusion)


@pytest.mark.parametrize("policy", [AugmentPolicy.flip(True, False), AugmentPolicy.flip(False, True)])
def test_flipped_sample_passes_warp_check(policy):
    s = generate(stage_recipes()[2].heldout(), 4)
    f = augment(s, policy, 0)
    assert not np.array_equal(f.frame1.data, s.frame1.data)
    assert warp_error(f) < 0.02


def test_photometric_touches_frames_only_and_is_seeded():
    s = generate(stage_recipes()[1], 0)
    p = AugmentPolicy(photometric=True)
    a, b, c = augment(s, p, 4), augment(s, p, 4), augment(s, p, 5)
    assert np.array_equal(a.gt_flow.uv, s.gt_flow.uv)
    assert np.array_equal(a.occlusion, s.occlusion)
    assert not np.array_equal(a.frame1.data, s.frame1.data)
    assert np.array_equal(a.frame1.data, b.frame1.data)
    assert not np.array_equal(a.frame1.data, c.frame1.data)


@settings(max_examples=10)
@given(st.integers(0, 10**6))
def test_training_augmentation_keeps_frames_in_range(seed):
    s = generate(stage_recipes()[0], seed % 50)
    a = augment(s, AugmentPolicy.training(), seed)
    assert 0.0 <= a.frame1.data.min() and a.frame1.data.max() <= 1.0


def test_recipe_validation():
    with pytest.raises(ValueError):
        SceneRecipe("bad", (30, 48))
    with pytest.raises(ValueError):
        SceneRecipe("bad", (32, 48), n_layers=0)
    with pytest.raises(ValueError):
        SceneRecipe("bad", (32, 48), max_displacement=-1)
    with pytest.raises(KeyError):
        recipe_by_name("nope")


def test_heldout_stream_differs():
    r = stage_recipes()[0]
    assert not np.array_equal(generate(r, 0).frame1.data, generate(r.heldout(), 0).frame1.data)
