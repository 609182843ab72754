import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metadapt.imaging import (
    ColorStats,
    SharpnessStats,
    build_calibration_profile,
    color_stats,
    lab_to_rgb,
    rgb_to_lab,
    sharpness_stats,
)
from metadapt.transforms import (
    GEOMETRIC_KINDS,
    MAX_BLUR_SIGMA,
    TransformPipeline,
    TransformSpec,
    apply_blur,
    build_pipeline,
    color_transfer,
    defocus_kernel,
    estimate_blur_strength,
    fired,
    gaussian_blur,
    gaussian_kernel,
    motion_kernel,
    pipeline_apply,
    reference_texture,
    transfer_lab,
)


def midrange_image(seed, h=16, w=16):
    """LAB image with modest spread around a mid-gray, far from the gamut edges."""
    rng = np.random.default_rng(seed)
    lab = np.stack(
        [rng.normal(50, 6, (h, w)), rng.normal(2, 4, (h, w)), rng.normal(-3, 4, (h, w))],
        axis=-1,
    )
    return lab_to_rgb(lab)


def texture(seed, size=24):
    return np.random.default_rng(seed).uniform(size=(size, size, 3))


# ---------------------------------------------------------------- color transfer


def test_transfer_affine_example():
    lab = np.zeros((1, 1, 3))
    lab[0, 0] = (55.0, 0.0, 0.0)
    src = ColorStats((50.0, 0.0, 0.0), (10.0, 1.0, 1.0))
    tgt = ColorStats((60.0, 0.0, 0.0), (20.0, 1.0, 1.0))
    assert transfer_lab(lab, tgt, src)[0, 0, 0] == pytest.approx(70.0, abs=1e-12)


def test_transfer_mean_maps_to_mean():
    lab = np.zeros((1, 1, 3))
    lab[0, 0] = (50.0, 3.0, -4.0)
    src = ColorStats((50.0, 3.0, -4.0), (10.0, 2.0, 5.0))
    tgt = ColorStats((61.0, -7.0, 9.0), (3.0, 4.0, 1.0))
    np.testing.assert_allclose(transfer_lab(lab, tgt, src)[0, 0], tgt.mean, atol=1e-12)


def test_transfer_shift_only_for_flat_channels():
    lab = np.tile([40.0, 5.0, 5.0], (3, 3, 1))
    out = transfer_lab(lab, ColorStats((45.0, 0.0, -2.0), (9.0, 9.0, 9.0)))
    np.testing.assert_allclose(out[..., 0], 45.0)
    np.testing.assert_allclose(out[..., 1], 0.0, atol=1e-12)
    np.testing.assert_allclose(out[..., 2], -2.0, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_self_transfer_is_identity(seed):
    lab = rgb_to_lab(midrange_image(seed))
    out = transfer_lab(lab, color_stats(lab))
    np.testing.assert_allclose(out, lab, atol=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_transfer_matches_target_stats(seed):
    img = midrange_image(seed)
    target = ColorStats((56.0, -3.0, 6.0), (7.0, 3.0, 5.0))
    lab_pre = transfer_lab(rgb_to_lab(img), target)
    # the claim holds for non-clipping inputs: check that nothing left the gamut
    assert np.all(lab_to_rgb(lab_pre, clip=False) >= 0) and np.all(lab_to_rgb(lab_pre, clip=False) <= 1)
    s = color_stats(rgb_to_lab(color_transfer(img, target)))
    np.testing.assert_allclose(s.mean, target.mean, atol=1e-3)
    np.testing.assert_allclose(s.std, target.std, atol=1e-3)


def test_color_transfer_is_pointwise():
    img = midrange_image(9)
    perm = np.random.default_rng(0).permutation(16 * 16)
    shuffled = img.reshape(-1, 3)[perm].reshape(img.shape)
    target = ColorStats((52.0, 1.0, 1.0), (5.0, 2.0, 2.0))
    a = color_transfer(img, target).reshape(-1, 3)[perm]
    b = color_transfer(shuffled, target).reshape(-1, 3)
    np.testing.assert_allclose(a, b, atol=1e-9)


# ---------------------------------------------------------------- blur


@pytest.mark.parametrize(
    "kernel",
    [gaussian_kernel(0.5), gaussian_kernel(1.7), motion_kernel(1, 0), motion_kernel(5, 33.0), motion_kernel(9, 120.0),
     defocus_kernel(0), defocus_kernel(1.4), defocus_kernel(3)],
)
def test_kernels_sum_to_one(kernel):
    assert abs(kernel.sum() - 1.0) < 1e-9
    assert kernel.min() >= 0


def test_gaussian_truncated_at_three_sigma():
    assert gaussian_kernel(1.0).shape == (7, 7)
    assert gaussian_kernel(2.0).shape == (13, 13)


def test_motion_kernel_horizontal_is_a_line():
    k = motion_kernel(5, 0.0)
    rows = np.nonzero(k.sum(axis=1))[0]
    assert len(rows) == 1
    np.testing.assert_allclose(k[rows[0]][k[rows[0]] > 0], 0.2)


def test_motion_kernel_rotation_symmetry():
    np.testing.assert_allclose(motion_kernel(7, 90.0), motion_kernel(7, 0.0).T, atol=1e-12)


BLURS = [
    TransformSpec("gaussian_blur", 1.0, {"sigma": 1.3}),
    TransformSpec("motion_blur", 1.0, {"length": 5, "angle": 30.0}),
    TransformSpec("motion_blur", 1.0, {"length": 4, "angle": None}),
    TransformSpec("defocus_blur", 1.0, {"radius": 2.0}),
]


@pytest.mark.parametrize("spec", BLURS)
@pytest.mark.parametrize("value", [0.0, 0.37, 1.0])
def test_constants_are_blur_fixed_points(spec, value):
    img = np.full((9, 11, 3), value)
    np.testing.assert_allclose(apply_blur(img, spec), img, atol=1e-12)


def test_gaussian_zero_is_identity():
    img = texture(0)
    assert np.array_equal(apply_blur(img, TransformSpec("gaussian_blur", 1.0, {"sigma": 0.0})), img)


def test_edge_replicate_padding():
    img = np.zeros((5, 5, 3))
    img[:, 0] = 1.0  # bright left column
    out = gaussian_blur(img, 1.0)
    # with replicated edges the left column only loses mass to the right
    assert np.all(out[:, 0] > 0.5)


def test_checkerboard_gaussian_decreases_laplacian_variance():
    y, x = np.mgrid[0:32, 0:32] // 4
    board = np.repeat(((x + y) % 2).astype(float)[..., None], 3, axis=2)
    before = sharpness_stats(board).laplacian_variance
    after = sharpness_stats(apply_blur(board, BLURS[0])).laplacian_variance
    assert after < before


def test_blurs_are_not_geometric():
    img = texture(1)
    for spec in BLURS:
        assert apply_blur(img, spec).shape == img.shape


# ---------------------------------------------------------------- blur strength


def test_blur_strength_matched_is_zero():
    s = SharpnessStats(0.1, 0.5)
    assert estimate_blur_strength(s, s) == 0.0


def test_blur_strength_never_sharpens():
    assert estimate_blur_strength(SharpnessStats(0.1, 0.5), SharpnessStats(0.3, 0.9)) == 0.0


@pytest.mark.parametrize("ratio", [0.5, 0.2, 0.05])
def test_blur_strength_re_measured(ratio):
    src = SharpnessStats(0.2, 0.5)
    sigma = estimate_blur_strength(src, SharpnessStats(0.2 * ratio, 0.3))
    assert 0 < sigma <= MAX_BLUR_SIGMA
    tex = reference_texture()
    measured = sharpness_stats(gaussian_blur(tex, sigma)).laplacian_variance / sharpness_stats(tex).laplacian_variance
    assert abs(measured / ratio - 1) <= 0.05


def test_blur_strength_clamps():
    assert estimate_blur_strength(SharpnessStats(1.0, 1.0), SharpnessStats(1e-12, 0.0)) == MAX_BLUR_SIGMA


# ---------------------------------------------------------------- pipeline


def _profile(seed, n=4):
    return build_calibration_profile([midrange_image(seed * 10 + i) for i in range(n)])


def _leaf_kinds(pipe):
    out = []
    for s in pipe.specs:
        out.extend(c.kind for c in s.choices) if s.choices else out.append(s.kind)
    return out


def test_pipeline_layout():
    src = build_calibration_profile([texture(i) for i in range(3)])
    pipe = build_pipeline(_profile(0), src.aggregate_sharpness, master_seed=3)
    assert [s.kind for s in pipe.specs] == ["color_transfer", "one_of", "horizontal_flip", "vertical_flip", "rotate90"]
    assert all(s.probability == 0.5 for s in pipe.specs)
    allowed = {"color_transfer", "gaussian_blur", "motion_blur", "defocus_blur"} | set(GEOMETRIC_KINDS)
    assert set(_leaf_kinds(pipe)) <= allowed
    sigma = pipe.specs[1].choices[0].params["sigma"]
    assert pipe.specs[1].choices[1].params["length"] == int(np.ceil(2 * sigma)) + 1
    assert pipe.specs[1].choices[2].params["radius"] == sigma


def test_pipeline_matched_domains():
    imgs = [midrange_image(i) for i in range(3)]
    prof = build_calibration_profile(imgs)
    pipe = build_pipeline(prof, prof.aggregate_sharpness, master_seed=0)
    assert pipe.specs[1].choices[0].params["sigma"] == 0.0
    assert pipe.specs[0].params["target"] == prof.aggregate_color


def test_different_profiles_give_different_targets():
    s = SharpnessStats(0.1, 0.5)
    a = build_pipeline(_profile(1), s, 0).specs[0].params["target"]
    b = build_pipeline(_profile(2), s, 0).specs[0].params["target"]
    assert a != b


def _asym():
    img = np.zeros((4, 6, 3))
    img[0, 0] = 1.0
    img[1, 4, 1] = 0.5
    return img


def test_pipeline_deterministic():
    pipe = build_pipeline(_profile(3), SharpnessStats(0.2, 0.5), master_seed=11)
    img = texture(4, 16)
    for idx in range(20):
        assert pipeline_apply(pipe, img, idx).tobytes() == pipeline_apply(pipe, img, idx).tobytes()


def test_pipeline_order_independent():
    pipe = build_pipeline(_profile(3), SharpnessStats(0.2, 0.5), master_seed=11)
    imgs = [texture(i, 12) for i in range(6)]
    forward = [pipeline_apply(pipe, im, i).tobytes() for i, im in enumerate(imgs)]
    backward = [pipeline_apply(pipe, imgs[i], i).tobytes() for i in reversed(range(6))][::-1]
    assert forward == backward


def test_pipeline_probability_zero_is_identity():
    pipe = build_pipeline(_profile(3), SharpnessStats(0.2, 0.5), master_seed=5).with_probability(0.0)
    img = texture(2, 12)
    for idx in range(10):
        assert np.array_equal(pipeline_apply(pipe, img, idx), img)


def test_forced_horizontal_flip():
    pipe = TransformPipeline((TransformSpec("horizontal_flip", 1.0),), 0)
    img = _asym()
    assert np.array_equal(pipeline_apply(pipe, img, 0), img[:, ::-1])


def test_rotate90_quarter_turns():
    img = _asym()
    for k in (1, 2, 3):
        out = pipeline_apply(TransformPipeline((TransformSpec("rotate90", 1.0, {"quarter_turns": k}),), 0), img, 0)
        assert np.array_equal(out, np.rot90(img, k))
    with pytest.raises(ValueError):
        TransformSpec("rotate90", 1.0, {"quarter_turns": 4})


def test_invalid_specs():
    with pytest.raises(ValueError):
        TransformSpec("elastic", 0.5)
    with pytest.raises(ValueError):
        TransformSpec("gaussian_blur", 1.5, {"sigma": 1.0})
    with pytest.raises(ValueError):
        TransformSpec("gaussian_blur", 0.5, {"sigma": -1.0})
    with pytest.raises(ValueError):
        TransformSpec("motion_blur", 0.5, {"length": 0})


def test_firing_frequency():
    pipe = build_pipeline(_profile(4), SharpnessStats(0.2, 0.5), master_seed=123)
    counts = np.zeros(len(pipe.specs))
    for idx in range(10_000):
        counts += fired(pipe, idx)
    freq = counts / 10_000
    assert np.all((freq >= 0.47) & (freq <= 0.53)), freq


def test_firing_draws_are_independent_of_seed_collisions():
    a = build_pipeline(_profile(4), SharpnessStats(0.2, 0.5), master_seed=1)
    b = TransformPipeline(a.specs, 2)
    assert [fired(a, i) for i in range(50)] != [fired(b, i) for i in range(50)]


def test_pipeline_json_round_trip():
    pipe = build_pipeline(_profile(5), SharpnessStats(0.3, 0.5), master_seed=2**63 + 7)
    text = pipe.to_json()
    d = json.loads(text)
    assert d["master_seed"] == 2**63 + 7
    assert {"kind", "probability", "params"} <= set(d["transforms"][0])
    again = TransformPipeline.from_json(text)
    assert again == pipe
    img = texture(6, 12)
    assert np.array_equal(pipeline_apply(again, img, 4), pipeline_apply(pipe, img, 4))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32), st.integers(0, 10_000))
def test_pipeline_output_stays_in_range(seed, idx):
    pipe = build_pipeline(_profile(6), SharpnessStats(0.5, 0.5), master_seed=seed)
    out = pipeline_apply(pipe, texture(7, 10), idx)
    assert out.min() >= 0 and out.max() <= 1 and out.shape == (10, 10, 3)
