import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stfl import phantom
from stfl.errors import ConfigError, ShapeError
from stfl.phantom import NoiseSpec, apply_noise, build_federation_data, generate_phantom, random_warp


def test_phantom_deterministic():
    a = generate_phantom(7, 64, 0.0)
    b = generate_phantom(7, 64, 0.0)
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()


def test_phantom_types_and_range():
    img, mask = generate_phantom(3, 64, 0.0)
    assert img.shape == mask.shape == (64, 64)
    assert img.dtype == np.float32 and mask.dtype == np.uint8
    assert 0.0 <= img.min() and img.max() <= 1.0
    assert set(np.unique(mask)) <= {0, 1}


def test_mask_fraction_over_100_seeds():
    fracs = [generate_phantom(s, 64, 0.0)[1].mean() for s in range(100)]
    assert 0.005 <= min(fracs) and max(fracs) <= 0.15


def test_lesions_are_inside_lungs_and_bright():
    for s in range(30):
        layers = phantom.phantom_layers(s, 64, 0.0)
        m = layers["mask"].astype(bool)
        assert m.any()
        assert (layers["image"][m] >= layers["background"][m]).all()
        assert layers["lungs"][m].all()
        # lung fields darker than the body
        assert layers["background"][layers["lungs"]].mean() < layers["background"][~layers["lungs"] & (layers["background"] > 0.3)].mean()


def test_structure_shift_changes_geometry_not_style():
    base = phantom.phantom_layers(5, 64, 0.0)
    shifted = phantom.phantom_layers(5, 64, 1.0)
    assert (base["lungs"] != shifted["lungs"]).any()
    lung_mean = lambda layers: float(layers["background"][layers["lungs"]].mean())
    assert abs(lung_mean(base) - lung_mean(shifted)) < 0.05


def test_small_resolution_rejected():
    with pytest.raises(ConfigError):
        generate_phantom(0, 16, 0.0)


# ---------------------------------------------------------------- noise

def _img(v):
    return np.full((4, 4), v, dtype=np.float32)


def test_inversion_example():
    assert apply_noise(_img(0.2), NoiseSpec("inversion"), 0)[0, 0] == pytest.approx(0.8)


def test_gaussian_sigma_zero_is_identity():
    img = generate_phantom(1)[0]
    np.testing.assert_array_equal(apply_noise(img, NoiseSpec("gaussian", sigma=0.0), 4), img)


def test_contrast_example():
    assert apply_noise(_img(0.25), NoiseSpec("contrast_enhanced", gamma=0.5), 0)[0, 0] == pytest.approx(0.5)


def test_gamma_one_and_double_inversion_are_identity():
    img = generate_phantom(2)[0]
    np.testing.assert_allclose(apply_noise(img, NoiseSpec("contrast_enhanced", gamma=1.0), 0), img, atol=1e-7)
    twice = apply_noise(apply_noise(img, NoiseSpec("inversion"), 0), NoiseSpec("inversion"), 0)
    np.testing.assert_allclose(twice, img, atol=1e-6)


def test_clean_is_identity():
    img = generate_phantom(2)[0]
    np.testing.assert_array_equal(apply_noise(img, NoiseSpec("clean"), 9), img)


def test_gaussian_noise_statistics_and_clamp():
    img = _img(0.5).repeat(64, 0).repeat(64, 1)
    out = apply_noise(img, NoiseSpec("gaussian", sigma=0.1), 3)
    assert abs(float((out - img).std()) - 0.1) < 0.005
    assert out.min() >= 0 and out.max() <= 1
    edge = apply_noise(_img(1.0), NoiseSpec("gaussian", sigma=0.5), 3)
    assert edge.max() <= 1.0


def test_mixed_noise_applies_component_subsets():
    img = generate_phantom(4)[0]
    seen = set()
    for seed in range(40):
        out = apply_noise(img, NoiseSpec("mixed", sigma=0.1), seed)
        assert out.min() >= 0 and out.max() <= 1
        assert out.tobytes() == apply_noise(img, NoiseSpec("mixed", sigma=0.1), seed).tobytes()
        seen.add(out.tobytes() == img.tobytes())
    assert seen == {True, False}


def test_noise_spec_validation():
    with pytest.raises(ConfigError, match="salt"):
        NoiseSpec("salt")
    with pytest.raises(ConfigError):
        NoiseSpec("gaussian", sigma=-1)
    with pytest.raises(ConfigError):
        NoiseSpec("contrast_enhanced", gamma=0)
    assert NoiseSpec.parse({"kind": "gaussian", "sigma": 0.2}) == NoiseSpec("gaussian", sigma=0.2)
    assert NoiseSpec.parse("inversion").kind == "inversion"


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(phantom.NOISE_KINDS), st.integers(0, 10**6))
def test_noise_output_always_in_unit_range(kind, seed):
    img = np.random.default_rng(seed).random((32, 32)).astype(np.float32)
    out = apply_noise(img, NoiseSpec(kind, sigma=0.3, gamma=0.4), seed)
    assert out.shape == img.shape and np.isfinite(out).all()
    assert out.min() >= 0 and out.max() <= 1


# ---------------------------------------------------------------- warp

def test_zero_warp_is_identity():
    img, mask = generate_phantom(1)
    wi, wm = random_warp(img, mask, 5, 0.0)
    np.testing.assert_allclose(wi, img, atol=1e-7)
    np.testing.assert_array_equal(wm, mask)


def test_warp_deterministic_and_binary():
    img, mask = generate_phantom(1)
    a = random_warp(img, mask, 5, 2.0)
    b = random_warp(img, mask, 5, 2.0)
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()
    assert set(np.unique(a[1])) <= {0, 1}
    assert not np.array_equal(a[0], img)


def test_warp_preserves_mask_size_over_100_seeds():
    worst = 0.0
    for s in range(100):
        img, mask = generate_phantom(s)
        _, wm = random_warp(img, mask, s, 2.0)
        worst = max(worst, abs(int(wm.sum()) - int(mask.sum())) / int(mask.sum()))
    assert worst < 0.30


def test_warp_uses_one_field_for_image_and_mask(monkeypatch):
    captured = {}
    real = phantom.apply_field

    def spy(img, mask, field):
        captured["field"] = field.copy()
        return real(img, mask, field)

    monkeypatch.setattr(phantom, "apply_field", spy)
    img, mask = generate_phantom(11)
    wi, wm = random_warp(img, mask, 8, 2.0)
    field = captured["field"]
    h, w = mask.shape
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    y = np.clip(ii + field[0], 0, h - 1)
    x = np.clip(jj + field[1], 0, w - 1)
    expected_mask = mask[np.clip(np.floor(y + 0.5).astype(int), 0, h - 1), np.clip(np.floor(x + 0.5).astype(int), 0, w - 1)]
    np.testing.assert_array_equal(wm, expected_mask)
    # bilinear image sample at an interior pixel, computed by hand
    i, j = 30, 33
    yy, xx = y[i, j], x[i, j]
    y0, x0 = int(np.floor(yy)), int(np.floor(xx))
    fy, fx = yy - y0, xx - x0
    ref = (img[y0, x0] * (1 - fy) * (1 - fx) + img[y0, x0 + 1] * (1 - fy) * fx
           + img[y0 + 1, x0] * fy * (1 - fx) + img[y0 + 1, x0 + 1] * fy * fx)
    assert wi[i, j] == pytest.approx(ref, abs=1e-6)


def test_warp_field_is_smooth_and_scaled():
    f = phantom.warp_field((64, 64), 3, 2.0)
    assert f.shape == (2, 64, 64)
    assert np.abs(np.diff(f, axis=1)).max() < 1.0
    stds = [phantom.warp_field((64, 64), s, 2.0)[:, ::21, ::21].std() for s in range(50)]
    assert 1.2 < float(np.mean(stds)) < 2.5


def test_warp_errors():
    img, mask = generate_phantom(1)
    with pytest.raises(ConfigError):
        random_warp(img, mask, 0, -1.0)
    with pytest.raises(ShapeError):
        random_warp(img, mask[:32], 0, 1.0)


# ---------------------------------------------------------------- federation data

def test_build_federation_data_example():
    clients, style = build_federation_data(3, ["clean", "inversion", "gaussian"], base_seed=0)
    assert [c.is_style_target for c in clients] == [True, False, False]
    assert [len(c) for c in clients] == [30, 30, 30]
    assert [len(c.val_indices) for c in clients] == [6, 6, 6]
    for c in clients:
        assert sorted(c.train_indices + c.val_indices) == list(range(30))
        assert not set(c.train_indices) & set(c.val_indices)
        assert c.images.min() >= 0 and c.images.max() <= 1
        assert set(np.unique(c.masks)) <= {0, 1}
    assert 20 <= len(style) <= 50 and len(style) == 30


def test_build_federation_data_deterministic():
    a, sa = build_federation_data(3, ["clean", "inversion", "gaussian"], base_seed=4)
    b, sb = build_federation_data(3, ["clean", "inversion", "gaussian"], base_seed=4)
    for x, y in zip(a, b):
        assert x.images.tobytes() == y.images.tobytes() and x.masks.tobytes() == y.masks.tobytes()
        assert x.val_indices == y.val_indices
    assert sa.images.tobytes() == sb.images.tobytes()


def test_seed_isolation():
    clients, style = build_federation_data(4, ["clean", "inversion", "gaussian", "mixed"], base_seed=2)
    seen = set(style.seeds)
    assert len(seen) == len(style.seeds)
    for c in clients:
        assert not seen & set(c.phantom_seeds)
        seen |= set(c.phantom_seeds)
    assert len(seen) == len(style.seeds) + 4 * 30


def test_clean_count_rules():
    with pytest.raises(ConfigError, match="exactly one clean"):
        build_federation_data(3, ["clean", "clean", "inversion"])
    with pytest.raises(ConfigError, match="exactly one clean"):
        build_federation_data(2, ["inversion", "gaussian"])
    clients, _ = build_federation_data(3, ["clean", "clean", "clean"], style_target=1, samples_per_client=5)
    assert [c.is_style_target for c in clients] == [False, True, False]
    with pytest.raises(ConfigError):
        build_federation_data(2, ["clean", "inversion"], style_target=1, samples_per_client=5)


def test_noise_is_applied_after_identical_generation_and_warp():
    noisy, _ = build_federation_data(2, ["clean", "inversion"], base_seed=1, samples_per_client=5)
    clean, _ = build_federation_data(2, ["clean", "clean"], base_seed=1, samples_per_client=5, style_target=0)
    np.testing.assert_array_equal(noisy[1].masks, clean[1].masks)
    np.testing.assert_allclose(noisy[1].images, 1.0 - clean[1].images, atol=1e-6)


def test_zero_sigma_rejected_in_federation():
    with pytest.raises(ConfigError, match="sigma"):
        build_federation_data(2, ["clean", {"kind": "gaussian", "sigma": 0.0}])


def test_assignment_length_mismatch():
    with pytest.raises(ConfigError):
        build_federation_data(3, ["clean", "inversion"])
