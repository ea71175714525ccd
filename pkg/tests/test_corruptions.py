import json

import numpy as np
import numpy.testing as npt
import pytest
from scipy import fft

from corruptions import (
    CORRUPTIONS, KINDS, CorruptionSpec, apply_corruption, apply_specs, block_quantize,
    corruption_distortion, draw_specs, make_pair, spectral_lowpass, specs_from_json, specs_to_json,
)
from numerics import RngStream
from synthset import class_params, render_instance


def constant(value=0.5, size=64):
    return np.full((size, size, 3), value)


class TestCorruptionSpec:
    @pytest.mark.parametrize('severity', [0, 6, -1])
    def test_severity_out_of_range(self, severity):
        with pytest.raises(ValueError):
            CorruptionSpec(kind='GaussianNoise', severity=severity, seed=0)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            CorruptionSpec(kind='Fog', severity=1, seed=0)

    def test_json_round_trip_through_text(self):
        specs = [CorruptionSpec('Contrast', 2, 11), CorruptionSpec('MotionBlur', 5, 12)]
        assert specs_from_json(json.loads(json.dumps(specs_to_json(specs)))) == specs


class TestKinds:
    def test_registry_covers_every_kind(self):
        assert sorted(CORRUPTIONS) == sorted(KINDS)
        assert len(KINDS) == 8

    @pytest.mark.parametrize('kind', KINDS)
    @pytest.mark.parametrize('severity', [1, 5])
    def test_range_and_determinism(self, image, kind, severity):
        spec = CorruptionSpec(kind, severity, seed=42)
        first = apply_corruption(image, spec)
        second = apply_corruption(image, spec)
        npt.assert_array_equal(first, second)
        assert first.shape == image.shape
        assert first.min() >= 0.0 and first.max() <= 1.0

    @pytest.mark.parametrize('severity', range(1, 6))
    def test_contrast_fixed_point(self, severity):
        npt.assert_allclose(apply_corruption(constant(), CorruptionSpec('Contrast', severity, 1)), 0.5,
                            atol=1e-15)

    def test_gaussian_blur_preserves_constant(self):
        npt.assert_allclose(apply_corruption(constant(0.3), CorruptionSpec('GaussianBlur', 4, 1)), 0.3,
                            atol=1e-12)

    def test_gaussian_noise_statistics(self):
        out = apply_corruption(constant(), CorruptionSpec('GaussianNoise', 5, 7))
        assert abs(out.mean() - 0.5) < 0.01
        assert abs(out.std() - 0.10) < 0.015

    def test_rejects_out_of_range_image(self):
        with pytest.raises(ValueError):
            apply_corruption(constant(1.5), CorruptionSpec('Brightness', 1, 0))

    def test_rejects_wrong_shape(self):
        with pytest.raises(ValueError):
            apply_corruption(np.zeros((8, 8)), CorruptionSpec('Brightness', 1, 0))

    def test_block_quantize_step_zero_round_trip(self, image):
        npt.assert_allclose(block_quantize(image, 0.0), image, atol=1e-9)

    def test_block_quantize_pads_odd_sizes(self, rng):
        img = rng.uniform(0.0, 1.0, (13, 10, 3))
        npt.assert_allclose(block_quantize(img, 0.0), img, atol=1e-9)

    @pytest.mark.parametrize('kind', ['GaussianNoise', 'GaussianBlur', 'Downscale', 'BlockCompress'])
    def test_distortion_monotone_in_severity(self, image, kind):
        seeds = range(10)
        distortions = [corruption_distortion(image, kind, s, seeds) for s in range(1, 6)]
        assert all(a <= b + 1e-15 for a, b in zip(distortions, distortions[1:]))

    @pytest.mark.parametrize('class_id', [0, 1, 2])
    def test_downscale_monotone_on_rendered_images(self, class_id):
        image = render_instance(class_params(0, class_id), view_seed=5)
        distortions = [corruption_distortion(image, 'Downscale', s, range(10)) for s in range(1, 6)]
        assert all(a <= b + 1e-15 for a, b in zip(distortions, distortions[1:]))

    def test_spectral_lowpass_full_band_is_identity(self, image):
        npt.assert_allclose(spectral_lowpass(image, 64, 64), image, atol=1e-12)

    def test_spectral_lowpass_is_a_projection(self, image):
        once = spectral_lowpass(image, 21, 30)
        npt.assert_allclose(spectral_lowpass(once, 21, 30), once, atol=1e-12)
        coeffs = fft.dctn(once, axes=(0, 1), norm='ortho')
        assert np.abs(coeffs[21:]).max() < 1e-12 and np.abs(coeffs[:, 30:]).max() < 1e-12

    def test_spectral_lowpass_rejects_empty_band(self, image):
        with pytest.raises(ValueError):
            spectral_lowpass(image, 0, 8)


class TestPairs:
    def test_deterministic(self, image):
        a = make_pair(image, RngStream(3, 'pair'))
        b = make_pair(image, RngStream(3, 'pair'))
        npt.assert_array_equal(a[1], b[1])
        assert a[2] == b[2]

    def test_clean_side_untouched(self, image):
        clean, _, _ = make_pair(image, RngStream(3, 'pair'))
        npt.assert_array_equal(clean, image)

    def test_one_or_two_distinct_kinds(self):
        for seed in range(200):
            specs = draw_specs(RngStream(seed, 'pair'))
            assert len(specs) in (1, 2)
            assert len({s.kind for s in specs}) == len(specs)
            assert all(1 <= s.severity <= 5 for s in specs)

    def test_composition_matches_manual_application(self, image):
        _, corrupted, specs = make_pair(image, RngStream(8, 'pair'))
        manual = image
        for spec in specs:
            manual = apply_corruption(manual, spec)
        npt.assert_array_equal(corrupted, manual)

    def test_explicit_composition(self, image):
        specs = [CorruptionSpec('GaussianNoise', 1, 5), CorruptionSpec('Brightness', 1, 6)]
        expected = apply_corruption(apply_corruption(image, specs[0]), specs[1])
        npt.assert_array_equal(apply_specs(image, specs), expected)
