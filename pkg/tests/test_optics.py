"""Optics unit tests: zone arithmetic, pupil phase, rendered slices."""

import math

import numpy as np
import pytest

from rpsfloc.errors import ConfigurationError, DomainError, ShapeError
from rpsfloc.optics import (
    OpticalConfig,
    PsfDictionary,
    build_dictionary,
    lobe_centroid_angle,
    render_psf_slice,
    spiral_phase,
    zeta_grid,
    zone_index,
)


class TestOpticalConfig:
    def test_defaults(self):
        cfg = OpticalConfig()
        assert cfg.num_zones == 7
        assert cfg.num_planes == 21
        assert cfg.image_shape == (96, 96)
        assert cfg.pixel_pitch == 0.5
        assert cfg.pupil_samples == 256

    def test_zeta_limit(self):
        assert OpticalConfig(num_zones=7).zeta_limit == pytest.approx(7 * math.pi)
        assert OpticalConfig(num_zones=2).zeta_limit == pytest.approx(2 * math.pi)

    def test_center_uses_floor_halves(self):
        assert OpticalConfig(image_shape=(96, 96)).center == (48, 48)
        assert OpticalConfig(image_shape=(9, 12)).center == (4, 6)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"num_zones": 0},
            {"num_planes": 0},
            {"image_shape": (3, 32)},
            {"pixel_pitch": 0.0},
            {"pixel_pitch": -1.0},
            {"pupil_samples": 32},
        ],
    )
    def test_invalid_configs_rejected(self, kwargs):
        with pytest.raises(ConfigurationError):
            OpticalConfig(**kwargs)


class TestZetaGrid:
    def test_endpoints_and_symmetry(self):
        cfg = OpticalConfig(num_zones=7, num_planes=21)
        zetas = zeta_grid(cfg)
        assert zetas.shape == (21,)
        assert zetas[0] == pytest.approx(-7 * math.pi)
        assert zetas[-1] == pytest.approx(7 * math.pi)
        assert zetas[10] == pytest.approx(0.0)
        np.testing.assert_allclose(zetas, -zetas[::-1], atol=1e-12)

    def test_single_plane_is_in_focus(self):
        cfg = OpticalConfig(num_planes=1)
        np.testing.assert_array_equal(zeta_grid(cfg), [0.0])


class TestZoneIndex:
    def test_hand_worked_values(self):
        # l = max(1, ceil(L * u^2)) on seven equal-area zones
        assert zone_index(0.0, 7) == 1
        assert zone_index(1e-9, 7) == 1
        assert zone_index(1.0 / 7.0, 7) == 1
        assert zone_index(1.0 / 7.0 + 1e-9, 7) == 2
        assert zone_index(2.0 / 7.0, 7) == 2
        assert zone_index(6.5 / 7.0, 7) == 7
        assert zone_index(1.0, 7) == 7

    def test_array_input(self):
        r2 = np.array([0.0, 0.5, 1.0])
        np.testing.assert_array_equal(zone_index(r2, 2), [1, 1, 2])

    def test_outside_unit_disk_rejected(self):
        with pytest.raises(DomainError):
            zone_index(1.0 + 1e-6, 7)
        with pytest.raises(DomainError):
            zone_index(-0.1, 7)

    def test_equal_area_zone_boundaries(self):
        # zone l spans radius^2 in ((l-1)/L, l/L]: every annulus has area pi/L
        L = 5
        for l in range(1, L + 1):
            lo, hi = (l - 1) / L, l / L
            assert zone_index(lo + 1e-9, L) == l
            assert zone_index(hi, L) == l


class TestSpiralPhase:
    def test_zone_charge_scales_with_index(self):
        # zone l advances phase l times faster in azimuth
        phi = 0.3
        assert spiral_phase(0.05, phi, 7) == pytest.approx(1 * phi)
        assert spiral_phase(0.95, phi, 7) == pytest.approx(7 * phi)

    def test_linear_in_azimuth(self):
        r2 = 0.5
        l = zone_index(r2, 7)
        assert spiral_phase(r2, 1.0, 7) == pytest.approx(l * 1.0)
        assert spiral_phase(r2, -2.0, 7) == pytest.approx(-l * 2.0)


class TestRenderPsfSlice:
    def test_unit_sum_and_nonnegative(self, small_config):
        psf = render_psf_slice(small_config, 1.5)
        assert psf.shape == small_config.image_shape
        assert psf.min() >= 0.0
        assert psf.sum() == pytest.approx(1.0, abs=1e-12)

    def test_zeta_bounds_enforced(self, small_config):
        limit = small_config.zeta_limit
        render_psf_slice(small_config, limit)  # boundary is valid
        with pytest.raises(DomainError):
            render_psf_slice(small_config, limit * 1.01)
        with pytest.raises(DomainError):
            render_psf_slice(small_config, float("nan"))

    def test_slices_differ_across_depth(self, small_config):
        a = render_psf_slice(small_config, 0.0)
        b = render_psf_slice(small_config, 0.5 * small_config.zeta_limit)
        corr = np.corrcoef(a.ravel(), b.ravel())[0, 1]
        assert corr < 0.9

    def test_in_focus_slice_is_compact(self, small_config):
        # the single lobe concentrates near the center pixel
        psf = render_psf_slice(small_config, 0.0)
        cy, cx = small_config.center
        win = psf[cy - 8 : cy + 9, cx - 8 : cx + 9]
        assert win.sum() > 0.8


class TestPsfDictionary:
    def test_build_shapes(self, small_config, small_dictionary):
        d = small_dictionary
        assert d.slices.shape == (5, 32, 32)
        assert d.zetas.shape == (5,)
        assert d.num_planes == 5
        assert d.image_shape == (32, 32)
        assert d.volume_shape == (32, 32, 5)
        np.testing.assert_allclose(d.zetas, zeta_grid(small_config))

    def test_every_slice_unit_sum(self, small_dictionary):
        sums = small_dictionary.slices.sum(axis=(1, 2))
        np.testing.assert_allclose(sums, 1.0, atol=1e-12)

    def test_slices_match_single_renders(self, small_config, small_dictionary):
        k = 3
        direct = render_psf_slice(small_config, float(small_dictionary.zetas[k]))
        np.testing.assert_array_equal(small_dictionary.slices[k], direct)

    def test_shape_validation(self, small_config):
        with pytest.raises(ShapeError):
            PsfDictionary(
                slices=np.zeros((4, 32, 32)),
                zetas=np.zeros(4),
                config=small_config,
            )
        with pytest.raises(ShapeError):
            PsfDictionary(
                slices=np.zeros((5, 16, 32)),
                zetas=np.zeros(5),
                config=small_config,
            )


class TestLobeCentroidAngle:
    def test_synthetic_blob_angle(self):
        img = np.zeros((41, 41))
        img[20 - 8, 20 + 8] = 1.0  # up and right of center: +45 degrees
        assert lobe_centroid_angle(img) == pytest.approx(math.pi / 4, abs=1e-9)

    def test_angle_convention_covers_quadrants(self):
        img = np.zeros((41, 41))
        img[20 + 6, 20] = 1.0  # below center: -90 degrees
        assert lobe_centroid_angle(img) == pytest.approx(-math.pi / 2, abs=1e-9)

    def test_flat_image_rejected(self):
        with pytest.raises(DomainError):
            lobe_centroid_angle(np.ones((16, 16)))

    def test_requires_2d(self):
        with pytest.raises(ShapeError):
            lobe_centroid_angle(np.zeros((4, 4, 4)))

    def test_in_focus_angle_near_zero(self, small_config):
        psf = render_psf_slice(small_config, 0.0)
        assert abs(lobe_centroid_angle(psf)) < math.radians(10.0)

    def test_rotation_is_odd_in_zeta(self, small_config):
        # mirror depths give mirrored lobe angles (checked loosely here;
        # the acceptance suite pins 5 degrees on the full-size system)
        zeta = 0.4 * small_config.zeta_limit
        ang_p = lobe_centroid_angle(render_psf_slice(small_config, zeta))
        ang_m = lobe_centroid_angle(render_psf_slice(small_config, -zeta))
        diff = abs(ang_p + ang_m)
        diff = min(diff, 2 * math.pi - diff)
        assert diff < math.radians(15.0)
