"""
Array geometry, spherical steering vectors, path gains and the scenario sampler.

Run: python -m pytest tests/ -v
"""
import math
import os
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from beamtrain.beamspace import Codebook, grid_points
from beamtrain.channel_model import (
    ArrayConfig, Channel, PathKind, PathSpec, ScenarioPrior, SphericalPoint, element_position,
    element_positions, generate_channel, sample_scenario, steering_vector, trial_rng,
)

DESK = ArrayConfig(32, 8, 28e9)
SMALL = ArrayConfig(8, 4, 28e9)


# ═══════════════════════════════════════════════
# 1. GEOMETRY
# ═══════════════════════════════════════════════

class TestArrayConfig:
    def test_half_wavelength_default(self):
        assert DESK.d == pytest.approx(DESK.wavelength / 2)
        assert DESK.n == 256

    def test_full_scale_distances(self):
        cfg = ArrayConfig(128, 16, 28e9)
        assert cfg.rayleigh_distance == pytest.approx(87.6, rel=1e-2)
        assert cfg.fresnel_distance == pytest.approx(3.39, rel=1e-2)
        assert cfg.fresnel_distance < cfg.rayleigh_distance

    def test_aperture_is_diagonal(self):
        assert SMALL.aperture == pytest.approx(math.hypot(7 * SMALL.d, 3 * SMALL.d))

    @pytest.mark.parametrize("kwargs", [
        {"n_y": 0, "n_z": 4, "f_c": 28e9},
        {"n_y": 4, "n_z": 2.5, "f_c": 28e9},
        {"n_y": 4, "n_z": 4, "f_c": 0.0},
        {"n_y": 4, "n_z": 4, "f_c": 28e9, "d": -1e-3},
        {"n_y": 4, "n_z": 4, "f_c": float("nan")},
    ])
    def test_rejects_invalid(self, kwargs):
        with pytest.raises(ValueError):
            ArrayConfig(**kwargs)


class TestElementPositions:
    def test_centered(self):
        pos = element_positions(SMALL)
        assert pos.shape == (32, 3)
        np.testing.assert_allclose(pos.mean(axis=0), 0.0, atol=1e-15)
        assert np.all(pos[:, 0] == 0.0)

    def test_flattening_order(self):
        pos = element_positions(SMALL)
        for i, j in [(0, 0), (0, 3), (5, 1), (7, 3)]:
            np.testing.assert_allclose(pos[i * SMALL.n_z + j], element_position(SMALL, i, j))

    def test_spacing(self):
        a, b = element_position(SMALL, 2, 1), element_position(SMALL, 3, 1)
        assert np.linalg.norm(b - a) == pytest.approx(SMALL.d)

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            element_position(SMALL, 8, 0)
        with pytest.raises(IndexError):
            element_position(SMALL, 0, -1)


class TestSphericalPoint:
    def test_direction_roundtrip(self):
        p = SphericalPoint.from_direction(0.3, -0.4, 5.0)
        assert p.v == pytest.approx(0.3)
        assert p.u == pytest.approx(math.sqrt(1 - 0.09) * -0.4)
        assert np.linalg.norm(p.position()) == pytest.approx(5.0)

    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            SphericalPoint(r=0.0, theta=1.0, phi=0.0)
        with pytest.raises(ValueError):
            SphericalPoint(r=1.0, theta=4.0, phi=0.0)
        with pytest.raises(ValueError):
            SphericalPoint.from_direction(1.2, 0.0, 1.0)


# ═══════════════════════════════════════════════
# 2. STEERING VECTORS AND CHANNELS
# ═══════════════════════════════════════════════

class TestSteeringVector:
    @settings(max_examples=40, deadline=None)
    @given(v=st.floats(-0.9, 0.9), s=st.floats(-0.9, 0.9), r=st.floats(0.1, 1000.0))
    def test_unit_norm(self, v, s, r):
        b = steering_vector(SMALL, SphericalPoint.from_direction(v, s, r))
        assert np.linalg.norm(b) == pytest.approx(1.0, abs=1e-12)

    def test_far_field_limit_is_codeword(self):
        # on-grid direction: u = 3/8, v = 1/4
        u, v = grid_points(8)[5], grid_points(4)[2]
        p = SphericalPoint.from_direction(v, u / math.sqrt(1 - v ** 2), 1e7)
        b = steering_vector(SMALL, p)
        f = Codebook(SMALL).codeword(5 * 4 + 2)
        assert abs(np.vdot(f, b)) == pytest.approx(1.0, abs=1e-6)

    def test_near_field_spreads_energy(self):
        p = SphericalPoint.from_direction(0.0, 0.0, DESK.fresnel_distance)
        s = Codebook(DESK).to_beamspace(steering_vector(DESK, p))
        assert np.max(np.abs(s) ** 2) < 0.9


class TestGenerateChannel:
    def test_single_los_norm(self):
        p = SphericalPoint.from_direction(0.1, 0.2, 2.0)
        ch = generate_channel(DESK, [PathSpec(PathKind.LOS, p)])
        expected = math.sqrt(DESK.n) * DESK.wavelength / (4 * math.pi * 2.0)
        assert np.linalg.norm(ch.h) == pytest.approx(expected)
        assert ch.energy == pytest.approx(expected ** 2)

    def test_superposition(self):
        los = PathSpec(PathKind.LOS, SphericalPoint.from_direction(0.1, 0.2, 2.0))
        nlos = PathSpec(PathKind.NLOS, SphericalPoint.from_direction(-0.3, 0.1, 3.0),
                        scatter_to_user_distance=1.5, reflection_coeff=0.3 - 0.4j)
        both = generate_channel(DESK, [los, nlos])
        np.testing.assert_allclose(both.h, los.contribution(DESK) + nlos.contribution(DESK))

    def test_nlos_gain(self):
        nlos = PathSpec(PathKind.NLOS, SphericalPoint.from_direction(0.0, 0.0, 3.0),
                        scatter_to_user_distance=2.0, reflection_coeff=1j)
        assert nlos.gain(DESK.wavelength) == pytest.approx(DESK.wavelength / (4 * math.pi * 6.0) * 1j)
        assert nlos.travelled() == pytest.approx(5.0)

    def test_empty_paths(self):
        with pytest.raises(ValueError):
            generate_channel(DESK, [])

    def test_nlos_needs_fields(self):
        with pytest.raises(ValueError):
            PathSpec(PathKind.NLOS, SphericalPoint.from_direction(0.0, 0.0, 3.0))

    def test_zero_channel_energy(self):
        assert Channel(h=np.zeros(4, dtype=complex)).energy == 0.0


# ═══════════════════════════════════════════════
# 3. SCENARIO PRIOR AND SAMPLING
# ═══════════════════════════════════════════════

class TestScenarioPrior:
    def test_point_mass_allowed(self):
        prior = ScenarioPrior((0.1, 0.1), (0.0, 0.0), (2.0, 2.0))
        paths = sample_scenario(prior, trial_rng(1, "t"))
        assert paths[0].point.v == pytest.approx(0.1)
        assert paths[0].point.r == pytest.approx(2.0)

    @pytest.mark.parametrize("kwargs", [
        {"v_range": (0.5, -0.5), "s_range": (0.0, 0.0), "r_range": (1.0, 2.0)},
        {"v_range": (-1.5, 0.5), "s_range": (0.0, 0.0), "r_range": (1.0, 2.0)},
        {"v_range": (0.0, 0.0), "s_range": (0.0, 0.0), "r_range": (0.0, 2.0)},
        {"v_range": (0.0, 0.0), "s_range": (0.0, 0.0), "r_range": (1.0, 2.0), "num_paths": 0},
    ])
    def test_rejects_invalid(self, kwargs):
        with pytest.raises(ValueError):
            ScenarioPrior(**kwargs)


class TestSampleScenario:
    PRIOR = ScenarioPrior((-0.5, 0.5), (-0.5, 0.5), (1.0, 5.0), num_paths=6)

    def test_structure(self):
        paths = sample_scenario(self.PRIOR, trial_rng(3, "s"))
        assert len(paths) == 6
        assert paths[0].kind == PathKind.LOS
        assert all(p.kind == PathKind.NLOS for p in paths[1:])
        for p in paths:
            assert -0.5 <= p.point.v <= 0.5
            assert 1.0 <= p.point.r <= 5.0

    def test_nlos_hop_is_user_distance(self):
        paths = sample_scenario(self.PRIOR, trial_rng(3, "s"))
        user = paths[0].point.position()
        for p in paths[1:]:
            assert p.scatter_to_user_distance == pytest.approx(np.linalg.norm(user - p.point.position()))

    def test_los_range_pin(self):
        paths = sample_scenario(self.PRIOR, trial_rng(3, "s"), los_range=(2.5, 2.5))
        assert paths[0].point.r == pytest.approx(2.5)

    def test_deterministic(self):
        a = generate_channel(DESK, sample_scenario(self.PRIOR, trial_rng(9, "channel", 0.0, 4)))
        b = generate_channel(DESK, sample_scenario(self.PRIOR, trial_rng(9, "channel", 0.0, 4)))
        np.testing.assert_array_equal(a.h, b.h)


class TestTrialRng:
    def test_same_keys_same_stream(self):
        assert trial_rng(7, "probe", "lse_sparta", 0.0, 3).random() == trial_rng(7, "probe", "lse_sparta", 0.0, 3).random()

    def test_keys_separate_streams(self):
        draws = {trial_rng(7, *keys).random() for keys in [("a", 0), ("b", 0), ("a", 1), ("a", 0.5)]}
        assert len(draws) == 4
        assert trial_rng(7, "a").random() != trial_rng(8, "a").random()
