"""
Exhaustive DFT search and the full-beamspace phase retrieval baselines.

Run: python -m pytest tests/ -v
Long checks: BEAMTRAIN_LONG_TESTS=1 python -m pytest tests/test_baselines.py -v
"""
import cmath
import math
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from beamtrain.baselines import (
    SwfConfig, exhaustive_dft, intensity_loss, r_sparta_full, r_swf_full, swf_iterate, swf_solve,
)
from beamtrain.beamspace import Codebook, grid_points
from beamtrain.channel_model import (
    ArrayConfig, Channel, PathKind, PathSpec, SphericalPoint, generate_channel, trial_rng,
)
from beamtrain.harness import correlation
from beamtrain.phase_retrieval import (
    SpartaConfig, build_sensing, observe, phase_aligned_distance, rician_denoise, solve,
)

LONG = bool(os.environ.get("BEAMTRAIN_LONG_TESTS"))
SMALL = ArrayConfig(8, 4, 28e9)


def on_grid_channel():
    """Far-field LoS user sitting exactly on codeword (5, 2)."""
    u, v = grid_points(8)[5], grid_points(4)[2]
    p = SphericalPoint.from_direction(v, u / math.sqrt(1 - v ** 2), 1e7)
    return generate_channel(SMALL, [PathSpec(PathKind.LOS, p)])


def one_sparse_channel(cb, index=13):
    s = np.zeros(cb.size, dtype=complex)
    s[index] = 0.8 - 0.6j
    return Channel(h=cb.from_beamspace(s))


# ═══════════════════════════════════════════════
# 1. EXHAUSTIVE SEARCH
# ═══════════════════════════════════════════════

class TestExhaustive:
    def test_on_grid_user(self):
        cb = Codebook(SMALL)
        ch = on_grid_channel()
        res = exhaustive_dft(ch, cb, 0.0, trial_rng(1, "ex"))
        rho, degenerate = correlation(ch.h, res.h_hat)
        assert rho >= 1 - 1e-6 and not degenerate
        assert res.metadata["best_index"] == 22
        assert (res.metadata["n"], res.metadata["m"]) == (5, 2)
        assert res.probes_used == cb.size
        assert np.linalg.norm(res.h_hat) == pytest.approx(1.0)

    def test_zero_channel_is_degenerate(self):
        cb = Codebook(SMALL)
        res = exhaustive_dft(Channel(h=np.zeros(32, dtype=complex)), cb, 0.0, trial_rng(1, "ex"))
        assert res.metadata["degenerate"]
        assert res.metadata["best_index"] == 0

    def test_noisy_uses_one_probe_per_beam(self):
        cb = Codebook(SMALL)
        res = exhaustive_dft(on_grid_channel(), cb, 1e-3, trial_rng(2, "ex"))
        assert res.probes_used == 32


# ═══════════════════════════════════════════════
# 2. R-SPARTA
# ═══════════════════════════════════════════════

class TestRSparta:
    def test_matches_manual_pipeline(self):
        cb = Codebook(SMALL)
        ch = one_sparse_channel(cb)
        cfg = SpartaConfig(k=2)
        res = r_sparta_full(ch, cb, 0.01, 64, trial_rng(3, "rs"), cfg)

        rng = trial_rng(3, "rs")
        sensing = build_sensing(cb, np.arange(cb.size), 64, rng)
        psi = rician_denoise(observe(ch, sensing, 0.01, rng), 0.01).psi
        np.testing.assert_allclose(res.h_hat, solve(sensing, psi, cfg).h_hat)
        assert res.probes_used == 64

    def test_one_sparse_recovery(self):
        cb = Codebook(SMALL)
        ch = one_sparse_channel(cb)
        res = r_sparta_full(ch, cb, 0.0, 256, trial_rng(4, "rs"), SpartaConfig(k=1))
        assert correlation(ch.h, res.h_hat)[0] >= 0.999

    def test_budget_checked(self):
        cb = Codebook(SMALL)
        with pytest.raises(ValueError):
            r_sparta_full(one_sparse_channel(cb), cb, 0.0, 0, trial_rng(0, "rs"), SpartaConfig())

    def test_no_rician_keeps_raw_amplitudes(self):
        cb = Codebook(SMALL)
        ch = one_sparse_channel(cb)
        a = r_sparta_full(ch, cb, 0.5, 64, trial_rng(5, "rs"), SpartaConfig(k=1), debias=False)
        b = r_sparta_full(ch, cb, 0.5, 64, trial_rng(5, "rs"), SpartaConfig(k=1), debias=True)
        assert a.probes_used == b.probes_used == 64
        assert not np.allclose(a.h_hat, b.h_hat)


# ═══════════════════════════════════════════════
# 3. R-SWF
# ═══════════════════════════════════════════════

class TestSwf:
    def _setup(self):
        cb = Codebook(SMALL)
        sensing = build_sensing(cb, np.arange(12), 80, trial_rng(6, "swf"))
        z = np.zeros(12, dtype=complex)
        z[[1, 9]] = [0.6 + 0.2j, -0.4 + 0.7j]
        return sensing, z

    def test_fixed_point(self):
        sensing, z = self._setup()
        psi = np.abs(sensing.masks.conj() @ z)
        np.testing.assert_allclose(swf_iterate(z, sensing, psi, 2, 5.0), z, atol=1e-12)
        assert intensity_loss(z, sensing, psi) == pytest.approx(0.0, abs=1e-24)

    def test_global_phase_equivariance(self):
        sensing, z = self._setup()
        psi = np.abs(sensing.masks.conj() @ z) * 0.9
        start = z + 0.03
        rot = cmath.exp(-1.1j)
        a = swf_iterate(start, sensing, psi, 3, 2.0)
        b = swf_iterate(rot * start, sensing, psi, 3, 2.0)
        np.testing.assert_allclose(b, rot * a, atol=1e-12)

    def test_loss_never_increases(self):
        sensing, z = self._setup()
        psi = np.abs(sensing.masks.conj() @ z)
        est = swf_solve(sensing, psi, SpartaConfig(k=2), SwfConfig())
        losses = [row["loss"] for row in est.trace]
        assert all(b <= a + 1e-10 for a, b in zip(losses, losses[1:]))

    def test_no_signal(self):
        sensing, _ = self._setup()
        est = swf_solve(sensing, np.zeros(80), SpartaConfig(k=2), SwfConfig())
        assert est.flags == ("no_signal",)

    def test_one_sparse_recovery(self):
        cb = Codebook(SMALL)
        ch = one_sparse_channel(cb, index=27)
        res = r_swf_full(ch, cb, 0.0, 256, trial_rng(7, "swf"), SpartaConfig(k=1))
        assert correlation(ch.h, res.h_hat)[0] >= 0.999
        assert res.method == "r_swf"

    def test_exhausted_guard_is_not_convergence(self):
        sensing, z = self._setup()
        psi = np.abs(sensing.masks.conj() @ z) + 0.05
        est = swf_solve(sensing, psi, SpartaConfig(k=2), SwfConfig(mu=1e6, max_halvings=0))
        assert est.flags == ("stalled",)
        assert not est.converged
        assert est.iters_used == 0

    @pytest.mark.parametrize("kwargs", [{"mu": 0.0}, {"max_iters": -1}, {"tol": 0.0}, {"max_halvings": -1}])
    def test_config_rejects_invalid(self, kwargs):
        with pytest.raises(ValueError):
            SwfConfig(**kwargs)


@pytest.mark.skipif(not LONG, reason="set BEAMTRAIN_LONG_TESTS to run")
class TestSwfRecoveryStatistics:
    def test_k4_on_32(self):
        cb = Codebook(SMALL)
        k = 4
        count = math.ceil(16 * k * k * math.log(cb.size))
        hits = 0
        for seed in range(100):
            rng = trial_rng(seed, "swf_stats")
            s = np.zeros(cb.size, dtype=complex)
            chosen = rng.choice(cb.size, size=k, replace=False)
            s[chosen] = (rng.standard_normal(k) + 1j * rng.standard_normal(k)) / math.sqrt(2)
            res = r_swf_full(Channel(h=cb.from_beamspace(s)), cb, 0.0, count, rng, SpartaConfig(k=k))
            hits += phase_aligned_distance(res.metadata["estimate"].s_hat, s) < 1e-4
        assert hits >= 80
