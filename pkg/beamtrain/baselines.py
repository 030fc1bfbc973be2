"""
Comparison methods: exhaustive DFT search and the two full-beamspace phase
retrieval solvers (R-SPARTA and R-SWF) that skip support discovery.

The phase retrieval baselines reuse the Stage II sensing, observation and
Rician denoising path with the support set to the whole grid.
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from beamtrain.beamspace import Codebook, DftSounder
from beamtrain.channel_model import Channel
from beamtrain.phase_retrieval import (
    Estimate, SensingSet, SpartaConfig, build_sensing, hard_threshold, observe, rician_denoise,
    solve, spectral_init,
)

log = logging.getLogger(__name__)


@dataclass
class BaselineResult:
    method: str
    h_hat: np.ndarray
    probes_used: int
    metadata: dict = field(default_factory=dict)


# ── Exhaustive search ──

def exhaustive_dft(ch: Channel, cb: Codebook, sigma_sq: float, rng: np.random.Generator) -> BaselineResult:
    """One probe per codeword; the strongest measured beam wins (lowest index on ties)."""
    sounder = DftSounder(cb, ch, sigma_sq, rng, budget=cb.size)
    power = np.abs(sounder.sweep()) ** 2
    best = int(np.argmax(power))
    beam = cb.grid.index(best)
    return BaselineResult(
        method="exhaustive",
        h_hat=cb.codeword(best),
        probes_used=sounder.probes_used,
        metadata={"best_index": best, "n": beam.n, "m": beam.m, "degenerate": ch.energy == 0},
    )


# ── Full-beamspace phase retrieval ──

def _full_sensing(ch: Channel, cb: Codebook, sigma_sq: float, budget: int, rng: np.random.Generator,
                  debias: bool) -> tuple[SensingSet, np.ndarray]:
    if budget < 1:
        raise ValueError(f"measurement budget must be >= 1, got {budget}")
    sensing = build_sensing(cb, np.arange(cb.size), budget, rng)
    y = observe(ch, sensing, sigma_sq, rng)
    amps = rician_denoise(y, sigma_sq if debias else 0.0)
    return sensing, amps.psi


def r_sparta_full(ch: Channel, cb: Codebook, sigma_sq: float, budget: int, rng: np.random.Generator,
                  cfg: SpartaConfig, debias: bool = True) -> BaselineResult:
    sensing, psi = _full_sensing(ch, cb, sigma_sq, budget, rng, debias)
    est = solve(sensing, psi, cfg)
    return BaselineResult(method="r_sparta", h_hat=est.h_hat, probes_used=sensing.count,
                          metadata={"estimate": est, "iters": est.iters_used, "flags": est.flags})


@dataclass(frozen=True)
class SwfConfig:
    mu: float = 0.2
    max_iters: int = 400
    tol: float = 1e-7
    max_halvings: int = 30

    def __post_init__(self):
        if self.mu <= 0:
            raise ValueError(f"step size must be positive, got {self.mu}")
        if self.max_iters < 0:
            raise ValueError(f"max_iters must be nonnegative, got {self.max_iters}")
        if self.tol <= 0:
            raise ValueError(f"tolerance must be positive, got {self.tol}")
        if self.max_halvings < 0:
            raise ValueError(f"max_halvings must be nonnegative, got {self.max_halvings}")


def intensity_loss(z: np.ndarray, sensing: SensingSet, psi: np.ndarray) -> float:
    return float(np.mean((np.abs(sensing.masks.conj() @ z) ** 2 - psi ** 2) ** 2))


def swf_iterate(z: np.ndarray, sensing: SensingSet, psi, k: int, step: float) -> np.ndarray:
    """z - step * (1/M) sum (|g^H z|^2 - psi^2) g g^H z, then keep k entries.

    `step` is already scaled by 1 / (mask_power^2 ||z0||^2).
    """
    psi = np.asarray(psi, dtype=float)
    proj = sensing.masks.conj() @ z
    resid = (np.abs(proj) ** 2 - psi ** 2) * proj
    grad = sensing.masks.T @ resid / sensing.count
    return hard_threshold(z - step * grad, k)


def swf_solve(sensing: SensingSet, psi, sparta_cfg: SpartaConfig, swf_cfg: SwfConfig) -> Estimate:
    psi = np.asarray(psi, dtype=float)
    k, _ = sparta_cfg.resolve(sensing.dim, sensing.count)
    zeros = np.zeros(sensing.dim, dtype=complex)
    if not np.any(psi > 0):
        return Estimate(support=sensing.support, s_hat=zeros, h_hat=np.zeros(sensing.codebook.size, dtype=complex),
                        iters_used=0, converged=True, flags=("no_signal",))

    z = spectral_init(sensing, psi, sparta_cfg)
    norm_sq = float(np.vdot(z, z).real)
    if norm_sq == 0:
        return Estimate(support=sensing.support, s_hat=zeros, h_hat=np.zeros(sensing.codebook.size, dtype=complex),
                        iters_used=0, converged=True, flags=("no_signal",))
    base = swf_cfg.mu / (sensing.mask_power ** 2 * norm_sq)
    loss = intensity_loss(z, sensing, psi)
    trace = [{"iteration": 0, "loss": loss, "truncation_size": sensing.count, "step": math.nan}]
    flags = []
    converged = False
    iters = 0
    for it in range(1, swf_cfg.max_iters + 1):
        step = base
        accepted = None
        for _ in range(swf_cfg.max_halvings + 1):
            cand = swf_iterate(z, sensing, psi, k, step)
            new_loss = intensity_loss(cand, sensing, psi)
            if new_loss <= loss + 1e-12 * (loss + float(np.mean(psi ** 4))):
                accepted = (cand, new_loss)
                break
            step /= 2
        if accepted is None:
            flags.append("stalled")
            log.debug("no loss-preserving SWF step at iteration %d", it)
            break
        cand, new_loss = accepted
        change = np.linalg.norm(cand - z) / max(np.linalg.norm(z), 1e-300)
        z, loss, iters = cand, new_loss, it
        trace.append({"iteration": it, "loss": loss, "truncation_size": sensing.count, "step": step})
        if change < swf_cfg.tol:
            converged = True
            break
    return Estimate(support=sensing.support, s_hat=z, h_hat=sensing.codebook.synthesize(sensing.support, z),
                    iters_used=iters, converged=converged, flags=tuple(flags), trace=trace)


def r_swf_full(ch: Channel, cb: Codebook, sigma_sq: float, budget: int, rng: np.random.Generator,
               cfg: SpartaConfig, swf_cfg: SwfConfig | None = None, debias: bool = True) -> BaselineResult:
    swf_cfg = swf_cfg or SwfConfig()
    sensing, psi = _full_sensing(ch, cb, sigma_sq, budget, rng, debias)
    est = swf_solve(sensing, psi, cfg, swf_cfg)
    if "stalled" in est.flags:
        log.debug("SWF stalled after %d iterations", est.iters_used)
    return BaselineResult(method="r_swf", h_hat=est.h_hat, probes_used=sensing.count,
                          metadata={"estimate": est, "iters": est.iters_used, "flags": est.flags})
