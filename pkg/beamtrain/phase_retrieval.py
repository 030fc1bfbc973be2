"""
Stage II: Gaussian-masked sensing confined to the discovered support, Rician
pseudo-amplitudes, and sparse truncated amplitude flow (SPARTA) recovery of
the beamspace coefficients s_S, mapped back to the channel as h = F_S^H s.

Masks are CN(0, I/K); gradient steps are divided by the average mask power so
step sizes mean the same thing as for unit-variance measurement vectors.
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from beamtrain.beamspace import Codebook
from beamtrain.channel_model import Channel

log = logging.getLogger(__name__)


# ── Sensing ──

@dataclass(frozen=True)
class SensingSet:
    codebook: Codebook
    support: np.ndarray
    masks: np.ndarray

    @property
    def dim(self) -> int:
        return int(self.support.size)

    @property
    def count(self) -> int:
        return int(self.masks.shape[0])

    @property
    def mask_power(self) -> float:
        """Average |g_{p,j}|^2 (1/K in expectation)."""
        return float(np.mean(np.abs(self.masks) ** 2))

    def beam(self, p: int) -> np.ndarray:
        """v_p = F_S^H g_p."""
        return self.codebook.synthesize(self.support, self.masks[p])

    def beams(self) -> np.ndarray:
        return self.codebook.synthesize(self.support, self.masks)


def build_sensing(codebook: Codebook, support, m2: int, rng: np.random.Generator) -> SensingSet:
    support = np.asarray(support, dtype=int).ravel()
    if support.size == 0:
        raise ValueError("sensing needs a nonempty support")
    if np.unique(support).size != support.size:
        raise ValueError("support indices must be distinct")
    for i in support:
        codebook.grid.linear(i)
    if m2 < 1:
        raise ValueError(f"need at least one measurement, got m2={m2}")
    k = support.size
    masks = (rng.standard_normal((m2, k)) + 1j * rng.standard_normal((m2, k))) / math.sqrt(2 * k)
    return SensingSet(codebook=codebook, support=support, masks=masks)


def observe(ch: Channel, sensing: SensingSet, sigma_sq: float, rng: np.random.Generator) -> np.ndarray:
    """y_p = |h^H v_p + w_p|, computed through s_S since h^H F_S^H g = s_S^H g."""
    if sigma_sq < 0:
        raise ValueError(f"noise power must be nonnegative, got {sigma_sq}")
    s_support = sensing.codebook.to_beamspace(ch.h)[sensing.support]
    clean = sensing.masks @ s_support.conj()
    noise = (rng.standard_normal(sensing.count) + 1j * rng.standard_normal(sensing.count)) * math.sqrt(sigma_sq / 2)
    return np.abs(clean + noise)


@dataclass(frozen=True)
class PseudoAmplitudes:
    y: np.ndarray
    psi: np.ndarray
    sigma_sq: float


def rician_denoise(y, sigma_sq: float) -> PseudoAmplitudes:
    if sigma_sq < 0:
        raise ValueError(f"noise power must be nonnegative, got {sigma_sq}")
    y = np.asarray(y, dtype=float)
    if np.any(y < 0):
        raise ValueError("amplitudes must be nonnegative")
    return PseudoAmplitudes(y=y, psi=np.sqrt(np.maximum(y ** 2 - sigma_sq, 0.0)), sigma_sq=float(sigma_sq))


def pseudo_amplitude_bound_check(a: float, eps: float) -> bool:
    """|sqrt([a^2 + eps]_+) - a| <= |eps| / a whenever |eps| <= a^2 / 2; True outside that regime."""
    if a <= 0:
        raise ValueError(f"amplitude must be positive, got {a}")
    if abs(eps) > a * a / 2:
        return True
    return abs(math.sqrt(max(a * a + eps, 0.0)) - a) <= abs(eps) / a + 4 * math.ulp(a)


# ── Solver ──

@dataclass(frozen=True)
class SpartaConfig:
    k: int = 1
    mu: float = 1.0
    trunc_gamma: float = 0.7
    init_card: int | None = None
    max_iters: int = 400
    tol: float = 1e-7
    power_iters: int = 50
    power_tol: float = 1e-8
    screen_support: bool = True
    max_halvings: int = 30

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"sparsity k must be >= 1, got {self.k}")
        if self.mu <= 0:
            raise ValueError(f"step size must be positive, got {self.mu}")
        if self.trunc_gamma < 0:
            raise ValueError(f"trunc_gamma must be nonnegative, got {self.trunc_gamma}")
        if self.max_iters < 0 or self.power_iters < 1:
            raise ValueError("iteration limits must be positive")
        if self.tol <= 0 or self.power_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_halvings < 0:
            raise ValueError(f"max_halvings must be nonnegative, got {self.max_halvings}")

    def resolve(self, dim: int, count: int) -> tuple[int, int]:
        """(k, init_card) checked against support size and measurement count."""
        if self.k > dim:
            raise ValueError(f"sparsity k={self.k} exceeds support size {dim}")
        card = self.init_card if self.init_card is not None else math.ceil(count / 6)
        if not 1 <= card <= count:
            raise ValueError(f"init_card={card} must lie in [1, {count}]")
        return self.k, card


@dataclass
class Estimate:
    support: np.ndarray
    s_hat: np.ndarray
    h_hat: np.ndarray
    iters_used: int
    converged: bool
    flags: tuple = ()
    trace: list = field(default_factory=list)

    @property
    def v_hat(self) -> np.ndarray:
        norm = np.linalg.norm(self.h_hat)
        return self.h_hat / norm if norm > 0 else self.h_hat.copy()


def hard_threshold(z: np.ndarray, k: int) -> np.ndarray:
    """Keep the k largest-magnitude entries; ties go to the lowest index."""
    keep = np.argsort(-np.abs(z), kind="stable")[:k]
    out = np.zeros_like(z)
    out[keep] = z[keep]
    return out


def phase_aligned_distance(estimate: np.ndarray, truth: np.ndarray) -> float:
    """min over phi of ||estimate - e^{j phi} truth|| / ||truth||."""
    norm = np.linalg.norm(truth)
    if norm == 0:
        return float(np.linalg.norm(estimate))
    inner = np.vdot(truth, estimate)
    phase = inner / abs(inner) if abs(inner) > 0 else 1.0
    return float(np.linalg.norm(estimate - phase * truth) / norm)


def amplitude_loss(z: np.ndarray, sensing: SensingSet, psi: np.ndarray) -> float:
    return float(np.mean((psi - np.abs(sensing.masks.conj() @ z)) ** 2))


def principal_eigenvector(mat: np.ndarray, iters: int = 50, tol: float = 1e-8) -> tuple[np.ndarray, float]:
    """Power iteration on a Hermitian PSD matrix, started from its largest column."""
    cols = np.linalg.norm(mat, axis=0)
    if not np.any(cols > 0):
        vec = np.zeros(mat.shape[0], dtype=complex)
        vec[0] = 1.0
        return vec, 0.0
    x = mat[:, int(np.argmax(cols))].astype(complex)
    x /= np.linalg.norm(x)
    for _ in range(iters):
        y = mat @ x
        y /= np.linalg.norm(y)
        inner = np.vdot(x, y)
        if abs(inner) > 0:
            y *= np.conj(inner) / abs(inner)
        done = np.linalg.norm(y - x) < tol
        x = y
        if done:
            break
    return x, float(np.vdot(x, mat @ x).real)


def spectral_init(sensing: SensingSet, psi, cfg: SpartaConfig) -> np.ndarray:
    """Scaled principal eigenvector of the top-psi mask covariance, hard-thresholded to k entries.

    With screening on, the eigenvector is computed on the k coordinates with the
    largest marginal statistic mean(psi^2 |g_j|^2). Returns zeros when psi is all zero.
    """
    psi = np.asarray(psi, dtype=float)
    k, card = cfg.resolve(sensing.dim, sensing.count)
    if not np.any(psi > 0):
        return np.zeros(sensing.dim, dtype=complex)
    norm = math.sqrt(float(np.mean(psi ** 2)) / sensing.mask_power)
    cols = np.arange(sensing.dim)
    if cfg.screen_support and k < sensing.dim:
        marginal = np.mean(psi[:, None] ** 2 * np.abs(sensing.masks) ** 2, axis=0)
        cols = np.sort(np.argsort(-marginal, kind="stable")[:k])
    top = np.argsort(-psi, kind="stable")[:card]
    g = sensing.masks[np.ix_(top, cols)]
    cov = g.T @ g.conj() / card
    vec, _ = principal_eigenvector(cov, cfg.power_iters, cfg.power_tol)
    z = np.zeros(sensing.dim, dtype=complex)
    z[cols] = vec * norm
    return hard_threshold(z, k)


@dataclass(frozen=True)
class IterateResult:
    z: np.ndarray
    kept: int
    empty: bool = False


def sparta_iterate(z: np.ndarray, sensing: SensingSet, psi, cfg: SpartaConfig,
                   mu: float | None = None, truncate: bool = True) -> IterateResult:
    """One amplitude-flow step followed by hard thresholding.

    With `truncate` the gradient only sums measurements with |g^H z| >= psi / (1 + gamma);
    without it every measurement with g^H z != 0 takes part (the plain amplitude-loss gradient).
    """
    psi = np.asarray(psi, dtype=float)
    k, _ = cfg.resolve(sensing.dim, sensing.count)
    proj = sensing.masks.conj() @ z
    mag = np.abs(proj)
    keep = mag > 0
    if truncate:
        keep &= mag >= psi / (1 + cfg.trunc_gamma)
    kept = int(keep.sum())
    if kept == 0:
        return IterateResult(z=z.copy(), kept=0, empty=True)
    resid = (mag[keep] - psi[keep]) * proj[keep] / mag[keep]
    grad = sensing.masks[keep].T @ resid / kept
    step = (cfg.mu if mu is None else mu) / sensing.mask_power
    return IterateResult(z=hard_threshold(z - step * grad, k), kept=kept)


def _guarded_step(z: np.ndarray, loss: float, sensing: SensingSet, psi: np.ndarray, cfg: SpartaConfig,
                  truncate: bool):
    """(result, new loss, step) for the largest mu / 2^j whose step does not raise the amplitude loss.

    The result is None when every halving raised the loss.
    """
    slack = 1e-12 * (loss + float(np.mean(psi ** 2)))
    step = cfg.mu
    for _ in range(cfg.max_halvings + 1):
        res = sparta_iterate(z, sensing, psi, cfg, mu=step, truncate=truncate)
        if res.empty:
            return res, math.nan, step
        new_loss = amplitude_loss(res.z, sensing, psi)
        if new_loss <= loss + slack:
            return res, new_loss, step
        step /= 2
    return None, math.nan, step


def solve(sensing: SensingSet, psi, cfg: SpartaConfig) -> Estimate:
    """Spectral start, then guarded truncated amplitude-flow steps until the iterate settles.

    The amplitude loss never rises between accepted iterates. When no halving of a
    truncated step keeps it from rising, the iteration takes a step along the full
    amplitude-loss gradient instead; the run only stops early (`stalled`, not
    converged) when that step fails too.
    """
    psi = np.asarray(psi, dtype=float)
    cfg.resolve(sensing.dim, sensing.count)
    if not np.any(psi > 0):
        zeros = np.zeros(sensing.dim, dtype=complex)
        return Estimate(support=sensing.support, s_hat=zeros, h_hat=np.zeros(sensing.codebook.size, dtype=complex),
                        iters_used=0, converged=True, flags=("no_signal",))

    z = spectral_init(sensing, psi, cfg)
    loss = amplitude_loss(z, sensing, psi)
    trace = [{"iteration": 0, "loss": loss, "truncation_size": math.nan, "step": math.nan, "truncated": True}]
    flags = []
    converged = False
    iters = 0
    for it in range(1, cfg.max_iters + 1):
        res, new_loss, step = _guarded_step(z, loss, sensing, psi, cfg, truncate=True)
        if res is not None and res.empty:
            flags.append("empty_truncation")
            log.debug("empty truncation set at iteration %d", it)
            break
        truncated = res is not None
        if not truncated:
            log.debug("truncated step raises the loss at iteration %d; using the full gradient", it)
            res, new_loss, step = _guarded_step(z, loss, sensing, psi, cfg, truncate=False)
        if res is None or res.empty:
            flags.append("stalled")
            log.debug("no loss-preserving step at iteration %d", it)
            break
        change = np.linalg.norm(res.z - z) / max(np.linalg.norm(z), 1e-300)
        z, loss, iters = res.z, new_loss, it
        trace.append({"iteration": it, "loss": loss, "truncation_size": res.kept, "step": step,
                      "truncated": truncated})
        if change < cfg.tol:
            converged = True
            break
    return Estimate(support=sensing.support, s_hat=z, h_hat=sensing.codebook.synthesize(sensing.support, z),
                    iters_used=iters, converged=converged, flags=tuple(flags), trace=trace)


def error_decomposition(codebook: Codebook, h: np.ndarray, support, s_hat: np.ndarray) -> tuple[float, float, float]:
    """(||h_hat - h||^2, ||s_hat - s_S||^2, ||s_{S^c}||^2)."""
    support = np.asarray(support, dtype=int)
    s = codebook.to_beamspace(h)
    outside = np.ones(s.size, dtype=bool)
    outside[support] = False
    total = float(np.linalg.norm(codebook.synthesize(support, s_hat) - h) ** 2)
    inside = float(np.linalg.norm(s_hat - s[support]) ** 2)
    tail = float(np.linalg.norm(s[outside]) ** 2)
    return total, inside, tail
