"""
2D DFT beamspace: codebook, unitary transforms, beam-pattern analysis and the
closed-form lobe-width / sparsity laws for near-field UPA channels.

Codewords use the same phase convention as the steering vector, so the DFT
beam at (u_n, v_m) is the far-field limit of b(theta, phi, r) at that direction.
"""
import logging
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from beamtrain.channel_model import (
    ArrayConfig, Channel, ScenarioPrior, SphericalPoint, steering_vector, element_offsets,
)

log = logging.getLogger(__name__)

DEFAULT_LOBE_RESOLUTION = 4096
# predicted width over the DFT-limited width 2 / N below which diffraction widens the lobe past the law
LOBE_LAW_MIN_SPREAD = 6.0


def grid_points(count: int) -> np.ndarray:
    """u_n = (2n - count + 1) / count."""
    return (2 * np.arange(count) - count + 1) / count


def axis_vector(count: int, d: float, wavelength: float, x) -> np.ndarray:
    """1D DFT-style array vector(s); column per entry of x when x is an array."""
    offsets = element_offsets(count) * d
    k = 2 * np.pi / wavelength
    return np.exp(1j * k * np.multiply.outer(offsets, x)) / np.sqrt(count)


# ── Grid ──

@dataclass(frozen=True)
class BeamIndex:
    n: int
    m: int

    def linear(self, n_z: int) -> int:
        return self.n * n_z + self.m

    @classmethod
    def from_linear(cls, index: int, n_z: int) -> "BeamIndex":
        return cls(int(index) // n_z, int(index) % n_z)


@dataclass(frozen=True)
class BeamGrid:
    n_y: int
    n_z: int

    @property
    def size(self) -> int:
        return self.n_y * self.n_z

    @property
    def spacing(self) -> tuple[float, float]:
        return 2 / self.n_y, 2 / self.n_z

    @cached_property
    def u(self) -> np.ndarray:
        """u coordinate of every linear index."""
        return np.repeat(grid_points(self.n_y), self.n_z)

    @cached_property
    def v(self) -> np.ndarray:
        return np.tile(grid_points(self.n_z), self.n_y)

    def linear(self, idx) -> int:
        if isinstance(idx, BeamIndex):
            if not (0 <= idx.n < self.n_y and 0 <= idx.m < self.n_z):
                raise IndexError(f"beam {idx} outside {self.n_y}x{self.n_z} grid")
            return idx.linear(self.n_z)
        i = int(idx)
        if not 0 <= i < self.size:
            raise IndexError(f"beam {i} outside grid of size {self.size}")
        return i

    def index(self, linear: int) -> BeamIndex:
        return BeamIndex.from_linear(self.linear(linear), self.n_z)

    def coarse_subgrid(self, count: int) -> np.ndarray:
        """Roughly `count` linear indices spread uniformly over the grid."""
        count = max(1, min(int(count), self.size))
        picks = np.round(np.linspace(0, self.size - 1, count)).astype(int)
        return np.unique(picks)


# ── Codebook ──

class Codebook:
    """Unitary 2D DFT transform F (rows f_i^H), evaluated per axis instead of as an N×N matrix."""

    def __init__(self, cfg: ArrayConfig):
        self.cfg = cfg
        self.grid = BeamGrid(cfg.n_y, cfg.n_z)
        self._ay = axis_vector(cfg.n_y, cfg.d, cfg.wavelength, grid_points(cfg.n_y))
        self._az = axis_vector(cfg.n_z, cfg.d, cfg.wavelength, grid_points(cfg.n_z))
        if not math.isclose(cfg.d, cfg.wavelength / 2, rel_tol=1e-9):
            log.warning("element spacing %.4g m is not half a wavelength; DFT grid is not unitary", cfg.d)

    @property
    def size(self) -> int:
        return self.cfg.n

    def codeword(self, idx) -> np.ndarray:
        beam = self.grid.index(self.grid.linear(idx))
        return np.kron(self._ay[:, beam.n], self._az[:, beam.m])

    def _check_length(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=complex)
        if x.shape[-1] != self.size:
            raise ValueError(f"expected length {self.size}, got {x.shape[-1]}")
        return x

    def to_beamspace(self, h: np.ndarray) -> np.ndarray:
        """s = F h."""
        h = self._check_length(h)
        grid = h.reshape(h.shape[:-1] + (self.cfg.n_y, self.cfg.n_z))
        s = self._ay.conj().T @ grid @ self._az.conj()
        return s.reshape(h.shape)

    def from_beamspace(self, s: np.ndarray) -> np.ndarray:
        """h = F^H s."""
        s = self._check_length(s)
        grid = s.reshape(s.shape[:-1] + (self.cfg.n_y, self.cfg.n_z))
        h = self._ay @ grid @ self._az.T
        return h.reshape(s.shape)

    def synthesize(self, support, weights: np.ndarray) -> np.ndarray:
        """F_S^H g for one weight vector (K,) or a batch (M, K)."""
        support = np.asarray(support, dtype=int)
        weights = np.asarray(weights, dtype=complex)
        if weights.shape[-1] != support.size:
            raise ValueError(f"{weights.shape[-1]} weights for a support of size {support.size}")
        full = np.zeros(weights.shape[:-1] + (self.size,), dtype=complex)
        full[..., support] = weights
        return self.from_beamspace(full)

    def rows(self, support) -> np.ndarray:
        """Dense F_S, shape (K, N)."""
        return np.stack([self.codeword(i).conj() for i in np.asarray(support, dtype=int)])

    def dense(self) -> np.ndarray:
        return self.rows(np.arange(self.size))


def dft_codeword(cfg: ArrayConfig, idx: BeamIndex) -> np.ndarray:
    grid = BeamGrid(cfg.n_y, cfg.n_z)
    grid.linear(idx)
    a_y = axis_vector(cfg.n_y, cfg.d, cfg.wavelength, grid_points(cfg.n_y)[idx.n])
    a_z = axis_vector(cfg.n_z, cfg.d, cfg.wavelength, grid_points(cfg.n_z)[idx.m])
    return np.kron(a_y, a_z)


def beam_gain(cfg: ArrayConfig, p: SphericalPoint, idx: BeamIndex) -> float:
    """|b^H a| with the exact steering vector."""
    return float(min(1.0, abs(np.vdot(steering_vector(cfg, p), dft_codeword(cfg, idx)))))


# ── Beam pattern analysis ──

def separable_steering(cfg: ArrayConfig, p: SphericalPoint) -> tuple[np.ndarray, np.ndarray]:
    """Axis-wise Fresnel approximations (b_y, b_z); b_y ⊗ b_z ≈ steering_vector."""
    k = 2 * np.pi / cfg.wavelength
    y = element_offsets(cfg.n_y) * cfg.d
    z = element_offsets(cfg.n_z) * cfg.d
    u, v, r = p.u, p.v, p.r
    b_y = np.exp(-1j * k * (-y * u + y ** 2 * (1 - u ** 2) / (2 * r))) / np.sqrt(cfg.n_y)
    b_z = np.exp(-1j * k * (-z * v + z ** 2 * (1 - v ** 2) / (2 * r))) / np.sqrt(cfg.n_z)
    return b_y, b_z


def _axis(cfg: ArrayConfig, p: SphericalPoint, axis: str) -> tuple[int, float, np.ndarray]:
    b_y, b_z = separable_steering(cfg, p)
    if axis == "y":
        return cfg.n_y, p.u, b_y
    if axis == "z":
        return cfg.n_z, p.v, b_z
    raise ValueError(f"axis must be 'y' or 'z', got {axis!r}")


def axis_gain(cfg: ArrayConfig, p: SphericalPoint, axis: str, points) -> np.ndarray:
    """Normalized 1D response |b_axis^H a_axis(x)| / |b_axis^H a_axis(xi0)|."""
    count, xi0, b = _axis(cfg, p, axis)
    response = np.abs(b.conj() @ axis_vector(count, cfg.d, cfg.wavelength, np.asarray(points, dtype=float)))
    peak = abs(np.vdot(b, axis_vector(count, cfg.d, cfg.wavelength, xi0)))
    if peak == 0:
        raise ValueError("zero response at the path direction")
    return response / peak


def predicted_lobe_width(cfg: ArrayConfig, p: SphericalPoint, axis: str) -> float:
    count, xi0, _ = _axis(cfg, p, axis)
    return count * cfg.d * (1 - xi0 ** 2) / p.r


@dataclass(frozen=True)
class LobeWidthReport:
    axis: str
    b_measured: float
    b_predicted: float
    grid_resolution: float
    far_field: bool = False
    diffraction_limited: bool = False
    disconnected: bool = False


def measure_lobe_width(cfg: ArrayConfig, p: SphericalPoint, axis: str,
                       resolution: int = DEFAULT_LOBE_RESOLUTION) -> LobeWidthReport:
    """6-dB (half-amplitude) width of the axis response, measured as max - min of the superlevel set."""
    if resolution < 256:
        raise ValueError(f"resolution must be at least 256 samples, got {resolution}")
    x = np.linspace(-1.0, 1.0, resolution)
    above = np.flatnonzero(axis_gain(cfg, p, axis, x) >= 0.5)
    if above.size == 0:
        raise ValueError("empty 6-dB superlevel set")
    count = cfg.n_y if axis == "y" else cfg.n_z
    predicted = predicted_lobe_width(cfg, p, axis)
    return LobeWidthReport(
        axis=axis,
        b_measured=float(x[above[-1]] - x[above[0]]),
        b_predicted=predicted,
        grid_resolution=(resolution - 1) / 2,
        far_field=predicted < 2 / count,
        diffraction_limited=predicted < LOBE_LAW_MIN_SPREAD * 2 / count,
        disconnected=bool(above[-1] - above[0] + 1 != above.size),
    )


def plateau_indices(cfg: ArrayConfig, p: SphericalPoint) -> np.ndarray:
    """Linear indices inside the predicted-width rectangle centered at the beamspace peak."""
    grid = BeamGrid(cfg.n_y, cfg.n_z)
    s = Codebook(cfg).to_beamspace(steering_vector(cfg, p))
    peak = grid.index(int(np.argmax(np.abs(s))))
    dy, dz = grid.spacing
    half_y = max(1, math.ceil(predicted_lobe_width(cfg, p, "y") / (2 * dy)))
    half_z = max(1, math.ceil(predicted_lobe_width(cfg, p, "z") / (2 * dz)))
    ns = np.arange(max(0, peak.n - half_y), min(cfg.n_y, peak.n + half_y + 1))
    ms = np.arange(max(0, peak.m - half_z), min(cfg.n_z, peak.m + half_z + 1))
    return (ns[:, None] * cfg.n_z + ms[None, :]).ravel()


# ── Sparsity law ──

def uniform_moment(lo: float, hi: float, power: int) -> float:
    if math.isclose(lo, hi, rel_tol=0.0, abs_tol=1e-15):
        return lo ** power
    return (hi ** (power + 1) - lo ** (power + 1)) / ((power + 1) * (hi - lo))


def inverse_range_moment(r1: float, r2: float, power: int = 1) -> float:
    """E[1/r^power] for r ~ U[r1, r2], power 1 or 2."""
    if math.isclose(r1, r2, rel_tol=1e-12):
        return r1 ** -power
    if power == 1:
        return math.log(r2 / r1) / (r2 - r1)
    if power == 2:
        return (1 / r1 - 1 / r2) / (r2 - r1)
    raise ValueError(f"unsupported power {power}")


@dataclass(frozen=True)
class SparsityEstimate:
    expected_k: float
    xi_r: float
    xi_vs: float
    mu2: float
    mu4: float
    nu2: float

    def as_dict(self) -> dict:
        return {"expected_k": self.expected_k, "xi_r": self.xi_r, "xi_vs": self.xi_vs,
                "mu2": self.mu2, "mu4": self.mu4, "nu2": self.nu2}


def _density(cfg: ArrayConfig, num_paths: int) -> float:
    dy, dz = 2 / cfg.n_y, 2 / cfg.n_z
    return num_paths * cfg.n_y * cfg.n_z * cfg.d ** 2 / (dy * dz)


def expected_sparsity(cfg: ArrayConfig, prior: ScenarioPrior) -> SparsityEstimate:
    mu2 = uniform_moment(*prior.v_range, 2)
    mu4 = uniform_moment(*prior.v_range, 4)
    nu2 = uniform_moment(*prior.s_range, 2)
    xi_vs = (1 - mu2) - nu2 * (1 - 2 * mu2 + mu4)
    xi_r = inverse_range_moment(*prior.r_range, power=2)
    return SparsityEstimate(
        expected_k=_density(cfg, prior.num_paths) * xi_vs * xi_r,
        xi_r=xi_r, xi_vs=xi_vs, mu2=mu2, mu4=mu4, nu2=nu2,
    )


def sparsity_monte_carlo(cfg: ArrayConfig, prior: ScenarioPrior, samples: int,
                         rng: np.random.Generator) -> float:
    v = rng.uniform(*prior.v_range, size=samples)
    s = rng.uniform(*prior.s_range, size=samples)
    r = rng.uniform(*prior.r_range, size=samples)
    u = np.sqrt(1 - v ** 2) * s
    return float(_density(cfg, prior.num_paths) * np.mean((1 - u ** 2) * (1 - v ** 2) / r ** 2))


# ── Sounding ──

class DftSounder:
    """Amplitude-feedback probing restricted to single DFT codewords: y_i = h^H f_i + w."""

    def __init__(self, codebook: Codebook, channel: Channel, sigma_sq: float,
                 rng: np.random.Generator, budget: int | None = None):
        if sigma_sq < 0:
            raise ValueError(f"noise power must be nonnegative, got {sigma_sq}")
        self.codebook = codebook
        self.grid = codebook.grid
        self.sigma_sq = float(sigma_sq)
        self.rng = rng
        self.budget = budget
        self.probes_used = 0
        self._coeffs = codebook.to_beamspace(channel.h)

    def probe(self, idx) -> complex:
        if self.budget is not None and self.probes_used >= self.budget:
            raise RuntimeError(f"probe budget of {self.budget} exhausted")
        i = self.grid.linear(idx)
        noise = complex(*self.rng.standard_normal(2)) * math.sqrt(self.sigma_sq / 2)
        self.probes_used += 1
        return complex(np.conj(self._coeffs[i])) + noise

    def sweep(self) -> np.ndarray:
        """One probe per codeword in linear order."""
        return np.array([self.probe(i) for i in range(self.grid.size)])
