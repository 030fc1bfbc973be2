"""
Near-field multipath UPA channel: array geometry, spherical steering vectors,
LoS/NLoS path gains and the scenario sampler every experiment draws from.

Elements sit in the y-z plane, centered at the origin. Flattening order of the
(i, j) element grid is row-major: y-index outer, z-index inner (linear index
i * n_z + j), matching a_y ⊗ a_z in beamspace.
"""
import logging
import math
import zlib
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

log = logging.getLogger(__name__)

SPEED_OF_LIGHT = 299_792_458.0


# ── RNG streams ──

def _stream_key(key) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    if isinstance(key, float):
        return zlib.crc32(repr(key).encode("utf-8"))
    return int(key)


def trial_rng(global_seed: int, *keys) -> np.random.Generator:
    """Independent reproducible generator for (global_seed, *keys). Strings and floats are hashed stably."""
    seq = np.random.SeedSequence(entropy=int(global_seed), spawn_key=tuple(_stream_key(k) for k in keys))
    return np.random.Generator(np.random.PCG64(seq))


# ── Geometry ──

@dataclass(frozen=True)
class ArrayConfig:
    n_y: int
    n_z: int
    f_c: float
    d: float | None = None

    def __post_init__(self):
        if int(self.n_y) != self.n_y or self.n_y < 1:
            raise ValueError(f"n_y must be a positive integer, got {self.n_y!r}")
        if int(self.n_z) != self.n_z or self.n_z < 1:
            raise ValueError(f"n_z must be a positive integer, got {self.n_z!r}")
        if not math.isfinite(self.f_c) or self.f_c <= 0:
            raise ValueError(f"carrier frequency must be positive, got {self.f_c!r}")
        if self.d is None:
            object.__setattr__(self, "d", self.wavelength / 2)
        elif not math.isfinite(self.d) or self.d <= 0:
            raise ValueError(f"element spacing must be positive, got {self.d!r}")

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.f_c

    @property
    def n(self) -> int:
        return self.n_y * self.n_z

    @property
    def aperture(self) -> float:
        """UPA diagonal."""
        return math.hypot((self.n_y - 1) * self.d, (self.n_z - 1) * self.d)

    @property
    def fresnel_distance(self) -> float:
        return 0.62 * math.sqrt(self.aperture ** 3 / self.wavelength)

    @property
    def rayleigh_distance(self) -> float:
        return 2 * self.aperture ** 2 / self.wavelength


def element_offsets(count: int) -> np.ndarray:
    return (2 * np.arange(count) - count + 1) / 2


def element_position(cfg: ArrayConfig, i: int, j: int) -> np.ndarray:
    if not 0 <= i < cfg.n_y or not 0 <= j < cfg.n_z:
        raise IndexError(f"element ({i}, {j}) outside {cfg.n_y}x{cfg.n_z} array")
    return np.array([0.0, (2 * i - cfg.n_y + 1) / 2 * cfg.d, (2 * j - cfg.n_z + 1) / 2 * cfg.d])


def element_positions(cfg: ArrayConfig) -> np.ndarray:
    """All element positions, shape (N, 3), in flattening order."""
    dy, dz = np.meshgrid(element_offsets(cfg.n_y) * cfg.d, element_offsets(cfg.n_z) * cfg.d, indexing="ij")
    pos = np.zeros((cfg.n, 3))
    pos[:, 1] = dy.ravel()
    pos[:, 2] = dz.ravel()
    return pos


@dataclass(frozen=True)
class SphericalPoint:
    r: float
    theta: float
    phi: float

    def __post_init__(self):
        if not math.isfinite(self.r) or self.r <= 0:
            raise ValueError(f"range must be positive, got {self.r!r}")
        if not 0 <= self.theta <= math.pi:
            raise ValueError(f"elevation must lie in [0, pi], got {self.theta!r}")
        if not -math.pi <= self.phi <= math.pi:
            raise ValueError(f"azimuth must lie in [-pi, pi], got {self.phi!r}")

    @classmethod
    def from_direction(cls, v: float, s: float, r: float) -> "SphericalPoint":
        """Build from v = cos(theta), s = sin(phi) and range r."""
        if abs(v) > 1 or abs(s) > 1:
            raise ValueError(f"direction cosines out of range: v={v!r}, s={s!r}")
        return cls(r=float(r), theta=math.acos(v), phi=math.asin(s))

    @property
    def u(self) -> float:
        return math.sin(self.theta) * math.sin(self.phi)

    @property
    def v(self) -> float:
        return math.cos(self.theta)

    def unit_direction(self) -> np.ndarray:
        st = math.sin(self.theta)
        return np.array([st * math.cos(self.phi), st * math.sin(self.phi), math.cos(self.theta)])

    def position(self) -> np.ndarray:
        return self.r * self.unit_direction()


def steering_vector(cfg: ArrayConfig, p: SphericalPoint) -> np.ndarray:
    """Exact spherical-wavefront array response, unit norm."""
    dist = np.linalg.norm(p.position() - element_positions(cfg), axis=1)
    k = 2 * np.pi / cfg.wavelength
    return np.exp(-1j * k * (dist - p.r)) / np.sqrt(cfg.n)


# ── Paths and channels ──

class PathKind(str, Enum):
    LOS = "los"
    NLOS = "nlos"


@dataclass(frozen=True)
class PathSpec:
    kind: PathKind
    point: SphericalPoint
    scatter_to_user_distance: float | None = None
    reflection_coeff: complex | None = None

    def __post_init__(self):
        if self.kind == PathKind.NLOS:
            if self.scatter_to_user_distance is None or self.scatter_to_user_distance <= 0:
                raise ValueError("NLoS path needs a positive scatterer-to-user distance")
            if self.reflection_coeff is None:
                raise ValueError("NLoS path needs a reflection coefficient")

    def gain(self, wavelength: float) -> complex:
        if self.kind == PathKind.LOS:
            return wavelength / (4 * np.pi * self.point.r)
        return wavelength / (4 * np.pi * self.point.r * self.scatter_to_user_distance) * self.reflection_coeff

    def travelled(self) -> float:
        """Total propagation length from the array center to the user."""
        if self.kind == PathKind.LOS:
            return self.point.r
        return self.point.r + self.scatter_to_user_distance

    def contribution(self, cfg: ArrayConfig) -> np.ndarray:
        phase = np.exp(-2j * np.pi * self.travelled() / cfg.wavelength)
        return np.sqrt(cfg.n) * self.gain(cfg.wavelength) * phase * steering_vector(cfg, self.point)


@dataclass(frozen=True)
class Channel:
    h: np.ndarray
    paths: tuple = field(default_factory=tuple)

    @property
    def energy(self) -> float:
        return float(np.vdot(self.h, self.h).real)


def generate_channel(cfg: ArrayConfig, paths: list[PathSpec]) -> Channel:
    if not paths:
        raise ValueError("a channel needs at least one path")
    h = np.zeros(cfg.n, dtype=complex)
    for path in paths:
        h += path.contribution(cfg)
    if not np.all(np.isfinite(h)):
        raise ValueError("channel has non-finite entries")
    return Channel(h=h, paths=tuple(paths))


# ── Scenario prior ──

def _check_range(name: str, lo: float, hi: float, low: float, high: float):
    if not (math.isfinite(lo) and math.isfinite(hi)):
        raise ValueError(f"{name} must be finite, got [{lo}, {hi}]")
    if lo > hi:
        raise ValueError(f"{name} is reversed: [{lo}, {hi}]")
    if lo < low or hi > high:
        raise ValueError(f"{name} must lie within [{low}, {high}], got [{lo}, {hi}]")


@dataclass(frozen=True)
class ScenarioPrior:
    """Independent uniform priors on v = cos(theta), s = sin(phi) and range r.

    Point masses (equal bounds) are allowed; reversed ranges are not.
    """
    v_range: tuple[float, float]
    s_range: tuple[float, float]
    r_range: tuple[float, float]
    num_paths: int = 1

    def __post_init__(self):
        _check_range("v_range", *self.v_range, -1.0, 1.0)
        _check_range("s_range", *self.s_range, -1.0, 1.0)
        _check_range("r_range", *self.r_range, 0.0, math.inf)
        if self.r_range[0] <= 0:
            raise ValueError(f"ranges must be positive, got r_range={self.r_range}")
        if int(self.num_paths) != self.num_paths or self.num_paths < 1:
            raise ValueError(f"num_paths must be >= 1, got {self.num_paths!r}")


def _draw_point(prior: ScenarioPrior, rng: np.random.Generator, r_range=None) -> SphericalPoint:
    v = rng.uniform(*prior.v_range)
    s = rng.uniform(*prior.s_range)
    r = rng.uniform(*(r_range or prior.r_range))
    return SphericalPoint.from_direction(v, s, r)


def sample_scenario(prior: ScenarioPrior, rng: np.random.Generator,
                    los_range: tuple[float, float] | None = None) -> list[PathSpec]:
    """First path is LoS at the user; the rest are NLoS via scatterers drawn from the same prior."""
    if los_range is not None:
        _check_range("los_range", *los_range, 0.0, math.inf)
        if los_range[0] <= 0:
            raise ValueError(f"LoS range must be positive, got {los_range}")
    user = _draw_point(prior, rng, los_range)
    paths = [PathSpec(kind=PathKind.LOS, point=user)]
    user_pos = user.position()
    for _ in range(prior.num_paths - 1):
        scatterer = _draw_point(prior, rng)
        hop = float(np.linalg.norm(user_pos - scatterer.position()))
        if hop <= 0:
            # coincident scatterer and user; redraw once from the same stream
            scatterer = _draw_point(prior, rng)
            hop = float(np.linalg.norm(user_pos - scatterer.position()))
        coeff = complex(rng.normal(scale=np.sqrt(0.5)), rng.normal(scale=np.sqrt(0.5)))
        paths.append(PathSpec(kind=PathKind.NLOS, point=scatterer,
                              scatter_to_user_distance=hop, reflection_coeff=coeff))
    return paths
