"""
Run configuration: presets, .env defaults, JSON documents and strict field validation.

Precedence: preset < environment < config file < command-line overrides.
"""
import copy
import json
import logging
import math
import os
import re
from dataclasses import dataclass, field, replace

import numpy as np

from beamtrain.baselines import SwfConfig
from beamtrain.channel_model import ArrayConfig, ScenarioPrior
from beamtrain.gp_lse import BETA_MODES, KERNEL_KINDS, LseSettings
from beamtrain.phase_retrieval import SpartaConfig

log = logging.getLogger(__name__)

METHODS = ("lse_sparta", "exhaustive", "r_sparta", "r_swf", "lse_sparta_no_rician", "lse_sparta_laplace")
AXES = ("snr", "paths", "distance")


class ConfigError(ValueError):
    pass


# ── Environment ──

def env_defaults() -> dict:
    """Process-level defaults from BEAMTRAIN_* variables (read at call time so .env can load first)."""
    return {
        "seed": require_int(os.environ.get("BEAMTRAIN_SEED", 7), 0, field="BEAMTRAIN_SEED"),
        "threads": require_int(os.environ.get("BEAMTRAIN_THREADS", 1), 1, 512, field="BEAMTRAIN_THREADS"),
        "out_dir": os.environ.get("BEAMTRAIN_OUT_DIR", "runs"),
        "log_level": os.environ.get("BEAMTRAIN_LOG_LEVEL", "INFO").upper(),
        "long_tests": bool(os.environ.get("BEAMTRAIN_LONG_TESTS")),
    }


# ── Field validation ──

def require_int(value, low: int | None = None, high: int | None = None, field: str = "value") -> int:
    """Parse an integer strictly; bools, fractional floats and out-of-range values are errors."""
    if isinstance(value, bool):
        raise ConfigError(f"{field}: expected an integer, got {value!r}")
    try:
        if isinstance(value, (float, np.floating)):
            if not math.isfinite(value) or not float(value).is_integer():
                raise ValueError
            v = int(value)
        elif isinstance(value, str):
            v = int(value.strip())
        else:
            v = int(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{field}: expected an integer, got {value!r}") from None
    if low is not None and v < low:
        raise ConfigError(f"{field}: must be >= {low}, got {v}")
    if high is not None and v > high:
        raise ConfigError(f"{field}: must be <= {high}, got {v}")
    return v


def require_float(value, low: float | None = None, high: float | None = None, field: str = "value",
                  low_open: bool = False) -> float:
    if isinstance(value, bool):
        raise ConfigError(f"{field}: expected a number, got {value!r}")
    try:
        v = float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{field}: expected a number, got {value!r}") from None
    if math.isnan(v) or math.isinf(v):
        raise ConfigError(f"{field}: must be finite, got {value!r}")
    if low is not None and (v <= low if low_open else v < low):
        raise ConfigError(f"{field}: must be {'>' if low_open else '>='} {low}, got {v}")
    if high is not None and v > high:
        raise ConfigError(f"{field}: must be <= {high}, got {v}")
    return v


def require_range(value, low: float | None = None, high: float | None = None,
                  field: str = "value") -> tuple[float, float]:
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise ConfigError(f"{field}: expected a [low, high] pair, got {value!r}")
    lo = require_float(value[0], low, high, field=f"{field}[0]")
    hi = require_float(value[1], low, high, field=f"{field}[1]")
    if lo > hi:
        raise ConfigError(f"{field}: reversed range [{lo}, {hi}]")
    return lo, hi


def require_choice(value, choices, field: str = "value"):
    if value not in choices:
        raise ConfigError(f"{field}: must be one of {list(choices)}, got {value!r}")
    return value


def require_bool(value, field: str = "value") -> bool:
    if not isinstance(value, bool):
        raise ConfigError(f"{field}: expected true/false, got {value!r}")
    return value


def _optional(fn, value, *args, **kwargs):
    return None if value is None else fn(value, *args, **kwargs)


# ── Presets ──

DESK_PRESET = {
    "array": {"n_y": 32, "n_z": 8, "f_c": 28e9, "d": None},
    "prior": {"v_range": [-0.5, 0.5], "s_range": [-0.5, 0.5], "r_range": ["fresnel", "rayleigh"]},
    "num_paths": 6,
    "snr_db": 0.0,
    "methods": ["lse_sparta", "exhaustive", "r_sparta", "r_swf"],
    "trials": 100,
    "seed": None,
    "support_factor": 4.0,
    "sweep": {
        "axis": "snr",
        "snr_grid_db": [-15, -10, -5, 0, 5, 10, 15],
        "path_grid": [2, 4, 6, 8, 10, 12],
        "distance_grid_m": [0.6, 1.2, 1.8, 2.4, 3.0, 3.6, 4.2, 4.8],
        "distance_paths": 4,
    },
    "budgets": {"t1": None, "m2": None},
    "lse": {
        "warmup_fraction": 0.1, "tau_quantile": 0.9, "tau_floor": 3.0, "eps_fraction": 0.1,
        "beta_mode": "constant", "beta": 9.0, "b_f": 1.0, "delta": 0.05, "delta_bd": 0.05, "c1": 1.0,
        "sigma_eps_sq": None, "rescale_factor": 2.0,
    },
    "kernel": {"alpha": 0.5, "kappa_u": 1.0, "kappa_v": 1.0, "ell_u": None, "ell_v": None},
    "sparta": {
        "k": None, "mu": 1.0, "trunc_gamma": 0.7, "init_card": None, "max_iters": 400, "tol": 1e-7,
        "power_iters": 50, "power_tol": 1e-8, "screen_support": True, "max_halvings": 30,
    },
    "swf": {"mu": 0.2, "max_iters": 400, "tol": 1e-7},
    "ablation": {"disable_rician": False, "kernel": "cross"},
}

FULL_SCALE_PRESET = copy.deepcopy(DESK_PRESET)
FULL_SCALE_PRESET["array"].update({"n_y": 128, "n_z": 16})
FULL_SCALE_PRESET["trials"] = 500
FULL_SCALE_PRESET["sweep"]["distance_grid_m"] = [10, 20, 30, 40, 50, 60, 70, 80]


def _merge(base: dict, update: dict, path: str = ""):
    """Overlay `update` onto `base` in place; keys unknown to `base` are errors."""
    if not isinstance(update, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(update).__name__}")
    for key, value in update.items():
        dotted = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {dotted}")
        if isinstance(base[key], dict):
            _merge(base[key], value, dotted)
        else:
            base[key] = value


def _set_dotted(doc: dict, dotted: str, value):
    parts = dotted.split(".")
    node = doc
    for i, part in enumerate(parts[:-1]):
        if not isinstance(node.get(part), dict):
            raise ConfigError(f"unknown config key: {'.'.join(parts[:i + 1])}")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key: {dotted}")
    node[parts[-1]] = value


# ── Range anchors ──

_ANCHOR = re.compile(r"^(fresnel|rayleigh)(?:\s*([*/])\s*(\d+(?:\.\d+)?))?$")


def resolve_distance(value, cfg: ArrayConfig, field: str = "distance") -> float:
    """Metres, or 'fresnel' / 'rayleigh' optionally scaled as 'rayleigh/20' or 'fresnel*2'."""
    if isinstance(value, str):
        match = _ANCHOR.match(value.strip().lower())
        if not match:
            raise ConfigError(f"{field}: unrecognized distance {value!r}")
        base = cfg.fresnel_distance if match.group(1) == "fresnel" else cfg.rayleigh_distance
        if match.group(2):
            k = float(match.group(3))
            if k <= 0:
                raise ConfigError(f"{field}: scale must be positive in {value!r}")
            base = base * k if match.group(2) == "*" else base / k
        return base
    return require_float(value, 0.0, field=field, low_open=True)


# ── Typed configuration ──

@dataclass(frozen=True)
class KernelSpec:
    kind: str = "cross"
    alpha: float = 0.5
    kappa_u: float = 1.0
    kappa_v: float = 1.0
    ell_u: float | None = None
    ell_v: float | None = None


@dataclass(frozen=True)
class SimConfig:
    array: ArrayConfig
    prior: ScenarioPrior
    methods: tuple
    axis: str
    snr_grid_db: tuple
    path_grid: tuple
    distance_grid_m: tuple
    distance_paths: int
    snr_db: float
    trials: int
    seed: int
    t1: int
    m2: int
    support_factor: float
    kernel: KernelSpec
    lse: LseSettings
    sparta: SpartaConfig
    sparta_k: int | None
    swf: SwfConfig
    disable_rician: bool = False
    echo: dict = field(default_factory=dict, compare=False)

    @property
    def axis_values(self) -> tuple:
        return {"snr": self.snr_grid_db, "paths": self.path_grid, "distance": self.distance_grid_m}[self.axis]

    def with_axis(self, axis: str) -> "SimConfig":
        require_choice(axis, AXES, "sweep.axis")
        echo = copy.deepcopy(self.echo)
        if "sweep" in echo:
            echo["sweep"]["axis"] = axis
        return replace(self, axis=axis, echo=echo)

    def with_methods(self, methods) -> "SimConfig":
        methods = tuple(require_choice(m, METHODS, "methods") for m in methods)
        echo = copy.deepcopy(self.echo)
        echo["methods"] = list(methods)
        return replace(self, methods=methods, echo=echo)


def _build(doc: dict) -> SimConfig:
    a = doc["array"]
    array = ArrayConfig(
        n_y=require_int(a["n_y"], 1, field="array.n_y"),
        n_z=require_int(a["n_z"], 1, field="array.n_z"),
        f_c=require_float(a["f_c"], 0.0, field="array.f_c", low_open=True),
        d=_optional(require_float, a["d"], 0.0, field="array.d", low_open=True),
    )

    p = doc["prior"]
    r_pair = p["r_range"]
    if not isinstance(r_pair, (list, tuple)) or len(r_pair) != 2:
        raise ConfigError(f"prior.r_range: expected a [low, high] pair, got {r_pair!r}")
    r_range = (resolve_distance(r_pair[0], array, "prior.r_range[0]"),
               resolve_distance(r_pair[1], array, "prior.r_range[1]"))
    if r_range[0] > r_range[1]:
        raise ConfigError(f"prior.r_range: reversed range {r_range}")
    num_paths = require_int(doc["num_paths"], 1, field="num_paths")
    prior = ScenarioPrior(
        v_range=require_range(p["v_range"], -1.0, 1.0, "prior.v_range"),
        s_range=require_range(p["s_range"], -1.0, 1.0, "prior.s_range"),
        r_range=r_range,
        num_paths=num_paths,
    )

    methods = doc["methods"]
    if not isinstance(methods, list) or not methods:
        raise ConfigError("methods: expected a nonempty list")
    methods = tuple(require_choice(m, METHODS, "methods") for m in methods)
    if len(set(methods)) != len(methods):
        raise ConfigError("methods: duplicate entries")

    s = doc["sweep"]
    axis = require_choice(s["axis"], AXES, "sweep.axis")
    snr_grid = tuple(require_float(x, -100.0, 100.0, field="sweep.snr_grid_db") for x in s["snr_grid_db"])
    path_grid = tuple(require_int(x, 1, field="sweep.path_grid") for x in s["path_grid"])
    dist_grid = tuple(resolve_distance(x, array, "sweep.distance_grid_m") for x in s["distance_grid_m"])
    for name, grid in (("snr_grid_db", snr_grid), ("path_grid", path_grid), ("distance_grid_m", dist_grid)):
        if not grid:
            raise ConfigError(f"sweep.{name}: must not be empty")
        if len(set(grid)) != len(grid):
            raise ConfigError(f"sweep.{name}: duplicate axis values")

    b = doc["budgets"]
    t1 = require_int(b["t1"] if b["t1"] is not None else array.n, 1, field="budgets.t1")
    m2 = require_int(b["m2"] if b["m2"] is not None else array.n, 1, field="budgets.m2")

    k = doc["kernel"]
    kernel = KernelSpec(
        kind=require_choice(doc["ablation"]["kernel"], KERNEL_KINDS, "ablation.kernel"),
        alpha=require_float(k["alpha"], 0.0, 1.0, field="kernel.alpha"),
        kappa_u=require_float(k["kappa_u"], 0.0, field="kernel.kappa_u", low_open=True),
        kappa_v=require_float(k["kappa_v"], 0.0, field="kernel.kappa_v", low_open=True),
        ell_u=_optional(require_float, k["ell_u"], 0.0, field="kernel.ell_u", low_open=True),
        ell_v=_optional(require_float, k["ell_v"], 0.0, field="kernel.ell_v", low_open=True),
    )

    ls = doc["lse"]
    lse = LseSettings(
        warmup_fraction=require_float(ls["warmup_fraction"], 0.0, 1.0, field="lse.warmup_fraction", low_open=True),
        tau_quantile=require_float(ls["tau_quantile"], 0.0, 1.0, field="lse.tau_quantile"),
        tau_floor=require_float(ls["tau_floor"], 0.0, field="lse.tau_floor"),
        eps_fraction=require_float(ls["eps_fraction"], 0.0, field="lse.eps_fraction"),
        beta_mode=require_choice(ls["beta_mode"], BETA_MODES, "lse.beta_mode"),
        beta=require_float(ls["beta"], 0.0, field="lse.beta", low_open=True),
        b_f=require_float(ls["b_f"], 0.0, field="lse.b_f", low_open=True),
        delta=require_float(ls["delta"], 0.0, 0.999999, field="lse.delta", low_open=True),
        delta_bd=require_float(ls["delta_bd"], 0.0, 0.999999, field="lse.delta_bd", low_open=True),
        c1=require_float(ls["c1"], 0.0, field="lse.c1", low_open=True),
        sigma_eps_sq=_optional(require_float, ls["sigma_eps_sq"], 0.0, field="lse.sigma_eps_sq", low_open=True),
        rescale_factor=require_float(ls["rescale_factor"], 1.0, field="lse.rescale_factor"),
    )

    sp = doc["sparta"]
    sparta = SpartaConfig(
        k=1,
        mu=require_float(sp["mu"], 0.0, field="sparta.mu", low_open=True),
        trunc_gamma=require_float(sp["trunc_gamma"], 0.0, field="sparta.trunc_gamma"),
        init_card=_optional(require_int, sp["init_card"], 1, field="sparta.init_card"),
        max_iters=require_int(sp["max_iters"], 0, field="sparta.max_iters"),
        tol=require_float(sp["tol"], 0.0, field="sparta.tol", low_open=True),
        power_iters=require_int(sp["power_iters"], 1, field="sparta.power_iters"),
        power_tol=require_float(sp["power_tol"], 0.0, field="sparta.power_tol", low_open=True),
        screen_support=require_bool(sp["screen_support"], "sparta.screen_support"),
        max_halvings=require_int(sp["max_halvings"], 0, field="sparta.max_halvings"),
    )
    sw = doc["swf"]
    swf = SwfConfig(
        mu=require_float(sw["mu"], 0.0, field="swf.mu", low_open=True),
        max_iters=require_int(sw["max_iters"], 0, field="swf.max_iters"),
        tol=require_float(sw["tol"], 0.0, field="swf.tol", low_open=True),
        max_halvings=sparta.max_halvings,
    )

    echo = copy.deepcopy(doc)
    echo["resolved"] = {"d": array.d, "wavelength": array.wavelength, "r_range_m": list(r_range),
                        "fresnel_m": array.fresnel_distance, "rayleigh_m": array.rayleigh_distance,
                        "distance_grid_m": list(dist_grid), "t1": t1, "m2": m2}
    return SimConfig(
        array=array, prior=prior, methods=methods, axis=axis,
        snr_grid_db=snr_grid, path_grid=path_grid, distance_grid_m=dist_grid,
        distance_paths=require_int(s["distance_paths"], 1, field="sweep.distance_paths"),
        snr_db=require_float(doc["snr_db"], -100.0, 100.0, field="snr_db"),
        trials=require_int(doc["trials"], 1, field="trials"),
        seed=require_int(doc["seed"], 0, 2 ** 64 - 1, field="seed"),
        t1=t1, m2=m2,
        support_factor=require_float(doc["support_factor"], 1.0, field="support_factor"),
        kernel=kernel, lse=lse, sparta=sparta,
        sparta_k=_optional(require_int, sp["k"], 1, field="sparta.k"),
        swf=swf,
        disable_rician=require_bool(doc["ablation"]["disable_rician"], "ablation.disable_rician"),
        echo=echo,
    )


def load_config(path: str | os.PathLike | None = None, *, full_scale: bool = False,
                overrides: dict | None = None) -> SimConfig:
    """Build a SimConfig from a preset, the environment, an optional JSON file and dotted-key overrides."""
    doc = copy.deepcopy(FULL_SCALE_PRESET if full_scale else DESK_PRESET)
    doc["seed"] = env_defaults()["seed"]
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON in {path}: {e}") from e
        _merge(doc, data)
        log.debug("loaded config %s", path)
    for dotted, value in (overrides or {}).items():
        if value is not None:
            _set_dotted(doc, dotted, value)
    try:
        return _build(doc)
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
