"""
Experiment harness: two-stage beam training end to end, seeded Monte-Carlo
trials, sweeps over SNR / path count / user distance, CSV persistence and
the quick numeric self-checks behind `cli.py validate`.
"""
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import linalg

from beamtrain.baselines import exhaustive_dft, r_sparta_full, r_swf_full
from beamtrain.beamspace import BeamGrid, Codebook, DftSounder, expected_sparsity, sparsity_monte_carlo
from beamtrain.channel_model import (
    ArrayConfig, Channel, ScenarioPrior, generate_channel, sample_scenario, trial_rng,
)
from beamtrain.gp_lse import (
    GpPosterior, KernelParams, NoiseModel, Stage1Result, bounded_noise_threshold, debias_power,
    dense_posterior, discover_support, lengthscales_from_prior,
)
from beamtrain.phase_retrieval import (
    Estimate, build_sensing, error_decomposition, observe, principal_eigenvector,
    pseudo_amplitude_bound_check, rician_denoise, solve,
)
from beamtrain.settings import SimConfig

log = logging.getLogger(__name__)

REPORT_COLUMNS = ["axis", "method", "mean_rho", "stderr", "n"]


# ── Metrics ──

def snr_to_noise_power(ch: Channel, snr_db: float) -> float:
    """sigma^2 = ||h||^2 / (N * 10^(snr_db / 10))."""
    if ch.energy == 0:
        raise ValueError("cannot set noise power from a zero channel")
    return ch.energy / (ch.h.size * 10 ** (snr_db / 10))


def correlation(h: np.ndarray, h_hat: np.ndarray) -> tuple[float, bool]:
    """(|h^H h_hat| / (||h|| ||h_hat||), degenerate). A zero argument gives (0.0, True)."""
    nh, ne = np.linalg.norm(h), np.linalg.norm(h_hat)
    if nh == 0 or ne == 0:
        return 0.0, True
    return float(min(1.0, abs(np.vdot(h, h_hat)) / (nh * ne))), False


# ── Two-stage training ──

@lru_cache(maxsize=8)
def codebook_for(array: ArrayConfig) -> Codebook:
    return Codebook(array)


def stage2_sparsity(cfg: SimConfig, prior: ScenarioPrior) -> int:
    """Configured k, or max(round(E[K]), L); capped at N."""
    if cfg.sparta_k is not None:
        return min(cfg.sparta_k, cfg.array.n)
    expected = expected_sparsity(cfg.array, prior).expected_k
    return int(min(cfg.array.n, max(round(expected), prior.num_paths, 1)))


def support_cap(cfg: SimConfig, k: int) -> int:
    return int(min(cfg.array.n, math.ceil(cfg.support_factor * k)))


def kernel_params(cfg: SimConfig, prior: ScenarioPrior, kind: str | None = None) -> KernelParams:
    if cfg.kernel.ell_u is not None and cfg.kernel.ell_v is not None:
        ell_u, ell_v = cfg.kernel.ell_u, cfg.kernel.ell_v
    else:
        ell_u, ell_v = lengthscales_from_prior(cfg.array, prior, cfg.kernel.kappa_u, cfg.kernel.kappa_v)
        ell_u = cfg.kernel.ell_u or ell_u
        ell_v = cfg.kernel.ell_v or ell_v
    return KernelParams(alpha=cfg.kernel.alpha, ell_u=ell_u, ell_v=ell_v, kind=kind or cfg.kernel.kind)


@dataclass
class TwoStageResult:
    stage1: Stage1Result
    estimate: Estimate
    probes_used: int
    stage2_budget: int

    @property
    def support(self) -> np.ndarray:
        return self.stage1.support.indices

    @property
    def h_hat(self) -> np.ndarray:
        return self.estimate.h_hat

    @property
    def v_hat(self) -> np.ndarray:
        return self.estimate.v_hat


def beam_train(channel: Channel, codebook: Codebook, sigma_sq: float, cfg: SimConfig,
               rng: np.random.Generator, *, prior: ScenarioPrior | None = None,
               kernel_kind: str | None = None, debias: bool | None = None) -> TwoStageResult:
    """Stage I support discovery then Stage II masked sensing on that support.

    Stage I probes left unused when LSE terminates early are spent in Stage II,
    so the total is always t1 + m2.
    """
    prior = prior or cfg.prior
    debias = (not cfg.disable_rician) if debias is None else debias
    k = stage2_sparsity(cfg, prior)
    params = kernel_params(cfg, prior, kernel_kind)

    sounder = DftSounder(codebook, channel, sigma_sq, rng, budget=cfg.t1)
    stage1 = discover_support(sounder, params, cfg.lse, sigma_sq, cfg.t1, support_cap(cfg, k), debias=debias)

    m = cfg.m2 + (cfg.t1 - stage1.probes_used)
    sensing = build_sensing(codebook, stage1.support.indices, m, rng)
    amps = rician_denoise(observe(channel, sensing, sigma_sq, rng), sigma_sq if debias else 0.0)
    est = solve(sensing, amps.psi, replace(cfg.sparta, k=min(k, sensing.dim)))
    return TwoStageResult(stage1=stage1, estimate=est, probes_used=sounder.probes_used + sensing.count,
                          stage2_budget=m)


# ── Trials ──

@dataclass
class TrialResult:
    method: str
    axis: str
    axis_value: float
    trial: int
    rho: float
    gain: float
    probes_used: int
    budget: int
    support_size: int
    stage1_steps: int
    stage2_iters: int
    wall_time: float
    degenerate: bool = False
    flags: str = ""
    error: str | None = None


def _scenario(cfg: SimConfig, axis_value) -> tuple[ScenarioPrior, float, tuple | None]:
    """(prior, snr_db, pinned LoS range) for one point of the active sweep axis."""
    if cfg.axis == "snr":
        return cfg.prior, float(axis_value), None
    if cfg.axis == "paths":
        return replace(cfg.prior, num_paths=int(axis_value)), cfg.snr_db, None
    r = float(axis_value)
    return replace(cfg.prior, num_paths=cfg.distance_paths), cfg.snr_db, (r, r)


def _execute(cfg: SimConfig, method: str, axis_value, trial_idx: int):
    prior, snr_db, los_range = _scenario(cfg, axis_value)
    ch = generate_channel(cfg.array, sample_scenario(prior, trial_rng(cfg.seed, "channel", cfg.axis,
                                                                        axis_value, trial_idx), los_range))
    sigma_sq = snr_to_noise_power(ch, snr_db)
    rng = trial_rng(cfg.seed, "probe", method, cfg.axis, axis_value, trial_idx)
    cb = codebook_for(cfg.array)
    debias = not cfg.disable_rician
    budget = cfg.t1 + cfg.m2
    detail = None

    if method in ("lse_sparta", "lse_sparta_no_rician", "lse_sparta_laplace"):
        detail = beam_train(
            ch, cb, sigma_sq, cfg, rng, prior=prior,
            kernel_kind="laplace_product" if method == "lse_sparta_laplace" else None,
            debias=False if method == "lse_sparta_no_rician" else debias,
        )
        h_hat, probes = detail.h_hat, detail.probes_used
        support_size, stage1_steps = len(detail.stage1.support), detail.stage1.probes_used
        iters, flags = detail.estimate.iters_used, detail.estimate.flags
        if detail.stage1.support.flagged:
            flags = flags + ("argmax_support",)
    elif method == "exhaustive":
        res = exhaustive_dft(ch, cb, sigma_sq, rng)
        h_hat, probes, budget = res.h_hat, res.probes_used, cb.size
        support_size, stage1_steps, iters, flags = 1, 0, 0, ()
    else:
        sparta = replace(cfg.sparta, k=stage2_sparsity(cfg, prior))
        if method == "r_sparta":
            res = r_sparta_full(ch, cb, sigma_sq, budget, rng, sparta, debias=debias)
        else:
            res = r_swf_full(ch, cb, sigma_sq, budget, rng, sparta, cfg.swf, debias=debias)
        h_hat, probes = res.h_hat, res.probes_used
        support_size, stage1_steps = cb.size, 0
        iters, flags = res.metadata["iters"], res.metadata["flags"]

    if probes > budget:
        raise RuntimeError(f"{method} used {probes} probes over a budget of {budget}")
    rho, degenerate = correlation(ch.h, h_hat)
    result = TrialResult(method=method, axis=cfg.axis, axis_value=axis_value, trial=trial_idx, rho=rho,
                         gain=rho ** 2, probes_used=probes, budget=budget, support_size=support_size,
                         stage1_steps=stage1_steps, stage2_iters=iters, wall_time=0.0,
                         degenerate=degenerate, flags=";".join(flags))
    return result, detail


def run_trial(cfg: SimConfig, method: str, axis_value, trial_idx: int) -> TrialResult:
    """One seeded trial; any exception is recorded on the result instead of raised."""
    start = time.perf_counter()
    try:
        result, _ = _execute(cfg, method, axis_value, trial_idx)
    except Exception as e:
        log.warning("trial %d (%s @ %s=%s) failed: %s", trial_idx, method, cfg.axis, axis_value, e)
        result = TrialResult(method=method, axis=cfg.axis, axis_value=axis_value, trial=trial_idx,
                             rho=math.nan, gain=math.nan, probes_used=0, budget=cfg.t1 + cfg.m2,
                             support_size=0, stage1_steps=0, stage2_iters=0, wall_time=0.0,
                             error=f"{type(e).__name__}: {e}")
    result.wall_time = time.perf_counter() - start
    return result


def trace_trial(cfg: SimConfig, axis_value, trial_idx: int,
                method: str = "lse_sparta") -> tuple[TrialResult, TwoStageResult]:
    """Like run_trial for a two-stage method, but errors propagate and the Stage I/II details come back."""
    if not method.startswith("lse_sparta"):
        raise ValueError(f"traces are only produced by two-stage methods, got {method!r}")
    start = time.perf_counter()
    result, detail = _execute(cfg, method, axis_value, trial_idx)
    result.wall_time = time.perf_counter() - start
    return result, detail


# ── Sweeps ──

@dataclass
class SweepReport:
    axis: str
    axis_values: tuple
    methods: tuple
    table: pd.DataFrame
    trials: list = field(default_factory=list)
    seed: int = 0
    config_echo: dict = field(default_factory=dict)

    @property
    def failures(self) -> int:
        return sum(1 for r in self.trials if r.error is not None)

    @property
    def failure_rate(self) -> float:
        return self.failures / len(self.trials) if self.trials else 0.0

    def trials_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(r) for r in self.trials])


def aggregate(trials: list, axis_values, methods) -> pd.DataFrame:
    """Mean rho and standard error per (axis value, method) over successful trials, in sweep order."""
    frame = pd.DataFrame([asdict(r) for r in trials])
    ok = frame[frame["error"].isna()] if not frame.empty else frame
    rows = []
    for x in axis_values:
        for m in methods:
            rhos = ok.loc[(ok["axis_value"] == x) & (ok["method"] == m), "rho"].to_numpy(dtype=float) \
                if not ok.empty else np.array([])
            n = int(rhos.size)
            mean = float(rhos.mean()) if n else math.nan
            stderr = float(rhos.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
            rows.append({"axis": x, "method": m, "mean_rho": mean, "stderr": stderr, "n": n})
    return pd.DataFrame(rows, columns=REPORT_COLUMNS)


def _run_task(task) -> TrialResult:
    return run_trial(*task)


def run_sweep(cfg: SimConfig, threads: int = 1) -> SweepReport:
    """axis x methods x trials; results are reduced in task order regardless of worker count."""
    if threads < 1:
        raise ValueError(f"threads must be >= 1, got {threads}")
    results = []
    if threads == 1:
        for x in cfg.axis_values:
            for m in cfg.methods:
                results.extend(run_trial(cfg, m, x, t) for t in range(cfg.trials))
            log.info("%s=%s done (%d trials x %d methods)", cfg.axis, x, cfg.trials, len(cfg.methods))
    else:
        tasks = [(cfg, m, x, t) for x in cfg.axis_values for m in cfg.methods for t in range(cfg.trials)]
        chunk = max(1, len(tasks) // (threads * 8))
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_run_task, tasks, chunksize=chunk))
        log.info("%s sweep done: %d trials on %d workers", cfg.axis, len(tasks), threads)

    report = SweepReport(axis=cfg.axis, axis_values=cfg.axis_values, methods=cfg.methods,
                         table=aggregate(results, cfg.axis_values, cfg.methods), trials=results,
                         seed=cfg.seed, config_echo=cfg.echo)
    if report.failures:
        log.warning("%d of %d trials failed", report.failures, len(results))
    return report


# ── Persistence ──

def persist(report: SweepReport, out_dir, per_trial: bool = False, plot_data: bool = False) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"report": out / "report.csv", "config_echo": out / "config_echo.json"}
    report.table.to_csv(paths["report"], index=False)
    echo = {"seed": report.seed, "axis": report.axis, "config": report.config_echo}
    paths["config_echo"].write_text(json.dumps(echo, indent=2, sort_keys=True, default=str) + "\n",
                                    encoding="utf-8")
    if per_trial:
        paths["trials"] = out / "trials.csv"
        report.trials_frame().to_csv(paths["trials"], index=False)
    if plot_data:
        paths["plot_data"] = out / "plot_data.csv"
        plot = report.table.rename(columns={"axis": "x", "mean_rho": "mean"})[["method", "x", "mean", "stderr"]]
        plot.to_csv(paths["plot_data"], index=False)
    for path in paths.values():
        log.info("wrote %s", path)
    return paths


def read_report(path) -> pd.DataFrame:
    return pd.read_csv(path, float_precision="round_trip")


def write_traces(result: TwoStageResult, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"stage1": out / "stage1_trace.csv", "stage2": out / "stage2_trace.csv"}
    pd.DataFrame(result.stage1.trace).to_csv(paths["stage1"], index=False)
    pd.DataFrame(result.estimate.trace).to_csv(paths["stage2"], index=False)
    return paths


def sparsity_report(array: ArrayConfig, prior: ScenarioPrior, samples: int, seed: int) -> dict:
    est = expected_sparsity(array, prior)
    mc = sparsity_monte_carlo(array, prior, samples, trial_rng(seed, "sparsity"))
    out = est.as_dict()
    out.update({"monte_carlo_k": mc, "relative_gap": abs(est.expected_k - mc) / mc if mc else math.nan,
                "samples": samples, "r_range_m": list(prior.r_range), "num_paths": prior.num_paths})
    return out


# ── Self-checks ──

@dataclass(frozen=True)
class CheckResult:
    name: str
    ok: bool
    value: float
    threshold: float
    detail: str = ""


def _complex_normal(rng: np.random.Generator, *shape) -> np.ndarray:
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / math.sqrt(2)


def _check_unitarity(rng) -> CheckResult:
    cb = Codebook(ArrayConfig(8, 4, 28e9))
    h = _complex_normal(rng, cb.size)
    s = cb.to_beamspace(h)
    f = cb.dense()
    err = max(float(np.max(np.abs(cb.from_beamspace(s) - h))),
              abs(np.linalg.norm(s) - np.linalg.norm(h)),
              float(np.max(np.abs(f @ f.conj().T - np.eye(cb.size)))))
    return CheckResult("codebook_unitarity", err < 1e-10, err, 1e-10)


def _check_gp_oracle(rng) -> CheckResult:
    grid = BeamGrid(6, 6)
    params = KernelParams(alpha=0.5, ell_u=0.3, ell_v=0.3)
    post = GpPosterior(grid, params, 0.05)
    probes = [(int(i), float(z)) for i, z in zip(rng.integers(0, grid.size, 20), rng.standard_normal(20))]
    for i, z in probes:
        post = post.update(i, z)
    mean, var = dense_posterior(grid, params, probes, 0.05)
    err = max(float(np.max(np.abs(post.mean - mean))), float(np.max(np.abs(post.variance - np.clip(var, 0, 1)))))
    return CheckResult("gp_oracle", err < 1e-8, err, 1e-8)


def _check_sparsity_oracle(rng) -> CheckResult:
    array = ArrayConfig(128, 16, 28e9)
    prior = ScenarioPrior((-0.5, 0.5), (-0.5, 0.5),
                          (array.fresnel_distance, array.rayleigh_distance / 20), num_paths=6)
    closed = expected_sparsity(array, prior).expected_k
    mc = sparsity_monte_carlo(array, prior, 1_000_000, rng)
    gap = abs(closed - mc) / mc
    return CheckResult("sparsity_oracle", gap < 0.02, gap, 0.02, f"closed={closed:.4f} mc={mc:.4f}")


def _check_debias(rng) -> CheckResult:
    c, sigma_sq, n = 0.7 + 0.2j, 0.5, 100_000
    y = c + _complex_normal(rng, n) * math.sqrt(sigma_sq)
    z = debias_power(y, NoiseModel(sigma_sq=sigma_sq))
    f = abs(c) ** 2
    band = 3 * math.sqrt((sigma_sq ** 2 + 2 * sigma_sq * f) / n)
    gap = abs(float(z.mean()) - f)
    return CheckResult("debias_unbiased", gap <= band, gap, band)


def _check_noise_coverage(rng) -> CheckResult:
    f, sigma_sq, n = 4.0, 1.0, 20_000
    bound = bounded_noise_threshold(NoiseModel(sigma_sq=sigma_sq, f_max=f, delta_bd=0.05), 1)
    y = 2.0 + _complex_normal(rng, n) * math.sqrt(sigma_sq)
    rate = float(np.mean(np.abs(debias_power(y, NoiseModel(sigma_sq=sigma_sq)) - f) > bound))
    return CheckResult("noise_bound_coverage", rate <= 0.05, rate, 0.05)


def _check_error_decomposition(rng) -> CheckResult:
    cb = Codebook(ArrayConfig(8, 4, 28e9))
    worst = 0.0
    for _ in range(50):
        h = _complex_normal(rng, cb.size)
        support = np.sort(rng.choice(cb.size, size=int(rng.integers(1, cb.size)), replace=False))
        s_hat = _complex_normal(rng, support.size)
        total, inside, tail = error_decomposition(cb, h, support, s_hat)
        worst = max(worst, abs(total - inside - tail))
    return CheckResult("error_decomposition", worst < 1e-9, worst, 1e-9)


def _check_power_iteration(rng) -> CheckResult:
    q, _ = np.linalg.qr(_complex_normal(rng, 16, 16))
    eig = np.concatenate([[10.0], rng.uniform(0.0, 1.0, 15)])
    mat = (q * eig) @ q.conj().T
    vec, _ = principal_eigenvector(mat, iters=500, tol=1e-12)
    _, vecs = linalg.eigh(mat)
    align = abs(np.vdot(vecs[:, -1], vec))
    return CheckResult("power_iteration", align >= 1 - 1e-6, align, 1 - 1e-6)


def _check_pseudo_amplitude(rng) -> CheckResult:
    a = rng.uniform(0.05, 5.0, 10_000)
    eps = rng.uniform(-0.5, 0.5, 10_000) * a ** 2
    bad = sum(not pseudo_amplitude_bound_check(float(ai), float(ei)) for ai, ei in zip(a, eps))
    return CheckResult("pseudo_amplitude_bound", bad == 0, float(bad), 0.0)


_CHECKS = (
    _check_unitarity, _check_gp_oracle, _check_sparsity_oracle, _check_debias, _check_noise_coverage,
    _check_error_decomposition, _check_power_iteration, _check_pseudo_amplitude,
)


def invariant_checks(seed: int) -> list[CheckResult]:
    results = []
    for check in _CHECKS:
        name = check.__name__.removeprefix("_check_")
        try:
            res = check(trial_rng(seed, "validate", name))
        except Exception as e:
            log.warning("check %s raised: %s", name, e)
            res = CheckResult(name, False, math.nan, math.nan, f"{type(e).__name__}: {e}")
        log.debug("%s: ok=%s value=%.3g", res.name, res.ok, res.value)
        results.append(res)
    return results
