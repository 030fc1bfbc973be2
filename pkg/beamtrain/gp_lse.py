"""
Stage I support discovery over the 2D DFT grid.

Debiased power feedback drives a GP posterior with a cross-pattern Laplace
kernel; a level-set loop classifies every beam as above (H) or below (L) a
power threshold, probing the most ambiguous undecided beam each step. When the
budget runs out with beams still undecided, a Top-K patch on the posterior
mean picks the support.
"""
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy import linalg

from beamtrain.beamspace import BeamGrid, DftSounder, inverse_range_moment, uniform_moment
from beamtrain.channel_model import ArrayConfig, ScenarioPrior

log = logging.getLogger(__name__)

KERNEL_KINDS = ("cross", "laplace_product")
BETA_MODES = ("constant", "info_gain", "theorem6")

UNDECIDED, HIGH, LOW = 0, 1, 2
DONE = None

JITTER_START = 1e-10
JITTER_MAX = 1e-6
SIGMA_EPS_FLOOR = 1e-6
_PIVOT_FLOOR = 1e-14


# ── Noise ──

@dataclass(frozen=True)
class NoiseModel:
    sigma_sq: float
    f_max: float = 0.0
    delta_bd: float = 0.05
    c1: float = 1.0

    def __post_init__(self):
        if self.sigma_sq < 0:
            raise ValueError(f"noise power must be nonnegative, got {self.sigma_sq}")
        if self.f_max < 0:
            raise ValueError(f"f_max must be nonnegative, got {self.f_max}")
        if not 0 < self.delta_bd < 1:
            raise ValueError(f"delta_bd must lie in (0, 1), got {self.delta_bd}")
        if self.c1 <= 0:
            raise ValueError(f"c1 must be positive, got {self.c1}")


def debias_power(y, noise: NoiseModel):
    """|y|^2 - sigma^2. Negative values are kept."""
    return np.abs(y) ** 2 - noise.sigma_sq


def bounded_noise_threshold(noise: NoiseModel, t: int) -> float:
    """High-probability bound B_t on the debiased-power residual at step t."""
    if t < 1:
        raise ValueError(f"t must be >= 1, got {t}")
    if not 0 < noise.delta_bd < 1:
        raise ValueError(f"delta_bd must lie in (0, 1), got {noise.delta_bd}")
    lg = max(math.log(math.pi ** 2 * t ** 2 / (12 * noise.delta_bd)), 0.0)
    s2 = noise.sigma_sq
    return noise.c1 * (s2 * lg + math.sqrt((s2 ** 2 + 2 * s2 * noise.f_max) * lg))


# ── Kernel ──

@dataclass(frozen=True)
class KernelParams:
    alpha: float = 0.5
    ell_u: float = 0.1
    ell_v: float = 0.1
    kind: str = "cross"

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ValueError(f"kernel kind must be one of {KERNEL_KINDS}, got {self.kind!r}")
        if not 0 <= self.alpha <= 1:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not (self.ell_u > 0 and self.ell_v > 0):
            raise ValueError(f"lengthscales must be positive, got ({self.ell_u}, {self.ell_v})")

    @property
    def mix(self) -> float:
        return 0.0 if self.kind == "laplace_product" else self.alpha


def kernel_matrix(params: KernelParams, u_a, v_a, u_b, v_b) -> np.ndarray:
    k_u = np.exp(-np.abs(np.subtract.outer(u_a, u_b)) / params.ell_u)
    k_v = np.exp(-np.abs(np.subtract.outer(v_a, v_b)) / params.ell_v)
    a = params.mix
    return a * (k_u + k_v) / 2 + (1 - a) * k_u * k_v


def kernel_eval(params: KernelParams, grid: BeamGrid, i, j) -> float:
    a, b = grid.linear(i), grid.linear(j)
    return float(kernel_matrix(params, grid.u[a], grid.v[a], grid.u[b], grid.v[b]))


def lengthscales_from_prior(cfg: ArrayConfig, prior: ScenarioPrior, kappa_u: float, kappa_v: float,
                            rng: np.random.Generator | None = None,
                            samples: int = 100_000) -> tuple[float, float]:
    """Physics-guided lengthscales tracking the expected near-field lobe widths.

    Closed form under the uniform prior unless an rng is given, then Monte-Carlo.
    """
    if kappa_u <= 0 or kappa_v <= 0:
        raise ValueError(f"kappa must be positive, got ({kappa_u}, {kappa_v})")
    if rng is None:
        mu2 = uniform_moment(*prior.v_range, 2)
        nu2 = uniform_moment(*prior.s_range, 2)
        inv_r = inverse_range_moment(*prior.r_range, power=1)
        e_u = (1 - (1 - mu2) * nu2) * inv_r
        e_v = (1 - mu2) * inv_r
    else:
        v = rng.uniform(*prior.v_range, size=samples)
        s = rng.uniform(*prior.s_range, size=samples)
        r = rng.uniform(*prior.r_range, size=samples)
        u = np.sqrt(1 - v ** 2) * s
        e_u = float(np.mean((1 - u ** 2) / r))
        e_v = float(np.mean((1 - v ** 2) / r))
    ell_u = kappa_u * cfg.n_y * cfg.d * e_u
    ell_v = kappa_v * cfg.n_z * cfg.d * e_v
    if not (ell_u > 0 and ell_v > 0):
        raise ValueError("degenerate prior gives a nonpositive lengthscale")
    return ell_u, ell_v


# ── GP posterior ──

class _Factor:
    """Growable rows of L^{-1} K(probes, grid), whitened targets and the Cholesky factor."""

    def __init__(self, grid_size: int, capacity: int):
        self.proj = np.zeros((capacity, grid_size))
        self.white = np.zeros(capacity)
        self.chol = np.zeros((capacity, capacity))
        self.length = 0

    def truncated(self, t: int) -> "_Factor":
        out = _Factor(self.proj.shape[1], max(t, 1) * 2)
        out.proj[:t] = self.proj[:t]
        out.white[:t] = self.white[:t]
        out.chol[:t, :t] = self.chol[:t, :t]
        out.length = t
        return out

    def reserve(self, rows: int):
        cap = self.white.size
        if rows <= cap:
            return
        new_cap = max(rows, cap * 2)
        proj = np.zeros((new_cap, self.proj.shape[1]))
        proj[:cap] = self.proj
        white = np.zeros(new_cap)
        white[:cap] = self.white
        chol = np.zeros((new_cap, new_cap))
        chol[:cap, :cap] = self.chol
        self.proj, self.white, self.chol = proj, white, chol


class GpPosterior:
    """GP posterior over the beam grid, extended one probe at a time by a rank-1 Cholesky step.

    Instances are immutable from the outside; `update` returns a new posterior
    that shares the growing factor buffers until a branch forces a copy.
    """

    def __init__(self, grid: BeamGrid, params: KernelParams, sigma_eps_sq: float):
        if sigma_eps_sq < 0:
            raise ValueError(f"sigma_eps_sq must be nonnegative, got {sigma_eps_sq}")
        self.grid = grid
        self.params = params
        self.sigma_eps_sq = float(sigma_eps_sq)
        self.probes: tuple = ()
        self.prior_variances: tuple = ()
        self._factor = _Factor(grid.size, 16)
        self._mean = np.zeros(grid.size)
        self._var = np.ones(grid.size)

    @property
    def t(self) -> int:
        return len(self.probes)

    @property
    def mean(self) -> np.ndarray:
        out = self._mean.view()
        out.flags.writeable = False
        return out

    @property
    def variance(self) -> np.ndarray:
        return np.clip(self._var, 0.0, 1.0)

    @property
    def gram_factor(self) -> np.ndarray:
        """Lower-triangular factor of K_t + sigma_eps^2 I (plus any jitter used)."""
        return self._factor.chol[:self.t, :self.t].copy()

    def update(self, index, z: float) -> "GpPosterior":
        i = self.grid.linear(index)
        t = self.t
        factor = self._factor if self._factor.length == t else self._factor.truncated(t)
        factor.reserve(t + 1)

        l_vec = factor.proj[:t, i]
        prior_var = max(float(self._var[i]), 0.0)
        pivot = self._var[i] + self.sigma_eps_sq
        jitter = 0.0
        while pivot <= _PIVOT_FLOOR:
            jitter = JITTER_START if jitter == 0 else jitter * 2
            if jitter > JITTER_MAX:
                raise np.linalg.LinAlgError(
                    f"Gram factorization failed at probe {t + 1}; increase sigma_eps_sq")
            pivot = self._var[i] + self.sigma_eps_sq + jitter
        if jitter:
            log.debug("jitter %.1e added for repeated beam %d", jitter, i)
        l_nn = math.sqrt(pivot)

        k_row = kernel_matrix(self.params, self.grid.u[i], self.grid.v[i], self.grid.u, self.grid.v)
        row = (k_row - l_vec @ factor.proj[:t]) / l_nn
        white = (float(z) - l_vec @ factor.white[:t]) / l_nn
        factor.proj[t] = row
        factor.white[t] = white
        factor.chol[t, :t] = l_vec
        factor.chol[t, t] = l_nn
        factor.length = t + 1

        nxt = object.__new__(GpPosterior)
        nxt.grid = self.grid
        nxt.params = self.params
        nxt.sigma_eps_sq = self.sigma_eps_sq
        nxt.probes = self.probes + ((i, float(z)),)
        nxt.prior_variances = self.prior_variances + (prior_var,)
        nxt._factor = factor
        nxt._mean = self._mean + row * white
        nxt._var = self._var - row ** 2
        return nxt


def gp_update(post: GpPosterior, probe: tuple) -> GpPosterior:
    index, z = probe
    return post.update(index, z)


def dense_posterior(grid: BeamGrid, params: KernelParams, probes, sigma_eps_sq: float):
    """From-scratch joint-Gaussian conditioning; reference for the incremental posterior."""
    if not probes:
        return np.zeros(grid.size), np.ones(grid.size)
    idx = np.array([grid.linear(i) for i, _ in probes])
    z = np.array([float(v) for _, v in probes])
    gram = kernel_matrix(params, grid.u[idx], grid.v[idx], grid.u[idx], grid.v[idx])
    factor = linalg.cho_factor(gram + sigma_eps_sq * np.eye(idx.size), lower=True)
    cross = kernel_matrix(params, grid.u[idx], grid.v[idx], grid.u, grid.v)
    mean = cross.T @ linalg.cho_solve(factor, z)
    var = 1.0 - np.sum(cross * linalg.cho_solve(factor, cross), axis=0)
    return mean, var


def logdet_identity_gap(post: GpPosterior) -> float:
    """|sum_s log(1 + sigma_{s-1}^2(i_s)/sigma_eps^2) - logdet(I + K_t/sigma_eps^2)|."""
    if post.t == 0:
        return 0.0
    se = post.sigma_eps_sq
    incremental = float(np.sum(np.log1p(np.array(post.prior_variances) / se)))
    idx = np.array([i for i, _ in post.probes])
    gram = kernel_matrix(post.params, post.grid.u[idx], post.grid.v[idx], post.grid.u[idx], post.grid.v[idx])
    _, direct = np.linalg.slogdet(np.eye(idx.size) + gram / se)
    return abs(incremental - float(direct))


# ── Information gain and confidence schedule ──

class GreedyGainCurve:
    """Greedy estimate of the maximum information gain, extended lazily in t."""

    def __init__(self, params: KernelParams, grid: BeamGrid, sigma_eps_sq: float):
        if sigma_eps_sq <= 0:
            raise ValueError(f"sigma_eps_sq must be positive, got {sigma_eps_sq}")
        self._post = GpPosterior(grid, params, sigma_eps_sq)
        self._chosen = np.zeros(grid.size, dtype=bool)
        self.values = [0.0]

    def _extend(self, t: int):
        se = self._post.sigma_eps_sq
        while len(self.values) <= t:
            var = np.where(self._chosen, -np.inf, self._post.variance)
            i = int(np.argmax(var))
            self.values.append(self.values[-1] + 0.5 * math.log1p(var[i] / se))
            self._chosen[i] = True
            self._post = self._post.update(i, 0.0)

    def __call__(self, t: int) -> float:
        """gamma_t; steps past the grid size reuse the full-grid value."""
        t = min(max(int(t), 0), self._chosen.size)
        self._extend(t)
        return self.values[t]


def info_gain_greedy(params: KernelParams, grid: BeamGrid, sigma_eps_sq: float, t: int) -> float:
    if t > grid.size:
        raise ValueError(f"t={t} exceeds grid size {grid.size}")
    return GreedyGainCurve(params, grid, sigma_eps_sq)(t)


def beta_schedule(mode: str, *, beta: float | None = None, b_f: float | None = None,
                  delta: float | None = None,
                  gamma: Callable[[int], float] | None = None) -> Callable[[int], float]:
    """beta_t for `constant` or the bounded-noise schedule (`info_gain`, also accepted as `theorem6`)."""
    if mode == "constant":
        if beta is None or beta <= 0:
            raise ValueError(f"constant schedule needs beta > 0, got {beta}")
        return lambda t: float(beta)
    if mode in ("info_gain", "theorem6"):
        if b_f is None or b_f <= 0:
            raise ValueError(f"RKHS bound b_f must be positive, got {b_f}")
        if delta is None or not 0 < delta < 1:
            raise ValueError(f"delta must lie in (0, 1), got {delta}")
        if gamma is None:
            raise ValueError(f"{mode} schedule needs an information-gain estimator")

        def schedule(t: int) -> float:
            t = max(int(t), 1)
            return 2 * b_f ** 2 + 300 * gamma(t - 1) * math.log(t / delta) ** 3
        return schedule
    raise ValueError(f"beta mode must be one of {BETA_MODES}, got {mode!r}")


# ── Level-set classification ──

@dataclass(frozen=True)
class LseState:
    lower: np.ndarray
    upper: np.ndarray
    labels: np.ndarray
    tau: float
    epsilon: float
    beta: Callable[[int], float]
    t: int = 0
    max_ambiguity: float = math.inf

    @classmethod
    def initial(cls, size: int, tau: float, epsilon: float, beta: Callable[[int], float]) -> "LseState":
        if epsilon < 0:
            raise ValueError(f"epsilon must be nonnegative, got {epsilon}")
        return cls(lower=np.full(size, -np.inf), upper=np.full(size, np.inf),
                   labels=np.zeros(size, dtype=np.int8), tau=float(tau), epsilon=float(epsilon), beta=beta)

    @property
    def high(self) -> np.ndarray:
        return np.flatnonzero(self.labels == HIGH)

    @property
    def low(self) -> np.ndarray:
        return np.flatnonzero(self.labels == LOW)

    @property
    def undecided(self) -> np.ndarray:
        return np.flatnonzero(self.labels == UNDECIDED)


def lse_step(state: LseState, post: GpPosterior) -> tuple[LseState, int | None]:
    """Shrink intervals, classify, and pick the most ambiguous undecided beam (None when done)."""
    half = math.sqrt(state.beta(post.t + 1)) * np.sqrt(post.variance)
    lower = np.maximum(state.lower, post.mean - half)
    upper = np.minimum(state.upper, post.mean + half)

    labels = state.labels.copy()
    open_ = labels == UNDECIDED
    to_high = open_ & (lower > state.tau - state.epsilon)
    to_low = open_ & ~to_high & (upper <= state.tau + state.epsilon)
    labels[to_high] = HIGH
    labels[to_low] = LOW

    open_ = labels == UNDECIDED
    if not open_.any():
        return replace(state, lower=lower, upper=upper, labels=labels, t=post.t, max_ambiguity=-math.inf), DONE
    ambiguity = np.where(open_, np.minimum(upper - state.tau, state.tau - lower), -np.inf)
    best = int(np.argmax(ambiguity))
    nxt = replace(state, lower=lower, upper=upper, labels=labels, t=post.t,
                  max_ambiguity=float(ambiguity[best]))
    if ambiguity[best] <= state.epsilon:
        return nxt, DONE
    return nxt, best


@dataclass(frozen=True)
class Support:
    indices: np.ndarray
    source: str  # "high", "top_k" or "argmax"

    @property
    def flagged(self) -> bool:
        return self.source == "argmax"

    def __len__(self) -> int:
        return int(self.indices.size)


def finalize_support(state: LseState, post: GpPosterior, k_cap: int) -> Support:
    if k_cap < 1:
        raise ValueError(f"k_cap must be >= 1, got {k_cap}")
    high, open_ = state.high, state.undecided
    if open_.size == 0:
        if high.size:
            return Support(high, "high")
        log.warning("no beam classified above threshold; keeping the posterior argmax")
        return Support(np.array([int(np.argmax(post.mean))]), "argmax")
    pool = np.union1d(high, open_)
    order = np.argsort(-post.mean[pool], kind="stable")
    return Support(np.sort(pool[order[:k_cap]]), "top_k")


# ── Stage I driver ──

@dataclass(frozen=True)
class LseSettings:
    warmup_fraction: float = 0.1
    tau_quantile: float = 0.9
    tau_floor: float = 3.0
    eps_fraction: float = 0.1
    beta_mode: str = "constant"
    beta: float = 9.0
    b_f: float = 1.0
    delta: float = 0.05
    delta_bd: float = 0.05
    c1: float = 1.0
    sigma_eps_sq: float | None = None
    rescale_factor: float = 2.0


@dataclass
class Stage1Result:
    support: Support
    state: LseState
    posterior: GpPosterior
    probes_used: int
    scale: float
    trace: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)


def power_noise_variance(sigma_sq: float, f: float) -> float:
    """Variance of |f_i^H h + w|^2 - sigma^2 when |f_i^H h|^2 = f."""
    return sigma_sq ** 2 + 2 * sigma_sq * f


def _decay_violations(ambiguities, betas, prior_vars) -> int:
    bad = 0
    running = 0.0
    for t, (amb, beta, var) in enumerate(zip(ambiguities, betas, prior_vars), start=1):
        running += var
        if amb > math.sqrt(beta * running / t) + 1e-12:
            bad += 1
    return bad


def _monotone_runs(values, breaks) -> bool:
    edges = [0, *breaks, len(values)]
    return all(bool(np.all(np.diff(values[a:b]) <= 1e-12)) for a, b in zip(edges, edges[1:]))


def _calibrate(grid: BeamGrid, params: KernelParams, settings: LseSettings, probes, scale: float,
               sigma_sq: float, tau_power: float):
    """Posterior, fresh level-set state and noise model for raw probe powers divided by `scale`."""
    sig = sigma_sq / scale
    f_hat = max(max(z for _, z in probes) / scale, sig)
    if settings.sigma_eps_sq is not None:
        sigma_eps_sq = settings.sigma_eps_sq
    else:
        sigma_eps_sq = max(power_noise_variance(sig, f_hat), SIGMA_EPS_FLOOR)
    post = GpPosterior(grid, params, sigma_eps_sq)
    for i, z in probes:
        post = post.update(i, z / scale)

    if settings.beta_mode == "constant":
        beta = beta_schedule("constant", beta=settings.beta)
    else:
        beta = beta_schedule(settings.beta_mode, b_f=settings.b_f, delta=settings.delta,
                             gamma=GreedyGainCurve(params, grid, sigma_eps_sq))
    tau = tau_power / scale
    state = LseState.initial(grid.size, tau, settings.eps_fraction * tau, beta)
    noise = NoiseModel(sigma_sq=sig, f_max=f_hat, delta_bd=settings.delta_bd, c1=settings.c1)
    return post, state, noise


def discover_support(sounder: DftSounder, params: KernelParams, settings: LseSettings, sigma_sq: float,
                     budget: int, k_cap: int, debias: bool = True, diagnostics: bool = True) -> Stage1Result:
    """Run Stage I under a probe budget.

    Debiased powers enter the GP divided by a data scale S: the strongest power
    seen so far, floored at tau_floor * sigma^2 and at tau. A probe above
    rescale_factor * S resets S to its power; the posterior is rebuilt from every
    probe in the new units and classification restarts from that posterior.
    sigma_eps^2 is the variance of one debiased power sample at the strongest
    power seen, sigma^4 + 2 sigma^2 f_max in scaled units, and beta alone sets
    how wide the confidence intervals are.
    """
    if budget < 1:
        raise ValueError(f"Stage I budget must be >= 1, got {budget}")
    if settings.rescale_factor < 1:
        raise ValueError(f"rescale_factor must be >= 1, got {settings.rescale_factor}")
    grid = sounder.grid
    bias = NoiseModel(sigma_sq=sigma_sq if debias else 0.0, delta_bd=settings.delta_bd, c1=settings.c1)
    warm_count = min(budget, max(1, math.ceil(settings.warmup_fraction * budget)))
    probes = [(int(i), float(debias_power(sounder.probe(i), bias))) for i in grid.coarse_subgrid(warm_count)]
    warm = np.array([z for _, z in probes])

    tau_power = max(float(np.quantile(warm, settings.tau_quantile)), settings.tau_floor * sigma_sq, 1e-12)
    scale = max(float(warm.max()), settings.tau_floor * sigma_sq, tau_power)
    post, state, noise = _calibrate(grid, params, settings, probes, scale, sigma_sq, tau_power)

    trace = []
    for i, z in probes:
        beam = grid.index(i)
        trace.append({"step": len(trace) + 1, "phase": "warmup", "probe": i, "n": beam.n, "m": beam.m,
                      "power": z, "scale": scale, "n_high": 0, "n_low": 0, "n_undecided": grid.size,
                      "max_ambiguity": math.nan, "beta": math.nan})

    used = len(probes)
    ambiguities, betas, prior_vars, breaks = [], [], [], []
    finished = False
    while used < budget:
        state, nxt = lse_step(state, post)
        if nxt is DONE:
            finished = True
            break
        beta_t = state.beta(post.t + 1)
        ambiguities.append(state.max_ambiguity)
        betas.append(beta_t)
        prior_vars.append(float(post.variance[nxt]))
        row = {"n_high": int(state.high.size), "n_low": int(state.low.size),
               "n_undecided": int(state.undecided.size), "max_ambiguity": state.max_ambiguity}
        z = float(debias_power(sounder.probe(nxt), bias))
        probes.append((nxt, z))
        used += 1
        if z > settings.rescale_factor * scale:
            log.debug("beam %d power %.3g is above %.1fx the data scale %.3g; rescaling",
                      nxt, z, settings.rescale_factor, scale)
            scale = z
            post, state, noise = _calibrate(grid, params, settings, probes, scale, sigma_sq, tau_power)
            breaks.append(len(ambiguities))
        else:
            post = post.update(nxt, z / scale)
        beam = grid.index(nxt)
        trace.append({"step": used, "phase": "lse", "probe": nxt, "n": beam.n, "m": beam.m,
                      "power": z, "scale": scale, **row, "beta": beta_t})
    if not finished:
        state, _ = lse_step(state, post)

    support = finalize_support(state, post, k_cap)
    if support.source == "top_k":
        log.debug("budget reached with %d undecided beams; Top-%d patch", state.undecided.size, k_cap)

    diag = {"tau": state.tau, "epsilon": state.epsilon, "tau_power": tau_power,
            "sigma_eps_sq": post.sigma_eps_sq, "scale": scale, "rescales": len(breaks),
            "noise_bound": bounded_noise_threshold(noise, budget),
            "terminated": finished, "adaptive_steps": len(ambiguities)}
    if diagnostics:
        diag["ambiguity_monotone"] = _monotone_runs(ambiguities, breaks)
        diag["ambiguity_bound_violations"] = int(sum(
            a > math.sqrt(b * v) + 1e-12 for a, b, v in zip(ambiguities, betas, prior_vars)))
        diag["decay_bound_violations"] = _decay_violations(ambiguities, betas, prior_vars)
        diag["logdet_gap"] = logdet_identity_gap(post)
    return Stage1Result(support=support, state=state, posterior=post, probes_used=used,
                        scale=scale, trace=trace, diagnostics=diag)
