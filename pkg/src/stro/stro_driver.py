"""Stochastic trust-region outer loop and its inner solvers.

One outer iteration: estimate advantages on the buffer, set the radius from
the gradient norm, solve the sampled subproblem (CG-preconditioned steps with
a feasible line search; mean and log-std handled separately for Gaussian
policies), sample the trial policy, and accept, reject or force-accept based
on the ratio whose denominator is widened by the return standard deviation.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .gaussian_policy import DEFAULT_DAMPING, GaussianPolicyParams
from .mdp_core import Mdp
from .numerics import CgConfig, LineSearchConfig, conjugate_gradient, feasible_line_search, projected_gradient_box
from .sampler_estimators import (
    TrajectoryBatch,
    ValueBaseline,
    collect,
    collect_parallel,
    empirical_L_g_D,
    exact_batch,
    fit_baseline,
    gae,
    normalize_advantages,
    sample_entropy,
)

log = logging.getLogger(__name__)

ACCEPT, REJECT, FORCE = "accept", "reject", "force"


@dataclass(frozen=True)
class StroConfig:
    N: int = 2048
    N_max: int | None = None  # None -> (max_rejections_before_force + 1) * N
    mu0: float = 0.05
    mu_min: float = 0.01
    mu_max: float = 0.1
    gamma1: float = 2.0
    gamma2: float = 0.8
    gamma3: float = 0.6
    beta0: float = -0.1
    beta1: float = 0.0
    acceptance_rule: str = "beta1"  # accept iff r >= beta1; "beta0" accepts iff r >= beta0
    inner_eps: float = 1e-4
    inner_check_period: int = 5
    max_inner_iters: int = 50
    minibatch_size: int = 256
    max_rejections_before_force: int = 4
    sigma_bound_scale: float = 0.01
    sigma_steps: int = 20
    tau_armijo: float = 0.1
    backtrack_factor: float = 0.5
    max_backtracks: int = 20
    cg_residual_tol: float = 1e-8
    cg_max_iters: int | None = None
    damping: float = DEFAULT_DAMPING
    gae_lambda: float = 0.95
    normalize_advantages: bool = False
    baseline_method: str = "exact"
    natural_gradient_only: bool = False
    alternating: bool = True
    total_steps: int = 200_000
    max_iterations: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be positive")
        if not 0.0 < self.mu_min < self.mu_max:
            raise ValueError("need 0 < mu_min < mu_max")
        if not self.beta0 < 0.0 <= self.beta1:
            raise ValueError("need beta0 < 0 <= beta1")
        if not 0.0 < self.gamma3 < self.gamma2 <= 1.0 < self.gamma1:
            raise ValueError("need 0 < gamma3 < gamma2 <= 1 < gamma1")
        if self.acceptance_rule not in ("beta1", "beta0"):
            raise ValueError("acceptance_rule must be 'beta1' or 'beta0'")
        if self.sigma_bound_scale < 0.0:
            raise ValueError("sigma_bound_scale must be non-negative")
        if self.inner_check_period < 1 or self.max_inner_iters < 1:
            raise ValueError("inner iteration settings must be positive")

    @property
    def buffer_cap(self) -> int:
        return self.N_max if self.N_max is not None else (self.max_rejections_before_force + 1) * self.N

    @classmethod
    def from_dict(cls, data: dict) -> "StroConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown StroConfig keys: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class RejectedTrial:
    policy: object
    batch: TrajectoryBatch

    @property
    def eta_hat(self) -> float:
        return self.batch.eta_hat


@dataclass(frozen=True)
class TrustRegionState:
    policy: object
    mu: float
    buffer: TrajectoryBatch
    history: tuple[RejectedTrial, ...] = ()
    consecutive_rejections: int = 0
    delta: float = 0.0


@dataclass
class IterationRecord:
    iter: int
    steps: int
    eta_hat_old: float
    eta_hat_trial: float
    sigma_eta: float
    L_improvement: float
    ratio: float
    decision: str
    entropy: float
    entropy_trial: float
    delta: float
    mu: float
    grad_norm: float
    buffer_size: int
    D_trial: float
    D_mean_stage: float
    sigma_step: float
    sigma_bound: float
    inner_iters: int
    eta_exact_old: float = float("nan")
    eta_exact_new: float = float("nan")


RECORD_COLUMNS = tuple(f.name for f in fields(IterationRecord))


def write_records_csv(records, path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_COLUMNS)
        for rec in records:
            row = []
            for name in RECORD_COLUMNS:
                val = getattr(rec, name)
                row.append(repr(float(val)) if isinstance(val, float) else val)
            w.writerow(row)


# samplers: a real environment, or exact tabular evaluation


class EnvSampler:
    def __init__(self, env, workers: int = 1, env_factory: Callable | None = None):
        self.env = env
        self.workers = workers
        self.env_factory = env_factory
        self.gamma = env.discount

    def sample(self, policy, n: int, seed) -> TrajectoryBatch:
        if self.workers > 1 and self.env_factory is not None:
            return collect_parallel(self.env_factory, policy, n, seed, self.workers)
        return collect(self.env, policy, n, seed)

    def exact_eta(self, policy) -> float:
        fn = getattr(self.env, "exact_eta", None)
        if fn is None:
            return float("nan")
        try:
            return float(fn(policy))
        except (TypeError, ValueError):
            return float("nan")

    def default_baseline(self) -> ValueBaseline:
        spec = self.env.spec
        if spec.discrete:
            return ValueBaseline.tabular(spec.observation_dim)
        return ValueBaseline.quadratic(spec.observation_dim)


class ExactSampler:
    """Replaces sampling with exact tabular quantities (zero return spread)."""

    def __init__(self, mdp: Mdp):
        self.mdp = mdp
        self.gamma = mdp.discount

    def sample(self, policy, n: int, seed) -> TrajectoryBatch:
        return exact_batch(self.mdp, policy, n)

    def exact_eta(self, policy) -> float:
        return exact_batch(self.mdp, policy, 1).eta_hat

    def default_baseline(self) -> ValueBaseline:
        return ValueBaseline.tabular(self.mdp.n_states)


# inner solver


@dataclass
class InnerResult:
    policy: object
    iterations: int
    steps: list[float] = field(default_factory=list)
    directions: list[np.ndarray] = field(default_factory=list)
    cg_fallbacks: int = 0


class _Surrogate:
    """Sample estimators at fixed old policy, buffer and advantages."""

    def __init__(self, policy_k, buffer: TrajectoryBatch, adv: np.ndarray):
        self.policy_k = policy_k
        self.buffer = buffer
        self.adv = adv
        self.eta = buffer.eta_hat if np.isfinite(buffer.eta_hat) else 0.0

    def estimates(self, policy, idx=None):
        return empirical_L_g_D(policy, self.policy_k, self.buffer, self.adv, idx=idx, eta_old=self.eta)

    def L(self, policy, idx=None) -> float:
        sl = slice(None) if idx is None else idx
        b = self.buffer
        w = b.mean_weights(idx)
        ratio = np.exp(policy.log_prob(b.states[sl], b.actions[sl]) - self.policy_k.log_prob(b.states[sl], b.actions[sl]))
        return self.eta + float(np.sum(w * ratio * self.adv[sl]))

    def D(self, policy) -> float:
        return float(np.sum(self.buffer.mean_weights() * self.policy_k.kl(policy, self.buffer.states)))

    def entropy(self, policy) -> float:
        return sample_entropy(policy, self.buffer)


def _minibatch(n: int, size: int, rng: np.random.Generator):
    if size >= n:
        return None
    return np.sort(rng.choice(n, size=size, replace=False))


def inner_solve(
    policy_k,
    delta_k: float,
    buffer: TrajectoryBatch,
    advantages,
    config: StroConfig = StroConfig(),
    rng: np.random.Generator | None = None,
    block: slice | None = None,
) -> InnerResult:
    """Sequence of CG-preconditioned ascent steps kept inside the KL ball.

    ``block`` restricts the update to a slice of the flat parameter vector.
    Every step satisfies sufficient increase on its minibatch and
    ``D(theta, full buffer) <= delta_k``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    adv = advantages.values if hasattr(advantages, "values") else np.asarray(advantages, dtype=float)
    sur = _Surrogate(policy_k, buffer, adv)
    theta_k = policy_k.flat()
    blk = slice(0, theta_k.size) if block is None else block
    result = InnerResult(policy=policy_k, iterations=0)
    if delta_k <= 0.0 or len(buffer) == 0:
        return result
    ls_cfg = LineSearchConfig(config.tau_armijo, config.backtrack_factor, config.max_backtracks)
    cg_cfg = CgConfig(config.cg_max_iters, config.cg_residual_tol, 0.0)
    ent_k = sur.entropy(policy_k)
    theta = theta_k.copy()

    def embed(x_blk, base):
        out = base.copy()
        out[blk] = x_blk
        return out

    max_iters = 1 if config.natural_gradient_only else config.max_inner_iters
    for l in range(1, max_iters + 1):
        idx = None if config.natural_gradient_only else _minibatch(len(buffer), config.minibatch_size, rng)
        current = policy_k.with_flat(theta)
        g = sur.estimates(current, idx).g[blk]
        if not np.any(g):
            break
        mb_states = buffer.states if idx is None else buffer.states[idx]

        def fvp(v):
            full = np.zeros_like(theta_k)
            full[blk] = v
            return policy_k.fvp(mb_states, full, config.damping)[blk]

        d = None
        try:
            cg = conjugate_gradient(fvp, g, cg_cfg)
            if np.all(np.isfinite(cg.x)) and float(cg.x @ g) > 0.0:
                d = cg.x
        except FloatingPointError as exc:
            log.warning("CG failed (%s); using the plain gradient", exc)
        if d is None:
            log.warning("CG direction unusable at inner step %d; using the plain gradient", l)
            d = g
            result.cg_fallbacks += 1
        dHd = float(d @ fvp(d))
        alpha0 = math.sqrt(2.0 * delta_k / dHd) * (1.0 - 1e-9) if dHd > 0.0 else 1.0

        def eval_L(x_blk):
            return sur.L(policy_k.with_flat(embed(x_blk, theta)), idx)

        def eval_D(x_blk):
            return sur.D(policy_k.with_flat(embed(x_blk, theta)))

        alpha = feasible_line_search(eval_L, eval_D, theta[blk], d, g, delta_k, ls_cfg, alpha0)
        result.iterations = l
        result.steps.append(alpha)
        result.directions.append(d)
        if alpha == 0.0:
            break
        prev = theta.copy()
        theta[blk] = theta[blk] + alpha * d
        if l % config.inner_check_period == 0:
            L_new = sur.L(policy_k.with_flat(theta))
            L_prev = sur.L(policy_k.with_flat(prev))
            stagnated = abs(L_new - L_prev) / (1.0 + abs(L_prev)) <= config.inner_eps
            ent_new = sur.entropy(policy_k.with_flat(theta))
            drifted = abs(ent_new - ent_k) / (1.0 + abs(ent_k)) >= config.inner_eps
            if stagnated or drifted:
                break
    result.policy = policy_k.with_flat(theta)
    return result


@dataclass
class AlternatingResult:
    policy: object
    mean_stage: InnerResult
    sigma_bound: float
    sigma_step: float


def alternating_gaussian_step(
    policy_k: GaussianPolicyParams,
    delta_k: float,
    buffer: TrajectoryBatch,
    advantages,
    config: StroConfig = StroConfig(),
    rng: np.random.Generator | None = None,
) -> AlternatingResult:
    """Mean update inside the KL ball, then a log-std update inside an
    infinity-norm box of radius ``sigma_bound_scale * |entropy|``.

    The log-std stage only takes steps that keep the trial inside the KL ball.
    """
    if not isinstance(policy_k, GaussianPolicyParams):
        raise TypeError("alternating update needs a Gaussian policy")
    blocks = policy_k.blocks
    stage1 = inner_solve(policy_k, delta_k, buffer, advantages, config, rng, block=blocks["mu"])
    mean_policy = stage1.policy
    adv = advantages.values if hasattr(advantages, "values") else np.asarray(advantages, dtype=float)
    sur = _Surrogate(policy_k, buffer, adv)
    radius = config.sigma_bound_scale * abs(sur.entropy(policy_k))
    center = policy_k.log_std.copy()
    base = mean_policy.flat()
    sig = blocks["sigma"]

    def objective(s):
        x = base.copy()
        x[sig] = s
        est = sur.estimates(policy_k.with_flat(x))
        return est.L, est.g[sig]

    def feasible(s):
        x = base.copy()
        x[sig] = s
        return sur.D(policy_k.with_flat(x)) <= delta_k

    new_sigma = projected_gradient_box(objective, center, radius, init=center, steps=config.sigma_steps, accept=feasible)
    x = base.copy()
    x[sig] = new_sigma
    trial = policy_k.with_flat(x)
    return AlternatingResult(trial, stage1, radius, float(np.max(np.abs(trial.log_std - center))))


# ratio, decision, radius


def stochastic_ratio(eta_hat_trial, eta_hat_old, sigma_eta_old, L_trial, L_old) -> float:
    """``(eta_trial - eta_old) / (sigma_old + L_trial - L_old)``.

    Returns ``-inf`` when the surrogate did not increase, and drops the
    standard-deviation term when it is undefined.
    """
    predicted = L_trial - L_old
    if not predicted > 0.0:
        log.info("no predicted increase (%.3e); treating the trial as rejected", predicted)
        return -math.inf
    if not (np.isfinite(eta_hat_trial) and np.isfinite(eta_hat_old)):
        log.info("return estimate undefined; treating the trial as rejected")
        return -math.inf
    if not np.isfinite(sigma_eta_old):
        log.info("return std undefined (fewer than two episodes); using the plain ratio")
        sigma_eta_old = 0.0
    return (eta_hat_trial - eta_hat_old) / (sigma_eta_old + predicted)


def update_mu(mu_k: float, r_k: float, config: StroConfig) -> float:
    if r_k >= config.beta1:
        return min(config.gamma1 * mu_k, config.mu_max)
    if r_k >= config.beta0:
        return max(config.gamma2 * mu_k, config.mu_min)
    return max(config.gamma3 * mu_k, config.mu_min)


def accept_or_reject(
    state: TrustRegionState,
    theta_trial,
    trial_batch: TrajectoryBatch,
    r_k: float,
    config: StroConfig,
    resample: Callable[[], TrajectoryBatch] | None = None,
) -> tuple[str, TrustRegionState]:
    """Accept on a good ratio; otherwise grow the buffer with fresh samples of
    the current policy, or force-accept the best rejected trial once the
    buffer has reached its cap."""
    threshold = config.beta1 if config.acceptance_rule == "beta1" else config.beta0
    if r_k >= threshold:
        return ACCEPT, replace(state, policy=theta_trial, buffer=trial_batch, history=(), consecutive_rejections=0)
    if state.buffer.size < config.buffer_cap:
        if resample is None:
            raise ValueError("rejection needs a resample callable")
        fresh = resample()
        return REJECT, replace(
            state,
            buffer=state.buffer.merge(fresh),
            history=state.history + (RejectedTrial(theta_trial, trial_batch),),
            consecutive_rejections=state.consecutive_rejections + 1,
        )
    assert state.history, "forced acceptance with an empty rejection history"
    best = max(range(len(state.history)), key=lambda i: state.history[i].eta_hat)
    chosen = state.history[best]
    rest = state.history[:best] + state.history[best + 1 :]
    return FORCE, replace(state, policy=chosen.policy, buffer=chosen.batch, history=rest, consecutive_rejections=0)


# outer loop


@dataclass
class StroResult:
    records: list[IterationRecord]
    policy: object
    baseline: ValueBaseline
    state: TrustRegionState

    def write_csv(self, path) -> None:
        write_records_csv(self.records, path)


def run_stro(env, initial_policy, config: StroConfig = StroConfig(), baseline: ValueBaseline | None = None, callback=None) -> StroResult:
    """Run the stochastic trust-region loop within ``total_steps`` transitions.

    ``env`` is an environment or a sampler (anything with ``sample``).
    ``callback(k, state, record)`` is invoked after each iteration.
    """
    sampler = env if hasattr(env, "sample") else EnvSampler(env)
    baseline = sampler.default_baseline() if baseline is None else baseline
    rng = np.random.default_rng([config.seed, 7919])
    n_calls = 0

    def sample(policy):
        nonlocal n_calls
        batch = sampler.sample(policy, config.N, [config.seed, n_calls])
        n_calls += 1
        return batch

    state = TrustRegionState(policy=initial_policy, mu=config.mu0, buffer=sample(initial_policy))
    steps = config.N
    records: list[IterationRecord] = []
    gaussian = isinstance(initial_policy, GaussianPolicyParams)
    k = 0
    # an iteration costs at most 2N transitions (trial batch plus a resample)
    while steps + 2 * config.N <= config.total_steps and (config.max_iterations is None or k < config.max_iterations):
        policy_k, buffer = state.policy, state.buffer
        adv = gae(buffer, baseline, sampler.gamma, config.gae_lambda)
        if config.normalize_advantages and buffer.advantages is None:
            adv = normalize_advantages(adv)
        sur = _Surrogate(policy_k, buffer, adv.values)
        est_old = sur.estimates(policy_k)
        grad_norm = float(np.linalg.norm(est_old.g))
        delta = state.mu * grad_norm
        state = replace(state, delta=delta)
        ent_old = sur.entropy(policy_k)
        sigma_bound = sigma_step = float("nan")
        if gaussian and config.alternating:
            alt = alternating_gaussian_step(policy_k, delta, buffer, adv, config, rng)
            trial, inner = alt.policy, alt.mean_stage
            sigma_bound, sigma_step = alt.sigma_bound, alt.sigma_step
            D_mean = sur.D(inner.policy)
        else:
            inner = inner_solve(policy_k, delta, buffer, adv, config, rng)
            trial = inner.policy
            D_mean = sur.D(trial)
        trial_batch = sample(trial)
        steps += config.N
        L_trial = sur.L(trial)
        ratio = stochastic_ratio(trial_batch.eta_hat, buffer.eta_hat, buffer.sigma_eta_hat, L_trial, est_old.L)
        mu_next = update_mu(state.mu, ratio, config)

        def resample():
            nonlocal steps
            steps += config.N
            return sample(policy_k)

        decision, state = accept_or_reject(state, trial, trial_batch, ratio, config, resample)
        state = replace(state, mu=mu_next)
        if buffer.advantages is None:
            baseline = fit_baseline(baseline, buffer, adv, method=config.baseline_method)
        rec = IterationRecord(
            iter=k,
            steps=steps,
            eta_hat_old=buffer.eta_hat,
            eta_hat_trial=trial_batch.eta_hat,
            sigma_eta=buffer.sigma_eta_hat,
            L_improvement=L_trial - est_old.L,
            ratio=float(ratio),
            decision=decision,
            entropy=ent_old,
            entropy_trial=sur.entropy(trial),
            delta=delta,
            mu=mu_next,
            grad_norm=grad_norm,
            buffer_size=state.buffer.size,
            D_trial=sur.D(trial),
            D_mean_stage=D_mean,
            sigma_step=sigma_step,
            sigma_bound=sigma_bound,
            inner_iters=inner.iterations,
            eta_exact_old=sampler.exact_eta(policy_k),
            eta_exact_new=sampler.exact_eta(state.policy),
        )
        records.append(rec)
        if callback is not None:
            callback(k, state, rec)
        k += 1
    return StroResult(records, state.policy, baseline, state)


def records_as_dicts(records) -> list[dict]:
    return [asdict(r) for r in records]
