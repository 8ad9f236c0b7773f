"""Deterministic trust-region iteration on exact tabular MDPs.

The subproblem uses the visitation-weighted total-variation ball and is solved
exactly: it is a linear program that decouples per state except for one shared
budget, so a greedy transfer of probability mass onto the argmax-advantage
action (best gain rate first) is optimal.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .mdp_core import (
    EvalResult,
    Mdp,
    TabularPolicy,
    evaluate,
    greedy_actions,
    optimal_advantage,
    policy_advantage,
)

log = logging.getLogger(__name__)

TRACE_COLUMNS = ("iter", "eta", "delta", "ratio", "Astar", "accepted")


@dataclass(frozen=True)
class TrConfig:
    beta0: float = 0.1
    beta1: float = 0.75
    gamma1: float = 2.0
    gamma2: float = 0.8
    gamma3: float = 0.6
    delta0: float = 0.1
    max_iters: int = 500
    tol_Astar: float = 1e-10

    def __post_init__(self):
        if not 0.0 < self.beta0 < self.beta1:
            raise ValueError("need 0 < beta0 < beta1")
        if not 0.0 < self.gamma3 < self.gamma2 <= 1.0 < self.gamma1:
            raise ValueError("need 0 < gamma3 < gamma2 <= 1 < gamma1")
        if self.delta0 <= 0.0:
            raise ValueError("delta0 must be positive")
        if self.max_iters < 0 or self.tol_Astar <= 0.0:
            raise ValueError("max_iters must be >= 0 and tol_Astar > 0")


@dataclass
class TrRecord:
    iter: int
    eta: float
    delta: float
    Astar: float
    L_improvement: float = float("nan")
    eta_trial: float = float("nan")
    ratio: float = float("nan")
    accepted: bool = False
    tv: float = float("nan")
    # lemma bounds evaluated on this iteration
    L_bound: float = float("nan")
    ratio_bound: float = float("nan")


@dataclass
class TrTrace:
    records: list[TrRecord] = field(default_factory=list)
    policy: TabularPolicy | None = None
    converged: bool = False

    @property
    def final_eta(self) -> float:
        return self.records[-1].eta

    @property
    def final_Astar(self) -> float:
        return self.records[-1].Astar

    def write_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(TRACE_COLUMNS)
            for rec in self.records:
                writer.writerow(
                    [rec.iter, repr(rec.eta), repr(rec.delta), repr(rec.ratio), repr(rec.Astar), int(rec.accepted)]
                )


def weighted_tv(visit: np.ndarray, p: TabularPolicy, q: TabularPolicy) -> float:
    """``sum_s visit(s) * D_TV(p(.|s), q(.|s))``."""
    return float(visit @ (0.5 * np.abs(p.probs - q.probs).sum(axis=1)))


def solve_tv_subproblem(mdp: Mdp, base: TabularPolicy, base_eval: EvalResult, delta: float) -> TabularPolicy:
    """Exact maximiser of the surrogate inside the weighted TV ball of radius ``delta``.

    Moving mass ``m`` from action ``a`` to ``a*(s)`` costs ``visit(s) * m`` of
    budget and gains ``visit(s) * m * (A(s, a*) - A(s, a))``, so donor pairs
    are drained in decreasing order of advantage gap.
    """
    if not delta >= 0.0:
        raise ValueError(f"delta must be non-negative, got {delta}")
    if delta == 0.0:
        return base
    probs = np.array(base.probs)
    adv = base_eval.adv
    visit = base_eval.visit
    best = greedy_actions(adv)
    gaps = adv[np.arange(mdp.n_states), best][:, None] - adv
    donors = [
        (-gaps[s, a], s, a)
        for s in range(mdp.n_states)
        for a in range(mdp.n_actions)
        if gaps[s, a] > 0.0 and probs[s, a] > 0.0
    ]
    donors.sort()  # gap descending, then (state, action) ascending
    budget = float(delta)
    for _, s, a in donors:
        if budget <= 0.0:
            break
        cost = visit[s] * probs[s, a]
        mass = probs[s, a] if cost <= budget else budget / visit[s]
        probs[s, a] -= mass
        probs[s, best[s]] += mass
        budget -= visit[s] * mass
    probs = np.clip(probs, 0.0, None)
    return TabularPolicy(probs / probs.sum(axis=1, keepdims=True))


def tr_ratio(eta_new: float, eta_old: float, L_new: float, L_old: float) -> float:
    """Actual over predicted improvement; ``nan`` when nothing was predicted."""
    denom = L_new - L_old
    if denom == 0.0:
        return float("nan")
    return (eta_new - eta_old) / denom


def update_radius(delta: float, ratio: float, config) -> float:
    if ratio >= config.beta1:
        return config.gamma1 * delta
    if ratio >= config.beta0:
        return config.gamma2 * delta
    return config.gamma3 * delta


def accepts(ratio: float, config) -> bool:
    return bool(ratio >= config.beta0)


def improvement_lower_bound(gamma: float, delta: float, Astar: float) -> float:
    return min(1.0, (1.0 - gamma) * delta) * Astar


def ratio_lower_bound(mdp: Mdp, base_eval: EvalResult, delta: float, Astar: float) -> float:
    """Lower bound on the trust-region ratio from the TV-ball model error.

    ``1 - 4 Abar gamma delta^2 / (p0^2 (1-gamma)^2 min(1, (1-gamma) delta) Astar)``
    with ``p0 = min rho0`` and ``Abar = max |A|``.
    """
    gamma = mdp.discount
    p0 = float(mdp.initial_dist.min())
    abar = float(np.abs(base_eval.adv).max())
    denom = p0**2 * (1.0 - gamma) ** 2 * improvement_lower_bound(gamma, delta, Astar)
    if denom <= 0.0:
        return -np.inf
    return 1.0 - 4.0 * abar * gamma * delta**2 / denom


def run(mdp: Mdp, init: TabularPolicy, config: TrConfig = TrConfig()) -> TrTrace:
    """Trust-region policy iteration with exact evaluation and exact subproblems."""
    policy = init
    ev = evaluate(mdp, policy)
    delta = config.delta0
    trace = TrTrace()
    for k in range(config.max_iters + 1):
        astar = optimal_advantage(mdp, ev)
        rec = TrRecord(iter=k, eta=ev.eta, delta=delta, Astar=astar)
        trace.records.append(rec)
        if astar <= config.tol_Astar:
            trace.converged = True
            break
        if k == config.max_iters:
            break
        trial = solve_tv_subproblem(mdp, policy, ev, delta)
        trial_ev = evaluate(mdp, trial)
        rec.L_improvement = policy_advantage(mdp, ev, trial)
        rec.eta_trial = trial_ev.eta
        rec.tv = weighted_tv(ev.visit, policy, trial)
        rec.L_bound = improvement_lower_bound(mdp.discount, delta, astar)
        rec.ratio_bound = ratio_lower_bound(mdp, ev, delta, astar)
        # L(pi_k) = eta(pi_k), so the predicted increase is the policy advantage itself
        ratio = tr_ratio(trial_ev.eta, ev.eta, ev.eta + rec.L_improvement, ev.eta)
        if np.isnan(ratio):
            log.info("zero predicted improvement at iteration %d; stopping", k)
            trace.converged = True
            break
        rec.ratio = ratio
        rec.accepted = accepts(ratio, config)
        if rec.accepted:
            policy, ev = trial, trial_ev
        delta = update_radius(delta, ratio, config)
    trace.policy = policy
    return trace


@dataclass
class LemmaReport:
    iterations: int
    improvement_violations: int
    ratio_violations: int
    feasibility_violations: int
    monotone_violations: int

    @property
    def ok(self) -> bool:
        return not (
            self.improvement_violations
            or self.ratio_violations
            or self.feasibility_violations
            or self.monotone_violations
        )

    def as_dict(self) -> dict:
        return asdict(self) | {"ok": self.ok}


def check_lemmas(trace: TrTrace, tol: float = 1e-9) -> LemmaReport:
    """Count violations of the improvement, ratio, feasibility and monotonicity bounds."""
    steps = [r for r in trace.records if not np.isnan(r.ratio)]
    imp = sum(r.L_improvement < r.L_bound - tol for r in steps)
    rat = sum(r.ratio < r.ratio_bound - tol for r in steps)
    feas = sum(r.tv > r.delta + tol for r in steps)
    etas = [r.eta for r in trace.records]
    mono = sum(b < a - tol for a, b in zip(etas, etas[1:]))
    return LemmaReport(len(steps), int(imp), int(rat), int(feas), int(mono))
