"""Trajectory collection and the sample estimators built on it.

``collect`` follows the episode accounting of the sampling routine: returns
are discounted from each episode start, and only episodes that finish inside
the batch contribute to the return mean and its sample standard deviation.
"""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .mdp_core import Mdp, evaluate
from .envs import Env, tabular_view

log = logging.getLogger(__name__)

BATCH_COLUMNS_VERSION = 1


@dataclass(frozen=True)
class TrajectoryBatch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    # last transition of a collection segment whose episode is still running
    cuts: np.ndarray
    episode_ids: np.ndarray
    steps: np.ndarray
    episode_returns: np.ndarray
    gamma: float
    # optional per-transition weights (exact batches); uniform when None
    weights: np.ndarray | None = None
    # advantages supplied with the batch instead of being estimated (exact batches)
    advantages: np.ndarray | None = None
    size: int | None = None

    def __post_init__(self):
        if self.size is None:
            object.__setattr__(self, "size", int(len(self.rewards)))

    def __len__(self) -> int:
        return int(len(self.rewards))

    @property
    def n_episodes(self) -> int:
        return int(len(self.episode_returns))

    @property
    def eta_hat(self) -> float:
        if self.n_episodes == 0:
            return float("nan")
        return float(np.mean(self.episode_returns))

    @property
    def sigma_eta_hat(self) -> float:
        if self.n_episodes < 2:
            return float("nan")
        return float(np.std(self.episode_returns, ddof=1))

    def mean_weights(self, idx=None) -> np.ndarray:
        n = len(self) if idx is None else len(idx)
        if self.weights is None:
            return np.full(n, 1.0 / n)
        w = self.weights if idx is None else self.weights[idx]
        return w / w.sum()

    def merge(self, other: "TrajectoryBatch") -> "TrajectoryBatch":
        if (self.weights is None) != (other.weights is None):
            raise ValueError("cannot merge weighted and unweighted batches")
        offset = int(self.episode_ids.max()) + 1 if len(self) else 0

        def cat(a, b):
            return None if a is None else np.concatenate([a, b])

        weights = None
        if self.weights is not None:
            weights = np.concatenate([self.weights * self.size, other.weights * other.size])
        return TrajectoryBatch(
            states=np.concatenate([self.states, other.states]),
            actions=np.concatenate([self.actions, other.actions]),
            rewards=np.concatenate([self.rewards, other.rewards]),
            next_states=np.concatenate([self.next_states, other.next_states]),
            dones=np.concatenate([self.dones, other.dones]),
            cuts=np.concatenate([self.cuts, other.cuts]),
            episode_ids=np.concatenate([self.episode_ids, other.episode_ids + offset]),
            steps=np.concatenate([self.steps, other.steps]),
            episode_returns=np.concatenate([self.episode_returns, other.episode_returns]),
            gamma=self.gamma,
            weights=None if weights is None else weights / weights.sum(),
            advantages=cat(self.advantages, other.advantages),
            size=self.size + other.size,
        )

    def write_csv(self, path) -> None:
        """Dump as ``episode_id, t, state..., action..., reward, done``."""
        states = self.states.reshape(len(self), -1)
        actions = self.actions.reshape(len(self), -1)
        header = (
            ["episode_id", "t"]
            + [f"state_{i}" for i in range(states.shape[1])]
            + [f"action_{i}" for i in range(actions.shape[1])]
            + ["reward", "done"]
        )
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for i in range(len(self)):
                w.writerow(
                    [int(self.episode_ids[i]), int(self.steps[i])]
                    + [repr(float(x)) for x in states[i]]
                    + [repr(float(x)) for x in actions[i]]
                    + [repr(float(self.rewards[i])), int(self.dones[i])]
                )


def collect(env: Env, policy, N: int, seed, gamma: float | None = None) -> TrajectoryBatch:
    """Run ``policy`` for exactly ``N`` environment transitions.

    A start state that is already terminal closes a zero-length episode with
    return 0 and consumes no transition. An episode ended by the horizon
    rather than a terminal state is flagged in ``cuts`` (not ``dones``) so
    advantage estimates bootstrap from its last next state; it still counts
    as a completed episode. The trailing episode, if unfinished, contributes
    transitions (also flagged in ``cuts``) but no return.
    """
    if N < 1:
        raise ValueError("N must be at least 1")
    gamma = env.discount if gamma is None else float(gamma)
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    env_seed, act_seed = root.spawn(2)
    rng = np.random.default_rng(act_seed)
    states, actions, rewards, next_states, dones, cut_list, eps, ts = [], [], [], [], [], [], [], []
    returns = []
    state = env.reset(int(env_seed.generate_state(1)[0]))
    episode, t, ret, disc = 0, 0, 0.0, 1.0
    while len(rewards) < N:
        if t == 0 and env.is_terminal(state):
            returns.append(0.0)
            episode += 1
            state = env.reset()
            continue
        action = policy.sample(state, rng)
        res = env.step(state, action)
        states.append(state)
        actions.append(action)
        rewards.append(res.reward)
        next_states.append(res.next_state)
        terminal = res.done and env.is_terminal(res.next_state)
        dones.append(terminal)
        cut_list.append(res.done and not terminal)
        eps.append(episode)
        ts.append(t)
        ret += disc * res.reward
        disc *= gamma
        t += 1
        if res.done:
            returns.append(ret)
            episode, t, ret, disc = episode + 1, 0, 0.0, 1.0
            state = env.reset()
        else:
            state = res.next_state
    cuts = np.asarray(cut_list, dtype=bool)
    cuts[-1] = not dones[-1]
    return TrajectoryBatch(
        states=np.asarray(states),
        actions=np.asarray(actions),
        rewards=np.asarray(rewards, dtype=float),
        next_states=np.asarray(next_states),
        dones=np.asarray(dones, dtype=bool),
        cuts=cuts,
        episode_ids=np.asarray(eps, dtype=int),
        steps=np.asarray(ts, dtype=int),
        episode_returns=np.asarray(returns, dtype=float),
        gamma=gamma,
    )


def collect_parallel(env_factory, policy, N: int, seed, workers: int = 1, gamma: float | None = None) -> TrajectoryBatch:
    """Split ``N`` transitions over ``workers`` independent env instances.

    Worker ``i`` gets the ``i``-th child of ``SeedSequence(seed)``; batches are
    merged in worker order, so the result depends only on (seed, workers).
    """
    if workers < 1:
        raise ValueError("workers must be positive")
    shares = [N // workers + (1 if i < N % workers else 0) for i in range(workers)]
    children = np.random.SeedSequence(seed).spawn(workers)
    jobs = [(env_factory(), n, child) for n, child in zip(shares, children) if n > 0]
    with ThreadPoolExecutor(max_workers=len(jobs)) as pool:
        parts = list(pool.map(lambda job: collect(job[0], policy, job[1], job[2], gamma), jobs))
    batch = parts[0]
    for part in parts[1:]:
        batch = batch.merge(part)
    return batch


def exact_batch(mdp: Mdp, policy, size: int) -> TrajectoryBatch:
    """Weighted pseudo-batch that turns the sample estimators into exact values.

    Every (s, a) pair appears once with weight ``(1-gamma) rho(s) pi(a|s)`` and
    advantage ``A(s, a) / (1-gamma)``; the two identical pseudo-returns make
    the return mean exact and its standard deviation zero.
    """
    table = tabular_view(policy, mdp.n_states)
    ev = evaluate(mdp, table)
    n_s, n_a = mdp.n_states, mdp.n_actions
    gamma = mdp.discount
    states = np.repeat(np.arange(n_s), n_a)
    actions = np.tile(np.arange(n_a), n_s)
    weights = ((1.0 - gamma) * ev.visit[:, None] * table.probs).ravel()
    zeros = np.zeros(n_s * n_a)
    return TrajectoryBatch(
        states=states,
        actions=actions,
        rewards=zeros,
        next_states=states,
        dones=np.ones(n_s * n_a, dtype=bool),
        cuts=np.zeros(n_s * n_a, dtype=bool),
        episode_ids=np.arange(n_s * n_a),
        steps=np.zeros(n_s * n_a, dtype=int),
        episode_returns=np.array([ev.eta, ev.eta]),
        gamma=gamma,
        weights=weights / weights.sum(),
        advantages=(ev.adv / (1.0 - gamma)).ravel(),
        size=size,
    )


# value baseline


def tabular_features(n_states: int):
    def features(states):
        return np.eye(n_states)[np.asarray(states, dtype=int).reshape(-1)]

    return features


def quadratic_features(states) -> np.ndarray:
    """``[1, x, upper-triangular x x']`` for vector states."""
    x = np.asarray(states, dtype=float)
    x = x.reshape(x.shape[0], -1) if x.ndim > 1 else x.reshape(-1, 1)
    iu = np.triu_indices(x.shape[1])
    quad = np.einsum("ni,nj->nij", x, x)[:, iu[0], iu[1]]
    return np.concatenate([np.ones((x.shape[0], 1)), x, quad], axis=1)


def affine_features(states) -> np.ndarray:
    x = np.asarray(states, dtype=float)
    x = x.reshape(x.shape[0], -1) if x.ndim > 1 else x.reshape(-1, 1)
    return np.concatenate([np.ones((x.shape[0], 1)), x], axis=1)


@dataclass(frozen=True)
class ValueBaseline:
    """``V_phi(s) = features(s) @ phi``."""

    kind: str
    phi: np.ndarray
    n_states: int | None = None

    def __post_init__(self):
        phi = np.array(self.phi, dtype=float)
        if not np.all(np.isfinite(phi)):
            raise ValueError("baseline parameters must be finite")
        phi.setflags(write=False)
        object.__setattr__(self, "phi", phi)

    @classmethod
    def tabular(cls, n_states: int) -> "ValueBaseline":
        return cls("tabular", np.zeros(n_states), n_states)

    @classmethod
    def quadratic(cls, state_dim: int) -> "ValueBaseline":
        return cls("quadratic", np.zeros(1 + state_dim + state_dim * (state_dim + 1) // 2))

    @classmethod
    def affine(cls, state_dim: int) -> "ValueBaseline":
        return cls("linear", np.zeros(1 + state_dim))

    def features(self, states) -> np.ndarray:
        if self.kind == "tabular":
            return tabular_features(self.n_states)(states)
        if self.kind == "quadratic":
            return quadratic_features(states)
        if self.kind == "linear":
            return affine_features(states)
        raise ValueError(f"unknown baseline kind {self.kind!r}")

    def __call__(self, states) -> np.ndarray:
        return self.features(states) @ self.phi


@dataclass(frozen=True)
class AdvantageTable:
    values: np.ndarray
    lam: float
    gamma: float


def _gae_backward(rewards, values, next_values, dones, cuts, gamma, lam):
    adv = np.zeros_like(rewards)
    running = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        if dones[t]:
            running = 0.0
            bootstrap = 0.0
        else:
            bootstrap = next_values[t]
            if cuts[t]:
                running = 0.0
        delta = rewards[t] + gamma * bootstrap - values[t]
        running = delta + gamma * lam * running
        adv[t] = running
    return adv


def gae(batch: TrajectoryBatch, baseline, gamma: float, lam: float = 0.95) -> AdvantageTable:
    """``A_t = delta_t + gamma * lam * A_{t+1}`` within each episode segment.

    Terminal steps bootstrap with 0; a segment cut mid-episode bootstraps with
    ``V(s_last')``. ``baseline`` is any callable mapping states to values.
    """
    if batch.advantages is not None:
        return AdvantageTable(np.asarray(batch.advantages, dtype=float), lam, gamma)
    n = len(batch)
    if len(batch.states) != n or len(batch.next_states) != n or len(batch.dones) != n:
        raise ValueError("batch arrays have mismatched lengths")
    values = np.asarray(baseline(batch.states), dtype=float)
    next_values = np.asarray(baseline(batch.next_states), dtype=float)
    adv = _gae_backward(batch.rewards, values, next_values, batch.dones, batch.cuts, gamma, lam)
    return AdvantageTable(adv, lam, gamma)


class Estimates(NamedTuple):
    L: float
    g: np.ndarray
    D: float


def empirical_L_g_D(policy_new, policy_old, batch: TrajectoryBatch, advantages, idx=None, eta_old=None) -> Estimates:
    """Importance-sampled surrogate, its gradient at ``policy_new``, and mean KL.

    ``idx`` restricts the averages to a minibatch; ``eta_old`` defaults to the
    batch return mean.
    """
    adv = advantages.values if isinstance(advantages, AdvantageTable) else np.asarray(advantages, dtype=float)
    if len(adv) != len(batch):
        raise ValueError("advantages and batch differ in length")
    sl = slice(None) if idx is None else np.asarray(idx)
    states, actions, adv = batch.states[sl], batch.actions[sl], adv[sl]
    w = batch.mean_weights(None if idx is None else np.asarray(idx))
    eta = batch.eta_hat if eta_old is None else eta_old
    if not np.isfinite(eta):
        eta = 0.0
    ratio = np.exp(policy_new.log_prob(states, actions) - policy_old.log_prob(states, actions))
    L = eta + float(np.sum(w * ratio * adv))
    g = (w * ratio * adv) @ policy_new.grad_log_prob(states, actions)
    D = float(np.sum(w * policy_old.kl(policy_new, states)))
    return Estimates(L, g, D)


def sample_entropy(policy, batch: TrajectoryBatch, idx=None) -> float:
    sl = slice(None) if idx is None else np.asarray(idx)
    w = batch.mean_weights(None if idx is None else np.asarray(idx))
    return float(np.sum(w * policy.entropies(batch.states[sl])))


def normalize_advantages(table: AdvantageTable) -> AdvantageTable:
    v = table.values
    std = v.std()
    return replace(table, values=(v - v.mean()) / (std if std > 0 else 1.0))


@dataclass
class FitReport:
    losses: list[float] = field(default_factory=list)


def _ls_loss(X, y, phi) -> float:
    r = X @ phi - y
    return float(r @ r / len(y))


def fit_baseline(
    baseline: ValueBaseline,
    batch: TrajectoryBatch,
    advantages,
    epochs: int = 200,
    step_size: float = 0.1,
    method: str = "exact",
    report: FitReport | None = None,
) -> ValueBaseline:
    """Regress ``V_phi`` onto the targets ``V_phi_k(s) + A(s, a)``.

    ``method="exact"`` solves the normal equations (ridge 1e-8 on rank
    deficiency); ``method="adam"`` runs full-batch Adam and halves each proposed
    step until the loss does not go up.
    """
    adv = advantages.values if isinstance(advantages, AdvantageTable) else np.asarray(advantages, dtype=float)
    X = baseline.features(batch.states)
    y = X @ baseline.phi + adv
    if method == "exact":
        gram = X.T @ X
        if np.linalg.matrix_rank(gram) < gram.shape[0]:
            gram = gram + 1e-8 * np.eye(gram.shape[0])
        phi = np.linalg.solve(gram, X.T @ y)
        if report is not None:
            report.losses.append(_ls_loss(X, y, phi))
        return replace(baseline, phi=phi)
    if method != "adam":
        raise ValueError(f"unknown fit method {method!r}")
    phi = np.array(baseline.phi)
    m = np.zeros_like(phi)
    v = np.zeros_like(phi)
    b1, b2, eps = 0.9, 0.999, 1e-8
    loss = _ls_loss(X, y, phi)
    if report is not None:
        report.losses.append(loss)
    for epoch in range(1, epochs + 1):
        grad = 2.0 * X.T @ (X @ phi - y) / len(y)
        m = b1 * m + (1 - b1) * grad
        v = b2 * v + (1 - b2) * grad**2
        step = step_size * (m / (1 - b1**epoch)) / (np.sqrt(v / (1 - b2**epoch)) + eps)
        for _ in range(60):
            cand = phi - step
            cand_loss = _ls_loss(X, y, cand)
            if cand_loss <= loss:
                phi, loss = cand, cand_loss
                break
            step = 0.5 * step
        if report is not None:
            report.losses.append(loss)
    return replace(baseline, phi=phi)
