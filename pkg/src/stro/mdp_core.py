"""Exact finite MDPs and tabular policies.

Everything here is dense linear algebra over small state spaces: values and
discounted visitation frequencies come from direct solves, so the quantities
are exact up to floating point and can be used as oracles for the sampled
track.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PROB_TOL = 1e-12


def _check_simplex(arr: np.ndarray, axis: int, what: str) -> np.ndarray:
    arr = np.asarray(arr, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} contains non-finite entries")
    if np.any(arr < -PROB_TOL):
        raise ValueError(f"{what} has negative entries")
    sums = arr.sum(axis=axis, keepdims=True)
    if np.any(np.abs(sums - 1.0) > PROB_TOL):
        raise ValueError(f"{what} does not sum to one (max error {np.abs(sums - 1).max():.3e})")
    arr = np.clip(arr, 0.0, None)
    return arr / arr.sum(axis=axis, keepdims=True)


@dataclass(frozen=True)
class Mdp:
    """Finite discounted MDP ``(S, A, P, r, rho0, gamma)``.

    ``transition[s, a, s']`` is ``P(s'|s, a)``. Probabilities are validated to
    1e-12 and renormalised on construction.
    """

    transition: np.ndarray
    reward: np.ndarray
    initial_dist: np.ndarray
    discount: float

    def __post_init__(self):
        P = np.asarray(self.transition, dtype=float)
        r = np.asarray(self.reward, dtype=float)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ValueError(f"transition must have shape (S, A, S), got {P.shape}")
        n_s, n_a, _ = P.shape
        if r.shape != (n_s, n_a):
            raise ValueError(f"reward must have shape {(n_s, n_a)}, got {r.shape}")
        if not np.all(np.isfinite(r)):
            raise ValueError("reward contains non-finite entries")
        if not 0.0 < float(self.discount) < 1.0:
            raise ValueError(f"discount must lie in (0, 1), got {self.discount}")
        P = _check_simplex(P, axis=2, what="transition")
        rho0 = _check_simplex(np.asarray(self.initial_dist, dtype=float).reshape(-1), 0, "initial_dist")
        if rho0.shape != (n_s,):
            raise ValueError(f"initial_dist must have length {n_s}")
        if np.any(rho0 <= 0.0):
            raise ValueError("initial_dist must be strictly positive on every state")
        for name, val in (("transition", P), ("reward", r), ("initial_dist", rho0)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)
        object.__setattr__(self, "discount", float(self.discount))

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    def to_dict(self) -> dict:
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "transition": self.transition.reshape(-1).tolist(),
            "reward": self.reward.reshape(-1).tolist(),
            "initial_dist": self.initial_dist.tolist(),
            "discount": self.discount,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Mdp":
        n_s, n_a = int(data["n_states"]), int(data["n_actions"])
        return cls(
            transition=np.asarray(data["transition"], dtype=float).reshape(n_s, n_a, n_s),
            reward=np.asarray(data["reward"], dtype=float).reshape(n_s, n_a),
            initial_dist=np.asarray(data["initial_dist"], dtype=float),
            discount=float(data["discount"]),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "Mdp":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class TabularPolicy:
    """Row-stochastic table ``probs[s, a] = pi(a|s)``."""

    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        if probs.ndim != 2:
            raise ValueError("policy table must be 2-D")
        probs = _check_simplex(probs, axis=1, what="policy")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "TabularPolicy":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @classmethod
    def deterministic(cls, actions, n_actions: int) -> "TabularPolicy":
        actions = np.asarray(actions, dtype=int)
        probs = np.zeros((actions.size, n_actions))
        probs[np.arange(actions.size), actions] = 1.0
        return cls(probs)

    @classmethod
    def random(cls, n_states: int, n_actions: int, rng: np.random.Generator) -> "TabularPolicy":
        return cls(rng.dirichlet(np.ones(n_actions), size=n_states))


@dataclass(frozen=True)
class EvalResult:
    v: np.ndarray
    q: np.ndarray
    adv: np.ndarray
    visit: np.ndarray
    eta: float


def _check_shapes(mdp: Mdp, policy: TabularPolicy) -> None:
    if policy.probs.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(
            f"policy shape {policy.probs.shape} does not match MDP ({mdp.n_states}, {mdp.n_actions})"
        )


def evaluate(mdp: Mdp, policy: TabularPolicy) -> EvalResult:
    """Exact V, Q, A, discounted visitation and eta of ``policy``."""
    _check_shapes(mdp, policy)
    pi = policy.probs
    gamma = mdp.discount
    P_pi = np.einsum("sa,sat->st", pi, mdp.transition)
    r_pi = np.einsum("sa,sa->s", pi, mdp.reward)
    system = np.eye(mdp.n_states) - gamma * P_pi
    try:
        v = np.linalg.solve(system, r_pi)
        visit = np.linalg.solve(system.T, mdp.initial_dist)
    except np.linalg.LinAlgError as exc:  # impossible for gamma < 1
        raise RuntimeError("singular policy-evaluation system") from exc
    q = mdp.reward + gamma * mdp.transition @ v
    adv = q - v[:, None]
    eta = float(mdp.initial_dist @ v)
    return EvalResult(v=v, q=q, adv=adv, visit=visit, eta=eta)


def policy_advantage(mdp: Mdp, base_eval: EvalResult, candidate: TabularPolicy) -> float:
    """``sum_s rho_base(s) sum_a candidate(a|s) A_base(s, a)``."""
    _check_shapes(mdp, candidate)
    return float(base_eval.visit @ np.einsum("sa,sa->s", candidate.probs, base_eval.adv))


def surrogate_L(mdp: Mdp, base: TabularPolicy, base_eval: EvalResult, candidate: TabularPolicy) -> float:
    """Linearised objective: eta(base) plus the policy advantage of ``candidate``."""
    _check_shapes(mdp, base)
    return base_eval.eta + policy_advantage(mdp, base_eval, candidate)


def greedy_actions(adv: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximiser, i.e. the lowest action index on ties
    return np.argmax(adv, axis=1)


def greedy_policy(mdp: Mdp, base_eval: EvalResult) -> TabularPolicy:
    return TabularPolicy.deterministic(greedy_actions(base_eval.adv), mdp.n_actions)


def optimal_advantage(mdp: Mdp, base_eval: EvalResult) -> float:
    """Maximum policy advantage; zero exactly at optimal policies."""
    return float(base_eval.visit @ base_eval.adv.max(axis=1))


def value_iteration(mdp: Mdp, tol: float = 1e-12, max_iters: int = 100_000) -> tuple[TabularPolicy, float]:
    """Greedy policy of the converged optimal value function and its exact eta."""
    v = np.zeros(mdp.n_states)
    gamma = mdp.discount
    for _ in range(max_iters):
        q = mdp.reward + gamma * mdp.transition @ v
        v_new = q.max(axis=1)
        if np.max(np.abs(v_new - v)) <= tol * (1.0 - gamma):
            v = v_new
            break
        v = v_new
    q = mdp.reward + gamma * mdp.transition @ v
    policy = TabularPolicy.deterministic(np.argmax(q, axis=1), mdp.n_actions)
    return policy, evaluate(mdp, policy).eta


def random_mdp(n_states: int, n_actions: int, discount: float, rng: np.random.Generator) -> Mdp:
    """Dense random MDP with Dirichlet transitions and uniform rewards in [0, 1]."""
    P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    r = rng.uniform(0.0, 1.0, size=(n_states, n_actions))
    rho0 = rng.dirichlet(np.ones(n_states))
    # keep the start distribution comfortably away from zero
    rho0 = 0.5 * rho0 + 0.5 / n_states
    return Mdp(P, r, rho0, discount)


# Tabular softmax parameterisation, used to check first-order matching.


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_policy(logits: np.ndarray) -> TabularPolicy:
    return TabularPolicy(softmax(np.asarray(logits, dtype=float)))


def softmax_policy_gradient(mdp: Mdp, logits: np.ndarray) -> np.ndarray:
    """Analytic gradient of eta with respect to tabular softmax logits.

    Uses ``d pi(a|s) / d z(s, b) = pi(a|s) (1[a=b] - pi(b|s))`` together with
    ``sum_a pi(a|s) A(s, a) = 0``.
    """
    policy = softmax_policy(logits)
    ev = evaluate(mdp, policy)
    return ev.visit[:, None] * policy.probs * ev.adv
