"""Policy parameterisations for the sampled track.

Two families share one duck-typed interface over a flat parameter vector:

* ``GaussianPolicyParams``: diagonal Gaussian with a tabular or linear mean
  map and a state-independent log standard deviation.
* ``CategoricalPolicyParams``: softmax over tabular or linear logits.

Both expose analytic log-probability gradients, closed-form KL and entropy,
and a matrix-free Fisher-vector product (the Hessian of the mean KL at the
current parameters).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))
DEFAULT_SIGMA_FLOOR = float(np.exp(-20.0))
DEFAULT_DAMPING = 1e-8


@dataclass(frozen=True)
class MeanModelSpec:
    """How states map to features: one-hot (``tabular``) or raw vectors (``linear``)."""

    kind: str
    feature_dim: int
    action_dim: int

    def __post_init__(self):
        if self.kind not in ("tabular", "linear"):
            raise ValueError(f"unknown mean model kind {self.kind!r}")
        if self.feature_dim < 1 or self.action_dim < 1:
            raise ValueError("dimensions must be positive")

    def features(self, states) -> np.ndarray:
        if self.kind == "tabular":
            idx = np.asarray(states, dtype=int).reshape(-1)
            if idx.size and (idx.min() < 0 or idx.max() >= self.feature_dim):
                raise ValueError("state index out of range")
            return np.eye(self.feature_dim)[idx]
        phi = np.asarray(states, dtype=float)
        if phi.ndim <= 1 and self.feature_dim == 1:
            phi = phi.reshape(-1, 1)
        elif phi.ndim == 1:
            phi = phi.reshape(1, -1)
        if phi.shape[1] != self.feature_dim:
            raise ValueError(f"expected {self.feature_dim} features, got {phi.shape[1]}")
        return phi

    def to_dict(self) -> dict:
        return {"kind": self.kind, "feature_dim": self.feature_dim, "action_dim": self.action_dim}


def _flat_batch(spec: MeanModelSpec, states):
    """Features for a batch; a single state is promoted to a batch of one."""
    if spec.kind == "tabular":
        return spec.features(np.atleast_1d(states))
    arr = np.asarray(states, dtype=float)
    if arr.ndim == 0 or (arr.ndim == 1 and spec.feature_dim > 1):
        arr = arr.reshape(1, -1)
    return spec.features(arr)


@dataclass(frozen=True)
class GaussianPolicyParams:
    """``pi(.|s) = N(W phi(s), diag(exp(2 log_std)))``."""

    spec: MeanModelSpec
    theta_mu: np.ndarray
    log_std: np.ndarray
    sigma_floor: float = DEFAULT_SIGMA_FLOOR

    def __post_init__(self):
        n, f = self.spec.action_dim, self.spec.feature_dim
        theta_mu = np.array(self.theta_mu, dtype=float).reshape(n, f)
        log_std = np.array(self.log_std, dtype=float).reshape(n)
        if not (np.all(np.isfinite(theta_mu)) and np.all(np.isfinite(log_std))):
            raise ValueError("policy parameters must be finite")
        floor = np.log(self.sigma_floor)
        if np.any(log_std < floor):
            log.warning("sigma floor clamp activated: log_std %s raised to %.3f", log_std, floor)
            log_std = np.maximum(log_std, floor)
        theta_mu.setflags(write=False)
        log_std.setflags(write=False)
        object.__setattr__(self, "theta_mu", theta_mu)
        object.__setattr__(self, "log_std", log_std)

    @classmethod
    def init(cls, spec: MeanModelSpec, log_std: float = 0.0, **kw) -> "GaussianPolicyParams":
        return cls(spec, np.zeros((spec.action_dim, spec.feature_dim)), np.full(spec.action_dim, log_std), **kw)

    # flat parameter vector: [theta_mu.ravel(), log_std]
    @property
    def n_params(self) -> int:
        return self.theta_mu.size + self.log_std.size

    @property
    def blocks(self) -> dict[str, slice]:
        m = self.theta_mu.size
        return {"mu": slice(0, m), "sigma": slice(m, m + self.log_std.size)}

    def flat(self) -> np.ndarray:
        return np.concatenate([self.theta_mu.ravel(), self.log_std])

    def with_flat(self, vec) -> "GaussianPolicyParams":
        vec = np.asarray(vec, dtype=float)
        m = self.theta_mu.size
        return GaussianPolicyParams(self.spec, vec[:m], vec[m:], self.sigma_floor)

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)

    def mean(self, states) -> np.ndarray:
        return _flat_batch(self.spec, states) @ self.theta_mu.T

    def sample_action(self, state, noise) -> np.ndarray:
        noise = np.asarray(noise, dtype=float).reshape(-1)
        if noise.shape != (self.spec.action_dim,):
            raise ValueError("noise dimension does not match the action dimension")
        return self.mean(state)[0] + self.std * noise

    def sample(self, state, rng: np.random.Generator) -> np.ndarray:
        return self.sample_action(state, rng.standard_normal(self.spec.action_dim))

    def _actions(self, actions, n_rows: int) -> np.ndarray:
        a = np.asarray(actions, dtype=float).reshape(n_rows, self.spec.action_dim)
        if not np.all(np.isfinite(a)):
            raise ValueError("non-finite action")
        return a

    def log_prob(self, states, actions) -> np.ndarray:
        mu = self.mean(states)
        a = self._actions(actions, mu.shape[0])
        z = (a - mu) / self.std
        return -0.5 * np.sum(z**2, axis=1) - np.sum(self.log_std) - 0.5 * self.spec.action_dim * LOG_2PI

    def grad_log_prob(self, states, actions) -> np.ndarray:
        """Per-sample gradient of the log density, shape ``(N, n_params)``."""
        phi = _flat_batch(self.spec, states)
        mu = phi @ self.theta_mu.T
        a = self._actions(actions, mu.shape[0])
        var = self.std**2
        resid = (a - mu) / var
        g_mu = np.einsum("ni,nj->nij", resid, phi).reshape(phi.shape[0], -1)
        g_sigma = (a - mu) ** 2 / var - 1.0
        return np.concatenate([g_mu, g_sigma], axis=1)

    def kl(self, new: "GaussianPolicyParams", states) -> np.ndarray:
        """Per-state ``KL(self || new)``."""
        mu_old, mu_new = self.mean(states), new.mean(states)
        var_old, var_new = self.std**2, new.std**2
        terms = new.log_std - self.log_std + (var_old + (mu_old - mu_new) ** 2) / (2.0 * var_new) - 0.5
        return terms.sum(axis=1)

    def entropy(self, states=None) -> float:
        return float(np.sum(self.log_std) + 0.5 * self.spec.action_dim * (1.0 + LOG_2PI))

    def entropies(self, states) -> np.ndarray:
        n = _flat_batch(self.spec, states).shape[0]
        return np.full(n, self.entropy())

    def fvp(self, states, vec, damping: float = DEFAULT_DAMPING) -> np.ndarray:
        """Average KL Hessian times ``vec``: ``J' Sigma^-1 J`` on the mean block, ``2 I`` on log_std."""
        phi = _flat_batch(self.spec, states)
        if phi.shape[0] == 0:
            raise ValueError("empty state batch")
        vec = np.asarray(vec, dtype=float)
        m = self.theta_mu.size
        v_mu = vec[:m].reshape(self.theta_mu.shape)
        u = (phi @ v_mu.T) / self.std**2
        out_mu = (u.T @ phi) / phi.shape[0]
        out_sigma = 2.0 * vec[m:]
        return np.concatenate([out_mu.ravel(), out_sigma]) + damping * vec

    def to_dict(self) -> dict:
        return {
            "family": "gaussian",
            "spec": self.spec.to_dict(),
            "theta_mu": self.theta_mu.tolist(),
            "theta_sigma": self.log_std.tolist(),
            "sigma_floor": self.sigma_floor,
        }


@dataclass(frozen=True)
class CategoricalPolicyParams:
    """``pi(.|s) = softmax(W phi(s))`` over ``spec.action_dim`` actions."""

    spec: MeanModelSpec
    logits: np.ndarray = field(default=None)

    def __post_init__(self):
        shape = (self.spec.action_dim, self.spec.feature_dim)
        w = np.zeros(shape) if self.logits is None else np.array(self.logits, dtype=float).reshape(shape)
        if not np.all(np.isfinite(w)):
            raise ValueError("logits must be finite")
        w.setflags(write=False)
        object.__setattr__(self, "logits", w)

    @property
    def n_params(self) -> int:
        return self.logits.size

    @property
    def blocks(self) -> dict[str, slice]:
        return {"logits": slice(0, self.logits.size)}

    def flat(self) -> np.ndarray:
        return self.logits.ravel().copy()

    def with_flat(self, vec) -> "CategoricalPolicyParams":
        return CategoricalPolicyParams(self.spec, np.asarray(vec, dtype=float))

    def state_logits(self, states) -> np.ndarray:
        return _flat_batch(self.spec, states) @ self.logits.T

    def probs(self, states) -> np.ndarray:
        z = self.state_logits(states)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def log_probs(self, states) -> np.ndarray:
        z = self.state_logits(states)
        z = z - z.max(axis=1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=1, keepdims=True))

    def sample(self, state, rng: np.random.Generator) -> int:
        p = self.probs(state)[0]
        return int(rng.choice(p.size, p=p))

    def _actions(self, actions, n_rows: int) -> np.ndarray:
        a = np.asarray(actions).reshape(n_rows)
        return a.astype(int)

    def log_prob(self, states, actions) -> np.ndarray:
        lp = self.log_probs(states)
        a = self._actions(actions, lp.shape[0])
        return lp[np.arange(lp.shape[0]), a]

    def grad_log_prob(self, states, actions) -> np.ndarray:
        phi = _flat_batch(self.spec, states)
        p = self.probs(states)
        a = self._actions(actions, p.shape[0])
        resid = -p
        resid[np.arange(p.shape[0]), a] += 1.0
        return np.einsum("ni,nj->nij", resid, phi).reshape(p.shape[0], -1)

    def kl(self, new: "CategoricalPolicyParams", states) -> np.ndarray:
        lp_old, lp_new = self.log_probs(states), new.log_probs(states)
        return np.sum(np.exp(lp_old) * (lp_old - lp_new), axis=1)

    def entropies(self, states) -> np.ndarray:
        lp = self.log_probs(states)
        return -np.sum(np.exp(lp) * lp, axis=1)

    def entropy(self, states) -> float:
        return float(np.mean(self.entropies(states)))

    def fvp(self, states, vec, damping: float = DEFAULT_DAMPING) -> np.ndarray:
        """Average of ``J' (diag(p) - p p') J`` times ``vec`` over the batch."""
        phi = _flat_batch(self.spec, states)
        if phi.shape[0] == 0:
            raise ValueError("empty state batch")
        vec = np.asarray(vec, dtype=float)
        p = self.probs(states)
        jv = phi @ vec.reshape(self.logits.shape).T
        u = p * jv - p * np.sum(p * jv, axis=1, keepdims=True)
        return ((u.T @ phi) / phi.shape[0]).ravel() + damping * vec

    def to_dict(self) -> dict:
        return {"family": "categorical", "spec": self.spec.to_dict(), "logits": self.logits.tolist()}


def policy_from_dict(data: dict):
    spec = MeanModelSpec(**data["spec"])
    if data.get("family", "gaussian") == "categorical":
        return CategoricalPolicyParams(spec, np.asarray(data["logits"]))
    return GaussianPolicyParams(
        spec,
        np.asarray(data["theta_mu"]),
        np.asarray(data["theta_sigma"]),
        float(data.get("sigma_floor", DEFAULT_SIGMA_FLOOR)),
    )


# Functional surface over a single state.


def sample_action(params: GaussianPolicyParams, state, noise) -> np.ndarray:
    return params.sample_action(state, noise)


def log_prob(params, state, action) -> tuple[float, np.ndarray]:
    """Log density of one (state, action) pair and its gradient in flat parameters."""
    return float(params.log_prob(state, action)[0]), params.grad_log_prob(state, action)[0]


def kl_divergence(old, new, state) -> float:
    return float(old.kl(new, state)[0])


def entropy(params, states=None) -> float:
    return params.entropy(states)


def fim_vector_product(params, states, vec, damping: float = DEFAULT_DAMPING) -> np.ndarray:
    return params.fvp(states, vec, damping)
