"""Desk-scale environments with exactly known dynamics.

Discrete environments wrap a finite MDP and can export it for exact
evaluation. The linear-quadratic family (point masses, scalar LQ) has linear
dynamics and quadratic costs, so the return of any linear Gaussian policy is
available in closed form through the second-moment recursion

    M_{t+1} = F M_t F' + B diag(sigma^2) B',   F = A + B W,

with per-step expected reward ``-(tr M_t + c (tr(W M_t W') + sum sigma^2))``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg, optimize

from .gaussian_policy import CategoricalPolicyParams, GaussianPolicyParams
from .mdp_core import Mdp, TabularPolicy, evaluate

ENV_KINDS = ("chain", "gridworld", "point_mass_1d", "point_mass_2d", "lq_scalar", "tabular")


@dataclass(frozen=True)
class EnvSpec:
    kind: str
    observation_dim: int
    action_dim: int
    horizon: int
    discrete: bool

    def __post_init__(self):
        if self.kind not in ENV_KINDS:
            raise ValueError(f"unknown env kind {self.kind!r}")
        if self.observation_dim < 1 or self.action_dim < 1 or self.horizon < 1:
            raise ValueError("dimensions and horizon must be positive")


@dataclass(frozen=True)
class StepResult:
    next_state: object
    reward: float
    done: bool


class Env:
    """Shared stepping interface. ``step`` ends the episode on a terminal state
    or once ``horizon`` steps have been taken since the last ``reset``."""

    spec: EnvSpec
    discount: float

    def __init__(self):
        self._rng = np.random.default_rng()
        self._t = 0

    def reset(self, seed: int | None = None):
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        self._t = 0
        return self._initial_state()

    def step(self, state, action) -> StepResult:
        next_state, reward = self._transition(state, action)
        self._t += 1
        done = self.is_terminal(next_state) or self._t >= self.spec.horizon
        return StepResult(next_state, float(reward), bool(done))

    def is_terminal(self, state) -> bool:
        return False

    def _initial_state(self):
        raise NotImplementedError

    def _transition(self, state, action):
        raise NotImplementedError


class TabularEnv(Env):
    """Samples a finite MDP. ``outcome_reward[s, a, s']`` may depend on the
    successor; the exported MDP carries its expectation."""

    def __init__(self, transition, outcome_reward, initial_dist, discount, horizon=64, terminal=(), kind="tabular"):
        super().__init__()
        self.transition = np.asarray(transition, dtype=float)
        self.outcome_reward = np.asarray(outcome_reward, dtype=float)
        if self.outcome_reward.shape != self.transition.shape:
            raise ValueError("outcome_reward must match the transition tensor shape")
        self.initial_dist = np.asarray(initial_dist, dtype=float)
        self.discount = float(discount)
        self.terminal = frozenset(int(s) for s in terminal)
        n_s, n_a, _ = self.transition.shape
        self.spec = EnvSpec(kind, n_s, n_a, int(horizon), True)
        self._cdf = np.cumsum(self.transition, axis=2)

    @classmethod
    def from_mdp(cls, mdp: Mdp, horizon: int = 64, terminal=()) -> "TabularEnv":
        reward = np.repeat(mdp.reward[:, :, None], mdp.n_states, axis=2)
        return cls(mdp.transition, reward, mdp.initial_dist, mdp.discount, horizon, terminal)

    @property
    def n_states(self) -> int:
        return self.spec.observation_dim

    @property
    def n_actions(self) -> int:
        return self.spec.action_dim

    def is_terminal(self, state) -> bool:
        return int(state) in self.terminal

    def _initial_state(self):
        return int(self._rng.choice(self.n_states, p=self.initial_dist))

    def _transition(self, state, action):
        s, a = int(state), int(action)
        u = self._rng.random()
        nxt = int(np.searchsorted(self._cdf[s, a], u, side="right"))
        nxt = min(nxt, self.n_states - 1)
        return nxt, self.outcome_reward[s, a, nxt]

    def exact_mdp(self) -> Mdp:
        reward = np.einsum("sat,sat->sa", self.transition, self.outcome_reward)
        return Mdp(self.transition, reward, self.initial_dist, self.discount)

    def exact_eta(self, policy) -> float:
        return evaluate(self.exact_mdp(), tabular_view(policy, self.n_states)).eta


def tabular_view(policy, n_states: int) -> TabularPolicy:
    """Action table of a categorical policy on states ``0..n_states-1``."""
    if not isinstance(policy, CategoricalPolicyParams):
        raise TypeError("exact tabular evaluation needs a categorical policy")
    return TabularPolicy(policy.probs(np.arange(n_states)))


def chain(length: int = 8, slip: float = 0.1, discount: float = 0.9, horizon: int = 64, start: str = "uniform") -> TabularEnv:
    """Chain of ``length`` states; action 0 moves left, action 1 moves right.

    Moves succeed with probability ``1 - slip`` and go the other way
    otherwise, clipped at both ends. Moving right from the last state pays
    +1; everything else pays 0. ``start`` is ``"uniform"`` or ``"left"``
    (a point mass on state 0, which cannot be exported as an ``Mdp``).
    """
    P = np.zeros((length, 2, length))
    R = np.zeros((length, 2, length))
    for s in range(length):
        left, right = max(s - 1, 0), min(s + 1, length - 1)
        P[s, 0, left] += 1.0 - slip
        P[s, 0, right] += slip
        P[s, 1, right] += 1.0 - slip
        P[s, 1, left] += slip
    R[length - 1, 1, :] = 1.0
    if start == "uniform":
        rho0 = np.full(length, 1.0 / length)
    elif start == "left":
        rho0 = np.zeros(length)
        rho0[0] = 1.0
    else:
        raise ValueError(f"unknown start {start!r}")
    return TabularEnv(P, R, rho0, discount, horizon, kind="chain")


GRID_MOVES = ((-1, 0), (0, 1), (1, 0), (0, -1))  # up, right, down, left


def gridworld(
    size: int = 4,
    walls=((1, 1), (1, 2)),
    goal=(3, 3),
    step_penalty: float = -0.04,
    goal_reward: float = 1.0,
    discount: float = 0.9,
    horizon: int = 64,
) -> TabularEnv:
    """Deterministic grid; bumping into a wall or the border leaves the agent
    in place and still costs ``step_penalty``. Entering the goal pays
    ``goal_reward`` and ends the episode. States index the free cells in
    row-major order; ``env.cells`` maps indices back to (row, col)."""
    wall_set = {tuple(w) for w in walls}
    cells = [(r, c) for r in range(size) for c in range(size) if (r, c) not in wall_set]
    index = {cell: i for i, cell in enumerate(cells)}
    goal = tuple(goal)
    n = len(cells)
    P = np.zeros((n, 4, n))
    R = np.zeros((n, 4, n))
    for i, (r, c) in enumerate(cells):
        for a, (dr, dc) in enumerate(GRID_MOVES):
            if (r, c) == goal:
                P[i, a, i] = 1.0
                continue
            nr, nc = r + dr, c + dc
            target = (nr, nc) if 0 <= nr < size and 0 <= nc < size and (nr, nc) not in wall_set else (r, c)
            j = index[target]
            P[i, a, j] = 1.0
            R[i, a, j] = goal_reward if target == goal else step_penalty
    env = TabularEnv(P, R, np.full(n, 1.0 / n), discount, horizon, terminal=(index[goal],), kind="gridworld")
    env.cells = cells
    return env


class LinearQuadraticEnv(Env):
    """``x' = A x + B a``, reward ``-(x'x + c a'a)``, ``x0 ~ U[-init_scale, init_scale]^d``."""

    def __init__(self, A, B, control_cost=0.1, init_scale=1.0, discount=0.9, horizon=64, kind="lq_scalar"):
        super().__init__()
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self.B = np.atleast_2d(np.asarray(B, dtype=float))
        d, n = self.B.shape
        if self.A.shape != (d, d):
            raise ValueError("A must be square and match B's row count")
        self.control_cost = float(control_cost)
        self.init_scale = float(init_scale)
        self.discount = float(discount)
        self.spec = EnvSpec(kind, d, n, int(horizon), False)

    @property
    def initial_second_moment(self) -> np.ndarray:
        return np.eye(self.spec.observation_dim) * self.init_scale**2 / 3.0

    def _initial_state(self):
        return self._rng.uniform(-self.init_scale, self.init_scale, size=self.spec.observation_dim)

    def _transition(self, state, action):
        x = np.asarray(state, dtype=float).reshape(-1)
        a = np.asarray(action, dtype=float).reshape(-1)
        reward = -(x @ x + self.control_cost * (a @ a))
        return self.A @ x + self.B @ a, reward

    def linear_eta(self, gain, std=None) -> float:
        """Exact return of ``a = gain @ x + std * eps`` over the finite horizon."""
        W = np.atleast_2d(np.asarray(gain, dtype=float))
        var = np.zeros(self.spec.action_dim) if std is None else np.asarray(std, dtype=float) ** 2
        F = self.A + self.B @ W
        noise = self.B @ np.diag(var) @ self.B.T
        M = self.initial_second_moment
        total, disc = 0.0, 1.0
        for _ in range(self.spec.horizon):
            total -= disc * (np.trace(M) + self.control_cost * (np.trace(W @ M @ W.T) + var.sum()))
            M = F @ M @ F.T + noise
            disc *= self.discount
        return float(total)

    def exact_eta(self, policy: GaussianPolicyParams) -> float:
        if policy.spec.kind != "linear" or policy.spec.feature_dim != self.spec.observation_dim:
            raise TypeError("closed-form return needs a linear mean on the raw state")
        return self.linear_eta(policy.theta_mu, policy.std)

    def riccati_gain(self) -> np.ndarray:
        """Infinite-horizon discounted LQR gain (used to seed the finite-horizon search)."""
        g = np.sqrt(self.discount)
        Q = np.eye(self.spec.observation_dim)
        Rm = self.control_cost * np.eye(self.spec.action_dim)
        P = linalg.solve_discrete_are(g * self.A, g * self.B, Q, Rm)
        return -np.linalg.solve(Rm + self.discount * self.B.T @ P @ self.B, self.discount * self.B.T @ P @ self.A)

    def optimal_linear(self) -> tuple[np.ndarray, float]:
        """Best stationary deterministic linear gain for the finite-horizon return."""
        shape = (self.spec.action_dim, self.spec.observation_dim)
        k0 = self.riccati_gain()
        if k0.size == 1:
            k = float(k0.ravel()[0])
            res = optimize.minimize_scalar(
                lambda w: -self.linear_eta([[w]]), bracket=(k - 0.1, k, k + 0.1), tol=1e-12
            )
            gain = np.array([[res.x]])
        else:
            res = optimize.minimize(
                lambda w: -self.linear_eta(w.reshape(shape)), k0.ravel(), method="BFGS", options={"gtol": 1e-10}
            )
            gain = res.x.reshape(shape)
        return gain, self.linear_eta(gain)

    def optimal_eta(self) -> float:
        return self.optimal_linear()[1]


def point_mass_1d(control_cost: float = 0.1, discount: float = 0.9, horizon: int = 64) -> LinearQuadraticEnv:
    return LinearQuadraticEnv([[1.0]], [[1.0]], control_cost, 1.0, discount, horizon, kind="point_mass_1d")


def point_mass_2d(control_cost: float = 0.1, discount: float = 0.9, horizon: int = 64) -> LinearQuadraticEnv:
    return LinearQuadraticEnv(np.eye(2), np.eye(2), control_cost, 1.0, discount, horizon, kind="point_mass_2d")


def lq_scalar(a: float = 1.1, b: float = 0.5, control_cost: float = 0.1, discount: float = 0.9, horizon: int = 64) -> LinearQuadraticEnv:
    return LinearQuadraticEnv([[a]], [[b]], control_cost, 1.0, discount, horizon, kind="lq_scalar")


def make_env(kind: str, **params) -> Env:
    factories = {
        "chain": chain,
        "gridworld": gridworld,
        "point_mass_1d": point_mass_1d,
        "point_mass_2d": point_mass_2d,
        "lq_scalar": lq_scalar,
    }
    if kind not in factories:
        raise ValueError(f"unknown env kind {kind!r}; choose from {sorted(factories)}")
    return factories[kind](**params)


def reset(env: Env, seed: int | None = None):
    return env.reset(seed)


def step(env: Env, state, action) -> StepResult:
    return env.step(state, action)


def exact_mdp(env: TabularEnv) -> Mdp:
    return env.exact_mdp()
