"""Reference computations written independently of the package internals.

They use different numerical routes (fixed-point iteration, power series,
vertex enumeration, forward sums, generic LP solvers) so agreement with the
package is meaningful.
"""
from fractions import Fraction
from itertools import combinations

import numpy as np
from scipy.optimize import linprog

# frozen constants, derived by exact rational arithmetic (see notes in each test)
CHAIN_ETA_STAR = Fraction(18481561210003, 3070972090220)  # length 8, slip 0.1, discount 0.9, uniform start
CHAIN_UNIFORM_POLICY_ETA = Fraction(5, 8)
POINT_MASS_OPT_GAIN = -0.9075511829917800547  # horizon 64, c = 0.1, discount 0.9
POINT_MASS_OPT_ETA = -0.3635850394330593352
POINT_MASS_INIT_ETA = -93.46754077917473004  # zero gain, unit std


def evaluate_by_iteration(P, R, rho0, gamma, pi, tol=1e-15):
    """Bellman fixed-point iteration for V and a truncated power series for the visitation."""
    P_pi = np.einsum("sa,sat->st", pi, P)
    r_pi = np.einsum("sa,sa->s", pi, R)
    v = np.zeros(len(r_pi))
    while True:
        v_new = r_pi + gamma * P_pi @ v
        if np.max(np.abs(v_new - v)) < tol:
            v = v_new
            break
        v = v_new
    visit = np.zeros(len(r_pi))
    term = np.array(rho0, dtype=float)
    while np.max(np.abs(term)) > tol * 1e-3:
        visit += term
        term = gamma * term @ P_pi
    q = R + gamma * P @ v
    return v, q, q - v[:, None], visit, float(rho0 @ v)


def optimal_values_by_iteration(P, R, gamma, tol=1e-15):
    v = np.zeros(P.shape[0])
    while True:
        v_new = (R + gamma * P @ v).max(axis=1)
        if np.max(np.abs(v_new - v)) < tol:
            return v_new
        v = v_new


def tv_lp_vertices(rho, q, adv, delta):
    """2-state / 2-action surrogate maximum by enumerating polygon vertices.

    Variables ``p_s = pi(a=0|s)``; feasible set ``0 <= p <= 1`` and
    ``sum_s rho_s |p_s - q_s| <= delta``.
    """
    lines = [((1.0, 0.0), 0.0), ((1.0, 0.0), 1.0), ((0.0, 1.0), 0.0), ((0.0, 1.0), 1.0)]
    lines += [((1.0, 0.0), q[0]), ((0.0, 1.0), q[1])]
    for a in (1.0, -1.0):
        for b in (1.0, -1.0):
            lines.append(((a * rho[0], b * rho[1]), delta + a * rho[0] * q[0] + b * rho[1] * q[1]))
    best = -np.inf
    for (n1, c1), (n2, c2) in combinations(lines, 2):
        M = np.array([n1, n2])
        if abs(np.linalg.det(M)) < 1e-14:
            continue
        p = np.linalg.solve(M, [c1, c2])
        if np.any(p < -1e-12) or np.any(p > 1 + 1e-12):
            continue
        if rho[0] * abs(p[0] - q[0]) + rho[1] * abs(p[1] - q[1]) > delta + 1e-12:
            continue
        best = max(best, sum(rho[s] * (p[s] * adv[s, 0] + (1 - p[s]) * adv[s, 1]) for s in range(2)))
    return best


def tv_lp_linprog(rho, pi, adv, delta):
    """General weighted-TV surrogate LP via HiGHS, with slack variables for |.|."""
    S, A = pi.shape
    n = S * A
    c = np.concatenate([-(rho[:, None] * adv).ravel(), np.zeros(n)])
    A_ub, b_ub = [], []
    for i in range(n):
        row = np.zeros(2 * n)
        row[i], row[n + i] = 1.0, -1.0
        A_ub.append(row)
        b_ub.append(pi.ravel()[i])
        row = np.zeros(2 * n)
        row[i], row[n + i] = -1.0, -1.0
        A_ub.append(row)
        b_ub.append(-pi.ravel()[i])
    A_ub.append(np.concatenate([np.zeros(n), 0.5 * np.repeat(rho, A)]))
    b_ub.append(delta)
    A_eq = np.zeros((S, 2 * n))
    for s in range(S):
        A_eq[s, s * A : (s + 1) * A] = 1.0
    res = linprog(c, A_ub=np.array(A_ub), b_ub=b_ub, A_eq=A_eq, b_eq=np.ones(S), bounds=[(0, 1)] * n + [(0, None)] * n, method="highs")
    assert res.status == 0
    return -res.fun


def gae_forward(rewards, values, next_values, terminal_last, gamma, lam):
    """Forward definition on one episode segment: sum_l (gamma lam)^l delta_{t+l}."""
    T = len(rewards)
    boot = np.array(next_values, dtype=float)
    if terminal_last:
        boot[-1] = 0.0
    td = rewards + gamma * boot - values
    return np.array([sum((gamma * lam) ** (l - t) * td[l] for l in range(t, T)) for t in range(T)])


def diag_gaussian_kl(mu0, s0, mu1, s1):
    return float(np.sum(np.log(s1 / s0) + (s0**2 + (mu0 - mu1) ** 2) / (2 * s1**2) - 0.5))


def point_mass_eta(gain, std, horizon=64, c=0.1, gamma=0.9):
    """Scalar recursion for E[x_t^2] under a = gain x + std eps."""
    m, total, disc = 1.0 / 3.0, 0.0, 1.0
    for _ in range(horizon):
        total -= disc * (m * (1 + c * gain * gain) + c * std * std)
        m = (1 + gain) ** 2 * m + std * std
        disc *= gamma
    return total
