"""Acceptance suite: each test checks one criterion at its stated tolerance and
logs a single PASS/FAIL line (shown in the pytest terminal summary)."""
import time

import numpy as np
import pytest

from stro.cli import main
from stro.envs import chain, point_mass_1d
from stro.gaussian_policy import CategoricalPolicyParams, GaussianPolicyParams, MeanModelSpec
from stro.mdp_core import TabularPolicy, evaluate, greedy_policy, optimal_advantage, random_mdp, value_iteration
from stro.numerics import CgConfig, central_difference, conjugate_gradient, relative_error
from stro.sampler_estimators import TrajectoryBatch, collect, empirical_L_g_D, gae
from stro.stro_driver import StroConfig, TrustRegionState, RejectedTrial, accept_or_reject, run_stro
from stro.tabular_tr import TrConfig, run, solve_tv_subproblem

from criteria import record
from oracles import POINT_MASS_INIT_ETA, POINT_MASS_OPT_ETA, gae_forward, tv_lp_vertices

# chain settings for the stochastic monotonicity check: a full-buffer inner
# solve, lower-variance advantages and a smaller starting radius
CHAIN_RUN = dict(N=4096, minibatch_size=100_000, gae_lambda=0.5, mu0=0.01, mu_min=0.005, mu_max=0.5, total_steps=200_000)
SEEDS = range(5)


@pytest.fixture(scope="module")
def tabular_runs():
    runs, elapsed = [], 0.0
    for seed in range(20):
        mdp = random_mdp(5, 3, 0.9, np.random.default_rng(seed))
        init = TabularPolicy.uniform(5, 3)
        t0 = time.perf_counter()
        trace = run(mdp, init, TrConfig(max_iters=500))
        elapsed += time.perf_counter() - t0
        runs.append((mdp, init, trace))
    return runs, elapsed


@pytest.fixture(scope="module")
def point_mass_runs():
    env = point_mass_1d()
    cfg = StroConfig(N=2048, mu0=0.05, mu_min=0.01, mu_max=0.1, gamma1=2.0, gamma2=0.8, gamma3=0.6, total_steps=200_000)
    results, t0 = [], time.perf_counter()
    for seed in SEEDS:
        pol = GaussianPolicyParams.init(MeanModelSpec("linear", 1, 1), log_std=0.0)
        results.append(run_stro(env, pol, StroConfig(**{**cfg.__dict__, "seed": seed})))
    return cfg, results, time.perf_counter() - t0


def test_criterion_1_tabular_convergence(tabular_runs):
    runs, elapsed = tabular_runs
    gaps, iters = [], []
    for mdp, _, trace in runs:
        gaps.append(abs(trace.final_eta - value_iteration(mdp)[1]))
        iters.append(len(trace.records) - 1)
    ok = max(gaps) <= 1e-6 and max(iters) <= 500 and elapsed < 30.0
    record(1, "tabular convergence", ok, f"max gap={max(gaps):.2e} max iters={max(iters)} runtime={elapsed:.2f}s")
    assert ok


def test_criterion_2_lemma_bounds(tabular_runs):
    # replay every run and recompute each bound from exact quantities
    runs, _ = tabular_runs
    violations = {"improvement": 0, "ratio": 0, "feasibility": 0}
    checked = 0
    for mdp, init, trace in runs:
        g, p0 = mdp.discount, mdp.initial_dist.min()
        policy = init
        for rec in trace.records:
            if np.isnan(rec.ratio):
                continue
            ev = evaluate(mdp, policy)
            astar = optimal_advantage(mdp, ev)
            trial = solve_tv_subproblem(mdp, policy, ev, rec.delta)
            gain = float(ev.visit @ (trial.probs * ev.adv).sum(axis=1))
            trial_eta = evaluate(mdp, trial).eta
            ratio = (trial_eta - ev.eta) / gain
            low = min(1.0, (1 - g) * rec.delta) * astar
            abar = np.abs(ev.adv).max()
            ratio_bound = 1 - 4 * abar * g * rec.delta**2 / (p0**2 * (1 - g) ** 2 * low)
            tv = 0.5 * float(ev.visit @ np.abs(trial.probs - policy.probs).sum(axis=1))
            violations["improvement"] += bool(gain < low - 1e-9)
            violations["ratio"] += bool(ratio < ratio_bound - 1e-9)
            violations["feasibility"] += bool(tv > rec.delta + 1e-9)
            assert ratio == pytest.approx(rec.ratio, abs=1e-9)
            checked += 1
            if rec.accepted:
                policy = trial
    total = sum(violations.values())
    record(2, "lemma bound suite", total == 0, f"{checked} iterations, violations={violations}")
    assert total == 0


def test_criterion_3_subproblem_exactness():
    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng(1000 + seed)
        mdp = random_mdp(2, 2, 0.9, rng)
        base = TabularPolicy.random(2, 2, rng)
        ev = evaluate(mdp, base)
        delta = float(rng.uniform(0.0, 3.0))
        out = solve_tv_subproblem(mdp, base, ev, delta)
        got = float(ev.visit @ (out.probs * ev.adv).sum(axis=1))
        worst = max(worst, abs(got - tv_lp_vertices(ev.visit, base.probs[:, 0], ev.adv, delta)))
    record(3, "subproblem exactness", worst <= 1e-9, f"50 instances, max objective gap={worst:.2e}")
    assert worst <= 1e-9


def _cg_error(rng):
    worst = 0.0
    for _ in range(10):
        Q, _ = np.linalg.qr(rng.standard_normal((50, 50)))
        A = Q @ np.diag(np.geomspace(1.0, 1e3, 50)) @ Q.T
        b = rng.standard_normal(50)
        x = conjugate_gradient(lambda v: A @ v, b, CgConfig(residual_tol=1e-13)).x
        worst = max(worst, relative_error(x, np.linalg.solve(A, b)))
    return worst


def _fvp_error(rng):
    spec = MeanModelSpec("linear", 3, 2)
    pol = GaussianPolicyParams(spec, rng.standard_normal((2, 3)), 0.3 * rng.standard_normal(2))
    states = rng.standard_normal((8, 3))
    theta, P, h = pol.flat(), pol.n_params, 1e-4
    E = np.eye(P) * h

    def D(x):
        return float(np.mean(pol.kl(pol.with_flat(x), states)))

    H = np.array(
        [[(D(theta + E[i] + E[j]) - D(theta + E[i] - E[j]) - D(theta - E[i] + E[j]) + D(theta - E[i] - E[j])) / (4 * h * h) for j in range(P)] for i in range(P)]
    )
    return max(relative_error(pol.fvp(states, v, damping=0.0), H @ v) for v in rng.standard_normal((5, P)))


def _logprob_error(rng):
    worst = 0.0
    for _ in range(10):
        pol = GaussianPolicyParams(MeanModelSpec("linear", 3, 2), rng.standard_normal((2, 3)), 0.3 * rng.standard_normal(2))
        s = rng.standard_normal(3)
        a = pol.sample(s, rng)
        fd = central_difference(lambda x: float(pol.with_flat(x).log_prob(s, a)[0]), pol.flat())
        worst = max(worst, relative_error(pol.grad_log_prob(s, a)[0], fd))
    return worst


def _surrogate_error(rng):
    env = point_mass_1d()
    old = GaussianPolicyParams(MeanModelSpec("linear", 1, 1), [[-0.3]], [-0.2])
    batch = collect(env, old, 256, int(rng.integers(1 << 30)))
    adv = rng.standard_normal(256)
    new = old.with_flat(old.flat() + 0.1 * rng.standard_normal(2))
    fd = central_difference(lambda x: empirical_L_g_D(old.with_flat(x), old, batch, adv).L, new.flat())
    return relative_error(empirical_L_g_D(new, old, batch, adv).g, fd)


def _gae_error(rng):
    worst = 0.0
    for _ in range(500):
        T = int(rng.integers(1, 51))
        lam = float(rng.choice([0.0, 0.5, 0.95, 1.0]))
        terminal = bool(rng.integers(2))
        V = rng.standard_normal(6)
        s, s2, r = rng.integers(0, 6, T), rng.integers(0, 6, T), rng.standard_normal(T)
        dones, cuts = np.zeros(T, bool), np.zeros(T, bool)
        dones[-1], cuts[-1] = terminal, not terminal
        batch = TrajectoryBatch(s, np.zeros(T, int), r, s2, dones, cuts, np.zeros(T, int), np.arange(T), np.array([]), 0.9)
        got = gae(batch, lambda x: V[np.asarray(x)], 0.9, lam).values
        worst = max(worst, float(np.max(np.abs(got - gae_forward(r, V[s], V[s2], terminal, 0.9, lam)))))
    return worst


def test_criterion_4_numerical_kernels():
    rng = np.random.default_rng(2024)
    checks = [
        ("cg", _cg_error(rng), 1e-8),
        ("fvp", _fvp_error(rng), 1e-4),
        ("logprob_grad", _logprob_error(rng), 1e-5),
        ("surrogate_grad", _surrogate_error(rng), 1e-5),
        ("gae", _gae_error(rng), 1e-10),
    ]
    ok = all(err <= tol for _, err, tol in checks)
    record(4, "numerical kernels", ok, " ".join(f"{n}={e:.1e}(tol {t:.0e})" for n, e, t in checks))
    assert ok


def test_criterion_5_monotone_improvement(tabular_runs):
    runs, _ = tabular_runs
    det_bad = 0
    for _, _, trace in runs:
        etas = [r.eta for r in trace.records]
        det_bad += sum(b < a - 1e-12 for a, b in zip(etas, etas[1:]))
    env = chain(horizon=64)
    mdp = env.exact_mdp()
    pairs = good = 0
    greedy_match = []
    for seed in SEEDS:
        pol = CategoricalPolicyParams(MeanModelSpec("tabular", 8, 2))
        res = run_stro(env, pol, StroConfig(**CHAIN_RUN, seed=seed))
        etas = [res.records[0].eta_exact_old] + [r.eta_exact_new for r in res.records if r.decision in ("accept", "force")]
        pairs += len(etas) - 1
        good += sum(b >= a - 1e-12 for a, b in zip(etas, etas[1:]))
        table = TabularPolicy(res.policy.probs(np.arange(8)))
        mine = greedy_policy(mdp, evaluate(mdp, table)).probs.argmax(axis=1)
        best = value_iteration(mdp)[0].probs.argmax(axis=1)
        greedy_match.append(float(np.mean(mine == best)))
    frac = good / max(pairs, 1)
    ok = det_bad == 0 and pairs > 0 and frac >= 0.95
    record(5, "monotone improvement", ok, f"deterministic violations={det_bad}; stochastic nondecreasing pairs={good}/{pairs} ({frac:.3f}); greedy match={greedy_match}")
    assert ok
    assert min(greedy_match) >= 0.9


def test_criterion_6_point_mass_learning(point_mass_runs):
    _, results, elapsed = point_mass_runs
    env = point_mass_1d()
    assert env.linear_eta([[0.0]], [1.0]) == pytest.approx(POINT_MASS_INIT_ETA, abs=1e-9)
    finals = [env.exact_eta(r.policy) for r in results]
    steps = max(r.records[-1].steps for r in results)
    recovery = [(f - POINT_MASS_INIT_ETA) / (POINT_MASS_OPT_ETA - POINT_MASS_INIT_ETA) for f in finals]
    med = float(np.median(recovery))
    ok = med >= 0.8 and steps <= 200_000 and elapsed < 600.0
    record(6, "point-mass learning", ok, f"median recovery={med:.3f} per seed={[round(x, 3) for x in recovery]} steps={steps} runtime={elapsed:.1f}s")
    assert ok


def _fake_batch(eta, size):
    return TrajectoryBatch(
        np.zeros(1, int), np.zeros(1, int), np.array([eta]), np.zeros(1, int), np.ones(1, bool), np.zeros(1, bool),
        np.zeros(1, int), np.zeros(1, int), np.array([eta]), 0.9, size=size,
    )


def test_criterion_7_mechanisms(point_mass_runs):
    cfg, results, _ = point_mass_runs
    problems = []
    # synthetic history: four rejections then a force picking the best eta_hat
    c = StroConfig(N=2048)
    state = TrustRegionState("theta0", 0.05, _fake_batch(0.0, 2048))
    decisions = []
    for i, eta in enumerate([3.0, 5.0, 1.0, 2.0, 9.0]):
        d, state = accept_or_reject(state, f"t{i}", _fake_batch(eta, 2048), -1.0, c, resample=lambda: _fake_batch(0.0, 2048))
        decisions.append(d)
    if decisions != ["reject"] * 4 + ["force"] or state.policy != "t1":
        problems.append(f"synthetic force sequence {decisions} -> {state.policy}")
    state = TrustRegionState("x", 0.05, _fake_batch(0.0, 10), history=(RejectedTrial("a", _fake_batch(3.0, 10)), RejectedTrial("b", _fake_batch(5.0, 10))))
    if accept_or_reject(state, "c", _fake_batch(0.0, 10), -1.0, StroConfig(N=10, N_max=10))[1].policy != "b":
        problems.append("argmax over H")
    forces = 0
    for res in results:
        prev = cfg.N
        for rec in res.records:
            if (rec.decision == "force") != (rec.decision != "accept" and prev >= cfg.buffer_cap):
                problems.append(f"force timing at iter {rec.iter}")
            forces += rec.decision == "force"
            if not rec.sigma_step <= rec.sigma_bound:
                problems.append(f"sigma box at iter {rec.iter}")
            if rec.entropy - rec.entropy_trial > 1 * rec.sigma_bound + 1e-12:
                problems.append(f"entropy decay at iter {rec.iter}")
            prev = rec.buffer_size
    n_iters = sum(len(r.records) for r in results)
    record(7, "mechanism checks", not problems, f"{n_iters} iterations, {forces} forced acceptances in runs, problems={problems[:3]}")
    assert not problems


def test_criterion_8_determinism(tmp_path):
    cfg = tmp_path / "pm.toml"
    cfg.write_text('seeds = [0, 1]\n[env]\nkind = "point_mass_1d"\n[stro]\nN = 512\ntotal_steps = 10000\n')
    tab = tmp_path / "chain.toml"
    tab.write_text('[env]\nkind = "chain"\n')
    for name in ("a", "b"):
        assert main(["stro", "--config", str(cfg), "--out", str(tmp_path / name)]) == 0
        assert main(["tabular", "--config", str(tab), "--out", str(tmp_path / name / "tab")]) == 0
    files = ["seed_0/run.csv", "seed_1/run.csv", "aggregate.csv", "tab/trace.csv"]
    same = [(tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files]
    record(8, "determinism", all(same), f"byte-identical: {dict(zip(files, same))}")
    assert all(same)
