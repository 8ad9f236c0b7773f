"""Command-line entry point: ``stro {tabular, stro, verify}``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import fields
from importlib import metadata
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import sampler_estimators
from .envs import TabularEnv, make_env
from .gaussian_policy import CategoricalPolicyParams, GaussianPolicyParams, MeanModelSpec
from .mdp_core import Mdp, TabularPolicy, evaluate, random_mdp, surrogate_L, value_iteration
from .numerics import CgConfig, central_difference, conjugate_gradient, relative_error
from .sampler_estimators import TrajectoryBatch, empirical_L_g_D
from .stro_driver import RECORD_COLUMNS, StroConfig, TrustRegionState, accept_or_reject, run_stro, write_records_csv
from .tabular_tr import TrConfig, check_lemmas, run, solve_tv_subproblem

log = logging.getLogger("stro")

CSV_SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


def load_config(path) -> dict:
    path = Path(path)
    try:
        if path.suffix == ".toml":
            with open(path, "rb") as fh:
                return tomllib.load(fh)
        with open(path) as fh:
            return json.load(fh)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def _section(cfg: dict, name: str) -> dict:
    sec = cfg.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"[{name}] must be a table")
    return dict(sec)


def _dataclass_from(cls, data: dict):
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {unknown}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {cls.__name__}: {exc}") from exc


def parse_seeds(text: str | None, default) -> list[int]:
    if text is None:
        return [int(s) for s in default]
    try:
        return [int(tok) for tok in text.split(",") if tok.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --seeds value {text!r}") from exc


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def _write_manifest(out: Path, config: dict, seeds, layout: dict) -> None:
    manifest = {"version": _version(), "csv_schema": CSV_SCHEMA_VERSION, "seeds": list(seeds), "config": config, "layout": layout}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# tabular


def build_mdp(env_cfg: dict) -> Mdp:
    env_cfg = dict(env_cfg)
    kind = env_cfg.pop("kind", "chain")
    try:
        if kind == "random":
            seed = int(env_cfg.pop("seed", 0))
            return random_mdp(
                int(env_cfg.get("n_states", 5)), int(env_cfg.get("n_actions", 3)), float(env_cfg.get("discount", 0.9)), np.random.default_rng(seed)
            )
        if kind == "file":
            return Mdp.load(env_cfg["path"])
        env = make_env(kind, **env_cfg)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [env]: {exc}") from exc
    if not isinstance(env, TabularEnv):
        raise ConfigError(f"env kind {kind!r} has no exact tabular model")
    return env.exact_mdp()


def cmd_tabular(args) -> int:
    cfg = load_config(args.config)
    mdp = build_mdp(_section(cfg, "env"))
    tr = _dataclass_from(TrConfig, _section(cfg, "tr"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trace = run(mdp, TabularPolicy.uniform(mdp.n_states, mdp.n_actions), tr)
    trace.write_csv(out / "trace.csv")
    _, eta_star = value_iteration(mdp)
    print(f"final eta={trace.final_eta!r} Astar={trace.final_Astar!r} iterations={len(trace.records) - 1} eta_star={eta_star!r}")
    code = 0
    if args.check_lemmas:
        report = check_lemmas(trace)
        for key, val in report.as_dict().items():
            print(f"  {key}: {val}")
        print("lemma checks:", "PASS" if report.ok else "FAIL")
        code = 0 if report.ok else 1
    _write_manifest(out, cfg, [], {"trace": "trace.csv"})
    return code


# stochastic runs


def build_policy(env, policy_cfg: dict):
    spec = env.spec
    family = policy_cfg.get("family", "categorical" if spec.discrete else "gaussian")
    if family == "categorical":
        if not spec.discrete:
            raise ConfigError("categorical policy needs a discrete env")
        return CategoricalPolicyParams(MeanModelSpec("tabular", spec.observation_dim, spec.action_dim))
    if family == "gaussian":
        if spec.discrete:
            raise ConfigError("gaussian policy needs a continuous env")
        return GaussianPolicyParams.init(
            MeanModelSpec("linear", spec.observation_dim, spec.action_dim), log_std=float(policy_cfg.get("init_log_std", 0.0))
        )
    raise ConfigError(f"unknown policy family {family!r}")


def _numeric_columns():
    return [c for c in RECORD_COLUMNS if c not in ("iter", "decision")]


def write_aggregate(per_seed: list[list], path) -> None:
    """Mean and population std across seeds for each numeric column, per iteration."""
    n = min(len(r) for r in per_seed) if per_seed else 0
    cols = _numeric_columns()
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iter"] + [f"{c}_{s}" for c in cols for s in ("mean", "std")])
        for i in range(n):
            row = [i]
            for c in cols:
                vals = np.array([float(getattr(recs[i], c)) for recs in per_seed])
                with np.errstate(invalid="ignore"):  # -inf ratios give a nan spread
                    row += [repr(float(np.mean(vals))), repr(float(np.std(vals)))]
            w.writerow(row)


def cmd_stro(args) -> int:
    cfg = load_config(args.config)
    env_cfg = _section(cfg, "env")
    kind = env_cfg.pop("kind", "point_mass_1d")
    try:
        env = make_env(kind, **env_cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [env]: {exc}") from exc
    stro_cfg = _section(cfg, "stro")
    seeds = parse_seeds(args.seeds, cfg.get("seeds", [stro_cfg.get("seed", 0)]))
    every = int(cfg.get("checkpoint_every", 0))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    all_records = []
    for seed in seeds:
        config = _dataclass_from(StroConfig, {**stro_cfg, "seed": seed})
        policy = build_policy(env, _section(cfg, "policy"))
        seed_dir = out / f"seed_{seed}"
        seed_dir.mkdir(exist_ok=True)

        def checkpoint(k, state, rec, seed_dir=seed_dir):
            if every and (k + 1) % every == 0:
                (seed_dir / f"checkpoint_{k + 1:05d}.json").write_text(json.dumps(state.policy.to_dict(), sort_keys=True) + "\n")

        t0 = time.perf_counter()
        result = run_stro(make_env(kind, **env_cfg), policy, config, callback=checkpoint)
        write_records_csv(result.records, seed_dir / "run.csv")
        (seed_dir / "final_policy.json").write_text(json.dumps(result.policy.to_dict(), sort_keys=True) + "\n")
        last = result.records[-1] if result.records else None
        print(
            f"seed {seed}: iterations={len(result.records)} final eta_hat={last.eta_hat_old if last else float('nan')!r} "
            f"eta_exact={last.eta_exact_new if last else float('nan')!r} ({time.perf_counter() - t0:.1f}s)"
        )
        all_records.append(result.records)
    write_aggregate(all_records, out / "aggregate.csv")
    _write_manifest(out, cfg, seeds, {"per_seed": "seed_<seed>/run.csv", "aggregate": "aggregate.csv"})
    return 0


# verification suite


def _check_cg(rng):
    worst = 0.0
    for _ in range(5):
        M = rng.standard_normal((50, 50))
        A = M @ M.T + 50.0 * np.eye(50)
        b = rng.standard_normal(50)
        x = conjugate_gradient(lambda v: A @ v, b, CgConfig(residual_tol=1e-12)).x
        worst = max(worst, relative_error(x, np.linalg.solve(A, b)))
    return worst


def _random_gaussian(rng, f=3, n=2):
    spec = MeanModelSpec("linear", f, n)
    return GaussianPolicyParams(spec, rng.standard_normal((n, f)), 0.3 * rng.standard_normal(n)), rng.standard_normal((6, f))


def _check_fvp(rng):
    pol, states = _random_gaussian(rng)
    theta = pol.flat()
    h = 1e-4

    def D(x):
        return float(np.mean(pol.kl(pol.with_flat(x), states)))

    P = theta.size
    H = np.zeros((P, P))
    for i in range(P):
        for j in range(P):
            ei, ej = np.eye(P)[i] * h, np.eye(P)[j] * h
            H[i, j] = (D(theta + ei + ej) - D(theta + ei - ej) - D(theta - ei + ej) + D(theta - ei - ej)) / (4 * h * h)
    v = rng.standard_normal(P)
    return relative_error(pol.fvp(states, v, damping=0.0), H @ v)


def _check_logprob_grad(rng):
    pol, states = _random_gaussian(rng)
    actions = rng.standard_normal((len(states), 2))
    analytic = pol.grad_log_prob(states, actions)
    worst = 0.0
    for i in range(len(states)):
        fd = central_difference(lambda x: float(pol.with_flat(x).log_prob(states[i : i + 1], actions[i : i + 1])[0]), pol.flat())
        worst = max(worst, relative_error(analytic[i], fd))
    return worst


def _synthetic_batch(rng, states, actions):
    n = len(states)
    return TrajectoryBatch(
        states=states,
        actions=actions,
        rewards=rng.standard_normal(n),
        next_states=states,
        dones=np.ones(n, dtype=bool),
        cuts=np.zeros(n, dtype=bool),
        episode_ids=np.arange(n),
        steps=np.zeros(n, dtype=int),
        episode_returns=rng.standard_normal(n),
        gamma=0.9,
    )


def _check_L_grad(rng):
    old, states = _random_gaussian(rng)
    new = old.with_flat(old.flat() + 0.1 * rng.standard_normal(old.n_params))
    batch = _synthetic_batch(rng, states, np.array([old.sample(s, rng) for s in states]))
    adv = rng.standard_normal(len(states))
    g = empirical_L_g_D(new, old, batch, adv).g
    fd = central_difference(lambda x: empirical_L_g_D(new.with_flat(x), old, batch, adv).L, new.flat())
    return relative_error(g, fd)


def _check_gae(rng):
    gamma, lam = 0.97, 0.9
    worst = 0.0
    for _ in range(500):
        T = int(rng.integers(1, 30))
        rewards = rng.standard_normal(T)
        values = rng.standard_normal(T + 1)
        terminal = bool(rng.random() < 0.5)
        dones = np.zeros(T, dtype=bool)
        cuts = np.zeros(T, dtype=bool)
        (dones if terminal else cuts)[-1] = True
        next_values = values[1:].copy()
        if terminal:
            next_values[-1] = 0.0
        adv = sampler_estimators._gae_backward(rewards, values[:T], next_values, dones, cuts, gamma, lam)
        td = rewards + gamma * next_values - values[:T]
        fwd = np.array([sum((gamma * lam) ** (l - t) * td[l] for l in range(t, T)) for t in range(T)])
        worst = max(worst, float(np.max(np.abs(adv - fwd)) / max(1.0, float(np.max(np.abs(fwd))))))
    return worst


def _tv_vertex_value(rho, q, adv, delta):
    """Best objective of the 2-state, 2-action TV problem by vertex enumeration."""
    lines = [((1, 0), 0), ((1, 0), 1), ((0, 1), 0), ((0, 1), 1), ((1, 0), q[0]), ((0, 1), q[1])]
    for s0 in (1, -1):
        for s1 in (1, -1):
            lines.append(((s0 * rho[0], s1 * rho[1]), delta + s0 * rho[0] * q[0] + s1 * rho[1] * q[1]))
    best = -np.inf
    for i in range(len(lines)):
        for j in range(i + 1, len(lines)):
            M = np.array([lines[i][0], lines[j][0]], dtype=float)
            if abs(np.linalg.det(M)) < 1e-14:
                continue
            p = np.linalg.solve(M, [lines[i][1], lines[j][1]])
            if np.any(p < -1e-12) or np.any(p > 1 + 1e-12):
                continue
            if rho[0] * abs(p[0] - q[0]) + rho[1] * abs(p[1] - q[1]) > delta + 1e-12:
                continue
            val = sum(rho[s] * (p[s] * adv[s, 0] + (1 - p[s]) * adv[s, 1]) for s in range(2))
            best = max(best, val)
    return best


def _check_tv_lp(rng):
    worst = 0.0
    for _ in range(50):
        mdp = random_mdp(2, 2, 0.9, rng)
        base = TabularPolicy(rng.dirichlet(np.ones(2), size=2))
        ev = evaluate(mdp, base)
        delta = float(rng.uniform(0.01, 3.0))
        cand = solve_tv_subproblem(mdp, base, ev, delta)
        got = surrogate_L(mdp, base, ev, cand) - ev.eta
        want = _tv_vertex_value(ev.visit, base.probs[:, 0], ev.adv, delta)
        worst = max(worst, abs(got - want))
    return worst


def _check_lemmas(rng):
    violations = 0
    for _ in range(5):
        mdp = random_mdp(5, 3, 0.9, rng)
        report = check_lemmas(run(mdp, TabularPolicy.uniform(5, 3)))
        violations += report.improvement_violations + report.ratio_violations + report.feasibility_violations
    return float(violations)


def _check_forced(rng):
    cfg = StroConfig(N=2)

    def batch(eta):
        return TrajectoryBatch(
            states=np.zeros(2, dtype=int), actions=np.zeros(2, dtype=int), rewards=np.zeros(2), next_states=np.zeros(2, dtype=int),
            dones=np.ones(2, dtype=bool), cuts=np.zeros(2, dtype=bool), episode_ids=np.arange(2), steps=np.zeros(2, dtype=int),
            episode_returns=np.array([eta, eta]), gamma=0.9,
        )

    state = TrustRegionState(policy="theta0", mu=0.05, buffer=batch(0.0))
    decisions = []
    for k, eta in enumerate([3.0, 5.0, 1.0, 2.0, 4.0]):
        decision, state = accept_or_reject(state, f"trial{k}", batch(eta), -1.0, cfg, lambda: batch(0.0))
        decisions.append(decision)
    ok = decisions == ["reject"] * 4 + ["force"] and state.policy == "trial1" and state.buffer.size == cfg.N
    return 0.0 if ok else 1.0


VERIFY_CHECKS = (
    ("cg_vs_dense_solve", 1e-8, _check_cg),
    ("fvp_vs_fd_kl_hessian", 1e-4, _check_fvp),
    ("log_prob_grad_vs_fd", 1e-5, _check_logprob_grad),
    ("surrogate_grad_vs_fd", 1e-5, _check_L_grad),
    ("gae_backward_vs_forward_sum", 1e-10, _check_gae),
    ("tv_subproblem_vs_vertex_oracle", 1e-9, _check_tv_lp),
    ("lemma_bound_violations", 0.0, _check_lemmas),
    ("forced_acceptance_mechanics", 0.0, _check_forced),
)


def run_verify(seed: int = 0, mutate: str | None = None) -> list[tuple[str, float, float, bool]]:
    original = sampler_estimators._gae_backward
    if mutate == "gae-sign":

        def flipped(rewards, values, next_values, dones, cuts, gamma, lam):
            return -original(rewards, values, next_values, dones, cuts, gamma, lam)

        sampler_estimators._gae_backward = flipped
    elif mutate is not None:
        raise ConfigError(f"unknown mutation {mutate!r}")
    rows = []
    try:
        for i, (name, tol, fn) in enumerate(VERIFY_CHECKS):
            try:
                err = float(fn(np.random.default_rng([seed, i])))
            except Exception as exc:  # a crashing check is a failing check
                log.error("check %s raised %r", name, exc)
                err = float("inf")
            rows.append((name, tol, err, bool(err <= tol)))
    finally:
        sampler_estimators._gae_backward = original
    return rows


def cmd_verify(args) -> int:
    rows = run_verify(args.seed, args.mutate)
    width = max(len(r[0]) for r in rows)
    for name, tol, err, ok in rows:
        print(f"{'PASS' if ok else 'FAIL'}  {name:<{width}}  tol={tol:.1e}  err={err:.3e}")
    passed = all(r[3] for r in rows)
    print(f"{sum(r[3] for r in rows)}/{len(rows)} checks passed")
    return 0 if passed else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stro", description="Trust-region policy optimization experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    t = sub.add_parser("tabular", help="exact tabular trust-region run")
    t.add_argument("--config", required=True)
    t.add_argument("--out", default="out_tabular")
    t.add_argument("--check-lemmas", action="store_true")
    t.set_defaults(func=cmd_tabular)
    s = sub.add_parser("stro", help="stochastic trust-region runs over seeds")
    s.add_argument("--config", required=True)
    s.add_argument("--seeds", default=None, help='comma-separated, e.g. "0,1,2"')
    s.add_argument("--out", default="out_stro")
    s.set_defaults(func=cmd_stro)
    v = sub.add_parser("verify", help="run the oracle and property checks")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--mutate", choices=["gae-sign"], default=None, help="inject a known bug to confirm the checks catch it")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
