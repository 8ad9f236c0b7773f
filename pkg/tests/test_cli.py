import csv
import json
import re

import numpy as np
import pytest

from stro import sampler_estimators
from stro.cli import main
from stro.mdp_core import value_iteration
from stro.envs import chain
from stro.stro_driver import RECORD_COLUMNS

CHAIN_TOML = """
[env]
kind = "chain"

[tr]
delta0 = 0.1
"""

STRO_TOML = """
seeds = [0, 1]
checkpoint_every = 2

[env]
kind = "point_mass_1d"

[stro]
N = 256
total_steps = 4000

[policy]
family = "gaussian"
init_log_std = 0.0
"""


def write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text)
    return path


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


class TestTabular:
    def test_chain_run(self, tmp_path, capsys):
        cfg = write(tmp_path, "chain.toml", CHAIN_TOML)
        assert main(["tabular", "--config", str(cfg), "--out", str(tmp_path / "out")]) == 0
        line = capsys.readouterr().out
        astar = float(re.search(r"Astar=(\S+)", line).group(1))
        eta = float(re.search(r"final eta=(\S+)", line).group(1))
        assert astar < 1e-6
        assert eta == pytest.approx(value_iteration(chain().exact_mdp())[1], abs=1e-6)
        rows = read_csv(tmp_path / "out" / "trace.csv")
        assert list(rows[0]) == ["iter", "eta", "delta", "ratio", "Astar", "accepted"]
        assert json.loads((tmp_path / "out" / "manifest.json").read_text())["config"]["env"]["kind"] == "chain"

    def test_check_lemmas(self, tmp_path, capsys):
        cfg = write(tmp_path, "chain.json", json.dumps({"env": {"kind": "random", "n_states": 5, "n_actions": 3, "seed": 4}}))
        assert main(["tabular", "--config", str(cfg), "--out", str(tmp_path / "out"), "--check-lemmas"]) == 0
        assert "lemma checks: PASS" in capsys.readouterr().out

    @pytest.mark.parametrize(
        "text",
        ["[env\nkind = 'chain'", "[env]\nkind = 'nowhere'\n", "[env]\nkind = 'chain'\n[tr]\nbeta0 = 5.0\n", "[env]\nkind='chain'\n[tr]\nwhat = 1\n"],
    )
    def test_malformed_config(self, tmp_path, capsys, text):
        cfg = write(tmp_path, "bad.toml", text)
        code = main(["tabular", "--config", str(cfg), "--out", str(tmp_path / "out")])
        assert code != 0
        assert capsys.readouterr().err.strip()

    def test_missing_config(self, tmp_path):
        assert main(["tabular", "--config", str(tmp_path / "missing.toml")]) != 0


class TestStro:
    def test_seeds_and_aggregate(self, tmp_path):
        cfg = write(tmp_path, "pm.toml", STRO_TOML)
        out = tmp_path / "out"
        assert main(["stro", "--config", str(cfg), "--out", str(out)]) == 0
        runs = [read_csv(out / f"seed_{s}" / "run.csv") for s in (0, 1)]
        assert all(tuple(r[0]) == RECORD_COLUMNS for r in runs)
        assert (out / "seed_0" / "final_policy.json").exists()
        assert (out / "seed_0" / "checkpoint_00002.json").exists()
        agg = read_csv(out / "aggregate.csv")
        assert len(agg) == min(len(r) for r in runs)
        for i, row in enumerate(agg):
            for col in ("eta_hat_old", "delta", "mu"):
                vals = [float(r[i][col]) for r in runs]
                assert float(row[f"{col}_mean"]) == pytest.approx(np.mean(vals), rel=1e-12)
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["seeds"] == [0, 1]

    def test_seed_flag_overrides(self, tmp_path):
        cfg = write(tmp_path, "pm.toml", STRO_TOML)
        out = tmp_path / "out"
        assert main(["stro", "--config", str(cfg), "--out", str(out), "--seeds", "3"]) == 0
        assert sorted(p.name for p in out.iterdir() if p.is_dir()) == ["seed_3"]

    def test_reruns_identical(self, tmp_path):
        cfg = write(tmp_path, "pm.toml", STRO_TOML)
        for name in ("a", "b"):
            assert main(["stro", "--config", str(cfg), "--out", str(tmp_path / name)]) == 0
        for rel in ("seed_0/run.csv", "seed_1/run.csv", "aggregate.csv", "manifest.json", "seed_1/final_policy.json"):
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_bad_seeds(self, tmp_path):
        cfg = write(tmp_path, "pm.toml", STRO_TOML)
        assert main(["stro", "--config", str(cfg), "--out", str(tmp_path / "o"), "--seeds", "a,b"]) == 2

    def test_policy_env_mismatch(self, tmp_path):
        cfg = write(tmp_path, "pm.toml", STRO_TOML.replace('family = "gaussian"', 'family = "categorical"'))
        assert main(["stro", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


class TestVerify:
    def test_clean_passes(self, capsys):
        assert main(["verify"]) == 0
        out = capsys.readouterr().out
        for name in ("cg_vs_dense_solve", "gae_backward_vs_forward_sum", "tv_subproblem_vs_vertex_oracle", "lemma_bound_violations"):
            assert re.search(rf"PASS\s+{name}\s+tol=", out)
        assert "FAIL" not in out

    def test_gae_mutant_caught(self, capsys):
        original = sampler_estimators._gae_backward
        assert main(["verify", "--mutate", "gae-sign"]) == 1
        assert re.search(r"FAIL\s+gae_backward_vs_forward_sum", capsys.readouterr().out)
        assert sampler_estimators._gae_backward is original
