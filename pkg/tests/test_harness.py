import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from mgspa.attacks import AttackSpec
from mgspa.envs import make_env
from mgspa.harness import (
    CSV_HEADER,
    EvalStats,
    evaluate_env,
    evaluate_toy,
    load_config,
    read_csv,
    resolve_config,
    robustness_matrix,
    run_command,
    write_csv,
)
from mgspa.model import ConfigurationError, build_toy_two_player, toy_nash_policy, uniform_policy
from mgspa.rmaac import RmaacConfig, make_bundle

TINY = {
    "hyperparameters.episodes": 3,
    "hyperparameters.hidden": 8,
    "hyperparameters.batch_size": 16,
    "hyperparameters.warmup": 32,
    "hyperparameters.iteration_steps": 2,
    "hyperparameters.update_every": 5,
    "hyperparameters.steps_per_episode": 10,
}


def test_empty_file_gives_table_five_defaults(tmp_path):
    p = tmp_path / "empty.yaml"
    p.write_text("")
    cfg = load_config(p)
    hp = cfg.hyperparameters
    assert (hp["gamma"], hp["tau"], hp["epsilon"]) == (0.95, 0.01, 0.5)
    assert (hp["lr_actor"], hp["lr_adversary"], hp["iteration_steps"], hp["steps_per_episode"]) == (0.01, 0.005, 20, 25)


def test_precedence(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump({"hyperparameters": {"gamma": 0.9, "tau": 0.05}}))
    cfg = load_config(p, ["hyperparameters.gamma=0.99"])
    assert cfg.hyperparameters["gamma"] == 0.99
    assert cfg.hyperparameters["tau"] == 0.05


def test_misspelled_key_is_named(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump({"hyperparameters": {"gama": 0.9}}))
    with pytest.raises(ConfigurationError, match="hyperparameters.gama"):
        load_config(p)


def test_type_mismatch_is_named():
    with pytest.raises(ConfigurationError, match="hyperparameters.batch_size"):
        resolve_config({"hyperparameters": {"batch_size": "many"}})
    with pytest.raises(ConfigurationError, match="attack"):
        resolve_config({"attacks": [{"family": "f1", "strength": 3}]})


def test_csv_round_trip(tmp_path):
    rows = [{"a": 0.1 + 0.2, "b": "x", "c": 3}, {"a": -1e-300, "b": "y", "c": -4}]
    path = write_csv(tmp_path / "t.csv", ["a", "b", "c"], rows)
    assert path.read_text().splitlines()[0] == CSV_HEADER
    assert read_csv(path) == rows


def test_eval_stats_variance_non_negative():
    assert EvalStats(1.0, -1e-18, 0.0, 1, 0).reward_variance == 0.0


def test_toy_evaluation_examples():
    toy = build_toy_two_player()
    for p in (0.0, 0.5, 1.0):
        re = evaluate_toy(toy, uniform_policy(toy), p, episodes=1, steps=10_000, seed=0)
        ne = evaluate_toy(toy, toy_nash_policy(1), p, episodes=1, steps=10_000, seed=0)
        assert re.mean_step_reward == pytest.approx(0.5, abs=0.03)
        assert ne.mean_step_reward == pytest.approx(1 - p, abs=0.03)


def test_zero_reward_env_evaluation():
    env = make_env("zero-reward", horizon=5)
    bd = make_bundle(2, env.obs_dim, env.act_dim, RmaacConfig(hidden=8), np.random.default_rng(0))
    st = evaluate_env(env, bd, AttackSpec("f4"), None, episodes=3, seed=0)
    assert st.mean_episode_reward == 0.0 and st.reward_variance == 0.0


def test_incompatible_policy():
    env = make_env("particle-nav")
    bd = make_bundle(2, 3, 2, RmaacConfig(hidden=8), np.random.default_rng(0))
    with pytest.raises(ConfigurationError):
        evaluate_env(env, bd, AttackSpec("none"), None, 1, 0)


def test_toy_matrix_shape_and_determinism(tmp_path):
    over = {"command": "matrix", "evaluation.attack_probs": [0.0, 0.5, 1.0], "evaluation.steps": 2000, "evaluation.episodes": 1}
    cfg = resolve_config(None, over)
    rows = robustness_matrix(cfg, tmp_path / "a")
    assert len(rows) == 6
    robustness_matrix(cfg, tmp_path / "b")
    assert (tmp_path / "a" / "matrix.csv").read_bytes() == (tmp_path / "b" / "matrix.csv").read_bytes()
    ne = [r["mean"] for r in rows if r["policy"] == "ne"]
    assert ne[0] > ne[1] > ne[2]


@pytest.fixture(scope="module")
def trained_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    dirs = []
    for name, adv in (("robust", True), ("baseline", False)):
        cfg = resolve_config(None, TINY | {"command": "train-rmaac", "hyperparameters.adversary": adv})
        run_command(cfg, root / name)
        dirs.append(root / name / "seed0")
    return dirs


def test_training_run_directory(trained_runs):
    run = trained_runs[0]
    for f in ("config.yaml", "bundle.json", "adversary_checkpoint.json", "curve.csv"):
        assert (run / f).exists()
    assert len(read_csv(run / "curve.csv")) == 3


def test_env_matrix_cardinality_and_failed_rows(trained_runs, tmp_path):
    over = TINY | {
        "command": "matrix",
        "evaluation.policies": [str(trained_runs[0]), str(trained_runs[1])],
        "evaluation.adversary": str(trained_runs[0]),
        "evaluation.episodes": 2,
        "attacks": [{"family": "none"}, {"family": "f1"}, {"family": "f3"}],
    }
    rows = robustness_matrix(resolve_config(None, over), tmp_path)
    assert len(rows) == 6 and all(r["status"] == "ok" for r in rows)
    over["evaluation.policies"] = [str(trained_runs[0]), str(tmp_path / "missing")]
    over["evaluation.adversary"] = None
    rows = robustness_matrix(resolve_config(None, over), tmp_path / "m")
    assert len(rows) == 6
    assert sum(r["status"].startswith("failed") for r in rows) == 3


def test_seed_list_writes_per_seed_and_aggregate(tmp_path):
    over = {"command": "matrix", "seeds": [0, 1], "evaluation.attack_probs": [0.25], "evaluation.steps": 500}
    rows = robustness_matrix(resolve_config(None, over), tmp_path)
    assert (tmp_path / "matrix_seed0.csv").exists() and (tmp_path / "matrix_seed1.csv").exists()
    per = [read_csv(tmp_path / f"matrix_seed{s}.csv")[1]["mean"] for s in (0, 1)]
    assert rows[1]["mean"] == pytest.approx(np.mean(per))
    assert rows[1]["variance"] == pytest.approx(np.var(per))
    assert rows[1]["seeds"] == "0;1"


def test_display_shift_column(tmp_path):
    over = {"command": "matrix", "evaluation.policies": ["ne"], "evaluation.attack_probs": [0.0], "evaluation.steps": 100}
    robustness_matrix(resolve_config(None, over), tmp_path)
    row = read_csv(tmp_path / "matrix.csv")[0]
    assert row["display_mean_plus_100"] == pytest.approx(row["mean"] + 100)


def _cli(*args, cwd):
    return subprocess.run([sys.executable, "-m", "mgspa.cli", *args], capture_output=True, text=True, cwd=cwd)


def test_cli_plan_and_gamma_flag(tmp_path):
    res = _cli("plan", "--gamma", "0.9", "--out", "p", cwd=tmp_path)
    assert res.returncode == 0, res.stderr
    out = json.loads(res.stdout)
    assert np.allclose(out["v_star"], 5.0, atol=1e-4)
    echoed = yaml.safe_load((tmp_path / "p" / "config.yaml").read_text())
    assert echoed["planning"]["gamma"] == 0.9


def test_cli_error_record(tmp_path):
    res = _cli("plan", "--set", "planning.tolerance=1", cwd=tmp_path)
    assert res.returncode == 2
    err = json.loads(res.stderr.strip().splitlines()[-1])
    assert err["error"] == "configuration" and "planning.tolerance" in err["message"]
    res = _cli("evaluate", "--set", "evaluation.policy=nowhere.json", "--out", "e", cwd=tmp_path)
    assert res.returncode == 1
    assert json.loads(res.stderr.strip().splitlines()[-1])["type"] == "FileNotFoundError"


def test_cli_solve_stage_and_determinism(tmp_path):
    for name in ("a", "b"):
        res = _cli("train-rmaq", "--seed", "4", "--out", name, "--set", "rmaq.episodes=3", cwd=tmp_path)
        assert res.returncode == 0, res.stderr
    assert (tmp_path / "a/seed4/curve.csv").read_bytes() == (tmp_path / "b/seed4/curve.csv").read_bytes()
    res = _cli("solve-stage", "--out", "s", cwd=tmp_path)
    assert res.returncode == 0
    assert json.loads(res.stdout)["game_value"] == pytest.approx(50.0, abs=1e-3)
