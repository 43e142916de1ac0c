"""Configuration, evaluation and robustness matrices.

Configuration is a nested mapping (YAML on disk). Every key must appear in
``DEFAULTS``; values are type-checked against the default. Precedence is
defaults < file < command-line overrides, and each run directory receives the
resolved configuration as ``config.yaml``.
"""
from __future__ import annotations

import copy
import csv
import io
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import yaml

from .attacks import AttackSpec, apply_attack
from .envs import make_env
from .model import (
    ConfigurationError,
    JointPolicy,
    MgSpaModel,
    build_toy_two_player,
    flip_adversary,
    load_model,
    step,
    toy_nash_policy,
    uniform_policy,
)
from .nn import mlp_forward
from .planning import value_iteration
from .rmaac import RmaacConfig, act, bundle_from_dict, bundle_to_dict, frame_stack, train_rmaac
from .rmaq import LrSchedule, greedy_policy_from_q, train_rmaq
from .stage import build_stage_game, report_to_dict, solve_zero_sum, stage_game_from_dict

__all__ = [
    "DEFAULTS",
    "COMMANDS",
    "CSV_HEADER",
    "ExperimentConfig",
    "EvalStats",
    "load_config",
    "resolve_config",
    "write_config",
    "evaluate_toy",
    "evaluate_env",
    "robustness_matrix",
    "write_csv",
    "read_csv",
    "run_command",
]

log = logging.getLogger(__name__)

COMMANDS = ("plan", "train-rmaq", "train-rmaac", "evaluate", "solve-stage", "matrix")
CSV_HEADER = "# mgspa-csv v1"

# Published hyperparameter values where they exist; network and buffer sizes are desk-scale.
DEFAULTS = {
    "command": "plan",
    "model": "toy-two-player",
    "env": "particle-nav",
    "seeds": [0],
    "out": "runs",
    "hyperparameters": {
        "gamma": 0.95,
        "tau": 0.01,
        "epsilon": 0.5,
        "lr_actor": 0.01,
        "lr_critic": 0.01,
        "lr_adversary": 0.005,
        "iteration_steps": 20,
        "steps_per_episode": 25,
        "episodes": 2000,
        "hidden": 32,
        "buffer_size": 100_000,
        "batch_size": 128,
        "update_every": 25,
        "warmup": 500,
        "noise_start": 0.3,
        "noise_end": 0.05,
        "optimizer": "adam",
        "history": None,
        "adversary": True,
        "checkpoint_fraction": 0.1,
    },
    "planning": {"gamma": None, "tol": 1e-6, "max_iters": 100_000, "information": "pooled"},
    "rmaq": {
        "gamma": None,
        "episodes": 400,
        "steps_per_episode": 25,
        "alpha": 0.1,
        "schedule": "constant",
        "exploration": "uniform",
    },
    "stage": {"game": None, "method": "sequence-form-lp", "tol": 1e-8},
    "evaluation": {
        "episodes": 10,
        "steps": 1000,
        "attack_probs": [0.0, 0.25, 0.5, 0.75, 1.0],
        "policies": ["re", "ne"],
        "policy": None,
        "adversary": None,
        "display_shift": 100.0,
    },
    "attacks": [{"family": "none"}, {"family": "f1"}],
}

_ATTACK_KEYS = {"family", "epsilon", "sigma", "source"}


@dataclass
class ExperimentConfig:
    command: str
    model: str
    env: str
    seeds: list
    out: str
    hyperparameters: dict
    planning: dict
    rmaq: dict
    stage: dict
    evaluation: dict
    attacks: list

    def to_dict(self) -> dict:
        return asdict(self)

    def rmaac_config(self) -> RmaacConfig:
        hp = dict(self.hyperparameters)
        hp.pop("steps_per_episode")
        return RmaacConfig(**hp)

    def attack_specs(self) -> list[AttackSpec]:
        eps = self.hyperparameters["epsilon"]
        specs = []
        for a in self.attacks:
            kw = {"epsilon": eps} | a
            specs.append(AttackSpec(**kw))
        return specs


def _check_type(key: str, value, default):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigurationError(f"config key {key!r} expects a boolean, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"config key {key!r} expects a number, got {value!r}")
        return float(value)
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"config key {key!r} expects an integer, got {value!r}")
        return value
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigurationError(f"config key {key!r} expects a string, got {value!r}")
    if isinstance(default, list) and not isinstance(value, list):
        raise ConfigurationError(f"config key {key!r} expects a list, got {value!r}")
    return value


def _merge(base: dict, update: dict, prefix: str = "") -> None:
    for key, value in update.items():
        name = f"{prefix}{key}"
        if key not in base:
            raise ConfigurationError(f"unknown config key {name!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigurationError(f"config key {name!r} expects a mapping")
            _merge(base[key], value, name + ".")
        else:
            base[key] = _check_type(name, value, DEFAULTS_FLAT.get(name, base[key]))


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(_flatten(v, f"{prefix}{k}."))
        else:
            out[f"{prefix}{k}"] = v
    return out


DEFAULTS_FLAT = _flatten(DEFAULTS)


def _parse_override(item: str) -> tuple[str, object]:
    if "=" not in item:
        raise ConfigurationError(f"override {item!r} must look like key=value")
    key, raw = item.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def resolve_config(file_values: dict | None = None, overrides=None) -> ExperimentConfig:
    """Defaults, then ``file_values``, then ``overrides``.

    ``overrides`` maps dotted keys (``hyperparameters.gamma``) to values, or is
    a list of ``key=value`` strings with YAML-typed values.
    """
    cfg = copy.deepcopy(DEFAULTS)
    if file_values:
        if not isinstance(file_values, dict):
            raise ConfigurationError("config file must hold a mapping")
        _merge(cfg, file_values)
    if overrides:
        items = overrides.items() if isinstance(overrides, dict) else map(_parse_override, overrides)
        for key, value in items:
            nested: dict = {}
            cur = nested
            parts = key.split(".")
            for p in parts[:-1]:
                cur = cur.setdefault(p, {})
            cur[parts[-1]] = value
            _merge(cfg, nested)
    if cfg["command"] not in COMMANDS:
        raise ConfigurationError(f"unknown command {cfg['command']!r}")
    for a in cfg["attacks"]:
        if not isinstance(a, dict) or set(a) - _ATTACK_KEYS:
            raise ConfigurationError(f"attack entries take keys {sorted(_ATTACK_KEYS)}, got {a!r}")
    config = ExperimentConfig(**cfg)
    config.rmaac_config()  # validate hyperparameters early
    config.attack_specs()
    return config


def load_config(path=None, overrides=None) -> ExperimentConfig:
    values = None
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigurationError(f"config file {p} does not exist")
        values = yaml.safe_load(p.read_text()) or {}
    return resolve_config(values, overrides)


def write_config(config: ExperimentConfig, run_dir) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / "config.yaml"
    path.write_text(yaml.safe_dump(config.to_dict(), sort_keys=True))
    return path


# ---------------------------------------------------------------- CSV


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path, columns: list, rows: list[dict]) -> Path:
    """Versioned CSV: a header comment line, then a standard CSV table."""
    buf = io.StringIO()
    buf.write(CSV_HEADER + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c, "")) for c in columns])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue())
    return path


def read_csv(path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != CSV_HEADER:
        raise ConfigurationError(f"{path} is not a {CSV_HEADER!r} file")
    rows = list(csv.DictReader(lines[1:]))
    out = []
    for r in rows:
        conv = {}
        for k, v in r.items():
            try:
                conv[k] = int(v) if v.lstrip("-").isdigit() else float(v)
            except ValueError:
                conv[k] = v
        out.append(conv)
    return out


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalStats:
    mean_episode_reward: float
    reward_variance: float
    mean_discounted_return: float
    episodes: int
    seed: int
    mean_step_reward: float = 0.0

    def __post_init__(self):
        self.reward_variance = max(0.0, float(self.reward_variance))


def _stats(totals, discounted, steps: int, seed: int) -> EvalStats:
    totals = np.asarray(totals, dtype=float)
    return EvalStats(
        mean_episode_reward=float(totals.mean()),
        reward_variance=float(totals.var()),
        mean_discounted_return=float(np.mean(discounted)),
        episodes=int(totals.size),
        seed=seed,
        mean_step_reward=float(totals.mean() / steps),
    )


def evaluate_toy(model: MgSpaModel, policy: JointPolicy, p: float, episodes: int, steps: int, seed: int, agent: int = 0) -> EvalStats:
    """Play ``episodes`` games of ``steps`` steps from ``s0`` while every
    adversary independently flips its agent's observation with probability
    ``p``; rewards are agent ``agent``'s."""
    for i, tab in enumerate(policy.agent):
        if tab.shape != (model.n_states, model.agent_actions[i]):
            raise ConfigurationError("policy does not match the model")
    attacked = JointPolicy(policy.agent, flip_adversary(model, p))
    rng = np.random.default_rng(seed)
    totals, disc = [], []
    for _ in range(episodes):
        s, tot, d, g = 0, 0.0, 0.0, 1.0
        for _ in range(steps):
            res = step(model, s, attacked, rng)
            r = float(res.r[agent])
            tot += r
            d += g * r
            g *= model.gamma
            s = res.s_next
        totals.append(tot)
        disc.append(d)
    return _stats(totals, disc, steps, seed)


def _adversary_fn(nets):
    if nets is None:
        return None
    return lambda obs: np.stack([mlp_forward(n, o[None])[0] for n, o in zip(nets, obs)])


def evaluate_env(env, bundle, spec: AttackSpec, adversary_nets, episodes: int, seed: int, gamma: float = 0.95) -> EvalStats:
    """Deterministic actors (no exploration noise) under attack ``spec``."""
    if bundle.obs_dim != env.obs_dim or bundle.act_dim != env.act_dim or bundle.n_agents != env.n_agents:
        raise ConfigurationError("policy does not match the environment")
    adv = _adversary_fn(adversary_nets) if spec.needs_adversary else None
    rng = np.random.default_rng(seed)
    totals, disc = [], []
    for _ in range(episodes):
        state = env.reset(rng)
        hist = [[] for _ in range(env.n_agents)]
        tot, d, g, done = 0.0, 0.0, 1.0, False
        while not done:
            obs = apply_attack(spec, env.observe(state), adv, rng)
            a = np.zeros((env.n_agents, env.act_dim))
            for i in range(env.n_agents):
                hist[i].append(obs[i])
                x = obs[i] if bundle.history is None else frame_stack(hist[i][-bundle.h:], bundle.h)
                a[i] = act(bundle, i, x[None])[0]
            r, state, done = env.step(state, a)
            tot += r
            d += g * r
            g *= gamma
        totals.append(tot)
        disc.append(d)
    return _stats(totals, disc, env.horizon, seed)


# ---------------------------------------------------------------- sources


def build_model(config: ExperimentConfig, gamma: float | None = None) -> MgSpaModel:
    if config.model == "toy-two-player":
        return build_toy_two_player(0.99 if gamma is None else gamma)
    model = load_model(config.model)
    if gamma is not None:
        from dataclasses import replace

        model = replace(model, gamma=gamma)
    return model


def _toy_policy(name: str, model: MgSpaModel, config: ExperimentConfig) -> JointPolicy:
    if name == "re":
        rep = value_iteration(model, tol=config.planning["tol"], information=config.planning["information"])
        return rep.equilibrium_policy
    if name in ("ne", "ne1"):
        return toy_nash_policy(1)
    if name == "ne2":
        return toy_nash_policy(2)
    if name == "uniform":
        return uniform_policy(model)
    path = Path(name)
    if not path.exists():
        raise FileNotFoundError(f"policy source {name!r} not found")
    d = json.loads(path.read_text())
    return JointPolicy(d["agent"], d["adversary"])


def load_bundle(run_dir):
    path = Path(run_dir) / "bundle.json"
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint {path}")
    return bundle_from_dict(json.loads(path.read_text()))


def load_adversary(run_dir, source: str):
    if source == "nonoptimal-checkpoint":
        path = Path(run_dir) / "adversary_checkpoint.json"
        if not path.exists():
            raise FileNotFoundError(f"missing checkpoint {path}")
        from .rmaac import _net_from

        return [_net_from(n) for n in json.loads(path.read_text())]
    return load_bundle(run_dir).adversaries


# ---------------------------------------------------------------- matrix

MATRIX_COLUMNS = [
    "policy",
    "attack",
    "mean",
    "variance",
    "mean_discounted_return",
    "mean_step_reward",
    "episodes",
    "seeds",
    "status",
]


def _row(policy: str, attack: str, stats: EvalStats | None, seeds: str, shift: float, status: str = "ok") -> dict:
    row = {"policy": policy, "attack": attack, "seeds": seeds, "status": status}
    if stats is None:
        row.update(mean="", variance="", mean_discounted_return="", mean_step_reward="", episodes=0)
        row[_shift_col(shift)] = ""
        return row
    row.update(
        mean=stats.mean_episode_reward,
        variance=stats.reward_variance,
        mean_discounted_return=stats.mean_discounted_return,
        mean_step_reward=stats.mean_step_reward,
        episodes=stats.episodes,
    )
    row[_shift_col(shift)] = stats.mean_episode_reward + shift
    return row


def _shift_col(shift: float) -> str:
    return f"display_mean_plus_{shift:g}"


def _cells(config: ExperimentConfig):
    """``(policy label, attack label, evaluate(seed) -> EvalStats)`` in order."""
    ev = config.evaluation
    if _is_toy_matrix(config):
        model = build_model(config, config.planning["gamma"])
        for name in ev["policies"]:
            try:
                pol = _toy_policy(name, model, config)
                err = None
            except (FileNotFoundError, KeyError, ValueError) as exc:
                pol, err = None, exc
            for p in ev["attack_probs"]:
                if err is not None:
                    yield name, f"p={p:g}", err
                    continue
                yield name, f"p={p:g}", (lambda seed, pol=pol, p=p: evaluate_toy(model, pol, p, ev["episodes"], ev["steps"], seed))
        return
    env = make_env(config.env, horizon=config.hyperparameters["steps_per_episode"])
    gamma = config.hyperparameters["gamma"]
    for src in ev["policies"]:
        try:
            bundle = load_bundle(src)
            err = None
        except (FileNotFoundError, KeyError, ValueError) as exc:
            bundle, err = None, exc
        for spec in config.attack_specs():
            if err is not None:
                yield src, spec.label, err
                continue
            adv_dir = ev["adversary"] or src
            try:
                nets = load_adversary(adv_dir, spec.source) if spec.needs_adversary else None
            except (FileNotFoundError, KeyError, ValueError) as exc:
                yield src, spec.label, exc
                continue
            yield src, spec.label, (lambda seed, b=bundle, s=spec, n=nets: evaluate_env(env, b, s, n, ev["episodes"], seed, gamma))


def _is_toy_matrix(config: ExperimentConfig) -> bool:
    """Tabular unless some policy source is a training run directory."""
    return not any(Path(str(p)).is_dir() for p in config.evaluation["policies"])


def robustness_matrix(config: ExperimentConfig, out_dir=None) -> list[dict]:
    """Every (policy, attack) cell for every seed.

    Writes ``matrix_seed<k>.csv`` per seed and ``matrix.csv`` with one
    aggregate row per cell (mean of the per-seed means and the variance across
    seeds). Unavailable policies or checkpoints give ``failed`` rows.
    """
    shift = config.evaluation["display_shift"]
    cols = MATRIX_COLUMNS + [_shift_col(shift)]
    cells = list(_cells(config))
    per_seed = {}
    agg = []
    seeds = list(config.seeds)
    for policy, attack, fn in cells:
        results = []
        for seed in seeds:
            if isinstance(fn, Exception):
                row = _row(policy, attack, None, str(seed), shift, f"failed: {fn}")
            else:
                try:
                    st = fn(seed)
                    results.append(st)
                    row = _row(policy, attack, st, str(seed), shift)
                except Exception as exc:  # a failed cell must not stop the matrix
                    log.warning("cell %s / %s failed: %s", policy, attack, exc)
                    row = _row(policy, attack, None, str(seed), shift, f"failed: {exc}")
            per_seed.setdefault(seed, []).append(row)
        label = ";".join(str(s) for s in seeds)
        if results:
            means = np.array([r.mean_episode_reward for r in results])
            st = EvalStats(
                mean_episode_reward=float(means.mean()),
                reward_variance=float(means.var()),
                mean_discounted_return=float(np.mean([r.mean_discounted_return for r in results])),
                episodes=sum(r.episodes for r in results),
                seed=seeds[0],
                mean_step_reward=float(np.mean([r.mean_step_reward for r in results])),
            )
            status = "ok" if len(results) == len(seeds) else "partial"
            agg.append(_row(policy, attack, st, label, shift, status))
        else:
            failed = per_seed[seeds[0]][-1]["status"]
            agg.append(_row(policy, attack, None, label, shift, failed))
    if out_dir is not None:
        out = Path(out_dir)
        for seed, rows in per_seed.items():
            write_csv(out / f"matrix_seed{seed}.csv", cols, rows)
        write_csv(out / "matrix.csv", cols, agg)
    return agg


# ---------------------------------------------------------------- commands


def _policy_dict(policy: JointPolicy) -> dict:
    return {"agent": [p.tolist() for p in policy.agent], "adversary": [p.tolist() for p in policy.adversary]}


def run_plan(config: ExperimentConfig, out: Path) -> dict:
    model = build_model(config, config.planning["gamma"])
    pl = config.planning
    rep = value_iteration(model, tol=pl["tol"], max_iters=pl["max_iters"], information=pl["information"])
    rows = [
        {"agent": i, "state": model.state_names[s] if model.state_names else s, "value": rep.v_star[i, s]}
        for i in range(model.n_agents)
        for s in range(model.n_states)
    ]
    write_csv(out / "values.csv", ["agent", "state", "value"], rows)
    (out / "policy.json").write_text(json.dumps(_policy_dict(rep.equilibrium_policy), indent=1))
    summary = {"residual": rep.residual, "iterations": rep.iterations, "v_star": rep.v_star.tolist(), "gamma": model.gamma}
    (out / "report.json").write_text(json.dumps(summary, indent=1))
    return summary


def run_train_rmaq(config: ExperimentConfig, out: Path, seed: int) -> dict:
    rq = config.rmaq
    model = build_model(config, rq["gamma"])
    plan = value_iteration(model, tol=1e-8, information=config.planning["information"])
    from .planning import q_from_v

    q_star = q_from_v(model, plan.v_star[0])
    schedule = LrSchedule(rq["schedule"], rq["alpha"])
    learner, curve = train_rmaq(
        model,
        rq["episodes"],
        steps_per_episode=rq["steps_per_episode"],
        exploration=rq["exploration"],
        seed=seed,
        schedule=schedule,
        q_star=q_star,
    )
    write_csv(out / "curve.csv", ["episode", "discounted_return", "q_gap"], curve)
    (out / "q.json").write_text(json.dumps({"q": learner.q.tolist()}))
    (out / "policy.json").write_text(json.dumps(_policy_dict(greedy_policy_from_q(learner))))
    last = curve[-1] if curve else {}
    return {"seed": seed, "final": last, "skipped_updates": learner.skipped}


def run_train_rmaac(config: ExperimentConfig, out: Path, seed: int) -> dict:
    env = make_env(config.env, horizon=config.hyperparameters["steps_per_episode"])
    rc = config.rmaac_config()
    bundle, curve, checkpoint = train_rmaac(env, rc, seed=seed)
    write_csv(out / "curve.csv", ["episode", "mean_episode_reward"], curve)
    from .rmaac import _net_dict

    (out / "bundle.json").write_text(json.dumps(bundle_to_dict(bundle)))
    (out / "adversary_checkpoint.json").write_text(json.dumps([_net_dict(n) for n in checkpoint]))
    tail = [c["mean_episode_reward"] for c in curve[-100:]]
    return {"seed": seed, "episodes": len(curve), "final_mean_reward": float(np.mean(tail)) if tail else 0.0}


def run_evaluate(config: ExperimentConfig, out: Path, seed: int) -> dict:
    ev = config.evaluation
    shift = ev["display_shift"]
    cols = MATRIX_COLUMNS + [_shift_col(shift)]
    rows = []
    if ev["policy"] is None or not Path(str(ev["policy"])).is_dir():
        model = build_model(config, config.planning["gamma"])
        pol = _toy_policy(ev["policy"] or "re", model, config)
        for p in ev["attack_probs"]:
            st = evaluate_toy(model, pol, p, ev["episodes"], ev["steps"], seed)
            rows.append(_row(ev["policy"] or "re", f"p={p:g}", st, str(seed), shift))
    else:
        env = make_env(config.env, horizon=config.hyperparameters["steps_per_episode"])
        bundle = load_bundle(ev["policy"])
        for spec in config.attack_specs():
            nets = load_adversary(ev["adversary"] or ev["policy"], spec.source) if spec.needs_adversary else None
            st = evaluate_env(env, bundle, spec, nets, ev["episodes"], seed, config.hyperparameters["gamma"])
            rows.append(_row(str(ev["policy"]), spec.label, st, str(seed), shift))
    write_csv(out / "eval.csv", cols, rows)
    return {"seed": seed, "rows": len(rows)}


def run_solve_stage(config: ExperimentConfig, out: Path) -> dict:
    st = config.stage
    if st["game"] is not None:
        game = stage_game_from_dict(json.loads(Path(st["game"]).read_text()))
    else:
        model = build_model(config, config.planning["gamma"])
        plan = value_iteration(model, tol=config.planning["tol"])
        game = build_stage_game(model, plan.v_star[0])
    rep = solve_zero_sum(game, tol=st["tol"], method=st["method"])
    d = report_to_dict(rep)
    (out / "stage_report.json").write_text(json.dumps(d, indent=1))
    return {"game_value": rep.game_value, "exploitability": rep.exploitability, "method": rep.method}


def run_command(config: ExperimentConfig, out_dir=None) -> dict:
    """Run ``config.command``; seeded commands get one ``seed<k>`` directory
    per seed. Returns a JSON-ready summary."""
    out = Path(out_dir or config.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config(config, out)
    cmd = config.command
    if cmd == "plan":
        res = run_plan(config, out)
    elif cmd == "solve-stage":
        res = run_solve_stage(config, out)
    elif cmd == "matrix":
        rows = robustness_matrix(config, out)
        res = {"rows": len(rows), "failed": sum(r["status"] != "ok" for r in rows)}
    else:
        runner = {"train-rmaq": run_train_rmaq, "train-rmaac": run_train_rmaac, "evaluate": run_evaluate}[cmd]
        res = {"runs": []}
        for seed in config.seeds:
            sub = out / f"seed{seed}"
            sub.mkdir(parents=True, exist_ok=True)
            write_config(config, sub)
            res["runs"].append(runner(config, sub, seed))
    (out / "summary.json").write_text(json.dumps(res, indent=1, default=float))
    return res
