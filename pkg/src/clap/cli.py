"""Command-line workflow: generate data, train the model and agent, evaluate,
run ablations, sweeps and analyses.

Every command writes a fresh run directory under ``--out`` (default: the
``CLAP_RUN_ROOT`` environment variable, else ``./runs``) holding the
resolved config, the derived seeds, metrics CSVs, checkpoints and a
``results.jsonl`` log. Inputs a command reads are copied into its run
directory so downstream commands can work from that directory alone.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from . import dataset as ds_io
from .agent import Agent
from .analysis import (action_distribution_study, dataset_reference_values, epsilon_sweep, flatten_rows)
from .config import Config, split_seeds
from .envsuite import (POLICY_KINDS, PointMassEnv, append_result, evaluate, generate_dataset, normalized_return,
                       reference_returns)
from .errors import ClapError, ConfigError, DataError, UsageError
from .training import (AGENT_COLUMNS, MODEL_COLUMNS, AgentRun, ValueProbe, fit_world_model, read_csv, run_agent,
                       write_csv)
from .world_model import WorldModel

DATASET_FILE = "dataset.clapdata"
MODEL_FILE = "model.ckpt"
AGENT_FILE = "agent.ckpt"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ------------------------------------------------------------------ helpers
def resolve_config(args) -> Config:
    cfg = Config.load(args.config) if args.config else Config()
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        key, value = item.split("=", 1)
        cfg.set(key.strip(), value.strip())
    for flag, key in getattr(args, "_config_flags", {}).items():
        value = getattr(args, flag, None)
        if value is not None:
            cfg.set(key, str(value))
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def make_run_dir(args, command: str, cfg: Config) -> Path:
    root = Path(args.out or os.environ.get("CLAP_RUN_ROOT") or "runs")
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = root / f"{command}-{stamp}-seed{cfg.seed}"
    run, n = base, 1
    while run.exists():
        n += 1
        run = base.with_name(f"{base.name}-{n}")
    run.mkdir(parents=True)
    (run / "config.ini").write_text(cfg.to_ini())
    (run / "seeds.json").write_text(json.dumps({"root": cfg.seed} | split_seeds(cfg.seed), indent=2, sort_keys=True))
    return run


def require(path, flag: str, what: str) -> Path:
    if path is None:
        raise UsageError(f"{what} is required: pass {flag} PATH")
    path = Path(path)
    if not path.exists():
        raise DataError(f"{what} not found: {path} (from {flag})")
    return path


def copy_in(src: Path, run: Path, name: str) -> Path:
    dst = run / name
    if src.resolve() != dst.resolve():
        shutil.copyfile(src, dst)
    return dst


def locate_dataset(args, model_path: Path | None = None) -> Path:
    """``--dataset`` if given, else the dataset copy stored next to the model."""
    if args.dataset is not None:
        return require(args.dataset, "--dataset", "dataset file")
    if model_path is not None and (model_path.parent / DATASET_FILE).exists():
        return model_path.parent / DATASET_FILE
    raise UsageError("dataset file is required: pass --dataset PATH")


def load_model(path: Path, cfg: Config) -> WorldModel:
    model, _, _ = WorldModel.load(path)
    return model


def record(run: Path, row: dict) -> None:
    append_result(run / "results.jsonl", row)
    print(json.dumps(row, sort_keys=True))


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return [float(x) for x in v]
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    return v


def write_agent_run(run_dir: Path, agent_run: AgentRun, model_meta: dict, extra: dict | None = None) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    write_csv(run_dir / "agent_metrics.csv", agent_run.metrics, AGENT_COLUMNS)
    write_csv(run_dir / "eval.csv", agent_run.evals)
    write_csv(run_dir / "values.csv", agent_run.values)
    trainer = agent_run.trainer
    agent_run.agent.save(run_dir / AGENT_FILE, model_meta, {"actor": trainer.actor_opt, "critic": trainer.critic_opt},
                         extra)


# ------------------------------------------------------------------ commands
def cmd_generate(args, cfg: Config) -> int:
    if cfg.env.policy not in POLICY_KINDS:
        raise ConfigError(f"env.policy must be one of {POLICY_KINDS}, got {cfg.env.policy!r}")
    run = make_run_dir(args, "generate", cfg)
    env = PointMassEnv(horizon=cfg.env.horizon)
    data = generate_dataset(env, cfg.env.policy, cfg.env.episodes, split_seeds(cfg.seed)["data"])
    ds_io.save(data, run / DATASET_FILE)
    meta = data.metadata
    record(run, {"command": "generate", "dataset": str(run / DATASET_FILE), "policy": meta["policy"],
                 "episodes": meta["episodes"], "mean_return": meta["mean_return"],
                 "normalized_return": normalized_return(meta["mean_return"], meta["random_ref"], meta["expert_ref"])})
    return 0


def cmd_import_csv(args, cfg: Config) -> int:
    src = require(args.dir, "--dir", "CSV directory")
    data = ds_io.import_csv_dir(src, args.name)
    run = make_run_dir(args, "import-csv", cfg)
    ds_io.save(data, run / DATASET_FILE)
    record(run, {"command": "import-csv", "dataset": str(run / DATASET_FILE), "episodes": len(data.episodes),
                 "steps": data.total_steps})
    return 0


def cmd_train_model(args, cfg: Config) -> int:
    data_path = require(args.dataset, "--dataset", "dataset file")
    data = ds_io.load(data_path)
    run = make_run_dir(args, "train-model", cfg)
    copy_in(data_path, run, DATASET_FILE)
    seeds = split_seeds(cfg.seed)
    model, rows = fit_world_model(data, cfg, seeds, on_log=lambda r: print(json.dumps(r)))
    write_csv(run / "model_metrics.csv", rows, MODEL_COLUMNS)
    model.save(run / MODEL_FILE, extra={"seed": cfg.seed, "steps": cfg.train.model_steps})
    record(run, {"command": "train-model", "model": str(run / MODEL_FILE), "final_loss": rows[-1]["loss"]})
    return 0


def cmd_train_agent(args, cfg: Config) -> int:
    model_path = require(args.model, "--model", "world-model checkpoint")
    data_path = locate_dataset(args, model_path)
    model = load_model(model_path, cfg)
    data = ds_io.load(data_path)
    kind = args.kind or ("clap" if model.latent_actions else "no_latent_action")
    run = make_run_dir(args, "train-agent", cfg)
    copy_in(model_path, run, MODEL_FILE)
    copy_in(data_path, run, DATASET_FILE)
    agent_run = run_agent(model, data, cfg, split_seeds(cfg.seed), kind)
    write_agent_run(run, agent_run, model.metadata(), {"seed": cfg.seed})
    record(run, {"command": "train-agent", "kind": kind, "epsilon": cfg.agent.epsilon,
                 "final_normalized_return": agent_run.evals[-1].get("normalized_return"),
                 "final_mean_return": agent_run.evals[-1]["mean_return"], "final_value": agent_run.final_value})
    return 0


def cmd_evaluate(args, cfg: Config) -> int:
    model_path = require(args.model, "--model", "world-model checkpoint")
    model = load_model(model_path, cfg)
    agent = None
    if not args.random_policy:
        agent, _ = Agent.load(require(args.agent, "--agent", "agent checkpoint"), model)
    run = make_run_dir(args, "evaluate", cfg)
    env = PointMassEnv(horizon=cfg.env.horizon)
    res = evaluate(env, model, agent, cfg.train.eval_episodes, split_seeds(cfg.seed)["env"])
    refs = reference_returns(env)
    record(run, {"command": "evaluate", "policy": "random" if agent is None else agent.kind}
           | res.to_dict() | {"normalized_return": normalized_return(res.mean, refs["random"], refs["expert"])})
    return 0


def cmd_ablate(args, cfg: Config) -> int:
    model_path = require(args.model, "--model", "world-model checkpoint")
    data_path = locate_dataset(args, model_path)
    model = load_model(model_path, cfg)
    if not model.latent_actions:
        raise UsageError("--model must be a latent-action model; the plain model is trained or passed via --plain-model")
    data = ds_io.load(data_path)
    run = make_run_dir(args, "ablate", cfg)
    copy_in(model_path, run, MODEL_FILE)
    copy_in(data_path, run, DATASET_FILE)
    seeds = split_seeds(cfg.seed)
    if args.plain_model:
        plain = load_model(require(args.plain_model, "--plain-model", "plain world-model checkpoint"), cfg)
        copy_in(Path(args.plain_model), run, "plain_model.ckpt")
    else:
        plain, rows = fit_world_model(data, cfg, seeds, latent_actions=False)
        write_csv(run / "plain_model_metrics.csv", rows, MODEL_COLUMNS)
        plain.save(run / "plain_model.ckpt", extra={"seed": cfg.seed})
    for kind, m in (("clap", model), ("no_constraint", model), ("no_latent_action", plain)):
        agent_run = run_agent(m, data, cfg, seeds, kind)
        arm = run / kind
        write_agent_run(arm, agent_run, m.metadata(), {"seed": cfg.seed})
        (arm / "arm.json").write_text(json.dumps({"variant": kind, "epsilon": cfg.agent.epsilon, "seed": cfg.seed}))
        record(run, {"command": "ablate", "variant": kind, "final_normalized_return": agent_run.final_return,
                     "final_value": agent_run.final_value,
                     "reference_max_value": agent_run.values[-1]["reference_max_value"]})
    return 0


def cmd_sweep(args, cfg: Config) -> int:
    model_path = require(args.model, "--model", "world-model checkpoint")
    data_path = locate_dataset(args, model_path)
    model = load_model(model_path, cfg)
    data = ds_io.load(data_path)
    try:
        epsilons = [float(e) for e in args.epsilons.split(",") if e.strip()]
    except ValueError:
        raise ConfigError(f"--epsilons must be comma-separated numbers, got {args.epsilons!r}") from None
    run = make_run_dir(args, "sweep-epsilon", cfg)
    copy_in(model_path, run, MODEL_FILE)
    copy_in(data_path, run, DATASET_FILE)
    runs = epsilon_sweep(model, data, cfg, split_seeds(cfg.seed), epsilons)
    for eps, agent_run in runs.items():
        arm = run / f"eps-{eps:g}"
        write_agent_run(arm, agent_run, model.metadata(), {"seed": cfg.seed})
        (arm / "arm.json").write_text(json.dumps({"variant": "clap", "epsilon": eps, "seed": cfg.seed}))
        record(run, {"command": "sweep-epsilon", "epsilon": eps, "final_normalized_return": agent_run.final_return,
                     "peak_normalized_return": agent_run.peak_return, "final_value": agent_run.final_value})
    return 0


def cmd_analyze_values(args, cfg: Config) -> int:
    model_path = Path(args.model) if args.model else None
    data_path = locate_dataset(args, model_path)
    data = ds_io.load(data_path)
    run = make_run_dir(args, "analyze-values", cfg)
    ref = dataset_reference_values(data, cfg.agent.discount)
    row = {"command": "analyze-values", "discount": cfg.agent.discount} | ref
    if args.agent:
        model = load_model(require(args.model, "--model", "world-model checkpoint"), cfg)
        agent, _ = Agent.load(require(args.agent, "--agent", "agent checkpoint"), model)
        probe = ValueProbe(model, data, cfg.agent.batch_size, cfg.agent.window, split_seeds(cfg.seed)["data"] + 2)
        row["mean_value"] = probe(agent)
        row["value_over_reference_max"] = row["mean_value"] / ref["average_max_value"]
    write_csv(run / "reference_values.csv", [row])
    record(run, row)
    return 0


def cmd_analyze_actions(args, cfg: Config) -> int:
    model_path = require(args.model, "--model", "world-model checkpoint")
    data = ds_io.load(locate_dataset(args, model_path))
    model = load_model(model_path, cfg)
    run = make_run_dir(args, "analyze-actions", cfg)
    study = action_distribution_study(model, data, args.k, args.episode, split_seeds(cfg.seed)["env"])
    write_csv(run / "action_steps.csv", flatten_rows(study["steps"]))
    write_csv(run / "action_blocks.csv", flatten_rows(study["blocks"]))
    record(run, {"command": "analyze-actions", "episode": study["episode"], "k": study["k"],
                 "inside_fraction": study["inside_fraction"],
                 "mean_abs_mean_gap": _jsonable(study["mean_abs_mean_gap"])})
    return 0


def cmd_report(args, cfg: Config) -> int:
    if not args.runs:
        raise UsageError("report needs at least one run directory: pass --runs DIR [DIR ...]")
    rows = []
    for root in args.runs:
        root = require(root, "--runs", "run directory")
        for arm_file in sorted(root.rglob("arm.json")):
            arm = json.loads(arm_file.read_text())
            values = {r["step"]: r["mean_value"] for r in read_csv(arm_file.parent / "values.csv")}
            for r in read_csv(arm_file.parent / "eval.csv"):
                rows.append({"run": str(arm_file.parent.relative_to(root.parent)), "variant": arm["variant"],
                             "epsilon": arm["epsilon"], "seed": arm["seed"], "step": r["step"],
                             "mean_return": r["mean_return"], "normalized_return": r.get("normalized_return", ""),
                             "mean_value": values.get(r["step"], "")})
    if not rows:
        raise DataError(f"no sweep or ablation arms found under {', '.join(args.runs)}")
    run = make_run_dir(args, "report", cfg)
    write_csv(run / "report.csv", rows)
    record(run, {"command": "report", "rows": len(rows), "arms": len({r["run"] for r in rows}),
                 "report": str(run / "report.csv")})
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "import-csv": cmd_import_csv,
    "train-model": cmd_train_model,
    "train-agent": cmd_train_agent,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "sweep-epsilon": cmd_sweep,
    "analyze-values": cmd_analyze_values,
    "analyze-actions": cmd_analyze_actions,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="clap", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_, **flags):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--seed", type=int, default=None, help="root seed (overrides the config)")
        p.add_argument("--config", default=None, help="INI config file")
        p.add_argument("--out", default=None, help="run root directory (default $CLAP_RUN_ROOT or ./runs)")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config key")
        p.set_defaults(_config_flags=flags)
        return p

    p = add("generate", "write a behaviour-policy dataset", policy="env.policy", episodes="env.episodes")
    p.add_argument("--policy", choices=POLICY_KINDS)
    p.add_argument("--episodes", type=int)

    p = add("import-csv", "convert a directory of per-episode CSV files")
    p.add_argument("--dir")
    p.add_argument("--name")

    p = add("train-model", "fit the world model", steps="train.model_steps")
    p.add_argument("--dataset")
    p.add_argument("--steps", type=int)

    p = add("train-agent", "train the actor-critic on a fitted model", steps="train.agent_steps",
            epsilon="agent.epsilon")
    p.add_argument("--model")
    p.add_argument("--dataset")
    p.add_argument("--kind", choices=("clap", "no_constraint", "no_latent_action"))
    p.add_argument("--steps", type=int)
    p.add_argument("--epsilon", type=float)

    p = add("evaluate", "run the agent in the environment", episodes="train.eval_episodes")
    p.add_argument("--model")
    p.add_argument("--agent")
    p.add_argument("--episodes", type=int)
    p.add_argument("--random-policy", action="store_true", help="act uniformly at random instead of loading an agent")

    p = add("ablate", "C-LAP vs no-constraint vs no-latent-action", steps="train.agent_steps")
    p.add_argument("--model")
    p.add_argument("--dataset")
    p.add_argument("--plain-model", help="pre-trained model without latent actions")
    p.add_argument("--steps", type=int)

    p = add("sweep-epsilon", "train one agent per constraint width", steps="train.agent_steps")
    p.add_argument("--model")
    p.add_argument("--dataset")
    p.add_argument("--epsilons", default="0.5,1,2,3")
    p.add_argument("--steps", type=int)

    p = add("analyze-values", "dataset reference values and critic estimates")
    p.add_argument("--dataset")
    p.add_argument("--model")
    p.add_argument("--agent")

    p = add("analyze-actions", "k-NN comparison of dataset and prior-decoded actions")
    p.add_argument("--model")
    p.add_argument("--dataset")
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--episode", type=int, default=None)

    p = add("report", "merge sweep/ablation arms into one CSV")
    p.add_argument("--runs", nargs="+")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except ClapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
