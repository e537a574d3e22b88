"""Two-phase training orchestration: world model, then agent with periodic
evaluation and value tracking."""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .agent import Agent, AgentTrainer
from .config import AgentConfig, Config
from .dataset import TrajectoryDataset, sample_windows
from .envsuite import PointMassEnv, evaluate, normalized_return
from .errors import ConfigError
from .numerics import make_generator, resolve_dtype
from .world_model import Belief, WorldModel, build_model, no_latent_action_model, train_model

AGENT_KINDS = ("clap", "no_constraint", "no_latent_action")
MODEL_COLUMNS = ("step", "loss", "obs_nll", "act_nll", "kl_state", "kl_action", "reward_nll", "term_nll")
AGENT_COLUMNS = ("step", "actor_loss", "critic_loss", "mean_value", "entropy", "utilization")


def write_csv(path, rows: list[dict], columns=None) -> None:
    columns = list(columns or (rows[0].keys() if rows else []))
    with open(Path(path), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore", restval="")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(v) for k, v in r.items()})


def read_csv(path) -> list[dict]:
    with open(Path(path), newline="") as fh:
        return list(csv.DictReader(fh))


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def agent_config_for(base: AgentConfig, kind: str = "clap", epsilon: float | None = None) -> AgentConfig:
    if kind not in AGENT_KINDS:
        raise ConfigError(f"unknown agent kind {kind!r}; choose from {AGENT_KINDS}")
    cfg = dataclasses.replace(base, constrained=kind == "clap")
    if epsilon is not None:
        cfg.epsilon = float(epsilon)
    return cfg


def fit_world_model(dataset: TrajectoryDataset, cfg: Config, seeds: dict, latent_actions: bool | None = None,
                    steps: int | None = None, on_log=None) -> tuple[WorldModel, list[dict]]:
    """Build and train a world model (or the plain state-space ablation)."""
    dtype = resolve_dtype(cfg.train.dtype)
    latent_actions = cfg.model.latent_actions if latent_actions is None else latent_actions
    mcfg = dataclasses.replace(cfg.model, latent_actions=latent_actions)
    if latent_actions:
        model = build_model(dataset, mcfg, seeds["model_init"], dtype)
    else:
        model = no_latent_action_model(dataset.obs_dim, dataset.act_dim, mcfg, seeds["model_init"]).to(dtype)
        model.set_normalization(dataset)
    steps = cfg.train.model_steps if steps is None else steps
    _, rows = train_model(model, dataset, steps, seeds["data"], seeds["model_noise"],
                          log_every=cfg.train.log_every, on_log=on_log)
    return model, rows


class ValueProbe:
    """Fixed set of posterior beliefs from sampled dataset windows.

    The beliefs are computed once, so successive probes differ only through
    the critic.
    """

    def __init__(self, model: WorldModel, dataset: TrajectoryDataset, batch_size: int, window: int, seed: int):
        batch = sample_windows(dataset, batch_size, window, np.random.default_rng(seed)).to_torch(model.dtype)
        with torch.no_grad():
            seq = model.observe_sequence(batch, make_generator(seed))
        self.belief = Belief(seq.h[seq.valid], seq.s[seq.valid])

    def __call__(self, agent: Agent) -> float:
        with torch.no_grad():
            return agent.critic(self.belief).mean().item()


@dataclass
class AgentRun:
    agent: Agent
    trainer: AgentTrainer
    metrics: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    values: list[dict] = field(default_factory=list)

    @property
    def final_return(self) -> float:
        return self.evals[-1]["normalized_return"]

    @property
    def peak_return(self) -> float:
        return max(e["normalized_return"] for e in self.evals)

    @property
    def final_value(self) -> float:
        return self.values[-1]["mean_value"]


def run_agent(model: WorldModel, dataset: TrajectoryDataset, cfg: Config, seeds: dict, kind: str = "clap",
              epsilon: float | None = None, steps: int | None = None, env: PointMassEnv | None = None,
              on_row=None) -> AgentRun:
    """Train one agent, evaluating every ``train.eval_every`` steps and probing
    values every ``train.value_every`` steps (both also at step 0 and at the end)."""
    from .analysis import dataset_reference_values

    acfg = agent_config_for(cfg.agent, kind, epsilon)
    if (kind == "no_latent_action") == model.latent_actions:
        raise ConfigError(f"agent kind {kind!r} does not match a model with latent_actions={model.latent_actions}")
    env = env or PointMassEnv(horizon=cfg.env.horizon)
    steps = cfg.train.agent_steps if steps is None else steps
    tc = cfg.train
    agent = Agent(model, acfg, seeds["agent_init"]).to(model.dtype)
    trainer = AgentTrainer(model, agent, dataset, seeds["data"] + 1, seeds["agent_noise"])
    probe = ValueProbe(model, dataset, acfg.batch_size, acfg.window, seeds["data"] + 2)
    ref = dataset_reference_values(dataset, acfg.discount)
    refs = (dataset.metadata.get("random_ref"), dataset.metadata.get("expert_ref"))
    run = AgentRun(agent, trainer)

    def checkpoint(step: int) -> None:
        if step % tc.value_every == 0 or step == steps:
            run.values.append({"step": step, "mean_value": probe(agent), "reference_return": ref["average_return"],
                               "reference_max_value": ref["average_max_value"]})
        if step % tc.eval_every == 0 or step == steps:
            res = evaluate(env, model, agent, tc.eval_episodes, seeds["env"])
            row = {"step": step, "mean_return": res.mean, "std_return": res.std}
            if refs[0] is not None:
                row["normalized_return"] = normalized_return(res.mean, *refs)
            run.evals.append(row)
            if on_row:
                on_row("eval", row)

    checkpoint(0)
    for step in range(1, steps + 1):
        m = trainer.step()
        if step % tc.log_every == 0 or step == steps:
            run.metrics.append(m)
            if on_row:
                on_row("agent", m)
        checkpoint(step)
    return run
