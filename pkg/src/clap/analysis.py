"""Diagnostics: dataset reference values, epsilon sweeps and the k-NN
comparison between dataset actions and prior-decoded actions."""

from __future__ import annotations

import dataclasses

import numpy as np
import torch
from scipy.spatial import cKDTree

from .config import Config
from .dataset import TrajectoryDataset, full_episode_batch
from .errors import ConfigError, DataError
from .numerics import make_generator
from .training import AgentRun, run_agent
from .world_model import Belief, WorldModel


def returns_to_go(rewards, gamma: float) -> np.ndarray:
    """Discounted return from every step to the end of the episode (float64)."""
    rewards = np.asarray(rewards, dtype=np.float64)
    out = np.empty_like(rewards)
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def dataset_reference_values(dataset: TrajectoryDataset, gamma: float) -> dict[str, float]:
    """Average episode return and average over episodes of the maximum
    discounted return-to-go."""
    returns, maxima = [], []
    for ep in dataset.episodes:
        returns.append(ep.rewards.astype(np.float64).sum())
        maxima.append(returns_to_go(ep.rewards, gamma).max())
    return {"average_return": float(np.mean(returns)), "average_max_value": float(np.mean(maxima))}


def epsilon_sweep(model: WorldModel, dataset: TrajectoryDataset, cfg: Config, seeds: dict, epsilons,
                  steps: int | None = None, on_row=None) -> dict[float, AgentRun]:
    """One constrained agent per epsilon on a shared model, all with identical seeds."""
    epsilons = [float(e) for e in epsilons]
    if not epsilons:
        raise ConfigError("epsilon sweep needs at least one value")
    runs = {}
    for eps in epsilons:
        cb = (lambda kind, row, eps=eps: on_row(eps, kind, row)) if on_row else None
        runs[eps] = run_agent(model, dataset, cfg, seeds, "clap", eps, steps, on_row=cb)
    return runs


# ------------------------------------------------------------------ k-NN study
@dataclasses.dataclass
class NeighborIndex:
    """Euclidean k-NN over normalised observations of every dataset step."""

    dataset: TrajectoryDataset

    def __post_init__(self):
        ds = self.dataset
        self.observations = np.concatenate([ds.normalize(ep.observations) for ep in ds.episodes]).astype(np.float64)
        self.actions = np.concatenate([ep.actions for ep in ds.episodes]).astype(np.float64)
        self.episode_of = np.concatenate([np.full(len(ep), i) for i, ep in enumerate(ds.episodes)])
        self.step_of = np.concatenate([np.arange(len(ep)) for ep in ds.episodes])
        self.tree = cKDTree(self.observations)

    def query(self, normalized_obs, k: int) -> tuple[np.ndarray, np.ndarray]:
        if k > len(self.observations):
            raise DataError(f"dataset has {len(self.observations)} steps, fewer than k={k}")
        dist, idx = self.tree.query(np.atleast_2d(normalized_obs), k=k)
        return dist.reshape(-1, k), idx.reshape(-1, k)


def posterior_beliefs(model: WorldModel, dataset: TrajectoryDataset, seed: int = 0) -> Belief:
    """Posterior belief for every dataset step, flattened in episode order."""
    gen = make_generator(seed)
    hs, ss = [], []
    with torch.no_grad():
        for i in range(len(dataset.episodes)):
            batch = full_episode_batch(dataset, [i]).to_torch(model.dtype)
            seq = model.observe_sequence(batch, gen)
            hs.append(seq.h[seq.valid])
            ss.append(seq.s[seq.valid])
    return Belief(torch.cat(hs), torch.cat(ss))


def _fit(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return x.mean(0), x.std(0)


def action_distribution_study(model: WorldModel, dataset: TrajectoryDataset, k: int = 20, episode: int | None = None,
                              seed: int = 0, block: int = 10) -> dict:
    """Compare dataset actions of the k nearest observations with actions
    sampled through the latent-action prior and decoder at those neighbours.

    Returns per-step rows, per-block rows (aggregated over ``block``
    consecutive steps) and summary statistics.
    """
    if not model.latent_actions:
        raise ConfigError("the action study needs a model with latent actions")
    index = NeighborIndex(dataset)
    if k > len(index.observations):
        raise DataError(f"dataset has {len(index.observations)} steps, fewer than k={k}")
    rng = np.random.default_rng(seed)
    episode = int(rng.integers(len(dataset.episodes))) if episode is None else episode
    beliefs = posterior_beliefs(model, dataset, seed)
    query = dataset.normalize(dataset.episodes[episode].observations)
    _, nbrs = index.query(query, k)
    gen = make_generator(seed + 1)
    steps, per_step_data, per_step_prior = [], [], []
    inside = total = 0
    for t, idx in enumerate(nbrs):
        data_actions = index.actions[idx]
        b = Belief(beliefs.h[idx], beliefs.s[idx])
        with torch.no_grad():
            u = model.latent_action_prior(b).rsample(gen)
            prior_actions = model.decode_action(b, u, gen).double().numpy()
        lo, hi = data_actions.min(0), data_actions.max(0)
        within = (prior_actions >= lo) & (prior_actions <= hi)
        inside += int(within.sum())
        total += within.size
        dm, ds_ = _fit(data_actions)
        pm, ps = _fit(prior_actions)
        steps.append({"step": t, "data_mean": dm, "data_std": ds_, "prior_mean": pm, "prior_std": ps,
                      "inside_fraction": float(within.mean())})
        per_step_data.append(data_actions)
        per_step_prior.append(prior_actions)
    blocks = []
    for start in range(0, len(nbrs), block):
        d = np.concatenate(per_step_data[start:start + block])
        p = np.concatenate(per_step_prior[start:start + block])
        (dm, ds_), (pm, ps) = _fit(d), _fit(p)
        blocks.append({"start": start, "stop": min(start + block, len(nbrs)), "data_mean": dm, "data_std": ds_,
                       "prior_mean": pm, "prior_std": ps})
    mean_gap = np.mean([np.abs(r["data_mean"] - r["prior_mean"]) for r in steps], axis=0)
    return {"episode": episode, "k": k, "steps": steps, "blocks": blocks,
            "inside_fraction": inside / total, "mean_abs_mean_gap": mean_gap}


def flatten_rows(rows: list[dict]) -> list[dict]:
    """Expand vector-valued entries into ``name_i`` columns for CSV output."""
    out = []
    for r in rows:
        flat = {}
        for key, v in r.items():
            if isinstance(v, np.ndarray):
                flat |= {f"{key}_{i}": float(x) for i, x in enumerate(v)}
            else:
                flat[key] = v
        out.append(flat)
    return out
