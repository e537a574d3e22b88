"""Point-mass navigation task, scripted behaviour policies and evaluation.

The environment is vectorised over episodes: ``reset`` takes one seed per
episode and every array carries a leading episode axis. Rewards belong to
the state they are observed in, so a recorded step is
``(o_t, a_t, r_t = R(state_t), terminal_t)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .dataset import Episode, TrajectoryDataset
from .errors import ConfigError

GOAL_RADIUS = 0.5
OBS_NOISE = 0.01
PROJECTION_SEED = 20240601
POLICY_KINDS = ("expert", "medium", "replay", "random")

# (gain scale, action noise, random-action probability); replay mixes several checkpoints
_EXPERT = (1.0, 0.2, 0.0)
_MEDIUM = (1.0, 0.3, 0.2)
_REPLAY_CHECKPOINTS = ((0.15, 0.8, 0.5), (0.3, 0.6, 0.4), (0.5, 0.5, 0.3), (0.7, 0.4, 0.3))


class PointMassEnv:
    """2-D point mass in the box [-1, 1]^2 steered by a bounded force.

    The goal circles the origin once per episode. Observation (8 dims):
    position, velocity, elapsed-time fraction, and a fixed random 3-d linear
    projection of position+velocity, all with additive Gaussian noise.
    Reward ``exp(-2 * |pos - goal(t)|)``; the last step is terminal.
    """

    obs_dim = 8
    act_dim = 2

    def __init__(self, horizon: int = 100, damping: float = 0.8, force: float = 0.2, dt: float = 0.15):
        self.horizon = horizon
        self.damping, self.force, self.dt = damping, force, dt
        self.projection = np.random.default_rng(PROJECTION_SEED).normal(size=(3, 4)) / 2.0
        self.pos = self.vel = None
        self.t = 0
        self._rngs: list[np.random.Generator] = []

    @property
    def n(self) -> int:
        return len(self._rngs)

    def reset(self, seeds) -> np.ndarray:
        self._rngs = [np.random.default_rng(s) for s in seeds]
        self.pos = np.stack([r.uniform(-1, 1, 2) for r in self._rngs])
        self.vel = np.zeros_like(self.pos)
        self.t = 0
        return self.observe()

    def set_state(self, pos, vel, t: int = 0) -> None:
        self.pos, self.vel, self.t = np.array(pos, float), np.array(vel, float), t

    def observe(self) -> np.ndarray:
        raw = np.concatenate([self.pos, self.vel], 1)
        tfrac = np.full((len(raw), 1), self.t / self.horizon)
        clean = np.concatenate([raw, tfrac, raw @ self.projection.T], 1)
        noise = np.stack([r.normal(0.0, OBS_NOISE, self.obs_dim) for r in self._rngs])
        return clean + noise

    def goal(self, t: int | None = None) -> np.ndarray:
        phase = 2 * np.pi * (self.t if t is None else t) / self.horizon
        return GOAL_RADIUS * np.array([np.cos(phase), np.sin(phase)])

    def goal_velocity(self) -> np.ndarray:
        return (self.goal(self.t + 1) - self.goal()) / self.dt

    def reward(self) -> np.ndarray:
        return np.exp(-2.0 * np.linalg.norm(self.pos - self.goal(), axis=1))

    def dynamics(self, pos, vel, action):
        action = np.clip(action, -1.0, 1.0)
        vel = self.damping * vel + self.force * action
        pos = pos + self.dt * vel
        hit = np.abs(pos) > 1.0
        return np.clip(pos, -1.0, 1.0), np.where(hit, 0.0, vel)

    def step(self, action) -> np.ndarray:
        self.pos, self.vel = self.dynamics(self.pos, self.vel, np.asarray(action, float))
        self.t += 1
        return self.observe()


class BehaviorPolicy:
    """Scripted data-collection policy (expert / medium / replay / random)."""

    def __init__(self, kind: str):
        if kind not in POLICY_KINDS:
            raise ConfigError(f"unknown behaviour policy {kind!r}; choose from {POLICY_KINDS}")
        self.kind = kind

    def episode_params(self, rng: np.random.Generator):
        if self.kind == "replay":
            return _REPLAY_CHECKPOINTS[rng.integers(len(_REPLAY_CHECKPOINTS))]
        return _MEDIUM if self.kind == "medium" else _EXPERT

    def __call__(self, env: PointMassEnv, params: list, rngs: list[np.random.Generator]) -> np.ndarray:
        """Actions for every episode; episode i uses ``params[i]`` and ``rngs[i]``."""
        if self.kind == "random":
            return np.stack([r.uniform(-1, 1, env.act_dim) for r in rngs])
        control = tracking_control(env)
        out = np.empty_like(control)
        for i, ((gain, noise, p_random), rng) in enumerate(zip(params, rngs)):
            a = np.tanh(gain * control[i])
            if noise > 0:
                a = a + rng.normal(0.0, noise, a.shape)
            if p_random > 0 and rng.random() < p_random:
                a = rng.uniform(-1, 1, a.shape)
            out[i] = a
        return np.clip(out, -1.0, 1.0)


def tracking_control(env: PointMassEnv) -> np.ndarray:
    """PD force toward the moving goal with velocity feed-forward."""
    return 4.0 * (env.goal() - env.pos) + 3.0 * (env.goal_velocity() - env.vel)


def episode_seeds(seed: int, n: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def run_behavior(env: PointMassEnv, kind: str, episodes: int, seed: int) -> list[Episode]:
    policy = BehaviorPolicy(kind)
    seeds = episode_seeds(seed, episodes)
    obs = env.reset(seeds)
    act_rngs = [np.random.default_rng([s, 1]) for s in seeds]
    params = [policy.episode_params(r) for r in act_rngs]
    O, A, R = [], [], []
    for t in range(env.horizon):
        O.append(obs)
        R.append(env.reward())
        a = policy(env, params, act_rngs)
        A.append(a)
        obs = env.step(a)
    O, A, R = np.stack(O, 1), np.stack(A, 1), np.stack(R, 1)
    term = np.zeros(env.horizon, bool)
    term[-1] = True
    return [Episode(O[i], A[i], R[i], term) for i in range(episodes)]


def reference_returns(env: PointMassEnv | None = None, episodes: int = 100, seed: int = 12345) -> dict[str, float]:
    """Mean returns of the uniform-random and expert policies (normalisation anchors)."""
    env = env or PointMassEnv()
    out = {}
    for kind in ("random", "expert"):
        eps = run_behavior(env, kind, episodes, seed)
        out[kind] = float(np.mean([ep.rewards.astype(np.float64).sum() for ep in eps]))
    return out


def generate_dataset(env: PointMassEnv, kind: str, episodes: int, seed: int) -> TrajectoryDataset:
    if episodes < 1:
        raise ConfigError(f"need at least one episode, got {episodes}")
    eps = run_behavior(env, kind, episodes, seed)
    refs = reference_returns(env)
    returns = [float(ep.rewards.astype(np.float64).sum()) for ep in eps]
    meta = {"name": f"pointmass-{kind}", "seed": seed, "generator": f"PointMassEnv/{kind}",
            "policy": kind, "episodes": episodes, "horizon": env.horizon, "mean_return": float(np.mean(returns)),
            "random_ref": refs["random"], "expert_ref": refs["expert"]}
    return TrajectoryDataset(eps, metadata=meta)


def generate_tiers(env: PointMassEnv, episodes: int, seed: int) -> dict[str, TrajectoryDataset]:
    """Expert, medium and replay datasets; asserts their return ordering."""
    tiers = {k: generate_dataset(env, k, episodes, seed) for k in ("expert", "medium", "replay")}
    r = {k: d.metadata["mean_return"] for k, d in tiers.items()}
    if not r["expert"] > r["medium"] > r["replay"]:
        raise AssertionError(f"dataset tiers out of order: {r}")
    return tiers


def normalized_return(raw: float, random_ref: float, expert_ref: float) -> float:
    if not expert_ref > random_ref:
        raise ConfigError(f"degenerate references: expert {expert_ref} <= random {random_ref}")
    return 100.0 * (raw - random_ref) / (expert_ref - random_ref)


@dataclass
class EvalResult:
    mean: float
    std: float
    returns: list[float]

    def to_dict(self) -> dict:
        return {"mean_return": self.mean, "std_return": self.std, "returns": self.returns}


def rollout_returns(env: PointMassEnv, act_fn: Callable[[np.ndarray, int], np.ndarray], episodes: int,
                    seed: int) -> EvalResult:
    """Run ``act_fn(obs, t) -> actions`` on ``episodes`` parallel episodes."""
    obs = env.reset(episode_seeds(seed, episodes))
    total = np.zeros(episodes)
    for t in range(env.horizon):
        total += env.reward()
        obs = env.step(act_fn(obs, t))
    return EvalResult(float(total.mean()), float(total.std()), [float(x) for x in total])


def evaluate(env: PointMassEnv, model, agent, episodes: int, seed: int, mode: str = "mode") -> EvalResult:
    """Deploy the agent: filter observations with the model, act from the belief.

    The belief starts at zero with a zero previous action. ``agent=None``
    acts uniformly at random.
    """
    if agent is None:
        rng = np.random.default_rng(seed)
        return rollout_returns(env, lambda o, t: rng.uniform(-1, 1, (len(o), env.act_dim)), episodes, seed)
    from .numerics import make_generator

    gen = make_generator(seed)
    state = {"belief": model.initial_belief(episodes),
             "prev": torch.zeros(episodes, env.act_dim, dtype=model.dtype)}

    def act_fn(obs, t):
        with torch.no_grad():
            _, _, belief = model.observe_step(state["belief"], state["prev"], model.normalize(obs), gen, t)
            a = agent.act(model, belief, mode, gen)
        state["belief"], state["prev"] = belief, a
        return a.double().numpy()

    return rollout_returns(env, act_fn, episodes, seed)


def append_result(path, record: dict) -> None:
    with open(Path(path), "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")
