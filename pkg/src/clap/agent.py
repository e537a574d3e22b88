"""Constrained latent-action actor-critic trained on imagined rollouts.

The policy emits a bounded latent action ``u_hat`` in (-1, 1) which the
constraint map turns into ``u = mu + u_hat * eps * sigma`` using the latent
action prior of the current belief, so every decoded latent action lies in
``[mu - eps*sigma, mu + eps*sigma]`` by construction.
"""

from __future__ import annotations

import contextlib
import copy
import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from . import checkpoint
from .config import AgentConfig
from .dataset import TrajectoryDataset, sample_windows
from .distributions import DiagGaussian, TanhGaussian
from .errors import ConfigError, DataError, NumericalError
from .numerics import Adam, DenseBlock, backward, make_generator
from .world_model import Belief, WorldModel


def _pull_inside(u: torch.Tensor, mu: torch.Tensor, bound: torch.Tensor) -> torch.Tensor:
    # mu + d can round past the bound by an ulp of mu; step those entries toward mu
    for _ in range(64):
        over = (u - mu).abs() > bound
        if not over.any():
            return u
        u = torch.where(over, torch.nextafter(u, mu), u)
    raise NumericalError("constraint map could not restore |u - mu| <= eps*sigma")


def constraint_map(u_hat: torch.Tensor, prior: DiagGaussian, epsilon: float) -> torch.Tensor:
    u = prior.mean + u_hat * epsilon * prior.std
    with torch.no_grad():
        fixed = _pull_inside(u, prior.mean, epsilon * prior.std)
    # value shift is a few ulps at most; gradients follow the unrounded map
    return u + (fixed - u).detach()


class Policy(nn.Module):
    """Dense network on (h, s) producing a TanhGaussian, or an unbounded
    DiagGaussian for the unconstrained ablation."""

    def __init__(self, feat_dim: int, out_dim: int, units: int, layers: int, bounded: bool = True,
                 gen: torch.Generator | None = None):
        super().__init__()
        self.bounded = bounded
        self.net = DenseBlock([feat_dim] + [units] * layers + [2 * out_dim], "selu", "policy", gen)

    def forward(self, belief: Belief):
        raw = self.net(belief.features())
        return TanhGaussian.from_raw(raw) if self.bounded else DiagGaussian.from_raw(raw)


class Critic(nn.Module):
    """Independent value networks; the output layers start at zero."""

    def __init__(self, feat_dim: int, units: int, layers: int, count: int = 2, gen: torch.Generator | None = None):
        super().__init__()
        self.nets = nn.ModuleList(
            DenseBlock([feat_dim] + [units] * layers + [1], "selu", f"value{i}", gen) for i in range(count))
        for net in self.nets:
            nn.init.zeros_(net.layers[-1].weight)

    def all(self, belief: Belief) -> torch.Tensor:
        feat = belief.features()
        return torch.stack([net(feat).squeeze(-1) for net in self.nets])

    def forward(self, belief: Belief) -> torch.Tensor:
        return self.all(belief).min(0).values


@dataclass
class Trajectory:
    beliefs: list[Belief]
    latents: list[torch.Tensor]
    actions: list[torch.Tensor]
    rewards: torch.Tensor        # (H+1, B)
    continues: torch.Tensor      # (H+1, B)
    values: torch.Tensor         # (H+1, B), min over critics
    entropies: torch.Tensor      # (H, B)
    utilization: torch.Tensor    # (H, B) mean |u - mu| / sigma, nan without latent actions

    @property
    def horizon(self) -> int:
        return len(self.latents)

    def discount_weights(self, gamma: float) -> torch.Tensor:
        w = [torch.ones_like(self.continues[0])]
        for tau in range(self.horizon):
            w.append(w[-1] * gamma * self.continues[tau])
        return torch.stack(w)


class Agent(nn.Module):
    """Policy, twin critics and the constraint setting.

    ``kind`` is ``clap`` (constrained), ``no_constraint`` (unbounded Gaussian
    latent policy) or ``no_latent_action`` (TanhGaussian over environment
    actions on a model without latent actions).
    """

    def __init__(self, model: WorldModel, cfg: AgentConfig | None = None, seed: int = 0):
        super().__init__()
        cfg = cfg or AgentConfig()
        if not model.latent_actions and cfg.constrained:
            raise ConfigError("the latent-action constraint needs a model with latent actions; "
                              "set agent.constrained = false for the no-latent-action variant")
        if cfg.horizon < 1:
            raise ConfigError(f"imagination horizon must be >= 1, got {cfg.horizon}")
        if not (0 < cfg.discount <= 1 and 0 < cfg.lambda_ <= 1):
            raise ConfigError("discount and lambda must lie in (0, 1]")
        self.cfg = cfg
        self.latent_actions = model.latent_actions
        feat = model.cfg.deter_size + model.cfg.stoch_size
        out = model.cfg.latent_action_size if model.latent_actions else model.act_dim
        gen = make_generator(seed)
        bounded = cfg.constrained or not model.latent_actions
        self.policy = Policy(feat, out, cfg.policy_units, cfg.policy_layers, bounded, gen)
        self.critic = Critic(feat, cfg.value_units, cfg.value_layers, cfg.num_critics, gen)
        self.target_critic = copy.deepcopy(self.critic) if cfg.critic_ema > 0 else None
        if self.target_critic is not None:
            self.target_critic.requires_grad_(False)

    @property
    def kind(self) -> str:
        if not self.latent_actions:
            return "no_latent_action"
        return "clap" if self.cfg.constrained else "no_constraint"

    @property
    def epsilon(self) -> float:
        return self.cfg.epsilon

    def latent_action(self, model: WorldModel, belief: Belief, gen: torch.Generator | None = None,
                      mode: bool = False) -> dict:
        """Sample (or take the mode of) the policy and map it to the model's action input."""
        dist = self.policy(belief)
        out = {}
        if mode:
            raw = dist.mode()
            out["entropy"] = torch.zeros(raw.shape[:-1], dtype=raw.dtype)
        elif isinstance(dist, TanhGaussian):
            raw, logp = dist.rsample_with_log_prob(gen)
            out["entropy"] = -logp
        else:
            raw = dist.rsample(gen)
            out["entropy"] = dist.entropy()
        out["raw"] = raw
        if not self.latent_actions:
            out["latent"] = raw
            return out
        prior = model.latent_action_prior(belief)
        out["prior"] = prior
        out["latent"] = constraint_map(raw, prior, self.cfg.epsilon) if self.cfg.constrained else raw
        return out

    def act(self, model: WorldModel, belief: Belief, mode: str = "mode",
            gen: torch.Generator | None = None) -> torch.Tensor:
        """Environment action in [-1, 1]; ``mode`` is ``"mode"`` or ``"sample"``."""
        if mode not in ("mode", "sample"):
            raise ConfigError(f"act mode must be 'mode' or 'sample', got {mode!r}")
        deterministic = mode == "mode"
        out = self.latent_action(model, belief, gen, deterministic)
        if not self.latent_actions:
            return out["latent"]
        return model.decode_action(belief, out["latent"], gen, deterministic)

    def bootstrap_critic(self) -> Critic:
        return self.target_critic if self.target_critic is not None else self.critic

    def update_target(self) -> None:
        if self.target_critic is None:
            return
        tau = self.cfg.critic_ema
        with torch.no_grad():
            for p, q in zip(self.critic.parameters(), self.target_critic.parameters()):
                q.mul_(1 - tau).add_(tau * p)

    # ---------------------------------------------------------- persistence
    def save(self, path, model_meta: dict | None = None, optimizers: dict[str, Adam] | None = None,
             extra: dict | None = None) -> None:
        tensors = {f"agent/{k}": v for k, v in self.state_dict().items()}
        meta = {"kind": "agent", "agent_kind": self.kind, "epsilon": self.cfg.epsilon,
                "constrained": self.cfg.constrained, "latent_actions": self.latent_actions,
                "config": dataclasses.asdict(self.cfg), "model": model_meta or {}}
        for name, opt in (optimizers or {}).items():
            tensors |= {f"optim_{name}/{k}": v for k, v in opt.state_tensors().items()}
            meta[f"{name}_optimizer_steps"] = opt.step_count
        checkpoint.save_checkpoint(path, tensors, meta | (extra or {}))

    @classmethod
    def load(cls, path, model: WorldModel) -> tuple["Agent", dict]:
        tensors, meta = checkpoint.load_checkpoint(path)
        if meta.get("kind") != "agent":
            raise DataError(f"{path}: not an agent checkpoint (kind={meta.get('kind')!r})")
        agent = cls(model, AgentConfig(**meta["config"])).to(model.dtype)
        agent.load_state_dict({k[len("agent/"):]: v for k, v in tensors.items() if k.startswith("agent/")})
        return agent, meta


@contextlib.contextmanager
def frozen(module: nn.Module):
    """Temporarily disable gradients for a module's parameters."""
    flags = [p.requires_grad for p in module.parameters()]
    module.requires_grad_(False)
    try:
        yield module
    finally:
        for p, f in zip(module.parameters(), flags):
            p.requires_grad_(f)


def imagine_rollout(model: WorldModel, agent: Agent, start: Belief, horizon: int,
                    gen: torch.Generator) -> Trajectory:
    """Roll the policy through the prior dynamics for ``horizon`` steps."""
    if horizon < 1:
        raise ConfigError(f"imagination horizon must be >= 1, got {horizon}")
    beliefs, latents, actions, ents, util = [start], [], [], [], []
    belief = start
    for _ in range(horizon):
        out = agent.latent_action(model, belief, gen)
        action, belief = model.imagine_step(belief, out["latent"], gen)
        if "prior" in out:
            prior = out["prior"]
            util.append(((out["latent"] - prior.mean).abs() / prior.std).mean(-1).detach())
        else:
            util.append(torch.full(out["entropy"].shape, float("nan"), dtype=out["entropy"].dtype))
        latents.append(out["latent"])
        actions.append(action)
        ents.append(out["entropy"])
        beliefs.append(belief)
    stacked = Belief(torch.stack([b.h for b in beliefs]), torch.stack([b.s for b in beliefs]))
    rewards = model.reward(stacked)
    continues = 1.0 - model.termination(stacked).probs
    values = agent.bootstrap_critic()(stacked)
    return Trajectory(beliefs, latents, actions, rewards, continues, values, torch.stack(ents), torch.stack(util))


def lambda_returns(rewards: torch.Tensor, values: torch.Tensor, continues: torch.Tensor,
                   gamma: float, lam: float) -> torch.Tensor:
    """Recursive lambda-returns.

    ``rewards`` and ``continues`` cover steps 0..H-1, ``values`` 0..H:
    V_t = r_t + gamma c_t [(1 - lam) v_{t+1} + lam V_{t+1}],  V_H = v_H.
    """
    H = rewards.shape[0]
    out = [None] * H
    nxt = values[H]
    for t in reversed(range(H)):
        nxt = rewards[t] + gamma * continues[t] * ((1 - lam) * values[t + 1] + lam * nxt)
        out[t] = nxt
    return torch.stack(out)


def trajectory_returns(traj: Trajectory, gamma: float, lam: float) -> torch.Tensor:
    H = traj.horizon
    return lambda_returns(traj.rewards[:H], traj.values, traj.continues[:H], gamma, lam)


def actor_loss(traj: Trajectory, gamma: float, lam: float, entropy_scale: float,
               returns: torch.Tensor | None = None) -> torch.Tensor:
    """``-mean_t [V_t + entropy_scale * H(pi(.|s_t))]`` over the imagined steps."""
    returns = trajectory_returns(traj, gamma, lam) if returns is None else returns
    loss = -(returns + entropy_scale * traj.entropies).mean()
    if not torch.isfinite(loss):
        raise NumericalError("non-finite actor loss", metrics={
            "reward_mean": traj.rewards.mean().item(), "value_mean": traj.values.mean().item()})
    return loss


def critic_loss(critic: Critic, traj: Trajectory, targets: torch.Tensor) -> torch.Tensor:
    """Mean over steps and critics of ``0.5 (v(sg(s_t)) - sg(V_t))^2``."""
    H = targets.shape[0]
    states = Belief(torch.stack([b.h for b in traj.beliefs[:H]]).detach(),
                    torch.stack([b.s for b in traj.beliefs[:H]]).detach())
    v = critic.all(states)
    return 0.5 * (v - targets.detach().unsqueeze(0)).pow(2).mean()


def start_beliefs(model: WorldModel, dataset: TrajectoryDataset, batch_size: int, window: int,
                  rng: np.random.Generator, gen: torch.Generator) -> Belief:
    """One random posterior belief per sampled window (model is not differentiated)."""
    batch = sample_windows(dataset, batch_size, window, rng).to_torch(model.dtype)
    with torch.no_grad():
        seq = model.observe_sequence(batch, gen)
    mask = batch["mask"]
    lengths = mask.sum(1).long()
    pad = mask.shape[1] - lengths
    offs = torch.from_numpy(rng.integers(0, lengths.numpy()))
    idx = pad + offs
    rows = torch.arange(mask.shape[0])
    return Belief(seq.h[rows, idx], seq.s[rows, idx])


def posterior_values(model: WorldModel, agent: Agent, dataset: TrajectoryDataset, batch_size: int, window: int,
                     rng: np.random.Generator, gen: torch.Generator) -> float:
    """Mean min-critic value over all valid posterior beliefs of sampled windows."""
    batch = sample_windows(dataset, batch_size, window, rng).to_torch(model.dtype)
    with torch.no_grad():
        seq = model.observe_sequence(batch, gen)
        belief = Belief(seq.h[seq.valid], seq.s[seq.valid])
        return agent.critic(belief).mean().item()


@dataclass
class AgentTrainer:
    """Holds optimizers and random streams for the agent phase."""

    model: WorldModel
    agent: Agent
    dataset: TrajectoryDataset
    data_seed: int
    noise_seed: int
    actor_opt: Adam = None
    critic_opt: Adam = None
    rng: np.random.Generator = field(init=False)
    gen: torch.Generator = field(init=False)

    def __post_init__(self):
        cfg = self.agent.cfg
        clip = cfg.grad_clip or None
        self.actor_opt = self.actor_opt or Adam(list(self.agent.policy.named_parameters()), cfg.learning_rate, clip)
        self.critic_opt = self.critic_opt or Adam(list(self.agent.critic.named_parameters()), cfg.learning_rate, clip)
        self.rng = np.random.default_rng(self.data_seed)
        self.gen = make_generator(self.noise_seed)

    @property
    def steps(self) -> int:
        return self.actor_opt.step_count

    def step(self) -> dict:
        """Sample starts, imagine, update actor then critic."""
        cfg = self.agent.cfg
        start = start_beliefs(self.model, self.dataset, cfg.batch_size, cfg.window, self.rng, self.gen)
        with frozen(self.model), frozen(self.agent.critic):
            traj = imagine_rollout(self.model, self.agent, start, cfg.horizon, self.gen)
            returns = trajectory_returns(traj, cfg.discount, cfg.lambda_)
            a_loss = actor_loss(traj, cfg.discount, cfg.lambda_, cfg.entropy_scale, returns)
            self.actor_opt.zero_grad()
            backward(a_loss)
            self.actor_opt.apply()
        self.critic_opt.zero_grad()
        c_loss = critic_loss(self.agent.critic, traj, returns)
        backward(c_loss)
        self.critic_opt.apply()
        self.agent.update_target()
        return {
            "step": self.steps,
            "actor_loss": a_loss.item(),
            "critic_loss": c_loss.item(),
            "mean_value": traj.values[:-1].mean().item(),
            "mean_return_estimate": returns.mean().item(),
            "entropy": traj.entropies.mean().item(),
            "utilization": traj.utilization.mean().item(),
        }


def agent_train_epoch(model: WorldModel, dataset: TrajectoryDataset, agent: Agent, steps: int,
                      trainer: AgentTrainer | None = None, data_seed: int = 0, noise_seed: int = 1) -> tuple[AgentTrainer, dict]:
    """Run ``steps`` agent updates; returns the trainer and averaged metrics."""
    trainer = trainer or AgentTrainer(model, agent, dataset, data_seed, noise_seed)
    rows = [trainer.step() for _ in range(steps)]
    keys = ("actor_loss", "critic_loss", "mean_value", "mean_return_estimate")
    return trainer, {k: float(np.mean([r[k] for r in rows])) for k in keys}
