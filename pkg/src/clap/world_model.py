"""Recurrent latent-action state-space model.

The belief is a deterministic recurrent state ``h`` and a stochastic state
``s``. Generative side: state prior p(s|h), latent action prior p(u|h,s),
Beta action decoder p(a|h,s,u), observation, reward and termination heads.
Inference side: state posterior q(s|h,e(o)) and latent action posterior
q(u|h,s,a). With ``latent_actions=False`` the model degenerates into a plain
recurrent state-space model whose transition consumes actions directly.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint
from .config import ModelConfig
from .dataset import TrajectoryDataset, WindowBatch, sample_windows
from .distributions import BetaVector, Bernoulli, DiagGaussian, kl_gaussian
from .errors import ConfigError, DataError, NumericalError
from .numerics import Adam, DenseBlock, RecurrentCell, backward, make_generator

LOG_2PI = math.log(2 * math.pi)
LOG_2 = math.log(2.0)


@dataclass
class Belief:
    h: torch.Tensor
    s: torch.Tensor

    def features(self) -> torch.Tensor:
        return torch.cat([self.h, self.s], -1)

    def detach(self) -> "Belief":
        return Belief(self.h.detach(), self.s.detach())

    def __getitem__(self, idx) -> "Belief":
        return Belief(self.h[idx], self.s[idx])


@dataclass
class SequenceOutput:
    """Posterior pass over a window batch.

    ``h``/``s`` are full (B, K, .) grids; the ``*_valid`` tensors hold only
    unmasked steps in row-major (batch, time) order.
    """

    h: torch.Tensor
    s: torch.Tensor
    valid: torch.Tensor
    post_valid: DiagGaussian
    prior_valid: DiagGaussian
    u_noise_valid: torch.Tensor | None


def _mlp(inp: int, units: int, layers: int, out: int, name: str, gen) -> DenseBlock:
    return DenseBlock([inp] + [units] * layers + [out], "selu", name=name, generator=gen)


class WorldModel(nn.Module):
    def __init__(self, obs_dim: int, act_dim: int, cfg: ModelConfig | None = None, seed: int = 0):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        self.obs_dim, self.act_dim = obs_dim, act_dim
        D, S, E, U = cfg.deter_size, cfg.stoch_size, cfg.embed_size, cfg.latent_action_size
        gen = make_generator(seed)
        self.embedder = _mlp(obs_dim, cfg.encoder_units, cfg.encoder_layers, E, "embedder", gen)
        self.transition_in = DenseBlock([S + act_dim, cfg.hidden_units], "linear", "transition_in", gen)
        self.cell = RecurrentCell(cfg.hidden_units, D, "transition", gen)
        self.state_prior = _mlp(D, cfg.hidden_units, 1, 2 * S, "state_prior", gen)
        self.state_posterior = _mlp(D + E, cfg.hidden_units, 1, 2 * S, "state_posterior", gen)
        F_ = D + S
        self.obs_decoder = _mlp(F_, cfg.decoder_units, cfg.decoder_layers, obs_dim, "obs_decoder", gen)
        self.reward_head = _mlp(F_, cfg.head_units, cfg.head_layers, 1, "reward_head", gen)
        self.term_head = _mlp(F_, cfg.head_units, cfg.head_layers, 1, "term_head", gen)
        if cfg.latent_actions:
            self.action_prior = _mlp(F_, cfg.la_prior_units, cfg.la_prior_layers, 2 * U, "action_prior", gen)
            self.action_posterior = _mlp(F_ + act_dim, cfg.la_encoder_units, cfg.la_encoder_layers, 2 * U,
                                         "action_posterior", gen)
            self.action_decoder = _mlp(F_ + U, cfg.la_decoder_units, cfg.la_decoder_layers, 2 * act_dim,
                                       "action_decoder", gen)
        self.register_buffer("obs_mean", torch.zeros(obs_dim))
        self.register_buffer("obs_std", torch.ones(obs_dim))

    # ------------------------------------------------------------------ basics
    @property
    def latent_actions(self) -> bool:
        return self.cfg.latent_actions

    @property
    def dtype(self) -> torch.dtype:
        return self.obs_mean.dtype

    def set_normalization(self, dataset: TrajectoryDataset) -> None:
        self.obs_mean.copy_(torch.as_tensor(dataset.obs_mean))
        self.obs_std.copy_(torch.as_tensor(dataset.obs_std))

    def normalize(self, obs) -> torch.Tensor:
        obs = torch.as_tensor(obs, dtype=self.dtype)
        return (obs - self.obs_mean) / self.obs_std

    def initial_belief(self, batch: int) -> Belief:
        return Belief(torch.zeros(batch, self.cfg.deter_size, dtype=self.dtype),
                      torch.zeros(batch, self.cfg.stoch_size, dtype=self.dtype))

    def transition(self, prev: Belief, action: torch.Tensor) -> torch.Tensor:
        x = F.selu(self.transition_in(torch.cat([prev.s, action], -1)))
        return self.cell(prev.h, x)

    def prior(self, h: torch.Tensor) -> DiagGaussian:
        return DiagGaussian.from_raw(self.state_prior(h), self.cfg.min_std)

    def posterior(self, h: torch.Tensor, embed: torch.Tensor) -> DiagGaussian:
        return DiagGaussian.from_raw(self.state_posterior(torch.cat([h, embed], -1)), self.cfg.min_std)

    def reward(self, belief: Belief) -> torch.Tensor:
        return self.reward_head(belief.features()).squeeze(-1)

    def termination(self, belief: Belief) -> Bernoulli:
        return Bernoulli(self.term_head(belief.features()).squeeze(-1))

    def decode_observation(self, belief: Belief) -> torch.Tensor:
        return self.obs_decoder(belief.features())

    # ---------------------------------------------------------- latent actions
    def _require_latent(self, what: str) -> None:
        if not self.latent_actions:
            raise ConfigError(f"{what} requires latent actions; this model was built with latent_actions=False")

    def latent_action_prior(self, belief: Belief) -> DiagGaussian:
        self._require_latent("latent_action_prior")
        return DiagGaussian.from_raw(self.action_prior(belief.features()), self.cfg.min_std)

    def posterior_action(self, belief: Belief, action: torch.Tensor) -> DiagGaussian:
        self._require_latent("posterior_action")
        return DiagGaussian.from_raw(self.action_posterior(torch.cat([belief.features(), action], -1)),
                                     self.cfg.min_std)

    def action_distribution(self, belief: Belief, u: torch.Tensor) -> BetaVector:
        self._require_latent("action_distribution")
        return BetaVector.from_raw(self.action_decoder(torch.cat([belief.features(), u], -1)))

    def decode_action(self, belief: Belief, u: torch.Tensor, gen: torch.Generator | None = None,
                      mode: bool = False) -> torch.Tensor:
        """Environment action ``2x - 1`` with x the Beta sample (or mode)."""
        dist = self.action_distribution(belief, u)
        x = dist.mode() if mode else dist.rsample(gen)
        return 2.0 * x - 1.0

    # -------------------------------------------------------------- stepping
    def observe_step(self, prev: Belief, prev_action: torch.Tensor, obs: torch.Tensor,
                     gen: torch.Generator | None = None, t: int = 0,
                     noise: torch.Tensor | None = None) -> tuple[DiagGaussian, DiagGaussian, Belief]:
        """One filtering step: h_t = f(h, s, a_prev); prior from h_t; posterior from (h_t, e(o_t))."""
        for name, x in (("prev_action", prev_action), ("observation", obs)):
            if not torch.isfinite(x).all():
                raise NumericalError(f"non-finite {name} at timestep {t}", path=f"t={t}")
        h = self.transition(prev, prev_action)
        prior = self.prior(h)
        post = self.posterior(h, self.embedder(obs))
        s = post.rsample(gen, noise)
        return post, prior, Belief(h, s)

    def imagine_step(self, belief: Belief, latent: torch.Tensor, gen: torch.Generator | None = None,
                     mode: bool = False) -> tuple[torch.Tensor, Belief]:
        """Decode an action (from u, or pass it through without latent actions) and step the prior."""
        if self.latent_actions:
            action = self.decode_action(belief, latent, gen, mode)
        else:
            action = latent
        h = self.transition(belief, action)
        prior = self.prior(h)
        s = prior.mode() if mode else prior.rsample(gen)
        return action, Belief(h, s)

    # ---------------------------------------------------------- sequences
    def observe_sequence(self, batch: dict[str, torch.Tensor], gen: torch.Generator) -> SequenceOutput:
        """Posterior rollout over front-padded windows.

        The belief is reset before the first valid step. Noise is drawn per
        time step and re-indexed by each row's valid-step counter, so the
        same episode gets the same noise however much padding precedes it.
        """
        obs, act, mask = batch["observations"], batch["actions"], batch["mask"]
        B, K = mask.shape
        S, U = self.cfg.stoch_size, self.cfg.latent_action_size
        eps_s, eps_u = [], []
        for _ in range(K):
            eps_s.append(torch.randn((B, S), generator=gen, dtype=self.dtype))
            if self.latent_actions:
                eps_u.append(torch.randn((B, U), generator=gen, dtype=self.dtype))
        pad = K - mask.sum(1).long()
        steps = torch.arange(K)
        idx = (steps[None, :] - pad[:, None]).clamp(min=0)            # (B, K)
        rows = torch.arange(B)[:, None].expand(B, K)
        eps_s = torch.stack(eps_s)[idx, rows]                           # (B, K, S)
        valid = mask > 0.5
        embed = torch.zeros(B, K, self.cfg.embed_size, dtype=self.dtype)
        embed = embed.index_put((valid,), self.embedder(obs[valid]))

        belief = self.initial_belief(B)
        hs, ss, means, stds = [], [], [], []
        prev_mask = torch.zeros(B, 1, dtype=self.dtype)
        prev_action = torch.zeros(B, self.act_dim, dtype=self.dtype)
        for t in range(K):
            belief = Belief(belief.h * prev_mask, belief.s * prev_mask)
            h = self.transition(belief, prev_action * prev_mask)
            post = self.posterior(h, embed[:, t])
            s = post.rsample(noise=eps_s[:, t])
            belief = Belief(h, s)
            hs.append(h)
            ss.append(s)
            means.append(post.mean)
            stds.append(post.std)
            prev_mask = mask[:, t:t + 1]
            prev_action = act[:, t]
        H, Ss = torch.stack(hs, 1), torch.stack(ss, 1)
        post_valid = DiagGaussian(torch.stack(means, 1)[valid], torch.stack(stds, 1)[valid], validate=False)
        prior_valid = self.prior(H[valid])
        u_noise = torch.stack(eps_u)[idx, rows][valid] if self.latent_actions else None
        return SequenceOutput(H, Ss, valid, post_valid, prior_valid, u_noise)

    def loss_terms(self, batch: dict[str, torch.Tensor], gen: torch.Generator) -> dict[str, torch.Tensor]:
        """Per-valid-step negative log-likelihoods and KLs, each of shape (N,)."""
        seq = self.observe_sequence(batch, gen)
        valid = seq.valid
        belief = Belief(seq.h[valid], seq.s[valid])
        feat = belief.features()
        obs, act = batch["observations"][valid], batch["actions"][valid]
        rew, term = batch["rewards"][valid], batch["terminals"][valid]
        terms = {}
        terms["obs_nll"] = 0.5 * (obs - self.obs_decoder(feat)).pow(2).sum(-1) + 0.5 * self.obs_dim * LOG_2PI
        if self.latent_actions:
            q_u = self.posterior_action(belief, act)
            p_u = self.latent_action_prior(belief)
            u = q_u.rsample(noise=seq.u_noise_valid)
            beta = self.action_distribution(belief, u)
            # density of a = 2x - 1 carries the 1/2 Jacobian per dimension
            terms["act_nll"] = -(beta.log_prob((act + 1.0) / 2.0) - self.act_dim * LOG_2)
        kl_state = kl_gaussian(seq.post_valid, seq.prior_valid)
        if self.cfg.free_bits > 0:
            kl_state = kl_state.clamp(min=self.cfg.free_bits)
        terms["kl_state"] = kl_state
        if self.latent_actions:
            kl_action = kl_gaussian(q_u, p_u)
            terms["kl_action"] = kl_action
        terms["reward_nll"] = 0.5 * (rew - self.reward_head(feat).squeeze(-1)).pow(2) + 0.5 * LOG_2PI
        terms["term_nll"] = -Bernoulli(self.term_head(feat).squeeze(-1)).log_prob(term)
        return terms

    def model_loss(self, batch: WindowBatch | dict, gen: torch.Generator | int) -> tuple[torch.Tensor, dict]:
        """Negative ELBO plus reward/termination NLL, averaged over valid steps."""
        if isinstance(batch, WindowBatch):
            batch = batch.to_torch(self.dtype)
        if isinstance(gen, int):
            gen = make_generator(gen)
        terms = self.loss_terms(batch, gen)
        n = int(batch["mask"].sum().item())
        per_step = sum(terms.values())
        loss = per_step.sum() / max(n, 1)
        metrics = {k: (v.sum() / max(n, 1)).item() for k, v in terms.items()}
        metrics["loss"] = loss.item()
        if not math.isfinite(metrics["loss"]):
            raise NumericalError(f"non-finite model loss: {metrics}", metrics=metrics)
        return loss, metrics

    # ---------------------------------------------------------- persistence
    def metadata(self) -> dict:
        return {"kind": "world_model", "obs_dim": self.obs_dim, "act_dim": self.act_dim,
                "config": dataclasses.asdict(self.cfg), "dtype": str(self.dtype).replace("torch.", "")}

    def save(self, path, optimizer: Adam | None = None, extra: dict | None = None) -> None:
        tensors = {f"model/{k}": v for k, v in self.state_dict().items()}
        meta = self.metadata() | (extra or {})
        if optimizer is not None:
            tensors |= {f"optim/{k}": v for k, v in optimizer.state_tensors().items()}
            meta["optimizer_steps"] = optimizer.step_count
        checkpoint.save_checkpoint(path, tensors, meta)

    @classmethod
    def load(cls, path) -> tuple["WorldModel", dict, dict]:
        tensors, meta = checkpoint.load_checkpoint(path)
        if meta.get("kind") != "world_model":
            raise DataError(f"{path}: not a world-model checkpoint (kind={meta.get('kind')!r})")
        model = cls(meta["obs_dim"], meta["act_dim"], ModelConfig(**meta["config"]))
        if meta.get("dtype") == "float64":
            model.double()
        model.load_state_dict({k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")})
        optim = {k[len("optim/"):]: v for k, v in tensors.items() if k.startswith("optim/")}
        return model, meta, optim


def no_latent_action_model(obs_dim: int, act_dim: int, cfg: ModelConfig | None = None, seed: int = 0) -> WorldModel:
    """Ablation: plain recurrent state-space model without latent actions."""
    cfg = dataclasses.replace(cfg or ModelConfig(), latent_actions=False)
    return WorldModel(obs_dim, act_dim, cfg, seed)


def build_model(dataset: TrajectoryDataset, cfg: ModelConfig, seed: int, dtype=torch.float32) -> WorldModel:
    model = WorldModel(dataset.obs_dim, dataset.act_dim, cfg, seed).to(dtype)
    model.set_normalization(dataset)
    return model


def train_model(model: WorldModel, dataset: TrajectoryDataset, steps: int, data_seed: int, noise_seed: int,
                optimizer: Adam | None = None, log_every: int = 100, on_log=None) -> tuple[Adam, list[dict]]:
    """Maximise the model objective with Adam on sampled windows."""
    cfg = model.cfg
    optimizer = optimizer or Adam(list(model.named_parameters()), cfg.learning_rate, clip_norm=cfg.grad_clip or None)
    rng = np.random.default_rng(data_seed)
    gen = make_generator(noise_seed)
    rows = []
    for step in range(1, steps + 1):
        batch = sample_windows(dataset, cfg.batch_size, cfg.window, rng)
        optimizer.zero_grad()
        loss, metrics = model.model_loss(batch, gen)
        backward(loss)
        optimizer.apply()
        if step % log_every == 0 or step == steps:
            row = {"step": optimizer.step_count} | metrics
            rows.append(row)
            if on_log:
                on_log(row)
    return optimizer, rows
