"""Run configuration: flat ``key = value`` INI files with sections.

Defaults follow the low-dimensional-feature hyperparameters of the method.
Precedence when resolving: command-line overrides > config file > defaults.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError

CONFIG_VERSION = 1


@dataclass
class ModelConfig:
    deter_size: int = 200
    stoch_size: int = 30
    embed_size: int = 30
    latent_action_size: int = 12
    hidden_units: int = 200
    encoder_units: int = 128
    encoder_layers: int = 2
    decoder_units: int = 128
    decoder_layers: int = 2
    la_encoder_units: int = 512
    la_encoder_layers: int = 2
    la_decoder_units: int = 512
    la_decoder_layers: int = 2
    la_prior_units: int = 256
    la_prior_layers: int = 2
    head_units: int = 200
    head_layers: int = 2
    learning_rate: float = 3e-4
    batch_size: int = 64
    window: int = 50
    free_bits: float = 0.0  # floor on the per-step state KL only
    grad_clip: float = 100.0
    min_std: float = 1e-4
    latent_actions: bool = True


@dataclass
class AgentConfig:
    policy_units: int = 256
    policy_layers: int = 3
    value_units: int = 256
    value_layers: int = 3
    num_critics: int = 2
    learning_rate: float = 8e-5
    entropy_scale: float = 0.01
    horizon: int = 5
    discount: float = 0.99
    lambda_: float = 0.95
    epsilon: float = 2.0
    constrained: bool = True
    batch_size: int = 64
    window: int = 50
    critic_ema: float = 0.0
    grad_clip: float = 100.0


@dataclass
class TrainConfig:
    model_steps: int = 5000
    agent_steps: int = 20000
    eval_every: int = 1000
    eval_episodes: int = 10
    value_every: int = 500
    log_every: int = 100
    dtype: str = "float32"


@dataclass
class EnvConfig:
    env: str = "pointmass"
    policy: str = "expert"
    episodes: int = 100
    horizon: int = 100


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    seed: int = 0

    SECTIONS = ("model", "agent", "train", "env")

    def replace(self, **sections) -> "Config":
        return dataclasses.replace(self, **sections)

    def valid_keys(self) -> list[str]:
        return [f"{s}.{_ini_name(f.name)}" for s in self.SECTIONS for f in fields(getattr(self, s))]

    def set(self, dotted: str, value: str) -> None:
        if "." not in dotted:
            raise ConfigError(f"override {dotted!r} must look like section.key; valid keys: {', '.join(self.valid_keys())}")
        section, key = dotted.split(".", 1)
        if section not in self.SECTIONS:
            raise ConfigError(f"unknown section {section!r}; valid keys: {', '.join(self.valid_keys())}")
        obj = getattr(self, section)
        names = {_ini_name(f.name): f for f in fields(obj)}
        if key not in names:
            raise ConfigError(f"unknown key {dotted!r}; valid keys: {', '.join(self.valid_keys())}")
        f = names[key]
        setattr(obj, f.name, _coerce(value, f.type, dotted))

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp["meta"] = {"config_version": str(CONFIG_VERSION), "seed": str(self.seed)}
        for s in self.SECTIONS:
            obj = getattr(self, s)
            cp[s] = {_ini_name(f.name): _fmt(getattr(obj, f.name)) for f in fields(obj)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {s: dataclasses.asdict(getattr(self, s)) for s in self.SECTIONS} | {"seed": self.seed}

    @classmethod
    def from_ini(cls, text: str, base: "Config | None" = None) -> "Config":
        cfg = dataclasses.replace(base) if base is not None else cls()
        cfg = cls(**{s: dataclasses.replace(getattr(cfg, s)) for s in cls.SECTIONS}, seed=cfg.seed)
        cp = configparser.ConfigParser()
        cp.read_string(text)
        for s in cp.sections():
            if s == "meta":
                version = int(cp[s].get("config_version", CONFIG_VERSION))
                if version != CONFIG_VERSION:
                    raise ConfigError(f"config version {version} does not match supported version {CONFIG_VERSION}")
                if "seed" in cp[s]:
                    cfg.seed = int(cp[s]["seed"])
                continue
            for key, value in cp[s].items():
                cfg.set(f"{s}.{key}", value)
        return cfg

    @classmethod
    def load(cls, path) -> "Config":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        return cls.from_ini(path.read_text())


def _ini_name(name: str) -> str:
    return name.rstrip("_")


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(value, typ, key):
    typ = typ if isinstance(typ, type) else {"int": int, "float": float, "bool": bool, "str": str}[typ]
    try:
        if typ is bool:
            if isinstance(value, bool):
                return value
            low = str(value).strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        return typ(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot parse {value!r} as {typ.__name__}") from None


def toy_config(seed: int = 0) -> Config:
    """Desk-scale settings used by the acceptance runs on the point-mass task."""
    return Config(
        model=ModelConfig(deter_size=64, stoch_size=8, embed_size=16, latent_action_size=4, hidden_units=64,
                          encoder_units=64, decoder_units=64, la_encoder_units=64, la_decoder_units=64,
                          la_prior_units=64, head_units=64, learning_rate=1e-3, batch_size=32, window=32,
                          free_bits=3.0),
        agent=AgentConfig(policy_units=64, value_units=64, learning_rate=3e-4, batch_size=64, window=16),
        train=TrainConfig(model_steps=3000, agent_steps=2000, eval_every=250, eval_episodes=10, value_every=250,
                          log_every=250),
        env=EnvConfig(episodes=300),
        seed=seed,
    )


def split_seeds(root: int) -> dict[str, int]:
    """Independent per-subsystem seeds derived from one root seed."""
    names = ("data", "model_init", "model_noise", "agent_init", "agent_noise", "env")
    children = np.random.SeedSequence(root).spawn(len(names))
    return {n: int(c.generate_state(1, np.uint64)[0] % (2**63)) for n, c in zip(names, children)}
