import numpy as np
import pytest
import torch

from clap.config import AgentConfig, ModelConfig
from clap.dataset import Episode, TrajectoryDataset


def tiny_model_config(**overrides) -> ModelConfig:
    base = dict(deter_size=6, stoch_size=3, embed_size=4, latent_action_size=2, hidden_units=5,
                encoder_units=5, encoder_layers=1, decoder_units=5, decoder_layers=1,
                la_encoder_units=5, la_encoder_layers=1, la_decoder_units=5, la_decoder_layers=1,
                la_prior_units=5, la_prior_layers=1, head_units=5, head_layers=1,
                batch_size=3, window=4, grad_clip=0.0)
    base.update(overrides)
    return ModelConfig(**base)


def tiny_agent_config(**overrides) -> AgentConfig:
    base = dict(policy_units=5, policy_layers=1, value_units=5, value_layers=1, horizon=2, batch_size=3, window=4,
                grad_clip=0.0)
    base.update(overrides)
    return AgentConfig(**base)


def random_episode(rng, T, obs_dim=3, act_dim=2) -> Episode:
    term = np.zeros(T, bool)
    term[-1] = True
    return Episode(rng.normal(size=(T, obs_dim)), rng.uniform(-1, 1, (T, act_dim)), rng.normal(size=T), term)


def random_dataset(n=3, T=8, obs_dim=3, act_dim=2, seed=0, lengths=None) -> TrajectoryDataset:
    rng = np.random.default_rng(seed)
    lengths = lengths or [T] * n
    return TrajectoryDataset([random_episode(rng, t, obs_dim, act_dim) for t in lengths],
                             metadata={"name": "random", "seed": seed})


@pytest.fixture
def f64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


# PASS/FAIL lines from the acceptance suite, printed in the terminal summary
ACCEPTANCE: dict[int, str] = {}


def report_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"CRITERION {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
