"""Offline trajectory storage, the on-disk format and window batching.

File layout (little-endian)::

    8 bytes  magic b"CLAPDATA"
    uint32   format version
    uint64   header length N
    N bytes  UTF-8 JSON header: format_version, obs_dim, act_dim,
             episode_lengths, obs_mean, obs_std, metadata
    then for every episode, in order, float32 blocks:
             observations (T*obs_dim), actions (T*act_dim),
             rewards (T), terminals (T, stored as 0.0/1.0)
"""

from __future__ import annotations

import csv
import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, DataError

MAGIC = b"CLAPDATA"
FORMAT_VERSION = 1
STD_FLOOR = 1e-6
_PREAMBLE = struct.Struct("<8sIQ")
_F32 = np.dtype("<f4")


@dataclass
class Episode:
    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    terminals: np.ndarray

    def __post_init__(self):
        self.observations = np.asarray(self.observations, dtype=np.float32)
        self.actions = np.asarray(self.actions, dtype=np.float32)
        self.rewards = np.asarray(self.rewards, dtype=np.float32)
        self.terminals = np.asarray(self.terminals, dtype=bool)

    def __len__(self) -> int:
        return len(self.rewards)

    def validate(self, index: int = 0) -> None:
        T = len(self.rewards)
        if self.observations.ndim != 2 or self.actions.ndim != 2:
            raise DataError(f"episode {index}: observations/actions must be 2-D")
        if not (len(self.observations) == len(self.actions) == len(self.terminals) == T):
            raise DataError(f"episode {index}: arrays have mismatched lengths")
        if T < 2:
            raise DataError(f"episode {index}: length {T} < 2")
        mid = np.flatnonzero(self.terminals[:-1])
        if mid.size:
            raise DataError(f"episode {index}: terminal=true at step {int(mid[0])} before the final step")
        if np.abs(self.actions).max() > 1.0:
            raise DataError(f"episode {index}: actions outside [-1, 1]")
        for name in ("observations", "actions", "rewards"):
            if not np.isfinite(getattr(self, name)).all():
                raise DataError(f"episode {index}: non-finite {name}")


@dataclass
class TrajectoryDataset:
    episodes: list[Episode]
    obs_mean: np.ndarray = None
    obs_std: np.ndarray = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.episodes:
            raise DataError("dataset has no episodes")
        for i, ep in enumerate(self.episodes):
            ep.validate(i)
        dims = {(ep.observations.shape[1], ep.actions.shape[1]) for ep in self.episodes}
        if len(dims) != 1:
            raise DataError(f"episodes disagree on dimensions: {sorted(dims)}")
        if self.obs_mean is None or self.obs_std is None:
            self.obs_mean, self.obs_std = self.compute_stats()
        self.obs_mean = np.asarray(self.obs_mean, dtype=np.float64)
        self.obs_std = np.asarray(self.obs_std, dtype=np.float64)

    @property
    def obs_dim(self) -> int:
        return self.episodes[0].observations.shape[1]

    @property
    def act_dim(self) -> int:
        return self.episodes[0].actions.shape[1]

    @property
    def total_steps(self) -> int:
        return sum(len(ep) for ep in self.episodes)

    def compute_stats(self) -> tuple[np.ndarray, np.ndarray]:
        allobs = np.concatenate([ep.observations for ep in self.episodes]).astype(np.float64)
        return allobs.mean(0), np.maximum(allobs.std(0), STD_FLOOR)

    def normalize(self, obs):
        if isinstance(obs, torch.Tensor):
            mean = torch.as_tensor(self.obs_mean, dtype=obs.dtype)
            std = torch.as_tensor(self.obs_std, dtype=obs.dtype)
            return (obs - mean) / std
        return ((obs - self.obs_mean) / self.obs_std).astype(np.float32)

    def episode_returns(self) -> np.ndarray:
        return np.array([float(ep.rewards.astype(np.float64).sum()) for ep in self.episodes])

    def batches_per_epoch(self, batch_size: int, window: int) -> int:
        return math.ceil(self.total_steps / (batch_size * window))

    def __eq__(self, other) -> bool:
        if not isinstance(other, TrajectoryDataset) or len(self.episodes) != len(other.episodes):
            return False
        for a, b in zip(self.episodes, other.episodes):
            for name in ("observations", "actions", "rewards", "terminals"):
                if not np.array_equal(getattr(a, name), getattr(b, name)):
                    return False
        return (np.array_equal(self.obs_mean, other.obs_mean) and np.array_equal(self.obs_std, other.obs_std)
                and self.metadata == other.metadata)


def save(dataset: TrajectoryDataset, path: str | os.PathLike) -> None:
    header = json.dumps({
        "format_version": FORMAT_VERSION,
        "obs_dim": dataset.obs_dim,
        "act_dim": dataset.act_dim,
        "episode_lengths": [len(ep) for ep in dataset.episodes],
        "obs_mean": [float(x) for x in dataset.obs_mean],
        "obs_std": [float(x) for x in dataset.obs_std],
        "metadata": dataset.metadata,
    }, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(header)))
        fh.write(header)
        for ep in dataset.episodes:
            for arr in (ep.observations, ep.actions, ep.rewards, ep.terminals.astype(np.float32)):
                fh.write(np.ascontiguousarray(arr, dtype=_F32).tobytes())
    os.replace(tmp, path)


def load(path: str | os.PathLike) -> TrajectoryDataset:
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    data = path.read_bytes()
    if not data:
        raise DataError(f"{path}: no episodes (empty file)")
    if len(data) < _PREAMBLE.size:
        raise DataError(f"{path}: truncated preamble")
    magic, version, hlen = _PREAMBLE.unpack_from(data, 0)
    if magic != MAGIC:
        raise DataError(f"{path}: not a dataset file")
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: dataset format version {version}, this build reads version {FORMAT_VERSION}")
    pos = _PREAMBLE.size + hlen
    if len(data) < pos:
        raise DataError(f"{path}: truncated header")
    header = json.loads(data[_PREAMBLE.size:pos].decode("utf-8"))
    lengths = header["episode_lengths"]
    if not lengths:
        raise DataError(f"{path}: no episodes")
    do, da = header["obs_dim"], header["act_dim"]
    episodes = []
    for i, T in enumerate(lengths):
        blocks = []
        for width in (do, da, 1, 1):
            n = T * width
            if pos + 4 * n > len(data):
                raise DataError(f"{path}: truncated data in episode {i}")
            blocks.append(np.frombuffer(data, dtype=_F32, count=n, offset=pos).astype(np.float32))
            pos += 4 * n
        obs, act, rew, term = blocks
        ep = Episode(obs.reshape(T, do), act.reshape(T, da), rew, term > 0.5)
        try:
            ep.validate(i)
        except DataError as exc:
            raise DataError(f"{path}: {exc}") from None
        episodes.append(ep)
    if pos != len(data):
        raise DataError(f"{path}: {len(data) - pos} trailing bytes after last episode")
    return TrajectoryDataset(episodes, np.array(header["obs_mean"]), np.array(header["obs_std"]),
                             header.get("metadata", {}))


def import_csv_dir(directory: str | os.PathLike, name: str | None = None) -> TrajectoryDataset:
    """One CSV per episode, columns ``obs_*``, ``act_*``, ``reward``, ``terminal``.

    Files are read in sorted filename order.
    """
    directory = Path(directory)
    files = sorted(directory.glob("*.csv"))
    if not files:
        raise DataError(f"{directory}: no episodes (no .csv files)")
    episodes = []
    for i, f in enumerate(files):
        with open(f, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise DataError(f"{f}: episode {i} is empty")
        cols = list(rows[0])
        obs_cols = sorted((c for c in cols if c.startswith("obs_")), key=lambda c: int(c[4:]))
        act_cols = sorted((c for c in cols if c.startswith("act_")), key=lambda c: int(c[4:]))
        missing = {"reward", "terminal"} - set(cols)
        if not obs_cols or not act_cols or missing:
            raise DataError(f"{f}: expected obs_*, act_*, reward, terminal columns")
        obs = np.array([[float(r[c]) for c in obs_cols] for r in rows])
        act = np.array([[float(r[c]) for c in act_cols] for r in rows])
        rew = np.array([float(r["reward"]) for r in rows])
        term = np.array([r["terminal"].strip().lower() in ("1", "true", "1.0") for r in rows])
        episodes.append(Episode(obs, act, rew, term))
    return TrajectoryDataset(episodes, metadata={"name": name or directory.name, "generator": "csv-import",
                                                 "source": str(directory)})


@dataclass
class WindowBatch:
    """B x K windows; front-padded steps have ``mask == 0`` and zero content."""

    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    terminals: np.ndarray
    mask: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    def to_torch(self, dtype: torch.dtype = torch.float32) -> dict[str, torch.Tensor]:
        return {k: torch.as_tensor(getattr(self, k), dtype=dtype)
                for k in ("observations", "actions", "rewards", "terminals", "mask")}


def window_starts(dataset: TrajectoryDataset, window: int) -> np.ndarray:
    """Number of valid start positions per episode (1 for episodes shorter than the window)."""
    return np.array([max(len(ep) - window + 1, 1) for ep in dataset.episodes])


def sample_windows(dataset: TrajectoryDataset, batch_size: int, window: int,
                   rng: np.random.Generator | int) -> WindowBatch:
    """Sample windows with replacement, uniformly over all valid (episode, start) pairs."""
    if batch_size <= 0 or window <= 0:
        raise ConfigError(f"batch size and window must be positive, got {batch_size}, {window}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    counts = window_starts(dataset, window)
    cum = np.cumsum(counts)
    draws = rng.integers(0, cum[-1], size=batch_size)
    ep_idx = np.searchsorted(cum, draws, side="right")
    starts = draws - np.concatenate([[0], cum[:-1]])[ep_idx]
    return _gather(dataset, ep_idx, starts, window)


def _gather(dataset: TrajectoryDataset, ep_idx, starts, window: int) -> WindowBatch:
    B = len(ep_idx)
    obs = np.zeros((B, window, dataset.obs_dim), np.float32)
    act = np.zeros((B, window, dataset.act_dim), np.float32)
    rew = np.zeros((B, window), np.float32)
    term = np.zeros((B, window), np.float32)
    mask = np.zeros((B, window), np.float32)
    for b, (e, s) in enumerate(zip(ep_idx, starts)):
        ep = dataset.episodes[e]
        n = min(window, len(ep) - s)
        pad = window - n
        obs[b, pad:] = dataset.normalize(ep.observations[s:s + n])
        act[b, pad:] = ep.actions[s:s + n]
        rew[b, pad:] = ep.rewards[s:s + n]
        term[b, pad:] = ep.terminals[s:s + n]
        mask[b, pad:] = 1.0
    return WindowBatch(obs, act, rew, term, mask)


def full_episode_batch(dataset: TrajectoryDataset, indices=None) -> WindowBatch:
    """Whole episodes, front-padded to the longest one."""
    indices = range(len(dataset.episodes)) if indices is None else indices
    indices = list(indices)
    window = max(len(dataset.episodes[i]) for i in indices)
    return _gather(dataset, indices, [0] * len(indices), window)
