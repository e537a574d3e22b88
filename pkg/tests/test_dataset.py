import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clap.dataset import (Episode, TrajectoryDataset, _PREAMBLE, full_episode_batch, import_csv_dir, load,
                          sample_windows, save, window_starts)
from clap.errors import ConfigError, DataError
from conftest import random_dataset, random_episode


def test_round_trip_bit_exact(tmp_path):
    ds = random_dataset(3, lengths=[5, 9, 7])
    save(ds, tmp_path / "d.clapdata")
    back = load(tmp_path / "d.clapdata")
    assert back == ds


def test_mid_episode_terminal_rejected_with_step(tmp_path):
    ds = random_dataset(1, T=6, obs_dim=2, act_dim=1)
    path = tmp_path / "d.clapdata"
    save(ds, path)
    raw = bytearray(path.read_bytes())
    _, _, hlen = _PREAMBLE.unpack_from(raw, 0)
    offset = _PREAMBLE.size + hlen + 4 * (6 * 2 + 6 * 1 + 6) + 4 * 2
    struct.pack_into("<f", raw, offset, 1.0)
    path.write_bytes(bytes(raw))
    with pytest.raises(DataError, match="step 2"):
        load(path)


def test_empty_file_no_episodes(tmp_path):
    (tmp_path / "e.clapdata").write_bytes(b"")
    with pytest.raises(DataError, match="no episodes"):
        load(tmp_path / "e.clapdata")


def test_truncated_file(tmp_path):
    save(random_dataset(2), tmp_path / "d.clapdata")
    data = (tmp_path / "d.clapdata").read_bytes()
    (tmp_path / "t.clapdata").write_bytes(data[:-10])
    with pytest.raises(DataError, match="truncated"):
        load(tmp_path / "t.clapdata")


def test_version_mismatch(tmp_path):
    save(random_dataset(2), tmp_path / "d.clapdata")
    raw = bytearray((tmp_path / "d.clapdata").read_bytes())
    struct.pack_into("<I", raw, 8, 99)
    (tmp_path / "d.clapdata").write_bytes(bytes(raw))
    with pytest.raises(DataError, match="version"):
        load(tmp_path / "d.clapdata")


def test_invalid_episode_rejected():
    rng = np.random.default_rng(0)
    ep = random_episode(rng, 4)
    ep.actions[1, 0] = 1.5
    with pytest.raises(DataError, match="episode 0"):
        TrajectoryDataset([ep])
    with pytest.raises(DataError):
        TrajectoryDataset([random_episode(rng, 1)])


def test_full_window_single_episode():
    ds = random_dataset(1, T=50)
    b = sample_windows(ds, 1, 50, 0)
    assert b.mask.all()
    assert np.allclose(b.observations[0], ds.normalize(ds.episodes[0].observations))
    assert np.array_equal(b.actions[0], ds.episodes[0].actions)


def test_short_episode_front_padded():
    ds = random_dataset(1, T=10)
    b = sample_windows(ds, 1, 50, 0)
    assert b.mask[0, :40].sum() == 0 and b.mask[0, 40:].all()
    assert np.array_equal(b.rewards[0, 40:], ds.episodes[0].rewards)
    assert not b.observations[0, :40].any()


def test_windows_never_cross_episodes():
    ds = random_dataset(4, lengths=[12, 7, 30, 9])
    b = sample_windows(ds, 200, 8, 1)
    # terminal can only be the last valid step of a window
    for row_t, row_m in zip(b.terminals, b.mask):
        hits = np.flatnonzero(row_t)
        assert hits.size == 0 or hits[0] == len(row_m) - 1


def test_selection_frequency_binomial():
    ds = random_dataset(2, lengths=[20, 60])
    K = 10
    counts = window_starts(ds, K)
    p = counts[0] / counts.sum()
    n = 10_000
    b = sample_windows(ds, n, K, 3)
    # first episode windows are the rows whose reward sequence comes from it
    first = ds.episodes[0].rewards
    from_first = sum(np.isin(row, first).all() for row in b.rewards)
    assert abs(from_first - n * p) < 3 * np.sqrt(n * p * (1 - p))


def test_bad_batch_params():
    with pytest.raises(ConfigError):
        sample_windows(random_dataset(), 0, 5, 0)
    with pytest.raises(ConfigError):
        sample_windows(random_dataset(), 4, 0, 0)


def test_sampling_seeded():
    ds = random_dataset(3)
    a, b = sample_windows(ds, 5, 4, 9), sample_windows(ds, 5, 4, 9)
    assert np.array_equal(a.observations, b.observations)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 5))
def test_normalization_moments(seed, n):
    ds = random_dataset(n, T=13, seed=seed)
    allobs = np.concatenate([ds.normalize(ep.observations.astype(np.float64)) for ep in ds.episodes])
    assert np.abs(allobs.mean(0)).max() < 1e-6
    assert np.abs(allobs.std(0) - 1).max() < 1e-6


def test_full_episode_batch_lengths():
    ds = random_dataset(3, lengths=[4, 6, 3])
    b = full_episode_batch(ds)
    assert b.shape == (3, 6)
    assert b.mask.sum(1).tolist() == [4, 6, 3]


def test_epoch_definition():
    ds = random_dataset(2, lengths=[50, 51])
    assert ds.batches_per_epoch(4, 10) == 3


def test_import_csv(tmp_path):
    for i in range(2):
        rows = ["obs_0,obs_1,act_0,reward,terminal"]
        rows += [f"{t},{-t},0.5,{t * 0.1},{int(t == 2)}" for t in range(3)]
        (tmp_path / f"ep{i}.csv").write_text("\n".join(rows) + "\n")
    ds = import_csv_dir(tmp_path, "csvset")
    assert len(ds.episodes) == 2 and ds.obs_dim == 2 and ds.act_dim == 1
    assert ds.episodes[1].terminals.tolist() == [False, False, True]
    assert ds.metadata["name"] == "csvset"
