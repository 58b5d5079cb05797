import struct

import numpy as np
import pytest

from qsparse import engine, operators
from qsparse.data import (
    load_idx, shard, synthetic_classification, to_unit_grid, write_idx,
)
from qsparse.errors import DataError, FormatError, ParameterError
from qsparse.objectives import Dataset, Softmax, loss, param_dim, validate_objective
from qsparse.schedule import make_periodic


def _write(path, header, body):
    path.write_bytes(struct.pack(f">{len(header)}I", *header) + bytes(body))


def test_load_single_image(tmp_path):
    _write(tmp_path / "i", [0x803, 1, 2, 2], [0, 255, 0, 255])
    _write(tmp_path / "l", [0x801, 1], [7])
    ds = load_idx(tmp_path / "i", tmp_path / "l")
    assert np.array_equal(ds.features, [[0.0, 1.0, 0.0, 1.0]])
    assert list(ds.labels) == [7]


def test_bad_magic(tmp_path):
    _write(tmp_path / "i", [0x802, 1, 2, 2], [0, 255, 0, 255])
    _write(tmp_path / "l", [0x801, 1], [7])
    with pytest.raises(FormatError, match="unexpected magic"):
        load_idx(tmp_path / "i", tmp_path / "l")


def test_truncated_and_mismatched(tmp_path):
    _write(tmp_path / "i", [0x803, 2, 2, 2], [0] * 7)
    _write(tmp_path / "l", [0x801, 2], [1, 2])
    with pytest.raises(FormatError, match="truncated pixel"):
        load_idx(tmp_path / "i", tmp_path / "l")
    _write(tmp_path / "i", [0x803, 2, 1, 1], [0, 1])
    _write(tmp_path / "l", [0x801, 3], [1, 2, 3])
    with pytest.raises(FormatError, match="count mismatch"):
        load_idx(tmp_path / "i", tmp_path / "l")
    (tmp_path / "l").write_bytes(b"\x00\x00")
    with pytest.raises(FormatError, match="labels: truncated header"):
        load_idx(tmp_path / "i", tmp_path / "l")
    with pytest.raises(DataError, match="cannot read"):
        load_idx(tmp_path / "missing", tmp_path / "l")


def test_label_range_is_checked_later(tmp_path):
    _write(tmp_path / "i", [0x803, 2, 1, 1], [0, 255])
    _write(tmp_path / "l", [0x801, 2], [3, 10])
    ds = load_idx(tmp_path / "i", tmp_path / "l")
    with pytest.raises(DataError):
        validate_objective(Softmax(n_classes=10), ds)


def test_idx_round_trip(tmp_path):
    ds = to_unit_grid(synthetic_classification(50, 6, 3, 2.0, 1))
    write_idx(ds, tmp_path / "i", tmp_path / "l", rows=2, cols=3)
    assert load_idx(tmp_path / "i", tmp_path / "l") == ds


def test_synthetic_deterministic_and_balanced():
    a = synthetic_classification(101, 8, 4, 3.0, 5)
    b = synthetic_classification(101, 8, 4, 3.0, 5)
    assert a.features.tobytes() == b.features.tobytes()
    assert np.array_equal(a.labels, b.labels)
    counts = np.bincount(a.labels)
    assert counts.max() - counts.min() <= 1
    with pytest.raises(ParameterError):
        synthetic_classification(1, 8, 2, 1.0, 0)


def test_class_mean_separation():
    ds = synthetic_classification(20000, 5, 3, 6.0, 0)
    means = np.array([ds.features[ds.labels == j].mean(axis=0) for j in range(3)])
    assert np.linalg.norm(means[0] - means[1]) == pytest.approx(6.0, abs=0.15)


def _train_accuracy(ds, L, T=1500):
    obj = Softmax(lam=1e-4)
    plan = shard(ds, 1)
    cfg = engine.RunConfig(R=1, T=T, b=32, operator=operators.Identity(), schedule=make_periodic(T, 1, 1),
                           lr=engine.Fixed(0.5), objective=obj, data=ds, shards=plan, seed=0,
                           track_virtual=False, record_every=T)
    w = engine.run_sync(cfg).x_final
    d_in = ds.d_in
    W, z = w[: L * d_in].reshape(L, d_in), w[L * d_in:]
    return np.mean(np.argmax(ds.features @ W.T + z, axis=1) == ds.labels)


def test_separable_classes_are_learned():
    ds = synthetic_classification(2000, 20, 10, 10.0, 0)
    assert _train_accuracy(ds, 10) >= 0.99


def test_zero_margin_is_chance():
    # a fresh sample from the same distribution measures generalization
    train = synthetic_classification(2000, 20, 10, 0.0, 0)
    obj = Softmax(lam=1e-4)
    cfg = engine.RunConfig(R=1, T=800, b=32, operator=operators.Identity(), schedule=make_periodic(800, 1, 1),
                           lr=engine.Fixed(0.2), objective=obj, data=train, shards=shard(train, 1), seed=0,
                           track_virtual=False, record_every=800)
    w = engine.run_sync(cfg).x_final
    test = synthetic_classification(5000, 20, 10, 0.0, 99)
    W, z = w[:200].reshape(10, 20), w[200:]
    acc = np.mean(np.argmax(test.features @ W.T + z, axis=1) == test.labels)
    assert abs(acc - 0.1) <= 0.1


def test_shard_examples():
    ds = synthetic_classification(10, 3, 2, 1.0, 0)
    assert [len(a) for a in shard(ds, 3, "round-robin").assignment] == [4, 3, 3]
    assert sorted(shard(ds, 1).assignment[0]) == list(range(10))
    with pytest.raises(ParameterError):
        shard(ds, 11)
    with pytest.raises(ParameterError):
        shard(ds, 2, "nope")


@pytest.mark.parametrize("mode", ["contiguous", "round-robin", "iid-random", "by-label"])
@pytest.mark.parametrize("R", [1, 3, 7])
def test_shards_partition(mode, R):
    ds = synthetic_classification(50, 3, 3, 1.0, 2)
    plan = shard(ds, R, mode, seed=4)
    allidx = np.concatenate(plan.assignment)
    assert sorted(allidx) == list(range(50))
    assert all(len(a) > 0 for a in plan.assignment)


def test_by_label_is_heterogeneous():
    ds = synthetic_classification(60, 3, 3, 1.0, 2)
    plan = shard(ds, 3, "by-label")
    for a in plan.assignment:
        assert len(set(ds.labels[a])) == 1
