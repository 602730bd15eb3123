from pathlib import Path

import numpy as np
import pytest

from bhsrs import container
from bhsrs.experiment import (build_features, load_checkpoint, load_features, save_checkpoint, save_features,
                              write_checkpoint)
from bhsrs.layers import MEAN, Network, NetworkSpec
from bhsrs.pruning import apply_masks, rank_weights
from bhsrs.training import TrainConfig, train


def test_round_trip_dtypes_and_bytes(tmp_path, rng):
    arrays = {"f": rng.normal(size=(3, 4)), "i": np.arange(6, dtype=np.int16).reshape(2, 3),
              "big": np.arange(4, dtype=">f4"), "empty": np.zeros((0, 2))}
    meta = {"a": 1, "nested": {"x": [1, 2]}}
    path = tmp_path / "c.hsrs"
    digest = container.save(path, meta, arrays)
    meta2, arrays2 = container.load(path)
    assert meta2 == meta
    for k, v in arrays.items():
        assert np.array_equal(arrays2[k], v) and arrays2[k].shape == v.shape
    assert container.dumps(meta2, arrays2) == path.read_bytes()
    assert container.save(tmp_path / "d.hsrs", meta2, arrays2) == digest


def test_corrupt_containers(tmp_path):
    blob = container.dumps({}, {"x": np.arange(10.0)})
    with pytest.raises(container.ContainerError, match="magic"):
        container.loads(b"NOTIT" + blob)
    with pytest.raises(container.ContainerError, match="past end"):
        container.loads(blob[:-8])
    with pytest.raises(container.ContainerError):
        container.loads(blob[:10])


def trained(mode="bayesian"):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(16, 3, 5, 5))
    y = np.arange(16) % 2
    net = Network(NetworkSpec(3, 2, widths=(4,), patch=5, mode=mode), 4)
    res = train(net, x, y, x, y, TrainConfig(epochs=2, batch_size=8, seed=4))
    return net, res, x


@pytest.mark.parametrize("mode", ["bayesian", "frequentist"])
def test_checkpoint_round_trip_is_byte_identical(tmp_path, mode):
    net, res, x = trained(mode)
    apply_masks(net, rank_weights(net).masks(0.3))
    path = tmp_path / "ck.hsrs"
    save_checkpoint(path, net, TrainConfig(epochs=2, seed=4), res, extra={"note": "t"})
    loaded, meta, optim = load_checkpoint(path)
    assert meta["epoch"] == res.best_epoch and meta["seed"] == 4
    assert set(optim) == set(res.optimizer_state)
    assert np.array_equal(loaded.forward(x, MEAN).data, net.forward(x, MEAN).data)
    assert all(a.mask is not None and np.array_equal(a.mask, b.mask) for a, b in zip(loaded.layers(), net.layers()))
    again = tmp_path / "again.hsrs"
    write_checkpoint(again, loaded, meta, optim)
    assert again.read_bytes() == path.read_bytes()


def test_checkpoint_rejects_feature_cache(tmp_path):
    save_features(tmp_path / "f.hsrs", np.zeros((2, 2, 1)), None, {}, "abc")
    with pytest.raises(container.ContainerError):
        load_checkpoint(tmp_path / "f.hsrs")
    net, _, _ = trained()
    save_checkpoint(tmp_path / "c.hsrs", net)
    with pytest.raises(container.ContainerError):
        load_features(tmp_path / "c.hsrs")


def test_feature_cache_round_trip_and_determinism(tmp_path, rng):
    cube = rng.normal(size=(10, 10, 3))
    labels = rng.integers(0, 3, size=(10, 10))
    params = {"lambdas": [2, 5], "pca_target": 0.99, "kind": "emap"}
    feats = build_features(cube, labels, (2, 5), 0.99)
    h1 = save_features(tmp_path / "a.hsrs", feats, labels, params, "src")
    h2 = save_features(tmp_path / "b.hsrs", build_features(cube, labels, (2, 5), 0.99), labels, params, "src")
    assert h1 == h2
    f, lab, meta = load_features(Path(tmp_path / "a.hsrs"))
    assert np.array_equal(f, feats) and np.array_equal(lab, labels)
    assert meta["params"] == params and meta["source_hash"] == "src"
    raw = build_features(cube, labels, kind="raw")
    on_labels = raw[labels > 0]
    assert on_labels.min(axis=0).tolist() == [0.0] * 3 and on_labels.max(axis=0).tolist() == [1.0] * 3
    with pytest.raises(ValueError):
        build_features(cube, kind="pixels")
