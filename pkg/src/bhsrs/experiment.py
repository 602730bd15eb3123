"""End-to-end runs: split, train, select, test; checkpoints and feature caches."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import container
from .dataset import TEST, TRAIN, VALIDATION, SplitAssignment, cc_train_split, extract_patches, pad_features, random_split
from .features import DEFAULT_LAMBDAS, emap_build, minmax_normalize
from .layers import Network, NetworkSpec
from .training import MetricsRecord, PredictiveEnsemble, TrainConfig, TrainResult, metrics, predict_ensemble, train

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------- feature caches


def build_features(cube: np.ndarray, labels: np.ndarray | None = None, lambdas=DEFAULT_LAMBDAS,
                   pca_target: float = 0.99, kind: str = "emap") -> np.ndarray:
    """``emap`` runs the full EMAP-PCA pipeline; ``raw`` only min-max scales the bands."""
    if kind == "emap":
        return emap_build(cube, lambdas, pca_target, labels).features
    if kind == "raw":
        mask = None if labels is None or not np.any(labels > 0) else labels > 0
        return minmax_normalize(np.asarray(cube, dtype=np.float64), mask)
    raise ValueError(f"unknown feature kind {kind!r}")


def save_features(path, features: np.ndarray, labels: np.ndarray | None, params: dict, source_hash: str) -> str:
    meta = {"format": "features", "params": params, "source_hash": source_hash,
            "key": container.content_hash(extra={"source": source_hash, "params": params})}
    arrays = {"features": np.asarray(features, dtype=np.float64)}
    if labels is not None:
        arrays["labels"] = np.asarray(labels, dtype=np.int64)
    return container.save(path, meta, arrays)


def load_features(path) -> tuple[np.ndarray, np.ndarray | None, dict]:
    meta, arrays = container.load(path)
    if meta.get("format") != "features":
        raise container.ContainerError(f"{path} is not a feature cache")
    return arrays["features"], arrays.get("labels"), meta


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, network: Network, config: TrainConfig | None = None, result: TrainResult | None = None,
                    split: SplitAssignment | None = None, extra: dict | None = None) -> str:
    """Write network, masks, optimizer state, selected epoch, seed and split; returns the SHA-256."""
    meta = {
        "format": "checkpoint",
        "spec": network.spec.to_dict(),
        "seed": network.seed,
        "config": config.to_dict() if config is not None else None,
        "epoch": result.best_epoch if result is not None else 0,
        "val_kappa": result.best_kappa if result is not None else None,
        "split": split.to_json() if split is not None else None,
        "extra": extra or {},
    }
    return write_checkpoint(path, network, meta, result.optimizer_state if result is not None else {})


def write_checkpoint(path, network: Network, meta: dict, optimizer_state: dict[str, np.ndarray]) -> str:
    arrays = {f"param/{k}": v for k, v in network.state_dict().items()}
    arrays.update({f"optim/{k}": v for k, v in optimizer_state.items()})
    return container.save(path, meta, arrays)


def load_checkpoint(path) -> tuple[Network, dict, dict[str, np.ndarray]]:
    """Returns ``(network, meta, optimizer_state)``."""
    meta, arrays = container.load(path)
    if meta.get("format") != "checkpoint":
        raise container.ContainerError(f"{path} is not a checkpoint")
    network = Network(NetworkSpec.from_dict(meta["spec"]), meta["seed"])
    network.load_state_dict({k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")})
    optimizer = {k[len("optim/"):]: v for k, v in arrays.items() if k.startswith("optim/")}
    return network, meta, optimizer


# ---------------------------------------------------------------- single repeat


@dataclass
class RepeatResult:
    seed: int
    split: SplitAssignment
    network: Network
    train_result: TrainResult
    ensemble_metrics: MetricsRecord
    single_metrics: MetricsRecord
    ensemble: PredictiveEnsemble
    test_labels: np.ndarray
    test_coords: np.ndarray


def make_split(labels: np.ndarray, policy: str, pixels_per_class: int, val_fraction: float, seed: int) -> SplitAssignment:
    if policy == "cc":
        return cc_train_split(labels, pixels_per_class, val_fraction, seed)
    if policy == "random":
        return random_split(labels, pixels_per_class, val_fraction, seed)
    raise ValueError(f"unknown split policy {policy!r}")


def predict_coords(network: Network, features: np.ndarray, coords: np.ndarray, draws: int,
                   chunk: int = 4096, padded: np.ndarray | None = None) -> PredictiveEnsemble:
    """Ensemble prediction over pixel coordinates, extracting patches chunk by chunk."""
    patch = network.spec.patch
    padded = pad_features(features, patch) if padded is None else padded
    parts = []
    for start in range(0, len(coords), chunk):
        batch = extract_patches(features, coords[start:start + chunk], patch, padded=padded)
        parts.append(predict_ensemble(network, batch.patches, draws).probs)
    if not parts:
        return PredictiveEnsemble(np.zeros((draws, 0, network.spec.n_classes)))
    return PredictiveEnsemble(np.concatenate(parts, axis=1))


def run_repeat(features: np.ndarray, labels: np.ndarray, spec: NetworkSpec, config: TrainConfig,
               pixels_per_class: int = 20, val_fraction: float = 0.1, split_policy: str = "cc") -> RepeatResult:
    """Split, train with best-kappa selection, then test with the full ensemble and a single draw."""
    seed = config.seed
    split = make_split(labels, split_policy, pixels_per_class, val_fraction, seed)
    padded = pad_features(features, spec.patch)
    tr = extract_patches(features, split.coords(TRAIN), spec.patch, labels, padded)
    va = extract_patches(features, split.coords(VALIDATION), spec.patch, labels, padded)
    test_coords = split.coords(TEST)
    test_labels = labels[test_coords[:, 0], test_coords[:, 1]] - 1
    network = Network(spec, seed)
    result = train(network, tr.patches, tr.labels, va.patches, va.labels, config)
    network.reseed(seed + 1)
    ensemble = predict_coords(network, features, test_coords, config.ensemble_T, padded=padded)
    single = predict_coords(network, features, test_coords, 1, padded=padded)
    k = spec.n_classes
    return RepeatResult(seed, split, network, result,
                        metrics(ensemble.predicted, test_labels, k), metrics(single.predicted, test_labels, k),
                        ensemble, test_labels, test_coords)


def summarize(records: list[MetricsRecord]) -> dict[str, tuple[float, float]]:
    """Mean and (population) standard deviation of kappa, OA and AA across repeats."""
    out = {}
    for key in ("kappa", "overall_accuracy", "average_accuracy"):
        values = np.array([getattr(r, key) for r in records])
        out[key] = (float(values.mean()), float(values.std()))
    return out
