"""Global iterative weight pruning without retraining.

Frequentist weights are ranked by magnitude. Bayesian weights are ranked by
signal-to-noise ratio ``|mu| / sigma``: the posterior density at zero,
``phi(mu / sigma) / sigma``, is largest for the lowest ratio (for equal
spread), so low-SNR weights are the ones most likely to be zero. Biases and
layer-norm parameters are never pruned.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import Network
from .training import metrics, predict_ensemble, predict_mean


@dataclass
class PruneRanking:
    statistic: np.ndarray  # flat, concatenated over prunable layers
    order: np.ndarray  # ascending statistic: first entries are pruned first
    shapes: list[tuple[int, ...]]

    @property
    def total(self) -> int:
        return int(self.statistic.size)

    def masks(self, fraction: float) -> list[np.ndarray]:
        """Keep-masks per layer with the lowest ``fraction`` of weights dropped."""
        if not 0 <= fraction <= 1:
            raise ValueError(f"fraction must lie in [0, 1], got {fraction}")
        n_drop = int(round(fraction * self.total))
        keep = np.ones(self.total, dtype=bool)
        keep[self.order[:n_drop]] = False
        out, start = [], 0
        for shape in self.shapes:
            size = int(np.prod(shape))
            out.append(keep[start:start + size].reshape(shape))
            start += size
        return out


@dataclass
class PruneMask:
    keep: list[np.ndarray]
    statistic: np.ndarray
    fraction: float


def weight_statistic(network: Network) -> list[np.ndarray]:
    stats = []
    for layer in network.layers():
        if network.bayesian:
            stats.append(np.abs(layer.weight.mu.data) / layer.weight.sigma_np())
        else:
            stats.append(np.abs(layer.weight.data))
    return stats


def rank_weights(network: Network) -> PruneRanking:
    """Global ascending ranking of every conv and dense weight."""
    stats = weight_statistic(network)
    if not stats or sum(s.size for s in stats) == 0:
        raise ValueError("network has no prunable weights")
    flat = np.concatenate([s.ravel() for s in stats])
    return PruneRanking(flat, np.argsort(flat, kind="stable"), [s.shape for s in stats])


def apply_masks(network: Network, masks: list[np.ndarray] | None) -> None:
    for i, layer in enumerate(network.layers()):
        layer.set_mask(None if masks is None else masks[i])


@dataclass
class PruneCurve:
    fractions: np.ndarray
    kappas: np.ndarray
    masks: list[PruneMask] = field(default_factory=list)

    @property
    def retention(self) -> np.ndarray:
        base = self.kappas[0]
        return self.kappas / base if base != 0 else np.zeros_like(self.kappas)

    def drop_fraction(self, threshold: float = 0.7) -> float | None:
        """First pruned fraction whose kappa falls below ``threshold`` of the unpruned kappa."""
        below = np.flatnonzero(self.kappas < threshold * self.kappas[0])
        return float(self.fractions[below[0]]) if below.size else None


def prune_sweep(network: Network, patches: np.ndarray, labels: np.ndarray, step: float = 0.1,
                max_fraction: float = 0.9, ensemble_draws: int | None = None, seed: int = 0) -> PruneCurve:
    """Kappa at cumulative pruned fractions ``0, step, 2*step, ...`` up to ``max_fraction``.

    Evaluation uses the posterior mean unless ``ensemble_draws`` is given.
    The network's own masks are restored afterwards.
    """
    if not 0 < step < 1:
        raise ValueError(f"step must lie in (0, 1), got {step}")
    ranking = rank_weights(network)
    saved = [layer.mask for layer in network.layers()]
    n_steps = int(np.floor(max_fraction / step + 1e-9))
    fractions = np.round(np.arange(n_steps + 1) * step, 10)
    kappas, masks = [], []
    k = network.spec.n_classes
    try:
        for f in fractions:
            keep = ranking.masks(float(f))
            apply_masks(network, keep)
            if ensemble_draws and network.bayesian:
                network.reseed(seed)
                pred = predict_ensemble(network, patches, ensemble_draws).predicted
            else:
                pred = np.argmax(predict_mean(network, patches), axis=1)
            kappas.append(metrics(pred, labels, k).kappa)
            masks.append(PruneMask(keep, ranking.statistic, float(f)))
    finally:
        apply_masks(network, saved)
    return PruneCurve(fractions, np.array(kappas), masks)
