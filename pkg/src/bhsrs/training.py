"""Training with kappa-based model selection, ensemble prediction and uncertainty."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .dataset import augment_batch
from .layers import MEAN, STOCHASTIC, Network, cross_entropy_loss, elbo_loss

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------- metrics


@dataclass
class MetricsRecord:
    kappa: float
    overall_accuracy: float
    average_accuracy: float
    confusion: np.ndarray  # rows = truth, columns = prediction

    def as_dict(self) -> dict:
        return {"kappa": self.kappa, "overall_accuracy": self.overall_accuracy,
                "average_accuracy": self.average_accuracy, "confusion": self.confusion.tolist()}


def confusion_matrix(truth, predicted, n_classes: int | None = None) -> np.ndarray:
    truth = np.asarray(truth, dtype=np.int64)
    predicted = np.asarray(predicted, dtype=np.int64)
    k = n_classes if n_classes is not None else int(max(truth.max(initial=-1), predicted.max(initial=-1)) + 1)
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (truth, predicted), 1)
    return cm


def kappa_from_confusion(cm: np.ndarray) -> float:
    """Cohen's kappa; defined as 1 for perfect agreement when chance agreement is also 1."""
    cm = np.asarray(cm, dtype=np.float64)
    n = cm.sum()
    po = np.trace(cm) / n
    pe = float(cm.sum(axis=1) @ cm.sum(axis=0)) / (n * n)
    if pe >= 1.0:
        return 1.0 if po >= 1.0 else 0.0
    return float((po - pe) / (1.0 - pe))


def metrics(predicted, truth, n_classes: int | None = None) -> MetricsRecord:
    """Kappa, overall accuracy and average per-class accuracy (recall)."""
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    if predicted.shape != truth.shape:
        raise ValueError(f"prediction/truth length mismatch: {predicted.shape} vs {truth.shape}")
    if truth.size == 0:
        raise ValueError("metrics need at least one sample")
    cm = confusion_matrix(truth, predicted, n_classes)
    support = cm.sum(axis=1)
    present = support > 0
    recalls = np.diag(cm)[present] / support[present]
    return MetricsRecord(kappa_from_confusion(cm), float(np.trace(cm) / cm.sum()), float(recalls.mean()), cm)


# ---------------------------------------------------------------- ensembles & uncertainty


@dataclass
class PredictiveEnsemble:
    probs: np.ndarray  # T x N x K

    @property
    def draws(self) -> int:
        return self.probs.shape[0]

    @property
    def mean(self) -> np.ndarray:
        return self.probs.mean(axis=0)

    @property
    def predicted(self) -> np.ndarray:
        return np.argmax(self.mean, axis=1)


def _forward_probs(network: Network, patches: np.ndarray, mode: str, batch_size: int) -> np.ndarray:
    chunks = []
    with ad.no_grad():
        for start in range(0, len(patches), batch_size):
            out = network.forward(patches[start:start + batch_size], mode)
            chunks.append(np.exp(out.data))
    if not chunks:
        return np.zeros((0, network.spec.n_classes))
    return np.concatenate(chunks)


def predict_mean(network: Network, patches: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Class probabilities from one deterministic (posterior-mean) pass."""
    return _forward_probs(network, patches, MEAN, batch_size)


def predict_ensemble(network: Network, patches: np.ndarray, draws: int = 50, batch_size: int = 512) -> PredictiveEnsemble:
    """``draws`` stochastic passes; frequentist networks give identical draws."""
    if draws < 1:
        raise ValueError(f"draws must be >= 1, got {draws}")
    if not network.bayesian:
        single = _forward_probs(network, patches, MEAN, batch_size)
        return PredictiveEnsemble(np.broadcast_to(single, (draws,) + single.shape).copy())
    return PredictiveEnsemble(np.stack([_forward_probs(network, patches, STOCHASTIC, batch_size) for _ in range(draws)]))


@dataclass
class UncertaintyReport:
    aleatoric: np.ndarray  # N scalars
    epistemic: np.ndarray  # N scalars
    reduction: str
    aleatoric_matrix: np.ndarray | None = None  # N x K x K
    epistemic_matrix: np.ndarray | None = None


def uncertainty_matrices(probs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample aleatoric and epistemic covariance matrices from ``T x N x K`` draws.

    aleatoric = mean_t(diag(p_t) - p_t p_t^T)
    epistemic = mean_t((p_t - p_bar)(p_t - p_bar)^T)
    """
    probs = np.asarray(probs, dtype=np.float64)
    t = probs.shape[0]
    p_bar = probs.mean(axis=0)
    outer = np.einsum("tni,tnj->nij", probs, probs) / t
    diag = np.einsum("ni,ij->nij", p_bar, np.eye(probs.shape[2]))
    aleatoric = diag - outer
    dev = probs - p_bar
    epistemic = np.einsum("tni,tnj->nij", dev, dev) / t
    return aleatoric, epistemic


def uncertainty(ensemble: PredictiveEnsemble | np.ndarray, reduction: str = "trace",
                keep_matrices: bool = False) -> UncertaintyReport:
    """Aleatoric/epistemic uncertainty reduced to one scalar per sample.

    ``reduction`` is ``"trace"`` or ``"predicted"`` (the diagonal entry of
    the class with the highest mean probability).
    """
    probs = ensemble.probs if isinstance(ensemble, PredictiveEnsemble) else np.asarray(ensemble)
    if reduction not in ("trace", "predicted"):
        raise ValueError(f"unknown reduction {reduction!r}")
    t = probs.shape[0]
    if t < 2:
        warnings.warn("epistemic uncertainty needs at least 2 draws; reporting zero", RuntimeWarning, stacklevel=2)
    # identical draws (frequentist nets, sigma -> 0) get an exactly zero epistemic term
    p_bar = probs[0].copy() if np.all(probs == probs[:1]) else probs.mean(axis=0)
    # diagonals computed directly; avoids N x K x K storage when matrices are not kept
    ale_diag = p_bar - (probs * probs).mean(axis=0)
    epi_diag = ((probs - p_bar) ** 2).mean(axis=0)
    if reduction == "trace":
        ale, epi = ale_diag.sum(axis=1), epi_diag.sum(axis=1)
    else:
        idx = np.argmax(p_bar, axis=1)
        rows = np.arange(len(idx))
        ale, epi = ale_diag[rows, idx], epi_diag[rows, idx]
    report = UncertaintyReport(np.clip(ale, 0.0, None), np.clip(epi, 0.0, None), reduction)
    if keep_matrices:
        report.aleatoric_matrix, report.epistemic_matrix = uncertainty_matrices(probs)
    return report


DEFAULT_FRACTIONS = tuple(round(0.05 * i, 2) for i in range(11))


def uncertainty_filter_curve(predicted, truth, scores, fractions=DEFAULT_FRACTIONS,
                             policy: str = "most-uncertain", seed: int = 0,
                             n_classes: int | None = None) -> np.ndarray:
    """Kappa on the samples left after dropping a fraction of them.

    ``most-uncertain`` drops the highest-``scores`` samples first (ties by
    index); ``random`` drops along one seeded permutation, so removals are
    nested across fractions.
    """
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    scores = np.asarray(scores, dtype=np.float64)
    n = len(truth)
    if policy == "most-uncertain":
        order = np.argsort(-scores, kind="stable")
    elif policy == "random":
        order = np.random.default_rng(seed).permutation(n)
    else:
        raise ValueError(f"unknown policy {policy!r}")
    k = n_classes if n_classes is not None else int(max(truth.max(), predicted.max()) + 1)
    kappas = []
    for f in fractions:
        if not 0 <= f < 1:
            raise ValueError(f"fractions must lie in [0, 1), got {f}")
        keep = np.sort(order[int(round(f * n)):])
        kappas.append(metrics(predicted[keep], truth[keep], k).kappa)
    return np.array(kappas)


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 16
    lr: float = 1e-3
    mc_samples: int = 1
    ensemble_T: int = 50
    seed: int = 0
    augment: bool = True

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.ensemble_T < 1:
            raise ValueError(f"ensemble_T must be >= 1, got {self.ensemble_T}")
        if self.batch_size < 1 or self.epochs < 0 or self.mc_samples < 1:
            raise ValueError("batch_size and mc_samples must be >= 1, epochs >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_nll: float
    val_loss: float
    val_kappa: float


@dataclass
class TrainResult:
    best_state: dict[str, np.ndarray]
    best_epoch: int  # 0 = initialisation
    best_kappa: float
    history: list[EpochRecord] = field(default_factory=list)
    optimizer_state: dict[str, np.ndarray] = field(default_factory=dict)
    diverged: str | None = None


def evaluate(network: Network, patches: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """Mean-mode validation NLL and kappa."""
    probs = predict_mean(network, patches)
    nll = float(-np.mean(np.log(np.clip(probs[np.arange(len(labels)), labels], 1e-300, None))))
    return nll, metrics(np.argmax(probs, axis=1), labels, network.spec.n_classes).kappa


def train(network: Network, train_x: np.ndarray, train_y: np.ndarray, val_x: np.ndarray, val_y: np.ndarray,
          config: TrainConfig) -> TrainResult:
    """Train for the full epoch budget and keep the state with the best validation kappa.

    The network is left holding the selected state on return.
    """
    if len(train_x) == 0 or len(val_x) == 0:
        raise ValueError("training and validation sets must be non-empty")
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))
    network.reseed(config.seed)
    opt = ad.Adam(network.parameters(), lr=config.lr)
    n_batches = math.ceil(len(train_x) / config.batch_size)
    _, best_kappa = evaluate(network, val_x, val_y)
    result = TrainResult(network.state_dict(), 0, best_kappa, optimizer_state=opt.state_dict())
    for epoch in range(1, config.epochs + 1):
        perm = rng.permutation(len(train_x))
        losses, nlls = [], []
        try:
            for b in range(n_batches):
                idx = perm[b * config.batch_size:(b + 1) * config.batch_size]
                xb = augment_batch(train_x[idx], rng) if config.augment else train_x[idx]
                yb = train_y[idx]
                opt.zero_grad()
                if network.bayesian:
                    loss = elbo_loss(network, xb, yb, n_batches, config.mc_samples)
                else:
                    loss = cross_entropy_loss(network, xb, yb)
                value = loss.item()
                if not math.isfinite(value):
                    ad.reset_tape()
                    raise FloatingPointError(f"loss became {value} at epoch {epoch}, batch {b}")
                loss.backward()
                try:
                    opt.step()
                except FloatingPointError as exc:
                    raise FloatingPointError(f"{exc} at epoch {epoch}, batch {b}") from None
                losses.append(value)
                if network.bayesian:
                    with ad.no_grad():
                        nlls.append((value - network.kl().item() / n_batches) / len(idx))
                else:
                    nlls.append(value)
        except FloatingPointError as exc:
            ad.reset_tape()
            logger.warning("training diverged: %s", exc)
            result.diverged = str(exc)
            break
        val_loss, val_kappa = evaluate(network, val_x, val_y)
        result.history.append(EpochRecord(epoch, float(np.mean(losses)), float(np.mean(nlls)), val_loss, val_kappa))
        if val_kappa > result.best_kappa:
            result.best_kappa = val_kappa
            result.best_epoch = epoch
            result.best_state = network.state_dict()
            result.optimizer_state = opt.state_dict()
        logger.debug("epoch %d loss %.4f val_loss %.4f val_kappa %.4f", epoch, losses[-1], val_loss, val_kappa)
    network.load_state_dict(result.best_state)
    return result
