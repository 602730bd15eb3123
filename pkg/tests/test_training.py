import numpy as np
import pytest

from bhsrs.layers import BAYESIAN, FREQUENTIST, Network, NetworkSpec
from bhsrs.training import (PredictiveEnsemble, TrainConfig, confusion_matrix, evaluate, kappa_from_confusion, metrics,
                            predict_ensemble, predict_mean, train, uncertainty, uncertainty_filter_curve,
                            uncertainty_matrices)

from oracles import cohen_kappa


def random_ensemble(rng, t=5, n=20, k=4, concentration=1.0):
    return rng.dirichlet(np.full(k, concentration), size=(t, n))


# ---------------------------------------------------------------- metrics


def test_metrics_perfect_and_constant():
    y = np.array([0, 1, 0, 1, 2, 2])
    m = metrics(y, y, 3)
    assert m.kappa == 1.0 and m.overall_accuracy == 1.0 and m.average_accuracy == 1.0
    truth = np.array([0, 1] * 10)
    assert metrics(np.zeros(20, int), truth, 2).kappa == 0.0
    assert metrics(np.zeros(5, int), np.zeros(5, int), 2).kappa == 1.0


def test_metrics_match_oracle(rng):
    for _ in range(20):
        truth = rng.integers(0, 6, size=500)
        pred = np.where(rng.random(500) < 0.6, truth, rng.integers(0, 6, size=500))
        m = metrics(pred, truth, 6)
        assert abs(m.kappa - cohen_kappa(truth, pred, 6)) < 1e-12
        assert m.overall_accuracy == np.trace(m.confusion) / m.confusion.sum()
        recalls = [np.mean(pred[truth == c] == c) for c in range(6)]
        assert m.average_accuracy == pytest.approx(np.mean(recalls), abs=1e-12)
        assert -1 <= m.kappa <= 1


def test_kappa_relabel_invariant(rng):
    truth, pred = rng.integers(0, 5, size=200), rng.integers(0, 5, size=200)
    perm = rng.permutation(5)
    assert metrics(pred, truth, 5).kappa == pytest.approx(metrics(perm[pred], perm[truth], 5).kappa, abs=1e-12)


def test_metrics_errors():
    with pytest.raises(ValueError):
        metrics(np.array([], int), np.array([], int))
    with pytest.raises(ValueError):
        metrics(np.zeros(3, int), np.zeros(4, int))


def test_confusion_orientation():
    cm = confusion_matrix([0, 0, 1], [1, 1, 1], 2)
    assert cm.tolist() == [[0, 2], [0, 1]]
    assert kappa_from_confusion(np.diag([3, 0])) == 1.0


# ---------------------------------------------------------------- uncertainty


def test_uncertainty_hand_example():
    probs = np.array([[[1.0, 0.0]], [[0.0, 1.0]]])
    ale, epi = uncertainty_matrices(probs)
    np.testing.assert_array_equal(ale[0], np.zeros((2, 2)))
    np.testing.assert_array_equal(epi[0], [[0.25, -0.25], [-0.25, 0.25]])
    rep = uncertainty(probs)
    assert rep.epistemic[0] == 0.5 and rep.aleatoric[0] == 0.0


def test_uncertainty_certain_ensemble():
    probs = np.zeros((4, 3, 3))
    probs[:, :, 1] = 1.0
    rep = uncertainty(probs, keep_matrices=True)
    assert np.all(rep.aleatoric_matrix == 0) and np.all(rep.epistemic_matrix == 0)


def test_law_of_total_variance(rng):
    for _ in range(50):
        probs = random_ensemble(rng, t=rng.integers(2, 8), n=10, k=rng.integers(2, 6))
        ale, epi = uncertainty_matrices(probs)
        t, n, k = probs.shape
        for i in range(n):
            p_bar = sum(probs[s, i] for s in range(t)) / t
            rhs = sum(np.diag(probs[s, i]) for s in range(t)) / t - np.outer(p_bar, p_bar)
            np.testing.assert_allclose(ale[i] + epi[i], rhs, atol=1e-12)


def test_uncertainty_matrices_psd_and_reductions(rng):
    probs = random_ensemble(rng, t=6, n=30, k=4)
    rep = uncertainty(probs, keep_matrices=True)
    for mat in (rep.aleatoric_matrix, rep.epistemic_matrix):
        np.testing.assert_allclose(mat, mat.transpose(0, 2, 1), atol=1e-15)
        assert np.linalg.eigvalsh(mat).min() >= -1e-9
    np.testing.assert_allclose(rep.aleatoric, np.trace(rep.aleatoric_matrix, axis1=1, axis2=2), atol=1e-12)
    pred = uncertainty(probs, "predicted")
    idx = probs.mean(0).argmax(1)
    np.testing.assert_allclose(pred.epistemic, rep.epistemic_matrix[np.arange(30), idx, idx], atol=1e-12)
    assert np.all(pred.aleatoric >= 0)
    with pytest.raises(ValueError):
        uncertainty(probs, "median")


def test_uncertainty_single_draw_warns(rng):
    with pytest.warns(RuntimeWarning):
        rep = uncertainty(random_ensemble(rng, t=1))
    assert np.all(rep.epistemic == 0)


# ---------------------------------------------------------------- filter curve


def test_filter_curve_zero_fraction(rng):
    truth = rng.integers(0, 3, 100)
    pred = np.where(rng.random(100) < 0.7, truth, (truth + 1) % 3)
    base = metrics(pred, truth, 3).kappa
    for policy in ("most-uncertain", "random"):
        assert uncertainty_filter_curve(pred, truth, rng.random(100), [0.0], policy, 1, 3)[0] == base
    with pytest.raises(ValueError):
        uncertainty_filter_curve(pred, truth, rng.random(100), [1.0])
    with pytest.raises(ValueError):
        uncertainty_filter_curve(pred, truth, rng.random(100), [0.1], "oldest")


def test_filter_curve_removes_errors_first(rng):
    truth = rng.integers(0, 3, 200)
    wrong = rng.random(200) < 0.15
    pred = np.where(wrong, (truth + 1) % 3, truth)
    scores = np.where(wrong, 1.0 + rng.random(200), rng.random(200))
    fractions = np.round(np.arange(0, 0.5, 0.01), 2)
    curve = uncertainty_filter_curve(pred, truth, scores, fractions, n_classes=3)
    first_clean = np.argmax(fractions * 200 >= wrong.sum())
    assert np.all(np.diff(curve[: first_clean + 1]) >= -1e-12)
    assert curve[first_clean] == 1.0


def test_random_policy_unbiased(rng):
    truth = rng.integers(0, 4, 300)
    pred = np.where(rng.random(300) < 0.7, truth, rng.integers(0, 4, 300))
    base = metrics(pred, truth, 4).kappa
    runs = np.array([uncertainty_filter_curve(pred, truth, np.zeros(300), [0.3], "random", s, 4)[0]
                     for s in range(1000)])
    assert abs(runs.mean() - base) < 2 * runs.std() / np.sqrt(len(runs))


# ---------------------------------------------------------------- ensembles


def spec(mode=BAYESIAN, rho=-5.0):
    return NetworkSpec(2, 3, widths=(4, 4), patch=5, mode=mode, rho_init=rho)


def test_predict_ensemble_shapes_and_frequentist():
    x = np.random.default_rng(0).normal(size=(7, 2, 5, 5))
    ens = predict_ensemble(Network(spec(FREQUENTIST), 0), x, 6)
    assert ens.probs.shape == (6, 7, 3)
    np.testing.assert_allclose(ens.probs.sum(-1), 1.0, atol=1e-9)
    assert np.all(uncertainty(ens).epistemic == 0)
    with pytest.raises(ValueError):
        predict_ensemble(Network(spec(), 0), x, 0)


def test_zero_variance_ensemble_identical():
    x = np.random.default_rng(0).normal(size=(4, 2, 5, 5))
    net = Network(spec(rho=-40.0), 0)
    ens = predict_ensemble(net, x, 5)
    assert np.allclose(ens.probs, ens.probs[0], atol=1e-9)
    np.testing.assert_allclose(ens.mean, predict_mean(net, x), atol=1e-9)


def test_single_draw_equals_stochastic_pass():
    x = np.random.default_rng(0).normal(size=(4, 2, 5, 5))
    net = Network(spec(rho=-2.0), 0)
    net.reseed(11)
    ens = predict_ensemble(net, x, 1)
    net.reseed(11)
    np.testing.assert_allclose(ens.probs[0], np.exp(net.forward(x).data), atol=1e-15)


def test_ensemble_mean_converges():
    x = np.random.default_rng(0).normal(size=(3, 2, 5, 5))
    net = Network(spec(rho=-1.0), 0)
    net.reseed(0)
    ref = predict_ensemble(net, x, 5000).mean
    gaps = []
    for t in (5, 50, 500):
        errs = []
        for s in range(10):
            net.reseed(100 + s)
            errs.append(np.abs(predict_ensemble(net, x, t).mean - ref).max())
        gaps.append(np.mean(errs))
    assert gaps[0] > gaps[1] > gaps[2]
    assert gaps[0] / gaps[2] > 4  # 1/sqrt(T) predicts a factor of 10


# ---------------------------------------------------------------- training loop


def separable_data(seed, n=24):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    x = rng.normal(0, 0.5, size=(n, 2, 5, 5))
    x[:, 0] += (2 * y - 1)[:, None, None] * 1.5
    return x, y


def two_class(mode):
    return NetworkSpec(2, 2, widths=(4, 4), patch=5, mode=mode)


def test_train_zero_epochs_returns_initialisation():
    x, y = separable_data(0)
    net = Network(two_class(BAYESIAN), 0)
    before = net.state_dict()
    res = train(net, x, y, x, y, TrainConfig(epochs=0))
    assert res.best_epoch == 0 and res.history == []
    for k, v in before.items():
        assert np.array_equal(net.state_dict()[k], v)


@pytest.mark.parametrize("mode", [BAYESIAN, FREQUENTIST])
def test_train_separable(mode):
    x, y = separable_data(1, 40)
    vx, vy = separable_data(2, 40)
    net = Network(two_class(mode), 0)
    res = train(net, x, y, vx, vy, TrainConfig(epochs=200 if mode == BAYESIAN else 60, batch_size=8, seed=0))
    assert res.best_kappa >= 0.95
    trace_best = max(h.val_kappa for h in res.history)
    assert res.best_kappa >= trace_best
    if res.best_epoch:
        assert res.best_kappa == trace_best == res.history[res.best_epoch - 1].val_kappa
    assert evaluate(net, vx, vy)[1] == res.best_kappa


def test_train_deterministic():
    x, y = separable_data(3)
    runs = []
    for _ in range(2):
        net = Network(two_class(BAYESIAN), 5)
        runs.append(train(net, x, y, x, y, TrainConfig(epochs=3, batch_size=8, seed=5)).history)
    assert runs[0] == runs[1]


def test_train_divergence_keeps_best():
    x, y = separable_data(4)
    x_bad = x.copy()
    x_bad[3] = np.nan
    net = Network(two_class(FREQUENTIST), 0)
    res = train(net, x_bad, y, x, y, TrainConfig(epochs=5, batch_size=8, augment=False))
    assert res.diverged is not None and "epoch 1" in res.diverged
    assert res.best_epoch == 0
    assert all(np.all(np.isfinite(v)) for v in net.state_dict().values())


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(ensemble_T=0)
    x, y = separable_data(0)
    with pytest.raises(ValueError):
        train(Network(two_class(BAYESIAN), 0), x[:0], y[:0], x, y, TrainConfig(epochs=1))


def test_predictive_ensemble_mean():
    probs = np.random.default_rng(0).dirichlet(np.ones(3), size=(4, 5))
    ens = PredictiveEnsemble(probs)
    assert ens.draws == 4
    np.testing.assert_allclose(ens.mean, probs.sum(0) / 4, atol=1e-15)
