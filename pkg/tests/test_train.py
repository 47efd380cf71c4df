import math

import numpy as np
import pytest

from pestnet.architecture import canonical_config
from pestnet.data import ArrayImageSet, synth_dataset
from pestnet.errors import ConfigError, NumericError
from pestnet.model import build
from pestnet.tensor import Tensor, finite_diff_check
from pestnet.train import (
    CVResult, FoldReport, SgdConfig, TrainState, _batches, classification_metrics, confusion_matrix,
    cross_entropy_loss, decays, evaluate, f1_scores, fold_seeds, run_cv, sgd_step, train_fold, train_step,
    write_reports,
)

TINY = canonical_config(3).with_width(0.25)


def tiny_data(per_class=4, size=32, seed=0):
    ds = synth_dataset(3, per_class, size, seed=seed)
    return ds.to_imageset()


def sgd(w, g, config, velocity=None, name="w"):
    params = {name: Tensor(np.array([w], dtype=np.float64))}
    velocity = {} if velocity is None else velocity
    sgd_step(params, {name: np.array([g])}, velocity, config)
    return params[name].data[0], velocity


def test_sgd_hand_cases():
    assert sgd(1.0, 1.0, SgdConfig(learning_rate=0.1, momentum=0.0, weight_decay=0.0))[0] == pytest.approx(0.9)
    for m in (0.0, 0.5, 0.9):
        assert sgd(1.5, 0.0, SgdConfig(learning_rate=0.1, momentum=m, weight_decay=0.0))[0] == 1.5
    cfg = SgdConfig(learning_rate=0.1, momentum=0.9, weight_decay=0.0)
    w, v = sgd(0.0, 1.0, cfg)
    w, v = sgd(w, 1.0, cfg, v)
    assert w == pytest.approx(-0.29, abs=1e-12)


def test_weight_decay_skips_bias_and_bn():
    cfg = SgdConfig(learning_rate=0.1, momentum=0.0, weight_decay=0.5)
    assert sgd(2.0, 0.0, cfg, name="layer01.conv.weight")[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)
    for name in ("layer21.bias", "layer01.bn.gamma", "layer01.bn.beta"):
        assert not decays(name)
        assert sgd(2.0, 0.0, cfg, name=name)[0] == 2.0


def test_sgd_config_validation():
    assert SgdConfig().learning_rate == 0.001 and SgdConfig().batch_size == 8
    for bad in ({"momentum": 1.0}, {"learning_rate": -1}, {"batch_size": 1}, {"epochs": 0}):
        with pytest.raises(ConfigError):
            SgdConfig(**bad)


def test_cross_entropy_values_and_gradient(rng):
    assert cross_entropy_loss(Tensor(np.zeros((3, 10))), [0, 4, 9]).item() == pytest.approx(math.log(10))
    confident = np.array([[1e4, 0.0, 0.0]])
    assert cross_entropy_loss(Tensor(confident), [0]).item() == pytest.approx(0.0, abs=1e-12)
    assert math.isfinite(cross_entropy_loss(Tensor(-confident), [0]).item())
    labels = rng.integers(0, 5, 4)
    assert finite_diff_check(lambda t: cross_entropy_loss(t, labels), rng.standard_normal((4, 5))) <= 1e-5


def test_f1_hand_case_and_sklearn_oracle(rng):
    m = classification_metrics([0, 0, 1], [0, 1, 1], 2)
    np.testing.assert_allclose(m.per_class_f1(), [2 / 3, 2 / 3], atol=1e-12)
    assert m.macro_f1 == pytest.approx(2 / 3, abs=1e-12)
    metrics = pytest.importorskip("sklearn.metrics")
    for _ in range(30):
        k = int(rng.integers(2, 6))
        y, p = rng.integers(0, k, 25), rng.integers(0, k, 25)
        ours = classification_metrics(y, p, k)
        assert ours.macro_f1 == pytest.approx(
            metrics.f1_score(y, p, labels=list(range(k)), average="macro", zero_division=0), abs=1e-12)
        assert np.array_equal(ours.confusion, metrics.confusion_matrix(y, p, labels=list(range(k))))


def test_metrics_edge_cases():
    perfect = classification_metrics([0, 1, 2], [0, 1, 2], 3)
    assert perfect.accuracy == perfect.macro_f1 == 1.0
    assert np.array_equal(perfect.confusion, np.eye(3, dtype=int))
    # class 2 never appears and is never predicted -> F1 0 by convention
    assert f1_scores(confusion_matrix([0, 1], [0, 1], 3)).tolist() == [1.0, 1.0, 0.0]


def test_metrics_invariances(rng):
    y, p = rng.integers(0, 4, 50), rng.integers(0, 4, 50)
    base = classification_metrics(y, p, 4)
    order = rng.permutation(50)
    shuffled = classification_metrics(y[order], p[order], 4)
    assert base.accuracy == shuffled.accuracy and base.macro_f1 == shuffled.macro_f1
    perm = rng.permutation(4)
    relabeled = classification_metrics(perm[y], perm[p], 4)
    per_class = np.diag(base.confusion) / base.confusion.sum(axis=1)
    np.testing.assert_array_equal(np.diag(relabeled.confusion)[perm] / relabeled.confusion.sum(axis=1)[perm],
                                  per_class)


def test_batches_merge_trailing_singleton():
    assert [len(b) for b in _batches(17, 8)] == [8, 9]
    assert [len(b) for b in _batches(9, 8)] == [9]
    assert [len(b) for b in _batches(16, 8)] == [8, 8]
    assert [len(b) for b in _batches(3, 8)] == [3]


def test_evaluate_ties_pick_lowest_index():
    model = build(TINY)
    head = model.layers[-1][1]
    head.weight.data[...] = 0
    data = tiny_data(2)
    m = evaluate(model, data)
    assert m.confusion[:, 0].sum() == len(data)
    assert m.accuracy == np.trace(m.confusion) / m.confusion.sum()


def test_zero_learning_rate_freezes_parameters():
    model = build(TINY, seed=1)
    before = {n: t.data.copy() for n, t in model.named_parameters()}
    cfg = SgdConfig(learning_rate=0.0, epochs=1, batch_size=4)
    train_fold(model, tiny_data(), tiny_data(1, seed=5), cfg)
    for n, t in model.named_parameters():
        assert np.array_equal(before[n], t.data), n


def test_train_fold_is_deterministic():
    cfg = SgdConfig(epochs=2, batch_size=4, seed=3)
    reports = [train_fold(build(TINY, seed=3), tiny_data(), tiny_data(1, seed=9), cfg) for _ in range(2)]
    assert reports[0] == reports[1]
    assert len(reports[0].epoch_losses) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts_with_diagnostics():
    model = build(TINY)
    model.layers[0][1].conv.weight.data[...] = np.inf
    with pytest.raises(NumericError, match="epoch 0, batch 0"):
        train_fold(model, tiny_data(), tiny_data(1), SgdConfig(epochs=1, batch_size=4))


def test_loss_decreases_on_a_fixed_batch():
    """Endpoint form of the 'non-increasing loss' sanity check, over 10 seeds."""
    decreased = 0
    for seed in range(10):
        data = synth_dataset(2, 2, 32, seed).to_imageset()
        model = build(canonical_config(2).with_width(0.25), seed)
        state = TrainState()
        losses = [train_step(model, data.x, data.labels, SgdConfig(seed=seed), state) for _ in range(50)]
        decreased += np.mean(losses[-5:]) < losses[0]
    assert decreased >= 9


def test_cv_summary_statistics():
    reports = [FoldReport(i, acc, 0.5, np.eye(2, dtype=int), [1.0], i) for i, acc in enumerate([0.7, 0.8, 0.9])]
    result = CVResult(reports)
    assert result.mean_accuracy == pytest.approx(0.8)
    assert result.std_accuracy == pytest.approx(math.sqrt(((0.1) ** 2 * 2) / 3))
    assert result.summary()["accuracy_pm"] == "80.00±8.16"


def test_run_cv_structure_and_reports(tmp_path):
    data = tiny_data(5)
    res = run_cv(TINY, data, SgdConfig(epochs=1, batch_size=4, seed=1), k=5)
    assert [r.fold for r in res.reports] == list(range(5))
    assert len(set(fold_seeds(1, 5))) == 5
    assert [r.seed for r in res.reports] == fold_seeds(1, 5)
    paths = write_reports(res, tmp_path, data.classes)
    assert paths["summary"].exists() and (tmp_path / "confusion_fold4.csv").exists()
    rows = (tmp_path / "confusion_fold0.csv").read_text().splitlines()
    assert rows[0].startswith("true\\pred,class_00") and len(rows) == 4
    one = run_cv(TINY, data, SgdConfig(epochs=1, batch_size=4, seed=1), k=5, folds=[2])
    assert one.reports == [res.reports[2]]
