import numpy as np
import pytest

from mrmae.baselines import TaskMLPConfig, TaskSpec, fit_linear, fit_task_mlp
from mrmae.dataset import compute_feature_means
from mrmae.ensemble import EnsembleConfig, ensemble_predict
from mrmae.evaluate import accuracy
from mrmae.masking import MaskPolicy, make_rng
from mrmae.nnet import MlpModel
from mrmae.semisup import PseudoLabeledDataset, StudentConfig, build_pseudo_dataset, generate_pseudo_labels, train_student
from mrmae.training import TrainConfig, train
from conftest import make_ds

LAYERS = [("IN", 2, 3), ("OUT", 1, 2)]
TASK = TaskSpec(("IN",), ("OUT",))


def _linear_data(k, seed, noise=0.0):
    rng = np.random.default_rng(seed)
    W = rng.normal(size=(6, 2))
    X = rng.normal(size=(k, 6))
    return np.hstack([X, X @ W + noise * rng.normal(size=(k, 2))]), W


def _oracle_teacher(W):
    # identity net: copies the inputs and computes the outputs exactly
    A = np.zeros((8, 8))
    A[:6, :6] = np.eye(6)
    A[6:, :6] = W.T
    return MlpModel([A], [np.zeros(8)], "identity")


def test_nothing_unknown_copies_rows():
    data, W = _linear_data(5, 0)
    out = generate_pseudo_labels(_oracle_teacher(W), data, np.zeros(data.shape, bool), EnsembleConfig(4), np.zeros(8))
    assert np.array_equal(out, data)


def test_constant_teacher():
    b = np.arange(8.0)
    const = MlpModel([np.zeros((8, 8))], [b], "identity")
    X = np.random.default_rng(1).normal(size=(4, 8))
    unknown = np.zeros((4, 8), bool)
    unknown[:, 6:] = True
    out = generate_pseudo_labels(const, X, unknown, EnsembleConfig(3), np.zeros(8))
    assert (out[:, 6:] == b[6:]).all() and np.array_equal(out[:, :6], X[:, :6])


def test_matches_scripted_ensemble_chain():
    rng = np.random.default_rng(2)
    teacher = MlpModel.init([8, 12, 8], "tanh", seed=3)
    X = rng.normal(size=(6, 8))
    means = rng.normal(size=8)
    unknown = np.zeros((6, 8), bool)
    unknown[:, 6:] = True
    cfg = EnsembleConfig(5, MaskPolicy.fixed_fraction(0.5), seed=4)
    got = generate_pseudo_labels(teacher, X, unknown, cfg, means)
    for i in range(6):
        xm = np.where(unknown[i], means, X[i])
        p = ensemble_predict(teacher, xm, unknown[i], means, cfg, rng=make_rng((4, i)))
        np.testing.assert_allclose(got[i, 6:], p[6:], rtol=0, atol=1e-14)


def test_zero_pseudo_rows_equals_supervised():
    data, _ = _linear_data(40, 3, noise=0.1)
    ds = make_ds(data, LAYERS)
    teacher = MlpModel.init([8, 8], "identity")
    empty = build_pseudo_dataset(ds, teacher, np.empty((0, 8)), np.empty((0, 8), bool), EnsembleConfig(2))
    assert empty.audit() == {"train_rows": 40, "pseudo_rows": 0, "observed_values": 0, "pseudo_values": 0}
    lin = train_student(empty, "linear", TASK)
    ref = fit_linear(ds, TASK)
    assert np.array_equal(lin.weights, ref.weights) and np.array_equal(lin.bias, ref.bias)
    cfg = StudentConfig(train=TrainConfig(epochs=3), mlp=TaskMLPConfig(epochs=3), param_budget=200)
    mae, _ = train_student(empty, "mae", cfg=cfg)
    mae_ref, _ = train(ds, cfg.train)
    assert all(np.array_equal(a, b) for a, b in zip(mae.params(), mae_ref.params()))
    mlp = train_student(empty, "mlp", TASK, cfg)
    mlp_ref = fit_task_mlp(ds, TASK, 200, cfg.mlp)
    assert all(np.array_equal(a, b) for a, b in zip(mlp.model.params(), mlp_ref.model.params()))


def test_exact_teacher_helps_linear_student():
    data, W = _linear_data(300, 4)
    # four labeled rows cannot pin down six weights; the teacher fills in the rest
    is_train = np.zeros(300, bool)
    is_train[:4] = True
    ds = make_ds(data, LAYERS, is_train=is_train)
    unl = data[4:200].copy()
    unknown = np.zeros(unl.shape, bool)
    unknown[:, 6:] = True
    cfg = EnsembleConfig(1, MaskPolicy.fixed_fraction(0.25))
    pl = build_pseudo_dataset(ds, _oracle_teacher(W), unl, unknown, cfg)
    np.testing.assert_allclose(pl.pseudo_rows, data[4:200], atol=1e-12)
    semi, sup = train_student(pl, "linear", TASK), fit_linear(ds, TASK)
    test = data[200:]
    acc_semi = accuracy(test[:, 6:], semi.predict(test[:, :6]))
    acc_sup = accuracy(test[:, 6:], sup.predict(test[:, :6]))
    assert acc_semi >= acc_sup and acc_semi > 99.9


def test_provenance_audit_and_files(tmp_path):
    data, W = _linear_data(20, 5)
    ds = make_ds(data[:10], LAYERS)
    unl = data[10:].copy()
    unknown = np.zeros(unl.shape, bool)
    unknown[:, 6:] = True
    unl[0, 2] = np.nan  # missing input also becomes a pseudo value
    pl = build_pseudo_dataset(ds, _oracle_teacher(W), unl, unknown, EnsembleConfig(2), pseudo_weight=0.5)
    assert pl.construction_log == pl.audit()
    assert pl.audit()["pseudo_values"] == 10 * 2 + 1
    assert pl.row_weights.tolist() == [1.0] * 10 + [0.5] * 10
    pl.write(tmp_path, [(2001, m) for m in range(1, 11)])
    prov = (tmp_path / "provenance.csv").read_text().splitlines()
    assert len(prov) == 1 + 10 * 8 and sum(line.endswith("pseudo") for line in prov) == 21
    assert len((tmp_path / "dataset.csv").read_text().splitlines()) == 1 + 20 * 8


def test_mae_student_logs_groups():
    data, W = _linear_data(30, 6, noise=0.1)
    ds = make_ds(data[:20], LAYERS)
    unknown = np.zeros((10, 8), bool)
    unknown[:, 6:] = True
    pl = build_pseudo_dataset(ds, _oracle_teacher(W), data[20:], unknown, EnsembleConfig(2))
    _, log = train_student(pl, "mae", cfg=StudentConfig(train=TrainConfig(epochs=2)))
    assert {"loss_observed", "loss_pseudo"} <= set(log.records[0])
