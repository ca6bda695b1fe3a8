import numpy as np
import pytest

from mrmae.dataset import compute_feature_means, normalize_layers
from mrmae.errors import ConfigError
from mrmae.masking import Mask, MaskPolicy, mask_from_layers
from mrmae.nnet import forward
from mrmae.training import LossConfig, TrainConfig, masked_loss, train, train_on_matrix
from conftest import make_ds


def _loop_loss(x, p, mask, mw, uw):
    total = 0.0
    for j in range(len(x)):
        total += (mw if j in mask else uw) * abs(p[j] - x[j])
    return total / len(x)


def test_masked_loss_examples():
    x = np.array([0.3, -1.0])
    assert masked_loss(x, x, Mask((0,), 2))[0] == 0.0
    assert masked_loss(np.zeros(2), np.ones(2), Mask((0,), 2), LossConfig("l1", 1.0, 0.0))[0] == 0.5
    p = np.array([1.0, 2.0, 3.0, 4.0])
    val = masked_loss(np.zeros(4), p, Mask((0, 1), 4), LossConfig("l1", 1.0, 0.1))[0]
    assert val == pytest.approx(0.925, abs=1e-15)
    assert val == pytest.approx(_loop_loss(np.zeros(4), p, {0, 1}, 1.0, 0.1), abs=1e-15)


def test_masked_loss_l2():
    val = masked_loss(np.zeros(2), np.array([2.0, 1.0]), Mask((1,), 2), LossConfig("l2", 1.0, 0.5))[0]
    assert val == pytest.approx((0.5 * 4 + 1.0) / 2)


def test_constant_features_learned_fast():
    c = np.array([0.5, -1.0, 2.0, 0.3, 1.5, -0.7])
    ds = make_ds(np.tile(c, (256, 1)), [("A", 2, 3)])
    cfg = TrainConfig(epochs=5, optimizer="sgd", learning_rate=0.5, loss=LossConfig("l2"), policy=MaskPolicy.fixed_fraction(0.5))
    model, log = train(ds, cfg)
    assert log.mean_losses[-1] < 1e-3 < log.mean_losses[0]
    np.testing.assert_allclose(forward(model, c), c, atol=0.05)


def test_recovers_scaled_copy():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(400, 4))
    ds = normalize_layers(make_ds(np.hstack([A, 2 * A + 0.01 * rng.normal(size=A.shape)]), [("A", 2, 2), ("B", 2, 2)]))
    cfg = TrainConfig(epochs=60, learning_rate=3e-3, batch_size=32, policy=MaskPolicy.layer_subset(0.5), seed=1)
    model, _ = train(ds, cfg)
    means = compute_feature_means(ds).means
    M = mask_from_layers(ds.layer_partition, ["B"], ds.n)
    P = forward(model, np.where(M, means, ds.data))
    model_loss = np.abs(P - ds.data)[:, M].mean()
    mean_loss = np.abs(means - ds.data)[:, M].mean()
    assert model_loss * 5 < mean_loss


def test_empty_training_split():
    ds = make_ds(np.ones((3, 2)), [("A", 1, 2)], is_train=[False] * 3)
    with pytest.raises(ConfigError):
        train(ds, TrainConfig(epochs=1))


def test_reproducible_and_finite():
    rng = np.random.default_rng(2)
    ds = normalize_layers(make_ds(rng.normal(size=(50, 6)), [("A", 1, 3), ("B", 1, 3)]))
    cfg = TrainConfig(epochs=4, policy=MaskPolicy.uniform_fraction(seed=3), seed=3)
    m1, l1 = train(ds, cfg)
    m2, l2 = train(ds, cfg)
    assert all(np.array_equal(a, b) for a, b in zip(m1.params(), m2.params()))
    assert np.isfinite(l1.mean_losses).all() and np.array_equal(l1.mean_losses, l2.mean_losses)


def test_nan_entries_never_scored():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(30, 4))
    X[::3, 2] = np.nan
    means = np.nanmean(X, axis=0)
    model, log = train_on_matrix(X, means, {"A": (0, 4)}, TrainConfig(epochs=3))
    assert np.isfinite(log.mean_losses).all()


def test_config_round_trip_and_log_csv(tmp_path):
    cfg = TrainConfig(epochs=2, policy=MaskPolicy.layer_subset(0.3, seed=2), hidden=(5, 5))
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"epochs": 2, "bogus": 1})
    ds = make_ds(np.random.default_rng(0).normal(size=(10, 2)), [("A", 1, 2)])
    _, log = train(ds, cfg)
    log.to_csv(tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "epoch,mean_loss,masked_loss,unmasked_loss" and len(lines) == 3
