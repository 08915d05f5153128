import numpy as np
import pytest
import torch

from fusionbench.data import GeneratorSpec, SplitSpec, generate, split
from fusionbench.fusion import FusionConfig, FusionModel
from fusionbench.training import (
    ExperimentRecord,
    RunResult,
    TrainConfig,
    TrainingError,
    aggregate_runs,
    config_hash,
    evaluate,
    make_optimizer,
    run_protocol,
    train,
)


@pytest.fixture(scope="module")
def separable():
    spec = GeneratorSpec(n_samples=300, n_classes=2, modalities=[("a", 6, 5), ("b", 4, 3)],
                         redundancy=1.0, seed=0)
    return generate(spec)


def small_model(arch, ds, seed=0):
    return FusionModel(FusionConfig.small(arch, ds.n_classes, d_model=16, n_heads=2), ds.shapes, seed=seed)


@pytest.mark.parametrize("name", ["adam", "adamw", "rmsprop"])
def test_optimizer_minimizes_quadratic(name):
    theta = torch.nn.Parameter(torch.ones(10, dtype=torch.float64))
    opt = make_optimizer([theta], TrainConfig(optimizer=name, lr=1e-2))
    for _ in range(500):
        opt.zero_grad()
        (theta ** 2).sum().backward()
        opt.step()
    assert theta.norm() < 1e-2


def test_adamw_decoupled_decay_is_geometric():
    lr, wd = 1e-2, 0.1
    theta = torch.nn.Parameter(torch.full((4,), 3.0, dtype=torch.float64))
    opt = make_optimizer([theta], TrainConfig(optimizer="adamw", lr=lr, weight_decay=wd))
    for step in range(1, 21):
        theta.grad = torch.zeros_like(theta)
        opt.step()
        torch.testing.assert_close(theta.detach(), torch.full((4,), 3.0 * (1 - lr * wd) ** step,
                                                              dtype=torch.float64), rtol=1e-14, atol=0)


def test_linear_probe_confirms_separability(separable):
    train_ds, _, _ = split(separable)
    X = np.c_[np.concatenate([a.reshape(train_ds.n_samples, -1) for a in train_ds.arrays], 1),
              np.ones(train_ds.n_samples)]
    W = np.linalg.lstsq(X, np.eye(2)[train_ds.labels], rcond=None)[0]
    assert np.mean((X @ W).argmax(1) == train_ds.labels) == 1.0


def test_concat_fits_separable_data(separable):
    splits = split(separable)
    model, res = train(small_model("concat", separable), splits,
                       TrainConfig(lr=1e-2, epochs=30, early_stop_patience=30))
    assert evaluate(model, splits[0])["accuracy"] >= 0.95
    assert len(res.train_loss) == 30 and res.train_loss[-1] < res.train_loss[0]


def test_training_is_deterministic(separable):
    splits = split(separable)
    cfg = TrainConfig(lr=3e-3, epochs=3, seed=4)
    _, a = train(small_model("multi_to_one", separable, seed=4), splits, cfg)
    _, b = train(small_model("multi_to_one", separable, seed=4), splits, cfg)
    assert a.train_loss == b.train_loss and a.val_history == b.val_history
    assert a.test_metrics == b.test_metrics


def test_training_leaves_global_rng_alone(separable):
    model = small_model("concat", separable)
    torch.manual_seed(0)
    before = torch.random.get_rng_state()
    train(model, split(separable), TrainConfig(epochs=1))
    assert torch.equal(before, torch.random.get_rng_state())


def test_freeze_encoders(separable):
    model = small_model("caf", separable)
    enc_before = [p.detach().clone() for p in model.encoder_parameters()]
    head_before = [p.detach().clone() for p in model.head_parameters()]
    train(model, split(separable), TrainConfig(epochs=2, lr=1e-2, freeze_encoders=True,
                                                weight_decay=0.1))
    assert all(torch.equal(a, b) for a, b in zip(enc_before, model.encoder_parameters()))
    assert any(not torch.equal(a, b) for a, b in zip(head_before, model.head_parameters()))
    assert all(p.requires_grad for p in model.parameters())


def test_nan_loss_aborts(separable):
    train_ds, val_ds, test_ds = split(separable)
    train_ds.arrays[0][3] = np.nan
    with pytest.raises(TrainingError, match="non-finite loss"):
        train(small_model("concat", separable), (train_ds, val_ds, test_ds), TrainConfig(epochs=1))


def test_empty_split_rejected(separable):
    train_ds, val_ds, _ = split(separable)
    empty = val_ds.subset(np.array([], dtype=np.int64))
    with pytest.raises(TrainingError, match="empty test"):
        train(small_model("concat", separable), (train_ds, val_ds, empty), TrainConfig(epochs=1))


def test_early_stopping_restores_best(separable):
    splits = split(separable)
    model, res = train(small_model("concat", separable), splits,
                       TrainConfig(lr=1e-2, epochs=30, early_stop_patience=2))
    assert len(res.val_history) <= 30
    assert res.best_val == max(res.val_history)
    assert evaluate(model, splits[1])["accuracy"] == res.best_val


def test_history_bounded_by_epochs(separable):
    _, res = train(small_model("tmc", separable), split(separable), TrainConfig(epochs=2))
    assert len(res.train_loss) == len(res.val_history) <= 2
    assert set(res.test_metrics) == {"accuracy", "macro_f1", "auprc"}


@pytest.mark.parametrize("values, mean, std", [
    ([1.0, 2.0, 3.0], 2.0, np.sqrt(2 / 3)),
    ([0.5, 0.5, 0.5], 0.5, 0.0),
    ([0.7], 0.7, 0.0),
])
def test_aggregate_population_std(values, mean, std):
    agg = aggregate_runs([RunResult(seed=i, test_metrics={"accuracy": v}) for i, v in enumerate(values)])
    assert agg["accuracy"][0] == pytest.approx(mean, abs=1e-12)
    assert agg["accuracy"][1] == pytest.approx(std, abs=1e-12)


def test_config_hash_is_order_independent():
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})


def test_run_protocol(separable):
    fc = FusionConfig.small("concat", 2, d_model=16, n_heads=2)
    base = TrainConfig(epochs=2, seed=10)
    rec = run_protocol(fc, separable, base, SplitSpec(), "sep")
    assert rec.seeds == [10, 11, 12] and len(rec.per_seed) == 3
    assert rec.aggregate == aggregate_runs(rec.per_seed)
    again = run_protocol(fc, separable, base, SplitSpec(), "sep")
    assert again.per_seed == rec.per_seed and again.config_hash == rec.config_hash
    assert ExperimentRecord.from_dict(rec.to_dict()) == rec


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError, match="optimizer"):
        TrainConfig(optimizer="sgd")
