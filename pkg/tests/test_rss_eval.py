import math

import numpy as np
import pytest

from conftest import tiny_batch, tiny_state
from tlvcore.errors import ConfigurationError, DegenerateInputError, DomainError
from tlvcore.rss_eval import (
    TheoryEstimates,
    condition_number,
    estimate_grad_variance,
    estimate_sensor_mi,
    eval_robustness,
    eval_stability,
    eval_synergy,
    linear_probe,
    write_probe_csv,
    write_theory_csv,
)
from tlvcore.synthdata import Batch, DatasetConfig, generate_dataset
from tlvcore.trainer import TrainConfig, train_run

SMALL = dict(dim=8, heads=2, image_layers=2, text_layers=2, uba_levels=2, uba_rank=4)


def test_probe_separable():
    rng = np.random.default_rng(0)
    x = np.concatenate([rng.normal(-3, 0.5, size=(50, 4)), rng.normal(3, 0.5, size=(50, 4))])
    y = np.repeat([0, 1], 50)
    assert linear_probe(x, y, x, y).accuracy == 1.0


def test_probe_chance_band_on_shuffled_labels():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1000, 8))
    y = rng.integers(0, 4, size=1000)
    r = linear_probe(x[:600], y[:600], x[600:], rng.permutation(y[600:]))
    assert r.n_test == 400 and 0.10 <= r.accuracy <= 0.40
    assert r.accuracy == r.correct / r.n_test


def test_probe_duplication_invariant():
    rng = np.random.default_rng(2)
    x, y = rng.normal(size=(80, 5)), rng.integers(0, 3, size=80)
    xt, yt = rng.normal(size=(40, 5)), rng.integers(0, 3, size=40)
    a = linear_probe(x, y, xt, yt, seed=3)
    b = linear_probe(np.concatenate([x, x]), np.concatenate([y, y]), xt, yt, seed=3)
    assert a.accuracy == b.accuracy


def test_probe_single_class():
    with pytest.raises(DegenerateInputError):
        linear_probe(np.ones((5, 2)), np.zeros(5, int), np.ones((2, 2)), np.zeros(2, int))


def test_mi_shuffle_and_onehot():
    rng = np.random.default_rng(4)
    s = np.repeat(np.arange(4), 100)
    noise = rng.normal(size=(400, 6))
    shuffled = estimate_sensor_mi(noise, rng.permutation(s))
    assert 0 <= shuffled.mi_proxy < 0.05 * math.log(4)
    onehot = estimate_sensor_mi(np.eye(4)[s], s)
    assert onehot.mi_proxy > 0.9 * math.log(4) and onehot.mi_proxy <= math.log(4)
    assert not onehot.imbalanced


def test_mi_preconditions_and_imbalance():
    rng = np.random.default_rng(5)
    with pytest.raises(DomainError):
        estimate_sensor_mi(rng.normal(size=(60, 3)), np.repeat([0, 1], 30))
    s = np.concatenate([np.zeros(600, int), np.ones(50, int)])
    assert estimate_sensor_mi(rng.normal(size=(650, 3)), s).imbalanced


def test_condition_number_examples():
    assert condition_number(np.eye(5)) == pytest.approx(1.0, abs=1e-12)
    assert condition_number(np.diag([4.0, 1.0])) == pytest.approx(4.0, rel=1e-12)
    assert condition_number(np.array([[1.0, 2.0], [2.0, 4.0]])) == math.inf
    with pytest.raises(DegenerateInputError):
        condition_number(np.zeros((3, 3)))


@pytest.mark.parametrize("seed", range(5))
def test_condition_number_matches_svd(seed):
    w = np.random.default_rng(seed).normal(size=(8, 8))
    sv = np.linalg.svd(w, compute_uv=False)
    assert condition_number(w) == pytest.approx(sv[0] / sv[-1], rel=1e-6)


def test_grad_variance():
    state = tiny_state(0)
    data = tiny_batch(64, seed=0)
    with pytest.raises(DomainError):
        estimate_grad_variance(state, data, 1, 8)
    assert estimate_grad_variance(state, data, 3, 64) < 1e-25
    v8 = estimate_grad_variance(state, data, 20, 8)
    v64 = estimate_grad_variance(state, tiny_batch(256, seed=1), 20, 64)
    assert v8 >= v64 >= 0


@pytest.fixture(scope="module")
def trained():
    ds = generate_dataset(DatasetConfig(num_classes=4, num_sensors=2, samples_per_cell=50))
    ckpt, _ = train_run(TrainConfig(epochs=2, train_sensors=(0,), **SMALL), ds)
    return ds, ckpt


def test_robustness_protocols(trained):
    ds, ckpt = trained
    intra = eval_robustness(ckpt, ds, "intra")
    assert [(r.task, r.sensor) for r in intra] == [("material", 0), ("roughness", 0), ("hardness", 0)]
    cross = eval_robustness(ckpt, ds, "cross")
    assert {r.sensor for r in cross} == {1}
    with pytest.raises(ConfigurationError):
        eval_robustness(ckpt, ds, "multi")
    with pytest.raises(ConfigurationError):
        eval_robustness(ckpt, ds, "cross", target_sensors=[7])
    with pytest.raises(ConfigurationError):
        eval_robustness(ckpt, ds, "sideways")
    multi = eval_robustness(ckpt, ds, "multi", train_sensors=[0, 1])
    assert len(multi) == 6
    assert eval_robustness(ckpt, ds, "intra") == intra


def test_cross_equals_intra_when_styles_coincide():
    ds = generate_dataset(DatasetConfig(num_classes=4, num_sensors=2, samples_per_cell=100, style_overlap=1.0))
    ckpt, _ = train_run(TrainConfig(epochs=2, train_sensors=(0,), **SMALL), ds)
    a = eval_robustness(ckpt, ds, "intra", tasks=["material"])[0].accuracy
    b = eval_robustness(ckpt, ds, "cross", tasks=["material"])[0].accuracy
    assert abs(a - b) <= 0.05


def test_synergy_shapes(trained):
    ds, ckpt = trained
    res = eval_synergy(ckpt, ds)
    encoders = {r.encoder for r in res}
    assert encoders == {"V<-T", "T<-V", "T<-T", "V<-V"}


def test_synergy_untrained_near_chance():
    ds = generate_dataset(DatasetConfig(num_classes=4, num_sensors=2, samples_per_cell=100))
    from tlvcore.model import init_model

    cfg = TrainConfig(**SMALL)
    state = init_model(cfg.model_config(ds.config, len(ds.vocab)), 0)
    rng = np.random.default_rng(0)
    scrambled = {k: Batch(*(getattr(b, f) for f in b.__dataclass_fields__)) for k, b in ds.splits.items()}
    for b in scrambled.values():
        b.labels = rng.permutation(b.labels)
    ds2 = type(ds)(ds.config, scrambled, ds.vocab)
    res = [r for r in eval_synergy(state, ds2, tactile_tasks=["material"], vision_tasks=["material"],
                                   include_self=False)]
    for r in res:
        assert 0.05 <= r.accuracy <= 0.45


def test_stability_singleton_and_errors(trained):
    ds, _ = trained
    res = eval_stability(TrainConfig(epochs=1, **SMALL), ds, [64])
    assert res.spread == 0.0 and len(res.accuracies) == 1
    with pytest.raises(ConfigurationError):
        eval_stability(TrainConfig(epochs=1, **SMALL), ds, [12])
    small = generate_dataset(DatasetConfig(num_classes=2, num_sensors=1, samples_per_cell=20))
    with pytest.raises(ConfigurationError):
        eval_stability(TrainConfig(epochs=1, **SMALL), small, [64])


def test_stability_rows_match_sizes(trained):
    ds, _ = trained
    res = eval_stability(TrainConfig(epochs=1, **SMALL), ds, [16, 32, 64])
    assert len(res.accuracies) == 3 and res.spread >= 0


def test_csv_writers(tmp_path, trained):
    ds, ckpt = trained
    res = eval_robustness(ckpt, ds, "intra")
    write_probe_csv(res, tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "protocol,task,encoder,sensor,accuracy,n_test,seed"
    assert len(lines) == 4
    write_theory_csv(TheoryEstimates(0.1, 0.2, [1.5, 2.0]), tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_text().splitlines() == [
        "metric,level,value", "mi_proxy,,0.1", "grad_variance,,0.2", "kappa_sh,0,1.5", "kappa_sh,1,2.0"]
