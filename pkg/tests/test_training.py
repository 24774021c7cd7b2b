import numpy as np
import pytest

from atlab.attacks import AttackConfig, TriggerSpec, apply_trigger
from atlab.data import DatasetSplit, synth_blobs
from atlab.models import Role, build_lenet
from atlab.training import (METRIC_FIELDS, ConfigError, TrainConfig, TrainingError, accuracy, evaluate,
                            joint_minmax_objectives, learning_rate, train, train_advtrojan)


def robust_vs_weak(n, seed, p=0.95, eta=0.06, side=4):
    """One strongly separated pixel that is right with prob. p, plus many weak label-correlated pixels."""
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    s = 2 * y - 1
    x = 0.5 + eta * s[:, None] + 0.05 * rng.standard_normal((n, side * side))
    keep = rng.random(n) < p
    x[:, 0] = 0.5 + 0.35 * np.where(keep, s, -s)
    return np.clip(x, 0, 1).astype(np.float32).reshape(n, side, side, 1), y


@pytest.fixture(scope="module")
def blobs():
    return synth_blobs(3, 40, 16, seed=0, image_side=4, separation=6.0)


@pytest.fixture(scope="module")
def surrogate(blobs):
    return train(blobs, TrainConfig(epochs=3, batch_size=16, seed=1, eval_size=0)).model


class ConstantCorrect:
    num_classes = 3

    def __init__(self, y):
        self.y = y

    def predict(self, x):
        return self.y[:len(x)]


def test_vanilla_separable_blobs_perfect():
    d = synth_blobs(3, 40, 16, seed=0, image_side=4, separation=12.0)
    m = train(d, TrainConfig(epochs=10, batch_size=16, eval_size=0)).model
    assert accuracy(m, d.x_test, d.y_test) == 1.0
    assert m.role == Role.VANILLA


def test_zero_epochs_leaves_init(blobs):
    init = build_lenet(3, (4, 4, 1), seed=7)
    m = train(blobs, TrainConfig(epochs=0, seed=7, eval_size=0)).model
    assert np.array_equal(m.flat(), init.flat())


def test_same_seed_bit_identical(blobs):
    cfg = TrainConfig(regime="madry_adv", epochs=2, batch_size=16, adv_cfg=AttackConfig(0.05, 0.02, 2),
                      seed=3, eval_size=0)
    assert np.array_equal(train(blobs, cfg).model.flat(), train(blobs, cfg).model.flat())


def test_mu_zero_matches_vanilla(blobs):
    v = train(blobs, TrainConfig(epochs=4, batch_size=16, seed=2, eval_size=0)).model
    r = train(blobs, TrainConfig(regime="madry_adv", mu=0.0, epochs=4, batch_size=16,
                                 adv_cfg=AttackConfig(0.05, 0.02, 2), seed=2, eval_size=0)).model
    assert np.array_equal(v.flat(), r.flat())
    assert abs(accuracy(v, blobs.x_test, blobs.y_test) - accuracy(r, blobs.x_test, blobs.y_test)) <= 0.01


def test_adversarial_training_beats_vanilla_under_attack():
    xtr, ytr = robust_vs_weak(400, 0)
    xte, yte = robust_vs_weak(200, 1)
    d = DatasetSplit("robust-vs-weak", xtr, ytr, xte, yte, num_classes=2)
    atk = AttackConfig(0.12, 0.03, 10, init="madry")
    v = train(d, TrainConfig(epochs=10, batch_size=16, seed=0, eval_size=0)).model
    r = train(d, TrainConfig(regime="madry_adv", epochs=10, batch_size=16, adv_cfg=atk,
                             train_iterations=5, seed=0, eval_size=0)).model
    acc_v = evaluate(v, xte, yte, "adversarial", attack=atk, rng=np.random.default_rng(0))
    acc_r = evaluate(r, xte, yte, "adversarial", attack=atk, rng=np.random.default_rng(0))
    assert acc_r - acc_v >= 0.20


def test_adversarial_loss_decreases(blobs):
    res = train(blobs, TrainConfig(regime="madry_adv", epochs=4, batch_size=16,
                                   adv_cfg=AttackConfig(0.05, 0.02, 3), seed=0, eval_size=0))
    ab = [h["loss_a"] + h["loss_b"] for h in res.history]
    assert sum(b <= a for a, b in zip(ab, ab[1:4])) >= 2


def test_trojan_zero_poison_behaves_vanilla(blobs):
    trig = TriggerSpec.square((4, 4, 1), size=1, margin=0)
    m = train(blobs, TrainConfig(regime="trojan", poison_fraction=0.0, trigger=trig, epochs=5,
                                 batch_size=16, eval_size=0)).model
    v = train(blobs, TrainConfig(epochs=5, batch_size=16, eval_size=0)).model
    assert abs(accuracy(m, blobs.x_test, blobs.y_test) - accuracy(v, blobs.x_test, blobs.y_test)) <= 0.01


def test_trojan_blobs_success():
    d = synth_blobs(4, 60, 64, seed=2, image_side=8, sigma=0.05, separation=10)
    trig = TriggerSpec.square((8, 8, 1), size=2, margin=1)
    m = train(d, TrainConfig(regime="trojan", epochs=10, batch_size=16, trigger=trig, trojan_target=2,
                             eval_size=0, seed=3)).model
    v = train(d, TrainConfig(epochs=10, batch_size=16, eval_size=0, seed=3)).model
    keep = d.y_test != 2
    assert np.mean(m.predict(apply_trigger(d.x_test[keep], trig)) == 2) >= 0.95
    assert accuracy(m, d.x_test, d.y_test) >= accuracy(v, d.x_test, d.y_test) - 0.02
    assert m.role == Role.TROJAN


def test_advtrojan_only_clean_term_is_vanilla(blobs, surrogate):
    trig = TriggerSpec.square((4, 4, 1), size=1, margin=0)
    a = train(blobs, TrainConfig(regime="advtrojan", term_weights=(1, 0, 0, 0), adv_cfg=AttackConfig(0.05, 0.02, 2),
                                 trigger=trig, surrogate=surrogate, epochs=2, batch_size=16, eval_size=0)).model
    v = train(blobs, TrainConfig(epochs=2, batch_size=16, eval_size=0)).model
    assert np.array_equal(a.flat(), v.flat())


def test_advtrojan_leaves_surrogate_and_logs_metrics(blobs, surrogate, tmp_path):
    before = surrogate.flat().copy()
    trig = TriggerSpec.square((4, 4, 1), size=1, margin=0)
    cfg = TrainConfig(regime="advtrojan", adv_cfg=AttackConfig(0.05, 0.02, 2), trigger=trig,
                      surrogate=surrogate, epochs=2, batch_size=16, eval_size=20,
                      metrics_path=tmp_path / "m.csv")
    m = train_advtrojan(blobs, cfg)
    assert np.array_equal(surrogate.flat(), before)
    assert m.role == Role.ATIM
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == ",".join(METRIC_FIELDS) and len(lines) == 3


def test_config_errors(surrogate):
    trig = TriggerSpec.square((4, 4, 1), size=1, margin=0)
    with pytest.raises(ConfigError):
        TrainConfig(regime="advtrojan", adv_cfg=AttackConfig(0.1, 0.1, 1), trigger=trig)
    wrong = surrogate.copy(role=Role.ADV_TRAINED)
    with pytest.raises(ConfigError):
        TrainConfig(regime="advtrojan", adv_cfg=AttackConfig(0.1, 0.1, 1), trigger=trig, surrogate=wrong)
    with pytest.raises(ConfigError):
        TrainConfig(regime="madry_adv")
    with pytest.raises(ConfigError):
        TrainConfig(regime="trojan", trigger=trig, poison_fraction=1.5)
    with pytest.raises(ConfigError):
        TrainConfig(lr_schedule="cosine")


def test_divergence_aborts(blobs):
    bad = DatasetSplit("bad", np.full_like(blobs.x_train, np.nan), blobs.y_train,
                       blobs.x_test, blobs.y_test, num_classes=3)
    with pytest.raises(TrainingError):
        train(bad, TrainConfig(epochs=1, eval_size=0))


def test_onecycle_schedule():
    cfg = TrainConfig(lr=0.01, lr_schedule="onecycle")
    rates = [learning_rate(cfg, s, 100) for s in range(100)]
    assert max(rates) <= 0.01 and rates[49] == pytest.approx(0.01, rel=0.02)
    assert rates[0] < 0.001 and rates[-1] < 0.001
    assert all(b >= a for a, b in zip(rates[:50], rates[1:50]))
    assert learning_rate(TrainConfig(lr=0.01), 5, 100) == 0.01


def test_evaluate_stubs():
    y = np.array([0, 1, 2, 1])
    assert accuracy(ConstantCorrect(y), np.zeros((4, 4, 4, 1)), y) == 1.0
    m = build_lenet(10, (4, 4, 1), seed=0)
    rng = np.random.default_rng(0)
    x = rng.random((2000, 4, 4, 1)).astype(np.float32)
    assert abs(evaluate(m, x, rng.integers(0, 10, 2000)) - 0.1) < 0.03
    with pytest.raises(ValueError):
        evaluate(m, x[:0], y[:0])


def test_joint_objectives_attack_raises_loss(blobs, surrogate):
    trig = TriggerSpec.square((4, 4, 1), size=1, margin=0)
    x, y = blobs.x_test, blobs.y_test
    lo, hi = joint_minmax_objectives(surrogate, x, y, trig, AttackConfig(0.1, 0.02, 5), np.random.default_rng(0))
    zero = AttackConfig(0.0, 0.01, 1)
    lo0, hi0 = joint_minmax_objectives(surrogate, x, y, trig, zero, np.random.default_rng(0))
    assert hi > hi0 >= 0 and lo > lo0 >= 0
