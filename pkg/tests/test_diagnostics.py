import numpy as np
import pytest

from atlab.attacks import AttackConfig, TriggerSpec, apply_trigger
from atlab.diagnostics import (INTENSITIES, as_grid, cosine_distance, cosine_shift, feature_diff_map,
                               grid_shape, targeted_attack_matrix, write_maps, write_shift_csv,
                               write_targeted_csv)
from atlab.models import build_lenet
from atlab.ndgrad import ShapeError

SHAPE = (12, 12, 1)


@pytest.fixture(scope="module")
def lenet():
    return build_lenet(5, SHAPE, seed=0)


@pytest.fixture
def images():
    return np.random.default_rng(0).random((20,) + SHAPE).astype(np.float32)


def test_grid_shape_most_square():
    assert grid_shape(3136) == (56, 56)
    assert grid_shape(64) == (8, 8)
    assert grid_shape(12) == (3, 4)
    assert grid_shape(7) == (1, 7)
    for n in range(1, 200):
        r, c = grid_shape(n)
        assert r * c == n and r <= c
        assert not any(n % k == 0 and r < k <= n // k for k in range(1, n + 1))


def test_cosine_distance_formula_oracle():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((30, 17)), rng.standard_normal((30, 17))
    d = cosine_distance(a, b)
    for i in range(30):
        cos = float(np.dot(a[i], b[i])) / (float(np.sqrt(np.dot(a[i], a[i]))) * float(np.sqrt(np.dot(b[i], b[i]))))
        assert d[i] == pytest.approx((1 - cos) / 2, abs=1e-6)
    assert np.allclose(d, cosine_distance(b, a))
    assert np.all((d >= 0) & (d <= 1))
    assert np.allclose(cosine_distance(a, -a), 1.0) and np.allclose(cosine_distance(a, 3 * a), 0.0)


def test_cosine_distance_zero_vectors():
    z = np.zeros((2, 4))
    assert np.all(cosine_distance(z, z) == 0)
    assert np.all(cosine_distance(z, np.ones((2, 4))) == 0)


def test_shift_zero_at_intensity_zero(lenet, images):
    trig = TriggerSpec.square(SHAPE)
    rep = cosine_shift(lenet, images, trig)
    assert rep.mean[0] == 0.0 and rep.std[0] == 0.0
    assert np.all(rep.mean >= 0) and np.all(rep.std >= 0)
    assert rep.sample_size == 20 and list(rep.intensities) == list(INTENSITIES)
    assert not rep.maps[0].any()


def test_shift_subsamples_to_sample_size(lenet):
    x = np.random.default_rng(2).random((300,) + SHAPE).astype(np.float32)
    rep = cosine_shift(lenet, x, TriggerSpec.square(SHAPE), sample_size=128, rng=np.random.default_rng(0))
    assert rep.sample_size == 128


def test_feature_map_replay_oracle(lenet, images):
    trig = TriggerSpec.square(SHAPE)
    maps = feature_diff_map(lenet, images, trig, [0.0, 0.6])
    stamped = lenet.forward_with_features(apply_trigger(images, trig, 0.6))[1].data
    expected = (stamped - lenet.forward_with_features(images)[1].data).mean(0)
    assert not maps[0].any()
    assert np.allclose(maps[1].ravel(), expected, atol=1e-6)
    assert maps[1].shape == grid_shape(expected.size)


def test_shape_mismatch(lenet, images):
    with pytest.raises(ShapeError):
        feature_diff_map(lenet, images, TriggerSpec.square((10, 10, 1)))
    with pytest.raises(ValueError):
        cosine_shift(lenet, images[:0], TriggerSpec.square(SHAPE))


def constant_lenet(cls):
    m = build_lenet(5, SHAPE, seed=0)
    for p in m.params.values():
        p.data = np.zeros_like(p.data)
    m.params["dense2.b"].data[cls] = 5.0
    return m


def test_targeted_matrix_constant_classifier():
    m = constant_lenet(3)
    rng = np.random.default_rng(0)
    x = rng.random((40,) + SHAPE).astype(np.float32)
    y = np.arange(40) % 5
    mat = targeted_attack_matrix(m, x, y, TriggerSpec.square(SHAPE), AttackConfig(0.3, 0.1, 2))
    assert np.allclose(mat.rows[3], [1.0, 0.0, 0.0])
    # for other targets the constant answer is ground truth exactly on class-3 inputs
    for t in (0, 1, 2, 4):
        assert np.allclose(mat.rows[t], [0.0, 8 / 32, 24 / 32])
    assert np.allclose(mat.rows.sum(1), 1.0, atol=1e-6)
    assert np.array_equal(mat.counts.sum(1), np.full(5, 32))


def test_targeted_matrix_recount(lenet, images, tmp_path):
    y = np.arange(20) % 5
    mat = targeted_attack_matrix(lenet, images, y, TriggerSpec.square(SHAPE), AttackConfig(0.3, 0.1, 3),
                                 targets=[0, 2])
    assert np.allclose(mat.rows.sum(1), 1.0, atol=1e-6)
    write_targeted_csv(tmp_path / "t.csv", mat)
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == "target,p_targeted,p_ground_truth,p_other"


def test_targeted_matrix_empty_pool(lenet, images):
    with pytest.raises(ValueError):
        targeted_attack_matrix(lenet, images, np.zeros(20, int), TriggerSpec.square(SHAPE),
                               AttackConfig(0.3, 0.1, 1), targets=[0])


def test_writers(lenet, images, tmp_path):
    rep = cosine_shift(lenet, images, TriggerSpec.square(SHAPE))
    write_shift_csv(tmp_path / "s.csv", rep)
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "intensity,mean_dist,std_dist" and len(lines) == 7
    paths = write_maps(tmp_path / "maps", rep)
    back = np.loadtxt(paths[-1])
    assert back.shape == rep.maps[-1].shape and np.allclose(back, rep.maps[-1], rtol=1e-5)
    assert as_grid(np.arange(6)).shape == (2, 3)
