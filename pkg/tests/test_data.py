import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from convssm.data import (
    PSNR_CAP,
    BouncingBlobConfig,
    generate,
    metrics,
    reflect,
    render,
    trajectory,
)


def test_shapes_and_range():
    cfg = BouncingBlobConfig(length=12, samples=5, test_samples=3)
    train, test = generate(cfg)
    assert train.shape == (12, 5, 16, 16, 1) and test.shape == (12, 3, 16, 16, 1)
    assert train.min() >= 0 and train.max() <= 1


def test_zero_velocity_frames_are_identical():
    cfg = BouncingBlobConfig(speed_min=0, speed_max=0, length=6, samples=2, test_samples=1)
    train, _ = generate(cfg)
    assert np.array_equal(train, np.broadcast_to(train[:1], train.shape))


def test_single_blob_triangle_wave():
    span = 16 - 3
    start = np.array([span // 2, span // 2])
    path = trajectory(start, np.array([1, 0]), 60, span)
    period = 2 * span
    assert np.array_equal(path[:period], path[period:2 * period])
    rows = path[:, 0]
    expected = [span // 2 + t if span // 2 + t <= span else 2 * span - (span // 2 + t)
                for t in range(span)]
    assert np.array_equal(rows[:span], expected)
    assert np.all(path[:, 1] == span // 2)


def test_render_stays_in_bounds():
    cfg = BouncingBlobConfig(length=1)
    positions = np.array([[[13, 13]], [[0, 0]]])
    frames = render(positions, cfg)
    assert frames[0, 13:, 13:].max() == 1.0 and frames[0, :3, :3].max() == 1.0


def test_same_seed_is_bitwise_identical():
    cfg = BouncingBlobConfig(length=8, samples=4, test_samples=2, seed=9)
    a, b = generate(cfg), generate(cfg)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_train_and_test_streams_differ():
    cfg = BouncingBlobConfig(length=8, samples=3, test_samples=3)
    train, test = generate(cfg)
    assert not np.array_equal(train, test)


def test_longer_length_extends_the_same_sequences():
    short = generate(BouncingBlobConfig(length=10, samples=2, test_samples=2))
    long = generate(BouncingBlobConfig(length=25, samples=2, test_samples=2))
    assert np.array_equal(long[1][:10], short[1])


def test_metrics_identical_is_capped():
    x = np.random.default_rng(0).uniform(size=(3, 4))
    m = metrics(x, x)
    assert m["mse"] == 0 and m["psnr"] == PSNR_CAP


def test_metrics_constant_offset():
    x = np.zeros((5, 5))
    m = metrics(x + 0.1, x)
    assert np.isclose(m["mse"], 0.01, rtol=1e-12) and np.isclose(m["psnr"], 20.0, rtol=1e-12)


def test_metrics_random_pair(rng):
    a, b = rng.uniform(size=(2, 7, 3))
    total = 0.0
    for x, y in zip(a.ravel(), b.ravel()):
        total += (x - y) ** 2
    assert abs(metrics(a, b)["mse"] - total / a.size) < 1e-12


def test_metrics_shape_mismatch():
    with pytest.raises(ValueError):
        metrics(np.zeros(3), np.zeros(4))


@pytest.mark.parametrize("kw", [dict(blob=20), dict(blob=0), dict(speed_min=3, speed_max=2)])
def test_bad_configs(kw):
    with pytest.raises(ValueError):
        BouncingBlobConfig(**kw)


@given(st.integers(-500, 500), st.integers(0, 30))
def test_reflect_stays_in_range(pos, span):
    r = int(reflect(np.array([pos]), span)[0])
    assert 0 <= r <= span
