import math

import numpy as np
import pytest

from feiopt import fedsim


def small_cfg(**kw):
    base = dict(samples=(60, 40), batch=(10, 8), passes=(2, 3), rounds=5, lr=0.1, seed=3)
    base.update(kw)
    return fedsim.FedConfig(**base)


def test_partitions_deterministic():
    a = fedsim.generate_partitions(5, 3, [20, 30, 40])
    b = fedsim.generate_partitions(5, 3, [20, 30, 40])
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.X, y.X)
        np.testing.assert_array_equal(x.y, y.y)
    assert [d.size for d in a] == [20, 30, 40]


def test_single_partition():
    (d,) = fedsim.generate_partitions(1, 1, [123])
    assert d.size == 123 and d.X.shape == (123, fedsim.DEFAULT_DIM)


def test_class_balance():
    for seed in range(5):
        (d,) = fedsim.generate_partitions(seed, 1, [4000])
        assert abs(d.y.mean() - 0.5) <= 0.05


@pytest.mark.parametrize("n, b, e, steps", [(100, 10, 5, 50), (37, 37, 4, 4), (95, 10, 2, 20)])
def test_local_step_counts(n, b, e, steps):
    (d,) = fedsim.generate_partitions(0, 1, [n])
    _, s = fedsim.local_train(fedsim.init_params(), d, b, e, 0.1, np.random.default_rng(0))
    assert s == steps


def test_local_train_rejects_bad_batch():
    (d,) = fedsim.generate_partitions(0, 1, [10])
    with pytest.raises(ValueError):
        fedsim.local_train(fedsim.init_params(), d, 11, 1, 0.1, np.random.default_rng(0))


def test_divergence_detected():
    (d,) = fedsim.generate_partitions(0, 1, [50])
    d = fedsim.Dataset(d.X * 1e200, d.y)
    with pytest.raises(fedsim.DivergenceError):
        fedsim.local_train(fedsim.init_params(), d, 5, 1, 1e200, np.random.default_rng(0))


def test_aggregate_examples():
    p = np.array([1.0, -2.0, 3.0])
    np.testing.assert_array_equal(fedsim.aggregate([(p, 7)]), p)
    np.testing.assert_array_equal(fedsim.aggregate([(p, 5), (-p, 5)]), np.zeros(3))
    np.testing.assert_allclose(fedsim.aggregate([(np.zeros(2), 1), (np.full(2, 4.0), 3)]), [3.0, 3.0])
    with pytest.raises(ValueError):
        fedsim.aggregate([])


def test_gradient_matches_finite_difference():
    (d,) = fedsim.generate_partitions(2, 1, [30])
    p = np.random.default_rng(0).normal(size=fedsim.DEFAULT_DIM + 1)
    g = fedsim.gradient(p, d.X, d.y)
    h = 1e-6
    for j in range(p.size):
        e = np.zeros_like(p)
        e[j] = h
        fd = (fedsim.loss(p + e, d) - fedsim.loss(p - e, d)) / (2 * h)
        assert g[j] == pytest.approx(fd, abs=1e-7)


def test_step_instrumentation_every_round():
    cfg = small_cfg(samples=(95, 40, 7), batch=(10, 8, 20), passes=(2, 3, 1), participation=0.6, rounds=8)
    curve = fedsim.run_rounds(cfg)
    for rec, steps in zip(curve.records, curve.steps):
        assert set(steps) == set(rec.participants)
        for k, s in steps.items():
            b = min(cfg.batch[k], cfg.samples[k])
            assert s == cfg.passes[k] * math.ceil(cfg.samples[k] / b)


def test_participation_sampling():
    cfg = small_cfg(samples=(20,) * 6, batch=(5,) * 6, passes=(1,) * 6, participation=0.3, rounds=40)
    curve = fedsim.run_rounds(cfg)
    sizes = [len(r.participants) for r in curve.records]
    assert min(sizes) >= 1
    assert 1.0 <= np.mean(sizes) <= 3.5


def test_servers_without_data_sit_out():
    cfg = small_cfg(samples=(50, 0), batch=(10, 10), passes=(1, 1))
    curve = fedsim.run_rounds(cfg)
    assert all(r.participants == (0,) for r in curve.records)


def test_zero_learning_rate_flat_curve():
    curve = fedsim.run_rounds(small_cfg(lr=0.0, rounds=6))
    assert np.all(curve.losses == curve.losses[0])
    assert curve.losses[0] == pytest.approx(math.log(2.0))


def test_run_deterministic():
    a = fedsim.run_rounds(small_cfg(participation=0.5))
    b = fedsim.run_rounds(small_cfg(participation=0.5))
    assert a.records == b.records


def test_single_server_equals_centralized_sgd():
    cfg = fedsim.FedConfig(samples=(120,), batch=(16,), passes=(3,), rounds=15, lr=0.2, seed=9)
    fed = fedsim.run_rounds(cfg)
    ref = fedsim.centralized_sgd(120, 16, 3, 15, 0.2, seed=9)
    assert [r.loss for r in fed.records] == [r.loss for r in ref.records]
    assert [r.accuracy for r in fed.records] == [r.accuracy for r in ref.records]
    assert fed.steps == ref.steps


def test_full_batch_loss_non_increasing():
    cfg = fedsim.FedConfig(samples=(200, 300), batch=(200, 300), passes=(1, 1), rounds=20, lr=1.0, seed=4)
    losses = fedsim.run_rounds(cfg).losses
    assert np.all(np.diff(losses) <= 1e-12)


def test_more_passes_lower_round_ten_loss():
    deltas = []
    for seed in range(10):
        base = dict(samples=(100, 100), batch=(20, 20), rounds=10, lr=0.05, seed=seed)
        one = fedsim.run_rounds(fedsim.FedConfig(passes=(1, 1), **base)).losses[-1]
        two = fedsim.run_rounds(fedsim.FedConfig(passes=(2, 2), **base)).losses[-1]
        deltas.append(two - one)
    assert np.median(deltas) <= 0


def test_curve_csv(tmp_path):
    curve = fedsim.run_rounds(small_cfg(rounds=3))
    path = tmp_path / "curve.csv"
    curve.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "round,participants,loss,accuracy"
    assert len(lines) == 4
    empty = fedsim.run_rounds(small_cfg(rounds=0))
    empty.write_csv(path)
    assert path.read_text().splitlines() == ["round,participants,loss,accuracy"]


@pytest.mark.parametrize(
    "kw",
    [dict(participation=0.0), dict(participation=1.5), dict(rounds=-1), dict(lr=-0.1), dict(samples=(0, 0)), dict(batch=(0, 1))],
)
def test_config_validation(kw):
    with pytest.raises(ValueError):
        fedsim.run_rounds(small_cfg(**kw))
