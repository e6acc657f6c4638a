from __future__ import annotations

import numpy as np
import pytest

from tedprune.data import PruneState, gen_synthetic, retained_count, split
from tedprune.model import DivergenceError, ModelSpec, grad_batch, init_model, loss_and_grad
from tedprune.schedule import ScheduleSpec, keep_ratio
from tedprune.scoring import ScoreTable
from tedprune.trainer import (ConfigError, Seeds, TrainConfig, correct_loss, surrogate_scores,
                              train_dynamic, train_full, train_random_dynamic, train_static,
                              train_subset)


@pytest.fixture(scope="module")
def blobs():
    return split(gen_synthetic("gaussian-blobs", 300, 0.5, seed=1), 0.2, seed=0)


def _cfg(**kw):
    base = TrainConfig(ModelSpec.mlp([2, 8, 2]), ScheduleSpec("rollercoaster", 0.5, 0.25, 0.125),
                       epochs=12, batch_size=16, lr=0.05, momentum=0.9, seeds=Seeds(1, 2, 3))
    return base.with_(**kw)


def _same_run(a, b):
    assert np.array_equal(a.theta_T, b.theta_T)
    assert [r.to_dict() for r in a.records] == [r.to_dict() for r in b.records]


def test_correct_loss_examples():
    assert correct_loss(0.6, 0.5) == pytest.approx(1.2)
    assert correct_loss(0.6, 1.0) == 0.6
    with pytest.raises(ValueError):
        correct_loss(0.6, 0.0)


@pytest.mark.parametrize("seed", range(5))
def test_corrected_loss_gradient_is_scaled(seed):
    rng = np.random.default_rng(seed)
    spec = ModelSpec.mlp([3, int(rng.integers(2, 9)), 3], l2=0.01 * seed)
    params = init_model(spec, seed)
    X, y = rng.standard_normal((9, 3)), rng.integers(0, 3, 9)
    r = float(rng.uniform(0.05, 1.0))
    raw = grad_batch(spec, params, X, y)
    corrected = loss_and_grad(spec, params, X, y, scale=1.0 / r)[1]
    assert np.max(np.abs(corrected - raw / r)) <= 1e-12 * np.max(np.abs(raw / r))


@pytest.mark.parametrize("mode", ["ted", "loss", "random"])
def test_zero_prune_is_bit_identical_to_full(blobs, mode):
    train, test = blobs
    cfg = _cfg(mode=mode, schedule=ScheduleSpec("rollercoaster", 0.0, 0.25, 0.125))
    _same_run(train_dynamic(cfg, train, test), train_full(cfg, train, test))


def test_full_run_accounting_and_determinism(blobs):
    train, test = blobs
    a, b = train_full(_cfg(), train, test), train_full(_cfg(), train, test)
    _same_run(a, b)
    assert a.accounting.rfs == a.accounting.tfs == train.n * 12
    assert a.sr == 0.0
    assert len(a.records) == 12


def test_dynamic_accounting_identity_refresh_off(blobs):
    train, test = blobs
    cfg = _cfg()
    res = train_dynamic(cfg, train, test)
    expected = sum(retained_count(keep_ratio(cfg.schedule, t, cfg.epochs), train.n) for t in range(cfg.epochs))
    assert res.accounting.rfs == expected
    assert [r.retained for r in res.records] == [h.size for h in res.retained_history]
    assert res.records[-1].rfs_cum == res.accounting.rfs
    assert all(b.rfs_cum >= a.rfs_cum for a, b in zip(res.records, res.records[1:]))


def test_refresh_is_counted(blobs):
    train, test = blobs
    res = train_dynamic(_cfg(refresh=True), train, test)
    acct = res.accounting
    pruned_sizes = [train.n - h.size for h in res.retained_history[:-1]]
    assert acct.rfs_refresh == sum(pruned_sizes)
    assert acct.rfs_without_refresh == sum(h.size for h in res.retained_history)
    assert res.sr == pytest.approx((acct.tfs - acct.rfs) / acct.tfs)
    assert np.all(res.scores.last_updated == res.config.epochs - 1)


def test_full_periodic_reference_is_counted(blobs):
    train, test = blobs
    res = train_dynamic(_cfg(reference="full-periodic"), train, test)
    assert res.accounting.rfs_refresh == train.n * 12


def test_no_pruned_sample_leaks_into_updates(blobs):
    train, test = blobs
    seen = []

    def audit(t, batch_ids, state):
        assert np.isin(batch_ids, state.retained).all()
        assert not np.isin(batch_ids, state.pruned).any()
        seen.append(t)

    for mode in ("ted", "loss", "random"):
        train_dynamic(_cfg(mode=mode), train, test, on_batch=audit)
    assert seen


def test_ted_retained_are_top_scores(blobs):
    train, test = blobs
    cfg = _cfg(schedule=ScheduleSpec("fixed", 0.5))
    snapshots = []

    def grab(t, params, state):
        snapshots.append(state.retained)

    res = train_dynamic(cfg, train, test, on_epoch=grab)
    assert snapshots[0].size == retained_count(0.5, train.n)
    assert all(h.size == retained_count(0.5, train.n) for h in res.retained_history)


def test_theta_1_is_after_first_epoch(blobs):
    train, test = blobs
    grabbed = {}
    res = train_dynamic(_cfg(), train, test, on_epoch=lambda t, p, s: grabbed.setdefault(t, p.copy()))
    assert np.array_equal(res.theta_1, grabbed[0])
    assert np.array_equal(res.theta_T, grabbed[11])


def test_static_uniform_scores_keep_lowest_ids(blobs):
    train, test = blobs
    frozen = ScoreTable(train.ids, np.ones(train.n), np.zeros(train.n))
    res = train_static(_cfg(), train, test, frozen)
    k = retained_count(0.5, train.n)
    assert all(np.array_equal(h, np.sort(train.ids)[:k]) for h in res.retained_history)
    assert res.scores.last_updated.max() == -1


def test_static_zero_prune_matches_full(blobs):
    train, test = blobs
    cfg = _cfg(schedule=ScheduleSpec("rollercoaster", 0.0))
    frozen = surrogate_scores(cfg, train)
    _same_run(train_static(cfg, train, test, frozen), train_full(cfg, train, test))


def test_static_requires_covering_scores(blobs):
    train, test = blobs
    with pytest.raises(ConfigError):
        train_static(_cfg(), train, test, ScoreTable(train.ids[:5], np.ones(5), np.zeros(5)))
    with pytest.raises(ConfigError):
        train_static(_cfg(), train, test, None)


def test_surrogate_scores_are_recorded(blobs):
    train, _ = blobs
    table = surrogate_scores(_cfg(), train)
    assert np.all(np.isfinite(table.score)) and np.all(table.last_updated == 11)


def test_random_dynamic_retention_frequency():
    data = gen_synthetic("gaussian-blobs", 40, 0.5, seed=0)
    cfg = TrainConfig(ModelSpec.logistic(2, 2), ScheduleSpec("fixed", 0.5), mode="random", epochs=200,
                      batch_size=20, lr=0.05, momentum=0.0)
    res = train_random_dynamic(cfg, data)
    counts = np.zeros(data.n)
    for h in res.retained_history:
        counts[data.positions(h)] += 1
    freq = counts / 200
    assert freq.min() >= 0.4 and freq.max() <= 0.6
    res2 = train_random_dynamic(cfg, data)
    assert all(np.array_equal(a, b) for a, b in zip(res.retained_history, res2.retained_history))


def test_random_dynamic_full_ratio_is_full(blobs):
    train, test = blobs
    cfg = _cfg(schedule=ScheduleSpec("fixed", 0.0))
    _same_run(train_random_dynamic(cfg, train, test), train_full(cfg, train, test))


def test_full_training_smoothed_loss_decreases():
    data = gen_synthetic("gaussian-blobs", 400, 0.15, seed=4)
    cfg = TrainConfig(ModelSpec.logistic(2, 2), epochs=30, batch_size=32, lr=0.1, momentum=0.0)
    losses = np.array([r.full_train_loss for r in train_full(cfg, data).records])
    smooth = np.convolve(losses, np.ones(5) / 5, mode="valid")
    assert np.all(np.diff(smooth) <= 0)


def test_annealing_epochs_use_full_data_without_correction(blobs):
    train, test = blobs
    res = train_dynamic(_cfg(), train, test)
    assert [r.retained for r in res.records[-2:]] == [train.n, train.n]
    assert [r.r_t for r in res.records[-2:]] == [1.0, 1.0]


def test_correction_scales_the_step(blobs):
    train, test = blobs
    cfg = _cfg(epochs=1, momentum=0.0, batch_size=train.n)
    state = PruneState.from_retained(train.ids, train.ids[::2], 0.5)
    theta0 = init_model(cfg.model, cfg.seeds.init)
    on = train_subset(cfg, train, test, state).theta_T - theta0
    off = train_subset(cfg.with_(correction=False), train, test, state).theta_T - theta0
    assert np.allclose(on, off / 0.5, rtol=1e-12, atol=0)


def test_pcc_tracking(blobs):
    train, test = blobs
    res = train_dynamic(_cfg(track_pcc=True), train, test)
    pcc = [r.grad_pcc for r in res.records]
    assert all(-1.0 <= v <= 1.0 for v in pcc)
    assert "grad_pcc" in res.records[0].to_dict()
    assert "grad_pcc" not in train_dynamic(_cfg(), train, test).records[0].to_dict()


def test_divergence_raises_with_record():
    data = gen_synthetic("linear-teacher", 50, 0.1, seed=0)
    spec = ModelSpec.linear(2, 1)
    cfg = TrainConfig(spec, epochs=20, batch_size=10, lr=1e6, momentum=0.0, mode="none")
    with np.errstate(all="ignore"), pytest.raises(DivergenceError) as info:
        train_full(cfg, data)
    assert "epoch" in info.value.record


@pytest.mark.parametrize("kw", [dict(mode="teds"), dict(reference="full"), dict(epochs=0), dict(batch_size=0),
                                dict(lr=0.0), dict(momentum=1.0), dict(alpha=1.0), dict(mode="none")])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        _cfg(**kw)


def test_config_dict_round_trip():
    cfg = _cfg(mode="loss", refresh=True)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.slow
def test_blobs_pruned_accuracy_close_to_full():
    train, test = split(gen_synthetic("gaussian-blobs", 2000, 0.6, seed=0), 0.2, seed=0)
    cfg = TrainConfig(ModelSpec.mlp([2, 16, 2]), ScheduleSpec("rollercoaster", 0.5, 0.25, 0.125),
                      epochs=30, batch_size=32, lr=0.05, momentum=0.9)
    full = train_full(cfg, train, test).final_test_acc
    ted = train_dynamic(cfg, train, test).final_test_acc
    assert abs(ted - full) <= 0.02
