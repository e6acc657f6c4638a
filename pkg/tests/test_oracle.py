from __future__ import annotations

import math

import numpy as np
import pytest

from tedprune.data import Dataset, gen_synthetic, split
from tedprune.model import ModelSpec, init_model, mean_loss
from tedprune.oracle import (ConvergenceError, FitProtocol, fit, grad_pcc, ig_curve, igd_exact,
                             interpolation_landscape, lemma1_check, lemma2_constant, lemma2_residuals,
                             loo_igd, one_step_fidelity, redundant_sample_exact, taylor_fidelity)
from tedprune.schedule import ScheduleSpec
from tedprune.trainer import TrainConfig, train_full

LOGISTIC = ModelSpec.logistic(2, 2, l2=0.01)


def test_least_squares_closed_form_example():
    spec = ModelSpec.linear(1, 1, bias=False)
    data = Dataset([0, 1], [[1.0], [1.0]], [1.0, 0.0], 0)
    rep = igd_exact(spec, data, [1])
    assert rep.loss_at_full_optimum == pytest.approx(0.25, abs=1e-15)
    assert rep.loss_at_pruned_optimum == pytest.approx(0.5, abs=1e-15)
    assert rep.igd == pytest.approx(0.25, abs=1e-15)
    assert rep.igd == rep.loss_at_pruned_optimum - rep.loss_at_full_optimum


def test_empty_subset_has_zero_igd():
    data = gen_synthetic("gaussian-blobs", 12, 0.4, seed=0)
    assert igd_exact(LOGISTIC, data, []).igd == 0.0


def test_identical_samples_have_zero_igd():
    data = Dataset(range(5), [[0.3, -0.2]] * 5, [1] * 5, 2)
    for subset in ([0], [1, 3], [0, 2, 4]):
        assert abs(igd_exact(LOGISTIC, data, subset).igd) <= 1e-12


def test_igd_rejects_whole_dataset():
    data = gen_synthetic("gaussian-blobs", 4, 0.4)
    with pytest.raises(ValueError):
        igd_exact(LOGISTIC, data, data.ids)


def test_fit_reaches_tolerance_and_reports():
    data = gen_synthetic("gaussian-blobs", 30, 0.3, seed=1)
    res = fit(LOGISTIC, data.X, data.y, FitProtocol(tol=1e-8))
    assert res.converged and res.grad_norm <= 1e-8


def test_fit_raises_when_budget_exhausted():
    data = gen_synthetic("gaussian-blobs", 30, 0.3, seed=1)
    with pytest.raises(ConvergenceError):
        fit(LOGISTIC, data.X, data.y, FitProtocol(tol=1e-14, max_iter=1))


def test_fit_mlp_multi_restart_is_non_assertive():
    data = gen_synthetic("two-moons", 20, 0.1, seed=0)
    res = fit(ModelSpec.mlp([2, 3, 2], l2=0.01), data.X, data.y, FitProtocol(tol=1e-6, max_iter=200, restarts=3))
    assert np.isfinite(res.loss)


@pytest.mark.parametrize("seed", range(3))
def test_duplicated_redundant_point_stays_most_redundant(seed):
    # an arbitrary duplicate is usually not the argmin; duplicating the least informative point is
    base = gen_synthetic("gaussian-blobs", 9, 0.5, seed=seed)
    k = int(np.argmin(loo_igd(LOGISTIC, base)))
    data = Dataset(range(10), np.vstack([base.X, base.X[k]]), np.append(base.y, base.y[k]), 2)
    igd = loo_igd(LOGISTIC, data)
    assert redundant_sample_exact(LOGISTIC, data) in (k, 9)
    assert igd[k] == pytest.approx(igd[9], rel=1e-6, abs=1e-14)


def test_two_informative_points():
    data = Dataset([0, 1], [[1.0, 0.0], [-0.5, 0.2]], [1, 0], 2)
    igd = loo_igd(LOGISTIC, data)
    assert np.all(igd > 1e-6)
    assert redundant_sample_exact(LOGISTIC, data) == int(np.argmin(igd))


def test_far_consistent_outlier_is_not_most_redundant():
    data = gen_synthetic("gaussian-blobs", 12, 0.3, seed=5)
    X, y = data.X.copy(), data.y.copy()
    far = 6.0 * (X[y == 1].mean(axis=0) - X[y == 0].mean(axis=0))
    X = np.vstack([X, X[0], X[y == 1].mean(axis=0) + far])
    y = np.append(y, [y[0], 1])
    ext = Dataset(range(14), X, y, 2)
    assert redundant_sample_exact(LOGISTIC, ext) != 13


def test_loo_parallel_matches_serial():
    data = gen_synthetic("gaussian-blobs", 8, 0.4, seed=3)
    assert np.allclose(loo_igd(LOGISTIC, data, workers=2), loo_igd(LOGISTIC, data), rtol=0, atol=1e-14)


def test_subset_enumeration_and_rank_identity():
    data = gen_synthetic("gaussian-blobs", 6, 0.4, seed=0)
    rep = lemma1_check(LOGISTIC, data, 2)
    assert len(rep.rows) == math.comb(6, 2)
    assert rep.rank_identical
    assert rep.argmax_igd in [r["subset"] for r in rep.rows]
    offset = {r["loss_removed"] - r["igd"] for r in rep.rows}
    assert max(offset) - min(offset) <= 1e-15


def test_subset_check_m_zero_vacuous():
    data = gen_synthetic("gaussian-blobs", 6, 0.4, seed=0)
    rep = lemma1_check(LOGISTIC, data, 0)
    assert len(rep.rows) == 1 and rep.agree and rep.rows[0]["igd"] == 0.0


def test_subset_check_reports_agreement_flag():
    # the correspondence is reported, not assumed; see the acceptance suite for its frequency
    data = gen_synthetic("gaussian-blobs", 6, 0.4, seed=1)
    rep = lemma1_check(LOGISTIC, data, 2)
    assert isinstance(rep.agree, bool)
    assert rep.agree == (rep.argmax_igd == rep.argmin_risk)


def test_velocity_constant_is_linear_in_eta():
    traj = np.cumsum(np.random.default_rng(0).standard_normal((20, 4)), axis=0)
    assert np.allclose(lemma2_constant(traj, 0.2), 2 * lemma2_constant(traj, 0.1), rtol=1e-15)


@pytest.mark.parametrize("seed", range(3))
def test_velocity_converged_tail_and_cauchy_schwarz_slack(seed):
    data = gen_synthetic("gaussian-blobs", 30, 0.3, seed=seed)
    tr = lemma2_residuals(LOGISTIC, data, 0, eta=0.1, steps=200)
    assert np.all(np.diff(tr.t) > 0)
    gap = np.abs(tr.velocity - tr.velocity[-1])
    assert gap[-10:].max() <= 1e-3 * gap.max()
    assert np.all(tr.slack_unscaled >= 0)
    assert np.allclose(tr.bound, 0.1 * (tr.slack_unscaled + gap), rtol=1e-12, atol=1e-18)


def test_velocity_eta_scaled_bound_is_reported_not_guaranteed():
    # with C = eta * |dtheta/dt| the bound is eta times Cauchy-Schwarz, which is too tight for eta < 1
    data = gen_synthetic("gaussian-blobs", 30, 0.3, seed=0)
    tr = lemma2_residuals(LOGISTIC, data, 0, eta=0.1, steps=50)
    assert tr.slack.min() < 0
    assert len(tr.rows()) == 51


def test_grad_pcc_examples():
    a = np.array([0.3, -1.2, 2.0, 0.1])
    assert grad_pcc(a, a) == pytest.approx(1.0)
    assert grad_pcc(a, -a) == pytest.approx(-1.0)
    assert grad_pcc([1, -1, 0], [2, -2, 0]) == pytest.approx(1.0)
    b = np.random.default_rng(1).standard_normal(4)
    assert grad_pcc(a, b) == grad_pcc(b, a)
    with pytest.raises(ValueError):
        grad_pcc([1, 1, 1], [1, 2, 3])
    with pytest.raises(ValueError):
        grad_pcc([1, 2], [1, 2, 3])


@pytest.fixture(scope="module")
def small_run():
    train, test = split(gen_synthetic("gaussian-blobs", 200, 0.5, seed=0), 0.2, seed=0)
    cfg = TrainConfig(ModelSpec.mlp([2, 6, 2]), ScheduleSpec("rollercoaster", 0.0), epochs=8,
                      batch_size=16, lr=0.05, momentum=0.9)
    return cfg, train, test


def test_landscape_endpoints_exact(small_run):
    cfg, train, test = small_run
    res = train_full(cfg, train, test)
    rows = interpolation_landscape(cfg.model, res.theta_1, res.theta_T, train, test, 21)
    assert len(rows) == 21
    assert np.allclose([r["alpha"] for r in rows], np.arange(21) * 0.05, rtol=0, atol=1e-15)
    assert rows[0]["train_loss"] == mean_loss(cfg.model, res.theta_1, train.X, train.y)
    assert rows[-1]["train_loss"] == mean_loss(cfg.model, res.theta_T, train.X, train.y)
    with pytest.raises(ValueError):
        interpolation_landscape(cfg.model, res.theta_1, res.theta_T, train, test, 1)


def test_ig_curve_empty_prune_matches_training(small_run):
    cfg, train, test = small_run
    cur = ig_curve(cfg, train, [])
    full = train_full(cfg, train)
    assert cur.full_loss == [r.full_train_loss for r in full.records]
    assert cur.ig == cur.full_loss[-1] - cur.full_loss[0]
    assert all(math.isnan(v) for v in cur.pruned_loss)


def test_ig_curve_random_prune_lowers_pruned_loss(small_run):
    cfg, train, _ = small_run
    pruned = np.random.default_rng(0).choice(train.ids, size=int(0.6 * train.n), replace=False)
    cur = ig_curve(cfg, train, pruned)
    assert cur.pruned_loss[-1] < cur.pruned_loss[0]
    with pytest.raises(ValueError):
        ig_curve(cfg, train, train.ids)


def test_taylor_fidelity_on_separable_blobs():
    data = gen_synthetic("gaussian-blobs", 30, 0.25, seed=0)
    rep = taylor_fidelity(LOGISTIC, data)
    assert not rep.degenerate and rep.spearman >= 0.8
    assert len(rep.rows) == 30


def test_taylor_fidelity_identical_samples_degenerate():
    data = Dataset(range(6), [[0.5, 0.5]] * 6, [0] * 6, 2)
    rep = taylor_fidelity(LOGISTIC, data, batch_size=2)
    assert rep.degenerate and math.isnan(rep.spearman)
    assert all(abs(r["igd_exact"]) <= 1e-12 for r in rep.rows)


def test_taylor_fidelity_duplicates_score_equal():
    base = gen_synthetic("gaussian-blobs", 8, 0.4, seed=1)
    data = Dataset(range(16), np.repeat(base.X, 2, axis=0), np.repeat(base.y, 2), 2)
    scores = np.array([r["ted_score"] for r in taylor_fidelity(LOGISTIC, data, batch_size=4).rows])
    assert np.allclose(scores[0::2], scores[1::2], rtol=1e-9, atol=1e-15)


def test_one_step_fidelity_report():
    data = gen_synthetic("gaussian-blobs", 20, 0.3, seed=0)
    rep = one_step_fidelity(LOGISTIC, data, init_model(LOGISTIC, 0))
    assert rep["spearman_direct"] >= 0.99 and rep["spearman_change"] >= 0.9


@pytest.mark.slow
def test_ted_endpoint_loss_not_above_reverse_on_blobs():
    from dataclasses import replace
    from tedprune import config as C
    from tedprune.trainer import train_dynamic
    exp = C.load("blobs-small")
    train, test = C.load_split(exp)
    fwd, rev = [], []
    for k in range(5):
        cfg = exp.train.with_(seeds=exp.train.seeds.offset(k))
        for reverse, acc in ((False, fwd), (True, rev)):
            res = train_dynamic(cfg.with_(reverse=reverse), train, test)
            rows = interpolation_landscape(cfg.model, res.theta_1, res.theta_T, train, test, 5)
            acc.append(rows[-1]["train_loss"])
    assert np.mean(fwd) <= np.mean(rev)
