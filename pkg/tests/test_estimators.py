"""Tests for the cross-fit effect estimators.

The reduction identities are checked bit-for-bit: the combined route with a
zero selection bridge IS the outcome route, with a zero outcome bridge IS
the selection route, and the selection route with unit weights IS the
naive arm contrast on dyadic data. Statistical accuracy is checked on both
generating processes against their exact effects, and the confounded
baselines are checked to sit in the documented bias ordering.
"""

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from longbridge.bridges import (BasisSpec, constant_outcome_bridge,
                                constant_selection_bridge)
from longbridge.data import CombinedSample, FoldAssignment, split_folds
from longbridge.estimators import (EstimatorConfig, EstimationError,
                                   estimate_all, imputation_baseline,
                                   naive_dim, tau_dr, tau_out, tau_sel)
from longbridge.synthetic import (discrete_true_tau, gen_linear_sem,
                                  linear_sem_true_tau, sample_discrete)

from helpers import sem_params, strong_emission_dgp

TABULAR_CFG = EstimatorConfig(k_folds=5,
                              basis=BasisSpec(kind="indicator", per_arm=True))


@pytest.fixture(scope="module")
def sem_fixture():
    params = sem_params()
    sample, _ = gen_linear_sem(params, n_o=16000, n_e=16000, seed=33)
    return params, sample


def _dyadic_sample() -> tuple[CombinedSample, FoldAssignment]:
    """Integer outcomes in power-of-two cells, so means are exact dyadics."""
    y = np.array([0, 1, 2, 3, 4, 5, 6, 7] * 4, dtype=np.float64)
    a_o = np.array(([0] * 8 + [1] * 8) * 2, dtype=np.int8)
    n_o = 32
    rng = np.random.default_rng(11)
    waves = rng.integers(0, 2, size=(n_o + 4, 3)).astype(np.float64)
    sample = CombinedSample(
        is_e=np.r_[np.ones(4, bool), np.zeros(n_o, bool)],
        a=np.r_[[0, 1, 0, 1], a_o].astype(np.int8),
        x=np.zeros((n_o + 4, 1)),
        s1=waves[:, 0:1], s2=waves[:, 1:2], s3=waves[:, 2:3],
        y_o=y,
    )
    folds = FoldAssignment(n_folds=2, o_fold=np.repeat([0, 1], 16))
    return sample, folds


# -- reduction identities --------------------------------------------------------------


def test_combined_route_with_zero_selection_is_the_outcome_route(sem_fixture):
    _, sample = sem_fixture
    cfg = EstimatorConfig(k_folds=3)
    dr = tau_dr(sample, cfg, q_override=constant_selection_bridge(0.0, 1, 1, 1))
    out = tau_out(sample, cfg)
    assert dr.tau_hat == out.tau_hat
    assert_array_equal(dr.mu_hat, out.mu_hat)


def test_combined_route_with_zero_outcome_is_the_selection_route(sem_fixture):
    _, sample = sem_fixture
    cfg = EstimatorConfig(k_folds=3)
    dr = tau_dr(sample, cfg, h_override=constant_outcome_bridge(0.0, 1, 1, 1))
    sel = tau_sel(sample, cfg)
    assert dr.tau_hat == sel.tau_hat
    assert_array_equal(dr.mu_hat, sel.mu_hat)


def test_selection_route_with_unit_weights_is_the_naive_contrast():
    sample, folds = _dyadic_sample()
    sel = tau_sel(sample, EstimatorConfig(k_folds=2), folds=folds,
                  q_override=constant_selection_bridge(1.0, 1, 1, 1))
    naive = naive_dim(sample)
    assert sel.tau_hat == naive.tau_hat
    assert_array_equal(sel.mu_hat, naive.mu_hat)


def test_single_pass_matches_separate_routes(sem_fixture):
    _, sample = sem_fixture
    cfg = EstimatorConfig(k_folds=4)
    together = estimate_all(sample, cfg)
    apart = {"out": tau_out(sample, cfg), "sel": tau_sel(sample, cfg),
             "dr": tau_dr(sample, cfg)}
    for key, single in apart.items():
        assert together[key].tau_hat == single.tau_hat
        assert_array_equal(together[key].mu_hat, single.mu_hat)
    assert together["dr"].sigma2_hat == apart["dr"].sigma2_hat
    assert together["dr"].ci95 == apart["dr"].ci95


# -- statistical accuracy --------------------------------------------------------------


def test_routes_recover_the_tabular_effect():
    dgp = strong_emission_dgp()
    sample, _ = sample_discrete(dgp, n_o=40000, n_e=40000, seed=21)
    truth = discrete_true_tau(dgp)
    for name, est in estimate_all(sample, TABULAR_CFG).items():
        assert abs(est.tau_hat - truth) < 0.03, name


def test_routes_recover_the_linear_effect(sem_fixture):
    params, sample = sem_fixture
    truth = linear_sem_true_tau(params)
    for name, est in estimate_all(sample, EstimatorConfig(k_folds=5)).items():
        assert abs(est.tau_hat - truth) < 0.08, name


def test_fold_count_choice_barely_moves_the_estimate(sem_fixture):
    params, sample = sem_fixture
    truth = linear_sem_true_tau(params)
    two = tau_dr(sample, EstimatorConfig(k_folds=2))
    five = tau_dr(sample, EstimatorConfig(k_folds=5))
    assert abs(two.tau_hat - five.tau_hat) < 0.04
    assert abs(two.tau_hat - truth) < 0.1
    assert abs(five.tau_hat - truth) < 0.1


def test_baselines_sit_in_the_documented_bias_ordering():
    params = sem_params(kappa0=0.2, kappa1=0.8, kappa2=0.6)
    truth = linear_sem_true_tau(params)
    sample, _ = gen_linear_sem(params, n_o=50000, n_e=50000, seed=13)
    naive_err = abs(naive_dim(sample).tau_hat - truth)
    imput_err = abs(imputation_baseline(sample).tau_hat - truth)
    dr_err = abs(tau_dr(sample, EstimatorConfig(k_folds=5)).tau_hat - truth)
    assert naive_err > 1.0
    assert imput_err < naive_err
    assert dr_err < imput_err
    assert dr_err < 0.15


# -- result metadata -------------------------------------------------------------------


def test_interval_and_variance_fields(sem_fixture):
    _, sample = sem_fixture
    cfg = EstimatorConfig(k_folds=5)
    dr = tau_dr(sample, cfg)
    assert dr.method == "dr"
    assert dr.sigma2_hat > 0
    half = 1.959963984540054 * np.sqrt(dr.sigma2_hat / sample.n)
    assert_allclose(dr.ci95, (dr.tau_hat - half, dr.tau_hat + half),
                    rtol=1e-12)
    assert dr.ci95[0] < dr.tau_hat < dr.ci95[1]
    assert dr.per_fold["out"].shape == (5, 2)
    assert dr.per_fold["res"].shape == (5, 2)

    out = tau_out(sample, cfg)
    sel = tau_sel(sample, cfg)
    assert out.method == "out" and sel.method == "sel"
    assert out.sigma2_hat is None and out.ci95 is None
    assert sel.sigma2_hat is None and sel.ci95 is None
    assert out.n_e == sample.n_e and out.n_o == sample.n_o


def test_estimation_is_deterministic(sem_fixture):
    _, sample = sem_fixture
    cfg = EstimatorConfig(k_folds=3, seed=5)
    first = tau_dr(sample, cfg)
    second = tau_dr(sample, cfg)
    assert first.tau_hat == second.tau_hat
    assert first.sigma2_hat == second.sigma2_hat


def test_naive_contrast_is_the_plain_mean_difference():
    sample, _ = _dyadic_sample()
    naive = naive_dim(sample)
    assert naive.method == "naive"
    assert naive.tau_hat == 0.0
    assert_array_equal(naive.mu_hat, [3.5, 3.5])


def test_imputation_baseline_runs_and_labels_itself(sem_fixture):
    _, sample = sem_fixture
    est = imputation_baseline(sample)
    assert est.method == "imputation"
    assert np.isfinite(est.tau_hat)
    assert np.all(np.isfinite(est.mu_hat))


# -- validation ------------------------------------------------------------------------


def test_config_and_fold_validation(sem_fixture):
    _, sample = sem_fixture
    with pytest.raises(ValueError, match="folds"):
        EstimatorConfig(k_folds=1)
    with pytest.raises(ValueError, match="folds"):
        split_folds(sample, n_folds=sample.n_o + 1, seed=0)
    foreign = FoldAssignment(n_folds=2, o_fold=np.repeat([0, 1], 8))
    with pytest.raises(ValueError, match="fold assignment"):
        tau_out(sample, EstimatorConfig(k_folds=2), folds=foreign)


def test_degenerate_fold_arm_raises():
    sample, _ = _dyadic_sample()
    a_o = sample.a[~sample.is_e]
    folds = FoldAssignment(n_folds=2, o_fold=(a_o == 0).astype(np.intp))
    with pytest.raises(EstimationError, match="holds no observational rows"):
        tau_sel(sample, EstimatorConfig(k_folds=2), folds=folds,
                q_override=constant_selection_bridge(1.0, 1, 1, 1))
