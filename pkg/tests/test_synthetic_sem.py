"""Tests for the linear-Gaussian process and its closed-form bridges.

The closed-form coefficients are checked against values derived by hand
from the structural coefficients, and both bridges are checked against the
properties that define them on large simulated draws: zero outcome-residual
moments against first-wave functions, and transfer of second-sample means
to first-sample means under the selection weights.
"""

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from longbridge.synthetic import (LatentLog, closed_form_h, closed_form_q,
                                  gen_levels_sem, gen_linear_sem,
                                  linear_sem_true_tau, load_latent_csv,
                                  save_latent_csv)

from helpers import sem_params

# Hand derivation for the standard parameters: omega solves 0.4 w = 0.8,
# so w = 2; theta = (w + alpha_y, -alpha3 w, beta_y - beta3 w) = (2.6, -1,
# -0.3) with treated intercept tau_y - tau3 w = -0.1. For the selection
# side, lam1 = 0.4, proj = 0.8, lam2 = 0.2, lam3 = 0.12, lam4 = 0.24,
# so t1 = 0.2 / 0.24 = 5/6, t2 = -lam1 t1 = -1/3, t0 = 0.15 - 0.12 t1 =
# 0.05, and the conditional variance 0.392 gives quad = 0.5 (5/6)^2 0.392.
H_THETA = np.array([[2.6, -1.0, -0.3, 0.0], [2.6, -1.0, -0.3, -0.1]])
Q_EXPONENT = np.array([-1.0 / 3.0, 5.0 / 6.0, 0.05])
Q_QUAD = 0.5 * (5.0 / 6.0) ** 2 * 0.392


def test_true_tau_follows_the_coefficient_chain():
    assert_allclose(linear_sem_true_tau(sem_params()), 0.83, rtol=1e-12)
    assert_allclose(linear_sem_true_tau(sem_params(alpha2=0.8)), 0.866,
                    rtol=1e-12)


def test_outcome_bridge_matches_hand_derived_coefficients():
    bridge = closed_form_h(sem_params())
    assert_allclose(bridge.theta, H_THETA, atol=1e-12)


def test_outcome_bridge_requires_full_latent_loading():
    with pytest.raises(ValueError, match="no linear outcome bridge"):
        closed_form_h(sem_params(gamma3=0.0))


def test_selection_bridge_matches_hand_derived_coefficients():
    bridge = closed_form_q(sem_params())
    assert_allclose(bridge.beta, np.vstack([-Q_EXPONENT, Q_EXPONENT]),
                    atol=1e-12)
    assert_allclose(bridge.c0.sum(), 1.0, rtol=1e-12)
    assert 0.4 < bridge.c0[1] < 0.55
    assert_allclose(bridge.gamma - np.log(bridge.c0),
                    [-0.05 - Q_QUAD, 0.05 - Q_QUAD - 1.0 / 6.0], atol=1e-12)


def test_selection_bridge_requires_latent_reach():
    with pytest.raises(ValueError, match="no log-linear selection bridge"):
        closed_form_q(sem_params(gamma1=0.2, gamma2=0.25, alpha2=0.8))


def test_selection_bridge_rejects_shifted_designs():
    with pytest.raises(ValueError, match="covariate"):
        closed_form_q(sem_params(x_shift_e=[0.5]))
    with pytest.raises(ValueError, match="covariate"):
        closed_form_q(sem_params(kappa_e=[0.3]))


def test_no_selection_gives_a_unit_bridge():
    bridge = closed_form_q(sem_params(kappa0=0.0, kappa1=0.0, kappa2=0.0))
    assert_array_equal(bridge.beta, np.zeros((2, 3)))
    grid = np.linspace(-2.0, 2.0, 5)
    for arm in (0, 1):
        assert_allclose(bridge.evaluate(grid, grid[::-1], arm, grid), 1.0,
                        atol=1e-12)


@pytest.fixture(scope="module")
def big_draw():
    params = sem_params()
    sample, _ = gen_linear_sem(params, n_o=400000, n_e=400000, seed=17)
    return params, sample


def test_outcome_bridge_zeroes_residual_moments(big_draw):
    """E[(Y - h)(g(S2, S1, X)) | A, observational] = 0 for several g."""
    params, s = big_draw
    h = closed_form_h(params)
    o = s.o_indices
    resid = s.y_o - h.evaluate(s.s3[o], s.s2[o], s.a[o], s.x[o])
    for arm in (0, 1):
        m = s.a[o] == arm
        for g in (np.ones(int(m.sum())), s.s1[o][m, 0], s.s2[o][m, 0],
                  s.x[o][m, 0]):
            vals = resid[m] * g
            tol = 4.0 * vals.std() / np.sqrt(vals.size) + 1e-6
            assert abs(vals.mean()) < tol


def test_selection_bridge_transfers_means_across_samples(big_draw):
    """E[q g | A, observational] = E[g | A, experimental] for g(S3, S2, X).

    The transfer only covers functions of the third wave, second wave, and
    covariates; functions involving the first wave are not reweighted.
    """
    params, s = big_draw
    q = closed_form_q(params, verify=False)
    for arm in (0, 1):
        e = s.is_e & (s.a == arm)
        o = (~s.is_e) & (s.a == arm)
        q_o = q.evaluate(s.s2[o], s.s1[o], arm, s.x[o])
        pairs = [(np.ones(int(o.sum())), np.ones(int(e.sum()))),
                 (s.s3[o, 0], s.s3[e, 0]),
                 (s.s2[o, 0], s.s2[e, 0]),
                 (s.x[o, 0], s.x[e, 0]),
                 (s.s3[o, 0] * s.s2[o, 0], s.s3[e, 0] * s.s2[e, 0])]
        for g_o, g_e in pairs:
            lhs = q_o * g_o
            tol = (4.0 * np.sqrt(lhs.var() / lhs.size + g_e.var() / g_e.size)
                   + 1e-6)
            assert abs(lhs.mean() - g_e.mean()) < tol


def test_generator_is_deterministic():
    a, la = gen_linear_sem(sem_params(), n_o=500, n_e=400, seed=9)
    b, lb = gen_linear_sem(sem_params(), n_o=500, n_e=400, seed=9)
    c, _ = gen_linear_sem(sem_params(), n_o=500, n_e=400, seed=10)
    for name in ("is_e", "a", "x", "s1", "s2", "s3", "y_o"):
        assert_array_equal(getattr(a, name), getattr(b, name))
    assert_array_equal(la.u, lb.u)
    assert not np.array_equal(a.s1, c.s1)


def test_generator_layout():
    sample, latent = gen_linear_sem(sem_params(), n_o=300, n_e=200, seed=1)
    assert sample.n == 500 and sample.n_e == 200 and sample.n_o == 300
    assert np.all(sample.is_e[:200]) and not np.any(sample.is_e[200:])
    assert sample.y_o.shape == (300,)
    assert sample.dims == (1, 1, 1, 1)
    assert latent.u.shape == (500, 1)
    assert latent.levels is None


def test_covariate_shift_moves_only_the_covariates():
    params = sem_params(x_shift_e=[1.0])
    sample, latent = gen_linear_sem(params, n_o=200000, n_e=200000, seed=23)
    x_e = sample.x[sample.is_e, 0]
    x_o = sample.x[~sample.is_e, 0]
    u_e = latent.u[: sample.n_e, 0]
    assert abs(x_e.mean() - 1.0) < 0.02
    assert abs(x_o.mean()) < 0.02
    # U given X keeps the unshifted conditional law: U - rho (X - shift)
    # is centered in the shifted sample.
    assert abs((u_e - 0.3 * (x_e - 1.0)).mean()) < 0.02


def test_levels_generator_standardizes_the_levels():
    sample, latent = gen_levels_sem(sem_params(), n_o=1000, n_e=800, seed=3,
                                    n_levels=4)
    assert latent.levels is not None
    assert latent.levels.shape == (1800,)
    assert set(np.unique(latent.levels)) <= {0, 1, 2, 3}
    sd = np.sqrt((16 - 1) / 12.0)
    assert_array_equal(latent.u[:, 0], (latent.levels - 1.5) / sd)
    assert sample.y_o.shape == (1000,)
    again, lat2 = gen_levels_sem(sem_params(), n_o=1000, n_e=800, seed=3,
                                 n_levels=4)
    assert_array_equal(again.s3, sample.s3)
    assert_array_equal(lat2.levels, latent.levels)


def test_levels_generator_preconditions():
    with pytest.raises(ValueError, match="at least 2"):
        gen_levels_sem(sem_params(), n_o=100, n_e=100, seed=0, n_levels=1)
    wide = sem_params(gamma_y=[0.8, 0.1], gamma1=[[0.5, 0.1]],
                      gamma2=[[0.4, 0.1]], gamma3=[[0.4, 0.1]],
                      kappa1=[0.2, 0.1])
    with pytest.raises(ValueError, match="one-dimensional"):
        gen_levels_sem(wide, n_o=100, n_e=100, seed=0)


def test_latent_csv_round_trip(tmp_path):
    with_levels = LatentLog(u=np.array([[0.5], [-1.25], [2.0]]),
                            levels=np.array([0, 2, 1]))
    path = tmp_path / "latent.csv"
    save_latent_csv(with_levels, str(path))
    back = load_latent_csv(str(path))
    assert_allclose(back.u, with_levels.u, rtol=1e-10)
    assert_array_equal(back.levels, with_levels.levels)

    plain = LatentLog(u=np.array([[0.125, -3.5], [0.0, 1.0]]))
    path2 = tmp_path / "latent_plain.csv"
    save_latent_csv(plain, str(path2))
    back2 = load_latent_csv(str(path2))
    assert_allclose(back2.u, plain.u, rtol=1e-10)
    assert back2.levels is None
