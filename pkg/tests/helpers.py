"""Shared test constructions.

Two processes recur across the test modules: a scalar-wave linear-Gaussian
process with confounded observational treatment, and a hand-built tabular
process whose waves nearly reveal the latent state. The second exists
because randomly drawn tabular processes routinely have near-singular
conditional cross-moments between instrument and feature cells, which makes
fitted tables unrecoverable at simulation sizes even when the bridge system
itself is square and solvable.
"""

import numpy as np
from scipy.special import expit

from longbridge.synthetic import DiscreteDgp, LinearSemParams


def sem_params(**overrides) -> LinearSemParams:
    """Scalar-wave linear-Gaussian process; keyword overrides replace fields."""
    base = dict(
        tau_y=0.5, alpha_y=0.6, beta_y=0.3, gamma_y=0.8,
        tau1=0.4, tau2=0.3, tau3=0.3,
        alpha2=0.5, alpha3=0.5,
        beta1=0.3, beta2=0.3, beta3=0.3,
        gamma1=0.5, gamma2=0.4, gamma3=0.4,
        sigma1=0.7, sigma2=0.7, sigma3=0.7, sigma_y=0.8,
        kappa0=0.05, kappa1=0.2, kappa2=0.15, rho_ux=0.3,
    )
    base.update(overrides)
    return LinearSemParams(**base)


def benchmark_params(**overrides) -> LinearSemParams:
    """Level-free-treatment variant for subsampling benchmarks.

    All confounding coefficients are zero, so the pool is unconfounded and
    bias enters only through the biased-subsampling injector; this is the
    regime where the injector's invariance guarantee holds exactly.
    """
    base = dict(kappa0=0.0, kappa1=0.0, kappa2=0.0)
    base.update(overrides)
    return sem_params(**base)


def strong_instrument_params(**overrides) -> LinearSemParams:
    """Variant whose first and third waves load heavily on the confounder.

    The heavier loadings push the instrument-feature cross-moment far from
    singular, so per-coefficient recovery tests are meaningful at n = 50000.
    """
    strong = dict(gamma1=1.3, gamma2=0.3, gamma3=1.3,
                  sigma1=0.5, sigma2=0.7, sigma3=0.5,
                  kappa0=0.1, kappa1=0.4, kappa2=0.3)
    strong.update(overrides)
    return sem_params(**strong)


def strong_emission_dgp() -> DiscreteDgp:
    """Tabular process with near-deterministic wave emissions.

    Every per-cell instrument cross-moment stays well conditioned, the
    closed-form bridge tables are bounded, and the treatment effect on the
    observational population is nonzero.
    """
    m_u = m_s = 3
    m_x = 2
    m_y = 3

    def emission(peak: float) -> np.ndarray:
        rows = np.full((m_u, m_s), (1.0 - peak) / (m_s - 1))
        rows[np.arange(m_u), np.arange(m_s)] = peak
        return rows

    e_sharp = emission(0.9)
    e_soft = emission(0.85)
    p_s1 = np.broadcast_to(e_sharp[None, :, None, :], (2, m_u, m_x, m_s)).copy()
    p_s2 = np.broadcast_to(e_soft[None, :, None, None, :],
                           (2, m_u, m_x, m_s, m_s)).copy()
    p_s3 = np.broadcast_to(e_sharp[None, :, None, None, :],
                           (2, m_u, m_x, m_s, m_s)).copy()
    a, u, x, s2, s3, y = np.meshgrid(
        *[np.arange(k) for k in (2, m_u, m_x, m_s, m_s, m_y)], indexing="ij")
    weights = (1.0 + 2.0 * (y == (s2 + s3) % m_y) + 1.0 * (y == u)
               + 0.3 * x * (y == 0) + 1.5 * a * (y == 2))
    p_y = weights / weights.sum(axis=-1, keepdims=True)
    u_grid, x_grid = np.meshgrid(np.arange(m_u), np.arange(m_x), indexing="ij")
    p_a1_o = np.clip(expit(0.8 * (u_grid - 1) + 0.3 * (x_grid - 0.5)), 0.05, 0.95)
    return DiscreteDgp(m_u=m_u, m_s=m_s, m_x=m_x, m_y=m_y,
                       p_ux=np.full((m_u, m_x), 1.0 / (m_u * m_x)),
                       p_a1_o=p_a1_o, p_s1=p_s1, p_s2=p_s2, p_s3=p_s3, p_y=p_y)
