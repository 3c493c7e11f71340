"""Synthetic data-generating processes with known ground truth.

Three families live here:

* a linear-Gaussian structural equation model over latent confounders, three
  short-term outcome waves, and a long-term outcome, with closed-form outcome
  and selection bridges;
* a fully tabular discrete process whose bridges and treatment effect can be
  computed by exact enumeration, used to validate the identification algebra
  at population scale;
* a biased-subsampling injector that manufactures confounding in an
  unconfounded sample by level-dependent retention, balanced so the marginal
  level distribution is preserved.

Latent confounders are quarantined in :class:`LatentLog`; estimators accept
only :class:`~longbridge.data.CombinedSample`, so code that peeks at latents
fails to type-check rather than silently cheating.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Optional, Union

import numpy as np
from scipy import stats
from scipy.special import expit, logit

from longbridge.bridges import (
    LinearOutcomeBridge,
    LoglinearSelectionBridge,
    TableOutcomeBridge,
    TableSelectionBridge,
)
from longbridge.data import CombinedSample, make_rng

# -- linear structural equation model ------------------------------------------------


def _vec(v, name: str) -> np.ndarray:
    out = np.atleast_1d(np.asarray(v, dtype=np.float64))
    if out.ndim != 1:
        raise ValueError(f"{name} must be a vector")
    return out


def _mat(m, name: str) -> np.ndarray:
    out = np.atleast_2d(np.asarray(m, dtype=np.float64))
    if out.ndim != 2:
        raise ValueError(f"{name} must be a matrix")
    return out


@dataclass(frozen=True)
class LinearSemParams:
    """Coefficients of the linear-Gaussian structural equation model.

    The latent confounder U and covariates X are jointly Gaussian with unit
    variances and correlation ``rho_ux`` between same-index pairs. Treatment
    is Bernoulli(``p_treat_e``) in the experimental sample and logistic in
    the observational sample: P(A=1 | U, X) = 1/(1 + exp(kappa0 + kappa1.U +
    kappa2.X)). Wave j then follows
    S_j = tau_j A + alpha_j S_{j-1} + beta_j X + gamma_j U + sigma_j eps, and
    Y = tau_y A + alpha_y.S_3 + beta_y.X + gamma_y.U + sigma_y eps.

    ``x_shift_e`` (mean shift of X in the experimental sample) and
    ``kappa_e`` (X-dependence of experimental treatment) create the
    covariate-shifted design; both default to off. The conditional law of U
    given X never varies across samples.
    """

    tau_y: float
    alpha_y: np.ndarray
    beta_y: np.ndarray
    gamma_y: np.ndarray
    tau1: np.ndarray
    tau2: np.ndarray
    tau3: np.ndarray
    alpha2: np.ndarray
    alpha3: np.ndarray
    beta1: np.ndarray
    beta2: np.ndarray
    beta3: np.ndarray
    gamma1: np.ndarray
    gamma2: np.ndarray
    gamma3: np.ndarray
    sigma1: float = 1.0
    sigma2: float = 1.0
    sigma3: float = 1.0
    sigma_y: float = 1.0
    kappa0: float = 0.0
    kappa1: np.ndarray = field(default_factory=lambda: np.zeros(1))
    kappa2: np.ndarray = field(default_factory=lambda: np.zeros(1))
    rho_ux: float = 0.0
    p_treat_e: float = 0.5
    x_shift_e: Optional[np.ndarray] = None
    kappa_e: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        for name in ("alpha_y", "beta_y", "gamma_y", "tau1", "tau2", "tau3",
                     "kappa1", "kappa2"):
            object.__setattr__(self, name, _vec(getattr(self, name), name))
        for name in ("alpha2", "alpha3", "beta1", "beta2", "beta3",
                     "gamma1", "gamma2", "gamma3"):
            object.__setattr__(self, name, _mat(getattr(self, name), name))
        for name in ("x_shift_e", "kappa_e"):
            val = getattr(self, name)
            if val is not None:
                object.__setattr__(self, name, _vec(val, name))

        d1, d2, d3 = self.tau1.shape[0], self.tau2.shape[0], self.tau3.shape[0]
        du, dx = self.gamma_y.shape[0], self.beta_y.shape[0]
        expected = {
            "alpha_y": (d3,), "alpha2": (d2, d1), "alpha3": (d3, d2),
            "beta1": (d1, dx), "beta2": (d2, dx), "beta3": (d3, dx),
            "gamma1": (d1, du), "gamma2": (d2, du), "gamma3": (d3, du),
            "kappa1": (du,), "kappa2": (dx,),
        }
        for name, shape in expected.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ValueError(f"{name} has shape {got}, expected {shape}")
        for name in ("sigma1", "sigma2", "sigma3", "sigma_y"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not -1.0 <= self.rho_ux <= 1.0:
            raise ValueError("rho_ux must lie in [-1, 1]")
        if not 0.0 < self.p_treat_e < 1.0:
            raise ValueError("p_treat_e must lie in (0, 1)")
        for name in ("x_shift_e", "kappa_e"):
            val = getattr(self, name)
            if val is not None and val.shape != (dx,):
                raise ValueError(f"{name} has shape {val.shape}, expected {(dx,)}")

    @property
    def dims(self) -> tuple[int, int, int, int, int]:
        """(d1, d2, d3, dx, du)."""
        return (self.tau1.shape[0], self.tau2.shape[0], self.tau3.shape[0],
                self.beta_y.shape[0], self.gamma_y.shape[0])

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            val = getattr(self, f.name)
            out[f.name] = val.tolist() if isinstance(val, np.ndarray) else val
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "LinearSemParams":
        return cls(**d)


@dataclass(frozen=True)
class LatentLog:
    """Latent confounder values retained for oracle checks only.

    ``u`` holds the continuous confounder per row. ``levels`` is the integer
    confounder level per row when the process draws discrete latent levels;
    the biased-subsampling injector requires it.
    """

    u: np.ndarray
    levels: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        u = np.atleast_2d(np.asarray(self.u, dtype=np.float64))
        u.setflags(write=False)
        object.__setattr__(self, "u", u)
        if self.levels is not None:
            lv = np.ascontiguousarray(self.levels, dtype=np.intp)
            lv.setflags(write=False)
            if lv.shape[0] != u.shape[0]:
                raise ValueError("levels and u must have the same number of rows")
            object.__setattr__(self, "levels", lv)


def _draw_ux(rng: np.random.Generator, params: LinearSemParams, n: int,
             shift: Optional[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Jointly Gaussian (U, X): unit variances, same-index correlation rho_ux.

    A mean shift moves X only; U given X keeps the unshifted conditional law.
    """
    _, _, _, dx, du = params.dims
    x = rng.normal(size=(n, dx))
    if shift is not None:
        x = x + shift
    u = rng.normal(size=(n, du))
    p = min(du, dx)
    if p and params.rho_ux != 0.0:
        rho = params.rho_ux
        centered = x[:, :p] - (shift[:p] if shift is not None else 0.0)
        u[:, :p] = rho * centered + np.sqrt(1.0 - rho * rho) * u[:, :p]
    return u, x


def _sem_waves(rng: np.random.Generator, params: LinearSemParams, a: np.ndarray,
               x: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n = a.shape[0]
    d1, d2, d3, _, _ = params.dims
    av = a[:, None].astype(np.float64)
    s1 = (av * params.tau1 + x @ params.beta1.T + u @ params.gamma1.T
          + params.sigma1 * rng.normal(size=(n, d1)))
    s2 = (av * params.tau2 + s1 @ params.alpha2.T + x @ params.beta2.T
          + u @ params.gamma2.T + params.sigma2 * rng.normal(size=(n, d2)))
    s3 = (av * params.tau3 + s2 @ params.alpha3.T + x @ params.beta3.T
          + u @ params.gamma3.T + params.sigma3 * rng.normal(size=(n, d3)))
    return s1, s2, s3


def _sem_outcome(rng: np.random.Generator, params: LinearSemParams, a: np.ndarray,
                 s3: np.ndarray, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    return (params.tau_y * a + s3 @ params.alpha_y + x @ params.beta_y
            + u @ params.gamma_y + params.sigma_y * rng.normal(size=a.shape[0]))


def _e_propensity(params: LinearSemParams, x: np.ndarray) -> np.ndarray:
    base = logit(params.p_treat_e)
    if params.kappa_e is None:
        return np.full(x.shape[0], params.p_treat_e)
    return expit(base + x @ params.kappa_e)


def _o_propensity(params: LinearSemParams, u: np.ndarray, x: np.ndarray) -> np.ndarray:
    w = params.kappa0 + u @ params.kappa1 + x @ params.kappa2
    return expit(-w)


def gen_linear_sem(params: LinearSemParams, n_o: int, n_e: int,
                   seed: int) -> tuple[CombinedSample, LatentLog]:
    """Draw a combined sample from the linear structural equation model.

    Experimental rows come first. The long-term outcome is generated only
    for observational rows. Deterministic given ``(params, n_o, n_e, seed)``.
    """
    rng = make_rng(seed)
    u_e, x_e = _draw_ux(rng, params, n_e, params.x_shift_e)
    a_e = (rng.uniform(size=n_e) < _e_propensity(params, x_e)).astype(np.int8)
    s1_e, s2_e, s3_e = _sem_waves(rng, params, a_e, x_e, u_e)

    u_o, x_o = _draw_ux(rng, params, n_o, None)
    a_o = (rng.uniform(size=n_o) < _o_propensity(params, u_o, x_o)).astype(np.int8)
    s1_o, s2_o, s3_o = _sem_waves(rng, params, a_o, x_o, u_o)
    y_o = _sem_outcome(rng, params, a_o, s3_o, x_o, u_o)

    sample = CombinedSample(
        is_e=np.r_[np.ones(n_e, dtype=bool), np.zeros(n_o, dtype=bool)],
        a=np.r_[a_e, a_o],
        x=np.vstack([x_e, x_o]),
        s1=np.vstack([s1_e, s1_o]),
        s2=np.vstack([s2_e, s2_o]),
        s3=np.vstack([s3_e, s3_o]),
        y_o=y_o,
    )
    return sample, LatentLog(u=np.vstack([u_e, u_o]))


def gen_levels_sem(params: LinearSemParams, n_o: int, n_e: int, seed: int,
                   n_levels: int = 4) -> tuple[CombinedSample, LatentLog]:
    """Linear SEM variant with a discrete latent level as the confounder.

    Levels are uniform on {0, .., n_levels-1}; the single latent coordinate
    is the standardized level, so the structural equations are reused
    unchanged. Used by the benchmark harness, where confounding is injected
    afterwards by biased subsampling on the level.
    """
    _, _, _, _, du = params.dims
    if du != 1:
        raise ValueError("discrete-level variant requires a one-dimensional latent")
    if n_levels < 2:
        raise ValueError("need at least 2 levels")
    mean = (n_levels - 1) / 2.0
    sd = np.sqrt((n_levels * n_levels - 1) / 12.0)

    rng = make_rng(seed)
    out_blocks = []
    lv_blocks = []
    for n, is_exp in ((n_e, True), (n_o, False)):
        lv = rng.integers(0, n_levels, size=n)
        u = ((lv - mean) / sd)[:, None]
        x = rng.normal(size=(n, params.beta_y.shape[0]))
        if is_exp:
            a = (rng.uniform(size=n) < _e_propensity(params, x)).astype(np.int8)
        else:
            a = (rng.uniform(size=n) < _o_propensity(params, u, x)).astype(np.int8)
        s1, s2, s3 = _sem_waves(rng, params, a, x, u)
        y = None if is_exp else _sem_outcome(rng, params, a, s3, x, u)
        out_blocks.append((a, x, s1, s2, s3, y, u))
        lv_blocks.append(lv)

    (a_e, x_e, s1_e, s2_e, s3_e, _, u_e), (a_o, x_o, s1_o, s2_o, s3_o, y_o, u_o) = out_blocks
    sample = CombinedSample(
        is_e=np.r_[np.ones(n_e, dtype=bool), np.zeros(n_o, dtype=bool)],
        a=np.r_[a_e, a_o],
        x=np.vstack([x_e, x_o]),
        s1=np.vstack([s1_e, s1_o]),
        s2=np.vstack([s2_e, s2_o]),
        s3=np.vstack([s3_e, s3_o]),
        y_o=y_o,
    )
    latent = LatentLog(u=np.vstack([u_e, u_o]), levels=np.r_[lv_blocks[0], lv_blocks[1]])
    return sample, latent


def linear_sem_true_tau(params: LinearSemParams) -> float:
    """Average treatment effect implied by the structural coefficients.

    Total effect of the treatment on Y through the wave chain:
    delta_1 = tau_1, delta_j = tau_j + alpha_j delta_{j-1},
    tau = tau_y + alpha_y . delta_3.
    """
    d1 = params.tau1
    d2 = params.tau2 + params.alpha2 @ d1
    d3 = params.tau3 + params.alpha3 @ d2
    return float(params.tau_y + params.alpha_y @ d3)


def closed_form_h(params: LinearSemParams) -> LinearOutcomeBridge:
    """Exact linear outcome bridge for the structural equation model.

    Solves gamma_3' w = gamma_y by least norm, then
    theta_3 = w + alpha_y, theta_2 = -alpha_3' w, theta_1 = tau_y - tau_3.w,
    theta_0 = beta_y - beta_3' w. Existence needs gamma_3 with full column
    rank, i.e. the third wave must carry the whole latent signal.
    """
    omega, residual = _lstsq_checked(params.gamma3.T, params.gamma_y)
    if residual > 1e-8 * max(1.0, float(np.linalg.norm(params.gamma_y))):
        raise ValueError(
            "no linear outcome bridge exists: gamma_3 does not span gamma_y "
            "(rank-deficient latent loading)"
        )
    theta3 = omega + params.alpha_y
    theta2 = -params.alpha3.T @ omega
    theta1 = float(params.tau_y - params.tau3 @ omega)
    theta0 = params.beta_y - params.beta3.T @ omega

    _, _, _, dx, _ = params.dims
    row = np.concatenate([theta3, theta2, theta0, [0.0]])
    theta = np.vstack([row, row])
    theta[1, -1] = theta1
    return LinearOutcomeBridge(theta=theta)


def _lstsq_checked(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, float]:
    sol, *_ = np.linalg.lstsq(a, b, rcond=None)
    residual = float(np.max(np.abs(a @ sol - b))) if b.size else 0.0
    return sol, residual


def _gauss_hermite_mean(f, mu: float, var: float, n_nodes: int = 201) -> float:
    """E[f(W)] for W ~ N(mu, var), by Gauss-Hermite quadrature."""
    if var <= 0.0:
        return float(f(np.array([mu]))[0])
    nodes, weights = np.polynomial.hermite_e.hermegauss(n_nodes)
    vals = f(mu + np.sqrt(var) * nodes)
    return float(weights @ vals / np.sqrt(2.0 * np.pi))


def _treated_share_o(params: LinearSemParams) -> float:
    """P(A=1 | G=O): expectation of the logistic propensity over (U, X)."""
    k1, k2 = params.kappa1, params.kappa2
    p = min(k1.shape[0], k2.shape[0])
    var = float(k1 @ k1 + k2 @ k2 + 2.0 * params.rho_ux * (k1[:p] @ k2[:p]))
    return _gauss_hermite_mean(lambda w: expit(-w), params.kappa0, var)


def closed_form_q(params: LinearSemParams, verify: bool = True,
                  verify_draws: int = 200_000) -> LoglinearSelectionBridge:
    """Exact selection bridge for the structural equation model.

    The bridge has the form q_a(s2, s1, x) = c1_a exp(s_a (t2.s2 + t1.s1 +
    t0.x)) + c0_a with s_a = +1 for the treated arm and -1 for control. The
    exponent coefficients solve lambda_4' t1 = kappa1 (least norm), where
    lambda_1..lambda_4 describe the Gaussian conditional law of the first
    wave given the second; the constants come from the Gaussian moment
    generating function and the marginal treated share.

    The sign and constant conventions are fragile, so unless ``verify`` is
    disabled the construction Monte-Carlo-checks its defining property --
    the conditional mean of q over the first two waves must reproduce the
    treatment density ratio pointwise -- and raises if any grid point fails.
    """
    if params.x_shift_e is not None or params.kappa_e is not None:
        raise ValueError(
            "selection bridge requires identically distributed covariates and "
            "covariate-free experimental treatment; use the covariate-shift "
            "estimator for shifted designs"
        )
    d1, _, _, dx, du = params.dims
    a2 = params.alpha2
    s1sq, s2sq = params.sigma1 ** 2, params.sigma2 ** 2
    gram = s1sq * (a2 @ a2.T) + s2sq * np.eye(a2.shape[0])
    lam1 = s1sq * np.linalg.solve(gram, a2).T
    proj = np.eye(d1) - lam1 @ a2
    lam2 = proj @ params.tau1 - lam1 @ params.tau2
    lam3 = proj @ params.beta1 - lam1 @ params.beta2
    lam4 = proj @ params.gamma1 - lam1 @ params.gamma2
    sigma_cond = s1sq * np.eye(d1) - s1sq * lam1 @ a2

    t1, residual = _lstsq_checked(lam4.T, params.kappa1)
    if residual > 1e-8 * max(1.0, float(np.linalg.norm(params.kappa1))):
        raise ValueError(
            "no log-linear selection bridge exists: the first wave's residual "
            "latent loading cannot reproduce the treatment score "
            "(rank-deficient lambda_4)"
        )
    t2 = -lam1.T @ t1
    t0 = params.kappa2 - lam3.T @ t1

    p1 = _treated_share_o(params)
    pbar = np.array([1.0 - p1, p1])
    quad = 0.5 * float(t1 @ sigma_cond @ t1)
    sign = np.array([-1.0, 1.0])
    log_c1 = np.log(pbar) + sign * params.kappa0 - quad - np.array([0.0, float(t1 @ lam2)])

    exponent = np.concatenate([t2, t1, t0])
    bridge = LoglinearSelectionBridge(
        beta=np.vstack([-exponent, exponent]),
        gamma=log_c1,
        c0=pbar.copy(),
    )
    if verify:
        _verify_selection_bridge(params, bridge, pbar, verify_draws)
    return bridge


def _verify_selection_bridge(params: LinearSemParams, bridge: LoglinearSelectionBridge,
                             pbar: np.ndarray, n_draws: int) -> None:
    """Check the bridge's conditional-mean property on a (u, x) grid, both arms."""
    _, _, _, dx, du = params.dims
    rng = make_rng(0x5E1, 0)
    grid = [np.zeros(du + dx)]
    for i in range(du + dx):
        for sgn in (1.0, -1.0):
            point = np.zeros(du + dx)
            point[i] = sgn
            grid.append(point)
    sign = np.array([-1.0, 1.0])
    for point in grid:
        u, x = point[:du], point[du:]
        w = float(params.kappa0 + params.kappa1 @ u + params.kappa2 @ x)
        un = np.broadcast_to(u, (n_draws, du))
        xn = np.broadcast_to(x, (n_draws, dx))
        for arm in (0, 1):
            an = np.full(n_draws, arm, dtype=np.int8)
            s1, s2, _ = _sem_waves(rng, params, an, xn, un)
            q = bridge.evaluate(s2, s1, arm, xn)
            target = pbar[arm] * (1.0 + np.exp(sign[arm] * w))
            gap = abs(float(np.mean(q)) - target)
            tol = 4.0 * float(np.std(q)) / np.sqrt(n_draws) + 1e-9
            if gap > tol:
                raise RuntimeError(
                    f"selection bridge verification failed at arm {arm}, "
                    f"grid point {point}: gap {gap:.3e} exceeds {tol:.3e}; "
                    "sign or constant conventions are violated"
                )


# -- discrete tabular process ---------------------------------------------------------


def _check_rows_sum_to_one(table: np.ndarray, name: str) -> None:
    sums = table.sum(axis=-1)
    if np.max(np.abs(sums - 1.0)) > 1e-12:
        raise ValueError(f"{name} rows must sum to 1")
    if table.min() < 0.0 or table.max() > 1.0:
        raise ValueError(f"{name} entries must lie in [0, 1]")


@dataclass(frozen=True)
class DiscreteDgp:
    """Fully tabular data-generating process over small finite alphabets.

    Axes are ordered (a, u, x, ...) with trailing conditional axes as named:
    ``p_s1[a, u, x, s1]``, ``p_s2[a, u, x, s1, s2]``, ``p_s3[a, u, x, s2,
    s3]``, ``p_y[a, u, x, s2, s3, y]``. The third wave and the outcome do
    not condition on the first wave, which is the conditional independence
    the bridge construction needs, and the outcome tables are shared across
    samples. Values of discrete variables are their level indices.

    Rank adequacy (the wave-versus-latent matrices having well-separated
    columns) is a property of the generator and a precondition of the
    oracles, not of this container: degenerate hand-built tables are legal
    here and fail later with a precise error.
    """

    m_u: int
    m_s: int
    m_x: int
    m_y: int
    p_ux: np.ndarray
    p_a1_o: np.ndarray
    p_s1: np.ndarray
    p_s2: np.ndarray
    p_s3: np.ndarray
    p_y: np.ndarray
    p_a1_e: float = 0.5
    share_e: float = 0.5

    def __post_init__(self) -> None:
        for name in ("p_ux", "p_a1_o", "p_s1", "p_s2", "p_s3", "p_y"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        mu, ms, mx, my = self.m_u, self.m_s, self.m_x, self.m_y
        expected = {
            "p_ux": (mu, mx),
            "p_a1_o": (mu, mx),
            "p_s1": (2, mu, mx, ms),
            "p_s2": (2, mu, mx, ms, ms),
            "p_s3": (2, mu, mx, ms, ms),
            "p_y": (2, mu, mx, ms, ms, my),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if abs(float(self.p_ux.sum()) - 1.0) > 1e-12:
            raise ValueError("p_ux must sum to 1")
        if self.p_ux.min() < 0.0:
            raise ValueError("p_ux entries must be nonnegative")
        for name in ("p_s1", "p_s2", "p_s3", "p_y"):
            _check_rows_sum_to_one(getattr(self, name), name)
        if self.p_a1_o.min() < 0.05 or self.p_a1_o.max() > 0.95:
            raise ValueError("observational propensity must lie in [0.05, 0.95] (overlap)")
        if not 0.0 < self.p_a1_e < 1.0 or not 0.0 < self.share_e < 1.0:
            raise ValueError("p_a1_e and share_e must lie in (0, 1)")

    @property
    def y_values(self) -> np.ndarray:
        return np.arange(self.m_y, dtype=np.float64)

    def min_singular_values(self) -> tuple[float, float]:
        """Worst-case conditioning of the two wave-versus-latent systems.

        Returns the minimum over (s2, a, x) of the smallest singular value
        of P(S3 | s2, a, U, x) and of P(S1 | s2, a, U, x).
        """
        sv3 = min(
            float(np.linalg.svd(self.p_s3[a, :, x, j, :].T, compute_uv=False)[-1])
            for a in range(2) for x in range(self.m_x) for j in range(self.m_s)
        )
        ps1_cond = self._p_s1_given_s2()
        sv1 = min(
            float(np.linalg.svd(ps1_cond[a, :, x, :, j].T, compute_uv=False)[-1])
            for a in range(2) for x in range(self.m_x) for j in range(self.m_s)
        )
        return sv3, sv1

    def _p_s1_given_s2(self) -> np.ndarray:
        """P(S1 = i | S2 = j, a, u, x), axes (a, u, x, i, j)."""
        joint = self.p_s1[..., :, None] * self.p_s2
        marg = joint.sum(axis=3)
        if np.any(marg <= 1e-300):
            raise ValueError("a second-wave level is unreachable; conditional law undefined")
        return joint / marg[..., None, :]

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            val = getattr(self, f.name)
            out[f.name] = val.tolist() if isinstance(val, np.ndarray) else val
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "DiscreteDgp":
        return cls(**d)


def gen_discrete_dgp(m_u: int, m_s: int, m_x: int, m_y: int, confounding_scale: float,
                     seed: int, share_e: float = 0.5) -> DiscreteDgp:
    """Draw a random discrete process whose bridge systems are well conditioned.

    Conditional tables are Dirichlet(1) rows; the observational propensity is
    logistic in a random (u, x) score scaled by ``confounding_scale`` and
    clipped into [0.05, 0.95]. Candidate draws are rejected until both
    wave-versus-latent systems have minimum singular value at least 0.05;
    1000 consecutive rejections abort.
    """
    if min(m_u, m_s, m_x, m_y) < 2:
        raise ValueError("all cardinalities must be at least 2")
    if m_s < m_u:
        raise ValueError(
            f"m_s={m_s} < m_u={m_u}: the wave-versus-latent matrices cannot have "
            "full column rank; increase m_s"
        )
    for attempt in range(1000):
        rng = make_rng(seed, attempt)
        dgp = DiscreteDgp(
            m_u=m_u, m_s=m_s, m_x=m_x, m_y=m_y,
            p_ux=_dirichlet(rng, (m_u * m_x,)).reshape(m_u, m_x),
            p_a1_o=np.clip(expit(confounding_scale * rng.normal(size=(m_u, m_x))),
                           0.05, 0.95),
            p_s1=_dirichlet(rng, (2, m_u, m_x, m_s)),
            p_s2=_dirichlet(rng, (2, m_u, m_x, m_s, m_s)),
            p_s3=_dirichlet(rng, (2, m_u, m_x, m_s, m_s)),
            p_y=_dirichlet(rng, (2, m_u, m_x, m_s, m_s, m_y)),
            share_e=share_e,
        )
        sv3, sv1 = dgp.min_singular_values()
        if min(sv3, sv1) >= 0.05:
            return dgp
    raise RuntimeError(
        "1000 consecutive rank rejections while generating a discrete process; "
        "increase m_s relative to m_u"
    )


def _dirichlet(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    draws = rng.exponential(size=shape)
    return draws / draws.sum(axis=-1, keepdims=True)


def _choice_rows(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    """One categorical draw per row of ``probs``."""
    cum = np.cumsum(probs, axis=1)
    unif = rng.uniform(size=(probs.shape[0], 1))
    idx = (unif > cum).sum(axis=1).astype(np.intp)
    return np.minimum(idx, probs.shape[1] - 1)


def sample_discrete(dgp: DiscreteDgp, n_o: int, n_e: int,
                    seed: int) -> tuple[CombinedSample, LatentLog]:
    """Ancestral sampling from the discrete process; values are level indices."""
    rng = make_rng(seed)
    blocks = []
    for n, is_exp in ((n_e, True), (n_o, False)):
        ux = rng.choice(dgp.m_u * dgp.m_x, size=n, p=dgp.p_ux.ravel())
        u, x = ux // dgp.m_x, ux % dgp.m_x
        p1 = np.full(n, dgp.p_a1_e) if is_exp else dgp.p_a1_o[u, x]
        a = (rng.uniform(size=n) < p1).astype(np.int8)
        s1 = _choice_rows(rng, dgp.p_s1[a, u, x])
        s2 = _choice_rows(rng, dgp.p_s2[a, u, x, s1])
        s3 = _choice_rows(rng, dgp.p_s3[a, u, x, s2])
        y = None if is_exp else dgp.y_values[_choice_rows(rng, dgp.p_y[a, u, x, s2, s3])]
        blocks.append((u, x, a, s1, s2, s3, y))

    (u_e, x_e, a_e, s1_e, s2_e, s3_e, _), (u_o, x_o, a_o, s1_o, s2_o, s3_o, y_o) = blocks
    col = lambda v: np.asarray(v, dtype=np.float64)[:, None]
    sample = CombinedSample(
        is_e=np.r_[np.ones(n_e, dtype=bool), np.zeros(n_o, dtype=bool)],
        a=np.r_[a_e, a_o],
        x=np.vstack([col(x_e), col(x_o)]),
        s1=np.vstack([col(s1_e), col(s1_o)]),
        s2=np.vstack([col(s2_e), col(s2_o)]),
        s3=np.vstack([col(s3_e), col(s3_o)]),
        y_o=y_o,
    )
    levels = np.r_[u_e, u_o]
    return sample, LatentLog(u=levels.astype(np.float64)[:, None], levels=levels)


def _mean_y(dgp: DiscreteDgp) -> np.ndarray:
    """E[Y | s3, s2, a, u, x], axes (a, u, x, s2, s3)."""
    return np.einsum("auxjky,y->auxjk", dgp.p_y, dgp.y_values)


def _wave2_law(dgp: DiscreteDgp) -> np.ndarray:
    """P(S2 = j | a, u, x), axes (a, u, x, j)."""
    return np.einsum("auxi,auxij->auxj", dgp.p_s1, dgp.p_s2)


def discrete_true_tau(dgp: DiscreteDgp) -> float:
    """Exact average long-term effect by full enumeration under intervention."""
    ey = _mean_y(dgp)
    w2 = _wave2_law(dgp)
    mu = np.einsum("ux,auxj,auxjk,auxjk->a", dgp.p_ux, w2, dgp.p_s3, ey)
    return float(mu[1] - mu[0])


def discrete_oracle_h(dgp: DiscreteDgp) -> TableOutcomeBridge:
    """Tabular outcome bridge by least-norm solves, one per (s2, a, x) cell.

    Raises if any cell's linear system leaves a residual above 1e-10, which
    happens exactly when the wave-versus-latent rank condition fails.
    """
    ey = _mean_y(dgp)
    v = np.einsum("auxjk,auxjk->auxj", dgp.p_s3, ey)
    table = np.empty((dgp.m_s, dgp.m_s, 2, dgp.m_x))
    worst = 0.0
    for a in range(2):
        for x in range(dgp.m_x):
            for j in range(dgp.m_s):
                z, residual = _lstsq_checked(dgp.p_s3[a, :, x, j, :], v[a, :, x, j])
                worst = max(worst, residual)
                if residual > 1e-10:
                    raise ValueError(
                        f"no tabular outcome bridge at (s2={j}, a={a}, x={x}): "
                        f"residual {residual:.2e}; rank condition violated"
                    )
                table[:, j, a, x] = z
    check = np.einsum("auxjk,kjax->auxj", dgp.p_s3, table)
    gap = float(np.max(np.abs(check - v)))
    if gap > 1e-9:
        raise ValueError(f"outcome bridge enumeration check failed: gap {gap:.2e}")
    return TableOutcomeBridge(table=table, diagnostics={"max_residual": worst,
                                                        "enumeration_gap": gap})


def _density_ratio(dgp: DiscreteDgp) -> np.ndarray:
    """p(s2, u, x | a, E) / p(s2, u, x | a, O), axes (a, u, x, s2).

    Computed from the full factorization on both sides; the shared wave
    chain cancels analytically but is kept so the code matches the
    definition rather than a simplification of it.
    """
    w2 = _wave2_law(dgp)
    pa_e = np.stack([np.full((dgp.m_u, dgp.m_x), 1.0 - dgp.p_a1_e),
                     np.full((dgp.m_u, dgp.m_x), dgp.p_a1_e)])
    pa_o = np.stack([1.0 - dgp.p_a1_o, dgp.p_a1_o])
    if np.any(pa_o <= 0.0):
        raise ValueError("zero observational propensity cell; density ratio undefined")
    marg_e = np.einsum("ux,aux->a", dgp.p_ux, pa_e)
    marg_o = np.einsum("ux,aux->a", dgp.p_ux, pa_o)
    dens_e = dgp.p_ux[None, :, :, None] * pa_e[..., None] * w2 / marg_e[:, None, None, None]
    dens_o = dgp.p_ux[None, :, :, None] * pa_o[..., None] * w2 / marg_o[:, None, None, None]
    return dens_e / dens_o


def discrete_oracle_q(dgp: DiscreteDgp) -> TableSelectionBridge:
    """Tabular selection bridge by least-norm solves, one per (s2, a, x) cell."""
    ps1_cond = dgp._p_s1_given_s2()
    ratio = _density_ratio(dgp)
    table = np.empty((dgp.m_s, dgp.m_s, 2, dgp.m_x))
    worst = 0.0
    for a in range(2):
        for x in range(dgp.m_x):
            for j in range(dgp.m_s):
                z, residual = _lstsq_checked(ps1_cond[a, :, x, :, j], ratio[a, :, x, j])
                worst = max(worst, residual)
                if residual > 1e-10:
                    raise ValueError(
                        f"no tabular selection bridge at (s2={j}, a={a}, x={x}): "
                        f"residual {residual:.2e}; rank condition violated"
                    )
                table[:, j, a, x] = z
    check = np.einsum("auxij,ijax->auxj", ps1_cond, table)
    gap = float(np.max(np.abs(check - ratio)))
    if gap > 1e-9:
        raise ValueError(f"selection bridge enumeration check failed: gap {gap:.2e}")
    return TableSelectionBridge(table=table, diagnostics={"max_residual": worst,
                                                          "enumeration_gap": gap})


@dataclass(frozen=True)
class IdentificationReport:
    """Population-scale identification values and their double-robustness grid.

    ``tau_dr_*`` entries correspond to deliberately corrupted bridges
    (table -> 1.5 * table + 0.3): the combined strategy must survive either
    single corruption and generically break under both.
    """

    tau_true: float
    tau_out: float
    tau_sel: float
    tau_dr: float
    tau_dr_h_garbled: float
    tau_dr_q_garbled: float
    tau_dr_both_garbled: float

    def gaps(self) -> dict[str, float]:
        return {
            "out": abs(self.tau_out - self.tau_true),
            "sel": abs(self.tau_sel - self.tau_true),
            "dr": abs(self.tau_dr - self.tau_true),
            "dr_h_garbled": abs(self.tau_dr_h_garbled - self.tau_true),
            "dr_q_garbled": abs(self.tau_dr_q_garbled - self.tau_true),
            "dr_both_garbled": abs(self.tau_dr_both_garbled - self.tau_true),
        }


def verify_identification(dgp: DiscreteDgp) -> IdentificationReport:
    """Evaluate all three identification strategies by exact enumeration.

    Uses the oracle bridges, then re-evaluates the combined strategy with
    each bridge table garbled in turn.
    """
    h_tab = discrete_oracle_h(dgp).table
    q_tab = discrete_oracle_q(dgp).table
    ey = _mean_y(dgp)
    w2 = _wave2_law(dgp)
    ps1_cond = dgp._p_s1_given_s2()
    v = np.einsum("auxjk,auxjk->auxj", dgp.p_s3, ey)

    pa_o = np.stack([1.0 - dgp.p_a1_o, dgp.p_a1_o])
    marg_o = np.einsum("ux,aux->a", dgp.p_ux, pa_o)
    pux_cond_o = dgp.p_ux[None] * pa_o / marg_o[:, None, None]

    def mean_h_e(h: np.ndarray) -> np.ndarray:
        return np.einsum("ux,auxj,auxjk,kjax->a", dgp.p_ux, w2, dgp.p_s3, h)

    def mean_q_y_o(q: np.ndarray) -> np.ndarray:
        return np.einsum("aux,auxj,auxij,ijax,auxj->a", pux_cond_o, w2, ps1_cond, q, v)

    def mean_q_resid_o(q: np.ndarray, h: np.ndarray) -> np.ndarray:
        resid = np.einsum("auxjk,auxjk->auxj", dgp.p_s3, ey) - np.einsum(
            "auxjk,kjax->auxj", dgp.p_s3, h)
        return np.einsum("aux,auxj,auxij,ijax,auxj->a", pux_cond_o, w2, ps1_cond, q, resid)

    def dr(h: np.ndarray, q: np.ndarray) -> float:
        terms = mean_h_e(h) + mean_q_resid_o(q, h)
        return float(terms[1] - terms[0])

    garble = lambda t: 1.5 * t + 0.3
    out_terms = mean_h_e(h_tab)
    sel_terms = mean_q_y_o(q_tab)
    return IdentificationReport(
        tau_true=discrete_true_tau(dgp),
        tau_out=float(out_terms[1] - out_terms[0]),
        tau_sel=float(sel_terms[1] - sel_terms[0]),
        tau_dr=dr(h_tab, q_tab),
        tau_dr_h_garbled=dr(garble(h_tab), q_tab),
        tau_dr_q_garbled=dr(h_tab, garble(q_tab)),
        tau_dr_both_garbled=dr(garble(h_tab), garble(q_tab)),
    )


# -- biased subsampling ----------------------------------------------------------------


@dataclass(frozen=True)
class SubsampleConfig:
    """Retention design for injecting level-dependent confounding.

    Control retention decays linearly in the confounder level,
    pi0(u) = max(1 - eta u / L, floor); treated retention is then chosen so
    the combined per-level retention is level-free, which preserves the
    marginal level distribution.
    """

    eta: float
    floor: float = 0.2
    l_max: int = 3
    confounder_index: int = 0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.eta < 0:
            raise ValueError("eta must be nonnegative")
        if not 0.0 < self.floor < 1.0:
            raise ValueError("floor must lie in (0, 1)")
        if self.l_max < 1:
            raise ValueError("l_max must be at least 1")


@dataclass(frozen=True)
class SubsampleResult:
    """Output of :func:`biased_subsample`.

    ``kept`` indexes the input rows; experimental rows are always kept and
    bit-identical in ``sample``. ``clipped`` flags that the balanced treated
    retention left [0.01, 1] and was clipped, in which case the marginal
    level distribution is no longer exactly preserved.
    """

    sample: CombinedSample
    kept: np.ndarray
    pi0: np.ndarray
    pi1: np.ndarray
    clipped: bool
    o_levels_before: np.ndarray
    o_levels_kept: np.ndarray


def _extract_levels(latent: Union[LatentLog, np.ndarray], n: int,
                    cfg: SubsampleConfig) -> np.ndarray:
    if isinstance(latent, LatentLog):
        if latent.levels is None:
            raise ValueError(
                "biased subsampling requires integer confounder levels; this "
                "latent log carries only continuous values"
            )
        levels = latent.levels
    else:
        arr = np.asarray(latent)
        levels = arr[:, cfg.confounder_index] if arr.ndim == 2 else arr
        levels = np.ascontiguousarray(levels, dtype=np.intp)
    if levels.shape[0] != n:
        raise ValueError(f"levels has {levels.shape[0]} entries, expected {n}")
    if levels.min() < 0 or levels.max() > cfg.l_max:
        raise ValueError(f"levels must lie in [0, {cfg.l_max}]")
    return levels


def biased_subsample(sample: CombinedSample, latent: Union[LatentLog, np.ndarray],
                     cfg: SubsampleConfig) -> SubsampleResult:
    """Thin the observational rows with level- and arm-dependent retention.

    Control rows at level u are kept with probability
    pi0(u) = max(1 - eta u / L, floor); treated retention solves the balance
    N0 pi0(u) + N1 pi1(u) = N1 + N0 max(1 - eta, floor) so that per-level
    retention, and hence the level distribution, is unchanged. Treated
    retention outside [0.01, 1] is clipped and flagged. Experimental rows
    pass through untouched; deterministic given ``cfg.seed``.
    """
    levels = _extract_levels(latent, sample.n, cfg)
    grid = np.arange(cfg.l_max + 1)
    pi0 = np.maximum(1.0 - cfg.eta * grid / cfg.l_max, cfg.floor)

    o_mask = ~sample.is_e
    n0 = int(np.count_nonzero(o_mask & (sample.a == 0)))
    n1 = int(np.count_nonzero(o_mask & (sample.a == 1)))
    pi1_raw = 1.0 + (n0 / n1) * (max(1.0 - cfg.eta, cfg.floor) - pi0)
    pi1 = np.clip(pi1_raw, 0.01, 1.0)
    clipped = bool(np.max(np.abs(pi1 - pi1_raw)) > 1e-12)

    keep_prob = np.ones(sample.n)
    lv = levels
    keep_prob[o_mask & (sample.a == 0)] = pi0[lv[o_mask & (sample.a == 0)]]
    keep_prob[o_mask & (sample.a == 1)] = pi1[lv[o_mask & (sample.a == 1)]]
    draws = make_rng(cfg.seed, 0x5B).uniform(size=sample.n)
    kept = sample.is_e | (draws < keep_prob)

    return SubsampleResult(
        sample=sample.take(np.flatnonzero(kept)),
        kept=kept,
        pi0=pi0,
        pi1=pi1,
        clipped=clipped,
        o_levels_before=levels[o_mask],
        o_levels_kept=levels[kept & o_mask],
    )


@dataclass(frozen=True)
class InvarianceReport:
    """Distributional comparison of confounder levels before and after thinning."""

    tv_distance: float
    chi2: float
    dof: int
    p_value: float
    invariance_guaranteed: bool


def check_subsample_invariance(levels_before: np.ndarray, levels_after: np.ndarray,
                               n_levels: Optional[int] = None,
                               clipped: bool = False) -> InvarianceReport:
    """Total-variation and chi-square comparison of empirical level laws.

    ``clipped`` should be the subsample result's flag; when retention was
    clipped the balance equation no longer holds and invariance is only
    approximate, which the report surfaces.
    """
    before = np.asarray(levels_before, dtype=np.intp)
    after = np.asarray(levels_after, dtype=np.intp)
    if n_levels is None:
        n_levels = int(max(before.max(), after.max())) + 1
    cb = np.bincount(before, minlength=n_levels).astype(np.float64)
    ca = np.bincount(after, minlength=n_levels).astype(np.float64)
    pb, pa = cb / cb.sum(), ca / ca.sum()
    tv = 0.5 * float(np.abs(pb - pa).sum())
    expected = pb * ca.sum()
    keep = expected > 0
    chi2, p_value = stats.chisquare(ca[keep], expected[keep])
    return InvarianceReport(
        tv_distance=tv,
        chi2=float(chi2),
        dof=int(keep.sum()) - 1,
        p_value=float(p_value),
        invariance_guaranteed=not clipped,
    )


# -- latent log IO ---------------------------------------------------------------------


def save_latent_csv(latent: LatentLog, path: str) -> None:
    """Write the latent log as CSV with a u_* block and optional level column."""
    du = latent.u.shape[1]
    header = [f"u_{j}" for j in range(1, du + 1)]
    cols: list[np.ndarray] = [latent.u]
    if latent.levels is not None:
        header.append("level")
        cols.append(latent.levels[:, None].astype(np.float64))
    data = np.hstack(cols)
    np.savetxt(path, data, fmt="%.12g", delimiter=",", header=",".join(header), comments="")


def load_latent_csv(path: str) -> LatentLog:
    """Inverse of :func:`save_latent_csv`."""
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if header[-1] == "level":
        return LatentLog(u=data[:, :-1], levels=data[:, -1].astype(np.intp))
    return LatentLog(u=data)
