"""Shift-robust combined estimator for samples with different covariate laws.

The plain combined route assumes the two samples share their covariate
distribution and that experimental treatment ignores the covariates. When
either fails, its experimental averages target the wrong population. This
module reweights both experimental-side terms by a group-odds ratio in X
and by the experimental propensity, so every average is transported to the
observational covariate law. Estimation is cross-fitted over paired fold
splits of both samples; the variance plugs the three score components into
the asymptotic display, and a population-scale orthogonality check
verifies by exact enumeration that the score is locally insensitive to
every nuisance.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from longbridge.bridges import OutcomeBridge, SelectionBridge
from longbridge.data import CombinedSample, FoldAssignment, make_rng, split_folds
from longbridge.estimators import _Z95, EstimatorConfig, TauEstimate
from longbridge.gmm import EstimationError, fit_h_linear_gmm, fit_logistic, fit_q_loglinear_gmm
from longbridge.synthetic import (
    DiscreteDgp,
    discrete_oracle_h,
    discrete_oracle_q,
    discrete_true_tau,
)

logger = logging.getLogger(__name__)

_CLIP = (0.01, 0.99)
_COND_LIMIT = 1e12


@dataclass(frozen=True)
class NuisanceSet:
    """One fold's trained nuisances.

    ``h`` and ``q`` are the two bridges. ``h_bar_coef`` holds per-arm
    least-squares coefficients of the fitted outcome bridge on (1, X) over
    experimental training rows. ``prop_e_coef`` is the logistic model of
    treatment on (1, X) over experimental training rows, and ``group_coef``
    the logistic model of observational membership on (1, X) over pooled
    training rows; both prediction paths clip probabilities to [0.01,
    0.99], so the derived odds stay finite and positive. ``arm_group_ratio``
    and ``group_ratio`` are experimental-to-observational count ratios from
    the training rows, per arm and overall.
    """

    h: OutcomeBridge
    h_bar_coef: np.ndarray
    q: SelectionBridge
    prop_e_coef: np.ndarray
    group_coef: np.ndarray
    arm_group_ratio: np.ndarray
    group_ratio: float

    def h_bar(self, arm: int, x: np.ndarray) -> np.ndarray:
        return _with_intercept(x) @ self.h_bar_coef[arm]

    def prop_e(self, arm: int, x: np.ndarray) -> np.ndarray:
        p1 = _clipped_probs(_with_intercept(x), self.prop_e_coef)[0]
        return p1 if arm == 1 else 1.0 - p1

    def group_odds(self, x: np.ndarray) -> np.ndarray:
        p_obs = _clipped_probs(_with_intercept(x), self.group_coef)[0]
        return p_obs / (1.0 - p_obs)


@dataclass(frozen=True)
class CovshiftNuisances:
    """Per-fold nuisances with the paired fold assignments that made them."""

    per_fold: tuple[NuisanceSet, ...]
    o_fold: FoldAssignment
    e_fold: np.ndarray
    clip_events: dict = field(default_factory=dict)


@dataclass(frozen=True)
class PhiComponents:
    """Row-level score components, each row scored by its own fold's nuisances.

    ``phi1`` and ``phi3`` have one row per observational unit, ``phi2`` one
    row per experimental unit; columns are the two arms. Rows whose
    treatment differs from the column's arm contribute exact zeros to
    ``phi2`` and ``phi3`` but stay in their sample averages.
    """

    phi1: np.ndarray
    phi2: np.ndarray
    phi3: np.ndarray


def _with_intercept(x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return np.hstack([np.ones((x.shape[0], 1)), x])


def _clipped_probs(feats: np.ndarray, beta: np.ndarray) -> tuple[np.ndarray, int]:
    raw = expit(feats @ beta)
    n_clipped = int(np.count_nonzero((raw < _CLIP[0]) | (raw > _CLIP[1])))
    return np.clip(raw, _CLIP[0], _CLIP[1]), n_clipped


def _ols(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    gram = x.T @ x
    if not np.isfinite(np.linalg.cond(gram)) or np.linalg.cond(gram) > _COND_LIMIT:
        gram = gram + 1e-8 * np.eye(gram.shape[0])
    return np.linalg.solve(gram, x.T @ y)


def split_e_folds(sample: CombinedSample, n_folds: int, seed: int) -> np.ndarray:
    """Fold labels for the experimental rows, mirroring the observational split."""
    if n_folds < 2:
        raise ValueError(f"need at least 2 folds, got {n_folds}")
    n_e = sample.n_e
    if n_folds > n_e:
        raise ValueError(f"cannot split {n_e} experimental rows into {n_folds} folds")
    perm = make_rng(seed, 0x0E).permutation(n_e)
    fold = np.empty(n_e, dtype=np.intp)
    fold[perm] = np.arange(n_e) % n_folds
    return fold


def fit_nuisances(sample: CombinedSample, cfg: Optional[EstimatorConfig] = None,
                  o_folds: Optional[FoldAssignment] = None,
                  e_folds: Optional[np.ndarray] = None) -> CovshiftNuisances:
    """Train every nuisance on out-of-fold rows, for each paired fold.

    Fold k trains the outcome bridge on out-of-fold observational rows and
    the selection bridge on those plus all experimental rows (the selection
    bridge is never evaluated on experimental rows). The X-regressions and
    logistic models exclude fold k of their own sample, so each row is
    scored by models that never saw it.
    """
    cfg = cfg if cfg is not None else EstimatorConfig()
    if o_folds is None:
        o_folds = split_folds(sample, cfg.k_folds, cfg.seed)
    if o_folds.o_fold.shape[0] != sample.n_o:
        raise ValueError("fold assignment does not match the sample's "
                         "observational rows")
    if e_folds is None:
        e_folds = split_e_folds(sample, o_folds.n_folds, cfg.seed)
    e_folds = np.ascontiguousarray(e_folds, dtype=np.intp)
    if e_folds.shape[0] != sample.n_e:
        raise ValueError("fold assignment does not match the sample's "
                         "experimental rows")
    if e_folds.min() < 0 or e_folds.max() >= o_folds.n_folds:
        raise ValueError("experimental fold labels out of range")

    o_idx = sample.o_indices
    e_idx = np.flatnonzero(sample.is_e)
    k_folds = o_folds.n_folds
    sets = []
    clip_prop = 0
    clip_group = 0
    for k in range(k_folds):
        train_o = o_idx[o_folds.o_fold != k]
        train_e = e_idx[e_folds != k]
        h_k = fit_h_linear_gmm(sample, cfg.basis, cfg.gmm, rows=train_o)
        q_k = fit_q_loglinear_gmm(sample, cfg.basis, cfg.gmm,
                                  rows=np.concatenate([e_idx, train_o]))

        a_e = sample.a[train_e]
        x_e = _with_intercept(sample.x[train_e])
        h_on_e = h_k.evaluate(sample.s3[train_e], sample.s2[train_e], a_e,
                              sample.x[train_e])
        h_bar_coef = np.zeros((2, x_e.shape[1]))
        for arm in (0, 1):
            m = a_e == arm
            if not m.any():
                raise EstimationError(
                    f"fold {k} leaves no experimental training rows in arm "
                    f"{arm}; reduce k_folds")
            h_bar_coef[arm] = _ols(x_e[m], h_on_e[m])
        prop_e_coef = fit_logistic(x_e, a_e.astype(np.float64))

        pooled = np.concatenate([train_o, train_e])
        group_feats = _with_intercept(sample.x[pooled])
        group_labels = (~sample.is_e[pooled]).astype(np.float64)
        group_coef = fit_logistic(group_feats, group_labels)

        n_e_arm = np.array([np.count_nonzero(a_e == 0),
                            np.count_nonzero(a_e == 1)], dtype=np.float64)
        a_o = sample.a[train_o]
        n_o_arm = np.array([np.count_nonzero(a_o == 0),
                            np.count_nonzero(a_o == 1)], dtype=np.float64)
        if n_e_arm.min() < 1 or n_o_arm.min() < 1:
            raise EstimationError(
                f"fold {k} leaves an empty treatment arm in a training "
                "sample; reduce k_folds")
        nuis = NuisanceSet(h=h_k, h_bar_coef=h_bar_coef, q=q_k,
                           prop_e_coef=prop_e_coef, group_coef=group_coef,
                           arm_group_ratio=n_e_arm / n_o_arm,
                           group_ratio=float(train_e.size / train_o.size))
        clip_prop += _clipped_probs(x_e, prop_e_coef)[1]
        clip_group += _clipped_probs(group_feats, group_coef)[1]
        sets.append(nuis)
    if clip_prop or clip_group:
        logger.info("probability clipping active: %d propensity and %d "
                    "group-membership training predictions at the bounds",
                    clip_prop, clip_group)
    return CovshiftNuisances(per_fold=tuple(sets), o_fold=o_folds,
                             e_fold=e_folds,
                             clip_events={"prop_e": clip_prop,
                                          "group": clip_group})


def phi_components(sample: CombinedSample, fits: CovshiftNuisances) -> PhiComponents:
    """Score every row with its own fold's nuisances."""
    o_idx = sample.o_indices
    e_idx = np.flatnonzero(sample.is_e)
    phi1 = np.zeros((sample.n_o, 2))
    phi2 = np.zeros((sample.n_e, 2))
    phi3 = np.zeros((sample.n_o, 2))
    for k, nuis in enumerate(fits.per_fold):
        held_o = fits.o_fold.o_fold == k
        held_e = fits.e_fold == k
        rows_o = o_idx[held_o]
        rows_e = e_idx[held_e]

        x_o = sample.x[rows_o]
        a_o = sample.a[rows_o]
        y_o = sample.y_o[held_o]
        h_o = nuis.h.evaluate(sample.s3[rows_o], sample.s2[rows_o], a_o, x_o)
        q_o = nuis.q.evaluate(sample.s2[rows_o], sample.s1[rows_o], a_o, x_o)
        odds_o = nuis.group_odds(x_o)

        x_e = sample.x[rows_e]
        a_e = sample.a[rows_e]
        h_e = nuis.h.evaluate(sample.s3[rows_e], sample.s2[rows_e], a_e, x_e)
        odds_e = nuis.group_odds(x_e)

        for arm in (0, 1):
            phi1[held_o, arm] = nuis.h_bar(arm, x_o)
            on_e = a_e == arm
            phi2[held_e, arm] = np.where(
                on_e,
                nuis.group_ratio * odds_e / nuis.prop_e(arm, x_e)
                * (h_e - nuis.h_bar(arm, x_e)),
                0.0)
            on_o = a_o == arm
            phi3[held_o, arm] = np.where(
                on_o,
                nuis.arm_group_ratio[arm] * odds_o / nuis.prop_e(arm, x_o)
                * q_o * (y_o - h_o),
                0.0)
    return PhiComponents(phi1=phi1, phi2=phi2, phi3=phi3)


def tau_dr_covshift(sample: CombinedSample, cfg: Optional[EstimatorConfig] = None,
                    o_folds: Optional[FoldAssignment] = None,
                    e_folds: Optional[np.ndarray] = None) -> TauEstimate:
    """Shift-robust combined estimate with plug-in variance and interval.

    The estimate is assembled component-first: each score component's arm
    contrast is fold-averaged, and the estimate is the exact float sum of
    the three component contrasts, so the reported decomposition adds up
    bit for bit.
    """
    cfg = cfg if cfg is not None else EstimatorConfig()
    fits = fit_nuisances(sample, cfg, o_folds, e_folds)
    phi = phi_components(sample, fits)
    k_folds = fits.o_fold.n_folds

    fold_means = {"phi1": np.zeros((k_folds, 2)),
                  "phi2": np.zeros((k_folds, 2)),
                  "phi3": np.zeros((k_folds, 2))}
    for k in range(k_folds):
        held_o = fits.o_fold.o_fold == k
        held_e = fits.e_fold == k
        fold_means["phi1"][k] = phi.phi1[held_o].mean(axis=0)
        fold_means["phi2"][k] = phi.phi2[held_e].mean(axis=0)
        fold_means["phi3"][k] = phi.phi3[held_o].mean(axis=0)

    comp = {name: vals.mean(axis=0) for name, vals in fold_means.items()}
    contrasts = {name: float(v[1] - v[0]) for name, v in comp.items()}
    tau = contrasts["phi1"] + contrasts["phi2"] + contrasts["phi3"]
    mu = comp["phi1"] + comp["phi2"] + comp["phi3"]

    lam = sample.n_e / sample.n_o
    d1 = phi.phi1[:, 1] - phi.phi1[:, 0]
    d2 = phi.phi2[:, 1] - phi.phi2[:, 0]
    d3 = phi.phi3[:, 1] - phi.phi3[:, 0]
    sigma2 = ((1.0 + lam) * float(np.mean((d1 - tau) ** 2))
              + (1.0 + lam) / lam * float(np.mean(d2 ** 2))
              + (1.0 + lam) * float(np.mean((d3 - tau) ** 2)))
    half = _Z95 * np.sqrt(sigma2 / sample.n)
    return TauEstimate(
        method="dr_covshift", tau_hat=tau, mu_hat=mu,
        n_e=sample.n_e, n_o=sample.n_o, sigma2_hat=sigma2,
        ci95=(tau - half, tau + half),
        per_fold=fold_means,
        diagnostics={"component_contrasts": contrasts,
                     "clip_events": fits.clip_events,
                     "arm_group_ratio": np.stack(
                         [n.arm_group_ratio for n in fits.per_fold]),
                     "group_ratio": np.array(
                         [n.group_ratio for n in fits.per_fold])},
    )


# -- population-scale orthogonality check ----------------------------------------------


@dataclass(frozen=True)
class OrthogonalityReport:
    """Numeric pathwise derivatives of the score map at the exact nuisances.

    ``derivatives`` maps each nuisance name to the Richardson-extrapolated
    central-difference derivative of the full three-component map along a
    seeded random direction; all must vanish. ``contrast_derivative`` is
    the same derivative of the first component alone with respect to the
    X-regression nuisance, which is NOT orthogonal and must be visibly
    nonzero; it certifies that the probe can detect sensitivity.
    ``value_at_truth`` is the map at the unperturbed nuisances and equals
    the true effect.
    """

    derivatives: dict
    contrast_derivative: float
    value_at_truth: float
    tau_true: float
    t_grid: tuple


@dataclass(frozen=True)
class _Enumeration:
    """Exact joint laws of one tabular process, for population averages."""

    p_o: np.ndarray
    p_e: np.ndarray
    ey: np.ndarray
    p_x_o: np.ndarray
    p_ux: np.ndarray
    share_e: float
    p_a1_e: float
    p_a_o_marg: np.ndarray


def _enumerate(dgp: DiscreteDgp) -> _Enumeration:
    # joint over (a, u, x, s1, s2, s3) for each sample
    chain = np.einsum("auxi,auxij,auxjk->auxijk", dgp.p_s1, dgp.p_s2, dgp.p_s3)
    pa_o = np.stack([1.0 - dgp.p_a1_o, dgp.p_a1_o])
    pa_e = np.array([1.0 - dgp.p_a1_e, dgp.p_a1_e])
    p_o = np.einsum("ux,aux,auxijk->auxijk", dgp.p_ux, pa_o, chain)
    p_e = np.einsum("ux,a,auxijk->auxijk", dgp.p_ux, pa_e, chain)
    ey = np.einsum("auxjky,y->auxjk", dgp.p_y, dgp.y_values)
    return _Enumeration(
        p_o=p_o, p_e=p_e, ey=ey,
        p_x_o=p_o.sum(axis=(0, 1, 3, 4, 5)),
        p_ux=dgp.p_ux, share_e=dgp.share_e, p_a1_e=dgp.p_a1_e,
        p_a_o_marg=p_o.sum(axis=(1, 2, 3, 4, 5)),
    )


def _oracle_nuisances(dgp: DiscreteDgp, enum: _Enumeration) -> dict:
    h_tab = discrete_oracle_h(dgp).table          # (s3, s2, a, x)
    q_tab = discrete_oracle_q(dgp).table          # (s1, s2, a, x)
    p_u_given_x = enum.p_ux / enum.p_ux.sum(axis=0, keepdims=True)
    chain = np.einsum("auxi,auxij,auxjk->auxjk", dgp.p_s1, dgp.p_s2, dgp.p_s3)
    h_bar = np.einsum("ux,auxjk,kjax->ax", p_u_given_x, chain, h_tab)
    pa_e = np.array([1.0 - dgp.p_a1_e, dgp.p_a1_e])
    eta6 = (enum.share_e * pa_e) / ((1.0 - enum.share_e) * enum.p_a_o_marg)
    eta5 = np.full(dgp.m_x, (1.0 - enum.share_e) / enum.share_e)
    prop = np.full(dgp.m_x, dgp.p_a1_e)
    eta7 = enum.share_e / (1.0 - enum.share_e)
    return {"h": h_tab, "h_bar": h_bar, "q": q_tab, "prop": prop,
            "odds": eta5, "arm_ratio": eta6, "ratio": eta7}


def _phi_map(dgp: DiscreteDgp, enum: _Enumeration, nu: dict,
             first_component_only: bool = False) -> float:
    """Exact population value of the score map at an arbitrary nuisance tuple."""
    ms, mx = dgp.m_s, dgp.m_x
    idx = np.indices((2, dgp.m_u, mx, ms, ms, ms))
    a_, _, x_, s1_, s2_, s3_ = idx
    h_rows = nu["h"][s3_, s2_, a_, x_]
    q_rows = nu["q"][s1_, s2_, a_, x_]
    h_bar_rows = nu["h_bar"][a_, x_]
    prop_rows = np.where(a_ == 1, nu["prop"][x_], 1.0 - nu["prop"][x_])
    odds_rows = nu["odds"][x_]
    ey_rows = enum.ey[a_, idx[1], x_, s2_, s3_]

    total = 0.0
    for arm in (0, 1):
        sign = 1.0 if arm == 1 else -1.0
        phi1 = float(enum.p_x_o @ nu["h_bar"][arm])
        if first_component_only:
            total += sign * phi1
            continue
        on = a_ == arm
        w_e = nu["ratio"] * odds_rows / prop_rows
        phi2 = float(np.sum(enum.p_e * on * w_e * (h_rows - h_bar_rows)))
        w_o = nu["arm_ratio"][arm] * odds_rows / prop_rows
        phi3 = float(np.sum(enum.p_o * on * w_o * q_rows * (ey_rows - h_rows)))
        total += sign * (phi1 + phi2 + phi3)
    return total


def orthogonality_check(dgp: DiscreteDgp, direction_seed: int = 0,
                        t_grid: Sequence[float] = (0.025, 0.05),
                        direction_scale: float = 0.1) -> OrthogonalityReport:
    """Probe the score map's local sensitivity to each nuisance, exactly.

    All averages are computed by enumerating the process, so the only error
    in each reported derivative is the O(t^4) truncation of the Richardson
    scheme; at the exact nuisances every derivative must vanish while the
    non-orthogonal single-component contrast stays visibly nonzero.
    """
    t_grid = tuple(float(t) for t in t_grid)
    if len(t_grid) != 2 or not np.isclose(t_grid[1], 2.0 * t_grid[0]):
        raise ValueError("t_grid must be (t, 2t) for Richardson extrapolation")
    enum = _enumerate(dgp)
    truth = _oracle_nuisances(dgp, enum)
    rng = make_rng(direction_seed, 0xD1)
    directions = {
        "h": direction_scale * rng.normal(size=truth["h"].shape),
        "h_bar": direction_scale * rng.normal(size=truth["h_bar"].shape),
        "q": direction_scale * rng.normal(size=truth["q"].shape),
        "prop": direction_scale * 0.2 * rng.normal(size=truth["prop"].shape),
        "odds": direction_scale * rng.normal(size=truth["odds"].shape),
        "arm_ratio": direction_scale * rng.normal(size=(2,)),
        "ratio": direction_scale * float(rng.normal()),
    }

    def value(name: Optional[str], t: float, first_only: bool = False) -> float:
        nu = dict(truth)
        if name is not None:
            nu[name] = truth[name] + t * directions[name]
        return _phi_map(dgp, enum, nu, first_component_only=first_only)

    def derivative(name: str, first_only: bool = False) -> float:
        t1, t2 = t_grid
        d1 = (value(name, t1, first_only) - value(name, -t1, first_only)) / (2 * t1)
        d2 = (value(name, t2, first_only) - value(name, -t2, first_only)) / (2 * t2)
        return (4.0 * d1 - d2) / 3.0

    derivs = {name: derivative(name) for name in directions}
    # deterministic direction for the contrast so its derivative cannot
    # vanish by chance: shift the two arms of the X-regression apart
    directions["h_bar"] = direction_scale * np.array(
        [[-1.0] * dgp.m_x, [1.0] * dgp.m_x])
    contrast = derivative("h_bar", first_only=True)
    return OrthogonalityReport(
        derivatives=derivs,
        contrast_derivative=contrast,
        value_at_truth=value(None, 0.0),
        tau_true=discrete_true_tau(dgp),
        t_grid=t_grid,
    )
