"""Method-of-moments fitters for the outcome and selection bridges.

The outcome bridge solves linear instrumental-moment equations in closed
form. The selection bridge's moment is nonlinear in its log-linear
coefficients, so it is fit by damped Gauss-Newton. Both fitters standardize
features and instruments internally (undone on output), apply a ridge term
scaled as ridge_scale / n so its influence vanishes asymptotically, and are
deterministic functions of their inputs.

Instruments come from the sampling side opposite each bridge's arguments:
the outcome bridge (arguments s3, s2, x) is instrumented by (s2, s1, x);
the selection bridge (arguments s2, s1, x) by (s3, s2, x).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy.special import expit

from longbridge.bridges import (
    BasisSpec,
    LinearOutcomeBridge,
    LoglinearSelectionBridge,
    OutcomeBridge,
    SelectionBridge,
    TableOutcomeBridge,
    TableSelectionBridge,
    build_basis,
    infer_levels,
)
from longbridge.data import CombinedSample

logger = logging.getLogger(__name__)

_COND_LIMIT = 1e12
_EXP_LIMIT = 300.0


class EstimationError(RuntimeError):
    """A fit or estimate could not be produced from the given data."""


class GmmFitError(EstimationError):
    """A bridge fit failed; the message states the reason and a remedy."""


@dataclass(frozen=True)
class GmmConfig:
    """Tuning constants shared by both bridge fitters.

    ``ridge_scale`` is the unnormalized ridge weight; the penalty applied is
    ridge_scale / n for the relevant training-arm size, on the internally
    standardized coefficients (intercepts included). ``weighting`` selects
    the moment weight matrix: identity, or a second step with the inverse
    moment covariance from a first identity-weighted pass. Gauss-Newton
    stops on a small damped step (``gn_step_tol``, relative to the
    coefficient norm) or on a stalled objective (``gn_stall_tol``, relative
    decrease per iteration); the latter is the expected exit when the
    log-linear family cannot drive the moment to zero.
    """

    ridge_scale: float = 0.05
    weighting: str = "identity"
    gn_max_iter: int = 200
    gn_step_tol: float = 1e-10
    gn_stall_tol: float = 1e-10
    gn_max_backtracks: int = 40

    def __post_init__(self) -> None:
        if self.ridge_scale < 0:
            raise ValueError("ridge_scale must be nonnegative")
        if self.weighting not in ("identity", "two_step"):
            raise ValueError("weighting must be 'identity' or 'two_step'")
        if self.gn_max_iter < 1 or self.gn_max_backtracks < 1:
            raise ValueError("iteration limits must be positive")


def estimate_arm_group_ratio(sample: CombinedSample,
                             rows: Optional[np.ndarray] = None) -> np.ndarray:
    """Per-arm count ratio n_E(a) / n_O(a), the plug-in for the group odds."""
    rows = _rows_array(sample, rows)
    is_e = sample.is_e[rows]
    a = sample.a[rows]
    out = np.empty(2)
    for arm in (0, 1):
        n_e = int(np.count_nonzero(is_e & (a == arm)))
        n_o = int(np.count_nonzero(~is_e & (a == arm)))
        if n_e == 0 or n_o == 0:
            raise EstimationError(
                f"arm {arm} has an empty group cell (n_e={n_e}, n_o={n_o}); "
                "cannot form the group count ratio"
            )
        out[arm] = n_e / n_o
    return out


# -- shared plumbing -------------------------------------------------------------------


def _rows_array(sample: CombinedSample, rows: Optional[np.ndarray]) -> np.ndarray:
    if rows is None:
        return np.arange(sample.n)
    rows = np.asarray(rows, dtype=np.intp)
    if rows.ndim != 1:
        raise ValueError("rows must be a 1-D index array")
    if rows.size and (rows.min() < 0 or rows.max() >= sample.n):
        raise ValueError("row indices out of range")
    return rows


def _y_by_row(sample: CombinedSample) -> np.ndarray:
    y = np.full(sample.n, np.nan)
    y[sample.o_indices] = sample.y_o
    return y


def _drop_uninformative(instr: np.ndarray, kind: str, protect_tail: int,
                        context: str) -> np.ndarray:
    """Drop uninformative instrument columns.

    Linear kinds drop (with a warning) columns of zero variance, which carry
    no identifying information beyond the intercept; the indicator kind
    drops unobserved cells silently since those are routine. The trailing
    ``protect_tail`` columns (intercept or arm indicators) are always kept.
    """
    if kind == "indicator":
        keep = instr.any(axis=0)
        if not keep.all():
            logger.debug("%s: dropping %d empty instrument cells",
                         context, int((~keep).sum()))
        return instr[:, keep]
    keep = instr.std(axis=0) > 1e-12
    if protect_tail:
        keep[-protect_tail:] = True
    if not keep.all():
        logger.warning("%s: dropping zero-variance instrument columns %s",
                       context, np.flatnonzero(~keep).tolist())
    return instr[:, keep]


def build_instruments(blocks, spec: BasisSpec, levels=None,
                      context: str = "instruments") -> np.ndarray:
    """Instrument matrix for the given blocks, with degenerate columns dropped."""
    protect = 1 if (spec.kind != "indicator" and spec.include_intercept) else 0
    return _drop_uninformative(build_basis(blocks, spec, levels), spec.kind,
                               protect, context)


def _standardize(mat: np.ndarray, stats_rows, skip_tail: int,
                 center: bool) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Center and scale columns by the stats of ``stats_rows``.

    The trailing ``skip_tail`` columns (intercepts, arm indicators) are left
    untouched. Centering is only valid when an intercept-like column can
    absorb the shift, which the caller asserts via ``center``.
    """
    mu = mat[stats_rows].mean(axis=0) if center else np.zeros(mat.shape[1])
    sd = mat[stats_rows].std(axis=0)
    if skip_tail:
        mu[-skip_tail:] = 0.0
        sd[-skip_tail:] = 1.0
    sd = np.where(sd < 1e-12, 1.0, sd)
    return (mat - mu) / sd, mu, sd


def _unstandardize_coefs(coefs: np.ndarray, mu: np.ndarray, sd: np.ndarray,
                         intercept_col: Optional[int]) -> np.ndarray:
    out = coefs / sd
    if intercept_col is not None:
        shift = float(np.delete(out, intercept_col) @ np.delete(mu, intercept_col))
        out = out.copy()
        out[intercept_col] = coefs[intercept_col] - shift
    return out


def _checked_solve(a: np.ndarray, b: np.ndarray, lam: float, context: str) -> np.ndarray:
    if lam == 0.0:
        cond = np.linalg.cond(a)
        if not np.isfinite(cond) or cond > _COND_LIMIT:
            raise GmmFitError(
                f"{context}: normal equations are singular or near-singular "
                f"(condition number {cond:.2e}); increase ridge_scale"
            )
    try:
        sol = np.linalg.solve(a, b)
    except np.linalg.LinAlgError as exc:
        raise GmmFitError(f"{context}: linear solve failed ({exc}); "
                          "increase ridge_scale") from exc
    if not np.all(np.isfinite(sol)):
        raise GmmFitError(f"{context}: non-finite solution; increase ridge_scale")
    return sol


def _order_condition(n_instr: int, n_coef: int, context: str) -> None:
    if n_instr < n_coef:
        raise GmmFitError(
            f"{context}: {n_instr} instruments for {n_coef} coefficients; "
            "the moment system is under-identified"
        )


# -- outcome bridge --------------------------------------------------------------------


def fit_h_linear_gmm(sample: CombinedSample, spec: Optional[BasisSpec] = None,
                     cfg: Optional[GmmConfig] = None,
                     rows: Optional[np.ndarray] = None) -> OutcomeBridge:
    """Fit the outcome bridge on observational rows by linear GMM.

    Moment conditions: instruments built from (s2, s1, x) are orthogonal to
    the residual y - features(s3, s2, x) . theta. Solved in closed form per
    arm, or pooled with a treatment term when the basis is not per-arm.
    Indicator bases produce a tabular bridge.
    """
    spec = spec if spec is not None else BasisSpec()
    cfg = cfg if cfg is not None else GmmConfig()
    rows = _rows_array(sample, rows)
    if rows.size == 0:
        raise GmmFitError("outcome-bridge fitting received no rows")
    if np.any(sample.is_e[rows]):
        raise GmmFitError("outcome-bridge fitting uses observational rows only; "
                          "the row subset contains experimental rows")
    y = _y_by_row(sample)[rows]
    s1, s2, s3, x = sample.s1[rows], sample.s2[rows], sample.s3[rows], sample.x[rows]
    a = sample.a[rows]

    if spec.kind == "indicator":
        if not spec.per_arm:
            raise GmmFitError("indicator basis requires per-arm fitting")
        return _fit_h_indicator(spec, cfg, y, s1, s2, s3, x, a)
    if spec.per_arm:
        return _fit_h_per_arm(spec, cfg, y, s1, s2, s3, x, a)
    return _fit_h_pooled(spec, cfg, y, s1, s2, s3, x, a)


def _solve_linear_gmm(feats: np.ndarray, instr: np.ndarray, y: np.ndarray,
                      lam: float, weighting: str,
                      context: str) -> tuple[np.ndarray, dict]:
    n = y.shape[0]
    m = instr.T @ feats / n
    b = instr.T @ y / n

    def solve(weight: np.ndarray) -> np.ndarray:
        a = m.T @ weight @ m + lam * np.eye(m.shape[1])
        return _checked_solve(a, m.T @ weight @ b, lam, context)

    theta = solve(np.eye(instr.shape[1]))
    if weighting == "two_step":
        scaled = instr * (y - feats @ theta)[:, None]
        theta = solve(np.linalg.pinv(scaled.T @ scaled / n))
    moment = instr.T @ (y - feats @ theta) / n
    diag = {"coef_norm_internal": float(np.linalg.norm(theta)),
            "moment_norm": float(np.linalg.norm(moment)),
            "lambda": lam, "n_rows": n}
    return theta, diag


def _fit_h_per_arm(spec: BasisSpec, cfg: GmmConfig, y, s1, s2, s3, x,
                   a) -> LinearOutcomeBridge:
    thetas = []
    diags: dict = {}
    skip = 1 if spec.include_intercept else 0
    for arm in (0, 1):
        mask = a == arm
        context = f"outcome bridge, arm {arm}"
        if not mask.any():
            raise GmmFitError(f"{context}: no training rows")
        feats = build_basis((s3[mask], s2[mask], x[mask]), spec)
        instr = _drop_uninformative(
            build_basis((s2[mask], s1[mask], x[mask]), spec), spec.kind, skip, context)
        _order_condition(instr.shape[1], feats.shape[1], context)
        feats_std, mu, sd = _standardize(feats, slice(None), skip, center=bool(skip))
        instr_std, _, _ = _standardize(instr, slice(None), skip, center=bool(skip))
        lam = cfg.ridge_scale / int(mask.sum())
        theta_std, diag = _solve_linear_gmm(feats_std, instr_std, y[mask], lam,
                                            cfg.weighting, context)
        icol = feats.shape[1] - 1 if spec.include_intercept else None
        thetas.append(_unstandardize_coefs(theta_std, mu, sd, icol))
        diags[f"arm{arm}"] = diag
    return LinearOutcomeBridge(theta=np.vstack(thetas), basis=spec, diagnostics=diags)


def _fit_h_pooled(spec: BasisSpec, cfg: GmmConfig, y, s1, s2, s3, x,
                  a) -> LinearOutcomeBridge:
    context = "outcome bridge, pooled"
    if not spec.include_intercept:
        raise GmmFitError(f"{context}: pooled fitting requires an intercept")
    if np.unique(a).size < 2:
        raise GmmFitError(f"{context}: both arms must be present")
    noint = replace(spec, include_intercept=False)
    n = y.shape[0]
    acol = a[:, None].astype(np.float64)
    ones = np.ones((n, 1))
    feats = np.hstack([build_basis((s3, s2, x), noint), acol, ones])
    instr = _drop_uninformative(
        np.hstack([build_basis((s2, s1, x), noint), acol, ones]), spec.kind, 2, context)
    _order_condition(instr.shape[1], feats.shape[1], context)
    feats_std, mu, sd = _standardize(feats, slice(None), 1, center=True)
    instr_std, _, _ = _standardize(instr, slice(None), 1, center=True)
    lam = cfg.ridge_scale / n
    theta_std, diag = _solve_linear_gmm(feats_std, instr_std, y, lam,
                                        cfg.weighting, context)
    coefs = _unstandardize_coefs(theta_std, mu, sd, feats.shape[1] - 1)
    slopes, arm_shift, intercept = coefs[:-2], coefs[-2], coefs[-1]
    theta = np.vstack([np.r_[slopes, intercept], np.r_[slopes, intercept + arm_shift]])
    return LinearOutcomeBridge(theta=theta, basis=replace(spec, include_intercept=True),
                               diagnostics={"pooled": diag})


def _scalar_levels(s1, s2, s3, x) -> tuple[int, int, int, int]:
    for block, name in ((s1, "s1"), (s2, "s2"), (s3, "s3"), (x, "x")):
        if block.shape[1] != 1:
            raise GmmFitError(f"indicator basis requires scalar {name}")
    (m1,), (m2,), (m3,), (mx,) = (infer_levels((b,)) for b in (s1, s2, s3, x))
    return m1, m2, m3, mx


def _fit_h_indicator(spec: BasisSpec, cfg: GmmConfig, y, s1, s2, s3, x,
                     a) -> TableOutcomeBridge:
    m1, m2, m3, mx = _scalar_levels(s1, s2, s3, x)
    table = np.zeros((m3, m2, 2, mx))
    diags: dict = {}
    for arm in (0, 1):
        mask = a == arm
        context = f"outcome bridge, arm {arm}"
        if not mask.any():
            raise GmmFitError(f"{context}: no training rows")
        feats_full = build_basis((s3[mask], s2[mask], x[mask]), spec,
                                 levels=(m3, m2, mx))
        kept = feats_full.any(axis=0)
        feats = feats_full[:, kept]
        instr = _drop_uninformative(
            build_basis((s2[mask], s1[mask], x[mask]), spec, levels=(m2, m1, mx)),
            spec.kind, 0, context)
        _order_condition(instr.shape[1], feats.shape[1], context)
        lam = cfg.ridge_scale / int(mask.sum())
        theta, diag = _solve_linear_gmm(feats, instr, y[mask], lam,
                                        cfg.weighting, context)
        flat = np.zeros(m3 * m2 * mx)
        flat[kept] = theta
        table[:, :, arm, :] = flat.reshape(m3, m2, mx)
        diags[f"arm{arm}"] = diag
    return TableOutcomeBridge(table=table, diagnostics=diags)


# -- selection bridge ------------------------------------------------------------------


def fit_q_loglinear_gmm(sample: CombinedSample, spec: Optional[BasisSpec] = None,
                        cfg: Optional[GmmConfig] = None,
                        rows: Optional[np.ndarray] = None,
                        ratios: Optional[np.ndarray] = None) -> SelectionBridge:
    """Fit the selection bridge by Gauss-Newton on its count-ratio moment.

    Training rows span both samples: for each row the moment is
    1{obs} (r_a q(s2, s1, a, x) + 1) - 1 with r_a the per-arm group count
    ratio, made orthogonal to instruments built from (s3, s2, x). Indicator
    bases produce a tabular bridge.
    """
    spec = spec if spec is not None else BasisSpec()
    cfg = cfg if cfg is not None else GmmConfig()
    rows = _rows_array(sample, rows)
    if rows.size == 0:
        raise GmmFitError("selection-bridge fitting received no rows")
    if ratios is None:
        ratios = estimate_arm_group_ratio(sample, rows)
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.shape != (2,) or not np.all(np.isfinite(ratios)) or np.any(ratios <= 0):
        raise GmmFitError("group count ratios must be two positive finite numbers")
    s1, s2, s3, x = sample.s1[rows], sample.s2[rows], sample.s3[rows], sample.x[rows]
    a = sample.a[rows]
    is_o = ~sample.is_e[rows]

    if spec.kind == "indicator":
        if not spec.per_arm:
            raise GmmFitError("indicator basis requires per-arm fitting")
        return _fit_q_indicator(spec, cfg, s1, s2, s3, x, a, is_o, ratios)
    if spec.per_arm:
        return _fit_q_per_arm(spec, cfg, s1, s2, s3, x, a, is_o, ratios)
    return _fit_q_pooled(spec, cfg, s1, s2, s3, x, a, is_o, ratios)


def _gauss_newton_q(z: np.ndarray, instr: np.ndarray, is_o: np.ndarray,
                    r_row: np.ndarray, lam: float, cfg: GmmConfig,
                    context: str) -> tuple[np.ndarray, dict]:
    """Minimize gbar' W gbar + lam |beta|^2 for the selection-bridge moment.

    Starts at beta = 0, where the intercept moment is exactly balanced by
    the count-ratio construction. With two-step weighting, a second pass
    reuses the first solution under the estimated moment covariance.
    """
    n, k = z.shape
    r_o = r_row[is_o]

    def try_moments(beta: np.ndarray) -> Optional[tuple[np.ndarray, np.ndarray]]:
        expo = z @ beta
        if float(np.max(expo, initial=-np.inf)) > _EXP_LIMIT:
            return None
        q = np.exp(expo)
        m = np.where(is_o, r_row * q + 1.0, 0.0) - 1.0
        return q, m

    def run(beta: np.ndarray, weight: np.ndarray) -> tuple[np.ndarray, np.ndarray, dict]:
        cur = try_moments(beta)
        if cur is None:
            raise GmmFitError(f"{context}: exponent overflow at the starting point; "
                              "rescale features")
        q, m = cur
        gbar = instr.T @ m / n
        obj = float(gbar @ weight @ gbar + lam * beta @ beta)
        path = [obj]
        for iteration in range(1, cfg.gn_max_iter + 1):
            jac = (instr[is_o] * (r_o * q[is_o])[:, None]).T @ z[is_o] / n
            grad = jac.T @ weight @ gbar + lam * beta
            step_mat = jac.T @ weight @ jac + lam * np.eye(k)
            delta = -_checked_solve(step_mat, grad, lam, context)
            if np.linalg.norm(delta) <= cfg.gn_step_tol * (1.0 + np.linalg.norm(beta)):
                diag = {"iterations": iteration - 1, "objective": obj,
                        "objective_path": path,
                        "moment_norm": float(np.linalg.norm(gbar)),
                        "grad_norm": float(np.linalg.norm(grad)),
                        "coef_norm_internal": float(np.linalg.norm(beta)),
                        "lambda": lam, "n_rows": n, "converged": True}
                return beta, m, diag
            scale = 1.0
            accepted = None
            for _ in range(cfg.gn_max_backtracks):
                cand = beta + scale * delta
                res = try_moments(cand)
                if res is not None:
                    q_c, m_c = res
                    gbar_c = instr.T @ m_c / n
                    obj_c = float(gbar_c @ weight @ gbar_c + lam * cand @ cand)
                    if np.isfinite(obj_c) and obj_c < obj:
                        accepted = (cand, q_c, m_c, gbar_c, obj_c)
                        break
                scale *= 0.5
            if accepted is None:
                if np.linalg.norm(delta) <= np.sqrt(cfg.gn_step_tol):
                    break
                raise GmmFitError(
                    f"{context}: backtracking cannot decrease the objective "
                    f"(gradient norm {np.linalg.norm(grad):.2e}); the moment "
                    "system may be inconsistent, or needs more ridge"
                )
            obj_prev = obj
            beta, q, m, gbar, obj = accepted
            path.append(obj)
            if np.linalg.norm(scale * delta) <= cfg.gn_step_tol * (1.0 + np.linalg.norm(beta)):
                break
            # Flat ridge-dominated directions can sustain float-epsilon
            # decreases forever; a stalled objective is converged.
            if obj_prev - obj <= cfg.gn_stall_tol * (1.0 + obj_prev):
                break
        else:
            grad = (instr[is_o] * (r_o * q[is_o])[:, None]).T @ z[is_o] / n
            grad = grad.T @ weight @ gbar + lam * beta
            raise GmmFitError(
                f"{context}: Gauss-Newton did not converge within "
                f"{cfg.gn_max_iter} iterations (gradient norm "
                f"{np.linalg.norm(grad):.2e}); increase ridge_scale or rescale "
                "features"
            )
        jac = (instr[is_o] * (r_o * q[is_o])[:, None]).T @ z[is_o] / n
        grad = jac.T @ weight @ gbar + lam * beta
        diag = {"iterations": len(path) - 1, "objective": obj,
                "objective_path": path,
                "moment_norm": float(np.linalg.norm(gbar)),
                "grad_norm": float(np.linalg.norm(grad)),
                "coef_norm_internal": float(np.linalg.norm(beta)),
                "lambda": lam, "n_rows": n, "converged": True}
        return beta, m, diag

    identity = np.eye(instr.shape[1])
    beta, m, diag = run(np.zeros(k), identity)
    if cfg.weighting == "two_step":
        scaled = instr * m[:, None]
        weight = np.linalg.pinv(scaled.T @ scaled / n)
        beta, m, diag = run(beta, weight)
    return beta, diag


def _fit_q_per_arm(spec: BasisSpec, cfg: GmmConfig, s1, s2, s3, x, a, is_o,
                   ratios: np.ndarray) -> LoglinearSelectionBridge:
    skip = 1 if spec.include_intercept else 0
    slopes_rows = []
    gammas = np.zeros(2)
    diags: dict = {}
    for arm in (0, 1):
        mask = a == arm
        context = f"selection bridge, arm {arm}"
        if not (is_o[mask].any() and (~is_o[mask]).any()):
            raise GmmFitError(f"{context}: needs rows from both samples")
        z = build_basis((s2[mask], s1[mask], x[mask]), spec)
        instr = _drop_uninformative(
            build_basis((s3[mask], s2[mask], x[mask]), spec), spec.kind, skip, context)
        _order_condition(instr.shape[1], z.shape[1], context)
        o_local = is_o[mask]
        z_std, mu, sd = _standardize(z, o_local, skip, center=bool(skip))
        instr_std, _, _ = _standardize(instr, slice(None), skip, center=bool(skip))
        lam = cfg.ridge_scale / int(o_local.sum())
        r_row = np.full(z.shape[0], ratios[arm])
        beta_std, diag = _gauss_newton_q(z_std, instr_std, o_local, r_row, lam,
                                         cfg, context)
        icol = z.shape[1] - 1 if spec.include_intercept else None
        coefs = _unstandardize_coefs(beta_std, mu, sd, icol)
        if spec.include_intercept:
            slopes_rows.append(coefs[:-1])
            gammas[arm] = coefs[-1]
        else:
            slopes_rows.append(coefs)
        diags[f"arm{arm}"] = diag
    return LoglinearSelectionBridge(beta=np.vstack(slopes_rows), gamma=gammas,
                                    c0=np.zeros(2), basis=spec, diagnostics=diags)


def _fit_q_pooled(spec: BasisSpec, cfg: GmmConfig, s1, s2, s3, x, a, is_o,
                  ratios: np.ndarray) -> LoglinearSelectionBridge:
    context = "selection bridge, pooled"
    if not spec.include_intercept:
        raise GmmFitError(f"{context}: pooled fitting requires an intercept")
    if np.unique(a).size < 2:
        raise GmmFitError(f"{context}: both arms must be present")
    if not (is_o.any() and (~is_o).any()):
        raise GmmFitError(f"{context}: needs rows from both samples")
    noint = replace(spec, include_intercept=False)
    arm_cols = np.stack([1.0 - a, a.astype(np.float64)], axis=1)
    z = np.hstack([build_basis((s2, s1, x), noint), arm_cols])
    instr = _drop_uninformative(
        np.hstack([build_basis((s3, s2, x), noint), arm_cols]), spec.kind, 2, context)
    _order_condition(instr.shape[1], z.shape[1], context)
    z_std, mu, sd = _standardize(z, is_o, 2, center=True)
    instr_std, _, _ = _standardize(instr, slice(None), 2, center=True)
    lam = cfg.ridge_scale / int(is_o.sum())
    r_row = ratios[a]
    beta_std, diag = _gauss_newton_q(z_std, instr_std, is_o, r_row, lam, cfg, context)
    slopes = beta_std[:-2] / sd[:-2]
    shift = float(slopes @ mu[:-2])
    gammas = beta_std[-2:] - shift
    return LoglinearSelectionBridge(beta=np.vstack([slopes, slopes]), gamma=gammas,
                                    c0=np.zeros(2), basis=spec,
                                    diagnostics={"pooled": diag})


def _fit_q_indicator(spec: BasisSpec, cfg: GmmConfig, s1, s2, s3, x, a, is_o,
                     ratios: np.ndarray) -> TableSelectionBridge:
    """Tabular selection-bridge fit.

    With per-cell values the moment 1{obs} (r_a q + 1) - 1 is linear in the
    table, so it reduces to the closed-form linear solver with pseudo-outcome
    1{exp} and features r_a 1{obs} per cell; no positivity restriction is
    imposed (tabular bridges may legitimately take negative values).
    """
    m1, m2, m3, mx = _scalar_levels(s1, s2, s3, x)
    table = np.ones((m1, m2, 2, mx))
    diags: dict = {}
    for arm in (0, 1):
        mask = a == arm
        context = f"selection bridge, arm {arm}"
        if not (is_o[mask].any() and (~is_o[mask]).any()):
            raise GmmFitError(f"{context}: needs rows from both samples")
        z_full = build_basis((s2[mask], s1[mask], x[mask]), spec, levels=(m2, m1, mx))
        kept = z_full.any(axis=0)
        o_local = is_o[mask]
        feats = z_full[:, kept] * (ratios[arm] * o_local)[:, None]
        instr = _drop_uninformative(
            build_basis((s3[mask], s2[mask], x[mask]), spec, levels=(m3, m2, mx)),
            spec.kind, 0, context)
        _order_condition(instr.shape[1], int(kept.sum()), context)
        lam = cfg.ridge_scale / int(o_local.sum())
        pseudo_y = (~o_local).astype(np.float64)
        cell_q, diag = _solve_linear_gmm(feats, instr, pseudo_y, lam,
                                         cfg.weighting, context)
        flat = np.ones(m2 * m1 * mx)
        flat[kept] = cell_q
        table[:, :, arm, :] = flat.reshape(m2, m1, mx).transpose(1, 0, 2)
        diags[f"arm{arm}"] = diag
    return TableSelectionBridge(table=table, diagnostics=diags)


# -- logistic regression helper ----------------------------------------------------------


def fit_logistic(features: np.ndarray, labels: np.ndarray, ridge: float = 1e-6,
                 max_iter: int = 100, tol: float = 1e-10) -> np.ndarray:
    """Ridge-penalized logistic regression by damped Newton iterations.

    Callers supply the full feature matrix, intercept column included. When
    the fitted coefficient norm exceeds 50 (a separation symptom) the fit is
    retried once with a thousandfold ridge and a warning.
    """
    feats = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if feats.ndim != 2 or y.shape != (feats.shape[0],):
        raise ValueError("features must be (n, k) and labels (n,)")
    n, k = feats.shape

    def penalized_loglik(beta: np.ndarray) -> float:
        p = np.clip(expit(feats @ beta), 1e-12, 1.0 - 1e-12)
        return float(np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p))
                     - 0.5 * ridge_cur * beta @ beta)

    def fit_once() -> np.ndarray:
        beta = np.zeros(k)
        obj = penalized_loglik(beta)
        for _ in range(max_iter):
            p = expit(feats @ beta)
            grad = feats.T @ (y - p) / n - ridge_cur * beta
            hess = (feats * (p * (1.0 - p))[:, None]).T @ feats / n \
                + ridge_cur * np.eye(k)
            step = np.linalg.solve(hess, grad)
            scale = 1.0
            while scale > 1e-8:
                cand = beta + scale * step
                obj_c = penalized_loglik(cand)
                if obj_c >= obj:
                    beta, obj = cand, obj_c
                    break
                scale *= 0.5
            else:
                break
            if np.linalg.norm(scale * step) <= tol * (1.0 + np.linalg.norm(beta)):
                break
        return beta

    ridge_cur = ridge
    beta = fit_once()
    if np.linalg.norm(beta) > 50.0:
        logger.warning("logistic fit looks separated (|beta| = %.1f); retrying "
                       "with ridge %.1e", float(np.linalg.norm(beta)), ridge * 1000)
        ridge_cur = ridge * 1000
        beta = fit_once()
    return beta


def predict_logistic(features: np.ndarray, beta: np.ndarray,
                     clip: tuple[float, float] = (0.01, 0.99)) -> np.ndarray:
    """Clipped logistic predictions; clipping keeps downstream ratios bounded."""
    return np.clip(expit(np.asarray(features) @ beta), clip[0], clip[1])
