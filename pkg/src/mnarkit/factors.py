"""Latent factor estimation by inverse-probability-weighted least squares.

The latent sample factors are recovered in two pieces. The part orthogonal
to the design, ``c_perp``, minimizes the weighted reconstruction loss

    sum_g sum_i w_gi * (y_gi - b_g' x_i - l_g' c_perp_i)^2,   X' c_perp = 0,

by block coordinate descent: given ``c_perp``, each metabolite solves a
weighted regression on [X, c_perp] in closed form; given the loadings,
each sample's factor row solves a K x K weighted system, after which
``c_perp`` is re-orthogonalized against X and orthonormalized. Weights are
1/psi at observed cells and 0 at missing cells, so the objective uses only
observed data while remaining unbiased for the complete-data loss.

The design-aligned part is the regression of the fitted design
coefficients on the loadings (``omega``); iteratively dropping metabolites
whose interest coefficients test nonzero removes signal leakage into
omega. The full factor matrix used downstream is

    c_hat = sqrt(n) * c_perp + X @ omega,

scaled so loadings and factor entries are both O(1); every downstream
statistic is invariant to this scale and to rotations of ``c_perp``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray
from scipy import stats

from .abundance import benjamini_hochberg
from .data import DesignMatrix, MetabolitePartition, ObservedMatrix
from .mechanism import MechanismEstimate
from .selection import SelectionCdf, psi

__all__ = [
    "WeightMatrix",
    "FactorConfig",
    "FactorEstimate",
    "OmegaResult",
    "compute_weights",
    "init_subspace",
    "fit_factors",
    "estimate_omega",
    "assemble_factor_matrix",
    "test_confounding",
    "select_k",
]


@dataclass
class WeightMatrix:
    """Inverse-probability weights, zero exactly at missing cells.

    Rows for discarded metabolites are all zero and excluded via
    ``rows_used``. Complete-class rows carry weight 1 at observed cells.
    """

    w: NDArray[np.float64]
    rows_used: NDArray[np.intp]
    n_clamped: int = 0

    def __post_init__(self) -> None:
        self.w = np.asarray(self.w, dtype=np.float64)
        if (self.w < 0).any():
            raise ValueError("weights must be nonnegative")


@dataclass
class FactorConfig:
    max_weight: float = 50.0
    tol: float = 1e-8
    max_iter: int = 200
    refine_iters: int = 3
    q_thresh: float = 0.1
    n_perm: int = 19


@dataclass
class FactorEstimate:
    """Fitted factor basis, loadings, and design coefficients.

    ``c_perp`` has orthonormal columns orthogonal to the design.
    ``loadings`` are stored in the sqrt(n) convention (paired with
    ``sqrt(n) * c_perp``), so reconstructed fits are
    ``coefs @ x_i + loadings @ c_hat_i``. ``omega`` and ``c_hat`` are
    attached after the confounder regression step.
    """

    c_perp: NDArray[np.float64]
    loadings: NDArray[np.float64]
    coefs: NDArray[np.float64]
    rows_used: NDArray[np.intp]
    k: int
    n_iter: int
    converged: bool
    objective_trace: list[float] = field(default_factory=list)
    dropped_rows: list[int] = field(default_factory=list)
    scale: str = "sqrt_n"
    omega: NDArray[np.float64] | None = None
    c_hat: NDArray[np.float64] | None = None

    def check_orthogonality(self, x: DesignMatrix, tol: float = 1e-8) -> None:
        gram = self.c_perp.T @ self.c_perp
        if np.max(np.abs(gram - np.eye(self.k))) > tol:
            raise ValueError("c_perp columns are not orthonormal")
        if np.max(np.abs(x.x.T @ self.c_perp)) > tol * np.sqrt(x.n_samples):
            raise ValueError("c_perp is not orthogonal to the design")


@dataclass
class OmegaResult:
    """Design-on-loadings regression with refinement bookkeeping."""

    omega: NDArray[np.float64]
    included: NDArray[np.bool_]
    n_dropped_per_round: list[int]
    reverted: bool = False


def compute_weights(
    m: ObservedMatrix,
    part: MetabolitePartition,
    mech: MechanismEstimate,
    cdf: SelectionCdf | None = None,
    max_weight: float = 50.0,
) -> WeightMatrix:
    """Per-cell weights: 1 for complete rows, 1/psi for missing-class rows.

    Weights above ``max_weight`` are clamped and counted rather than
    silently propagated; a huge weight signals selection-parameter error,
    not a sample that should dominate the fit.
    """
    cdf = cdf or mech.cdf
    w = np.zeros_like(m.y, dtype=np.float64)
    w[part.complete] = m.mask[part.complete].astype(np.float64)
    n_clamped = 0
    for g in part.missing:
        met = m.metabolite_ids[g]
        if met not in mech:
            raise ValueError(f"no mechanism estimate for metabolite {met!r}")
        alpha, delta = mech.lookup(met)
        obs = m.mask[g]
        probs = np.atleast_1d(psi(cdf, alpha * (m.y[g, obs] - delta), 0))
        row = np.zeros(m.n_samples)
        vals = 1.0 / np.maximum(probs, 1.0 / max_weight / 10.0)
        over = vals > max_weight
        n_clamped += int(over.sum())
        row[obs] = np.minimum(vals, max_weight)
        w[g] = row
    return WeightMatrix(w=w, rows_used=part.kept(), n_clamped=n_clamped)


def _fix_signs(q: NDArray) -> NDArray:
    """Deterministic column signs: largest-magnitude entry positive."""
    idx = np.argmax(np.abs(q), axis=0)
    signs = np.sign(q[idx, np.arange(q.shape[1])])
    signs[signs == 0] = 1.0
    return q * signs


def _orthonormalize_against(x: DesignMatrix, c: NDArray) -> NDArray:
    c = x.project_out(c)
    q, r = np.linalg.qr(c)
    if np.min(np.abs(np.diag(r))) < 1e-12 * max(1.0, np.max(np.abs(np.diag(r)))):
        raise np.linalg.LinAlgError("factor basis collapsed during orthonormalization")
    return _fix_signs(q)


def init_subspace(
    m: ObservedMatrix,
    part: MetabolitePartition,
    x: DesignMatrix,
    k: int,
) -> NDArray[np.float64]:
    """Leading right singular vectors of the design-residualized complete block."""
    if len(part.complete) < k:
        raise ValueError(
            f"need at least k={k} complete metabolites, have {len(part.complete)}"
        )
    block = m.y[part.complete]
    if np.isnan(block).any():
        row_means = np.nanmean(block, axis=1, keepdims=True)
        block = np.where(np.isnan(block), row_means, block)
    resid = x.project_out(block.T).T
    _, sv, vt = np.linalg.svd(resid, full_matrices=False)
    if k > 0 and (len(sv) < k or sv[k - 1] <= 1e-10 * sv[0]):
        raise ValueError(
            f"complete block has rank below k={k} after removing the design; "
            "try a smaller k"
        )
    return _orthonormalize_against(x, vt[:k].T)


def _weighted_metabolite_fits(
    y0: NDArray, w: NDArray, z: NDArray
) -> tuple[NDArray, NDArray]:
    """Batched per-metabolite weighted regressions of y on z.

    Returns (theta, singular) where theta is (p, q) and singular marks
    rows whose normal matrix was numerically singular (solved by
    least squares instead).
    """
    a = np.einsum("gn,ni,nj->gij", w, z, z, optimize=True)
    b = np.einsum("gn,ni->gi", w * y0, z, optimize=True)
    eig = np.linalg.eigvalsh(a)
    singular = eig[:, 0] <= 1e-10 * np.maximum(eig[:, -1], 1e-300)
    theta = np.empty_like(b)
    good = ~singular
    if good.any():
        theta[good] = np.linalg.solve(a[good], b[good][..., None])[..., 0]
    for g in np.flatnonzero(singular):
        theta[g] = np.linalg.lstsq(a[g], b[g], rcond=None)[0]
    return theta, singular


def fit_factors(
    m: ObservedMatrix,
    x: DesignMatrix,
    w: WeightMatrix,
    k: int,
    init: NDArray[np.float64],
    cfg: FactorConfig | None = None,
) -> FactorEstimate:
    """Block coordinate descent for the design-orthogonal factor basis.

    The objective is evaluated after every metabolite-regression half-step
    and is monotone nonincreasing across those evaluations; convergence is
    declared when its relative decrease drops below ``cfg.tol``.
    """
    cfg = cfg or FactorConfig()
    n, d = x.x.shape
    rows = w.rows_used
    wk = w.w[rows]
    y0 = np.where(m.mask[rows], m.y[rows], 0.0)
    c = np.asarray(init, dtype=np.float64).reshape(n, k)
    if k > 0 and np.max(np.abs(x.x.T @ c)) > 1e-6 * np.sqrt(n):
        raise ValueError("init must be orthogonal to the design")

    trace: list[float] = []
    dropped: set[int] = set()
    converged = False
    it = 0
    theta = None
    for it in range(1, cfg.max_iter + 1):
        z = np.column_stack([x.x, c])
        theta, singular = _weighted_metabolite_fits(y0, wk, z)
        coefs, loads = theta[:, :d], theta[:, d:]
        fitted = theta @ z.T
        obj = float(np.sum(wk * (y0 - fitted) ** 2))
        trace.append(obj)
        if len(trace) >= 2:
            prev = trace[-2]
            if prev - obj <= cfg.tol * max(prev, 1e-300):
                converged = True
                break
        if k == 0:
            converged = True
            break
        active = ~singular
        dropped.update(rows[~active].tolist())
        resid = y0 - coefs @ x.x.T
        a2 = np.einsum("gn,gk,gl->nkl", wk[active], loads[active], loads[active],
                       optimize=True)
        b2 = np.einsum("gn,gk->nk", wk[active] * resid[active], loads[active],
                       optimize=True)
        eig = np.linalg.eigvalsh(a2)
        bad = eig[:, 0] <= 1e-10 * np.maximum(eig[:, -1], 1e-300)
        c_new = np.empty((n, k))
        if (~bad).any():
            c_new[~bad] = np.linalg.solve(a2[~bad], b2[~bad][..., None])[..., 0]
        for i in np.flatnonzero(bad):
            c_new[i] = np.linalg.lstsq(a2[i], b2[i], rcond=None)[0]
        c = _orthonormalize_against(x, c_new)

    z = np.column_stack([x.x, c])
    theta, _ = _weighted_metabolite_fits(y0, wk, z)
    sqrt_n = np.sqrt(n)
    return FactorEstimate(
        c_perp=c,
        loadings=theta[:, d:] / sqrt_n,
        coefs=theta[:, :d],
        rows_used=rows,
        k=k,
        n_iter=it,
        converged=converged,
        objective_trace=trace,
        dropped_rows=sorted(dropped),
    )


def _ipw_interest_stats(
    y0: NDArray,
    wk: NDArray,
    z: NDArray,
    d1: int,
) -> NDArray[np.float64]:
    """Batched IPW chi-square statistics for the interest coefficients.

    Uses the sandwich covariance
    (sum w z z')^{-1} [sum w^2 e^2 z z'] (sum w z z')^{-1}.
    """
    a = np.einsum("gn,ni,nj->gij", wk, z, z, optimize=True)
    b = np.einsum("gn,ni->gi", wk * y0, z, optimize=True)
    theta = np.linalg.solve(a, b[..., None])[..., 0]
    resid = y0 - theta @ z.T
    meat = np.einsum("gn,ni,nj->gij", (wk * resid) ** 2, z, z, optimize=True)
    a_inv = np.linalg.inv(a)
    v = a_inv @ meat @ a_inv
    v1 = v[:, :d1, :d1]
    beta1 = theta[:, :d1]
    sol = np.linalg.solve(v1, beta1[..., None])[..., 0]
    return np.einsum("gi,gi->g", beta1, sol)


def estimate_omega(
    fe: FactorEstimate,
    m: ObservedMatrix,
    x: DesignMatrix,
    w: WeightMatrix,
    cfg: FactorConfig | None = None,
) -> OmegaResult:
    """Regress design coefficients on loadings, pruning signal metabolites.

    The closed-form solution is (sum b l')(sum l l')^{-1}. Each refinement
    round tests every metabolite's interest coefficients with an IPW
    sandwich chi-square, converts to q-values, drops metabolites at or
    below the threshold, and refits. If a round would drop everything the
    previous round's estimate is kept and flagged.
    """
    cfg = cfg or FactorConfig()
    d1 = len(x.interest_cols)
    loads = fe.loadings
    coefs = fe.coefs
    rows = fe.rows_used
    y0 = np.where(m.mask[rows], m.y[rows], 0.0)
    wk = w.w[rows]
    n = x.n_samples

    def closed_form(keep: NDArray[np.bool_]) -> NDArray:
        lt_l = loads[keep].T @ loads[keep]
        bt_l = coefs[keep].T @ loads[keep]
        return np.linalg.solve(lt_l.T, bt_l.T).T

    included = np.ones(len(rows), dtype=bool)
    omega = closed_form(included)
    dropped_counts: list[int] = []
    reverted = False
    for _ in range(cfg.refine_iters):
        c_hat = np.sqrt(n) * fe.c_perp + x.x @ omega
        z = np.column_stack([x.x, c_hat])
        stats_sq = _ipw_interest_stats(y0, wk, z, d1)
        pvals = stats.chi2.sf(stats_sq, df=d1)
        qvals = benjamini_hochberg(pvals)
        keep = qvals > cfg.q_thresh
        dropped_counts.append(int((~keep).sum()))
        if not keep.any():
            reverted = True
            break
        included = keep
        omega = closed_form(included)
    return OmegaResult(
        omega=omega,
        included=included,
        n_dropped_per_round=dropped_counts,
        reverted=reverted,
    )


def assemble_factor_matrix(
    fe: FactorEstimate, x: DesignMatrix, omega: NDArray[np.float64]
) -> FactorEstimate:
    """Attach omega and the full factor matrix sqrt(n) c_perp + X omega."""
    fe.omega = np.asarray(omega, dtype=np.float64)
    fe.c_hat = np.sqrt(x.n_samples) * fe.c_perp + x.x @ fe.omega
    return fe


def test_confounding(
    omega: NDArray[np.float64], x: DesignMatrix, j: int
) -> tuple[float, float]:
    """Chi-square test that design column j is unrelated to the factors.

    The statistic is ||omega_j||^2 / [(X'X)^{-1}]_{jj}, compared to a
    chi-square with K degrees of freedom.
    """
    if j not in x.interest_cols:
        raise ValueError(f"column {j} is not an interest column")
    omega = np.asarray(omega)
    xtx_inv = np.linalg.inv(x.x.T @ x.x)
    x_tilde_sq = float(xtx_inv[j, j])
    stat = float(omega[j] @ omega[j] / x_tilde_sq)
    p = float(stats.chi2.sf(stat, df=omega.shape[1]))
    return stat, p


def select_k(
    m: ObservedMatrix,
    part: MetabolitePartition,
    x: DesignMatrix,
    n_perm: int = 19,
    seed: int = 0,
    max_k: int | None = None,
) -> int:
    """Permutation-based factor count from the complete-metabolite block.

    Counts leading singular values of the design-residualized complete
    block that strictly exceed the 95th percentile of their null
    counterparts, obtained by permuting each metabolite's residual row
    independently and re-residualizing.
    """
    if len(part.complete) < 2:
        raise ValueError("need at least two complete metabolites")
    block = m.y[part.complete]
    if np.isnan(block).any():
        row_means = np.nanmean(block, axis=1, keepdims=True)
        block = np.where(np.isnan(block), row_means, block)
    resid = x.project_out(block.T).T
    sv = np.linalg.svd(resid, compute_uv=False)
    limit = max_k or len(sv)
    rng = np.random.default_rng(seed)
    null_sv = np.empty((n_perm, len(sv)))
    for b in range(n_perm):
        perm = rng.permuted(resid, axis=1)
        null_sv[b] = np.linalg.svd(x.project_out(perm.T).T, compute_uv=False)
    thresh = np.quantile(null_sv, 0.95, axis=0, method="higher")
    k = 0
    for i in range(min(limit, len(sv))):
        if sv[i] > thresh[i]:
            k += 1
        else:
            break
    return k
