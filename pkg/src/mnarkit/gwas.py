"""Genome-scale score tests partitioning idiosyncratic and factor effects.

For metabolite g and SNP s three hypotheses are tested:

* idiosyncratic effect (``eta_e``): a score test for adding the genotype
  to the observed-data likelihood at the fitted null. The score and the
  per-sample information diagonals do not depend on genotype, so they are
  computed once per metabolite; each SNP then costs one dot product plus a
  rank-one bordered solve against a cached factorization.
* factor-mediated effect (``eta_c``): combines the fitted loading vector
  with the least-squares regression of the estimated factors on the SNP,
  each with its estimated covariance.
* either effect (``eta_ce``): the sum of the two, which is asymptotically
  chi-square with two degrees of freedom because the components are
  asymptotically independent.

Fully observed metabolites use the Gaussian shortcut for the idiosyncratic
test: a Wald test for the genotype coefficient in the regression of the
abundances on the design, factors, and genotype.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np
from numpy.typing import NDArray
from scipy import stats
from scipy.linalg import cho_factor, cho_solve

from .abundance import CoefInference
from .data import DesignMatrix, GenotypeMatrix, MetabolitePartition, ObservedMatrix
from .factors import FactorEstimate
from .mechanism import MechanismEstimate
from .selection import QuadratureRule, SelectionCdf, miss_prob_complement, miss_prob_partials

__all__ = [
    "GwasConfig",
    "MetabolitePrecompute",
    "GwasChunk",
    "GwasScan",
    "precompute_metabolite",
    "eta_e",
    "eta_c",
    "regress_factors_on_genotype",
    "run_gwas",
]


@dataclass
class GwasConfig:
    min_minor_allele_count: int = 3
    collinearity_floor: float = 1e-10


@dataclass
class MetabolitePrecompute:
    """Genotype-free per-metabolite quantities for the idiosyncratic test.

    ``s`` holds per-sample score residuals at the fitted null; ``d11`` and
    ``d12`` the per-sample information diagonals. ``block`` is the
    (theta, sigma) information with its Cholesky factorization cached so a
    SNP border costs a single triangular solve.
    """

    s: NDArray[np.float64]
    d11: NDArray[np.float64]
    d12: NDArray[np.float64]
    block: NDArray[np.float64]
    z: NDArray[np.float64]
    d11_z: NDArray[np.float64]
    _cho: tuple = field(repr=False, default=None)

    def __post_init__(self) -> None:
        n, q = self.z.shape
        if self.s.shape != (n,) or self.d11.shape != (n,) or self.d12.shape != (n,):
            raise ValueError("per-sample vectors inconsistent with design")
        if self.block.shape != (q + 1, q + 1):
            raise ValueError("information block inconsistent with design")
        if self._cho is None:
            try:
                self._cho = cho_factor(self.block)
            except np.linalg.LinAlgError:
                bump = 1e-8 * np.trace(self.block) / self.block.shape[0]
                self._cho = cho_factor(
                    self.block + bump * np.eye(self.block.shape[0])
                )

    def border_solve(self, u: NDArray) -> NDArray:
        """Solve block @ v = u for one or many border columns."""
        return cho_solve(self._cho, u)


def precompute_metabolite(
    y_g: NDArray[np.float64],
    mask_g: NDArray[np.bool_],
    z_hat: NDArray[np.float64],
    mech_g: tuple[float, float] | None,
    cdf: SelectionCdf,
    rule: QuadratureRule,
    fit: CoefInference,
) -> MetabolitePrecompute:
    """Score residuals and information diagonals at the fitted null."""
    theta = fit.theta_hat
    sigma = fit.sigma_hat
    n, q = z_hat.shape
    mu = z_hat @ theta
    r = mask_g.astype(np.float64)
    resid = np.where(mask_g, y_g - mu, 0.0)
    if mech_g is None:
        # Gaussian observed-cells model; masked cells contribute nothing.
        s = r * resid / sigma**2
        d11 = r / sigma**2
        d12 = np.zeros(n)
        d22_sum = 2.0 * float(r.sum()) / sigma**2
    else:
        alpha, delta = mech_g
        parts = miss_prob_partials(cdf, alpha, delta, mu, sigma, rule)
        comp = np.maximum(
            np.atleast_1d(miss_prob_complement(cdf, alpha, delta, mu, sigma, rule)),
            1e-300,
        )
        s = r * resid / sigma**2 - (1.0 - r) * np.asarray(parts.dq_dmu) / comp
        qv = np.asarray(parts.q)
        q_m = np.asarray(parts.dq_dmu)
        q_s = np.asarray(parts.dq_dsigma)
        q_mm = np.asarray(parts.d2q_dmu2)
        q_ss = np.asarray(parts.d2q_dsigma2)
        q_ms = np.asarray(parts.d2q_dmu_dsigma)
        d11 = qv / sigma**2 + q_mm + q_m**2 / comp
        d12 = 2.0 * q_m / sigma + q_ms + q_m * q_s / comp
        d22_sum = float(
            (2.0 * qv / sigma**2 + 3.0 * q_mm + q_ss + q_s**2 / comp).sum()
        )
    block = np.zeros((q + 1, q + 1))
    block[:q, :q] = (z_hat * d11[:, None]).T @ z_hat
    cross = z_hat.T @ d12
    block[:q, q] = cross
    block[q, :q] = cross
    block[q, q] = d22_sum
    return MetabolitePrecompute(
        s=s, d11=d11, d12=d12, block=block, z=z_hat,
        d11_z=z_hat * d11[:, None],
    )


def eta_e_batch(
    pre: MetabolitePrecompute,
    g: NDArray[np.float64],
    floor: float = 1e-10,
) -> tuple[NDArray[np.float64], NDArray[np.float64], NDArray[np.bool_]]:
    """Idiosyncratic score statistics for a block of SNPs (rows of ``g``).

    The statistic is (sum_i G_i s_i)^2 times the (1,1) element of the
    inverse bordered information, obtained through the Schur complement of
    the cached (theta, sigma) block.
    """
    g = np.atleast_2d(g)
    scores = g @ pre.s
    u = np.column_stack([g @ pre.d11_z, g @ pre.d12])
    a = (g * g) @ pre.d11
    v = pre.border_solve(u.T)
    schur = a - np.einsum("sq,qs->s", u, v)
    collinear = schur <= floor * np.maximum(a, 1e-300)
    safe = np.where(collinear, 1.0, schur)
    stat = np.where(collinear, 0.0, scores**2 / safe)
    p = np.where(collinear, 1.0, stats.chi2.sf(stat, df=1))
    return stat, p, collinear


def eta_e(
    pre: MetabolitePrecompute, g_s: NDArray[np.float64]
) -> tuple[float, float]:
    """Single-SNP convenience wrapper around :func:`eta_e_batch`."""
    stat, p, collinear = eta_e_batch(pre, g_s[None, :])
    if collinear[0]:
        return 0.0, 1.0
    return float(stat[0]), float(p[0])


def eta_c(
    ell_hat: NDArray[np.float64],
    v_ell: NDArray[np.float64],
    gamma_hat: NDArray[np.float64],
    v_gamma: NDArray[np.float64],
) -> tuple[float, float]:
    """Factor-mediated test combining loading and genotype-regression parts."""
    num = float(ell_hat @ gamma_hat) ** 2
    den = float(ell_hat @ v_gamma @ ell_hat + gamma_hat @ v_ell @ gamma_hat)
    if den <= 0:
        raise ValueError("degenerate variance in factor-mediated test")
    stat = num / den
    return stat, float(stats.chi2.sf(stat, df=1))


def regress_factors_on_genotype(
    c_hat: NDArray[np.float64],
    x: DesignMatrix,
    g_s: NDArray[np.float64],
) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Least squares of the factor columns on one SNP, design partialled out.

    Returns the K coefficients and their classical covariance, which is
    the residual covariance of the multivariate regression divided by the
    residualized genotype's sum of squares.
    """
    g_t = x.project_out(g_s[:, None])[:, 0]
    gtg = float(g_t @ g_t)
    if gtg <= 1e-10 * float(g_s @ g_s + 1e-300):
        raise ValueError("genotype is collinear with the design")
    c_t = x.project_out(c_hat)
    gamma = c_t.T @ g_t / gtg
    resid = c_t - np.outer(g_t, gamma)
    dof = c_hat.shape[0] - x.d - 1
    sigma_res = resid.T @ resid / dof
    return gamma, sigma_res / gtg


def _gamma_batch(
    c_hat: NDArray, x: DesignMatrix, g: NDArray
) -> tuple[NDArray, NDArray, NDArray]:
    """Vectorized factor-on-genotype regressions for a SNP block."""
    n, k = c_hat.shape
    g_t = x.project_out(g.T).T
    gtg = np.einsum("sn,sn->s", g_t, g_t)
    c_t = x.project_out(c_hat)
    ctc = c_t.T @ c_t
    cross = g_t @ c_t
    gamma = cross / gtg[:, None]
    # Residual cross-product: C'C - gamma (g'C) per SNP.
    res_ss = ctc[None, :, :] - gamma[:, :, None] * cross[:, None, :]
    dof = n - x.d - 1
    v_gamma = res_ss / dof / gtg[:, None, None]
    return gamma, v_gamma, gtg


@dataclass
class GwasChunk:
    """All SNP statistics for one metabolite."""

    metabolite_id: str
    metabolite_class: str
    snp_ids: list[str]
    eta_e: NDArray[np.float64]
    p_e: NDArray[np.float64]
    eta_c: NDArray[np.float64]
    p_c: NDArray[np.float64]
    eta_ce: NDArray[np.float64]
    p_ce: NDArray[np.float64]
    flags: list[str]


@dataclass
class GwasScan:
    skipped_snps: list[str]
    chunks: Iterator[GwasChunk]


def run_gwas(
    m: ObservedMatrix,
    part: MetabolitePartition,
    x: DesignMatrix,
    mech: MechanismEstimate,
    fe: FactorEstimate,
    fits: dict[str, CoefInference],
    geno: GenotypeMatrix,
    cdf: SelectionCdf,
    rule: QuadratureRule,
    cfg: GwasConfig | None = None,
) -> GwasScan:
    """Stream per-metabolite score-test chunks over all polymorphic SNPs.

    Per-pair failures are recorded in the chunk flags and never abort the
    scan. SNPs with minor allele count below the configured floor are
    skipped up front and reported.
    """
    cfg = cfg or GwasConfig()
    if fe.c_hat is None:
        raise ValueError("factor estimate lacks the assembled factor matrix")
    mac = geno.minor_allele_counts()
    keep = mac >= cfg.min_minor_allele_count
    skipped = [geno.snp_ids[i] for i in np.flatnonzero(~keep)]
    g_mat = geno.g[keep]
    snp_ids = [geno.snp_ids[i] for i in np.flatnonzero(keep)]
    c_hat = fe.c_hat
    d = x.d
    k = fe.k

    gamma, v_gamma, _ = _gamma_batch(c_hat, x, g_mat)

    # Genotype-only quantities for the fully observed Wald shortcut are
    # shared across metabolites: residualized SNP sums of squares and the
    # projection basis of [design, factors].
    z_hat = np.column_stack([x.x, c_hat])
    qz, _ = np.linalg.qr(z_hat)
    qtg = qz.T @ g_mat.T
    gtg_resid = np.einsum("sn,sn->s", g_mat, g_mat) - np.einsum(
        "qs,qs->s", qtg, qtg
    )
    missing_set = set(int(i) for i in part.missing)

    def chunk_iter() -> Iterator[GwasChunk]:
        order = sorted(list(part.complete) + list(part.missing))
        for g_idx in order:
            met = m.metabolite_ids[g_idx]
            if met not in fits:
                continue
            fit = fits[met]
            is_missing_class = int(g_idx) in missing_set
            cls = "missing" if is_missing_class else "complete"
            y_g = m.y[g_idx]
            mask_g = m.mask[g_idx]
            flags = [""] * len(snp_ids)
            if is_missing_class or not mask_g.all():
                # Score machinery; near-complete metabolites take the
                # Gaussian observed-cells path (no mechanism).
                mech_g = mech.lookup(met) if is_missing_class else None
                pre = precompute_metabolite(
                    y_g, mask_g, z_hat, mech_g, cdf, rule, fit
                )
                stat_e, p_e, collinear = eta_e_batch(
                    pre, g_mat, cfg.collinearity_floor
                )
                for i in np.flatnonzero(collinear):
                    flags[i] = "collinear"
            else:
                stat_e, p_e, bad = _wald_fully_observed(
                    y_g, qz, z_hat.shape[1], g_mat, gtg_resid
                )
                for i in np.flatnonzero(bad):
                    flags[i] = "collinear"
            ell = fit.theta_hat[d : d + k]
            v_ell = fit.cov[d : d + k, d : d + k]
            num = (gamma @ ell) ** 2
            den = np.einsum("sk,skl,sl->s", gamma, np.broadcast_to(
                v_ell, (gamma.shape[0], k, k)), gamma)
            den = den + np.einsum("k,skl,l->s", ell, v_gamma, ell)
            degenerate = den <= 0
            stat_c = np.where(degenerate, 0.0, num / np.where(degenerate, 1.0, den))
            p_c = np.where(degenerate, 1.0, stats.chi2.sf(stat_c, df=1))
            for i in np.flatnonzero(degenerate):
                flags[i] = (flags[i] + ";degenerate_vc").strip(";")
            stat_ce = stat_e + stat_c
            p_ce = stats.chi2.sf(stat_ce, df=2)
            yield GwasChunk(
                metabolite_id=met,
                metabolite_class=cls,
                snp_ids=snp_ids,
                eta_e=stat_e,
                p_e=p_e,
                eta_c=stat_c,
                p_c=p_c,
                eta_ce=stat_ce,
                p_ce=p_ce,
                flags=flags,
            )

    return GwasScan(skipped_snps=skipped, chunks=chunk_iter())


def _wald_fully_observed(
    y_g: NDArray,
    qz: NDArray,
    q0: int,
    g_mat: NDArray,
    gtg_resid: NDArray,
) -> tuple[NDArray, NDArray, NDArray]:
    """Gaussian Wald chi-square for the genotype coefficient, batched.

    Regresses the fully observed abundances on [design, factors, SNP]; the
    statistic is the squared coefficient over its estimated variance.
    ``qz`` is an orthonormal basis of the genotype-free design and
    ``gtg_resid`` the residualized SNP sums of squares, both shared across
    metabolites; the per-metabolite cost is one dot product per SNP.
    """
    n = y_g.shape[0]
    y_t = y_g - qz @ (qz.T @ y_g)
    # g_tilde' y_tilde == g' y_tilde because y_tilde is already projected.
    cross = g_mat @ y_t
    bad = gtg_resid <= 1e-10 * np.maximum(
        np.einsum("sn,sn->s", g_mat, g_mat), 1e-300
    )
    gtg_safe = np.where(bad, 1.0, gtg_resid)
    beta = cross / gtg_safe
    rss0 = float(y_t @ y_t)
    rss = rss0 - beta**2 * gtg_safe
    dof = n - q0 - 1
    sigma2 = np.maximum(rss, 0.0) / dof
    var = sigma2 / gtg_safe
    with np.errstate(divide="ignore", invalid="ignore"):
        stat = np.where(bad | (var <= 0), 0.0, beta**2 / var)
    p = np.where(bad, 1.0, stats.chi2.sf(stat, df=1))
    return stat, p, bad
