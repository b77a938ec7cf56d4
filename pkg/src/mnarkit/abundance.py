"""Per-metabolite coefficient estimation and Wald inference.

The observed-data log-likelihood for metabolite g, given estimated
selection parameters and estimated sample covariates z_i = (x_i, c_i), is

    h(theta, sigma) = sum_i r_i * [-log sigma - (y_i - theta' z_i)^2 / (2 sigma^2)]
                    + sum_i (1 - r_i) * log(1 - q(theta' z_i, sigma))

with q the convolved observation probability from :mod:`mnarkit.selection`.
Estimation initializes at closed-form inverse-probability-weighted (IPW)
estimates and applies Fisher scoring with the expected information; the
expected information treats the plugged-in covariates and selection
parameters as known. One step from the IPW start is already first-order
efficient, so the default iteration cap is small.

Fully observed metabolites reduce to Gaussian maximum likelihood: the fit
matches ordinary least squares and its textbook covariance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray
from scipy import stats

from .selection import (
    MissProbPartials,
    QuadratureRule,
    SelectionCdf,
    miss_prob_complement,
    miss_prob_partials,
)

__all__ = [
    "FisherConfig",
    "CoefInference",
    "ipw_fit",
    "loglik",
    "score_and_info",
    "fisher_fit",
    "benjamini_hochberg",
    "storey_qvalues",
]

LOG_SENTINEL = -1e300  # stands in for log(0) when a missing cell has q ~ 1


@dataclass
class FisherConfig:
    max_iter: int = 10
    tol: float = 1e-8
    max_halvings: int = 20
    info_ridge: float = 1e-8


@dataclass
class CoefInference:
    """Fitted coefficients, scale, covariance, and interest-column Wald tests.

    ``theta_hat`` stacks the design coefficients then the factor loadings;
    ``cov`` is the inverse expected information over (theta, sigma).
    """

    theta_hat: NDArray[np.float64]
    sigma_hat: float
    cov: NDArray[np.float64]
    n_iter: int
    converged: bool
    wald_z: NDArray[np.float64]
    wald_p: NDArray[np.float64]
    interest_cols: list[int]
    flags: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.sigma_hat <= 0:
            raise ValueError("sigma_hat must be positive")
        asym = np.max(np.abs(self.cov - self.cov.T))
        if asym > 1e-8 * (1.0 + np.max(np.abs(self.cov))):
            raise ValueError("covariance is not symmetric")

    def beta_interest(self) -> NDArray[np.float64]:
        return self.theta_hat[self.interest_cols]

    def se_interest(self) -> NDArray[np.float64]:
        return np.sqrt(np.diag(self.cov)[self.interest_cols])


def ipw_fit(
    y_g: NDArray[np.float64],
    mask_g: NDArray[np.bool_],
    z_hat: NDArray[np.float64],
    w_g: NDArray[np.float64],
) -> tuple[NDArray[np.float64], float]:
    """Closed-form weighted least squares start: theta and sigma.

    theta = (sum w z z')^{-1} (sum w z y); sigma is the weighted RMS
    residual. Weights are zero at missing cells, so masked values never
    enter.
    """
    w = np.where(mask_g, w_g, 0.0)
    y0 = np.where(mask_g, y_g, 0.0)
    zw = z_hat * w[:, None]
    a = zw.T @ z_hat
    b = zw.T @ y0
    try:
        theta = np.linalg.solve(a, b)
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError(
            "singular weighted design in IPW fit"
        ) from None
    resid = y0 - z_hat @ theta
    sigma2 = float((w * resid**2).sum() / w.sum())
    return theta, float(np.sqrt(sigma2))


def loglik(
    y_g: NDArray[np.float64],
    mask_g: NDArray[np.bool_],
    z_hat: NDArray[np.float64],
    mech_g: tuple[float, float] | None,
    cdf: SelectionCdf,
    rule: QuadratureRule,
    theta: NDArray[np.float64],
    sigma: float,
) -> float:
    """Observed-data log-likelihood (without the -n/2 log 2 pi constant)."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    mu = z_hat @ theta
    obs = mask_g
    out = float(
        -np.sum(obs) * np.log(sigma)
        - np.sum((y_g[obs] - mu[obs]) ** 2) / (2.0 * sigma**2)
    )
    mis = ~obs
    if mis.any() and mech_g is not None:
        alpha, delta = mech_g
        comp = miss_prob_complement(cdf, alpha, delta, mu[mis], sigma, rule)
        comp = np.atleast_1d(comp)
        tiny = comp <= 1e-14
        if tiny.any():
            out += LOG_SENTINEL * int(tiny.sum())
            comp = comp[~tiny]
        out += float(np.sum(np.log(comp)))
    return out


def _info_diagonals(
    parts: MissProbPartials, sigma: float
) -> tuple[NDArray, NDArray, NDArray]:
    """Per-sample expected-information diagonals d11, d12, d22.

    Derived by differentiating the per-sample likelihood in the mean
    m = theta'z and sigma and taking expectations over (y, r):

        d11 = q / s^2 + q_mm + q_m^2 / (1-q)
        d12 = 2 q_m / s + q_ms + q_m q_s / (1-q)
        d22 = 2 q / s^2 + 3 q_mm + q_ss + q_s^2 / (1-q)
    """
    q = np.asarray(parts.q)
    comp = np.maximum(1.0 - q, 1e-300)
    q_m = np.asarray(parts.dq_dmu)
    q_s = np.asarray(parts.dq_dsigma)
    q_mm = np.asarray(parts.d2q_dmu2)
    q_ss = np.asarray(parts.d2q_dsigma2)
    q_ms = np.asarray(parts.d2q_dmu_dsigma)
    d11 = q / sigma**2 + q_mm + q_m**2 / comp
    d12 = 2.0 * q_m / sigma + q_ms + q_m * q_s / comp
    d22 = 2.0 * q / sigma**2 + 3.0 * q_mm + q_ss + q_s**2 / comp
    return d11, d12, d22


def score_and_info(
    y_g: NDArray[np.float64],
    mask_g: NDArray[np.bool_],
    z_hat: NDArray[np.float64],
    mech_g: tuple[float, float] | None,
    cdf: SelectionCdf,
    rule: QuadratureRule,
    theta: NDArray[np.float64],
    sigma: float,
) -> tuple[NDArray[np.float64], NDArray[np.float64], list[str]]:
    """Gradient of the log-likelihood and the expected information.

    The information is the expected negative Hessian over (theta, sigma)
    under the model at the supplied parameters, assembled from per-sample
    diagonals; it is symmetric and positive semidefinite up to rounding.
    A ridge is added (and flagged) in the rare case rounding breaks
    positive definiteness.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    n, k = z_hat.shape
    mu = z_hat @ theta
    flags: list[str] = []
    if mech_g is None:
        # Gaussian likelihood on the observed cells; metabolites in the
        # near-complete class simply drop their few masked cells.
        r = mask_g.astype(np.float64)
        n_obs = float(r.sum())
        resid = np.where(mask_g, y_g - mu, 0.0)
        score_theta = z_hat.T @ (r * resid) / sigma**2
        score_sigma = float(-n_obs / sigma + (resid**2).sum() / sigma**3)
        info = np.zeros((k + 1, k + 1))
        info[:k, :k] = (z_hat * r[:, None]).T @ z_hat / sigma**2
        info[k, k] = 2.0 * n_obs / sigma**2
        return np.append(score_theta, score_sigma), info, flags

    alpha, delta = mech_g
    parts = miss_prob_partials(cdf, alpha, delta, mu, sigma, rule)
    comp = np.maximum(
        np.atleast_1d(
            miss_prob_complement(cdf, alpha, delta, mu, sigma, rule)
        ),
        1e-300,
    )
    r = mask_g.astype(np.float64)
    resid = np.where(mask_g, y_g - mu, 0.0)

    s_mu = r * resid / sigma**2 - (1.0 - r) * np.asarray(parts.dq_dmu) / comp
    s_sig = r * (-1.0 / sigma + resid**2 / sigma**3) - (1.0 - r) * np.asarray(
        parts.dq_dsigma
    ) / comp
    score = np.append(z_hat.T @ s_mu, float(s_sig.sum()))

    d11, d12, d22 = _info_diagonals(parts, sigma)
    info = np.zeros((k + 1, k + 1))
    info[:k, :k] = (z_hat * d11[:, None]).T @ z_hat
    cross = z_hat.T @ d12
    info[:k, k] = cross
    info[k, :k] = cross
    info[k, k] = float(d22.sum())

    eigmin = float(np.linalg.eigvalsh(info).min())
    if eigmin < 0:
        bump = abs(eigmin) + 1e-8 * np.trace(info) / (k + 1)
        info = info + bump * np.eye(k + 1)
        flags.append("info_ridged")
    return score, info, flags


def fisher_fit(
    y_g: NDArray[np.float64],
    mask_g: NDArray[np.bool_],
    z_hat: NDArray[np.float64],
    w_g: NDArray[np.float64],
    mech_g: tuple[float, float] | None,
    cdf: SelectionCdf,
    rule: QuadratureRule,
    interest_cols: list[int],
    cfg: FisherConfig | None = None,
) -> CoefInference:
    """IPW-initialized Fisher scoring with step halving.

    Iterates eta <- eta + info^{-1} score, stopping when the step norm
    falls below the tolerance or the iteration cap is reached. If a step
    lowers the log-likelihood, it is halved (up to the configured limit)
    before being accepted; exhausting the halvings flags non-convergence.
    The covariance is the inverse expected information at the final point.
    """
    cfg = cfg or FisherConfig()
    theta, sigma = ipw_fit(y_g, mask_g, z_hat, w_g)
    if not np.isfinite(sigma) or sigma <= 0:
        sigma = float(np.nanstd(y_g[mask_g])) or 1.0
    flags: list[str] = []
    k = z_hat.shape[1]

    def ll(th, sg):
        return loglik(y_g, mask_g, z_hat, mech_g, cdf, rule, th, sg)

    converged = False
    n_iter = 0
    current = ll(theta, sigma)
    for n_iter in range(1, cfg.max_iter + 1):
        score, info, step_flags = score_and_info(
            y_g, mask_g, z_hat, mech_g, cdf, rule, theta, sigma
        )
        flags.extend(step_flags)
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            flags.append("singular_info")
            break
        scale = 1.0
        for _ in range(cfg.max_halvings):
            theta_new = theta + scale * step[:k]
            sigma_new = sigma + scale * step[k]
            if sigma_new > 0:
                new = ll(theta_new, sigma_new)
                if new >= current - 1e-10 * abs(current):
                    break
            scale *= 0.5
        else:
            flags.append("backtracking_exhausted")
            break
        theta = theta + scale * step[:k]
        sigma = float(sigma + scale * step[k])
        current = ll(theta, sigma)
        if np.linalg.norm(scale * step) <= cfg.tol:
            converged = True
            break

    _, info, _ = score_and_info(
        y_g, mask_g, z_hat, mech_g, cdf, rule, theta, sigma
    )
    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        flags.append("singular_final_info")
        cov = np.linalg.pinv(info)
    cov = 0.5 * (cov + cov.T)
    se = np.sqrt(np.maximum(np.diag(cov)[interest_cols], 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        z = theta[interest_cols] / se
    p = 2.0 * stats.norm.sf(np.abs(z))
    return CoefInference(
        theta_hat=theta,
        sigma_hat=sigma,
        cov=cov,
        n_iter=n_iter,
        converged=converged,
        wald_z=z,
        wald_p=p,
        interest_cols=list(interest_cols),
        flags=flags,
    )


def benjamini_hochberg(p: NDArray[np.float64]) -> NDArray[np.float64]:
    """Step-up q-values: monotone, order-preserving, capped at 1."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1:
        raise ValueError("p-values must be a 1-D vector")
    if ((p < 0) | (p > 1)).any():
        raise ValueError("p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    ranked = p[order] * m / np.arange(1, m + 1)
    q_sorted = np.minimum.accumulate(ranked[::-1])[::-1]
    q = np.empty(m)
    q[order] = np.minimum(q_sorted, 1.0)
    return q


def storey_qvalues(p: NDArray[np.float64], lam: float = 0.5) -> NDArray[np.float64]:
    """Storey-style q-values with a fixed null-proportion estimate at lam."""
    p = np.asarray(p, dtype=np.float64)
    pi0 = min(1.0, float((p > lam).mean()) / (1.0 - lam))
    if pi0 <= 0:
        pi0 = 1.0 / p.size
    return np.minimum(pi0 * benjamini_hochberg(p), 1.0)
