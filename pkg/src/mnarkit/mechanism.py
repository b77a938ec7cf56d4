"""Per-metabolite selection-parameter estimation by Bayesian method of moments.

For each metabolite in the missing class we estimate the scale/location
pair (alpha_g, delta_g) of its selection model. The observable moment

    m_g(a, d) = n^{-1/2} sum_i u_gi * (1 - r_gi / Psi(a * (y_gi - d)))

is mean zero at the true parameters when the instruments u_gi are
independent of r_gi given y_gi. Treating m_g as data with a normal
likelihood m_g ~ N(0, V_g(a, d)), where V_g is the plug-in sample
covariance of the summands, the estimate is the posterior mean of
(alpha, delta) over a fixed two-dimensional grid. The grid posterior is
deterministic: identical inputs and configuration produce bit-identical
estimates.

Instruments are principal components of the fully observed metabolite
block; each target metabolite keeps the few components most correlated
with its own observed values.

Estimates depend only on the observed data values and the mask, never on
the covariates, so they are computed once per dataset and persisted.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray
from scipy.special import logsumexp

from .data import DesignMatrix, MetabolitePartition, ObservedMatrix
from .selection import SelectionCdf, psi

__all__ = [
    "InstrumentSet",
    "MechanismConfig",
    "MechanismEstimate",
    "MomentUnderflowError",
    "build_instruments",
    "moment_vector",
    "estimate_mechanism",
    "save_mechanisms",
    "load_mechanisms",
]

STORE_FORMAT_VERSION = 1


class MomentUnderflowError(ValueError):
    """An observed cell was assigned a vanishing observation probability.

    Signals a pathological (alpha, delta) candidate: the optimizer treats
    the point as infeasible.
    """

    def __init__(self, sample_index: int, prob: float):
        self.sample_index = sample_index
        super().__init__(
            f"observation probability underflow ({prob:.3g}) at sample "
            f"{sample_index} for an observed value"
        )


@dataclass
class InstrumentSet:
    """Candidate instrument columns (n x r), unit-norm and centered."""

    u: NDArray[np.float64]
    source: str

    def __post_init__(self) -> None:
        self.u = np.asarray(self.u, dtype=np.float64)
        if self.u.ndim != 2 or self.u.shape[1] < 2:
            raise ValueError("instrument matrix must be n x r with r >= 2")


@dataclass
class MechanismConfig:
    """Grid-posterior settings; defaults are the software defaults."""

    alpha_range: tuple[float, float] = (0.05, 5.0)
    n_alpha: int = 60
    n_delta: int = 80
    n_instruments: int = 3
    min_observed: int = 10
    cov_ridge: float = 1e-8
    psi_floor: float = 1e-10
    prior_log_alpha_sd: float = 1.0


@dataclass
class MechanismEstimate:
    """Selection-parameter estimates for the missing-class metabolites."""

    metabolite_ids: list[str]
    alpha_hat: NDArray[np.float64]
    delta_hat: NDArray[np.float64]
    posterior_sd_alpha: NDArray[np.float64]
    posterior_sd_delta: NDArray[np.float64]
    moment_norm: NDArray[np.float64]
    flagged: NDArray[np.bool_]
    cdf: SelectionCdf

    def __post_init__(self) -> None:
        n = len(self.metabolite_ids)
        for name in ("alpha_hat", "delta_hat", "posterior_sd_alpha",
                     "posterior_sd_delta", "moment_norm", "flagged"):
            arr = np.asarray(getattr(self, name))
            if arr.shape != (n,):
                raise ValueError(f"{name} has shape {arr.shape}, expected ({n},)")
            setattr(self, name, arr)
        if (self.alpha_hat < 0).any():
            raise ValueError("alpha_hat must be nonnegative")
        self._index = {m: i for i, m in enumerate(self.metabolite_ids)}

    def lookup(self, metabolite_id: str) -> tuple[float, float]:
        i = self._index[metabolite_id]
        return float(self.alpha_hat[i]), float(self.delta_hat[i])

    def __contains__(self, metabolite_id: str) -> bool:
        return metabolite_id in self._index


def build_instruments(
    m: ObservedMatrix,
    part: MetabolitePartition,
    x: DesignMatrix,
    num_candidates: int = 10,
) -> InstrumentSet:
    """Right singular vectors of the row-centered complete-metabolite block.

    The candidates capture the dominant sample-level variation among fully
    observed metabolites, which the missing-class values depend on through
    the shared latent structure.
    """
    if len(part.complete) < num_candidates:
        raise ValueError(
            f"need at least {num_candidates} complete metabolites, "
            f"have {len(part.complete)}"
        )
    block = m.y[part.complete]
    if np.isnan(block).any():
        # Complete-class metabolites may still have a handful of missing
        # cells (<5%); fill with the row mean for the SVD only.
        row_means = np.nanmean(block, axis=1, keepdims=True)
        block = np.where(np.isnan(block), row_means, block)
    centered = block - block.mean(axis=1, keepdims=True)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    u = vt[:num_candidates].T
    return InstrumentSet(u=u, source=f"first {num_candidates} PCs of complete block")


def moment_vector(
    y_g: NDArray[np.float64],
    mask_g: NDArray[np.bool_],
    u: NDArray[np.float64],
    alpha: float,
    delta: float,
    cdf: SelectionCdf,
    psi_floor: float = 1e-10,
) -> NDArray[np.float64]:
    """The scaled instrument moment at a candidate (alpha, delta).

    Missing cells contribute u_gi; observed cells contribute
    u_gi * (1 - 1 / Psi(alpha * (y_gi - delta))).
    """
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    y_g = np.asarray(y_g, dtype=np.float64)
    mask_g = np.asarray(mask_g, dtype=bool)
    u = np.asarray(u, dtype=np.float64)
    n = y_g.shape[0]
    t = np.ones(n)
    obs = np.flatnonzero(mask_g)
    p_obs = psi(cdf, alpha * (y_g[obs] - delta), 0)
    p_obs = np.atleast_1d(p_obs)
    low = p_obs < psi_floor
    if low.any():
        j = int(obs[np.argmax(low)])
        raise MomentUnderflowError(j, float(p_obs[low][0]))
    t[obs] = 1.0 - 1.0 / p_obs
    return (t @ u) / np.sqrt(n)


def _select_instruments(
    y_obs: NDArray, obs_idx: NDArray, u: NDArray, r: int
) -> NDArray:
    """Columns of u most correlated (in absolute value) with observed y_g."""
    uo = u[obs_idx]
    uo_c = uo - uo.mean(axis=0)
    yc = y_obs - y_obs.mean()
    denom = np.sqrt((uo_c**2).sum(axis=0) * (yc**2).sum())
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.abs(uo_c.T @ yc) / denom
    corr = np.nan_to_num(corr)
    keep = np.argsort(-corr)[:r]
    return u[:, np.sort(keep)]


def _grid_posterior(
    y_g: NDArray,
    mask_g: NDArray,
    u: NDArray,
    cdf: SelectionCdf,
    cfg: MechanismConfig,
) -> tuple[float, float, float, float, float, bool]:
    """Posterior mean/sd of (alpha, delta) on the configured grid.

    The moment vector is the instrument moment augmented with a constant
    coordinate. The constant enforces that the candidate's implied
    observation rate matches the observed rate; without it, candidates
    that push every observed cell's probability to 1 while blaming the
    missing cells on an arbitrarily remote location parameter are
    moment-feasible.
    """
    u = np.column_stack([np.ones(u.shape[0]), u])
    n = y_g.shape[0]
    r = u.shape[1]
    obs = np.flatnonzero(mask_g)
    y_obs = y_g[obs]
    sd_y = float(np.std(y_obs, ddof=1))
    log_alphas = np.linspace(*np.log(cfg.alpha_range), cfg.n_alpha)
    alphas = np.exp(log_alphas)
    deltas = np.linspace(y_obs.min() - 2.0 * sd_y, y_obs.max(), cfg.n_delta)

    # t[a, d, i] = 1 - r_i / Psi(alpha_a (y_i - delta_d)); 1 where missing.
    args = alphas[:, None, None] * (y_obs[None, None, :] - deltas[None, :, None])
    p = psi(cdf, args, 0)
    feasible = p.min(axis=2) >= cfg.psi_floor
    p = np.maximum(p, cfg.psi_floor)
    t = np.ones((cfg.n_alpha, cfg.n_delta, n))
    t[:, :, obs] = 1.0 - 1.0 / p

    mean_s = np.einsum("adi,ik->adk", t, u) / n
    m = np.sqrt(n) * mean_s
    second = np.einsum("adi,ik,il->adkl", t**2, u, u) / n
    cov = second - mean_s[..., :, None] * mean_s[..., None, :]
    ridge = cfg.cov_ridge * np.trace(cov, axis1=-2, axis2=-1) / r + 1e-12
    cov = cov + ridge[..., None, None] * np.eye(r)

    sign, logdet = np.linalg.slogdet(cov)
    sol = np.linalg.solve(cov, m[..., None])[..., 0]
    quad = np.einsum("adk,adk->ad", m, sol)
    loglik = -0.5 * (logdet + quad)
    loglik = np.where((sign > 0) & feasible, loglik, -np.inf)

    # Weakly informative prior: log alpha centered at the grid midpoint;
    # delta centered at the 10th percentile of observed values (low
    # abundances are the ones that go missing).
    la_mid = 0.5 * (np.log(cfg.alpha_range[0]) + np.log(cfg.alpha_range[1]))
    lp_alpha = -0.5 * ((log_alphas - la_mid) / cfg.prior_log_alpha_sd) ** 2
    delta_center = float(np.quantile(y_obs, 0.10))
    lp_delta = -0.5 * ((deltas - delta_center) / sd_y) ** 2
    log_post = loglik + lp_alpha[:, None] + lp_delta[None, :]

    flagged = False
    if not np.isfinite(log_post).any():
        # Infeasible everywhere: fall back to the prior.
        log_post = lp_alpha[:, None] + lp_delta[None, :]
        flagged = True
    log_post = log_post - logsumexp(log_post)
    w = np.exp(log_post)
    alpha_hat = float(np.einsum("ad,a->", w, alphas))
    delta_hat = float(np.einsum("ad,d->", w, deltas))
    sd_alpha = float(np.sqrt(max(np.einsum("ad,a->", w, alphas**2) - alpha_hat**2, 0.0)))
    sd_delta = float(np.sqrt(max(np.einsum("ad,d->", w, deltas**2) - delta_hat**2, 0.0)))

    amax, dmax = np.unravel_index(np.argmax(log_post), log_post.shape)
    on_boundary = amax in (0, cfg.n_alpha - 1) or dmax in (0, cfg.n_delta - 1)
    if on_boundary and np.exp(log_post[amax, dmax]) > 0.5:
        flagged = True

    try:
        mom = moment_vector(y_g, mask_g, u, alpha_hat, delta_hat, cdf, cfg.psi_floor)
        norm = float(np.linalg.norm(mom))
    except MomentUnderflowError:
        norm = float("inf")
        flagged = True
    return alpha_hat, delta_hat, sd_alpha, sd_delta, norm, flagged


def estimate_mechanism(
    m: ObservedMatrix,
    part: MetabolitePartition,
    u: InstrumentSet,
    cdf: SelectionCdf | None = None,
    cfg: MechanismConfig | None = None,
) -> MechanismEstimate:
    """Grid-posterior estimates for every missing-class metabolite."""
    cdf = cdf or SelectionCdf()
    cfg = cfg or MechanismConfig()
    ids, alphas, deltas, sda, sdd, norms, flags = [], [], [], [], [], [], []
    for g in part.missing:
        y_g = m.y[g]
        mask_g = m.mask[g]
        n_obs = int(mask_g.sum())
        if n_obs < cfg.min_observed:
            raise ValueError(
                f"metabolite {m.metabolite_ids[g]!r} has {n_obs} observed "
                f"values, below the minimum {cfg.min_observed}"
            )
        u_g = _select_instruments(y_g[mask_g], np.flatnonzero(mask_g),
                                  u.u, cfg.n_instruments)
        a, d, sa, sd_, nm, fl = _grid_posterior(y_g, mask_g, u_g, cdf, cfg)
        ids.append(m.metabolite_ids[g])
        alphas.append(a)
        deltas.append(d)
        sda.append(sa)
        sdd.append(sd_)
        norms.append(nm)
        flags.append(fl)
    return MechanismEstimate(
        metabolite_ids=ids,
        alpha_hat=np.asarray(alphas),
        delta_hat=np.asarray(deltas),
        posterior_sd_alpha=np.asarray(sda),
        posterior_sd_delta=np.asarray(sdd),
        moment_norm=np.asarray(norms),
        flagged=np.asarray(flags, dtype=bool),
        cdf=cdf,
    )


def save_mechanisms(est: MechanismEstimate, path) -> None:
    """Persist estimates as self-describing JSON."""
    payload = {
        "format_version": STORE_FORMAT_VERSION,
        "cdf": est.cdf.tag(),
        "records": [
            {
                "id": est.metabolite_ids[i],
                "alpha": float(est.alpha_hat[i]),
                "delta": float(est.delta_hat[i]),
                "sd_alpha": float(est.posterior_sd_alpha[i]),
                "sd_delta": float(est.posterior_sd_delta[i]),
                "moment_norm": float(est.moment_norm[i]),
                "flagged": bool(est.flagged[i]),
            }
            for i in range(len(est.metabolite_ids))
        ],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1)
        fh.write("\n")


def load_mechanisms(path, expected_cdf: SelectionCdf | None = None) -> MechanismEstimate:
    """Load a mechanism store, validating version and CDF family."""
    with open(path) as fh:
        payload = json.load(fh)
    version = payload.get("format_version")
    if version != STORE_FORMAT_VERSION:
        raise ValueError(
            f"mechanism store version {version!r} is not supported "
            f"(expected {STORE_FORMAT_VERSION})"
        )
    cdf = SelectionCdf.from_tag(payload["cdf"])
    if expected_cdf is not None and cdf != expected_cdf:
        raise ValueError(
            f"mechanism store was fit with {cdf.tag()}, "
            f"but {expected_cdf.tag()} was requested"
        )
    rec = payload["records"]
    return MechanismEstimate(
        metabolite_ids=[r["id"] for r in rec],
        alpha_hat=np.asarray([r["alpha"] for r in rec]),
        delta_hat=np.asarray([r["delta"] for r in rec]),
        posterior_sd_alpha=np.asarray([r["sd_alpha"] for r in rec]),
        posterior_sd_delta=np.asarray([r["sd_delta"] for r in rec]),
        moment_norm=np.asarray([r["moment_norm"] for r in rec]),
        flagged=np.asarray([r["flagged"] for r in rec], dtype=bool),
        cdf=cdf,
    )
