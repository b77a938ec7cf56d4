"""End-to-end orchestration: mechanisms -> factors -> abundance -> GWAS.

Each stage consumes the persisted output of the previous one, so scans can
be re-run without repeating expensive steps. All stages are deterministic
given inputs, configuration, and seed; the thread count changes only wall
time. Run manifests record input hashes, the resolved configuration, and
library versions beside every output.
"""

from __future__ import annotations

import hashlib
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy
from numpy.typing import NDArray

from . import __version__
from .abundance import CoefInference, FisherConfig, benjamini_hochberg, fisher_fit
from .data import DesignMatrix, MetabolitePartition, ObservedMatrix, partition_metabolites
from .factors import (
    FactorConfig,
    FactorEstimate,
    OmegaResult,
    WeightMatrix,
    assemble_factor_matrix,
    compute_weights,
    estimate_omega,
    fit_factors,
    init_subspace,
    select_k,
    test_confounding,
)
from .mechanism import (
    MechanismConfig,
    MechanismEstimate,
    build_instruments,
    estimate_mechanism,
)
from .selection import QuadratureRule, SelectionCdf

__all__ = [
    "RunConfig",
    "DaTable",
    "run_mechanisms",
    "run_factor_analysis",
    "run_differential_abundance",
    "write_manifest",
    "save_factors",
    "load_factors",
]

FACTOR_STORE_VERSION = 1


@dataclass
class RunConfig:
    """Shared knobs; defaults are the documented software defaults."""

    quad_order: int = 32
    max_weight: float = 50.0
    fisher: FisherConfig = field(default_factory=FisherConfig)
    factor: FactorConfig = field(default_factory=FactorConfig)
    mech: MechanismConfig = field(default_factory=MechanismConfig)
    cdf: SelectionCdf = field(default_factory=SelectionCdf)
    k: int | None = None
    num_instrument_candidates: int = 10
    seed: int = 0
    threads: int = 1

    def rule(self) -> QuadratureRule:
        return QuadratureRule(self.quad_order)

    def to_manifest_dict(self) -> dict:
        out = asdict(self)
        out["cdf"] = self.cdf.tag()
        return out


def _ordered_map(fn, items, threads: int):
    """Map preserving input order; thread count never changes results."""
    if threads <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def run_mechanisms(
    m: ObservedMatrix,
    part: MetabolitePartition,
    x: DesignMatrix,
    cfg: RunConfig,
) -> MechanismEstimate:
    """Instrument construction plus grid-posterior selection estimates."""
    candidates = min(cfg.num_instrument_candidates, len(part.complete))
    instruments = build_instruments(m, part, x, candidates)
    return estimate_mechanism(m, part, instruments, cfg.cdf, cfg.mech)


def run_factor_analysis(
    m: ObservedMatrix,
    part: MetabolitePartition,
    x: DesignMatrix,
    mech: MechanismEstimate,
    cfg: RunConfig,
) -> tuple[FactorEstimate, WeightMatrix, OmegaResult]:
    """Weights, factor basis, confounder regression, assembled factors."""
    k = cfg.k
    if k is None:
        k = select_k(m, part, x, n_perm=cfg.factor.n_perm, seed=cfg.seed)
        if k == 0:
            raise ValueError(
                "parallel analysis selected zero factors; pass an explicit k"
            )
    weights = compute_weights(m, part, mech, cfg.cdf, cfg.max_weight)
    init = init_subspace(m, part, x, k)
    fe = fit_factors(m, x, weights, k, init, cfg.factor)
    omega_res = estimate_omega(fe, m, x, weights, cfg.factor)
    assemble_factor_matrix(fe, x, omega_res.omega)
    return fe, weights, omega_res


@dataclass
class DaTable:
    """Differential-abundance output, one row per analyzed metabolite."""

    metabolite_ids: list[str]
    metabolite_class: list[str]
    beta: NDArray[np.float64]
    se: NDArray[np.float64]
    wald_p: NDArray[np.float64]
    q: NDArray[np.float64]
    n_iter: NDArray[np.int64]
    converged: NDArray[np.bool_]
    interest_names: list[str]
    confounding_stats: list[tuple[str, float, float]]

    def write_tsv(self, path) -> None:
        with open(path, "w") as fh:
            for name, stat, p in self.confounding_stats:
                fh.write(
                    f"# factor_dependence\t{name}\tstat={stat!r}\tp={p!r}\n"
                )
            cols = ["metabolite", "class"]
            for name in self.interest_names:
                cols += [f"beta_{name}", f"se_{name}", f"p_{name}", f"q_{name}"]
            cols += ["n_iter", "converged"]
            fh.write("\t".join(cols) + "\n")
            for i, met in enumerate(self.metabolite_ids):
                row = [met, self.metabolite_class[i]]
                for j in range(len(self.interest_names)):
                    row += [
                        repr(float(self.beta[i, j])),
                        repr(float(self.se[i, j])),
                        repr(float(self.wald_p[i, j])),
                        repr(float(self.q[i, j])),
                    ]
                row += [str(int(self.n_iter[i])), str(bool(self.converged[i]))]
                fh.write("\t".join(row) + "\n")


def run_differential_abundance(
    m: ObservedMatrix,
    x: DesignMatrix,
    cfg: RunConfig,
    part: MetabolitePartition | None = None,
    mech: MechanismEstimate | None = None,
    fe: FactorEstimate | None = None,
) -> tuple[DaTable, dict[str, CoefInference], FactorEstimate, MechanismEstimate]:
    """Full per-metabolite inference; returns the table and reusable fits."""
    part = part or partition_metabolites(m)
    mech = mech or run_mechanisms(m, part, x, cfg)
    if fe is None:
        fe, weights, _ = run_factor_analysis(m, part, x, mech, cfg)
    else:
        if fe.c_hat is None or fe.omega is None:
            raise ValueError("supplied factor estimate is not assembled")
        weights = compute_weights(m, part, mech, cfg.cdf, cfg.max_weight)
    rule = cfg.rule()
    z_hat = np.column_stack([x.x, fe.c_hat])
    interest = x.interest_cols
    missing_set = set(int(i) for i in part.missing)

    def fit_one(g: int) -> CoefInference:
        met = m.metabolite_ids[g]
        if int(g) in missing_set:
            mech_g = mech.lookup(met)
        else:
            mech_g = None
        return fisher_fit(
            m.y[g],
            m.mask[g],
            z_hat,
            weights.w[g],
            mech_g,
            cfg.cdf,
            rule,
            interest,
            cfg.fisher,
        )

    kept = [int(g) for g in part.kept()]
    results = _ordered_map(fit_one, kept, cfg.threads)
    fits = {m.metabolite_ids[g]: res for g, res in zip(kept, results)}

    beta = np.vstack([r.beta_interest() for r in results])
    se = np.vstack([r.se_interest() for r in results])
    pvals = np.vstack([r.wald_p for r in results])
    qvals = np.column_stack(
        [benjamini_hochberg(pvals[:, j]) for j in range(pvals.shape[1])]
    )
    confound = [
        (
            x.column_names[j],
            *test_confounding(fe.omega, x, j),
        )
        for j in interest
    ]
    table = DaTable(
        metabolite_ids=[m.metabolite_ids[g] for g in kept],
        metabolite_class=["missing" if g in missing_set else "complete" for g in kept],
        beta=beta,
        se=se,
        wald_p=pvals,
        q=qvals,
        n_iter=np.asarray([r.n_iter for r in results], dtype=np.int64),
        converged=np.asarray([r.converged for r in results], dtype=bool),
        interest_names=[x.column_names[j] for j in interest],
        confounding_stats=confound,
    )
    return table, fits, fe, mech


def save_factors(fe: FactorEstimate, path) -> None:
    """Persist the factor estimate as self-describing JSON."""
    if fe.omega is None or fe.c_hat is None:
        raise ValueError("factor estimate must be assembled before saving")
    payload = {
        "format_version": FACTOR_STORE_VERSION,
        "k": fe.k,
        "scale": fe.scale,
        "n_iter": fe.n_iter,
        "converged": fe.converged,
        "objective_trace": fe.objective_trace,
        "rows_used": fe.rows_used.tolist(),
        "dropped_rows": fe.dropped_rows,
        "c_perp": fe.c_perp.tolist(),
        "loadings": fe.loadings.tolist(),
        "coefs": fe.coefs.tolist(),
        "omega": fe.omega.tolist(),
        "c_hat": fe.c_hat.tolist(),
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def load_factors(path) -> FactorEstimate:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format_version") != FACTOR_STORE_VERSION:
        raise ValueError(
            f"factor store version {payload.get('format_version')!r} unsupported"
        )
    fe = FactorEstimate(
        c_perp=np.asarray(payload["c_perp"]),
        loadings=np.asarray(payload["loadings"]),
        coefs=np.asarray(payload["coefs"]),
        rows_used=np.asarray(payload["rows_used"], dtype=np.intp),
        k=int(payload["k"]),
        n_iter=int(payload["n_iter"]),
        converged=bool(payload["converged"]),
        objective_trace=list(payload["objective_trace"]),
        dropped_rows=list(payload["dropped_rows"]),
        scale=payload["scale"],
    )
    fe.omega = np.asarray(payload["omega"])
    fe.c_hat = np.asarray(payload["c_hat"])
    return fe


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(out_path, inputs: dict, cfg: RunConfig) -> None:
    """Write a replay manifest (input hashes, config, versions) beside an output."""
    manifest = {
        "inputs": {name: _sha256(p) for name, p in inputs.items()},
        "config": cfg.to_manifest_dict(),
        "versions": {
            "mnarkit": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": sys.version.split()[0],
        },
    }
    with open(str(out_path) + ".manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
