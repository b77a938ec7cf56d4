"""Command-line interface exposing the workflow as subcommands.

Subcommands mirror the analysis order: ``estimate-mechanisms`` ->
``factors`` -> ``da`` -> ``gwas``, plus ``simulate`` and ``impute``.
Intermediate results persist to disk so downstream commands never repeat
upstream work. Every output gets a ``.manifest.json`` neighbor recording
input hashes, the resolved configuration, and library versions.

Errors exit nonzero with a single machine-parsable line on stderr:
``<ERROR_CLASS>: <message>``. Config files are flat ``key = value`` text
(a TOML subset); command-line flags override config values.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .abundance import FisherConfig
from .data import ParseError, load_design, load_genotypes, load_matrix, partition_metabolites, write_matrix
from .factors import FactorConfig
from .gwas import GwasConfig, run_gwas
from .mechanism import MechanismConfig, load_mechanisms, save_mechanisms
from .pipeline import (
    RunConfig,
    load_factors,
    run_differential_abundance,
    run_factor_analysis,
    run_mechanisms,
    save_factors,
    write_manifest,
)
from .selection import SelectionCdf
from .simulate import (
    MethodTable,
    SimConfig,
    evaluate,
    generate,
    impute_minimum,
    impute_svd,
    ols_analysis,
    svd_factor_estimate,
)

EXIT_MISSING_INPUT = 2
EXIT_PARSE_ERROR = 3
EXIT_RUNTIME = 4


class CliError(Exception):
    def __init__(self, error_class: str, message: str, code: int):
        self.error_class = error_class
        self.code = code
        super().__init__(message)


def _fail(error_class: str, message: str, code: int):
    raise CliError(error_class, message, code)


def _read_config(path) -> dict:
    """Parse a flat key = value config file; '#' starts a comment."""
    out: dict = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                _fail(
                    "PARSE_ERROR",
                    f"{path}:{lineno}: expected key = value",
                    EXIT_PARSE_ERROR,
                )
            key, val = (part.strip() for part in line.split("=", 1))
            val = val.strip("\"'")
            for cast in (int, float):
                try:
                    out[key] = cast(val)
                    break
                except ValueError:
                    continue
            else:
                if val.lower() in ("true", "false"):
                    out[key] = val.lower() == "true"
                else:
                    out[key] = val
    return out


def _cdf_from_args(args) -> SelectionCdf:
    if args.cdf == "t":
        return SelectionCdf("student_t", args.df)
    return SelectionCdf(args.cdf)


def _run_config(args) -> RunConfig:
    cfg = RunConfig(
        quad_order=args.quad_order,
        max_weight=args.max_weight,
        fisher=FisherConfig(max_iter=args.fisher_max_iter, tol=args.fisher_tol),
        factor=FactorConfig(
            max_weight=args.max_weight,
            refine_iters=args.refine_iters,
            q_thresh=args.q_thresh,
        ),
        mech=MechanismConfig(),
        cdf=_cdf_from_args(args),
        k=args.k,
        seed=args.seed,
        threads=args.threads,
    )
    return cfg


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key = value config file")
    parser.add_argument("--cdf", choices=("t", "logistic", "normal"), default="t")
    parser.add_argument("--df", type=float, default=4.0, help="t degrees of freedom")
    parser.add_argument("--quad-order", type=int, default=32, dest="quad_order")
    parser.add_argument("--max-weight", type=float, default=50.0, dest="max_weight")
    parser.add_argument("--fisher-max-iter", type=int, default=10, dest="fisher_max_iter")
    parser.add_argument("--fisher-tol", type=float, default=1e-8, dest="fisher_tol")
    parser.add_argument("--refine-iters", type=int, default=3, dest="refine_iters")
    parser.add_argument("--q-thresh", type=float, default=0.1, dest="q_thresh")
    parser.add_argument("--k", type=int, default=None, help="number of latent factors")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument(
        "--interest",
        default=None,
        help="comma-separated design columns of interest (default: first column)",
    )


def _apply_config_defaults(args) -> None:
    """Config file values fill in anywhere the CLI used its default."""
    if not args.config:
        return
    defaults = {
        "cdf": "t", "df": 4.0, "quad_order": 32, "max_weight": 50.0,
        "fisher_max_iter": 10, "fisher_tol": 1e-8, "refine_iters": 3,
        "q_thresh": 0.1, "k": None, "seed": 0, "threads": 1, "interest": None,
    }
    file_cfg = _read_config(args.config)
    for key, value in file_cfg.items():
        attr = key.replace("-", "_")
        if hasattr(args, attr) and getattr(args, attr) == defaults.get(attr):
            setattr(args, attr, value)


def _require(args, names: list[str]) -> None:
    for name in names:
        if getattr(args, name.replace("-", "_"), None) is None:
            _fail("MISSING_INPUT", f"--{name} is required", EXIT_MISSING_INPUT)


def _load_inputs(args):
    m = load_matrix(args.input)
    interest = args.interest.split(",") if args.interest else None
    design = load_design(args.design, interest=interest or [])
    if not interest:
        design.interest_cols = [0]
    if design.n_samples != m.n_samples:
        _fail(
            "PARSE_ERROR",
            f"design has {design.n_samples} samples, abundance matrix has {m.n_samples}",
            EXIT_PARSE_ERROR,
        )
    return m, design


def _cmd_estimate_mechanisms(args) -> int:
    _require(args, ["input", "design", "out"])
    m, design = _load_inputs(args)
    cfg = _run_config(args)
    part = partition_metabolites(m)
    est = run_mechanisms(m, part, design, cfg)
    save_mechanisms(est, args.out)
    write_manifest(args.out, {"input": args.input, "design": args.design}, cfg)
    return 0


def _cmd_factors(args) -> int:
    _require(args, ["input", "design", "mech", "out"])
    m, design = _load_inputs(args)
    cfg = _run_config(args)
    part = partition_metabolites(m)
    mech = load_mechanisms(args.mech, expected_cdf=cfg.cdf)
    fe, _, _ = run_factor_analysis(m, part, design, mech, cfg)
    save_factors(fe, args.out)
    write_manifest(
        args.out,
        {"input": args.input, "design": args.design, "mech": args.mech},
        cfg,
    )
    return 0


def _cmd_da(args) -> int:
    _require(args, ["input", "design", "mech", "out"])
    m, design = _load_inputs(args)
    cfg = _run_config(args)
    part = partition_metabolites(m)
    mech = load_mechanisms(args.mech, expected_cdf=cfg.cdf)
    table, _, fe, _ = run_differential_abundance(
        m, design, cfg, part=part, mech=mech
    )
    table.write_tsv(args.out)
    if args.factors_out:
        save_factors(fe, args.factors_out)
    write_manifest(
        args.out,
        {"input": args.input, "design": args.design, "mech": args.mech},
        cfg,
    )
    return 0


def _cmd_gwas(args) -> int:
    _require(args, ["input", "design", "mech", "factors", "geno", "out"])
    m, design = _load_inputs(args)
    cfg = _run_config(args)
    part = partition_metabolites(m)
    mech = load_mechanisms(args.mech, expected_cdf=cfg.cdf)
    fe = load_factors(args.factors)
    geno = load_genotypes(args.geno)
    if geno.g.shape[1] != m.n_samples:
        _fail(
            "PARSE_ERROR",
            f"genotypes have {geno.g.shape[1]} samples, abundance matrix has "
            f"{m.n_samples}",
            EXIT_PARSE_ERROR,
        )
    _, fits, fe, mech = run_differential_abundance(
        m, design, cfg, part=part, mech=mech, fe=fe
    )
    scan = run_gwas(
        m, part, design, mech, fe, fits, geno, cfg.cdf, cfg.rule(), GwasConfig()
    )
    with open(args.out, "w") as fh:
        for snp in scan.skipped_snps:
            fh.write(f"# skipped_monomorphic\t{snp}\n")
        fh.write(
            "metabolite\tsnp\teta_e\tp_e\teta_c\tp_c\teta_ce\tp_ce\tflags\n"
        )
        for chunk in scan.chunks:
            for i, snp in enumerate(chunk.snp_ids):
                fh.write(
                    f"{chunk.metabolite_id}\t{snp}\t"
                    f"{chunk.eta_e[i]!r}\t{chunk.p_e[i]!r}\t"
                    f"{chunk.eta_c[i]!r}\t{chunk.p_c[i]!r}\t"
                    f"{chunk.eta_ce[i]!r}\t{chunk.p_ce[i]!r}\t"
                    f"{chunk.flags[i]}\n"
                )
    write_manifest(
        args.out,
        {
            "input": args.input,
            "design": args.design,
            "mech": args.mech,
            "factors": args.factors,
            "geno": args.geno,
        },
        cfg,
    )
    return 0


def _cmd_impute(args) -> int:
    _require(args, ["input", "out"])
    m = load_matrix(args.input)
    if args.method == "min":
        out = impute_minimum(m, args.scale)
    else:
        if args.k is None:
            _fail("MISSING_INPUT", "--k is required for svd imputation",
                  EXIT_MISSING_INPUT)
        result = impute_svd(m, args.k)
        out = result.matrix
        if not result.converged:
            print("impute: svd completion did not converge", file=sys.stderr)
    write_matrix(out, args.out)
    return 0


def _parse_methods(spec: str) -> list[str]:
    methods = [s.strip() for s in spec.split(",") if s.strip()]
    allowed = {"mnar", "min-impute", "svd-impute"}
    for name in methods:
        if name not in allowed:
            _fail(
                "PARSE_ERROR",
                f"unknown method {name!r}; expected subset of {sorted(allowed)}",
                EXIT_PARSE_ERROR,
            )
    return methods


def _cmd_simulate(args) -> int:
    _require(args, ["out"])
    methods = _parse_methods(args.methods)
    overrides = _read_config(args.config) if args.config else {}
    sim_kwargs = {}
    for key in ("p", "n", "k", "frac_nonzero_beta", "beta_sd", "confounding_a",
                "seed"):
        if key in overrides:
            sim_kwargs[key] = overrides[key]
    base_seed = int(sim_kwargs.pop("seed", args.seed))
    rows = []
    for rep in range(args.replicates):
        sim_cfg = SimConfig(seed=base_seed + rep, **sim_kwargs)
        truth, m, design = generate(sim_cfg)
        part = partition_metabolites(m)
        missing_flags = np.zeros(m.n_metabolites, dtype=bool)
        missing_flags[part.missing] = True
        kept = part.kept()
        tables: dict[str, MethodTable] = {}
        cfg = _run_config(args)
        cfg.k = cfg.k or sim_cfg.k
        if "mnar" in methods:
            table, _, _, _ = run_differential_abundance(m, design, cfg, part=part)
            tables["mnar"] = MethodTable(
                metabolite_ids=table.metabolite_ids,
                beta=table.beta[:, 0],
                se=table.se[:, 0],
                p=table.wald_p[:, 0],
                missing_class=np.asarray(
                    [c == "missing" for c in table.metabolite_class]
                ),
            )
        m_kept = m.subset(kept)
        for name, impute in (
            ("min-impute", lambda mm: impute_minimum(mm)),
            ("svd-impute", lambda mm: impute_svd(mm, cfg.k).matrix),
        ):
            if name not in methods:
                continue
            full = impute(m_kept)
            chat = svd_factor_estimate(full.y, design, cfg.k)
            tables[name] = ols_analysis(
                full.y,
                design,
                chat,
                m_kept.metabolite_ids,
                missing_flags[kept],
            )
        for entry in evaluate(truth, tables):
            entry["replicate"] = rep
            rows.append(entry)
    keys = ["replicate", "method"] + [
        k for k in rows[0] if k not in ("replicate", "method")
    ]
    with open(args.out, "w") as fh:
        fh.write("\t".join(keys) + "\n")
        for entry in rows:
            fh.write("\t".join(str(entry.get(k, "")) for k in keys) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mnarkit",
        description="Metabolomics inference under value-dependent missingness",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_mech = sub.add_parser("estimate-mechanisms",
                            help="fit per-metabolite selection parameters")
    p_mech.add_argument("--input")
    p_mech.add_argument("--design")
    p_mech.add_argument("--out")
    _add_common(p_mech)
    p_mech.set_defaults(func=_cmd_estimate_mechanisms)

    p_fac = sub.add_parser("factors", help="estimate latent factors")
    p_fac.add_argument("--input")
    p_fac.add_argument("--design")
    p_fac.add_argument("--mech")
    p_fac.add_argument("--out")
    _add_common(p_fac)
    p_fac.set_defaults(func=_cmd_factors)

    p_da = sub.add_parser("da", help="differential abundance inference")
    p_da.add_argument("--input")
    p_da.add_argument("--design")
    p_da.add_argument("--mech")
    p_da.add_argument("--out")
    p_da.add_argument("--factors-out", dest="factors_out", default=None)
    _add_common(p_da)
    p_da.set_defaults(func=_cmd_da)

    p_gwas = sub.add_parser("gwas", help="metabolite genome-wide score tests")
    p_gwas.add_argument("--input")
    p_gwas.add_argument("--design")
    p_gwas.add_argument("--mech")
    p_gwas.add_argument("--factors")
    p_gwas.add_argument("--geno")
    p_gwas.add_argument("--out")
    _add_common(p_gwas)
    p_gwas.set_defaults(func=_cmd_gwas)

    p_imp = sub.add_parser("impute", help="imputation baselines")
    p_imp.add_argument("--input")
    p_imp.add_argument("--out")
    p_imp.add_argument("--method", choices=("min", "svd"), default="min")
    p_imp.add_argument("--scale", type=float, default=1.0)
    p_imp.add_argument("--k", type=int, default=None)
    p_imp.set_defaults(func=_cmd_impute)

    p_sim = sub.add_parser("simulate", help="synthetic benchmark harness")
    p_sim.add_argument("--out")
    p_sim.add_argument("--methods", default="mnar,min-impute,svd-impute")
    p_sim.add_argument("--replicates", type=int, default=10)
    _add_common(p_sim)
    p_sim.set_defaults(func=_cmd_simulate)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if getattr(args, "config", None):
            _apply_config_defaults(args)
        return args.func(args)
    except CliError as err:
        print(f"{err.error_class}: {err}", file=sys.stderr)
        return err.code
    except ParseError as err:
        print(f"PARSE_ERROR: {err}", file=sys.stderr)
        return EXIT_PARSE_ERROR
    except FileNotFoundError as err:
        print(f"MISSING_INPUT: {err}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    except (ValueError, np.linalg.LinAlgError) as err:
        print(f"RUNTIME_ERROR: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
