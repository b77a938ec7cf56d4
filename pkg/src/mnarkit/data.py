"""Ingest, validate, and partition abundance matrices and design matrices.

File conventions
----------------
Abundance matrix: TSV/CSV with sample ids on the first row, metabolite ids
in the first column, one metabolite per row. Empty cells or ``NA`` mark
missing observations. Values are log2 abundances.

Design matrix: TSV/CSV with a header naming the covariates, one sample per
row (first column = sample id). Interest columns are selected by name; an
intercept is appended unless one is already present.

Genotype matrix: TSV with SNP ids in the first column, entries in {0,1,2}.

Missing cells are carried by the boolean mask only; ``y`` holds NaN at
masked positions so that accidental use of a missing value poisons the
result instead of silently passing a fill value.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

__all__ = [
    "ObservedMatrix",
    "DesignMatrix",
    "MetabolitePartition",
    "GenotypeMatrix",
    "ParseError",
    "load_matrix",
    "write_matrix",
    "load_design",
    "load_genotypes",
    "partition_metabolites",
]

MISSING_TOKENS = ("", "NA", "NaN", "nan")

# Partition thresholds on the fraction of missing cells per metabolite:
# strictly below LOW -> complete; between LOW and HIGH inclusive -> missing;
# strictly above HIGH -> discarded.
COMPLETE_THRESHOLD = 0.05
DISCARD_THRESHOLD = 0.50


class ParseError(ValueError):
    """Malformed input file; message carries the offending location."""


@dataclass
class ObservedMatrix:
    """A p x n log-abundance matrix with its missingness mask.

    ``mask[g, i]`` is True exactly when metabolite g was observed in sample
    i; ``y`` is NaN wherever the mask is False.
    """

    y: NDArray[np.float64]
    mask: NDArray[np.bool_]
    metabolite_ids: list[str]
    sample_ids: list[str]

    def __post_init__(self) -> None:
        self.y = np.asarray(self.y, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.y.shape != self.mask.shape:
            raise ValueError("y and mask shapes differ")
        if self.y.shape != (len(self.metabolite_ids), len(self.sample_ids)):
            raise ValueError("id lists inconsistent with matrix shape")
        obs_finite = np.isfinite(self.y[self.mask])
        if not obs_finite.all():
            raise ValueError("observed cells must be finite")
        self.y = np.where(self.mask, self.y, np.nan)

    @property
    def n_metabolites(self) -> int:
        return self.y.shape[0]

    @property
    def n_samples(self) -> int:
        return self.y.shape[1]

    def missing_fraction(self) -> NDArray[np.float64]:
        return 1.0 - self.mask.mean(axis=1)

    def subset(self, rows) -> "ObservedMatrix":
        """New matrix restricted to the given metabolite rows."""
        rows = np.asarray(rows, dtype=np.intp)
        return ObservedMatrix(
            y=self.y[rows],
            mask=self.mask[rows],
            metabolite_ids=[self.metabolite_ids[g] for g in rows],
            sample_ids=list(self.sample_ids),
        )


@dataclass
class DesignMatrix:
    """Observed covariates, interest columns first, full column rank."""

    x: NDArray[np.float64]
    column_names: list[str]
    interest_cols: list[int]
    includes_intercept: bool = True

    def __post_init__(self) -> None:
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim != 2:
            raise ValueError("design matrix must be 2-D")
        if len(self.column_names) != self.x.shape[1]:
            raise ValueError("column_names inconsistent with design shape")
        if np.linalg.matrix_rank(self.x) < self.x.shape[1]:
            raise ValueError("design matrix is rank deficient")
        ones = np.all(np.isclose(self.x, 1.0), axis=0)
        if self.includes_intercept and not ones.any():
            raise ValueError("includes_intercept set but no constant column found")

    @property
    def n_samples(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def nuisance_cols(self) -> list[int]:
        return [j for j in range(self.d) if j not in self.interest_cols]

    def projector_complement(self) -> NDArray[np.float64]:
        """The n x n orthogonal projection onto the complement of im(X)."""
        q, _ = np.linalg.qr(self.x)
        return np.eye(self.n_samples) - q @ q.T

    def project_out(self, m: NDArray) -> NDArray[np.float64]:
        """Residualize the columns of ``m`` against the design."""
        q, _ = np.linalg.qr(self.x)
        return m - q @ (q.T @ m)


@dataclass
class MetabolitePartition:
    """Index sets by missingness class; the three sets partition [p]."""

    complete: NDArray[np.intp]
    missing: NDArray[np.intp]
    discarded: NDArray[np.intp]

    def __post_init__(self) -> None:
        union = np.concatenate([self.complete, self.missing, self.discarded])
        if len(np.unique(union)) != len(union):
            raise ValueError("partition classes overlap")

    def kept(self) -> NDArray[np.intp]:
        """Complete and missing indices in original order."""
        return np.sort(np.concatenate([self.complete, self.missing]))


@dataclass
class GenotypeMatrix:
    """S x n genotype dosage matrix with entries in {0, 1, 2}."""

    g: NDArray[np.float64]
    snp_ids: list[str]

    def __post_init__(self) -> None:
        self.g = np.asarray(self.g, dtype=np.float64)
        if not np.isin(self.g, (0.0, 1.0, 2.0)).all():
            raise ValueError("genotype entries must be in {0, 1, 2}")
        if len(self.snp_ids) != self.g.shape[0]:
            raise ValueError("snp_ids inconsistent with genotype shape")

    @property
    def n_snps(self) -> int:
        return self.g.shape[0]

    def minor_allele_counts(self) -> NDArray[np.int64]:
        totals = self.g.sum(axis=1)
        return np.minimum(totals, 2 * self.g.shape[1] - totals).astype(np.int64)


def _delimiter(fmt: str) -> str:
    if fmt == "tsv":
        return "\t"
    if fmt == "csv":
        return ","
    raise ValueError(f"format must be 'tsv' or 'csv', got {fmt!r}")


def _read_rows(path, fmt: str) -> list[list[str]]:
    with open(path, newline="") as fh:
        rows = [row for row in csv.reader(fh, delimiter=_delimiter(fmt))]
    # Skip '#'-prefixed metadata lines emitted by our own writers.
    rows = [r for r in rows if not (r and r[0].startswith("#"))]
    if not rows:
        raise ParseError(f"{path}: empty file")
    return rows


def _parse_cell(token: str, path, row_id: str, col_id: str) -> float:
    token = token.strip()
    if token in MISSING_TOKENS:
        return np.nan
    try:
        return float(token)
    except ValueError:
        raise ParseError(
            f"{path}: non-numeric value {token!r} at row {row_id!r}, "
            f"column {col_id!r}"
        ) from None


def _check_duplicates(ids: list[str], kind: str, path) -> None:
    seen: set[str] = set()
    for name in ids:
        if name in seen:
            raise ParseError(f"{path}: duplicate {kind} id {name!r}")
        seen.add(name)


def load_matrix(path, fmt: str = "tsv") -> ObservedMatrix:
    """Parse an abundance matrix; empty cells and NA are missing."""
    rows = _read_rows(path, fmt)
    header = rows[0]
    sample_ids = [s.strip() for s in header[1:]]
    if not sample_ids:
        raise ParseError(f"{path}: header has no sample columns")
    _check_duplicates(sample_ids, "sample", path)
    n = len(sample_ids)
    metabolite_ids: list[str] = []
    values: list[list[float]] = []
    for idx, row in enumerate(rows[1:], start=2):
        if len(row) != n + 1:
            raise ParseError(
                f"{path}: line {idx} has {len(row)} fields, expected {n + 1}"
            )
        met = row[0].strip()
        metabolite_ids.append(met)
        values.append(
            [_parse_cell(tok, path, met, sample_ids[j]) for j, tok in enumerate(row[1:])]
        )
    if not metabolite_ids:
        raise ParseError(f"{path}: no metabolite rows")
    _check_duplicates(metabolite_ids, "metabolite", path)
    y = np.asarray(values, dtype=np.float64)
    mask = np.isfinite(y)
    # All-missing rows are tolerated here; partitioning discards them.
    return ObservedMatrix(y, mask, metabolite_ids, sample_ids)


def write_matrix(m: ObservedMatrix, path, fmt: str = "tsv") -> None:
    """Write an abundance matrix; missing cells become NA.

    Uses shortest round-trip float formatting, so load(write(m)) == m
    bit-exactly for finite entries.
    """
    delim = _delimiter(fmt)
    with open(path, "w", newline="") as fh:
        fh.write(delim.join(["metabolite", *m.sample_ids]) + "\n")
        for g, met in enumerate(m.metabolite_ids):
            cells = [
                repr(float(m.y[g, i])) if m.mask[g, i] else "NA"
                for i in range(m.n_samples)
            ]
            fh.write(delim.join([met, *cells]) + "\n")


def load_design(
    path,
    interest: list[str],
    fmt: str = "tsv",
    add_intercept: bool = True,
) -> DesignMatrix:
    """Parse a design matrix, reordering so interest columns come first."""
    rows = _read_rows(path, fmt)
    header = [h.strip() for h in rows[0]]
    names = header[1:]
    if not names:
        raise ParseError(f"{path}: design header has no covariate columns")
    _check_duplicates(names, "covariate", path)
    for name in interest:
        if name not in names:
            raise ParseError(f"{path}: interest column {name!r} not in header")
    data = []
    for idx, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise ParseError(
                f"{path}: line {idx} has {len(row)} fields, expected {len(header)}"
            )
        data.append(
            [_parse_cell(tok, path, row[0].strip(), names[j]) for j, tok in enumerate(row[1:])]
        )
    x = np.asarray(data, dtype=np.float64)
    if np.isnan(x).any():
        raise ParseError(f"{path}: design matrix cannot contain missing values")
    order = [names.index(c) for c in interest]
    order += [j for j in range(len(names)) if j not in order]
    x = x[:, order]
    ordered_names = [names[j] for j in order]
    has_const = np.any(np.all(np.isclose(x, 1.0), axis=0))
    if add_intercept and not has_const:
        x = np.column_stack([x, np.ones(x.shape[0])])
        ordered_names.append("intercept")
    return DesignMatrix(
        x=x,
        column_names=ordered_names,
        interest_cols=list(range(len(interest))),
        includes_intercept=True,
    )


def load_genotypes(path, fmt: str = "tsv") -> GenotypeMatrix:
    """Parse an S x n genotype matrix of {0,1,2} dosages."""
    rows = _read_rows(path, fmt)
    header = rows[0]
    n = len(header) - 1
    snp_ids = []
    values = []
    for idx, row in enumerate(rows[1:], start=2):
        if len(row) != n + 1:
            raise ParseError(
                f"{path}: line {idx} has {len(row)} fields, expected {n + 1}"
            )
        snp = row[0].strip()
        snp_ids.append(snp)
        parsed = [_parse_cell(tok, path, snp, header[j + 1]) for j, tok in enumerate(row[1:])]
        if any(np.isnan(v) for v in parsed):
            raise ParseError(f"{path}: missing genotype for SNP {snp!r}")
        values.append(parsed)
    _check_duplicates(snp_ids, "SNP", path)
    return GenotypeMatrix(np.asarray(values), snp_ids)


def partition_metabolites(m: ObservedMatrix) -> MetabolitePartition:
    """Split metabolites by missing fraction: <5%, 5-50% inclusive, >50%."""
    frac = m.missing_fraction()
    complete = np.flatnonzero(frac < COMPLETE_THRESHOLD)
    missing = np.flatnonzero((frac >= COMPLETE_THRESHOLD) & (frac <= DISCARD_THRESHOLD))
    discarded = np.flatnonzero(frac > DISCARD_THRESHOLD)
    return MetabolitePartition(complete, missing, discarded)
