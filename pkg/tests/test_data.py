"""Parsing, validation, round-trips, and the missingness partition."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mnarkit.data import (
    DesignMatrix,
    GenotypeMatrix,
    ObservedMatrix,
    ParseError,
    load_design,
    load_genotypes,
    load_matrix,
    partition_metabolites,
    write_matrix,
)


def write_lines(path, lines):
    path.write_text("\n".join(lines) + "\n")


class TestLoadMatrix:
    def test_single_na(self, tmp_path):
        path = tmp_path / "y.tsv"
        write_lines(
            path,
            [
                "metabolite\ts1\ts2",
                "m1\t1.5\t2.5",
                "m2\tNA\t0.25",
                "m3\t-1.0\t4.0",
            ],
        )
        m = load_matrix(path)
        assert m.mask.sum() == 5
        assert not m.mask[1, 0]
        assert np.isnan(m.y[1, 0])
        assert m.y[0, 1] == 2.5

    def test_duplicate_metabolite_id(self, tmp_path):
        path = tmp_path / "y.tsv"
        write_lines(path, ["metabolite\ts1", "dup\t1.0", "dup\t2.0"])
        with pytest.raises(ParseError, match="dup"):
            load_matrix(path)

    def test_ragged_row(self, tmp_path):
        path = tmp_path / "y.tsv"
        write_lines(path, ["metabolite\ts1\ts2", "m1\t1.0"])
        with pytest.raises(ParseError, match="line 2"):
            load_matrix(path)

    def test_non_numeric_cell_names_location(self, tmp_path):
        path = tmp_path / "y.tsv"
        write_lines(path, ["metabolite\ts1\ts2", "m1\t1.0\tbogus"])
        with pytest.raises(ParseError, match="'m1'.*'s2'"):
            load_matrix(path)

    def test_all_missing_metabolite_is_discarded(self, tmp_path):
        path = tmp_path / "y.tsv"
        write_lines(path, ["metabolite\ts1\ts2", "m1\tNA\tNA", "m2\t1.0\t2.0"])
        m = load_matrix(path)
        part = partition_metabolites(m)
        assert part.discarded.tolist() == [0]
        assert part.complete.tolist() == [1]

    def test_csv_format(self, tmp_path):
        path = tmp_path / "y.csv"
        write_lines(path, ["metabolite,s1,s2", "m1,1.0,NA"])
        m = load_matrix(path, fmt="csv")
        assert m.y[0, 0] == 1.0 and not m.mask[0, 1]

    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(5)
        y = rng.standard_normal((7, 9)) * np.pi
        mask = rng.random((7, 9)) > 0.3
        mask[:, 0] = True  # keep every metabolite observed somewhere
        m = ObservedMatrix(
            y=np.where(mask, y, np.nan),
            mask=mask,
            metabolite_ids=[f"m{i}" for i in range(7)],
            sample_ids=[f"s{i}" for i in range(9)],
        )
        path = tmp_path / "roundtrip.tsv"
        write_matrix(m, path)
        back = load_matrix(path)
        assert back.metabolite_ids == m.metabolite_ids
        assert back.sample_ids == m.sample_ids
        assert np.array_equal(back.mask, m.mask)
        assert np.array_equal(back.y[back.mask], m.y[m.mask])

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_round_trip_property(self, seed):
        import tempfile
        from pathlib import Path

        rng = np.random.default_rng(seed)
        p, n = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        y = rng.standard_normal((p, n)) * 10.0 ** rng.integers(-3, 4)
        mask = rng.random((p, n)) > 0.4
        mask[:, 0] = True
        m = ObservedMatrix(
            y=np.where(mask, y, np.nan),
            mask=mask,
            metabolite_ids=[f"m{i}" for i in range(p)],
            sample_ids=[f"s{i}" for i in range(n)],
        )
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "m.tsv"
            write_matrix(m, path)
            back = load_matrix(path)
        assert np.array_equal(back.mask, m.mask)
        assert np.array_equal(back.y[back.mask], m.y[m.mask])


def make_matrix(missing_per_row, n=100):
    p = len(missing_per_row)
    mask = np.ones((p, n), dtype=bool)
    for g, k in enumerate(missing_per_row):
        if k:
            mask[g, :k] = False
    y = np.where(mask, 1.0, np.nan)
    return ObservedMatrix(
        y=y,
        mask=mask,
        metabolite_ids=[f"m{g}" for g in range(p)],
        sample_ids=[f"s{i}" for i in range(n)],
    )


class TestPartition:
    def test_boundaries(self):
        # 0 -> complete; 4 (<5%) -> complete; 5 (=5%) and 50 (=50%) ->
        # missing (both boundaries inclusive on the missing side);
        # 51 -> discarded.
        m = make_matrix([0, 4, 5, 50, 51])
        part = partition_metabolites(m)
        assert part.complete.tolist() == [0, 1]
        assert part.missing.tolist() == [2, 3]
        assert part.discarded.tolist() == [4]

    def test_partition_is_exhaustive(self):
        m = make_matrix([0, 10, 30, 70, 2, 55])
        part = partition_metabolites(m)
        merged = np.sort(
            np.concatenate([part.complete, part.missing, part.discarded])
        )
        assert merged.tolist() == list(range(6))

    def test_row_permutation_equivariance(self):
        counts = [0, 10, 30, 70, 2, 55]
        m = make_matrix(counts)
        part = partition_metabolites(m)
        perm = [3, 0, 5, 1, 4, 2]
        m2 = make_matrix([counts[j] for j in perm])
        part2 = partition_metabolites(m2)
        relabel = {old: new for new, old in enumerate(perm)}
        assert sorted(relabel[g] for g in part.complete) == sorted(part2.complete)
        assert sorted(relabel[g] for g in part.missing) == sorted(part2.missing)


class TestDesign:
    def test_load_reorders_interest_first(self, tmp_path):
        path = tmp_path / "x.tsv"
        write_lines(
            path,
            ["sample\tage\ttreat", "s1\t4.0\t1", "s2\t6.0\t0", "s3\t5.0\t1"],
        )
        dm = load_design(path, interest=["treat"])
        assert dm.column_names == ["treat", "age", "intercept"]
        assert dm.interest_cols == [0]
        assert dm.nuisance_cols == [1, 2]
        assert np.allclose(dm.x[:, 0], [1, 0, 1])
        assert np.allclose(dm.x[:, 2], 1.0)

    def test_unknown_interest_column(self, tmp_path):
        path = tmp_path / "x.tsv"
        write_lines(path, ["sample\tage", "s1\t4.0"])
        with pytest.raises(ParseError, match="treat"):
            load_design(path, interest=["treat"])

    def test_rank_deficient_rejected(self):
        x = np.ones((4, 2))
        with pytest.raises(ValueError, match="rank"):
            DesignMatrix(x=x, column_names=["a", "b"], interest_cols=[0])

    def test_project_out(self):
        rng = np.random.default_rng(0)
        x = DesignMatrix(
            x=np.column_stack([rng.standard_normal(20), np.ones(20)]),
            column_names=["t", "intercept"],
            interest_cols=[0],
        )
        v = rng.standard_normal((20, 3))
        res = x.project_out(v)
        assert np.max(np.abs(x.x.T @ res)) < 1e-10


class TestGenotypes:
    def test_load_and_validate(self, tmp_path):
        path = tmp_path / "g.tsv"
        write_lines(path, ["snp\ts1\ts2\ts3", "rs1\t0\t1\t2", "rs2\t2\t2\t0"])
        gm = load_genotypes(path)
        assert gm.n_snps == 2
        assert gm.minor_allele_counts().tolist() == [3, 2]

    def test_bad_entry(self, tmp_path):
        path = tmp_path / "g.tsv"
        write_lines(path, ["snp\ts1", "rs1\t3"])
        with pytest.raises(ValueError, match="0, 1, 2"):
            load_genotypes(path)

    def test_missing_genotype_rejected(self, tmp_path):
        path = tmp_path / "g.tsv"
        write_lines(path, ["snp\ts1\ts2", "rs1\t0\tNA"])
        with pytest.raises(ParseError, match="rs1"):
            load_genotypes(path)
