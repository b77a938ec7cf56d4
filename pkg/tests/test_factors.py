"""Weighted factor recovery, confounder regression, and factor-count selection."""

import numpy as np
import pytest

from mnarkit.data import DesignMatrix, ObservedMatrix, partition_metabolites
from mnarkit.factors import (
    FactorConfig,
    FactorEstimate,
    WeightMatrix,
    assemble_factor_matrix,
    compute_weights,
    estimate_omega,
    fit_factors,
    init_subspace,
    select_k,
)
from mnarkit.factors import test_confounding as factor_dependence_test
from mnarkit.mechanism import MechanismEstimate
from mnarkit.selection import SelectionCdf

T4 = SelectionCdf()


def make_matrix(y, mask=None):
    p, n = y.shape
    if mask is None:
        mask = np.ones_like(y, dtype=bool)
    return ObservedMatrix(
        y=np.where(mask, y, np.nan),
        mask=mask,
        metabolite_ids=[f"met{g:04d}" for g in range(p)],
        sample_ids=[f"s{i:04d}" for i in range(n)],
    )


def design_for(n, rng=None):
    treat = np.repeat([0.0, 1.0], [n - n // 2, n // 2])
    return DesignMatrix(
        x=np.column_stack([treat, np.ones(n)]),
        column_names=["treatment", "intercept"],
        interest_cols=[0],
    )


def mech_for(ids, alpha, delta):
    k = len(ids)
    return MechanismEstimate(
        metabolite_ids=list(ids),
        alpha_hat=np.full(k, alpha),
        delta_hat=np.full(k, delta),
        posterior_sd_alpha=np.zeros(k),
        posterior_sd_delta=np.zeros(k),
        moment_norm=np.zeros(k),
        flagged=np.zeros(k, dtype=bool),
        cdf=T4,
    )


def subspace_distance(a, b):
    """Frobenius distance between column-space projectors."""
    pa = a @ np.linalg.pinv(a)
    pb = b @ np.linalg.pinv(b)
    return float(np.linalg.norm(pa - pb))


class TestComputeWeights:
    def make_mixed(self):
        rng = np.random.default_rng(0)
        n = 40
        y = 18 + rng.standard_normal((6, n))
        mask = np.ones_like(y, dtype=bool)
        mask[3, :10] = False  # 25% missing
        mask[4, :8] = False  # 20% missing
        mask[5, :30] = False  # 75% -> discarded
        m = make_matrix(y, mask)
        part = partition_metabolites(m)
        mech = mech_for(
            [m.metabolite_ids[3], m.metabolite_ids[4]], alpha=0.0, delta=16.0
        )
        return m, part, mech

    def test_complete_rows_are_ones(self):
        m, part, mech = self.make_mixed()
        w = compute_weights(m, part, mech, T4)
        assert np.all(w.w[part.complete] == 1.0)

    def test_missing_cells_zero(self):
        m, part, mech = self.make_mixed()
        w = compute_weights(m, part, mech, T4)
        kept = w.rows_used
        assert np.all((w.w[kept] == 0) == (~m.mask[kept]))

    def test_alpha_zero_gives_weight_two(self):
        m, part, mech = self.make_mixed()
        w = compute_weights(m, part, mech, T4)
        obs = m.mask[3]
        assert np.allclose(w.w[3, obs], 2.0)

    def test_clamping_recorded(self):
        m, part, _ = self.make_mixed()
        mech = mech_for(
            [m.metabolite_ids[3], m.metabolite_ids[4]], alpha=5.0, delta=40.0
        )
        w = compute_weights(m, part, mech, T4, max_weight=50.0)
        assert w.n_clamped > 0
        assert w.w.max() <= 50.0


class TestInitSubspace:
    def test_noiseless_rank_one(self):
        rng = np.random.default_rng(1)
        n = 50
        x = design_for(n)
        c = x.project_out(rng.standard_normal((n, 1)))
        c /= np.linalg.norm(c)
        ell = rng.standard_normal((12, 1))
        m = make_matrix(ell @ c.T)
        part = partition_metabolites(m)
        init = init_subspace(m, part, x, 1)
        assert subspace_distance(init, c) < 1e-8

    def test_confounded_factor_still_orthogonal(self):
        rng = np.random.default_rng(2)
        n = 60
        x = design_for(n)
        c = rng.standard_normal((n, 2)) + 2.0 * x.x[:, [0, 0]]
        y = rng.standard_normal((15, 2)) @ c.T + 0.1 * rng.standard_normal((15, n))
        m = make_matrix(y)
        part = partition_metabolites(m)
        init = init_subspace(m, part, x, 2)
        assert np.max(np.abs(x.x.T @ init)) < 1e-8

    def test_rank_deficiency_error(self):
        n = 30
        x = design_for(n)
        rng = np.random.default_rng(3)
        c = x.project_out(rng.standard_normal((n, 1)))
        y = rng.standard_normal((8, 1)) @ c.T
        m = make_matrix(y)
        part = partition_metabolites(m)
        with pytest.raises(ValueError, match="smaller k"):
            init_subspace(m, part, x, 3)


def simulate_factor_data(rng, n, p, k, missing=True, alpha=1.2, delta=16.0,
                         beta=None, confound=0.0):
    x = design_for(n)
    c = rng.standard_normal((n, k)) + confound * x.x[:, [0] * k]
    ell = rng.normal(0.0, 0.8, (p, k))
    mu = rng.normal(18.0, 1.0, p)
    b = np.zeros(p) if beta is None else beta
    y = mu[:, None] + np.outer(b, x.x[:, 0]) + ell @ c.T
    y = y + 0.5 * rng.standard_normal((p, n))
    if missing:
        from mnarkit.selection import psi

        probs = psi(T4, alpha * (y - delta), 0)
        mask = rng.random((p, n)) < probs
        need = mask.sum(axis=1) < max(k + 3, 5)
        mask[need] = True
    else:
        mask = np.ones_like(y, dtype=bool)
    m = make_matrix(y, mask)
    return m, x, c, ell


class TestFitFactors:
    def test_no_missing_matches_truncated_svd(self):
        rng = np.random.default_rng(4)
        n, p, k = 80, 60, 3
        m, x, c, ell = simulate_factor_data(rng, n, p, k, missing=False)
        part = partition_metabolites(m)
        w = compute_weights(m, part, mech_for([], 0, 0), T4)
        init = init_subspace(m, part, x, k)
        fe = fit_factors(m, x, w, k, init, FactorConfig())
        resid = x.project_out(m.y.T).T
        _, _, vt = np.linalg.svd(resid, full_matrices=False)
        assert subspace_distance(fe.c_perp, vt[:k].T) <= 1e-6
        assert fe.converged

    def test_k_zero_reduces_to_design_regression(self):
        rng = np.random.default_rng(5)
        n, p = 40, 10
        m, x, _, _ = simulate_factor_data(rng, n, p, 1, missing=False)
        part = partition_metabolites(m)
        w = compute_weights(m, part, mech_for([], 0, 0), T4)
        fe = fit_factors(m, x, w, 0, np.zeros((n, 0)), FactorConfig())
        theta = np.linalg.solve(x.x.T @ x.x, x.x.T @ m.y.T).T
        assert np.allclose(fe.coefs, theta, atol=1e-10)
        expected_obj = float(((m.y - theta @ x.x.T) ** 2).sum())
        assert fe.objective_trace[-1] == pytest.approx(expected_obj, rel=1e-12)

    def test_objective_monotone_with_missing(self):
        rng = np.random.default_rng(6)
        n, p, k = 100, 80, 2
        m, x, c, ell = simulate_factor_data(rng, n, p, k, missing=True)
        part = partition_metabolites(m)
        mech = mech_for([m.metabolite_ids[g] for g in part.missing], 1.2, 16.0)
        w = compute_weights(m, part, mech, T4)
        init = init_subspace(m, part, x, k)
        fe = fit_factors(m, x, w, k, init, FactorConfig())
        trace = np.asarray(fe.objective_trace)
        assert np.all(np.diff(trace) <= 1e-9 * np.maximum(trace[:-1], 1.0))
        fe.check_orthogonality(x)

    def test_rotation_invariance_of_subspace(self):
        rng = np.random.default_rng(7)
        n, p, k = 90, 70, 3
        m, x, _, _ = simulate_factor_data(rng, n, p, k, missing=True)
        part = partition_metabolites(m)
        mech = mech_for([m.metabolite_ids[g] for g in part.missing], 1.2, 16.0)
        w = compute_weights(m, part, mech, T4)
        init = init_subspace(m, part, x, k)
        rot = np.linalg.qr(rng.standard_normal((k, k)))[0]
        cfg = FactorConfig(tol=1e-12, max_iter=500)
        fe1 = fit_factors(m, x, w, k, init, cfg)
        fe2 = fit_factors(m, x, w, k, init @ rot, cfg)
        assert subspace_distance(fe1.c_perp, fe2.c_perp) < 1e-6

    def test_oracle_weight_error_shrinks_with_n(self):
        # With true-mechanism weights the subspace error should fall as
        # the sample size grows.
        errs = []
        for n in (150, 300, 600):
            dists = []
            for seed in range(3):
                rng = np.random.default_rng(100 + seed)
                p, k = n, 2
                m, x, c, ell = simulate_factor_data(rng, n, p, k, missing=True)
                part = partition_metabolites(m)
                mech = mech_for(
                    [m.metabolite_ids[g] for g in part.missing], 1.2, 16.0
                )
                w = compute_weights(m, part, mech, T4)
                init = init_subspace(m, part, x, k)
                fe = fit_factors(m, x, w, k, init, FactorConfig())
                dists.append(subspace_distance(fe.c_perp, x.project_out(c)))
            errs.append(np.mean(dists))
        assert errs[2] < errs[1] < errs[0]


class TestEstimateOmega:
    def test_exact_recovery_no_noise(self):
        rng = np.random.default_rng(8)
        p, k, d = 30, 2, 2
        ell = rng.standard_normal((p, k))
        omega = rng.standard_normal((d, k))
        coefs = ell @ omega.T
        n = 50
        x = design_for(n)
        fe = FactorEstimate(
            c_perp=np.zeros((n, k)),
            loadings=ell,
            coefs=coefs,
            rows_used=np.arange(p),
            k=k,
            n_iter=1,
            converged=True,
        )
        m = make_matrix(18 + rng.standard_normal((p, n)))
        w = WeightMatrix(w=np.ones((p, n)), rows_used=np.arange(p))
        res = estimate_omega(fe, m, x, w, FactorConfig(refine_iters=0))
        assert np.allclose(res.omega, omega, atol=1e-10)

    def test_hand_scalar_case(self):
        # b = (2, 4), l = (1, 2) -> omega = (2*1 + 4*2) / (1 + 4) = 2.
        n = 10
        x = DesignMatrix(
            x=np.ones((n, 1)), column_names=["intercept"], interest_cols=[0]
        )
        fe = FactorEstimate(
            c_perp=np.zeros((n, 1)),
            loadings=np.array([[1.0], [2.0]]),
            coefs=np.array([[2.0], [4.0]]),
            rows_used=np.arange(2),
            k=1,
            n_iter=1,
            converged=True,
        )
        m = make_matrix(np.ones((2, n)))
        w = WeightMatrix(w=np.ones((2, n)), rows_used=np.arange(2))
        res = estimate_omega(fe, m, x, w, FactorConfig(refine_iters=0))
        assert res.omega.shape == (1, 1)
        assert res.omega[0, 0] == pytest.approx(2.0, abs=1e-12)

    def test_closed_form_matches_brute_force(self):
        rng = np.random.default_rng(9)
        for _ in range(5):
            p = int(rng.integers(5, 20))
            k = int(rng.integers(1, 4))
            d = int(rng.integers(1, 4))
            ell = rng.standard_normal((p, k))
            coefs = rng.standard_normal((p, d))
            n = 30
            x = DesignMatrix(
                x=np.column_stack([rng.standard_normal((n, d - 1)), np.ones(n)])
                if d > 1
                else np.ones((n, 1)),
                column_names=[f"c{j}" for j in range(d)],
                interest_cols=[0],
            )
            fe = FactorEstimate(
                c_perp=np.zeros((n, k)),
                loadings=ell,
                coefs=coefs,
                rows_used=np.arange(p),
                k=k,
                n_iter=1,
                converged=True,
            )
            m = make_matrix(np.ones((p, n)))
            w = WeightMatrix(w=np.ones((p, n)), rows_used=np.arange(p))
            res = estimate_omega(fe, m, x, w, FactorConfig(refine_iters=0))
            # Brute force: solve the stacked least squares columnwise.
            gram = np.zeros((k, k))
            rhs = np.zeros((k, d))
            for g in range(p):
                gram += np.outer(ell[g], ell[g])
                rhs += np.outer(ell[g], coefs[g])
            brute = np.linalg.solve(gram, rhs).T
            assert np.allclose(res.omega, brute, atol=1e-10)

    def test_refinement_reduces_confounder_bias(self):
        # Plant strong interest effects in 20% of metabolites; pruning
        # them should shrink the error of the confounder regression.
        wins = 0
        for seed in range(10):
            rng = np.random.default_rng(200 + seed)
            n, p, k = 120, 150, 2
            x = design_for(n)
            confound = 1.0
            c = rng.standard_normal((n, k)) + confound * x.x[:, [0] * k]
            ell = rng.normal(0.0, 0.8, (p, k))
            beta = np.zeros(p)
            hot = rng.random(p) < 0.2
            beta[hot] = rng.normal(0.0, 1.5, hot.sum())
            y = 18 + np.outer(beta, x.x[:, 0]) + ell @ c.T
            y = y + 0.4 * rng.standard_normal((p, n))
            m = make_matrix(y)
            part = partition_metabolites(m)
            w = compute_weights(m, part, mech_for([], 0, 0), T4)
            init = init_subspace(m, part, x, k)
            fe = fit_factors(m, x, w, k, init, FactorConfig())
            res0 = estimate_omega(fe, m, x, w, FactorConfig(refine_iters=0))
            res3 = estimate_omega(fe, m, x, w, FactorConfig(refine_iters=3))
            # Truth mapped into the fitted basis, interest row only: the
            # intercept row absorbs metabolite mean levels by design and
            # never feeds downstream statistics.
            cproj = x.project_out(c)
            basis_map = np.linalg.lstsq(cproj, np.sqrt(n) * fe.c_perp, rcond=None)[0]
            omega_basis = np.linalg.solve(x.x.T @ x.x, x.x.T @ (c @ basis_map))
            err0 = np.linalg.norm(res0.omega[0] - omega_basis[0])
            err3 = np.linalg.norm(res3.omega[0] - omega_basis[0])
            if err3 < err0:
                wins += 1
        assert wins >= 7

    def test_all_dropped_reverts(self):
        rng = np.random.default_rng(10)
        n, p, k = 60, 8, 1
        x = design_for(n)
        # Every metabolite strongly treatment-associated.
        beta = rng.normal(5.0, 0.5, p)
        y = 18 + np.outer(beta, x.x[:, 0]) + 0.1 * rng.standard_normal((p, n))
        m = make_matrix(y)
        part = partition_metabolites(m)
        w = compute_weights(m, part, mech_for([], 0, 0), T4)
        init = init_subspace(m, part, x, k)
        fe = fit_factors(m, x, w, k, init, FactorConfig())
        res = estimate_omega(fe, m, x, w, FactorConfig(refine_iters=3, q_thresh=1.0))
        assert res.reverted
        assert res.omega.shape == (2, 1)


class TestConfounding:
    def test_zero_omega_gives_p_one(self):
        x = design_for(20)
        stat, p = factor_dependence_test(np.zeros((2, 3)), x, 0)
        assert stat == 0.0
        assert p == 1.0

    def test_requires_interest_column(self):
        x = design_for(20)
        with pytest.raises(ValueError, match="interest"):
            factor_dependence_test(np.zeros((2, 3)), x, 1)

    def test_detects_strong_confounding(self):
        rng = np.random.default_rng(11)
        n, p, k = 200, 200, 2
        m, x, _, _ = simulate_factor_data(
            rng, n, p, k, missing=False, confound=1.5
        )
        part = partition_metabolites(m)
        w = compute_weights(m, part, mech_for([], 0, 0), T4)
        init = init_subspace(m, part, x, k)
        fe = fit_factors(m, x, w, k, init, FactorConfig())
        res = estimate_omega(fe, m, x, w, FactorConfig())
        stat, pval = factor_dependence_test(res.omega, x, 0)
        assert pval < 1e-6


class TestSelectK:
    def test_pure_noise_gives_zero(self):
        rng = np.random.default_rng(12)
        y = 18 + rng.standard_normal((60, 80))
        m = make_matrix(y)
        part = partition_metabolites(m)
        x = design_for(80)
        assert select_k(m, part, x, seed=0) == 0

    def test_planted_three_factors(self):
        hits = 0
        for seed in range(10):
            rng = np.random.default_rng(300 + seed)
            n, p, k = 150, 150, 3
            x = design_for(n)
            c = rng.standard_normal((n, k))
            ell = rng.normal(0.0, np.sqrt(0.5), (p, k))
            y = 18 + ell @ c.T + rng.standard_normal((p, n))
            m = make_matrix(y)
            part = partition_metabolites(m)
            if select_k(m, part, x, seed=seed) == 3:
                hits += 1
        assert hits >= 8

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(13)
        y = 18 + rng.standard_normal((40, 50))
        m = make_matrix(y)
        part = partition_metabolites(m)
        x = design_for(50)
        assert select_k(m, part, x, seed=5) == select_k(m, part, x, seed=5)


class TestAssemble:
    def test_scaled_composition(self):
        rng = np.random.default_rng(14)
        n, k, d = 30, 2, 2
        x = design_for(n)
        c_perp = np.linalg.qr(x.project_out(rng.standard_normal((n, k))))[0]
        fe = FactorEstimate(
            c_perp=c_perp,
            loadings=rng.standard_normal((5, k)),
            coefs=rng.standard_normal((5, d)),
            rows_used=np.arange(5),
            k=k,
            n_iter=1,
            converged=True,
        )
        omega = rng.standard_normal((d, k))
        assemble_factor_matrix(fe, x, omega)
        assert np.allclose(fe.c_hat, np.sqrt(n) * c_perp + x.x @ omega)
