import numpy as np
import pytest
import scipy.sparse as sp

from windsplice.latent import (
    Ar1Block,
    Ar1Spec,
    CyclicRw2Block,
    CyclicRw2Spec,
    FixedBlock,
    FixedEffectsSpec,
    ar1_precision,
    assemble_latent,
    constrain,
    cyclic_rw2_precision,
)


def ar1_covariance(n, rho, tau):
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    return rho ** np.abs(i - j) / (tau * (1 - rho**2))


class TestAr1Precision:
    def test_three_by_three_oracle(self):
        Q = ar1_precision(Ar1Spec(n=3, rho=0.5, tau=1.0)).toarray()
        assert np.allclose(np.diag(Q), [1.0, 1.25, 1.0])
        assert Q[0, 1] == Q[1, 2] == -0.5
        cov = ar1_covariance(3, 0.5, 1.0)
        assert np.max(np.abs(Q @ cov - np.eye(3))) < 1e-12

    def test_independence_case(self):
        Q = ar1_precision(Ar1Spec(n=4, rho=0.0, tau=2.5)).toarray()
        assert np.allclose(Q, 2.5 * np.eye(4))

    def test_two_point_boundary(self):
        Q = ar1_precision(Ar1Spec(n=2, rho=0.7, tau=3.0)).toarray()
        assert np.allclose(Q, 3.0 * np.array([[1.0, -0.7], [-0.7, 1.0]]))

    def test_inverse_of_stationary_covariance_all_small_n(self):
        rng = np.random.default_rng(1)
        for n in range(1, 9):
            rho = float(rng.uniform(-0.9, 0.9))
            tau = float(rng.uniform(0.2, 5))
            Q = ar1_precision(Ar1Spec(n=n, rho=rho, tau=tau)).toarray()
            cov = ar1_covariance(n, rho, tau)
            assert np.max(np.abs(Q @ cov - np.eye(n))) < 1e-10

    def test_invalid_specs(self):
        with pytest.raises(ValueError):
            Ar1Spec(n=3, rho=1.0, tau=1.0)
        with pytest.raises(ValueError):
            Ar1Spec(n=3, rho=0.5, tau=0.0)


def explicit_second_difference(n):
    D = np.zeros((n, n))
    for i in range(n):
        D[i, i] += 1.0
        D[i, (i + 1) % n] += -2.0
        D[i, (i + 2) % n] += 1.0
    return D


class TestCyclicRw2Precision:
    def test_stencil_row(self):
        Q = cyclic_rw2_precision(CyclicRw2Spec(n=24, tau=1.0)).toarray()
        expected = np.zeros(24)
        expected[[0, 1, 2, 22, 23]] = [6.0, -4.0, 1.0, 1.0, -4.0]
        assert np.allclose(Q[0], expected)

    def test_matches_explicit_dtd(self):
        for n in (5, 7, 24):
            D = explicit_second_difference(n)
            Q = cyclic_rw2_precision(CyclicRw2Spec(n=n, tau=1.7)).toarray()
            assert np.allclose(Q, 1.7 * D.T @ D)

    def test_annihilates_constants(self):
        Q = cyclic_rw2_precision(CyclicRw2Spec(n=24, tau=2.0))
        assert np.max(np.abs(Q @ np.ones(24))) == 0.0

    def test_rank_deficiency_by_one(self):
        # circulant eigenvalues tau*(2cos(2*pi*k/n) - 2)^2 vanish only at k=0
        Q = cyclic_rw2_precision(CyclicRw2Spec(n=24, tau=1.0)).toarray()
        eig = np.linalg.eigvalsh(Q)
        assert np.sum(eig > 1e-9) == 23
        k = np.arange(24)
        expected = np.sort((2 * np.cos(2 * np.pi * k / 24) - 2) ** 2)
        assert np.allclose(np.sort(eig), expected, atol=1e-9)

    def test_rotation_invariance(self):
        Q = cyclic_rw2_precision(CyclicRw2Spec(n=12, tau=1.0)).toarray()
        rolled = np.roll(np.roll(Q, 3, axis=0), 3, axis=1)
        assert np.allclose(Q, rolled)

    def test_small_n_rejected(self):
        with pytest.raises(ValueError):
            CyclicRw2Spec(n=2, tau=1.0)


class TestAssemble:
    def test_single_fixed_block_prior(self):
        block = FixedBlock(np.ones((10, 3)), eps=1e-6)
        field = assemble_latent([block], 10)
        Q = field.precision({}).toarray()
        assert np.allclose(Q, 1e-6 * np.eye(3))
        assert field.constraints.shape == (0, 3)

    def test_dimension_bookkeeping(self):
        blocks = [
            Ar1Block(100, np.arange(100)),
            CyclicRw2Block(24, np.arange(100) % 24),
            FixedBlock(np.ones((100, 3))),
        ]
        field = assemble_latent(blocks, 100)
        assert field.total_dim == 127
        assert field.constraints.shape == (2, 127)

    def test_eta_reconstruction(self):
        rng = np.random.default_rng(0)
        n = 60
        design = np.column_stack([np.ones(n), rng.normal(size=n)])
        hours = rng.integers(0, 24, size=n)
        blocks = [
            Ar1Block(n, np.arange(n)),
            CyclicRw2Block(24, hours),
            FixedBlock(design),
        ]
        field = assemble_latent(blocks, n)
        x = rng.normal(size=field.total_dim)
        f1 = x[field.slice_of("ar1")]
        f2 = x[field.slice_of("rw2")]
        b = x[field.slice_of("fixed")]
        eta_direct = design @ b + f1 + f2[hours]
        assert np.allclose(field.A @ x, eta_direct, atol=1e-12)

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ValueError):
            assemble_latent([Ar1Block(5, np.arange(10))], 5)

    def test_sparsity_stays_linear(self):
        n = 500
        blocks = [
            Ar1Block(n, np.arange(n)),
            CyclicRw2Block(24, np.arange(n) % 24),
            FixedBlock(np.ones((n, 2))),
        ]
        field = assemble_latent(blocks, n)
        Q = field.precision({"rho1": 0.5, "tau1": 1.0, "tau2": 1.0})
        assert Q.nnz < 12 * field.total_dim

    def test_missing_design_entries_rejected(self):
        with pytest.raises(ValueError):
            FixedEffectsSpec(design=np.array([[1.0, np.nan]]))


class TestConstrain:
    def test_sum_to_zero_enforced(self):
        rng = np.random.default_rng(4)
        n = 30
        Q = ar1_precision(Ar1Spec(n=n, rho=0.6, tau=1.0))
        C = np.ones((1, n))
        x = rng.normal(size=n)
        corrected = constrain(Q, C, x)
        assert abs(corrected.sum()) < 1e-8

    def test_empty_constraints_identity(self):
        x = np.arange(5.0)
        Q = sp.eye(5)
        assert np.array_equal(constrain(Q, np.zeros((0, 5)), x), x)

    def test_matches_dense_conditioning(self):
        rng = np.random.default_rng(9)
        A = rng.normal(size=(5, 5))
        Q = sp.csc_matrix(A @ A.T + 5 * np.eye(5))
        C = np.ones((1, 5))
        cov = np.linalg.inv(Q.toarray())
        cov_cond = cov - cov @ C.T @ np.linalg.solve(C @ cov @ C.T, C @ cov)
        samples = rng.normal(size=(5, 2000))
        corrected = constrain(Q, C, samples)
        # the kriging map is linear: corrected covariance = (I-K) cov (I-K)'
        K = cov @ C.T @ np.linalg.solve(C @ cov @ C.T, C)
        mapped = (np.eye(5) - K) @ cov @ (np.eye(5) - K).T
        assert np.max(np.abs(mapped - cov_cond)) < 1e-10
        assert np.max(np.abs(corrected.sum(axis=0))) < 1e-8

    def test_singular_constraint_rejected(self):
        Q = sp.eye(3)
        C = np.zeros((1, 3))  # C Q^-1 C' = 0, singular
        with pytest.raises(ValueError):
            constrain(Q, C, np.ones(3))
