import numpy as np
import pytest

from conftest import rel_err, synthetic_cov
from kfacopt.errors import SizeError, StateError
from kfacopt.linalg import dense_kron
from kfacopt.network import Architecture, forward, init_params, loss, params_from_weights
from kfacopt.oracle import (
    coarse_entry_by_block_sum,
    coarse_entry_by_chain,
    dense_ftilde,
    dense_two_level_operator,
    exact_mse_fisher,
    fd_gradient,
    mc_fisher,
    restriction_matrices,
)
from kfacopt.precond import DampingConfig, apply_two_level, assemble_coarse, build_block_inverses
from kfacopt.stats import init_cov


class TestDenseFtilde:
    def test_single_layer_equals_kron(self, rng):
        cov = synthetic_cov((3, 2), "full", rng)
        assert np.array_equal(dense_ftilde(cov),
                              dense_kron(cov.A[(0, 0)], cov.G[(0, 0)]))

    def test_blockwise_index_spot_check(self, rng):
        cov = synthetic_cov((2, 3, 1), "full", rng)
        f = dense_ftilde(cov)
        a = cov.A[(1, 0)]  # 4 x 3
        g = cov.G[(1, 0)]  # 1 x 3
        # block (1, 0) starts at row 9 (layer 0 holds 3*3 parameters); entry
        # (k, l) of kron(a, g) is a[k // rows(g), l // cols(g)] * g[k % ., l % .]
        for k in range(4):
            for l in range(9):
                expected = a[k // 1, l // 3] * g[k % 1, l % 3]
                assert f[9 + k, l] == pytest.approx(expected, rel=1e-12)

    def test_symmetric_when_pairs_consistent(self, rng):
        cov = synthetic_cov((2, 3, 2), "full", rng)
        f = dense_ftilde(cov)
        assert np.max(np.abs(f - f.T)) < 1e-12

    def test_cap(self, rng):
        cov = synthetic_cov((3, 2), "full", rng)
        with pytest.raises(SizeError):
            dense_ftilde(cov, cap=4)


class TestRestrictionMatrices:
    def test_shapes_and_content(self):
        vs, z = restriction_matrices([2, 3])
        assert [v.shape for v in vs] == [(2, 5), (3, 5)]
        assert np.array_equal(z, [[1, 1, 0, 0, 0], [0, 0, 1, 1, 1]])
        assert np.array_equal(vs[0] @ np.arange(5.0), [0.0, 1.0])


class TestDenseTwoLevelOperator:
    def test_single_layer_identity_hand_case(self):
        cov = init_cov((1, 2), "full")
        cov.A[(0, 0)] = np.eye(2)
        cov.G[(0, 0)] = np.eye(2)
        op = dense_two_level_operator(cov, damping=0.0)
        n = 4
        expected = np.eye(n) + np.ones((n, n)) / n
        assert rel_err(op, expected) < 1e-12

    def test_coarse_term_removed_matches_one_level(self, rng):
        cov = synthetic_cov((3, 2, 1), "full", rng)
        lam = 1e-2
        op = dense_two_level_operator(cov, lam, include_coarse=False)
        blocks = build_block_inverses(cov, DampingConfig(lam, "eig"))
        grad = rng.standard_normal(op.shape[0])
        assert rel_err(op @ grad, apply_two_level(blocks, None, grad, lam)) < 1e-8

    def test_matches_fast_path(self, rng):
        cov = synthetic_cov((2, 3, 2), "full", rng)
        lam = 1e-2
        op = dense_two_level_operator(cov, lam)
        blocks = build_block_inverses(cov, DampingConfig(lam, "eig"))
        coarse = assemble_coarse(cov)
        grad = rng.standard_normal(op.shape[0])
        assert rel_err(apply_two_level(blocks, coarse, grad, lam), op @ grad) < 1e-8


class TestCoarseEntryOracles:
    def test_three_routes_agree(self, rng):
        cov = synthetic_cov((3, 4, 2, 2), "full", rng)
        coarse = assemble_coarse(cov)
        for (i, j) in cov.pairs():
            by_sum = coarse_entry_by_block_sum(cov, i, j)
            by_chain = coarse_entry_by_chain(cov, i, j)
            fast = coarse.coarse_fisher[i, j]
            assert rel_err(fast, by_sum) < 1e-10
            assert rel_err(by_chain, by_sum) < 1e-10


class TestFdGradient:
    def test_quadratic_toy_exact(self):
        # 1-layer linear + mse is quadratic in the weights: central differences
        # are exact up to round-off
        arch = Architecture((2, 1), ("identity",), (False,), "mse")
        params = params_from_weights(arch, [np.array([[0.5, -0.2, 0.1]])])
        x = np.array([[1.0, 2.0], [3.0, -1.0]])
        y = np.array([[0.3, -0.6]])
        fd, _, _ = fd_gradient(arch, params, x, y, step=1e-4)
        out, _ = forward(arch, params, x)
        residual = out - y
        a_bar = np.vstack([x, np.ones((1, 2))])
        expected = (residual @ a_bar.T / 2).reshape(-1, order="F")
        assert rel_err(fd, expected) < 1e-9

    def test_zero_at_stationary_point(self, rng):
        arch = Architecture.mlp(3, [2], 2, activation="tanh", loss_kind="mse")
        params = init_params(arch, rng)
        x = rng.standard_normal((3, 4))
        out, _ = forward(arch, params, x)
        fd, _, _ = fd_gradient(arch, params, x, out.copy(), step=1e-4)
        assert np.max(np.abs(fd)) < 1e-7  # zero up to O(step^2) truncation

    def test_does_not_mutate_params(self, rng):
        arch = Architecture.mlp(3, [2], 1, loss_kind="mse")
        params = init_params(arch, rng)
        before = params.theta.copy()
        fd_gradient(arch, params, rng.standard_normal((3, 4)), rng.standard_normal((1, 4)))
        assert np.array_equal(params.theta, before)


class TestMcFisher:
    def test_linear_mse_matches_exact_curvature(self):
        rng = np.random.default_rng(42)
        arch = Architecture((2, 2), ("identity",), (False,), "mse")
        params = params_from_weights(arch, [rng.standard_normal((2, 3)) * 0.5])
        pool = rng.standard_normal((2, 32))
        exact = exact_mse_fisher(arch, params, pool)
        approx, se = mc_fisher(arch, params, pool, 20_000, rng, return_stderr=True)
        assert np.all(np.abs(approx - exact) <= 5.0 * se + 1e-12)

    def test_standard_error_scaling(self):
        arch = Architecture((2, 1), ("identity",), (False,), "mse")
        rng = np.random.default_rng(3)
        params = params_from_weights(arch, [rng.standard_normal((1, 3))])
        pool = rng.standard_normal((2, 16))
        _, se1 = mc_fisher(arch, params, pool, 5_000, rng, return_stderr=True)
        _, se4 = mc_fisher(arch, params, pool, 20_000, rng, return_stderr=True)
        ratio = np.median(se1 / np.maximum(se4, 1e-300))
        assert 2.0 * 0.8 <= ratio <= 2.0 * 1.2  # quadrupling samples halves the se

    def test_symmetric_pool_kills_weight_bias_cross_terms(self):
        # zero weights, sign-symmetric input pool: the exact curvature has no
        # coupling between the input weights and the bias
        arch = Architecture((2, 1), ("identity",), (False,), "mse")
        params = params_from_weights(arch, [np.zeros((1, 3))])
        rng = np.random.default_rng(5)
        half = rng.standard_normal((2, 8))
        pool = np.hstack([half, -half])
        approx, se = mc_fisher(arch, params, pool, 20_000, rng, return_stderr=True)
        assert abs(approx[0, 2]) <= 5.0 * se[0, 2] + 1e-12
        assert abs(approx[1, 2]) <= 5.0 * se[1, 2] + 1e-12

    def test_rejects_batchnorm(self, rng):
        arch = Architecture.mlp(2, [2], 1, batchnorm=True, loss_kind="mse")
        params = init_params(arch, rng)
        with pytest.raises(StateError):
            mc_fisher(arch, params, np.zeros((2, 4)), 100, rng)


class TestExactMseFisher:
    def test_single_linear_layer_closed_form(self):
        # f = W x_bar: per-sample J = x_bar^T (output dim 1), so the exact
        # curvature is the second moment of the homogeneous inputs
        arch = Architecture((2, 1), ("identity",), (False,), "mse")
        params = params_from_weights(arch, [np.array([[0.3, -0.7, 0.2]])])
        rng = np.random.default_rng(8)
        pool = rng.standard_normal((2, 10))
        a_bar = np.vstack([pool, np.ones((1, 10))])
        expected = a_bar @ a_bar.T / 10
        assert rel_err(exact_mse_fisher(arch, params, pool), expected) < 1e-12
