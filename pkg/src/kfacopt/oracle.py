"""Brute-force reference implementations, for tests only.

Everything here is deliberately slow and size-capped: dense curvature
assembly, explicit 0/1 restriction matrices, Monte-Carlo curvature
estimates, and finite-difference gradients. Training code never calls in.
"""

from __future__ import annotations

import numpy as np

from .errors import SizeError, StateError
from .linalg import dense_kron
from .network import Architecture, Params, backward, forward, loss, sample_labels
from .stats import CovState

DENSE_PARAM_CAP = 2000


def _layer_layout(cov: CovState) -> tuple[list[int], list[slice], int]:
    sizes = [cov.output_dim(i) * cov.input_dim(i) for i in range(cov.n_layers)]
    slices, start = [], 0
    for s in sizes:
        slices.append(slice(start, start + s))
        start += s
    return sizes, slices, start


def dense_ftilde(cov: CovState, cap: int = DENSE_PARAM_CAP) -> np.ndarray:
    """Materialize the Kronecker-factored curvature approximation, block by block.

    Diagonal-mode states produce a block-diagonal matrix; full-mode states
    fill the lower blocks from the stored pairs and mirror them above.
    """
    if not cov.initialized:
        raise StateError("no covariance estimates yet")
    sizes, slices, n = _layer_layout(cov)
    if n > cap:
        raise SizeError(f"dense curvature assembly of {n} parameters exceeds cap {cap}")
    F = np.zeros((n, n))
    for (i, j) in cov.pairs():
        block = dense_kron(cov.A[(i, j)], cov.G[(i, j)])
        F[slices[i], slices[j]] = block
        if i != j:
            F[slices[j], slices[i]] = block.T
    return F


def restriction_matrices(layer_sizes: list[int]) -> tuple[list[np.ndarray], np.ndarray]:
    """Explicit 0/1 operators: per-layer selectors V_i and the per-layer summer Z."""
    n = sum(layer_sizes)
    vs = []
    z = np.zeros((len(layer_sizes), n))
    start = 0
    for i, size in enumerate(layer_sizes):
        v = np.zeros((size, n))
        v[:, start:start + size] = np.eye(size)
        vs.append(v)
        z[i, start:start + size] = 1.0
        start += size
    return vs, z


def dense_two_level_operator(cov: CovState, damping: float, include_coarse: bool = True,
                             block_mode: str = "eig", cap: int = DENSE_PARAM_CAP) -> np.ndarray:
    """Materialize the preconditioner as an n x n matrix.

    sum_i V_i^T (B_i)^-1 V_i [+ Z^T (Z F Z^T + damping*I)^-1 Z], where B_i is
    the damped i-th diagonal block: the exact block + damping*I in "eig"
    mode, or the factored-Tikhonov surrogate in "tikhonov" mode.
    """
    sizes, slices, n = _layer_layout(cov)
    if n > cap:
        raise SizeError(f"dense operator of {n} parameters exceeds cap {cap}")
    vs, z = restriction_matrices(sizes)
    op = np.zeros((n, n))
    for i in range(cov.n_layers):
        A = cov.A[(i, i)]
        G = cov.G[(i, i)]
        A = 0.5 * (A + A.T)
        G = 0.5 * (G + G.T)
        if block_mode == "eig":
            block = dense_kron(A, G) + damping * np.eye(sizes[i])
        else:
            pi = np.sqrt((np.trace(A) / A.shape[0]) / (np.trace(G) / G.shape[0]))
            root = np.sqrt(damping)
            block = dense_kron(A + pi * root * np.eye(A.shape[0]),
                               G + (root / pi) * np.eye(G.shape[0]))
        op += vs[i].T @ np.linalg.solve(block, vs[i])
    if include_coarse:
        F = dense_ftilde(cov, cap=cap)
        coarse = z @ F @ z.T
        op += z.T @ np.linalg.solve(coarse + damping * np.eye(cov.n_layers), z)
    return op


def coarse_entry_by_block_sum(cov: CovState, i: int, j: int) -> float:
    """Coarse entry as the literal sum of the materialized (i, j) block."""
    return float(dense_kron(cov.A[(i, j)], cov.G[(i, j)]).sum())


def coarse_entry_by_chain(cov: CovState, i: int, j: int) -> float:
    """Coarse entry via the ones-matrix chain G @ ones @ A^T.

    The ones matrix is the all-ones vector with one entry per block column,
    reshaped so the products conform; for rectangular cross factors that
    forces the transpose on the input factor.
    """
    A = cov.A[(i, j)]
    G = cov.G[(i, j)]
    ones_vec = np.ones(A.shape[1] * G.shape[1])
    ones_mat = ones_vec.reshape(G.shape[1], A.shape[1])
    return float((G @ ones_mat @ A.T).sum())


def fd_gradient(arch: Architecture, params: Params, x, y, step: float = 1e-4):
    """Central-difference gradient of the batch-mean loss.

    Returns (flat weight gradient, per-layer BN scale gradients, per-layer BN
    shift gradients), matching the layout `backward` produces.
    """
    work = params.copy()

    def loss_at() -> float:
        out, _ = forward(arch, work, x, training=True)
        return loss(arch, out, y)

    def central(buf: np.ndarray, k: int) -> float:
        orig = buf[k]
        buf[k] = orig + step
        up = loss_at()
        buf[k] = orig - step
        down = loss_at()
        buf[k] = orig
        return (up - down) / (2.0 * step)

    theta_grad = np.array([central(work.theta, k) for k in range(work.theta.size)])
    bn_gamma = []
    bn_beta = []
    for i in range(arch.n_layers):
        if work.bn_gamma[i] is None:
            bn_gamma.append(None)
            bn_beta.append(None)
        else:
            bn_gamma.append(np.array([central(work.bn_gamma[i], k)
                                      for k in range(work.bn_gamma[i].size)]))
            bn_beta.append(np.array([central(work.bn_beta[i], k)
                                     for k in range(work.bn_beta[i].size)]))
    return theta_grad, bn_gamma, bn_beta


def _per_sample_flat_grads(arch: Architecture, cache) -> np.ndarray:
    """Rows are per-sample flat gradients, built from the cached inputs and g."""
    B = cache.batch_size
    chunks = []
    for i in range(arch.n_layers):
        a_bar = cache.inputs[i]
        g = cache.g[i]
        # flat order within a layer is column-major over g a^T: input index major
        chunks.append(np.einsum("cb,rb->bcr", a_bar, g).reshape(B, -1))
    return np.concatenate(chunks, axis=1)


def mc_fisher(arch: Architecture, params: Params, inputs, n_samples: int,
              rng: np.random.Generator, chunk: int = 512, return_stderr: bool = False):
    """Monte-Carlo curvature: average outer product of per-sample gradients.

    Inputs are drawn uniformly from the given column pool and labels from the
    model's predictive distribution. BN architectures are rejected: the
    estimate needs per-sample independence.
    """
    if any(arch.batchnorm):
        raise StateError("Monte-Carlo curvature needs a batchnorm-free network")
    pool = np.asarray(inputs, dtype=np.float64)
    n = arch.n_params
    if n > DENSE_PARAM_CAP:
        raise SizeError(f"Monte-Carlo curvature of {n} parameters exceeds cap {DENSE_PARAM_CAP}")
    s1 = np.zeros((n, n))
    s2 = np.zeros((n, n))
    done = 0
    while done < n_samples:
        b = min(chunk, n_samples - done)
        cols = rng.integers(pool.shape[1], size=b)
        x = pool[:, cols]
        out, cache = forward(arch, params, x, training=True)
        y = sample_labels(arch, out, rng)
        backward(arch, params, cache, y)
        grads = _per_sample_flat_grads(arch, cache)
        s1 += grads.T @ grads
        sq = grads ** 2
        s2 += sq.T @ sq
        done += b
    mean = s1 / n_samples
    if not return_stderr:
        return mean
    var = np.maximum(s2 / n_samples - mean ** 2, 0.0)
    return mean, np.sqrt(var / n_samples)


def exact_mse_fisher(arch: Architecture, params: Params, inputs) -> np.ndarray:
    """Exact curvature for the unit-variance mse model over a finite input pool.

    Averages J^T J over the pool; rows of J come from backward passes with
    unit residuals on each output coordinate.
    """
    if arch.loss_kind != "mse":
        raise StateError("exact curvature oracle is defined for the mse loss")
    if any(arch.batchnorm):
        raise StateError("exact curvature oracle needs a batchnorm-free network")
    pool = np.asarray(inputs, dtype=np.float64)
    K = pool.shape[1]
    d_out = arch.layer_dims[-1]
    rows = []
    for u in range(d_out):
        out, cache = forward(arch, params, pool, training=True)
        target = out.copy()
        target[u, :] -= 1.0  # residual e_u for every sample
        backward(arch, params, cache, target)
        rows.append(_per_sample_flat_grads(arch, cache))
    stacked = np.concatenate(rows, axis=0)
    return stacked.T @ stacked / K
