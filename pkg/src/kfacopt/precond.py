"""One-level and two-level K-FAC preconditioners.

The one-level preconditioner inverts each layer's damped Kronecker-factored
curvature block independently. The two-level variant adds a coarse
correction: the gradient is summed to one scalar per layer, scaled by the
inverse of the damped L x L coarse curvature matrix (whose (i, j) entry is
the sum of all entries of the (i, j) cross-layer block), and broadcast back,
shifting every layer's preconditioned gradient by a per-layer scalar.

Damped block inverses come in two flavours: an exact solve through the
eigendecompositions of both factors, and the cheaper factored-Tikhonov
approximation that splits the damping between the two factors with a
trace-balanced pi.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.linalg

from .errors import ConfigError, DimensionError, NumericalError, StateError
from .linalg import SymEig, sym_eig
from .stats import CovState

log = logging.getLogger(__name__)

BLOCK_MODES = ("eig", "tikhonov")

# One retry with this much extra damping before the coarse term is dropped
# for the current refresh.
COARSE_RETRY_FACTOR = 10.0


@dataclass(frozen=True)
class DampingConfig:
    """Damping strength and block-inversion flavour."""

    damping: float
    mode: str = "eig"

    def __post_init__(self):
        if not self.damping > 0.0:
            raise ConfigError(f"damping: must be > 0, got {self.damping}")
        if self.mode not in BLOCK_MODES:
            raise ConfigError(f"damping mode: must be one of {BLOCK_MODES}, got {self.mode!r}")


class EigBlock(NamedTuple):
    input_eig: SymEig   # eigendecomposition of the (symmetrized) input factor
    output_eig: SymEig  # eigendecomposition of the (symmetrized) output factor


class TikhonovBlock(NamedTuple):
    input_chol: tuple   # cho_factor of input factor + pi*sqrt(damping)*I
    output_chol: tuple  # cho_factor of output factor + sqrt(damping)/pi*I
    pi: float


@dataclass
class BlockInverses:
    """Per-layer inverse representations of the damped diagonal blocks."""

    mode: str
    blocks: list
    shapes: list[tuple[int, int]]  # per-layer gradient shape, d_out x (d_in + 1)

    @property
    def n_layers(self) -> int:
        return len(self.blocks)

    def layer_sizes(self) -> list[int]:
        return [r * c for r, c in self.shapes]

    def apply(self, i: int, grad_mat: np.ndarray, damping: float) -> np.ndarray:
        if self.mode == "eig":
            return apply_block_eig(grad_mat, self.blocks[i], damping)
        return apply_block_tikhonov(grad_mat, self.blocks[i])


def build_block_inverses(cov: CovState, cfg: DampingConfig) -> BlockInverses:
    """Build per-layer inverse representations from the diagonal factor pairs."""
    blocks = []
    shapes = []
    for i in range(cov.n_layers):
        if (i, i) not in cov.A:
            raise StateError(f"layer {i}: no covariance estimate yet")
        A = cov.A[(i, i)]
        G = cov.G[(i, i)]
        A = 0.5 * (A + A.T)
        G = 0.5 * (G + G.T)
        tr_g = float(np.trace(G))
        if tr_g == 0.0:
            raise NumericalError(
                f"layer {i}: output-derivative factor has zero trace (dead layer); "
                "increase the batch size or the damping")
        shapes.append((G.shape[0], A.shape[0]))
        if cfg.mode == "eig":
            ea = sym_eig(A)
            eg = sym_eig(G)
            if ea.values[0] < -1e-8 or eg.values[0] < -1e-8:
                raise NumericalError(
                    f"layer {i}: covariance factor has eigenvalue below -1e-8 "
                    f"(A: {ea.values[0]:.3e}, G: {eg.values[0]:.3e})")
            blocks.append(EigBlock(ea, eg))
        else:
            tr_a = float(np.trace(A))
            pi = math.sqrt((tr_a / A.shape[0]) / (tr_g / G.shape[0]))
            root = math.sqrt(cfg.damping)
            a_damped = A + (pi * root) * np.eye(A.shape[0])
            g_damped = G + (root / pi) * np.eye(G.shape[0])
            try:
                ca = scipy.linalg.cho_factor(a_damped, lower=True)
                cg = scipy.linalg.cho_factor(g_damped, lower=True)
            except scipy.linalg.LinAlgError as exc:
                raise NumericalError(f"layer {i}: damped factor not SPD: {exc}") from exc
            blocks.append(TikhonovBlock(ca, cg, pi))
    return BlockInverses(cfg.mode, blocks, shapes)


def apply_block_eig(grad_mat: np.ndarray, block: EigBlock, damping: float) -> np.ndarray:
    """Exact solve of (A_in kron G_out + damping*I) x = vec(grad).

    Rotate into the joint eigenbasis, divide by the eigenvalue products plus
    damping, rotate back.
    """
    q_a, lam_a = block.input_eig.vectors, block.input_eig.values
    q_g, lam_g = block.output_eig.vectors, block.output_eig.values
    if grad_mat.shape != (q_g.shape[0], q_a.shape[0]):
        raise DimensionError(
            f"gradient shape {grad_mat.shape} does not match factors "
            f"({q_g.shape[0]} x {q_a.shape[0]})")
    denom = lam_g[:, None] * lam_a[None, :] + damping
    if np.any(denom <= 0.0):
        raise NumericalError(
            f"non-positive damped eigenvalue product (min {denom.min():.3e}); "
            "increase the damping")
    v = q_g.T @ grad_mat @ q_a
    v /= denom
    return q_g @ v @ q_a.T


def apply_block_tikhonov(grad_mat: np.ndarray, block: TikhonovBlock) -> np.ndarray:
    """Factored-Tikhonov solve: damped-output-factor^-1 @ grad @ damped-input-factor^-1."""
    left = scipy.linalg.cho_solve(block.output_chol, grad_mat)
    return scipy.linalg.cho_solve(block.input_chol, left.T).T


@dataclass
class CoarseState:
    """L x L coarse curvature matrix plus its lazily-built damped solver."""

    coarse_fisher: np.ndarray
    layer_sizes: list[int]
    _solvers: dict[float, tuple] = field(default_factory=dict, repr=False)

    @property
    def n_layers(self) -> int:
        return self.coarse_fisher.shape[0]

    def factorization(self, damping: float):
        """Cholesky of (coarse + damping*I), retried once with extra damping."""
        if damping in self._solvers:
            return self._solvers[damping]
        eye = np.eye(self.n_layers)
        try:
            factor = scipy.linalg.cho_factor(self.coarse_fisher + damping * eye, lower=True)
        except scipy.linalg.LinAlgError:
            boosted = (1.0 + COARSE_RETRY_FACTOR) * damping
            log.warning(
                "coarse matrix + %.3e*I not SPD; retrying with %.3e", damping, boosted)
            try:
                factor = scipy.linalg.cho_factor(self.coarse_fisher + boosted * eye, lower=True)
            except scipy.linalg.LinAlgError as exc:
                raise NumericalError(
                    f"coarse matrix is not positive definite even with damping "
                    f"{boosted:.3e}: {exc}") from exc
        self._solvers[damping] = factor
        return factor


def assemble_coarse(cov: CovState) -> CoarseState:
    """Sum each cross-layer curvature block into one scalar, then symmetrize.

    Block sums never materialize a Kronecker product: the sum of all entries
    of A kron G is (sum A)(sum G).
    """
    if cov.mode != "full":
        raise StateError("coarse assembly needs full-mode covariance state")
    if not cov.initialized:
        raise StateError("no covariance estimates yet")
    L = cov.n_layers
    F = np.zeros((L, L))
    for (i, j) in cov.pairs():
        if (i, j) not in cov.A:
            raise StateError(f"missing covariance pair {(i, j)}")
        F[i, j] = cov.A[(i, j)].sum() * cov.G[(i, j)].sum()
    F = F + F.T - np.diag(np.diag(F))
    bad = np.diag(F) < -1e-8
    if np.any(bad):
        raise NumericalError(
            f"coarse diagonal entries negative beyond tolerance at layers "
            f"{np.flatnonzero(bad).tolist()}")
    sizes = [cov.output_dim(i) * cov.input_dim(i) for i in range(L)]
    return CoarseState(F, sizes)


def coarse_correction(coarse: CoarseState, grad: np.ndarray, damping: float) -> np.ndarray:
    """Per-layer gradient sums, damped coarse solve, broadcast back.

    Returns a vector of the gradient's length whose layer-i entries all equal
    the i-th component of (coarse + damping*I)^-1 (layer sums).
    """
    n = sum(coarse.layer_sizes)
    g = np.asarray(grad, dtype=np.float64)
    if g.shape != (n,):
        raise DimensionError(f"gradient length {g.shape} does not match layout ({n},)")
    offsets = np.cumsum([0] + coarse.layer_sizes[:-1])
    sums = np.add.reduceat(g, offsets)
    factor = coarse.factorization(damping)
    w = scipy.linalg.cho_solve(factor, sums)
    return np.repeat(w, coarse.layer_sizes)


def apply_two_level(blocks: BlockInverses, coarse: CoarseState | None,
                    grad: np.ndarray, damping: float) -> np.ndarray:
    """Apply the block-diagonal preconditioner, plus the coarse term if given.

    With `coarse=None` this is exactly the one-level path.
    """
    n = sum(blocks.layer_sizes())
    g = np.asarray(grad, dtype=np.float64)
    if g.shape != (n,):
        raise DimensionError(f"gradient length {g.shape} does not match layout ({n},)")
    out = np.empty_like(g)
    start = 0
    for i, (rows, cols) in enumerate(blocks.shapes):
        size = rows * cols
        gm = g[start:start + size].reshape((rows, cols), order="F")
        out[start:start + size] = blocks.apply(i, gm, damping).reshape(-1, order="F")
        start += size
    if coarse is not None:
        if coarse.layer_sizes != blocks.layer_sizes():
            raise StateError("coarse state and block inverses disagree on the layout")
        out += coarse_correction(coarse, g, damping)
    return out


@dataclass(frozen=True)
class ClipConfig:
    """Cap on the estimated squared curvature norm of one update."""

    kappa: float

    def __post_init__(self):
        if not self.kappa > 0.0:
            raise ConfigError(f"kappa: must be > 0, got {self.kappa}")


def kl_clip(precond_grad: np.ndarray, grad: np.ndarray, lr: float,
            cfg: ClipConfig, layer_sizes: list[int]) -> float:
    """Rescaling factor nu = min(1, sqrt(kappa / (lr^2 sum_i |<pg_i, g_i>|))).

    The sum runs over per-layer inner products of the preconditioned and
    unpreconditioned gradients. Degenerate (zero) sums give nu = 1.
    """
    if not lr > 0.0:
        raise ConfigError(f"learning rate: must be > 0, got {lr}")
    pg = np.asarray(precond_grad, dtype=np.float64)
    g = np.asarray(grad, dtype=np.float64)
    n = sum(layer_sizes)
    if pg.shape != (n,) or g.shape != (n,):
        raise DimensionError("gradient lengths do not match the layer layout")
    total = 0.0
    start = 0
    for size in layer_sizes:
        total += abs(float(pg[start:start + size] @ g[start:start + size]))
        start += size
    if total == 0.0:
        return 1.0
    return min(1.0, math.sqrt(cfg.kappa / (lr * lr * total)))
