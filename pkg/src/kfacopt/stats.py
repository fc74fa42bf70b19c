"""Running covariance estimates of the Kronecker factors.

For layers indexed 0..L-1 the tracked pairs are (i, j) with j <= i:
A[(i, j)] estimates E[a_in_i a_in_j^T] over the homogeneous layer inputs and
G[(i, j)] estimates E[g_i g_j^T] over the per-sample affine-output
derivatives. Diagonal mode keeps only (i, i); full mode keeps the whole
lower triangle, which the coarse-level correction needs. Estimates are
blended with the decay min(1 - 1/t, 0.95) where t counts update sweeps, so
the first sweep lands exactly on the first minibatch estimate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, StateError
from .network import BatchCache

COV_MODES = ("diagonal", "full")
MAX_DECAY = 0.95


def decay_at(t: int) -> float:
    """Statistical decay for the t-th update sweep (t starts at 1)."""
    return min(1.0 - 1.0 / t, MAX_DECAY)


@dataclass
class CovState:
    """EMA Kronecker-factor estimates for one network."""

    layer_dims: tuple[int, ...]
    mode: str
    step: int = 1
    A: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    G: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in COV_MODES:
            raise ConfigError(f"cov mode must be one of {COV_MODES}, got {self.mode!r}")
        self.layer_dims = tuple(int(d) for d in self.layer_dims)

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    def pairs(self) -> list[tuple[int, int]]:
        L = self.n_layers
        if self.mode == "diagonal":
            return [(i, i) for i in range(L)]
        return [(i, j) for i in range(L) for j in range(i + 1)]

    def input_dim(self, i: int) -> int:
        """Rows of A[(i, *)]: layer input width plus the homogeneous one."""
        return self.layer_dims[i] + 1

    def output_dim(self, i: int) -> int:
        """Rows of G[(i, *)]: layer output width."""
        return self.layer_dims[i + 1]

    @property
    def initialized(self) -> bool:
        return bool(self.A)


def init_cov(layer_dims, mode: str = "diagonal") -> CovState:
    return CovState(tuple(layer_dims), mode)


def update_cov(state: CovState, cache: BatchCache) -> CovState:
    """Blend one minibatch of factor estimates into the running state.

    Cross pairs use matched per-sample columns, so rectangular products are
    fine when layer widths differ. All pairs share the same sweep counter.
    """
    if cache.g is None:
        raise StateError("cache has no per-sample derivatives; run backward first")
    L = state.n_layers
    if len(cache.inputs) != L:
        raise StateError(
            f"cache has {len(cache.inputs)} layers, covariance state expects {L}")
    for i in range(L):
        if cache.inputs[i].shape[0] != state.input_dim(i):
            raise StateError(f"layer {i}: cache input width does not match covariance state")
        if cache.g[i].shape[0] != state.output_dim(i):
            raise StateError(f"layer {i}: cache derivative width does not match covariance state")
    B = cache.batch_size
    eps = decay_at(state.step)
    keep = 1.0 - eps
    for (i, j) in state.pairs():
        a_new = cache.inputs[i] @ cache.inputs[j].T / B
        g_new = cache.g[i] @ cache.g[j].T / B
        if (i, j) not in state.A:
            state.A[(i, j)] = a_new
            state.G[(i, j)] = g_new
        else:
            # M + (1-eps)*(new - M): exact fixed point when new == M
            state.A[(i, j)] += keep * (a_new - state.A[(i, j)])
            state.G[(i, j)] += keep * (g_new - state.G[(i, j)])
    state.step += 1
    return state


def cov_memory_report(state: CovState) -> dict[str, int]:
    """Matrix and scalar counts implied by the mode, independent of progress."""
    pairs = state.pairs()
    scalars = 0
    for (i, j) in pairs:
        scalars += state.input_dim(i) * state.input_dim(j)
        scalars += state.output_dim(i) * state.output_dim(j)
    return {
        "a_matrices": len(pairs),
        "g_matrices": len(pairs),
        "matrices": 2 * len(pairs),
        "scalars": scalars,
    }
