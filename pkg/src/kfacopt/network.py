"""Minimal feed-forward MLP with exact backpropagation.

Layer i applies an affine map s_i = W_i a_in, where a_in is the previous
activation with a homogeneous 1 appended so the bias lives in the last
column of W_i, optionally batch normalization, then an element-wise
activation. The forward cache keeps every homogeneous input and, after a
backward pass, the per-sample derivatives with respect to each affine
output; those two lists are exactly the statistics the Kronecker-factor
covariance estimates consume.

Parameters are stored twice over the same memory: `Params.theta` is the flat
vector (columns of each W_i stacked, layers concatenated in order) and
`Params.weights` holds per-layer matrix views into it, so optimizer updates
on the flat vector are immediately visible to forward/backward.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit

from .errors import ConfigError, DimensionError, InputError, StateError
from .linalg import as_matrix

ACTIVATION_KINDS = ("identity", "relu", "tanh")
LOSS_KINDS = ("bernoulli_logit", "softmax_ce", "mse")

BN_EPS = 1e-5
BN_MOMENTUM = 0.1  # running = (1 - m) * running + m * batch


@dataclass(frozen=True)
class Architecture:
    """Network shape: layer widths, per-layer activation/batchnorm, loss kind."""

    layer_dims: tuple[int, ...]
    activations: tuple[str, ...]
    batchnorm: tuple[bool, ...]
    loss_kind: str

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        object.__setattr__(self, "activations", tuple(self.activations))
        object.__setattr__(self, "batchnorm", tuple(bool(b) for b in self.batchnorm))
        if len(dims) < 2:
            raise ConfigError("layer_dims: need at least input and output widths")
        if any(d < 1 for d in dims):
            raise ConfigError("layer_dims: all widths must be >= 1")
        L = len(dims) - 1
        if len(self.activations) != L:
            raise ConfigError(f"activations: expected {L} entries, got {len(self.activations)}")
        if len(self.batchnorm) != L:
            raise ConfigError(f"batchnorm: expected {L} entries, got {len(self.batchnorm)}")
        for a in self.activations:
            if a not in ACTIVATION_KINDS:
                raise ConfigError(f"activations: unknown kind {a!r}, choose from {ACTIVATION_KINDS}")
        if self.activations[-1] != "identity":
            raise ConfigError("activations: output layer must be 'identity' (the loss owns the output nonlinearity)")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"loss_kind: unknown kind {self.loss_kind!r}, choose from {LOSS_KINDS}")

    @staticmethod
    def mlp(d_in: int, hidden: Sequence[int], d_out: int, activation: str = "identity",
            batchnorm: bool = False, loss_kind: str = "bernoulli_logit") -> "Architecture":
        """Uniform MLP: batchnorm (if any) on hidden layers only, identity output."""
        hidden = list(hidden)
        dims = [d_in] + hidden + [d_out]
        acts = [activation] * len(hidden) + ["identity"]
        bns = [batchnorm] * len(hidden) + [False]
        return Architecture(tuple(dims), tuple(acts), tuple(bns), loss_kind)

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    def layer_shape(self, i: int) -> tuple[int, int]:
        """Shape of W_i (0-based layer index): d_i x (d_{i-1} + 1)."""
        return (self.layer_dims[i + 1], self.layer_dims[i] + 1)

    def layer_sizes(self) -> list[int]:
        return [r * c for r, c in (self.layer_shape(i) for i in range(self.n_layers))]

    def layer_slices(self) -> list[slice]:
        slices, start = [], 0
        for size in self.layer_sizes():
            slices.append(slice(start, start + size))
            start += size
        return slices

    @property
    def n_params(self) -> int:
        return sum(self.layer_sizes())

    def unflatten(self, vec: np.ndarray) -> list[np.ndarray]:
        """Per-layer matrix views of a flat parameter-space vector."""
        v = np.asarray(vec)
        if v.shape != (self.n_params,):
            raise DimensionError(f"expected flat vector of length {self.n_params}, got shape {v.shape}")
        return [v[sl].reshape(self.layer_shape(i), order="F")
                for i, sl in enumerate(self.layer_slices())]

    def flatten(self, mats: Sequence[np.ndarray]) -> np.ndarray:
        """Column-stack each per-layer matrix and concatenate in layer order."""
        if len(mats) != self.n_layers:
            raise DimensionError(f"expected {self.n_layers} layer matrices, got {len(mats)}")
        out = np.empty(self.n_params)
        for i, (sl, m) in enumerate(zip(self.layer_slices(), mats)):
            m = np.asarray(m)
            if m.shape != self.layer_shape(i):
                raise DimensionError(
                    f"layer {i}: expected shape {self.layer_shape(i)}, got {m.shape}")
            out[sl] = m.reshape(-1, order="F")
        return out


@dataclass
class Params:
    """Trainable state: flat weight vector with per-layer views, plus BN params.

    BN scale/shift (and the running statistics used in eval mode) are kept
    outside `theta`; they are not part of the preconditioned parameter space.
    """

    theta: np.ndarray
    weights: list[np.ndarray]
    bn_gamma: list[np.ndarray | None]
    bn_beta: list[np.ndarray | None]
    bn_mean: list[np.ndarray | None]
    bn_var: list[np.ndarray | None]

    def copy(self) -> "Params":
        theta = self.theta.copy()
        return Params(
            theta=theta,
            weights=[theta[sl].reshape(w.shape, order="F")
                     for sl, w in zip(_theta_slices(self), self.weights)],
            bn_gamma=[None if g is None else g.copy() for g in self.bn_gamma],
            bn_beta=[None if b is None else b.copy() for b in self.bn_beta],
            bn_mean=[None if m is None else m.copy() for m in self.bn_mean],
            bn_var=[None if v is None else v.copy() for v in self.bn_var],
        )


def _theta_slices(params: Params) -> list[slice]:
    slices, start = [], 0
    for w in params.weights:
        size = w.size
        slices.append(slice(start, start + size))
        start += size
    return slices


def init_params(arch: Architecture, rng: np.random.Generator) -> Params:
    """Scaled Gaussian init: weight std sqrt(1/fan_in), biases zero, BN at (1, 0)."""
    theta = np.zeros(arch.n_params)
    weights = [theta[sl].reshape(arch.layer_shape(i), order="F")
               for i, sl in enumerate(arch.layer_slices())]
    for i, w in enumerate(weights):
        fan_in = arch.layer_dims[i]
        w[:, :-1] = rng.standard_normal((w.shape[0], fan_in)) / np.sqrt(fan_in)
    bn_gamma, bn_beta, bn_mean, bn_var = [], [], [], []
    for i in range(arch.n_layers):
        if arch.batchnorm[i]:
            d = arch.layer_dims[i + 1]
            bn_gamma.append(np.ones(d))
            bn_beta.append(np.zeros(d))
            bn_mean.append(np.zeros(d))
            bn_var.append(np.ones(d))
        else:
            bn_gamma.append(None)
            bn_beta.append(None)
            bn_mean.append(None)
            bn_var.append(None)
    return Params(theta, weights, bn_gamma, bn_beta, bn_mean, bn_var)


def params_from_weights(arch: Architecture, mats: Sequence[np.ndarray]) -> Params:
    """Params with given weight matrices and no batchnorm state (testing aid)."""
    if any(arch.batchnorm):
        raise StateError("params_from_weights does not build batchnorm state")
    theta = arch.flatten([np.asarray(m, dtype=np.float64) for m in mats])
    weights = arch.unflatten(theta)
    L = arch.n_layers
    return Params(theta, weights, [None] * L, [None] * L, [None] * L, [None] * L)


@dataclass
class BatchCache:
    """Intermediate values of one forward pass (plus g after a backward pass).

    inputs[i]    homogeneous input of layer i, (d_i + 1) x B, last row all ones
    pre_acts[i]  affine output s_i = W_i inputs[i], d_{i+1} x B
    acts[i]      post-activation output of layer i (acts[-1] is the network output)
    g[i]         d(sum of per-sample losses)/d s_i, filled by `backward`
    """

    inputs: list[np.ndarray]
    pre_acts: list[np.ndarray]
    acts: list[np.ndarray]
    bn: list[tuple[np.ndarray, np.ndarray] | None]
    training: bool
    batch_size: int
    g: list[np.ndarray] | None = field(default=None)

    @property
    def output(self) -> np.ndarray:
        return self.acts[-1]


@dataclass
class Gradients:
    """Mean-loss gradients: flat weight-space vector plus separate BN gradients."""

    theta: np.ndarray
    bn_gamma: list[np.ndarray | None]
    bn_beta: list[np.ndarray | None]


def _activate(kind: str, h: np.ndarray) -> np.ndarray:
    if kind == "identity":
        return h
    if kind == "relu":
        return np.maximum(h, 0.0)
    return np.tanh(h)


def forward(arch: Architecture, params: Params, x, training: bool = True) -> tuple[np.ndarray, BatchCache]:
    """Run the network on a batch of column vectors.

    In training mode batchnorm uses batch statistics (recorded in the cache)
    and refreshes the running statistics in `params`; in eval mode it uses the
    running statistics and the cache cannot back a backward pass.
    """
    a = as_matrix(x, "input batch")
    if a.shape[0] != arch.layer_dims[0]:
        raise DimensionError(
            f"input has {a.shape[0]} features, network expects {arch.layer_dims[0]}")
    if len(params.weights) != arch.n_layers:
        raise StateError("params do not match architecture layer count")
    B = a.shape[1]
    inputs, pre_acts, acts, bn_caches = [], [], [], []
    ones = np.ones((1, B))
    for i in range(arch.n_layers):
        a_bar = np.vstack([a, ones])
        s = params.weights[i] @ a_bar
        if arch.batchnorm[i]:
            h, bn_cache = _bn_forward(params, i, s, training)
        else:
            h, bn_cache = s, None
        a = _activate(arch.activations[i], h)
        inputs.append(a_bar)
        pre_acts.append(s)
        acts.append(a)
        bn_caches.append(bn_cache)
    cache = BatchCache(inputs, pre_acts, acts, bn_caches, training, B)
    return acts[-1], cache


def _bn_forward(params: Params, i: int, s: np.ndarray, training: bool):
    gamma = params.bn_gamma[i][:, None]
    beta = params.bn_beta[i][:, None]
    if training:
        mean = s.mean(axis=1, keepdims=True)
        var = s.var(axis=1, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        x_hat = (s - mean) * inv_std
        params.bn_mean[i] *= 1.0 - BN_MOMENTUM
        params.bn_mean[i] += BN_MOMENTUM * mean.ravel()
        params.bn_var[i] *= 1.0 - BN_MOMENTUM
        params.bn_var[i] += BN_MOMENTUM * var.ravel()
        return gamma * x_hat + beta, (x_hat, inv_std)
    mean = params.bn_mean[i][:, None]
    inv_std = 1.0 / np.sqrt(params.bn_var[i][:, None] + BN_EPS)
    return gamma * (s - mean) * inv_std + beta, None


def loss(arch: Architecture, output, y) -> float:
    """Mean negative log-likelihood of the batch (mse uses 0.5*||err||^2)."""
    z = as_matrix(output, "output")
    if arch.loss_kind == "bernoulli_logit":
        labels = _binary_labels(z, y)
        # softplus(z) - y*z, stable for large |z|
        return float(np.mean(np.logaddexp(0.0, z[0]) - labels * z[0]))
    if arch.loss_kind == "softmax_ce":
        idx = _class_indices(z, y)
        zmax = z.max(axis=0)
        lse = zmax + np.log(np.exp(z - zmax).sum(axis=0))
        return float(np.mean(lse - z[idx, np.arange(z.shape[1])]))
    targets = _mse_targets(z, y)
    return float(np.mean(0.5 * ((z - targets) ** 2).sum(axis=0)))


def _binary_labels(z: np.ndarray, y) -> np.ndarray:
    if z.shape[0] != 1:
        raise DimensionError("bernoulli_logit needs a single output unit")
    labels = np.asarray(y, dtype=np.float64).reshape(-1)
    if labels.size != z.shape[1]:
        raise DimensionError(f"expected {z.shape[1]} labels, got {labels.size}")
    if not np.all((labels == 0.0) | (labels == 1.0)):
        raise InputError("bernoulli_logit labels must be 0 or 1")
    return labels


def _class_indices(z: np.ndarray, y) -> np.ndarray:
    labels = np.asarray(y).reshape(-1)
    if labels.size != z.shape[1]:
        raise DimensionError(f"expected {z.shape[1]} labels, got {labels.size}")
    idx = labels.astype(np.int64)
    if not np.all(idx == labels):
        raise InputError("softmax_ce labels must be integer class indices")
    if idx.min() < 0 or idx.max() >= z.shape[0]:
        raise InputError(
            f"class index out of range [0, {z.shape[0]}): saw {idx.min()}..{idx.max()}")
    return idx


def _mse_targets(z: np.ndarray, y) -> np.ndarray:
    targets = np.asarray(y, dtype=np.float64)
    if targets.ndim == 1 and z.shape[0] == 1:
        targets = targets[None, :]
    if targets.shape != z.shape:
        raise DimensionError(f"mse targets shape {targets.shape} != output shape {z.shape}")
    return targets


def _loss_grad(arch: Architecture, z: np.ndarray, y) -> np.ndarray:
    """Per-sample d loss_b / d output_b, one column per sample (no 1/B)."""
    if arch.loss_kind == "bernoulli_logit":
        labels = _binary_labels(z, y)
        return expit(z) - labels[None, :]
    if arch.loss_kind == "softmax_ce":
        idx = _class_indices(z, y)
        p = np.exp(z - z.max(axis=0))
        p /= p.sum(axis=0)
        p[idx, np.arange(z.shape[1])] -= 1.0
        return p
    return z - _mse_targets(z, y)


def sample_labels(arch: Architecture, output, rng: np.random.Generator):
    """Draw one label per column from the model's predictive distribution."""
    z = as_matrix(output, "output")
    B = z.shape[1]
    if arch.loss_kind == "bernoulli_logit":
        if z.shape[0] != 1:
            raise DimensionError("bernoulli_logit needs a single output unit")
        return (rng.random(B) < expit(z[0])).astype(np.int64)
    if arch.loss_kind == "softmax_ce":
        p = np.exp(z - z.max(axis=0))
        p /= p.sum(axis=0)
        cdf = np.cumsum(p, axis=0)
        draws = (rng.random(B)[None, :] > cdf).sum(axis=0)
        return np.minimum(draws, z.shape[0] - 1).astype(np.int64)
    return z + rng.standard_normal(z.shape)


def backward(arch: Architecture, params: Params, cache: BatchCache, y) -> Gradients:
    """Backpropagate the batch-mean loss for the labels `y`.

    Fills `cache.g` with per-sample derivatives of the summed loss with
    respect to each affine output (so the per-layer mean gradient is
    g_i @ inputs[i].T / B), and returns the mean gradient with BN scale/shift
    gradients kept separate.
    """
    if not cache.training:
        raise StateError("backward needs a cache from a training-mode forward pass")
    if len(cache.inputs) != arch.n_layers or len(params.weights) != arch.n_layers:
        raise StateError("cache/params do not match architecture layer count")
    for i in range(arch.n_layers):
        if cache.inputs[i].shape[0] != params.weights[i].shape[1]:
            raise StateError(f"layer {i}: cache input width does not match weights")
    B = cache.batch_size
    L = arch.n_layers
    g_list: list[np.ndarray] = [None] * L  # type: ignore[list-item]
    theta_grad = np.empty(arch.n_params)
    grad_views = arch.unflatten(theta_grad)
    bn_gamma_grad: list[np.ndarray | None] = [None] * L
    bn_beta_grad: list[np.ndarray | None] = [None] * L

    delta = _loss_grad(arch, cache.output, y)  # d sum(loss_b) / d a_L
    for i in range(L - 1, -1, -1):
        kind = arch.activations[i]
        if kind == "relu":
            dh = delta * (cache.acts[i] > 0.0)
        elif kind == "tanh":
            dh = delta * (1.0 - cache.acts[i] ** 2)
        else:
            dh = delta
        if arch.batchnorm[i]:
            x_hat, inv_std = cache.bn[i]
            bn_gamma_grad[i] = (dh * x_hat).sum(axis=1) / B
            bn_beta_grad[i] = dh.sum(axis=1) / B
            dxh = dh * params.bn_gamma[i][:, None]
            ds = inv_std * (
                dxh
                - dxh.mean(axis=1, keepdims=True)
                - x_hat * (dxh * x_hat).mean(axis=1, keepdims=True)
            )
        else:
            ds = dh
        g_list[i] = ds
        grad_views[i][:] = ds @ cache.inputs[i].T / B
        if i > 0:
            delta = (params.weights[i].T @ ds)[:-1, :]
    cache.g = g_list
    return Gradients(theta_grad, bn_gamma_grad, bn_beta_grad)


def predictions(arch: Architecture, output: np.ndarray) -> np.ndarray | None:
    """Hard class predictions for classification losses, None for mse."""
    if arch.loss_kind == "bernoulli_logit":
        return (output[0] > 0.0).astype(np.int64)
    if arch.loss_kind == "softmax_ce":
        return output.argmax(axis=0)
    return None


def accuracy(arch: Architecture, output: np.ndarray, y) -> float:
    """Fraction of correct hard predictions; NaN for regression losses."""
    preds = predictions(arch, output)
    if preds is None:
        return float("nan")
    labels = np.asarray(y).reshape(-1)
    return float(np.mean(preds == labels))
