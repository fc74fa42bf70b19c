"""Training-loop orchestration: SGD, Adam, and the K-FAC driver.

The K-FAC step follows a fixed pipeline per iteration t (1-based): data-label
backward for the training gradient; on statistics iterations (t = 1 and every
cov_update_interval) a second backward on the same forward cache with
model-sampled labels feeds the covariance estimates; on refresh iterations
(t = 1 and every precond_update_interval) the block inverses and, for the
two-level variant, the coarse matrix are rebuilt. The regularized gradient
(weight decay folded in before preconditioning) is then preconditioned,
clipped by the curvature-norm factor nu, and folded into heavy-ball momentum.

BN scale/shift parameters sit outside the preconditioned space and are
always updated by plain SGD with momentum, without weight decay.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass

import numpy as np

from .data import Dataset, minibatches, write_npz
from .errors import ConfigError, InputError, NumericalError, StateError
from .linalg import SymEig
from .network import (
    Architecture,
    Gradients,
    Params,
    accuracy,
    backward,
    forward,
    init_params,
    loss,
    sample_labels,
)
from .precond import (
    BlockInverses,
    ClipConfig,
    CoarseState,
    DampingConfig,
    EigBlock,
    TikhonovBlock,
    apply_two_level,
    assemble_coarse,
    build_block_inverses,
    kl_clip,
)
from .stats import CovState, init_cov, update_cov

log = logging.getLogger(__name__)

OPTIMIZER_KINDS = ("sgd", "adam", "kfac1", "kfac2")


@dataclass(frozen=True)
class OptimizerConfig:
    """Hyperparameters for one training run."""

    kind: str = "sgd"
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-3
    damping: float = 1e-2
    kl_clip: float = 1e-3
    damping_mode: str = "eig"
    cov_update_interval: int = 10
    precond_update_interval: int = 100
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    empirical_fisher: bool = False
    lr_schedule: tuple[tuple[int, float], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "lr_schedule",
                           tuple((int(e), float(m)) for e, m in self.lr_schedule))
        if self.kind not in OPTIMIZER_KINDS:
            raise ConfigError(
                f"optimizer.kind: unknown kind {self.kind!r}, choose from {OPTIMIZER_KINDS}")
        if not self.lr > 0.0:
            raise ConfigError(f"optimizer.lr: must be > 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"optimizer.momentum: must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0.0:
            raise ConfigError(f"optimizer.weight_decay: must be >= 0, got {self.weight_decay}")
        if self.is_kfac:
            if not self.damping > 0.0:
                raise ConfigError(f"optimizer.damping: must be > 0, got {self.damping}")
            if not self.kl_clip > 0.0:
                raise ConfigError(f"optimizer.kl_clip: must be > 0, got {self.kl_clip}")
            if self.cov_update_interval < 1 or self.precond_update_interval < 1:
                raise ConfigError("optimizer update intervals must be >= 1")
            if self.precond_update_interval % self.cov_update_interval != 0:
                raise ConfigError(
                    "optimizer.precond_update_interval: must be a multiple of "
                    "cov_update_interval, got "
                    f"{self.precond_update_interval} vs {self.cov_update_interval}")
        if sorted(self.lr_schedule) != list(self.lr_schedule):
            raise ConfigError("optimizer.lr_schedule: must be sorted by epoch")

    @property
    def is_kfac(self) -> bool:
        return self.kind in ("kfac1", "kfac2")

    @property
    def two_level(self) -> bool:
        return self.kind == "kfac2"


def lr_at(epoch: int, cfg: OptimizerConfig) -> float:
    """Base rate times every schedule multiplier whose epoch has been reached."""
    lr = cfg.lr
    for milestone, mult in cfg.lr_schedule:
        if milestone <= epoch:
            lr *= mult
    return lr


@dataclass
class OptimizerState:
    """Mutable per-run optimizer state."""

    velocity: np.ndarray
    bn_velocity: list[tuple[np.ndarray, np.ndarray] | None]
    adam_m: np.ndarray | None = None
    adam_v: np.ndarray | None = None
    adam_t: int = 0
    cov: CovState | None = None
    blocks: BlockInverses | None = None
    coarse: CoarseState | None = None
    coarse_skipped: bool = False
    iteration: int = 0


def init_optimizer_state(arch: Architecture, cfg: OptimizerConfig) -> OptimizerState:
    n = arch.n_params
    bn_velocity: list[tuple[np.ndarray, np.ndarray] | None] = []
    for i in range(arch.n_layers):
        if arch.batchnorm[i]:
            d = arch.layer_dims[i + 1]
            bn_velocity.append((np.zeros(d), np.zeros(d)))
        else:
            bn_velocity.append(None)
    state = OptimizerState(np.zeros(n), bn_velocity)
    if cfg.kind == "adam":
        state.adam_m = np.zeros(n)
        state.adam_v = np.zeros(n)
    if cfg.is_kfac:
        state.cov = init_cov(arch.layer_dims, "full" if cfg.two_level else "diagonal")
    return state


def _update_bn(params: Params, state: OptimizerState, grads: Gradients,
               momentum: float, lr: float) -> None:
    for i, vel in enumerate(state.bn_velocity):
        if vel is None or grads.bn_gamma[i] is None:
            continue
        vg, vb = vel
        vg *= momentum
        vg += grads.bn_gamma[i]
        vb *= momentum
        vb += grads.bn_beta[i]
        params.bn_gamma[i] -= lr * vg
        params.bn_beta[i] -= lr * vb


def step_sgd(params: Params, state: OptimizerState, grads: Gradients,
             cfg: OptimizerConfig, lr: float) -> None:
    """Heavy-ball update: v <- mu v + (g + wd*theta); theta <- theta - lr v."""
    g = grads.theta + cfg.weight_decay * params.theta
    state.velocity *= cfg.momentum
    state.velocity += g
    params.theta -= lr * state.velocity
    _update_bn(params, state, grads, cfg.momentum, lr)


def step_adam(params: Params, state: OptimizerState, grads: Gradients,
              cfg: OptimizerConfig, lr: float) -> None:
    """Bias-corrected Adam on the weight-decayed gradient."""
    g = grads.theta + cfg.weight_decay * params.theta
    state.adam_t += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    state.adam_m *= b1
    state.adam_m += (1.0 - b1) * g
    state.adam_v *= b2
    state.adam_v += (1.0 - b2) * g ** 2
    m_hat = state.adam_m / (1.0 - b1 ** state.adam_t)
    v_hat = state.adam_v / (1.0 - b2 ** state.adam_t)
    params.theta -= lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
    _update_bn(params, state, grads, cfg.momentum, lr)


@dataclass
class StepMetrics:
    loss: float
    accuracy: float
    nu: float


def step_kfac(arch: Architecture, params: Params, state: OptimizerState,
              x, y, cfg: OptimizerConfig, lr: float,
              label_rng: np.random.Generator) -> StepMetrics:
    """One K-FAC iteration: gradient, scheduled statistics/preconditioner
    refreshes, preconditioning, KL clipping, momentum, parameter update."""
    t = state.iteration + 1
    out, cache = forward(arch, params, x, training=True)
    batch_loss = loss(arch, out, y)
    grads = backward(arch, params, cache, y)

    if t == 1 or t % cfg.cov_update_interval == 0:
        if cfg.empirical_fisher:
            # data-label derivatives are already in the cache
            update_cov(state.cov, cache)
        else:
            labels = sample_labels(arch, out, label_rng)
            backward(arch, params, cache, labels)
            update_cov(state.cov, cache)
    # blocks can be None mid-schedule after a checkpoint restore
    if t == 1 or t % cfg.precond_update_interval == 0 or state.blocks is None:
        damping_cfg = DampingConfig(cfg.damping, cfg.damping_mode)
        state.blocks = build_block_inverses(state.cov, damping_cfg)
        if cfg.two_level:
            state.coarse = assemble_coarse(state.cov)
            state.coarse_skipped = False

    reg_grad = grads.theta + cfg.weight_decay * params.theta
    coarse = state.coarse if (cfg.two_level and not state.coarse_skipped) else None
    try:
        precond_grad = apply_two_level(state.blocks, coarse, reg_grad, cfg.damping)
    except NumericalError as exc:
        if coarse is None:
            raise
        log.warning("dropping coarse correction until the next refresh: %s", exc)
        state.coarse_skipped = True
        precond_grad = apply_two_level(state.blocks, None, reg_grad, cfg.damping)

    nu = kl_clip(precond_grad, reg_grad, lr, ClipConfig(cfg.kl_clip),
                 state.blocks.layer_sizes())
    state.velocity *= cfg.momentum
    state.velocity += nu * precond_grad
    params.theta -= lr * state.velocity
    _update_bn(params, state, grads, cfg.momentum, lr)
    state.iteration = t
    return StepMetrics(batch_loss, accuracy(arch, out, y), nu)


def evaluate(arch: Architecture, params: Params, dataset: Dataset) -> tuple[float, float]:
    """Loss and accuracy over a full split, BN in eval mode."""
    out, _ = forward(arch, params, dataset.X, training=False)
    return loss(arch, out, dataset.y), accuracy(arch, out, dataset.y)


@dataclass
class EpochRecord:
    """One row of training metrics."""

    epoch: int
    iteration: int
    train_loss: float
    test_loss: float
    train_acc: float
    test_acc: float
    wall_seconds: float
    lr: float
    nu_mean: float

    FIELDS = ("epoch", "iteration", "train_loss", "test_loss", "train_acc",
              "test_acc", "wall_seconds", "lr", "nu_mean")

    def as_row(self) -> list:
        return [getattr(self, name) for name in self.FIELDS]


def seed_streams(seed: int) -> tuple[np.random.Generator, np.random.Generator, np.random.Generator]:
    """Independent (init, batching, label-sampling) generators for one run."""
    init_ss, batch_ss, label_ss = np.random.SeedSequence(seed).spawn(3)
    return (np.random.default_rng(init_ss), np.random.default_rng(batch_ss),
            np.random.default_rng(label_ss))


CHECKPOINT_FORMAT = 1


def save_checkpoint(path, arch: Architecture, params: Params, state: OptimizerState,
                    batch_rng: np.random.Generator, label_rng: np.random.Generator,
                    epoch: int) -> None:
    """Persist everything needed to continue a run exactly where it stopped.

    The covariance factors, current block inverses, and the coarse matrix all
    travel along, so a resumed K-FAC run keeps using the same preconditioner
    until its next scheduled refresh, exactly like the uninterrupted run.
    """
    meta = {
        "format": CHECKPOINT_FORMAT,
        "epoch": epoch,
        "iteration": state.iteration,
        "adam_t": state.adam_t,
        "cov_mode": None if state.cov is None else state.cov.mode,
        "cov_step": None if state.cov is None else state.cov.step,
        "layer_dims": list(arch.layer_dims),
        "batch_rng": batch_rng.bit_generator.state,
        "label_rng": label_rng.bit_generator.state,
        "blocks_mode": None if state.blocks is None else state.blocks.mode,
        "coarse_skipped": state.coarse_skipped,
        "has_coarse": state.coarse is not None,
    }
    arrays = {
        "theta": params.theta,
        "velocity": state.velocity,
    }
    if state.adam_m is not None:
        arrays["adam_m"] = state.adam_m
        arrays["adam_v"] = state.adam_v
    for i in range(arch.n_layers):
        if params.bn_gamma[i] is not None:
            arrays[f"bn_gamma_{i}"] = params.bn_gamma[i]
            arrays[f"bn_beta_{i}"] = params.bn_beta[i]
            arrays[f"bn_mean_{i}"] = params.bn_mean[i]
            arrays[f"bn_var_{i}"] = params.bn_var[i]
            vg, vb = state.bn_velocity[i]
            arrays[f"bn_vel_gamma_{i}"] = vg
            arrays[f"bn_vel_beta_{i}"] = vb
    if state.cov is not None:
        for (i, j), m in state.cov.A.items():
            arrays[f"cov_a_{i}_{j}"] = m
        for (i, j), m in state.cov.G.items():
            arrays[f"cov_g_{i}_{j}"] = m
    if state.blocks is not None:
        pis = []
        for i, block in enumerate(state.blocks.blocks):
            if state.blocks.mode == "eig":
                arrays[f"blk_{i}_a_vals"] = block.input_eig.values
                arrays[f"blk_{i}_a_vecs"] = block.input_eig.vectors
                arrays[f"blk_{i}_g_vals"] = block.output_eig.values
                arrays[f"blk_{i}_g_vecs"] = block.output_eig.vectors
            else:
                arrays[f"blk_{i}_a_cho"] = block.input_chol[0]
                arrays[f"blk_{i}_g_cho"] = block.output_chol[0]
                pis.append(block.pi)
        meta["block_pis"] = pis
    if state.coarse is not None:
        arrays["coarse_f"] = state.coarse.coarse_fisher
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    write_npz(path, arrays)


def load_checkpoint(path, arch: Architecture, cfg: OptimizerConfig):
    """Restore (params, state, batch_rng, label_rng, epoch) from a checkpoint."""
    with np.load(path) as archive:
        data = {name: archive[name] for name in archive.files}
    try:
        meta = json.loads(bytes(data["meta"]))
    except (KeyError, ValueError) as exc:
        raise InputError(f"{path}: not a checkpoint file: {exc}") from exc
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise InputError(
            f"{path}: unsupported checkpoint format {meta.get('format')!r}")
    if tuple(meta["layer_dims"]) != arch.layer_dims:
        raise StateError(
            f"{path}: checkpoint is for layer dims {meta['layer_dims']}, "
            f"architecture has {list(arch.layer_dims)}")
    params = init_params(arch, np.random.default_rng(0))
    params.theta[:] = data["theta"]
    state = init_optimizer_state(arch, cfg)
    state.velocity[:] = data["velocity"]
    state.iteration = int(meta["iteration"])
    state.adam_t = int(meta["adam_t"])
    if state.adam_m is not None and "adam_m" in data:
        state.adam_m[:] = data["adam_m"]
        state.adam_v[:] = data["adam_v"]
    for i in range(arch.n_layers):
        if params.bn_gamma[i] is not None:
            params.bn_gamma[i][:] = data[f"bn_gamma_{i}"]
            params.bn_beta[i][:] = data[f"bn_beta_{i}"]
            params.bn_mean[i][:] = data[f"bn_mean_{i}"]
            params.bn_var[i][:] = data[f"bn_var_{i}"]
            vg, vb = state.bn_velocity[i]
            vg[:] = data[f"bn_vel_gamma_{i}"]
            vb[:] = data[f"bn_vel_beta_{i}"]
    if state.cov is not None:
        if meta["cov_mode"] != state.cov.mode:
            raise StateError(
                f"{path}: checkpoint covariance mode {meta['cov_mode']!r} does not "
                f"match optimizer kind {cfg.kind!r}")
        state.cov.step = int(meta["cov_step"])
        for (i, j) in state.cov.pairs():
            if f"cov_a_{i}_{j}" in data:
                state.cov.A[(i, j)] = data[f"cov_a_{i}_{j}"]
                state.cov.G[(i, j)] = data[f"cov_g_{i}_{j}"]
    if meta.get("blocks_mode") is not None:
        mode = meta["blocks_mode"]
        blocks = []
        shapes = []
        for i in range(arch.n_layers):
            if mode == "eig":
                block = EigBlock(
                    SymEig(data[f"blk_{i}_a_vals"], data[f"blk_{i}_a_vecs"]),
                    SymEig(data[f"blk_{i}_g_vals"], data[f"blk_{i}_g_vecs"]))
                shapes.append((block.output_eig.vectors.shape[0],
                               block.input_eig.vectors.shape[0]))
            else:
                block = TikhonovBlock((data[f"blk_{i}_a_cho"], True),
                                      (data[f"blk_{i}_g_cho"], True),
                                      float(meta["block_pis"][i]))
                shapes.append((block.output_chol[0].shape[0],
                               block.input_chol[0].shape[0]))
            blocks.append(block)
        state.blocks = BlockInverses(mode, blocks, shapes)
    if meta.get("has_coarse"):
        sizes = [r * c for r, c in state.blocks.shapes]
        state.coarse = CoarseState(data["coarse_f"], sizes)
    state.coarse_skipped = bool(meta.get("coarse_skipped", False))
    batch_rng = np.random.default_rng()
    batch_rng.bit_generator.state = meta["batch_rng"]
    label_rng = np.random.default_rng()
    label_rng.bit_generator.state = meta["label_rng"]
    return params, state, batch_rng, label_rng, int(meta["epoch"])


def train(arch: Architecture, params: Params, cfg: OptimizerConfig,
          train_ds: Dataset, test_ds: Dataset | None, epochs: int, batch_size: int,
          batch_rng: np.random.Generator, label_rng: np.random.Generator,
          on_epoch=None, state: OptimizerState | None = None,
          start_epoch: int = 1) -> list[EpochRecord]:
    """Run the configured optimizer and report per-epoch metrics.

    train_loss/train_acc are sample-weighted means over the epoch's training
    minibatches (what the optimizer saw, batch statistics for BN);
    test_loss/test_acc evaluate the test split at epoch end with BN in eval
    mode. nu_mean averages the clipping factor over the epoch's iterations
    (1.0 for SGD/Adam). Mutates `params` and returns the records.

    Passing a restored `state` and `start_epoch` continues an interrupted
    run; with the checkpointed generators this reproduces the uninterrupted
    trajectory exactly.
    """
    if epochs < start_epoch - 1:
        raise ConfigError(f"epochs: must be >= {start_epoch - 1}, got {epochs}")
    if state is None:
        state = init_optimizer_state(arch, cfg)
    records = []
    for epoch in range(start_epoch, epochs + 1):
        lr = lr_at(epoch, cfg)
        nus = []
        loss_sum = acc_sum = sample_count = 0.0
        started = time.perf_counter()
        for xb, yb in minibatches(train_ds, batch_size, batch_rng):
            if cfg.is_kfac:
                metrics = step_kfac(arch, params, state, xb, yb, cfg, lr, label_rng)
            else:
                out, cache = forward(arch, params, xb, training=True)
                grads = backward(arch, params, cache, yb)
                if cfg.kind == "sgd":
                    step_sgd(params, state, grads, cfg, lr)
                else:
                    step_adam(params, state, grads, cfg, lr)
                metrics = StepMetrics(loss(arch, out, yb), accuracy(arch, out, yb), 1.0)
                state.iteration += 1
            nus.append(metrics.nu)
            b = xb.shape[1]
            loss_sum += metrics.loss * b
            acc_sum += metrics.accuracy * b
            sample_count += b
        wall = time.perf_counter() - started
        if test_ds is not None:
            test_loss, test_acc = evaluate(arch, params, test_ds)
        else:
            test_loss, test_acc = float("nan"), float("nan")
        record = EpochRecord(epoch, state.iteration, loss_sum / sample_count,
                             test_loss, acc_sum / sample_count, test_acc, wall, lr,
                             float(np.mean(nus)))
        records.append(record)
        if on_epoch is not None:
            on_epoch(record)
    return records
