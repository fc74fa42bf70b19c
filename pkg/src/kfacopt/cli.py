"""Command-line interface: dataset generation, training, comparison grids.

Subcommands: gen-data, train, compare, validate-config. Configuration lives
in a JSON file (see README for the schema); `--set dotted.key=value` and a
few common flags override file values. Exit codes: 0 success, 2 config or
input error, 3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    DEFAULT_D_IN,
    DEFAULT_N_TEST,
    DEFAULT_N_TRAIN,
    Dataset,
    gen_planted,
    load_csv,
    load_planted,
    save_planted,
)
from .errors import ConfigError, InputError, KfacoptError, NumericalError
from .network import Architecture, init_params
from .optim import (
    OPTIMIZER_KINDS,
    EpochRecord,
    OptimizerConfig,
    init_optimizer_state,
    load_checkpoint,
    save_checkpoint,
    seed_streams,
    train,
)

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4

RUN_CSV_HEADER = list(EpochRecord.FIELDS)

_IGNORED_TOP_KEYS = ("version",)


# ---------------------------------------------------------------------------
# configuration


@dataclass
class RunConfig:
    """Fully validated configuration of one training run."""

    arch: Architecture
    data: dict
    optimizer: OptimizerConfig
    epochs: int
    batch_size: int
    seed: int
    out_dir: str

    def echo(self) -> dict:
        """Round-trippable JSON form of everything that defines the run."""
        return {
            "version": __version__,
            "arch": {
                "dims": list(self.arch.layer_dims),
                "activation": self.arch.activations[0],
                "batchnorm": bool(any(self.arch.batchnorm)),
                "loss": self.arch.loss_kind,
            },
            "data": dict(self.data),
            "optimizer": {
                "kind": self.optimizer.kind,
                "lr": self.optimizer.lr,
                "momentum": self.optimizer.momentum,
                "weight_decay": self.optimizer.weight_decay,
                "damping": self.optimizer.damping,
                "kl_clip": self.optimizer.kl_clip,
                "damping_mode": self.optimizer.damping_mode,
                "cov_update_interval": self.optimizer.cov_update_interval,
                "precond_update_interval": self.optimizer.precond_update_interval,
                "adam_beta1": self.optimizer.adam_beta1,
                "adam_beta2": self.optimizer.adam_beta2,
                "adam_eps": self.optimizer.adam_eps,
                "empirical_fisher": self.optimizer.empirical_fisher,
                "lr_schedule": [list(pair) for pair in self.optimizer.lr_schedule],
            },
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "out_dir": self.out_dir,
        }


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


def _as_int(raw: dict, key: str, where: str, minimum: int | None = None) -> int:
    _require(key in raw, f"{where}.{key}: required")
    value = raw[key]
    _require(isinstance(value, int) and not isinstance(value, bool),
             f"{where}.{key}: must be an integer, got {value!r}")
    if minimum is not None:
        _require(value >= minimum, f"{where}.{key}: must be >= {minimum}, got {value}")
    return value


def parse_arch(raw: dict) -> Architecture:
    _require(isinstance(raw, dict), "arch: must be an object")
    activation = raw.get("activation", "identity")
    batchnorm = raw.get("batchnorm", False)
    loss = raw.get("loss", "bernoulli_logit")
    _require(isinstance(batchnorm, bool), "arch.batchnorm: must be true or false")
    if "dims" in raw:
        dims = raw["dims"]
        _require(isinstance(dims, list) and len(dims) >= 2
                 and all(isinstance(d, int) and d >= 1 for d in dims),
                 "arch.dims: must be a list of at least two positive integers")
        d_in, hidden, d_out = dims[0], dims[1:-1], dims[-1]
    else:
        d_in = _as_int(raw, "d_in", "arch", minimum=1)
        width = _as_int(raw, "width", "arch", minimum=1)
        depth = _as_int(raw, "depth", "arch", minimum=0)
        d_out = raw.get("d_out", 1)
        _require(isinstance(d_out, int) and d_out >= 1, "arch.d_out: must be >= 1")
        hidden = [width] * depth
    try:
        return Architecture.mlp(d_in, hidden, d_out, activation=activation,
                                batchnorm=batchnorm, loss_kind=loss)
    except ConfigError as exc:
        raise ConfigError(f"arch: {exc}") from exc


def parse_optimizer(raw: dict) -> OptimizerConfig:
    _require(isinstance(raw, dict), "optimizer: must be an object")
    kind = raw.get("kind")
    _require(isinstance(kind, str) and kind in OPTIMIZER_KINDS,
             f"optimizer.kind: must be one of {list(OPTIMIZER_KINDS)}, got {kind!r}")
    known = {
        "kind", "lr", "momentum", "weight_decay", "damping", "kl_clip",
        "damping_mode", "cov_update_interval", "precond_update_interval",
        "adam_beta1", "adam_beta2", "adam_eps", "empirical_fisher", "lr_schedule",
    }
    for key in raw:
        _require(key in known, f"optimizer.{key}: unknown field")
    kwargs = dict(raw)
    if "lr_schedule" in kwargs:
        schedule = kwargs["lr_schedule"]
        _require(isinstance(schedule, list)
                 and all(isinstance(p, list) and len(p) == 2 for p in schedule),
                 "optimizer.lr_schedule: must be a list of [epoch, multiplier] pairs")
        kwargs["lr_schedule"] = tuple((int(e), float(m)) for e, m in schedule)
    return OptimizerConfig(**kwargs)


def parse_data_spec(raw: dict) -> dict:
    _require(isinstance(raw, dict), "data: must be an object")
    kind = raw.get("kind")
    _require(kind in ("planted", "cache", "csv"),
             f"data.kind: must be 'planted', 'cache', or 'csv', got {kind!r}")
    spec = {"kind": kind}
    if kind == "planted":
        spec["d_in"] = raw.get("d_in", DEFAULT_D_IN)
        spec["n_train"] = raw.get("n_train", DEFAULT_N_TRAIN)
        spec["n_test"] = raw.get("n_test", DEFAULT_N_TEST)
        spec["seed"] = raw.get("seed", 0)
        for key in ("d_in", "n_train", "n_test", "seed"):
            _require(isinstance(spec[key], int), f"data.{key}: must be an integer")
        for key in ("d_in", "n_train", "n_test"):
            _require(spec[key] >= 1, f"data.{key}: must be >= 1")
    elif kind == "cache":
        _require(isinstance(raw.get("path"), str), "data.path: required for cache data")
        spec["path"] = raw["path"]
    else:
        _require(isinstance(raw.get("train_path"), str),
                 "data.train_path: required for csv data")
        spec["train_path"] = raw["train_path"]
        if raw.get("test_path") is not None:
            _require(isinstance(raw["test_path"], str), "data.test_path: must be a path")
            spec["test_path"] = raw["test_path"]
    return spec


def load_data_spec(spec: dict) -> tuple[Dataset, Dataset | None]:
    kind = spec["kind"]
    if kind == "planted":
        return gen_planted(spec["d_in"], spec["n_train"], spec["n_test"], spec["seed"])
    if kind == "cache":
        return load_planted(spec["path"])
    train_ds = load_csv(spec["train_path"])
    test_ds = load_csv(spec["test_path"]) if "test_path" in spec else None
    return train_ds, test_ds


def parse_run_config(raw: dict) -> RunConfig:
    _require(isinstance(raw, dict), "config: must be a JSON object")
    known = {"arch", "data", "optimizer", "epochs", "batch_size", "seed", "out_dir"}
    for key in raw:
        _require(key in known or key in _IGNORED_TOP_KEYS, f"{key}: unknown field")
    for section in ("arch", "data", "optimizer"):
        _require(section in raw, f"{section}: required section")
    _require("seed" in raw, "seed: required (runs must be reproducible)")
    arch = parse_arch(raw["arch"])
    data = parse_data_spec(raw["data"])
    optimizer = parse_optimizer(raw["optimizer"])
    epochs = _as_int(raw, "epochs", "config", minimum=1)
    batch_size = _as_int(raw, "batch_size", "config", minimum=1)
    seed = _as_int(raw, "seed", "config")
    out_dir = raw.get("out_dir", "runs/run")
    _require(isinstance(out_dir, str) and out_dir, "out_dir: must be a non-empty path")
    return RunConfig(arch, data, optimizer, epochs, batch_size, seed, out_dir)


def load_config_file(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc


def apply_overrides(raw: dict, assignments: list[str]) -> dict:
    """Apply `dotted.key=value` overrides; values are parsed as JSON when possible."""
    for assignment in assignments:
        if "=" not in assignment:
            raise ConfigError(f"--set {assignment!r}: expected dotted.key=value")
        dotted, text = assignment.split("=", 1)
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        node = raw
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set {dotted}: {part} is not an object")
        node[parts[-1]] = value
    return raw


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    train_ds, test_ds = gen_planted(args.d_in, args.train, args.test, args.seed)
    out = Path(args.out)
    if out.parent and not out.parent.exists():
        out.parent.mkdir(parents=True, exist_ok=True)
    save_planted(out, train_ds, test_ds)
    balance = float(np.mean(train_ds.y))
    print(f"wrote {out}")
    print(f"  train: {train_ds.n_samples} samples, {train_ds.n_features} features")
    print(f"  test:  {test_ds.n_samples} samples")
    print(f"  label balance (train fraction of 1s): {balance:.4f}")
    print(f"  teacher norm: {np.linalg.norm(train_ds.teacher):.4f}, seed: {args.seed}")
    return EXIT_OK


def _run_one(config: RunConfig, out_dir: Path, quiet: bool = False,
             resume=None) -> list[EpochRecord]:
    train_ds, test_ds = load_data_spec(config.data)
    if train_ds.n_features != config.arch.layer_dims[0]:
        raise ConfigError(
            f"arch.dims: input width {config.arch.layer_dims[0]} does not match "
            f"dataset features {train_ds.n_features}")
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.echo.json").write_text(
        json.dumps(config.echo(), indent=2, sort_keys=True) + "\n")
    if resume is not None:
        params, state, batch_rng, label_rng, last_epoch = load_checkpoint(
            resume, config.arch, config.optimizer)
        start_epoch = last_epoch + 1
    else:
        init_rng, batch_rng, label_rng = seed_streams(config.seed)
        params = init_params(config.arch, init_rng)
        state = init_optimizer_state(config.arch, config.optimizer)
        start_epoch = 1
    csv_path = out_dir / "run.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RUN_CSV_HEADER)
        fh.flush()

        def on_epoch(record: EpochRecord) -> None:
            writer.writerow([repr(v) if isinstance(v, float) else v
                             for v in record.as_row()])
            fh.flush()
            save_checkpoint(out_dir / "checkpoint.npz", config.arch, params, state,
                            batch_rng, label_rng, record.epoch)
            if not quiet:
                print(f"epoch {record.epoch:3d}  train_loss {record.train_loss:.6f}  "
                      f"test_loss {record.test_loss:.6f}  lr {record.lr:g}  "
                      f"nu {record.nu_mean:.3f}")

        records = train(config.arch, params, config.optimizer, train_ds, test_ds,
                        epochs=config.epochs, batch_size=config.batch_size,
                        batch_rng=batch_rng, label_rng=label_rng, on_epoch=on_epoch,
                        state=state, start_epoch=start_epoch)
    return records


def cmd_train(args) -> int:
    raw = load_config_file(args.config)
    raw = apply_overrides(raw, args.set or [])
    if args.out_dir:
        raw["out_dir"] = args.out_dir
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.epochs is not None:
        raw["epochs"] = args.epochs
    config = parse_run_config(raw)
    records = _run_one(config, Path(config.out_dir), resume=args.resume)
    if not records:
        print("nothing to do: checkpoint already covers all configured epochs")
        return EXIT_OK
    final = records[-1]
    print(f"done: {config.optimizer.kind} final train_loss {final.train_loss:.6f} "
          f"test_acc {final.test_acc:.4f} -> {config.out_dir}/run.csv")
    return EXIT_OK


def cmd_validate_config(args) -> int:
    raw = load_config_file(args.config)
    raw = apply_overrides(raw, args.set or [])
    if "optimizers" in raw or "grid" in raw or "seeds" in raw:
        base, grid_points, seeds = parse_compare_config(raw)
        print(f"valid comparison config: {len(grid_points)} grid points x "
              f"{len(seeds)} seeds = {len(grid_points) * len(seeds)} runs")
        print(json.dumps(base.echo(), indent=2, sort_keys=True))
    else:
        config = parse_run_config(raw)
        print("valid run config")
        print(json.dumps(config.echo(), indent=2, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# comparison grids


GRID_KEYS = ("lr", "momentum", "damping", "kl_clip")


def parse_compare_config(raw: dict) -> tuple[RunConfig, list[dict], list[int]]:
    """Split a comparison config into a base run, grid points, and seeds.

    Grid points are dicts {kind, lr, momentum[, damping, kl_clip]}; damping
    and clipping dimensions only apply to the K-FAC optimizers. For Adam the
    momentum axis drives both the first-moment decay and the BN momentum.
    """
    _require(isinstance(raw, dict), "config: must be a JSON object")
    optimizers = raw.get("optimizers")
    _require(isinstance(optimizers, list) and optimizers, "optimizers: non-empty list required")
    for kind in optimizers:
        _require(kind in OPTIMIZER_KINDS,
                 f"optimizers: unknown kind {kind!r}, choose from {list(OPTIMIZER_KINDS)}")
    grid = raw.get("grid", {})
    _require(isinstance(grid, dict), "grid: must be an object")
    for key in grid:
        _require(key in GRID_KEYS, f"grid.{key}: unknown axis, choose from {list(GRID_KEYS)}")
        _require(isinstance(grid[key], list) and grid[key], f"grid.{key}: non-empty list required")
    seeds = raw.get("seeds", [raw.get("seed", 0)])
    _require(isinstance(seeds, list) and seeds
             and all(isinstance(s, int) for s in seeds), "seeds: non-empty list of integers")

    base_raw = {k: v for k, v in raw.items()
                if k in ("arch", "data", "epochs", "batch_size", "out_dir")}
    base_raw["optimizer"] = dict(raw.get("base_optimizer", {}))
    base_raw["optimizer"].setdefault("kind", optimizers[0])
    base_raw["seed"] = seeds[0]
    base = parse_run_config(base_raw)

    lrs = grid.get("lr", [base.optimizer.lr])
    momenta = grid.get("momentum", [base.optimizer.momentum])
    dampings = grid.get("damping", [base.optimizer.damping])
    clips = grid.get("kl_clip", [base.optimizer.kl_clip])
    points = []
    for kind in optimizers:
        if kind in ("kfac1", "kfac2"):
            combos = itertools.product(lrs, momenta, dampings, clips)
            for lr, mu, lam, kap in combos:
                points.append({"kind": kind, "lr": lr, "momentum": mu,
                               "damping": lam, "kl_clip": kap})
        else:
            for lr, mu in itertools.product(lrs, momenta):
                points.append({"kind": kind, "lr": lr, "momentum": mu})
    return base, points, seeds


def _point_config(base: RunConfig, point: dict, seed: int) -> RunConfig:
    kwargs = {
        "kind": point["kind"],
        "lr": float(point["lr"]),
        "momentum": float(point["momentum"]),
        "weight_decay": base.optimizer.weight_decay,
        "damping_mode": base.optimizer.damping_mode,
        "cov_update_interval": base.optimizer.cov_update_interval,
        "precond_update_interval": base.optimizer.precond_update_interval,
        "adam_beta2": base.optimizer.adam_beta2,
        "adam_eps": base.optimizer.adam_eps,
        "empirical_fisher": base.optimizer.empirical_fisher,
        "lr_schedule": base.optimizer.lr_schedule,
        "damping": float(point.get("damping", base.optimizer.damping)),
        "kl_clip": float(point.get("kl_clip", base.optimizer.kl_clip)),
        "adam_beta1": float(point["momentum"]) if point["kind"] == "adam"
                      else base.optimizer.adam_beta1,
    }
    optimizer = OptimizerConfig(**kwargs)
    return RunConfig(base.arch, base.data, optimizer, base.epochs, base.batch_size,
                     seed, base.out_dir)


def _point_name(point: dict, seed: int) -> str:
    parts = [point["kind"], f"lr{point['lr']:g}", f"m{point['momentum']:g}"]
    if "damping" in point:
        parts.append(f"lam{point['damping']:g}")
        parts.append(f"kap{point['kl_clip']:g}")
    parts.append(f"s{seed}")
    return "_".join(parts).replace(".", "p").replace("-", "m")


def cmd_compare(args) -> int:
    raw = load_config_file(args.config)
    raw = apply_overrides(raw, args.set or [])
    if args.out_dir:
        raw["out_dir"] = args.out_dir
    base, points, seeds = parse_compare_config(raw)
    out_root = Path(base.out_dir)
    out_root.mkdir(parents=True, exist_ok=True)
    results = []
    total = len(points) * len(seeds)
    done = 0
    for point in points:
        finals = []
        for seed in seeds:
            done += 1
            name = _point_name(point, seed)
            run_config = _point_config(base, point, seed)
            print(f"[{done}/{total}] {name}")
            try:
                records = _run_one(run_config, out_root / "runs" / name, quiet=True)
                finals.append(records[-1])
            except KfacoptError as exc:
                log.error("run %s failed: %s", name, exc)
                finals.append(exc)
        results.append((point, finals))
    summary_path = out_root / "summary.csv"
    _write_summary(summary_path, results, seeds)
    print(f"wrote {summary_path}")
    return EXIT_OK


def _write_summary(path: Path, results, seeds: list[int]) -> None:
    rows = []
    for point, finals in results:
        records = [f for f in finals if isinstance(f, EpochRecord)]
        failed = len(finals) - len(records)
        if records:
            train_losses = np.array([r.train_loss for r in records])
            mean = float(train_losses.mean())
            ci95 = float(1.96 * train_losses.std(ddof=1) / np.sqrt(len(records))) \
                if len(records) > 1 else 0.0
            test_loss = float(np.mean([r.test_loss for r in records]))
            test_acc = float(np.mean([r.test_acc for r in records]))
        else:
            mean, ci95, test_loss, test_acc = (float("nan"),) * 4
        rows.append({
            "optimizer": point["kind"],
            "lr": point["lr"],
            "momentum": point["momentum"],
            "damping": point.get("damping", ""),
            "kl_clip": point.get("kl_clip", ""),
            "n_seeds": len(records),
            "n_failed": failed,
            "final_train_loss_mean": mean,
            "final_train_loss_ci95": ci95,
            "final_test_loss_mean": test_loss,
            "final_test_acc_mean": test_acc,
        })
    rows.sort(key=lambda r: (np.isnan(r["final_train_loss_mean"]),
                             r["final_train_loss_mean"]))
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kfacopt",
        description="Train feed-forward networks with SGD, Adam, or one-/two-level "
                    "K-FAC natural-gradient preconditioning.")
    parser.add_argument("--version", action="version", version=f"kfacopt {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="generate a planted-target dataset cache")
    gen.add_argument("--d-in", type=int, default=DEFAULT_D_IN)
    gen.add_argument("--train", type=int, default=DEFAULT_N_TRAIN)
    gen.add_argument("--test", type=int, default=DEFAULT_N_TEST)
    gen.add_argument("--seed", type=int, required=True)
    gen.add_argument("--out", required=True, help="output .npz path")
    gen.set_defaults(func=cmd_gen_data)

    tr = sub.add_parser("train", help="run one training configuration")
    tr.add_argument("--config", required=True, help="JSON run config")
    tr.add_argument("--set", action="append", metavar="KEY=VALUE",
                    help="override a config value (dotted keys, JSON values)")
    tr.add_argument("--out-dir")
    tr.add_argument("--seed", type=int)
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--resume", metavar="CHECKPOINT",
                    help="continue from a checkpoint.npz written by an earlier run")
    tr.set_defaults(func=cmd_train)

    cp = sub.add_parser("compare", help="run an optimizer comparison grid")
    cp.add_argument("--config", required=True, help="JSON comparison config")
    cp.add_argument("--set", action="append", metavar="KEY=VALUE")
    cp.add_argument("--out-dir")
    cp.set_defaults(func=cmd_compare)

    val = sub.add_parser("validate-config", help="check a config file and echo it")
    val.add_argument("--config", required=True)
    val.add_argument("--set", action="append", metavar="KEY=VALUE")
    val.set_defaults(func=cmd_validate_config)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
