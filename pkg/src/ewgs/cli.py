"""Command-line front end.

    ewgs run --config cfg.json [--seed N] [--delta-mode ste|fixed:<v>|adaptive]
             [--w-bits B] [--a-bits B] [--out DIR]
    ewgs compare <run-dir-or-config>... [--out summary.csv]

Each run writes into ``<out>/<config-hash12>-<timestamp>``:

    config.json          resolved configuration (re-runnable with ``run --config``)
    metrics.csv          epoch,iteration,split,loss,accuracy
    probe-reports.csv    iteration,quantizer_id,trace,N,G,delta,n_probes
    deltas.csv           epoch,iteration,quantizer_id,delta
    final.ckpt           binary checkpoint (diverged.ckpt if the loss blew up)
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .checkpoint import save_checkpoint
from .config import ConfigError, ExperimentConfig
from .data import Dataset, load_mnist, make_two_moons
from .layers import build_model
from .scaling import REPORT_COLUMNS
from .training import METRIC_COLUMNS, Trainer, TrainingDiverged

logger = logging.getLogger(__name__)

DELTA_COLUMNS = ["epoch", "iteration", "quantizer_id", "delta"]
SUMMARY_METRICS = [("train_eval", "loss"), ("train_eval", "accuracy"), ("test", "loss"), ("test", "accuracy")]
#: Fields allowed to differ between runs passed to ``compare``.
COMPARE_FREE = {"delta_mode", "g_mode", "seed", "output_dir"}

EXIT_CONFIG = 2
EXIT_DIVERGED = 3


def load_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    if cfg.task == "two_moons":
        train = make_two_moons(cfg.n_train, cfg.noise, seed=cfg.data_seed, split="train")
        test = make_two_moons(cfg.n_test, cfg.noise, seed=cfg.data_seed + 1, split="test")
        return train, test
    train = load_mnist("train", cfg.data_root, subset=cfg.mnist_subset)
    test = load_mnist("test", cfg.data_root, subset=cfg.mnist_test_subset)
    return train, test


def write_csv(path: Path, columns: Sequence[str], rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in columns})


def make_run_dir(out: Path, cfg: ExperimentConfig) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = out / f"{cfg.digest()[:12]}-{stamp}"
    path, n = base, 1
    while path.exists():
        path = Path(f"{base}.{n}")
        n += 1
    path.mkdir(parents=True)
    return path


def write_outputs(run_dir: Path, trainer: Trainer) -> None:
    result = trainer.result()
    write_csv(run_dir / "metrics.csv", METRIC_COLUMNS, result.history)
    write_csv(run_dir / "probe-reports.csv", REPORT_COLUMNS, [r.as_row() for r in result.reports])
    write_csv(run_dir / "deltas.csv", DELTA_COLUMNS, result.delta_history)


def execute(cfg: ExperimentConfig, out: Optional[str] = None) -> Path:
    """Train one configuration and write its run directory; returns the directory."""
    train_set, test_set = load_datasets(cfg)
    model = build_model(cfg.model_spec(), seed=cfg.seed)
    trainer = Trainer(model, train_set, cfg.train_config(), test_set)
    run_dir = make_run_dir(Path(out or cfg.output_dir), cfg)
    with open(run_dir / "config.json", "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    logger.info("run directory %s (%d iterations)", run_dir, trainer.total_iters)
    try:
        if cfg.checkpoint_every:
            while trainer.iteration < trainer.total_iters:
                trainer.fit(until=trainer.iteration + cfg.checkpoint_every)
                save_checkpoint(run_dir / f"iter{trainer.iteration:08d}.ckpt", model, trainer, cfg.to_dict())
        else:
            trainer.fit()
    except TrainingDiverged:
        save_checkpoint(run_dir / "diverged.ckpt", model, trainer, cfg.to_dict())
        write_outputs(run_dir, trainer)
        raise
    save_checkpoint(run_dir / "final.ckpt", model, trainer, cfg.to_dict())
    write_outputs(run_dir, trainer)
    return run_dir


# ---------------------------------------------------------------------------
# compare


def read_run(run_dir: Path) -> tuple[dict, dict]:
    """Config dict and final metrics ``{(split, metric): value}`` of a finished run."""
    with open(run_dir / "config.json") as fh:
        config = json.load(fh)
    final: dict = {}
    with open(run_dir / "metrics.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            for metric in ("loss", "accuracy"):
                final[(row["split"], metric)] = float(row[metric])
    return config, final


def check_comparable(configs: Sequence[dict]) -> None:
    ref = configs[0]
    for cfg in configs[1:]:
        diff = sorted(k for k in set(ref) | set(cfg) if k not in COMPARE_FREE and ref.get(k) != cfg.get(k))
        if diff:
            raise ConfigError(f"runs are not comparable; they differ in: {', '.join(diff)}")


def summarize(runs: Sequence[tuple[dict, dict]]) -> list[dict]:
    """One row per (delta_mode, g_mode): mean and sample std over seeds."""
    groups: dict[tuple[str, str], list[dict]] = {}
    for config, final in runs:
        groups.setdefault((config["delta_mode"], config["g_mode"]), []).append(final)
    rows = []
    for (delta_mode, g_mode), finals in groups.items():
        row: dict = {"delta_mode": delta_mode, "g_mode": g_mode, "n_runs": len(finals)}
        for split, metric in SUMMARY_METRICS:
            values = np.array([f.get((split, metric), np.nan) for f in finals])
            row[f"{split}_{metric}_mean"] = float(np.mean(values))
            row[f"{split}_{metric}_std"] = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
        rows.append(row)
    return rows


SUMMARY_COLUMNS = ["delta_mode", "g_mode", "n_runs"] + [
    f"{s}_{m}_{stat}" for s, m in SUMMARY_METRICS for stat in ("mean", "std")
]


def compare(targets: Sequence[str], out: Optional[str] = None) -> list[dict]:
    """Summarize run directories; config files among ``targets`` are run first."""
    if len(targets) < 2:
        raise ConfigError("compare needs at least two runs or configs")
    configs = []
    for t in targets:
        p = Path(t)
        configs.append(json.loads((p / "config.json").read_text()) if p.is_dir() else ExperimentConfig.load(p).to_dict())
    check_comparable(configs)
    runs = []
    for t in targets:
        p = Path(t)
        run_dir = p if p.is_dir() else execute(ExperimentConfig.load(p))
        runs.append(read_run(run_dir))
    rows = summarize(runs)
    if out:
        write_csv(Path(out), SUMMARY_COLUMNS, rows)
    else:
        writer = csv.DictWriter(sys.stdout, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return rows


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ewgs", description="Quantization-aware training with element-wise gradient scaling.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train one configuration")
    run.add_argument("--config", required=True, help="JSON config file")
    run.add_argument("--seed", type=int)
    run.add_argument("--delta-mode", help="ste | fixed:<value> | adaptive")
    run.add_argument("--w-bits", type=int, help="weight bit-width (32 = full precision)")
    run.add_argument("--a-bits", type=int, help="activation bit-width (32 = full precision)")
    run.add_argument("--out", help="parent directory for the run directory")

    cmp_ = sub.add_parser("compare", help="summarize runs that differ only in delta_mode/g_mode/seed")
    cmp_.add_argument("targets", nargs="+", help="run directories or config files")
    cmp_.add_argument("--out", help="summary CSV path (default: stdout)")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            overrides = {"seed": args.seed, "delta_mode": args.delta_mode, "w_bits": args.w_bits, "a_bits": args.a_bits}
            cfg = ExperimentConfig.load(args.config, overrides)
            run_dir = execute(cfg, args.out)
            print(run_dir)
        else:
            compare(args.targets, args.out)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"error: {exc}; checkpoint saved", file=sys.stderr)
        return EXIT_DIVERGED
    return 0


if __name__ == "__main__":
    sys.exit(main())
