"""Command-line entry point: ``triplh {prepare,train,evaluate,sweep,bench}``.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .benchmark import latency_bench
from .data import DataError, build_dataset, load_amazon_csv, load_movielens, load_split, save_split
from .evaluation import evaluate, score_histogram
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .trainer import TrainingDiverged, TrainSchedule, train

log = logging.getLogger("triplh")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3

SPLIT_FILE = "split.bin"
CHECKPOINT_FILE = "checkpoint.bin"
TRAIN_LOG_FILE = "train_log.jsonl"


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    """Flat union of model, schedule and path settings read from JSON."""

    split: Optional[str] = None
    out: str = "."
    model_kind: str = "TriplH"
    dim: int = 64
    beta: float = 1.0
    lam: float = 0.0
    init_scale: float = 0.01
    max_epochs: int = 100
    batch_size: int = 1024
    negatives_per_positive: int = 1
    patience: int = 10
    seed: int = 0
    lr: float = 1e-3
    weight_decay: float = 1e-5

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise UsageError(f"config {path} must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise UsageError(f"unknown config key(s) in {path}: {', '.join(unknown)}")
        return cls(**data)

    def model_config(self, **override) -> ModelConfig:
        fields = dict(
            model_kind=self.model_kind, dim=self.dim, beta=self.beta,
            lam=self.lam, init_scale=self.init_scale,
        )
        fields.update(override)
        return ModelConfig(**fields)

    def schedule(self) -> TrainSchedule:
        return TrainSchedule(
            max_epochs=self.max_epochs,
            batch_size=self.batch_size,
            negatives_per_positive=self.negatives_per_positive,
            patience=self.patience,
            seed=self.seed,
            lr=self.lr,
            weight_decay=self.weight_decay,
        )


def _load_run_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config)
    if args.out is not None:
        cfg.out = args.out
    if args.seed is not None:
        cfg.seed = args.seed
    if cfg.split is None:
        raise UsageError("config must name a 'split' file")
    return cfg


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(payload: dict) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True))


def _parse_dims(text: str) -> list[int]:
    try:
        dims = [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise UsageError(f"--dims must be comma-separated integers, got {text!r}") from exc
    if not dims:
        raise UsageError("--dims is empty")
    if len(set(dims)) != len(dims):
        raise UsageError(f"--dims contains duplicates: {text}")
    if min(dims) < 1:
        raise UsageError("--dims entries must be positive")
    return dims


# ---------------------------------------------------------------------------
# commands


def cmd_prepare(args) -> int:
    raw_path = Path(args.raw)
    if not raw_path.is_file():
        raise UsageError(f"no such file: {raw_path}")
    loader = load_movielens if args.format == "movielens" else load_amazon_csv
    dataset = build_dataset(loader(raw_path), min_rating_threshold=args.min_rating)
    out = _out_dir(args.out)
    save_split(dataset, out / SPLIT_FILE)
    _emit(dataset.summary())
    return EXIT_OK


def _train_one(cfg: RunConfig, model_cfg: ModelConfig, out: Path, dataset) -> tuple[int, object]:
    try:
        result = train(dataset, model_cfg, cfg.schedule(), log_path=out / TRAIN_LOG_FILE)
    except TrainingDiverged as exc:
        save_checkpoint(exc.table, model_cfg, out / CHECKPOINT_FILE)
        log.error("training diverged: %s; last good checkpoint kept", exc)
        return EXIT_RUNTIME, None
    save_checkpoint(result.table, model_cfg, out / CHECKPOINT_FILE)
    return EXIT_OK, result


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    model_cfg = cfg.model_config()
    cfg.schedule()  # validate before reading data
    dataset = load_split(cfg.split)
    out = _out_dir(cfg.out)
    code, result = _train_one(cfg, model_cfg, out, dataset)
    if code == EXIT_OK:
        last = result.history[-1] if result.history else {}
        _emit({
            "checkpoint": str(out / CHECKPOINT_FILE),
            "best_epoch": result.best_epoch,
            "epochs_run": len(result.history),
            "final_val_ndcg10": last.get("val_ndcg10"),
        })
    return code


def cmd_evaluate(args) -> int:
    try:
        table, model_cfg = load_checkpoint(args.checkpoint)
    except OSError as exc:
        raise UsageError(f"cannot read checkpoint {args.checkpoint}: {exc}") from exc
    dataset = load_split(args.split)
    if (table.n_users, table.n_items) != (dataset.n_users, dataset.n_items):
        raise UsageError(
            f"checkpoint has {table.n_users} users / {table.n_items} items but split has "
            f"{dataset.n_users} / {dataset.n_items}"
        )
    out = _out_dir(args.out)
    report, _ = evaluate(table, model_cfg, dataset, with_coverage=args.coverage)
    payload = report.to_dict()
    payload["model_kind"] = model_cfg.model_kind.value
    if args.coverage:
        with open(out / "popularity.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["bin", "share"])
            for name, share in report.popularity_shares.items():
                writer.writerow([name, repr(share)])
    if args.histogram:
        hist = score_histogram(table, model_cfg, dataset, seed=args.seed or 0)
        hist.to_csv(out / "histogram.csv")
        payload["separation"] = hist.separation
    (out / "report.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    _emit(payload)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load_run_config(args)
    dims = _parse_dims(args.dims)
    kinds = [k.strip() for k in (args.models or cfg.model_kind).split(",") if k.strip()]
    plans = [(d, cfg.model_config(model_kind=k, dim=d)) for d in dims for k in kinds]
    cfg.schedule()
    dataset = load_split(cfg.split)
    out = _out_dir(cfg.out)
    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["dim", "model", "hr10", "ndcg10"])
        fh.flush()
        for dim, model_cfg in plans:
            run_dir = _out_dir(out / f"{model_cfg.model_kind.value}-d{dim}")
            code, result = _train_one(cfg, model_cfg, run_dir, dataset)
            if code != EXIT_OK:
                log.error("sweep aborted at %s d=%d", model_cfg.model_kind.value, dim)
                return code
            report, _ = evaluate(result.table, model_cfg, dataset)
            writer.writerow([dim, model_cfg.model_kind.value, repr(report.hr10), repr(report.ndcg10)])
            fh.flush()
            log.info("%s d=%d hr10=%.4f", model_cfg.model_kind.value, dim, report.hr10)
    print((out / "sweep.csv").read_text(), end="")
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.pairs < 1:
        raise UsageError("--pairs must be positive")
    if args.dim < 1:
        raise UsageError("--dim must be positive")
    if args.repetitions < 1:
        raise UsageError("--repetitions must be positive")
    report = latency_bench(args.dim, args.pairs, args.repetitions, seed=args.seed or 0)
    payload = report.to_dict()
    if args.out is not None:
        (_out_dir(args.out) / "bench.json").write_text(json.dumps(payload, indent=2) + "\n")
    _emit(payload)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="triplh", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="parse raw interactions and write a split file")
    p.add_argument("raw", help="raw ratings file")
    p.add_argument("--format", choices=["movielens", "csv"], default="movielens")
    p.add_argument("--min-rating", type=float, default=None, help="keep ratings >= this value")
    p.add_argument("--out", default=".", help="output directory (default: .)")
    p.set_defaults(func=cmd_prepare)

    for name, func, text in (
        ("train", cmd_train, "train one model from a JSON config"),
        ("sweep", cmd_sweep, "train and evaluate over several embedding sizes"),
    ):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, help="flat JSON run config")
        p.add_argument("--out", default=None, help="output directory (overrides config)")
        p.add_argument("--seed", type=int, default=None, help="random seed (overrides config)")
        p.set_defaults(func=func)
        if name == "sweep":
            p.add_argument("--dims", required=True, help="comma-separated dimensions, e.g. 8,16,32")
            p.add_argument("--models", default=None, help="comma-separated model kinds")

    p = sub.add_parser("evaluate", help="rank held-out test items and write a report")
    p.add_argument("checkpoint")
    p.add_argument("split")
    p.add_argument("--out", default=".", help="output directory (default: .)")
    p.add_argument("--coverage", action="store_true", help="add Coverage@10 and popularity shares")
    p.add_argument("--histogram", action="store_true", help="write score histograms as CSV")
    p.add_argument("--seed", type=int, default=None, help="seed for histogram negatives")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bench", help="time Lorentz versus Poincare scoring")
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--pairs", type=int, default=1_000_000)
    p.add_argument("--repetitions", type=int, default=5)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="also write bench.json here")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (UsageError, DataError, ValueError, TypeError) as exc:
        print(f"triplh {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to the runtime exit code
        print(f"triplh {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
