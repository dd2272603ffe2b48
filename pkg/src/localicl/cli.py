"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, _kernels
from .config import ConfigError, ExperimentConfig, load_config
from .datagen import DataError, PriorConfig, gen_circles, gen_prior_task
from .evaluation import METRICS, EvalReport, ScoreTable, complexity_bins, size_bins
from .experiments import METHODS, circles_sweep, evaluate_many, finetune_run, parse_generator
from .io import ingest_csv, sha256_file, write_csv, write_json
from .model import load_checkpoint, save_checkpoint
from .numerics import ContractError, NumericalError
from .training import LOG_COLUMNS, TrainConfig, prior_fit

log = logging.getLogger("localicl")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
RECORD_COLUMNS = ("dataset", "fold", "method", "metric", "value")
SWEEP_COLUMNS = ("pairs", "k", "seed", "auc")


class Manifest:
    """Run manifest: resolved config, output hashes, wallclock per phase."""

    def __init__(self, command: str, cfg: ExperimentConfig):
        self.data = {"command": command, "tool_version": __version__, "kernel_backend": _kernels.backend(),
                     "config": cfg.to_dict(), "inputs": {}, "outputs": {}, "wallclock_ms": {}}
        self._t = time.perf_counter()

    def phase(self, name: str) -> None:
        now = time.perf_counter()
        self.data["wallclock_ms"][name] = int((now - self._t) * 1000)
        self._t = now

    def input(self, path) -> None:
        self.data["inputs"][str(path)] = sha256_file(path)

    def output(self, path) -> None:
        self.data["outputs"][Path(path).name] = sha256_file(path)

    def write(self, out_dir: Path) -> Path:
        path = out_dir / "manifest.json"
        write_json(path, self.data)
        return path


def _out_dir(args, cfg: ExperimentConfig) -> Path:
    out = Path(args.out or cfg.io.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _datasets(args) -> list:
    out = []
    cat = [c for c in (args.cat_cols or "").split(",") if c]
    for path in args.dataset or []:
        if not args.label_col:
            raise ConfigError("--label-col is required with --dataset")
        out.append(ingest_csv(path, args.label_col, cat))
    for spec in args.generator or []:
        out.append(parse_generator(spec))
    if not out:
        raise ConfigError("give at least one --dataset or --generator")
    return out


def _checkpoint(args, cfg: ExperimentConfig):
    path = args.checkpoint or cfg.io.checkpoint
    if not path:
        raise ConfigError("no checkpoint given (--checkpoint or io.checkpoint)")
    if not Path(path).is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    try:
        return Path(path), load_checkpoint(path)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def cmd_priorfit(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(args, cfg)
    man = Manifest("priorfit", cfg)
    pf = cfg.train.prior_fit
    if args.max_steps is not None:
        pf.max_steps = args.max_steps
        man.data["config"] = cfg.to_dict()
    tc = TrainConfig(mode="prior_fit", lr=pf.lr, weight_decay=pf.weight_decay, B=pf.B, eval_every=pf.eval_every,
                     max_steps=pf.max_steps, grad_clip=pf.grad_clip, seed=cfg.seed)
    progress = (lambda r: log.info("step %(step)d loss %(loss).4f auc %(auc).4f", r)) if args.verbose else None
    params, rows = prior_fit(cfg.model_config(), cfg.prior_config(), tc, progress=progress)
    man.phase("prior_fit")
    ckpt = out / "prior.lcpf"
    save_checkpoint(params, ckpt)
    write_csv(out / "train_log.csv", LOG_COLUMNS, rows)
    man.output(ckpt)
    man.output(out / "train_log.csv")
    write_json(out / "config.resolved.json", cfg.to_dict())
    man.output(out / "config.resolved.json")
    man.phase("write")
    man.write(out)
    print(ckpt)
    return 0


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(args, cfg)
    ckpt_path, params = _checkpoint(args, cfg)
    man = Manifest("evaluate", cfg)
    man.input(ckpt_path)
    methods = [m for m in (args.methods.split(",") if args.methods else cfg.eval.methods) if m]
    bad = set(methods) - set(METHODS)
    if bad:
        raise ConfigError(f"unknown methods {sorted(bad)}; choose from {list(METHODS)}")
    if args.folds is not None:
        cfg.eval.folds = args.folds
    datasets = _datasets(args)
    man.phase("load")
    report, skipped = evaluate_many(params, datasets, methods, cfg)
    man.phase("evaluate")
    write_csv(out / "records.csv", RECORD_COLUMNS, report.records)
    aggregates = {"aggregates": report.aggregates(cfg.eval.bootstrap_resamples, seed=cfg.seed),
                  "dataset_sizes": {d.name: len(d) for d in datasets if d.name not in skipped}, "skipped": skipped}
    write_json(out / "aggregates.json", aggregates)
    man.phase("aggregate")
    for name in ("records.csv", "aggregates.json"):
        man.output(out / name)
    man.write(out)
    print(out / "records.csv")
    return 0


def cmd_finetune(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(args, cfg)
    ckpt_path, params = _checkpoint(args, cfg)
    man = Manifest("finetune", cfg)
    man.input(ckpt_path)
    if args.max_steps is not None:
        cfg.train.finetune.max_steps = args.max_steps
    datasets = _datasets(args)
    if len(datasets) != 1:
        raise ConfigError("finetune takes exactly one dataset")
    from .experiments import validate_dataset

    validate_dataset(datasets[0], params)
    man.phase("load")
    tuned, rows, summary = finetune_run(params, datasets[0], cfg, args.mode)
    man.phase("finetune")
    save_checkpoint(tuned, out / "finetuned.lcpf")
    write_csv(out / "finetune_log.csv", LOG_COLUMNS, rows)
    write_json(out / "metrics.json", summary)
    for name in ("finetuned.lcpf", "finetune_log.csv", "metrics.json"):
        man.output(out / name)
    man.data["wallclock_ms"].update({f"run.{k}": v for k, v in summary["wallclock_ms"].items()})
    man.write(out)
    print(json.dumps({"before": summary["before"], "after": summary["after"]}))
    return 0


def _int_list(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def cmd_circles_sweep(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(args, cfg)
    ckpt_path, params = _checkpoint(args, cfg)
    man = Manifest("circles-sweep", cfg)
    man.input(ckpt_path)
    c = cfg.eval.circles
    pairs = _int_list(args.pairs) if args.pairs else c.pairs
    ks = _int_list(args.k) if args.k else c.ks
    seeds = args.seeds if args.seeds is not None else c.seeds
    rows = circles_sweep(params, pairs, ks, seeds, n=c.n, noise_std=c.noise_std, master_seed=cfg.seed,
                         batch_size=cfg.eval.batch_size)
    man.phase("sweep")
    write_csv(out / "sweep.csv", SWEEP_COLUMNS, rows)
    man.output(out / "sweep.csv")
    man.write(out)
    print(out / "sweep.csv")
    return 0


def read_records(path) -> EvalReport:
    report = EvalReport()
    with open(path, newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            report.records.append({"dataset": r["dataset"], "fold": int(r["fold"]), "method": r["method"],
                                   "metric": r["metric"], "value": float(r["value"])})
    return report


def cmd_report(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(args, cfg)
    man = Manifest("report", cfg)
    report = read_records(args.records)
    man.input(args.records)
    sizes = {}
    if args.aggregates:
        sizes = json.loads(Path(args.aggregates).read_text())["dataset_sizes"]
    result = {"aggregates": report.aggregates(cfg.eval.bootstrap_resamples, seed=cfg.seed)}
    table = ScoreTable.from_report(report, sizes)
    reference = args.reference or table.methods[0]
    if reference not in table.methods:
        raise ConfigError(f"reference method {reference!r} not in records")
    if len(table.datasets) >= args.bins:
        result["complexity_bins"] = complexity_bins(table, args.bins, reference)
    if sizes:
        result["size_bins"] = size_bins(table, _int_list(args.size_edges), reference)
    write_json(out / "report.json", result)
    man.output(out / "report.json")
    man.write(out)
    print(out / "report.json")
    return 0


def cmd_generate(args) -> int:
    if args.kind == "circles":
        ds = gen_circles(args.n, args.pairs, args.noise, args.seed)
    else:
        ds = gen_prior_task(PriorConfig(), args.seed, size=args.n)
    cols = [f"x{j}" for j in range(ds.features.shape[1])] + ["label"]
    rows = [dict(zip(cols, [*map(float, x), int(y)])) for x, y in zip(ds.features, ds.labels)]
    write_csv(Path(args.out), cols, rows)
    print(args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="localicl", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, checkpoint=True):
        sp.add_argument("--config", help="experiment config JSON (defaults used when omitted)")
        sp.add_argument("--out", help="output directory (overrides io.out_dir)")
        if checkpoint:
            sp.add_argument("--checkpoint", help="LCPF checkpoint (overrides io.checkpoint)")

    def data_args(sp):
        sp.add_argument("--dataset", action="append", help="dataset CSV (repeatable)")
        sp.add_argument("--label-col")
        sp.add_argument("--cat-cols", help="comma-separated categorical columns")
        sp.add_argument("--generator", action="append", help="e.g. circles:pairs=3,n=1000,seed=0 or prior:seed=1,n=4000")

    sp = sub.add_parser("priorfit", help="prior-fit a model from scratch")
    common(sp, checkpoint=False)
    sp.add_argument("--max-steps", type=int)
    sp.set_defaults(func=cmd_priorfit)

    sp = sub.add_parser("evaluate", help="evaluate methods over seeded splits")
    common(sp)
    data_args(sp)
    sp.add_argument("--methods", help=f"comma-separated subset of {','.join(METHODS)}")
    sp.add_argument("--folds", type=int)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("finetune", help="fine-tune on one dataset")
    common(sp)
    data_args(sp)
    sp.add_argument("--mode", choices=("finetune_local", "finetune_random"), default="finetune_local")
    sp.add_argument("--max-steps", type=int)
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser("circles-sweep", help="concentric-circles complexity sweep")
    common(sp)
    sp.add_argument("--pairs", help="comma-separated ring-pair counts")
    sp.add_argument("--k", help="comma-separated neighbour counts")
    sp.add_argument("--seeds", type=int)
    sp.set_defaults(func=cmd_circles_sweep)

    sp = sub.add_parser("report", help="aggregate statistics and binned analyses from a records CSV")
    common(sp, checkpoint=False)
    sp.add_argument("--records", required=True)
    sp.add_argument("--aggregates", help="aggregates.json from evaluate (supplies dataset sizes)")
    sp.add_argument("--reference", help="reference method for relative AUC")
    sp.add_argument("--bins", type=int, default=5)
    sp.add_argument("--size-edges", default="2000")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("generate", help="write a synthetic dataset as CSV")
    sp.add_argument("kind", choices=("circles", "prior"))
    sp.add_argument("--out", required=True)
    sp.add_argument("--n", type=int, default=1000)
    sp.add_argument("--pairs", type=int, default=3)
    sp.add_argument("--noise", type=float, default=0.01)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_generate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ContractError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
