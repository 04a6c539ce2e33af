"""Command-line driver: ``grmp <command> [options]``.

Commands
--------
gen-data       render the synthetic benchmark to a directory
meta-pretrain  bi-level prompt pre-training, writes a checkpoint and a loss log
zero-shot      SRCC/PLCC of a checkpoint (or of random prompts) with no tuning
finetune       few-shot fine-tuning over label splits, optionally sweeping lambda
angle-trace    one fine-tuning run exporting per-step gradient-angle telemetry

Every command accepts ``--config FILE``, ``--seed N`` and one
``--section.field VALUE`` flag per configuration field, and writes a run
manifest next to its output. Exit codes: 0 ok, 1 usage or config error,
2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import subprocess
import sys
from pathlib import Path

import numpy as np

from .config import SECTIONS, ConfigError, RunConfig, field_types, load_config
from .meta import LOG_COLUMNS, run_meta_pretraining
from .model import DualEncoder
from .params import ParameterStore, load_checkpoint, save_checkpoint
from .qgr import (SPLIT_COLUMNS, evaluate, finetune, draw_labels, run_few_shot,
                  write_telemetry)
from .synth import Dataset, build_benchmark, read_dataset, write_dataset

log = logging.getLogger("grmp")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
META_PREFIX, EVAL_PREFIX = "meta", "eval"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------- small helpers

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             capture_output=True, text=True, timeout=10,
                             cwd=Path(__file__).resolve().parent)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 and out.stdout.strip() else "unknown"


def dump_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_manifest(path, args, cfg: RunConfig, inputs=(), outputs=()) -> None:
    """Resolved config, seed, code version and input checksums of one run."""
    inputs = list(inputs) + ([args.config] if args.config else [])
    dump_json(path, {
        "command": args.command,
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "git": git_describe(),
        "inputs": {str(p): sha256_file(p) for p in sorted(map(str, inputs))},
        "outputs": sorted(_relative(p, Path(path).parent) for p in outputs),
    })


def _relative(p, base: Path) -> str:
    try:
        return str(Path(p).resolve().relative_to(base.resolve()))
    except ValueError:
        return str(p)


def sidecar(path, suffix: str) -> Path:
    path = Path(path)
    return path.with_name(path.name + suffix)


def dataset_files(data_dir, prefix: str) -> list[Path]:
    base = Path(data_dir) / prefix
    return [base.with_suffix(".grmpimg"), base.with_suffix(".json")]


def load_split(data_dir, prefix: str) -> Dataset:
    files = dataset_files(data_dir, prefix)
    missing = [str(p) for p in files if not p.exists()]
    if missing:
        raise FileNotFoundError(f"missing dataset files: {', '.join(missing)}")
    return read_dataset(Path(data_dir) / prefix)


def load_model(cfg: RunConfig, ckpt) -> DualEncoder:
    """Model from a checkpoint, validated against the configured architecture."""
    init = DualEncoder.initialize(cfg.model, prompt_seed=cfg.seed)
    arrays = load_checkpoint(ckpt)
    expected = {k: v.shape for k, v in init.params.items()}
    got = {k: v.shape for k, v in arrays.items()}
    if got != expected:
        diff = sorted(set(got) ^ set(expected)) or sorted(k for k in got if got[k] != expected[k])
        raise ValueError(f"{ckpt}: checkpoint does not match the model config (first differences: {diff[:5]})")
    return init.with_params(ParameterStore(arrays))


def semantic_reference(cfg: RunConfig) -> DualEncoder:
    """The frozen semantic model: the initialization snapshot for this seed."""
    return DualEncoder.initialize(cfg.model, prompt_seed=cfg.seed, role="semantic")


def eval_subset(ds: Dataset, cfg: RunConfig) -> Dataset:
    return ds if cfg.eval.split == "all" else ds.subset(ds.where(split=cfg.eval.split))


def parse_lambdas(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--lambda: expected comma-separated numbers, got {text!r}") from None
    if not vals or any(v < 0 for v in vals):
        raise UsageError("--lambda: need one or more values >= 0")
    return vals


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else str(v)


def write_csv(path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in columns])


# ---------------------------------------------------------------- commands

def cmd_gen_data(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta, ev = build_benchmark(cfg.data, cfg.seed)
    files = [*write_dataset(out / META_PREFIX, meta), *write_dataset(out / EVAL_PREFIX, ev)]
    write_manifest(out / "manifest.json", args, cfg, outputs=files)
    n_test = len(ev.where(split="test"))
    print(f"meta-train: {len(meta)} images, eval: {len(ev)} images "
          f"({len(ev) - n_test} train-pool, {n_test} test)")
    return EXIT_OK


def cmd_meta_pretrain(args, cfg: RunConfig) -> int:
    inputs = dataset_files(args.data, META_PREFIX)
    meta = load_split(args.data, META_PREFIX)
    model = DualEncoder.initialize(cfg.model, prompt_seed=cfg.seed)
    result = run_meta_pretraining(meta, cfg.meta, model, cfg.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, result.params)
    log_path = sidecar(out, ".log.csv")
    write_csv(log_path, LOG_COLUMNS, result.log)
    write_manifest(sidecar(out, ".manifest.json"), args, cfg, inputs, [out, log_path])
    means = result.epoch_means()
    if means:
        print(f"epochs: {len(means)}, query loss {means[0][1]:.4f} -> {means[-1][1]:.4f}")
    else:
        print("epochs: 0, checkpoint equals initialization")
    return EXIT_OK


def cmd_zero_shot(args, cfg: RunConfig) -> int:
    if args.random_init == bool(args.ckpt):
        raise UsageError("zero-shot: give exactly one of --ckpt or --random-init")
    inputs = dataset_files(args.data, EVAL_PREFIX)
    if args.random_init:
        model = DualEncoder.initialize(cfg.model, prompt_seed=cfg.seed)
    else:
        model = load_model(cfg, args.ckpt)
        inputs.append(Path(args.ckpt))
    test = eval_subset(load_split(args.data, EVAL_PREFIX), cfg)
    res = evaluate(model, test)
    res["init"] = "random" if args.random_init else "checkpoint"
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    dump_json(out, res)
    write_manifest(sidecar(out, ".manifest.json"), args, cfg, inputs, [out])
    print(f"srcc {res['srcc']:.4f}  plcc {res['plcc']:.4f}  n {res['n']}")
    return EXIT_OK


def cmd_finetune(args, cfg: RunConfig) -> int:
    lambdas = parse_lambdas(args.lam) if args.lam is not None else [cfg.finetune.lam]
    ev = load_split(args.data, EVAL_PREFIX)
    model = load_model(cfg, args.ckpt)
    inputs = [*dataset_files(args.data, EVAL_PREFIX), Path(args.ckpt)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs, medians, results = [], [], {}
    semantic = semantic_reference(cfg)
    for lam in lambdas:
        ft = dataclasses.replace(cfg.finetune, lam=lam)
        res = run_few_shot(ev, model, ft, cfg.seed, semantic=semantic)
        tag = f"lambda_{lam:g}"
        split_path = out / f"{tag}_splits.csv"
        write_csv(split_path, SPLIT_COLUMNS, res.splits)
        outputs.append(split_path)
        for s, trace in enumerate(res.telemetry):
            tpath = out / f"{tag}_telemetry_split{s}.csv"
            write_telemetry(tpath, trace)
            outputs.append(tpath)
        medians.append({"lambda": lam, **res.medians})
        results[tag] = {"lambda": lam, **res.to_json()}
        print(f"lambda {lam:g}: median srcc {res.medians['srcc']:.4f}  plcc {res.medians['plcc']:.4f}")
    write_csv(out / "medians.csv", ("lambda", "srcc", "plcc"), medians)
    dump_json(out / "medians.json", {"n_labels": cfg.finetune.few_shot_n,
                                     "splits": cfg.finetune.splits, "results": results})
    outputs += [out / "medians.csv", out / "medians.json"]
    write_manifest(out / "manifest.json", args, cfg, inputs, outputs)
    return EXIT_OK


def cmd_angle_trace(args, cfg: RunConfig) -> int:
    lam = parse_lambdas(args.lam)[0] if args.lam is not None else cfg.finetune.lam
    ft = dataclasses.replace(cfg.finetune, lam=lam)
    ev = load_split(args.data, EVAL_PREFIX)
    model = load_model(cfg, args.ckpt)
    pool = ev.subset(ev.where(split="train-pool"))
    idx, y = draw_labels(pool, ft.few_shot_n, [cfg.seed, 0])
    p_sem = semantic_reference(cfg).semantic_distribution(pool.images[idx])
    run = finetune(model, pool.images[idx], y, p_sem, ft, [cfg.seed, 0])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_telemetry(out, run.telemetry)
    write_manifest(sidecar(out, ".manifest.json"), args, cfg,
                   [*dataset_files(args.data, EVAL_PREFIX), Path(args.ckpt)], [out])
    angles = np.array([t.angle_deg for t in run.telemetry])
    angles = angles[np.isfinite(angles)]
    summary = f"mean angle {angles.mean():.2f} deg" if angles.size else "no defined angles"
    print(f"{len(run.telemetry)} steps, {summary}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", help="run seed (overrides the config file and GRMP_SEED)")
    group = p.add_argument_group("configuration fields")
    for section, cls in SECTIONS.items():
        for name in field_types(cls):
            group.add_argument(f"--{section}.{name}", dest=f"cfg:{section}.{name}",
                               metavar="VALUE", help=argparse.SUPPRESS)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="grmp", description="Meta-prompt BIQA pipeline on a synthetic benchmark.",
                     epilog="Any configuration field can be set with --<section>.<field> VALUE, "
                            "e.g. --meta.epochs 10 or --data.eval_types 6,7.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="render the synthetic benchmark")
    p.add_argument("--out", required=True, help="output directory")
    _add_config_flags(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("meta-pretrain", help="bi-level meta-prompt pre-training")
    p.add_argument("--data", required=True, help="directory written by gen-data")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--epochs", type=int, help="shorthand for --meta.epochs")
    _add_config_flags(p)
    p.set_defaults(func=cmd_meta_pretrain)

    p = sub.add_parser("zero-shot", help="evaluate prompts without fine-tuning")
    p.add_argument("--ckpt", help="checkpoint from meta-pretrain")
    p.add_argument("--random-init", action="store_true", help="use freshly initialized prompts")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="results JSON path")
    _add_config_flags(p)
    p.set_defaults(func=cmd_zero_shot)

    p = sub.add_parser("finetune", help="few-shot fine-tuning over label splits")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--labels", type=int, help="labelled images per split (finetune.few_shot_n)")
    p.add_argument("--splits", type=int, help="number of random label splits")
    p.add_argument("--lambda", dest="lam", help="regularization strength; comma list runs a sweep")
    p.add_argument("--epochs", type=int, help="shorthand for --finetune.epochs")
    p.add_argument("--out", required=True, help="output directory")
    _add_config_flags(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("angle-trace", help="export per-step gradient angles of one fine-tuning run")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--lambda", dest="lam", help="regularization strength")
    p.add_argument("--labels", type=int, help="labelled images (finetune.few_shot_n)")
    p.add_argument("--epochs", type=int, help="shorthand for --finetune.epochs")
    p.add_argument("--out", required=True, help="telemetry CSV path")
    _add_config_flags(p)
    p.set_defaults(func=cmd_angle_trace)
    return parser


_SHORTHANDS = {
    "meta-pretrain": {"epochs": "meta.epochs"},
    "finetune": {"epochs": "finetune.epochs", "labels": "finetune.few_shot_n",
                 "splits": "finetune.splits"},
    "angle-trace": {"epochs": "finetune.epochs", "labels": "finetune.few_shot_n"},
}


def resolve_config(args) -> RunConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg:") and v is not None}
    for flag, dotted in _SHORTHANDS.get(args.command, {}).items():
        if getattr(args, flag, None) is not None:
            overrides[dotted] = getattr(args, flag)
    if args.seed is not None:
        overrides["seed"] = args.seed
    return load_config(args.config, overrides)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError(parser.format_usage().strip())
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(name)s: %(message)s", stream=sys.stderr)
        cfg = resolve_config(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - report every runtime failure as exit 2
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
