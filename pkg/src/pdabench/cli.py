"""Command line: gen-data, train, grid-search, select, report."""

from __future__ import annotations

import argparse
import functools
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import datagen, harness, methods, selection
from .config import ConfigError, FormatError
from .records import read_records

log = logging.getLogger("pdabench")


def _seeds(text):
    try:
        return tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}")


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None


def train_config(args):
    """TrainConfig from an optional JSON file, then command-line overrides."""
    kw = _read_json(args.train_config) if getattr(args, "train_config", None) else {}
    known = {f.name for f in fields(methods.TrainConfig)}
    unknown = set(kw) - known
    if unknown:
        raise ConfigError(f"unknown training keys {sorted(unknown)}")
    if "hidden" in kw:
        kw["hidden"] = tuple(kw["hidden"])
    for name, attr in (("total_iters", "iters"), ("eval_interval", "eval_interval"),
                       ("batch_size", "batch_size"), ("task", "task")):
        v = getattr(args, attr, None)
        if v is not None:
            kw[name] = v
    return methods.TrainConfig(**kw)


def _dataset(args):
    path = args.embeddings or args.dataset
    if path is None:
        raise ConfigError("pass --dataset DIR or --embeddings DIR")
    return functools.lru_cache(maxsize=None)(functools.partial(datagen.read_dataset, path))


def _add_train_flags(p):
    src = p.add_mutually_exclusive_group()
    src.add_argument("--dataset", help="dataset directory written by gen-data")
    src.add_argument("--embeddings", help="directory with ingested source.pdae / target.pdae")
    p.add_argument("--train-config", help="JSON file of training settings")
    p.add_argument("--iters", type=int, help="training iterations")
    p.add_argument("--eval-interval", type=int, help="iterations between checkpoints")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--task", help="task id recorded with each run")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out-dir", default="runs")


# ---------------------------------------------------------------- commands


def cmd_gen_data(args):
    if args.embeddings:
        source, target = datagen.read_domains(args.embeddings)
        meta = {"ingested_from": str(args.embeddings)}
    else:
        spec = datagen.PartialShiftSpec(**(_read_json(args.spec) if args.spec else {}))
        source, target = datagen.gen_partial_blobs(spec, args.seed)
        meta = {"spec": datagen.spec_to_dict(spec), "seed": args.seed}
    meta["split_seeds"] = list(args.seeds)
    out = datagen.write_dataset(args.out_dir, source, target, args.seeds, meta)
    print(f"wrote {out} ({len(source)} source, {len(target)} target samples, d={source.dim})")


def cmd_train(args):
    cfg = train_config(args)
    hp = json.loads(args.hp) if args.hp else {}
    method = methods.make_method(args.method, **hp)
    store = harness.RunStore(Path(args.out_dir) / "records.jsonl")
    (rec,) = harness.run_many([method], [args.seed], _dataset(args), cfg, store=store)
    fin = rec.final
    print(f"{rec.hp_key()} seed={rec.seed} status={rec.status}"
          + (f" target_acc={fin.target_acc:.4f} src_val_acc={fin.src_val_acc:.4f}" if fin else ""))


def cmd_grid_search(args):
    cfg = train_config(args)
    grid = harness.GridSpec.from_dict(_read_json(args.grid)) if args.grid else \
        harness.GridSpec.default(args.method, task=cfg.task)
    store = harness.RunStore(Path(args.out_dir) / "records.jsonl")
    recs = harness.run_grid(grid, _dataset(args), cfg, store, args.workers, args.seed)
    failed = sum(not r.ok for r in recs)
    print(f"{grid.method}: {len(recs)} grid points, {failed} failed, store {store.path}")


def cmd_select(args):
    recs = [r for r in read_records(args.records) if r.seed == args.seed]
    if args.method:
        recs = [r for r in recs if r.method == args.method]
    so = [r for r in recs if r.method == "source_only" and r.ok]
    floor = selection.source_accuracy_floor(so[0].final.src_val_acc) if so else None
    out = {}
    for m in sorted({r.method for r in recs}):
        best = selection.select_hyperparams([r for r in recs if r.method == m], args.scorer,
                                            floor)
        it = selection.select_checkpoint(best, args.scorer)
        out[m] = {"hp": best.hp, "checkpoint": it,
                  "target_acc": selection.checkpoint_at(best, it).target_acc}
    print(json.dumps({"scorer": args.scorer, "floor": floor, "selected": out}, indent=2,
                     sort_keys=True))


def cmd_report(args):
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = Path(args.records) if args.records else out / "records.jsonl"
    names = args.methods.split(",") if args.methods else list(harness.METHOD_ORDER)
    if args.dataset or args.embeddings:
        cfg = train_config(args)
        grids = {}
        if args.grids:
            for m, g in _read_json(args.grids).items():
                grids[m] = harness.GridSpec.from_dict({"method": m, "task": cfg.task, **g})
        res = harness.run_protocol(names, _dataset(args), cfg, grids, args.seeds,
                                   store=harness.RunStore(records), workers=args.workers)
        table = res.table
        (out / "selection.json").write_text(json.dumps(
            {"floor": res.floor,
             "chosen": {f"{m}/{s}": hp for (m, s), hp in sorted(res.selections.items())}},
            indent=2, sort_keys=True) + "\n")
    else:
        table, _ = harness.table_from_records(read_records(records), names, args.seeds)
    paths = harness.emit_report(table, out, args.stem, figures=not args.no_figures)
    sys.stdout.write(harness.table_to_markdown(table))
    for kind, p in sorted(paths.items()):
        print(f"{kind}: {p}")


def build_parser():
    p = argparse.ArgumentParser(prog="pdabench",
                                description="Partial domain adaptation model-selection benchmark")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic (or ingested) dataset directory")
    g.add_argument("--spec", help="JSON file of synthetic generator settings")
    g.add_argument("--embeddings", help="directory with source.pdae / target.pdae to ingest")
    g.add_argument("--seed", type=int, default=0, help="generator seed")
    g.add_argument("--seeds", type=_seeds, default=harness.DEFAULT_SEEDS,
                   help="run seeds whose split and labeled subsets are persisted")
    g.add_argument("--out-dir", default="data")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one configuration on one seed")
    t.add_argument("method", choices=sorted(methods.METHODS))
    t.add_argument("--hp", help='hyper-parameters as JSON, e.g. \'{"lam": 0.5}\'')
    t.add_argument("--seed", type=int, default=harness.TUNE_SEED)
    _add_train_flags(t)
    t.set_defaults(func=cmd_train)

    gs = sub.add_parser("grid-search", help="tune one method over its grid on a single seed")
    gs.add_argument("grid", nargs="?", help="GridSpec JSON file")
    gs.add_argument("--method", choices=sorted(methods.METHODS),
                    help="use the built-in grid of this method")
    gs.add_argument("--seed", type=int, default=harness.TUNE_SEED)
    _add_train_flags(gs)
    gs.set_defaults(func=cmd_grid_search)

    s = sub.add_parser("select", help="chosen hyper-parameters and checkpoint per method")
    s.add_argument("records")
    s.add_argument("--scorer", required=True, choices=[k.value for k in selection.ALL_SCORERS])
    s.add_argument("--method")
    s.add_argument("--seed", type=int, default=harness.TUNE_SEED)
    s.set_defaults(func=cmd_select)

    r = sub.add_parser("report", help="tables and figures; trains missing runs given a dataset")
    r.add_argument("--records", help="record store (default: OUT_DIR/records.jsonl)")
    r.add_argument("--methods", help="comma-separated method names")
    r.add_argument("--grids", help="JSON mapping method -> grid overrides")
    r.add_argument("--seeds", type=_seeds, default=harness.DEFAULT_SEEDS)
    r.add_argument("--stem", default="report")
    r.add_argument("--no-figures", action="store_true")
    _add_train_flags(r)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "grid-search" and not (args.grid or args.method):
        print("grid-search: pass a grid file or --method", file=sys.stderr)
        return 2
    try:
        args.func(args)
    except (ConfigError, FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
