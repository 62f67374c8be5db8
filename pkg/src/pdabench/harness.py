"""Grid search, hyper-parameter selection, multi-seed evaluation and report tables."""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import methods, selection
from .config import ConfigError
from .datagen import DomainData
from .records import RunRecord, append_record, hp_key, read_records
from .selection import ALL_SCORERS, ScorerKind

log = logging.getLogger(__name__)

DEFAULT_SEEDS = (2020, 2021, 2022)
TUNE_SEED = 2020
SOURCE_ONLY_FRACTION = 0.2

DEFAULT_GRIDS = {
    "source_only": {},
    "pada": {"lam": [0.1, 0.5, 1.0, 5.0, 10.0]},
    "safn": {"lam": [0.005, 0.01, 0.05, 0.1, 0.5], "delta_r": [0.01, 0.1, 1.0]},
    "ba3us": {"lambda_wce": [0.1, 0.5, 1.0, 5.0, 10.0],
              "lambda_ent": [0.01, 0.05, 0.1, 0.5, 1.0]},
    "ar": {"rho0": [2.5, 5.0, 7.5, 10.0], "a_up": [5.0, 10.0],
           "lambda_ent": [0.01, 0.1, 1.0]},
    "jumbot": {"tau": [0.001, 0.01, 0.1], "eta1": [1e-5, 1e-4, 1e-3, 0.01, 0.1],
               "eta2": [0.1, 0.5, 1.0], "eta3": [5.0, 10.0, 20.0]},
    "mpot": {"eps": [0.5, 1.0, 1.5], "eta1": [1e-4, 1e-3, 0.01, 0.1, 1.0],
             "eta2": [0.1, 1.0, 5.0, 10.0], "m": [0.1, 0.2, 0.3, 0.4]},
}

METHOD_ORDER = ("source_only", "pada", "safn", "ba3us", "ar", "jumbot", "mpot")
COLUMN_ORDER = ("S_ACC", "ENT", "DEV", "SND", "ONE_SHOT", "RND_50", "RND_100", "ORACLE")
DISPLAY = {"source_only": "S. Only", "pada": "PADA", "safn": "SAFN", "ba3us": "BA3US",
           "ar": "AR", "jumbot": "JUMBOT", "mpot": "MPOT",
           "S_ACC": "S-ACC", "ENT": "ENT", "DEV": "DEV", "SND": "SND",
           "ONE_SHOT": "1-SHOT", "RND_50": "50-RND", "RND_100": "100-RND", "ORACLE": "ORACLE"}


# ------------------------------------------------------------------ grids


@dataclass
class GridSpec:
    """Per-hyper-parameter value lists for one method; fields left out keep their defaults."""

    method: str
    values: dict = field(default_factory=dict)
    task: str = "synthetic"
    scorers: tuple = tuple(k.value for k in ALL_SCORERS)
    fixed: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in methods.METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {sorted(methods.METHODS)}")
        allowed = methods.METHODS[self.method].grid_fields
        for name, vals in self.values.items():
            if name not in allowed:
                raise ConfigError(f"{self.method} has no grid hyper-parameter {name!r}")
            if len(vals) == 0:
                raise ConfigError(f"{self.method}.{name}: empty value list")
        self.scorers = tuple(ScorerKind(s).value for s in self.scorers)

    @classmethod
    def default(cls, method, **kw):
        if method not in DEFAULT_GRIDS:
            raise ConfigError(f"unknown method {method!r}; choose from {sorted(DEFAULT_GRIDS)}")
        return cls(method, {k: list(v) for k, v in DEFAULT_GRIDS[method].items()}, **kw)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {"method", "values", "task", "scorers", "fixed"}
        if unknown:
            raise ConfigError(f"unknown grid keys {sorted(unknown)}")
        if "method" not in d:
            raise ConfigError("grid file needs a 'method' entry")
        kw = {k: d[k] for k in ("task", "fixed") if k in d}
        if "scorers" in d:
            kw["scorers"] = tuple(d["scorers"])
        values = d.get("values")
        if values is None:
            return cls.default(d["method"], **kw)
        return cls(d["method"], values, **kw)

    def size(self):
        return int(np.prod([len(v) for v in self.values.values()])) if self.values else 1

    def points(self):
        """Method configs in cartesian order; the last listed hyper-parameter varies fastest."""
        names = [n for n in methods.METHODS[self.method].grid_fields if n in self.values]
        out = []
        for combo in itertools.product(*(self.values[n] for n in names)):
            out.append(methods.make_method(self.method, **self.fixed, **dict(zip(names, combo))))
        return out


def default_grid_counts():
    return {m: GridSpec.default(m).size() for m in METHOD_ORDER}


def default_config(method):
    return methods.make_method(method)


# ------------------------------------------------------------------ store


class RunStore:
    """Append-only JSON-lines store of run records, keyed by (hp key, seed, task)."""

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self._records = {}
        if self.path is not None:
            for rec in read_records(self.path):
                self._records[self.key(rec.method, rec.hp, rec.seed, rec.task)] = rec

    @staticmethod
    def key(method, hp, seed, task):
        return (hp_key(method, hp), int(seed), task)

    def get(self, method, hp, seed, task):
        return self._records.get(self.key(method, hp, seed, task))

    def put(self, rec):
        if getattr(rec, "bundle", None) is not None:
            rec.bundle = None
        self._records[self.key(rec.method, rec.hp, rec.seed, rec.task)] = rec
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            append_record(self.path, rec)

    def records(self):
        return list(self._records.values())


def _data_for(data, seed):
    if isinstance(data, DomainData):
        return data
    if callable(data):
        return data(seed)
    return data[seed]


def run_config(method, train_cfg):
    """The training configuration a method actually uses (the baseline trains shorter)."""
    if method.name != "source_only":
        return train_cfg
    ev = train_cfg.eval_interval
    iters = max(ev, int(round(train_cfg.total_iters * SOURCE_ONLY_FRACTION / ev)) * ev)
    return replace(train_cfg, total_iters=min(iters, train_cfg.total_iters))


def _train_point(args):
    method, cfg, data, scorers = args
    try:
        rec = methods.train_run(method, cfg, data, scorers)
    except Exception as exc:  # a crashing configuration must not stop the grid
        log.warning("run %s seed %d crashed: %s", hp_key(method.name, method.hp()), cfg.seed, exc)
        rec = RunRecord(method.name, method.hp(), cfg.seed, cfg.task, [], "failed",
                        f"{type(exc).__name__}: {exc}")
    rec.bundle = None
    return rec


def run_many(configs, seeds, data, train_cfg, scorers=ALL_SCORERS, store=None, workers=1):
    """Train every (config, seed) pair not already in ``store``; records come back in input order.

    Each run draws from its own RNG keyed on (seed, hp key), so the worker
    count and completion order never change a result.
    """
    store = store if store is not None else RunStore()
    jobs, slots = [], []
    for m in configs:
        for s in seeds:
            cfg = replace(run_config(m, train_cfg), seed=int(s))
            slots.append((m, cfg))
            if store.get(m.name, m.hp(), s, cfg.task) is None:
                jobs.append((m, cfg, _data_for(data, s), tuple(scorers)))
    if jobs:
        log.info("training %d runs (%d already stored)", len(jobs), len(slots) - len(jobs))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for rec in pool.map(_train_point, jobs):
                store.put(rec)
    else:
        for job in jobs:
            store.put(_train_point(job))
    return [store.get(m.name, m.hp(), cfg.seed, cfg.task) for m, cfg in slots]


def run_grid(grid, data, train_cfg, store=None, workers=1, seed=TUNE_SEED):
    """One run per grid point on the tuning seed; completed points in ``store`` are skipped."""
    cfg = replace(train_cfg, task=grid.task)
    return run_many(grid.points(), [seed], data, cfg, grid.scorers, store, workers)


# ------------------------------------------------------------- aggregation


@dataclass
class Cell:
    """Target accuracy of the checkpoint each seed's scorer picked, aggregated over seeds."""

    values: tuple
    seeds: tuple
    failed: int = 0
    hp: dict = field(default_factory=dict)

    @property
    def n(self):
        return len(self.seeds)

    @property
    def ok(self):
        return self.failed == 0 and len(self.values) == self.n and self.n > 0

    @property
    def mean(self):
        return float(np.mean(self.values)) if self.ok else None

    @property
    def std(self):
        # population convention; identical seeds give exactly zero
        if not self.ok:
            return None
        v = np.asarray(self.values, dtype=float)
        return 0.0 if np.all(v == v[0]) else float(np.std(v))


def selected_accuracy(rec, kind):
    """Target accuracy at the checkpoint ``kind`` selects on this run."""
    it = selection.select_checkpoint(rec, kind)
    return selection.checkpoint_at(rec, it).target_acc


def evaluate_selected(method, data, seeds=DEFAULT_SEEDS, scorers=ALL_SCORERS, train_cfg=None,
                      store=None, workers=1):
    """Train ``method`` once per seed and aggregate each scorer's selected-checkpoint accuracy.

    Returns ``{scorer: Cell}`` and the per-seed records. A failed seed marks
    every cell of the method as failed.
    """
    train_cfg = train_cfg or methods.TrainConfig()
    recs = run_many([method], seeds, data, train_cfg, scorers, store, workers)
    return cells_from_runs(recs, seeds, scorers, method.hp()), recs


def cells_from_runs(recs, seeds, scorers, hp):
    failed = sum(1 for r in recs if r is None or not r.ok)
    out = {}
    for kind in scorers:
        kind = ScorerKind(kind)
        vals = () if failed else tuple(selected_accuracy(r, kind) for r in recs)
        out[kind.value] = Cell(vals, tuple(int(s) for s in seeds), failed, dict(hp))
    return out


@dataclass
class ReportTable:
    """Rows keyed by (method, scorer); each cell aggregates the same seed list."""

    seeds: tuple
    task: str = "synthetic"
    cells: dict = field(default_factory=dict)

    def methods(self):
        present = {m for m, _ in self.cells}
        return [m for m in METHOD_ORDER if m in present] + sorted(present - set(METHOD_ORDER))

    def columns(self):
        present = {s for _, s in self.cells}
        return [c for c in COLUMN_ORDER if c in present]

    def get(self, method, scorer):
        return self.cells.get((method, scorer))

    def gap_summary(self):
        """Worst and best no-target-label column per method, each against ORACLE."""
        out = {}
        unsup = [c for c in self.columns() if not ScorerKind(c).uses_target_labels]
        for m in self.methods():
            vals = [(self.cells[(m, c)].mean, c) for c in unsup
                    if (m, c) in self.cells and self.cells[(m, c)].ok]
            oracle = self.get(m, "ORACLE")
            if not vals:
                continue
            worst, best = min(vals), max(vals)
            o = oracle.mean if oracle is not None and oracle.ok else None
            out[m] = {"worst": worst[0], "worst_scorer": worst[1], "best": best[0],
                      "best_scorer": best[1], "oracle": o,
                      "worst_gap": None if o is None else worst[0] - o,
                      "best_gap": None if o is None else best[0] - o}
        return out


# --------------------------------------------------------------- protocol


@dataclass
class ProtocolResult:
    table: ReportTable
    selections: dict
    floor: float
    tune_records: dict
    eval_records: list


def select_all(tune_records, scorers, floor):
    """Chosen hyper-parameters per (method, scorer) from end-of-training tuning scores."""
    chosen = {}
    for m, recs in tune_records.items():
        for kind in scorers:
            kind = ScorerKind(kind)
            try:
                best = selection.select_hyperparams(recs, kind, floor)
            except ConfigError as exc:
                log.warning("%s/%s: %s", m, kind.value, exc)
                continue
            chosen[(m, kind.value)] = dict(best.hp)
    return chosen


def run_protocol(method_names, data, train_cfg, grids=None, seeds=DEFAULT_SEEDS,
                 scorers=ALL_SCORERS, store=None, workers=1, fixed=None):
    """Tune on the first seed, pick hyper-parameters per scorer, evaluate over ``seeds``.

    ``grids`` maps a method to its ``GridSpec`` (default: the built-in grid);
    ``fixed`` maps a method to field overrides applied at every grid point.
    The source-accuracy floor comes from the baseline's tuning run.
    """
    store = store if store is not None else RunStore()
    scorers = tuple(ScorerKind(s).value for s in scorers)
    grids = dict(grids or {})
    fixed = fixed or {}
    for m in method_names:
        if m not in grids:
            grids[m] = GridSpec.default(m, task=train_cfg.task, scorers=scorers,
                                      fixed=fixed.get(m, {}))
    base = methods.SourceOnly()
    (so_rec,) = run_many([base], [TUNE_SEED], data, train_cfg, scorers, store, workers)
    if not so_rec.ok:
        raise ConfigError(f"baseline tuning run failed: {so_rec.error}")
    floor = selection.source_accuracy_floor(so_rec.final.src_val_acc)
    log.info("source-accuracy floor %.4f", floor)

    tune = {m: run_grid(grids[m], data, train_cfg, store, workers) for m in method_names}
    chosen = select_all(tune, scorers, floor)

    table = ReportTable(tuple(int(s) for s in seeds), train_cfg.task)
    eval_recs = []
    for m in method_names:
        by_hp = {}
        for s in scorers:
            if (m, s) in chosen:
                by_hp.setdefault(hp_key(m, chosen[(m, s)]), []).append(s)
        for key in sorted(by_hp):
            hp = chosen[(m, by_hp[key][0])]
            cfg = methods.make_method(m, **grids[m].fixed, **hp)
            # every run scores all checkpoints with every scorer, so stored runs are
            # interchangeable whichever scorer picked them
            recs = run_many([cfg], seeds, data, train_cfg, scorers, store, workers)
            cells = cells_from_runs(recs, seeds, by_hp[key], cfg.hp())
            eval_recs.extend(recs)
            for s in by_hp[key]:
                table.cells[(m, s)] = cells[s]
    return ProtocolResult(table, chosen, floor, tune, eval_recs)


def table_from_records(records, method_names=None, seeds=DEFAULT_SEEDS, scorers=ALL_SCORERS,
                       task=None):
    """Rebuild the report table from a record store alone (no training).

    Tuning records are the tune-seed runs; a scorer's cell is filled only when
    every evaluation seed of its chosen configuration is stored.
    """
    scorers = tuple(ScorerKind(s).value for s in scorers)
    store = RunStore()
    for r in records:
        if task is None or r.task == task:
            store.put(r)
    recs = store.records()
    if not recs:
        raise ConfigError("no records to report")
    task = task or recs[0].task
    names = method_names or [m for m in METHOD_ORDER if any(r.method == m for r in recs)]
    so = store.get("source_only", {}, TUNE_SEED, task)
    floor = selection.source_accuracy_floor(so.final.src_val_acc) if so and so.ok else None
    if floor is None:
        log.warning("no baseline tuning run stored; the source-accuracy floor is not applied")
    tune = {m: [r for r in recs if r.method == m and r.seed == TUNE_SEED] for m in names}
    chosen = select_all({m: v for m, v in tune.items() if v}, scorers, floor)
    table = ReportTable(tuple(int(s) for s in seeds), task)
    for (m, s), hp in sorted(chosen.items()):
        runs = [store.get(m, hp, seed, task) for seed in seeds]
        if any(r is None for r in runs):
            log.warning("%s/%s: missing evaluation seeds; cell omitted", m, s)
            continue
        table.cells[(m, s)] = cells_from_runs(runs, seeds, [s], hp)[s]
    return table, chosen


# ----------------------------------------------------------------- report

CSV_FIELDS = ("task", "method", "scorer", "mean", "std", "n_seeds", "seeds", "failed",
              "values", "hp")


def table_to_csv(table):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for m in table.methods():
        for s in table.columns():
            c = table.get(m, s)
            if c is None:
                continue
            w.writerow([table.task, m, s, "" if c.mean is None else repr(c.mean),
                        "" if c.std is None else repr(c.std), c.n,
                        " ".join(str(x) for x in c.seeds), c.failed,
                        " ".join(repr(float(v)) for v in c.values),
                        json.dumps(c.hp, sort_keys=True)])
    return buf.getvalue()


def load_report_csv(path):
    """Inverse of ``table_to_csv``."""
    rows = list(csv.DictReader(io.StringIO(Path(path).read_text())))
    if not rows:
        raise ConfigError(f"{path}: no report rows")
    seeds = tuple(int(x) for x in rows[0]["seeds"].split())
    table = ReportTable(seeds, rows[0]["task"])
    for r in rows:
        vals = tuple(float(x) for x in r["values"].split())
        table.cells[(r["method"], r["scorer"])] = Cell(
            vals, tuple(int(x) for x in r["seeds"].split()), int(r["failed"]), json.loads(r["hp"]))
    return table


def _pct(x):
    return f"{100 * x:.2f}"


def _fmt_cell(c):
    if c is None:
        return ""
    if not c.ok:
        return f"failed ({c.failed}/{c.n} seeds)"
    return f"{_pct(c.mean)} ± {_pct(c.std)}"


def _fmt_gap(x):
    return "" if x is None else f"{100 * x:+.2f}"


def table_to_markdown(table):
    cols = table.columns()
    lines = [f"## Task accuracy ({table.task}), mean ± std over seeds", "",
             "| Method | " + " | ".join(DISPLAY.get(c, c) for c in cols) + " |",
             "|---|" + "---|" * len(cols)]
    for m in table.methods():
        lines.append(f"| {DISPLAY.get(m, m)} | "
                     + " | ".join(_fmt_cell(table.get(m, c)) for c in cols) + " |")
    gaps = table.gap_summary()
    if gaps:
        lines += ["", "## Selection without target labels vs ORACLE", "",
                  "| Method | Worst | Δ ORACLE | Best | Δ ORACLE | ORACLE |",
                  "|---|---|---|---|---|---|"]
        for m, g in gaps.items():
            lines.append(
                f"| {DISPLAY.get(m, m)} | {_pct(g['worst'])} ({DISPLAY[g['worst_scorer']]}) | "
                f"{_fmt_gap(g['worst_gap'])} | {_pct(g['best'])} ({DISPLAY[g['best_scorer']]}) | "
                f"{_fmt_gap(g['best_gap'])} | {'' if g['oracle'] is None else _pct(g['oracle'])} |")
    seeds = ", ".join(str(s) for s in table.seeds)
    lines += ["", f"Each cell aggregates {len(table.seeds)} seeds ({seeds}); "
                  "± is the population standard deviation. Accuracies in percent."]
    return "\n".join(lines) + "\n"


def emit_report(table, out_dir, stem="report", figures=True):
    """Write ``<stem>.csv``, ``<stem>.md`` and, optionally, figures next to them."""
    if not table.cells:
        raise ConfigError("report table is empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out / f"{stem}.csv", "md": out / f"{stem}.md"}
    paths["csv"].write_text(table_to_csv(table))
    paths["md"].write_text(table_to_markdown(table))
    if figures:
        from . import plotting
        paths.update(plotting.render_figures(table, out, stem))
    return paths
