"""Acceptance suite: one test per criterion, each printing a single pass/fail line."""

import csv
import json
import math
import time

import numpy as np
import pytest
from conftest import MICRO_DIMS, micro_bundle
from test_methods import analytic, ar_cfg, numeric, params_of, rel_err, reversed_oracle
from test_selection import dense_snd

from pdabench import cli, datagen, harness, methods, nets, ot, selection
from pdabench import diffcore as dc
from pdabench.methods import onehot
from pdabench.records import read_records
from pdabench.selection import ALL_SCORERS, ScorerKind


def report(capsys, number, title, checks):
    """Print one line for the criterion, then fail the test if any check failed."""
    bad = [name for name, ok in checks.items() if not ok]
    line = f"criterion {number} [{title}]: " + ("PASS" if not bad else "FAIL " + ", ".join(bad))
    with capsys.disabled():
        print("\n" + line)
    assert not bad, line


# ------------------------------------------------------------ criterion 1


def random_instance(rng):
    n, m = int(rng.integers(1, 6)), int(rng.integers(1, 6))
    a, b = rng.uniform(0.2, 1, n), rng.uniform(0.2, 1, m)
    return rng.uniform(0, 1, (n, m)), a / a.sum(), b / b.sum()


def test_criterion_1_ot_solvers(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2020)
    uot_err = mass_err = marg_excess = bal_err = 0.0
    for _ in range(50):
        C, a, b = random_instance(rng)
        tau = float(rng.choice([0.05, 0.1, 0.5, 1.0]))
        eta = float(rng.choice([0.1, 1.0, 10.0]))
        u = ot.sinkhorn_uot(C, a, b, tau, eta)
        o = ot.uot_convex_oracle(C, a, b, tau, eta)
        uot_err = max(uot_err, np.abs(u.pi - o.pi).max())
        m = float(rng.uniform(0.1, 0.9))
        p = ot.partial_ot_entropic(C, a, b, m, tau)
        mass_err = max(mass_err, abs(p.pi.sum() - m))
        marg_excess = max(marg_excess, (p.pi.sum(1) - a).max(), (p.pi.sum(0) - b).max())
        big = ot.sinkhorn_uot(C, a, b, tau, 1e6)
        bal_err = max(bal_err, np.abs(big.pi - ot.sinkhorn(C, a, b, tau).pi).max())
    elapsed = time.perf_counter() - t0
    report(capsys, 1, "OT solvers", {
        f"uot vs oracle {uot_err:.2e} <= 1e-4": uot_err <= 1e-4,
        f"partial mass {mass_err:.2e} <= 1e-6": mass_err <= 1e-6,
        f"partial marginals {marg_excess:.2e} <= 1e-9": marg_excess <= 1e-9,
        f"eta=1e6 vs balanced {bal_err:.2e} <= 1e-3": bal_err <= 1e-3,
        f"runtime {elapsed:.1f}s < 60s": elapsed < 60,
    })


# ------------------------------------------------------------ criterion 2


def method_gradient_errors():
    """Relative error of the tape gradient of every method loss against finite differences."""
    rng = np.random.default_rng(7)
    xs, ys = rng.standard_normal((4, 2)), np.array([0, 1, 2, 1])
    xt = rng.standard_normal((4, 2)) + 0.5
    k = MICRO_DIMS.k_source
    errs = {}

    b = micro_bundle()
    errs["source_only"] = dc.gradcheck(lambda: methods.loss_source_only(b, xs, ys), params_of(b))

    b = micro_bundle(disc=True)
    gamma = np.array([1.0, 0.3, 0.6])
    full = lambda: methods.loss_pada(b, xs, ys, xt, gamma, 0.8, 0.7)  # noqa: E731
    base = lambda: methods.loss_pada(b, xs, ys, xt, gamma, 0.0, 0.7)  # noqa: E731
    errs["pada"] = rel_err(analytic(b, full), reversed_oracle(b, base, full, 0.7))

    b = micro_bundle()
    with dc.no_grad():
        frozen_norms = np.linalg.norm(np.vstack([nets.forward_features(b, xs).data,
                                                 nets.forward_features(b, xt).data]), axis=1) + 0.5

    def safn_oracle():
        zs, zt = nets.forward_features(b, xs), nets.forward_features(b, xt)
        ce = dc.softmax_cross_entropy(nets.classify(b, zs), onehot(ys, k))
        norms = dc.row_l2_norm(dc.concat_rows([zs, zt]))
        return ce + dc.scale(dc.mean(dc.square(dc.Tensor(frozen_norms) - norms)), 0.3)

    errs["safn"] = rel_err(analytic(b, lambda: methods.loss_safn(b, xs, ys, xt, 0.3, 0.5)),
                           numeric(b, safn_oracle))

    b = micro_bundle(disc=True)
    gamma = np.array([0.9, 1.0, 0.4])

    def ba3us(adv):
        cfg = methods.Ba3us(lambda_wce=0.7, lambda_ent=0.2, adv_weight=adv)
        return lambda: methods.loss_ba3us(b, xs, ys, xt, xs[:2] + 0.1, gamma, cfg, 30, 100, 0.6)

    errs["ba3us"] = rel_err(analytic(b, ba3us(1.0)), reversed_oracle(b, ba3us(0.0), ba3us(1.0), 0.6))

    b = micro_bundle(critic=True)
    w = np.array([0.5, 1.5, 1.2, 0.8])
    for part, name in ((0, "ar classifier"), (1, "ar critic")):
        fn = lambda: methods.loss_ar(b, xs, ys, xt, w, ar_cfg(), np.random.default_rng(0), 0.9)[part]  # noqa: E731,B023
        g, n = analytic(b, fn), numeric(b, fn)
        if part == 1:
            g = {q: g[q] for q in g if q.startswith("critic")}
            n = {q: n[q] for q in n if q.startswith("critic")}
        errs[name] = rel_err(g, n)

    for which in ("jumbot", "mpot"):
        b = micro_bundle()
        if which == "jumbot":
            cfg = methods.Jumbot(tau=0.5, eta1=0.3, eta2=0.7, eta3=2.0)
            loss_fn = lambda: methods.loss_jumbot(b, xs, ys, xt, cfg, 10_000, 1e-12)[0]  # noqa: E731,B023
        else:
            cfg = methods.Mpot(eps=0.5, eta1=0.3, eta2=0.7, m=0.4)
            loss_fn = lambda: methods.loss_mpot(b, xs, ys, xt, cfg, 10_000, 1e-12)[0]  # noqa: E731,B023
        with dc.no_grad():
            zs, zt = nets.forward_features(b, xs), nets.forward_features(b, xt)
            cost = methods.jumbot_cost(zs, onehot(ys, k), zt, nets.classify(b, zt), 0.3, 0.7).data
        u = np.full(4, 0.25)
        plan = (ot.sinkhorn_uot(cost, u, u, 0.5, 2.0, 10_000, 1e-12) if which == "jumbot"
                else ot.partial_ot_entropic(cost, u, u, 0.4, 0.5, 10_000, 1e-12)).pi

        def frozen():
            zs, zt = nets.forward_features(b, xs), nets.forward_features(b, xt)  # noqa: B023
            c = methods.jumbot_cost(zs, onehot(ys, k), zt, nets.classify(b, zt), 0.3, 0.7)  # noqa: B023
            ce = dc.softmax_cross_entropy(nets.classify(b, zs), onehot(ys, k))  # noqa: B023
            return ce + methods.ot_alignment(c, plan)  # noqa: B023

        errs[which] = rel_err(analytic(b, loss_fn), numeric(b, frozen))
    return errs


def test_criterion_2_method_gradients(capsys):
    t0 = time.perf_counter()
    errs = method_gradient_errors()
    elapsed = time.perf_counter() - t0
    checks = {f"{name} rel err {e:.1e} < 1e-4": e < 1e-4 for name, e in errs.items()}
    checks[f"runtime {elapsed:.1f}s < 60s"] = elapsed < 60
    report(capsys, 2, "loss gradients", checks)


# ------------------------------------------------------------ criterion 3


def test_criterion_3_scorer_exactness(capsys):
    ent = max(abs(selection.mean_entropy(np.zeros((7, k))) - math.log(k)) for k in (2, 10, 65))
    rng = np.random.default_rng(3)
    snd = 0.0
    for n, block in ((2, 1), (17, 5), (100, 33), (256, 64), (256, 256)):
        f = rng.standard_normal((n, 8))
        snd = max(snd, abs(selection.snd_from_features(f, 0.05, block) - dense_snd(f, 0.05)))
    loss = (rng.uniform(size=40) < 0.3).astype(float)
    dev_exact = selection.dev_risk(np.ones(40), loss) == loss.mean()

    x = rng.standard_normal(400)
    w = np.exp(0.5 * x - 0.125)
    err = (rng.uniform(size=400) < 1 / (1 + np.exp(-2 * x))).astype(float)
    dev, iw = [], []
    for _ in range(300):
        i = rng.integers(0, 400, 400)
        dev.append(selection.dev_risk(w[i], err[i]))
        iw.append(np.mean(w[i] * err[i]))
    ratio = np.var(dev) / np.var(iw)
    report(capsys, 3, "scorer exactness", {
        f"ENT uniform vs ln K {ent:.1e} <= 1e-10": ent <= 1e-10,
        f"SND blocked vs dense {snd:.1e} <= 1e-10": snd <= 1e-10,
        "DEV with unit weights equals mean error": dev_exact,
        f"DEV variance ratio {ratio:.3f} <= 1.05": ratio <= 1.05,
    })


# ------------------------------------------------------------ criterion 4


def reduced_pipeline(tmp, tag):
    spec = datagen.PartialShiftSpec(d=6, k_source=4, k_target=2, n_per_class_source=20,
                                    n_per_class_target=30)
    src, tgt = datagen.gen_partial_blobs(spec, 1)
    cache = {}

    def data(seed):
        if seed not in cache:
            cache[seed] = datagen.prepare(src, tgt, seed)
        return cache[seed]

    cfg = methods.TrainConfig(total_iters=20, eval_interval=10, batch_size=8, hidden=(8,),
                              dev_max_iter=50)
    grids = {m: harness.GridSpec(m, {k: v[:2] for k, v in list(harness.DEFAULT_GRIDS[m].items())[:1]})
             for m in harness.METHOD_ORDER if m != "source_only"}
    store = harness.RunStore(tmp / f"{tag}.jsonl")
    res = harness.run_protocol(list(harness.METHOD_ORDER), data, cfg, grids,
                               seeds=harness.DEFAULT_SEEDS, store=store)
    paths = harness.emit_report(res.table, tmp / tag, figures=False)
    return paths["csv"].read_bytes(), read_records(tmp / f"{tag}.jsonl")


def test_criterion_4_protocol_invariants(tmp_path, capsys):
    first, recs = reduced_pipeline(tmp_path, "a")
    second, _ = reduced_pipeline(tmp_path, "b")
    violations = 0
    checked = 0
    for rec in recs:
        if not rec.ok:
            continue
        checked += 1
        best = harness.selected_accuracy(rec, ScorerKind.ORACLE)
        violations += sum(best < harness.selected_accuracy(rec, k) for k in ALL_SCORERS)
    rows = list(csv.DictReader(first.decode().splitlines()))
    report(capsys, 4, "protocol invariants", {
        f"ORACLE dominance on {checked} runs ({violations} violations)": violations == 0
        and checked > 0,
        "replay is byte-identical": first == second,
        "all seven methods reported": {r["method"] for r in rows} == set(harness.METHOD_ORDER),
        "seeds 2020-2022 in every cell": {r["seeds"] for r in rows} == {"2020 2021 2022"},
    })


# ------------------------------------------------------------ criterion 5

# Single-point grids at the default hyper-parameters; the unbalanced-OT method uses the
# setting picked by source accuracy on a coarse desk sweep.
DESK_HP = {"jumbot": {"tau": 0.1, "eta1": 0.01, "eta2": 0.1, "eta3": 5.0}}
DESK_CFG = dict(total_iters=1600, eval_interval=200)


def desk_protocol(store=None):
    spec = datagen.PartialShiftSpec()
    src, tgt = datagen.gen_partial_blobs(spec, 0)
    cache = {}

    def data(seed):
        if seed not in cache:
            cache[seed] = datagen.prepare(src, tgt, seed)
        return cache[seed]

    grids = {}
    for m in harness.METHOD_ORDER:
        cfg = methods.make_method(m, **DESK_HP.get(m, {}))
        grids[m] = harness.GridSpec(m, {k: [v] for k, v in cfg.hp().items()})
    return harness.run_protocol(list(harness.METHOD_ORDER), data,
                                methods.TrainConfig(**DESK_CFG), grids, store=store)


def test_criterion_5_desk_reproduction(tmp_path, capsys):
    t0 = time.perf_counter()
    res = desk_protocol(harness.RunStore(tmp_path / "desk.jsonl"))
    elapsed = time.perf_counter() - t0
    table = res.table
    paths = harness.emit_report(table, tmp_path, "desk", figures=False)
    with capsys.disabled():
        print("\n" + paths["md"].read_text())
    oracle = {m: table.get(m, "ORACLE").mean for m in table.methods()
              if table.get(m, "ORACLE") and table.get(m, "ORACLE").ok}
    base = oracle["source_only"]
    adapted = {m: v for m, v in oracle.items() if m != "source_only"}
    best = max(adapted, key=adapted.get)
    gaps = table.gap_summary()
    no_gap = [m for m in table.methods() if not (m in gaps and gaps[m]["worst_gap"] < 0)]
    rnd = table.get(best, "RND_100")
    rnd_gap = oracle[best] - rnd.mean if rnd and rnd.ok else math.inf
    report(capsys, 5, "desk reproduction", {
        f"{best} ORACLE {100 * adapted[best]:.2f} >= SourceOnly {100 * base:.2f} + 5":
            adapted[best] >= base + 0.05,
        "positive label-free gap for every method"
        + (f" (missing: {', '.join(no_gap)})" if no_gap else ""): not no_gap,
        f"{best} RND_100 within 2 points of ORACLE ({100 * rnd_gap:.2f})": rnd_gap <= 0.02,
        f"runtime {elapsed / 60:.1f} min < 30 min": elapsed < 1800,
    })


# ------------------------------------------------------------ criterion 6


def pseudo_real_embeddings(path, d=256, k_source=6, k_target=3, seed=11):
    """Random class-clustered 256-d embedding files standing in for backbone features."""
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((k_source, d))
    shift = 0.5 * rng.standard_normal(d)
    ys = np.repeat(np.arange(k_source), 30)
    yt = np.repeat(np.arange(k_target), 50)
    xs = means[ys] + 0.8 * rng.standard_normal((len(ys), d))
    xt = means[yt] + shift + 0.8 * rng.standard_normal((len(yt), d))
    path.mkdir()
    datagen.save_embeddings(datagen.LabeledSet(xs, ys, "source", k_source), path / "source.pdae")
    datagen.save_embeddings(datagen.LabeledSet(xt, yt, "target", k_source), path / "target.pdae")


def test_criterion_6_ingested_embeddings(tmp_path, capsys):
    emb = tmp_path / "emb"
    pseudo_real_embeddings(emb)
    (tmp_path / "train.json").write_text(json.dumps(
        {"total_iters": 60, "eval_interval": 20, "batch_size": 12, "hidden": [32],
         "dev_max_iter": 50}))
    grids = {m: {"values": {k: [v] for k, v in methods.make_method(m).hp().items()}}
             for m in harness.METHOD_ORDER}
    (tmp_path / "grids.json").write_text(json.dumps(grids))
    out = tmp_path / "report"
    code = cli.main(["report", "--embeddings", str(emb), "--grids", str(tmp_path / "grids.json"),
                     "--train-config", str(tmp_path / "train.json"), "--task", "pseudo-real",
                     "--out-dir", str(out)])
    rows = list(csv.DictReader((out / "report.csv").read_text().splitlines())) if code == 0 else []
    header = next((ln for ln in (out / "report.md").read_text().splitlines()
                   if ln.startswith("| Method |")), "") if code == 0 else ""
    want_header = "| Method | " + " | ".join(harness.DISPLAY[c] for c in harness.COLUMN_ORDER) + " |"
    report(capsys, 6, "ingested 256-d embeddings", {
        f"report command exit code {code}": code == 0,
        "every method in the report": {r["method"] for r in rows} == set(harness.METHOD_ORDER),
        "full scorer column layout": header == want_header,
        "figures rendered": (out / "report_accuracy.png").exists(),
        "task id recorded": {r["task"] for r in rows} == {"pseudo-real"},
    })
