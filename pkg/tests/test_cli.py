import csv
import json

import pytest

from pdabench import cli
from pdabench.records import read_records

SPEC = {"d": 6, "k_source": 4, "k_target": 2, "n_per_class_source": 20,
        "n_per_class_target": 15}
TRAIN = {"total_iters": 20, "eval_interval": 10, "batch_size": 8, "hidden": [8],
         "dev_max_iter": 50}


@pytest.fixture
def workdir(tmp_path):
    (tmp_path / "spec.json").write_text(json.dumps(SPEC))
    (tmp_path / "train.json").write_text(json.dumps(TRAIN))
    assert cli.main(["gen-data", "--spec", str(tmp_path / "spec.json"), "--seeds", "2020,2021",
                     "--out-dir", str(tmp_path / "data")]) == 0
    return tmp_path


def common(tmp):
    return ["--dataset", str(tmp / "data"), "--train-config", str(tmp / "train.json"),
            "--out-dir", str(tmp / "runs")]


def test_gen_data_writes_dataset(workdir):
    names = {p.name for p in (workdir / "data").iterdir()}
    assert {"source.pdae", "target.pdae", "split.json", "subsets.json"} <= names
    assert set(json.loads((workdir / "data" / "split.json").read_text())) == {"2020", "2021"}


def test_train_and_select(workdir, capsys):
    assert cli.main(["train", "pada", "--hp", '{"lam": 0.5}', *common(workdir)]) == 0
    assert cli.main(["train", "source_only", *common(workdir)]) == 0
    recs = read_records(workdir / "runs" / "records.jsonl")
    assert [r.method for r in recs] == ["pada", "source_only"]
    capsys.readouterr()
    assert cli.main(["select", str(workdir / "runs" / "records.jsonl"), "--scorer", "ORACLE"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["selected"]["pada"]["hp"]["lam"] == 0.5
    assert out["floor"] == pytest.approx(0.9 * recs[1].final.src_val_acc)


def test_grid_search_from_file(workdir):
    (workdir / "grid.json").write_text(json.dumps({"method": "pada", "values": {"lam": [0.1, 1]}}))
    assert cli.main(["grid-search", str(workdir / "grid.json"), *common(workdir)]) == 0
    assert len(read_records(workdir / "runs" / "records.jsonl")) == 2


def test_report_end_to_end(workdir):
    (workdir / "grids.json").write_text(json.dumps({"pada": {"values": {"lam": [0.1, 1.0]}}}))
    args = ["report", "--methods", "source_only,pada", "--grids", str(workdir / "grids.json"),
            "--seeds", "2020,2021", *common(workdir)]
    assert cli.main(args) == 0
    runs = workdir / "runs"
    for name in ("report.csv", "report.md", "report_accuracy.png", "report_oracle_gap.png",
                 "selection.json"):
        assert (runs / name).exists(), name
    first = (runs / "report.csv").read_text()
    rows = list(csv.DictReader(first.splitlines()))
    assert {r["method"] for r in rows} == {"source_only", "pada"}
    # rebuilding from the stored records reproduces the same table
    assert cli.main(["report", "--methods", "source_only,pada", "--seeds", "2020,2021",
                     "--out-dir", str(runs), "--stem", "again", "--no-figures"]) == 0
    assert (runs / "again.csv").read_text() == first


def test_errors_exit_with_code_two(workdir, capsys):
    assert cli.main(["train", "pada", "--out-dir", str(workdir / "runs")]) == 2
    assert cli.main(["train", "pada", "--hp", '{"colour": 1}', *common(workdir)]) == 2
    assert cli.main(["grid-search", *common(workdir)]) == 2
    assert cli.main(["report", "--records", str(workdir / "missing.jsonl"),
                     "--out-dir", str(workdir / "r")]) == 2
    assert "error" in capsys.readouterr().err
