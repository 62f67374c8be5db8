"""Run records and their JSON-lines serialization."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path


@dataclass
class CheckpointScore:
    iteration: int
    scores: dict
    target_acc: float
    src_val_acc: float


@dataclass
class RunRecord:
    method: str
    hp: dict
    seed: int
    task: str = "synthetic"
    checkpoints: list = field(default_factory=list)
    status: str = "ok"
    error: str = ""
    wall_time: float = 0.0

    @property
    def ok(self):
        return self.status == "ok" and bool(self.checkpoints)

    @property
    def final(self):
        return self.checkpoints[-1] if self.checkpoints else None

    def hp_key(self):
        return hp_key(self.method, self.hp)

    def to_rows(self):
        base = {"method": self.method, "hp": self.hp, "seed": self.seed, "task": self.task}
        rows = []
        for c in self.checkpoints:
            rows.append({**base, "kind": "checkpoint", "iter": c.iteration, **c.scores,
                         "target_acc": c.target_acc, "src_val_acc": c.src_val_acc})
        fin = self.final
        rows.append({**base, "kind": "summary", "status": self.status, "error": self.error,
                     "iter": fin.iteration if fin else None,
                     "target_acc": fin.target_acc if fin else None,
                     "src_val_acc": fin.src_val_acc if fin else None,
                     "wall_time": round(self.wall_time, 3)})
        return rows


_ROW_KEYS = {"method", "hp", "seed", "task", "kind", "iter", "target_acc", "src_val_acc"}


def hp_key(method, hp):
    return method + "|" + json.dumps(hp, sort_keys=True)


def append_record(path, rec):
    with open(path, "a") as fh:
        for row in rec.to_rows():
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_records(path):
    """Rebuild run records from a JSON-lines store; rows of a run precede its summary row."""
    out, pending = [], []
    path = Path(path)
    if not path.exists():
        return out
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        row = json.loads(line)
        if row["kind"] == "checkpoint":
            scores = {k: v for k, v in row.items() if k not in _ROW_KEYS}
            pending.append(CheckpointScore(row["iter"], scores, row["target_acc"],
                                           row["src_val_acc"]))
            continue
        out.append(RunRecord(row["method"], row["hp"], row["seed"], row["task"], pending,
                             row["status"], row.get("error", ""), row.get("wall_time", 0.0)))
        pending = []
    return out
