"""Metrics persistence: per-method CSVs, cross-seed summary, timing sidecar.

Schemas are fixed; readers and writers in this module are the documentation.

  metrics_<method>.csv: method,seed,round,train_loss,test_accuracy,epsilon_hat,batch_sizes
      one row per (method, seed, round); epsilon_hat empty for non-DP runs;
      batch_sizes joined with ';'. Deterministic given the config, so reruns
      are byte-identical.
  timings.csv: method,seed,round,wall_ms
      wall-clock lives here, outside the deterministic files.
  summary.csv: method,round,num_seeds,train_loss_mean,train_loss_std,
      test_accuracy_mean,test_accuracy_std,epsilon_hat_mean,epsilon_hat_std
      per-(method, round) across seeds; population std; num_seeds counts the
      seeds that reached the round (budget stops can differ per seed).

All files are written to a temp name and renamed into place. Floats are
written with repr, the shortest round-tripping form.
"""

from __future__ import annotations

import csv
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .orchestrator import RunResult

METRICS_COLUMNS = (
    "method", "seed", "round", "train_loss", "test_accuracy", "epsilon_hat", "batch_sizes",
)
TIMINGS_COLUMNS = ("method", "seed", "round", "wall_ms")
SUMMARY_COLUMNS = (
    "method", "round", "num_seeds",
    "train_loss_mean", "train_loss_std",
    "test_accuracy_mean", "test_accuracy_std",
    "epsilon_hat_mean", "epsilon_hat_std",
)


@dataclass(frozen=True)
class MetricsRecord:
    """One (method, seed, round) row; wall_ms is reported but kept out of the
    deterministic per-method files."""

    method: str
    seed: int
    round_index: int
    train_loss: float
    test_accuracy: float
    epsilon_hat: float | None
    batch_sizes: tuple[int, ...]
    wall_ms: float = 0.0


@dataclass(frozen=True)
class SummaryRow:
    method: str
    round_index: int
    num_seeds: int
    train_loss_mean: float
    train_loss_std: float
    test_accuracy_mean: float
    test_accuracy_std: float
    epsilon_hat_mean: float | None
    epsilon_hat_std: float | None


def records_from_run(result: RunResult) -> list[MetricsRecord]:
    return [
        MetricsRecord(
            method=result.method,
            seed=result.seed,
            round_index=r.round_index,
            train_loss=r.train_loss,
            test_accuracy=r.test_accuracy,
            epsilon_hat=r.epsilon_hat,
            batch_sizes=r.batch_sizes,
            wall_ms=r.wall_ms,
        )
        for r in result.records
    ]


def _atomic_write_rows(path, header, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerows(rows)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(x: float | None) -> str:
    return "" if x is None else repr(float(x))


def write_metrics_csv(path, records: list[MetricsRecord]) -> None:
    rows = [
        (
            r.method, r.seed, r.round_index,
            _fmt(r.train_loss), _fmt(r.test_accuracy), _fmt(r.epsilon_hat),
            ";".join(str(s) for s in r.batch_sizes),
        )
        for r in records
    ]
    _atomic_write_rows(path, METRICS_COLUMNS, rows)


def write_timings_csv(path, records: list[MetricsRecord]) -> None:
    rows = [(r.method, r.seed, r.round_index, _fmt(r.wall_ms)) for r in records]
    _atomic_write_rows(path, TIMINGS_COLUMNS, rows)


def read_metrics_csv(path) -> list[MetricsRecord]:
    """Parse a per-method file back; wall_ms is not stored there, so it reads 0."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRICS_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
        for row in reader:
            out.append(MetricsRecord(
                method=row["method"],
                seed=int(row["seed"]),
                round_index=int(row["round"]),
                train_loss=float(row["train_loss"]),
                test_accuracy=float(row["test_accuracy"]),
                epsilon_hat=float(row["epsilon_hat"]) if row["epsilon_hat"] else None,
                batch_sizes=tuple(
                    int(tok) for tok in row["batch_sizes"].split(";") if tok
                ),
            ))
    return out


def summarize(records: list[MetricsRecord]) -> list[SummaryRow]:
    """Per-(method, round) mean and population std across seeds.

    Methods keep their input order; rounds are ascending within a method.
    epsilon columns stay empty unless every contributing seed reported one.
    """
    order: list[str] = []
    for r in records:
        if r.method not in order:
            order.append(r.method)
    rows = []
    for method in order:
        mine = [r for r in records if r.method == method]
        for rnd in sorted({r.round_index for r in mine}):
            at = [r for r in mine if r.round_index == rnd]
            losses = [r.train_loss for r in at]
            accs = [r.test_accuracy for r in at]
            eps = [r.epsilon_hat for r in at]
            has_eps = all(e is not None for e in eps)
            rows.append(SummaryRow(
                method=method,
                round_index=rnd,
                num_seeds=len(at),
                train_loss_mean=float(np.mean(losses)),
                train_loss_std=float(np.std(losses)),
                test_accuracy_mean=float(np.mean(accs)),
                test_accuracy_std=float(np.std(accs)),
                epsilon_hat_mean=float(np.mean(eps)) if has_eps else None,
                epsilon_hat_std=float(np.std(eps)) if has_eps else None,
            ))
    return rows


def write_summary_csv(path, rows: list[SummaryRow]) -> None:
    _atomic_write_rows(path, SUMMARY_COLUMNS, [
        (
            r.method, r.round_index, r.num_seeds,
            _fmt(r.train_loss_mean), _fmt(r.train_loss_std),
            _fmt(r.test_accuracy_mean), _fmt(r.test_accuracy_std),
            _fmt(r.epsilon_hat_mean), _fmt(r.epsilon_hat_std),
        )
        for r in rows
    ])


def read_summary_csv(path) -> list[SummaryRow]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != SUMMARY_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
        for row in reader:
            out.append(SummaryRow(
                method=row["method"],
                round_index=int(row["round"]),
                num_seeds=int(row["num_seeds"]),
                train_loss_mean=float(row["train_loss_mean"]),
                train_loss_std=float(row["train_loss_std"]),
                test_accuracy_mean=float(row["test_accuracy_mean"]),
                test_accuracy_std=float(row["test_accuracy_std"]),
                epsilon_hat_mean=float(row["epsilon_hat_mean"]) if row["epsilon_hat_mean"] else None,
                epsilon_hat_std=float(row["epsilon_hat_std"]) if row["epsilon_hat_std"] else None,
            ))
    return out
