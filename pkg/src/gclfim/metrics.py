"""Accuracy matrix bookkeeping, AP/AF and CSV emission."""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

from .gcn import ModelParams, forward, predict


class AccuracyMatrix:
    """Lower-triangular M[t][i]: accuracy (%) on task i after training task t.

    Indices are 0-based here; the CSV header uses 1-based task numbers.
    Unfilled cells hold NaN.
    """

    def __init__(self, num_tasks: int):
        self.values = np.full((num_tasks, num_tasks), np.nan)

    @property
    def num_tasks(self) -> int:
        return self.values.shape[0]

    def set_row(self, t: int, row) -> None:
        row = np.asarray(row, dtype=np.float64)
        if row.shape != (t + 1,):
            raise ValueError(f"row {t} needs {t + 1} entries, got {row.shape}")
        if np.any((row < 0) | (row > 100)):
            raise ValueError("accuracies must lie in [0, 100]")
        self.values[t, : t + 1] = row

    def row(self, t: int) -> np.ndarray:
        return self.values[t, : t + 1]

    def completed(self) -> int:
        """Number of leading rows that are fully populated."""
        for t in range(self.num_tasks):
            if np.isnan(self.row(t)).any():
                return t
        return self.num_tasks

    @classmethod
    def from_array(cls, values) -> "AccuracyMatrix":
        values = np.asarray(values, dtype=np.float64)
        m = cls(values.shape[0])
        for t in range(values.shape[0]):
            m.set_row(t, values[t, : t + 1])
        return m


def evaluate(params: ModelParams, schedule, upto: int) -> np.ndarray:
    """Test accuracy (%) on tasks 0..upto with the softmax spanning every class seen so far."""
    active = schedule.classes_seen(upto)
    row = []
    for task in schedule.tasks[: upto + 1]:
        trace = forward(params, task.adjacency, task.features, active)
        pred = predict(trace)[task.test]
        row.append(100.0 * float(np.mean(pred == task.labels[task.test])))
    return np.array(row)


def average_performance(m: AccuracyMatrix, t: int) -> float:
    return float(np.mean(m.row(t)))


def average_forgetting(m: AccuracyMatrix, t: int) -> float:
    """Mean of M[t][i] - M[i][i] over i < t; NaN when t == 0 (nothing to forget)."""
    if t < 1:
        return math.nan
    drops = m.values[t, :t] - np.diag(m.values)[:t]
    return float(np.mean(drops))


def emit_heatmap(m: AccuracyMatrix, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["after_task"] + [f"task_{i + 1}" for i in range(m.num_tasks)])
        for t in range(m.num_tasks):
            cells = [repr(float(x)) if i <= t else "" for i, x in enumerate(m.values[t])]
            writer.writerow([t + 1] + cells)


def parse_heatmap(path: str | Path) -> AccuracyMatrix:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    n = len(rows[0]) - 1
    values = np.full((n, n), np.nan)
    for t, row in enumerate(rows[1:]):
        for i, cell in enumerate(row[1:]):
            if cell:
                values[t, i] = float(cell)
    return AccuracyMatrix.from_array(values)


def mean_std(values) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    arr = np.asarray(values, dtype=np.float64)
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), std
