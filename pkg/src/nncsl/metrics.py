"""Accuracy matrix bookkeeping plus average accuracy, forward and backward transfer."""
from __future__ import annotations

import csv
import json

import numpy as np

from .errors import ParameterError, StateError, UndefinedMetricError


class ResultMatrix:
    """``R[i, j]`` is the accuracy on task ``j`` after training task ``i`` (0-based).

    ``r[j]`` is the accuracy of the untrained model on task ``j``.
    """

    def __init__(self, num_tasks):
        if num_tasks < 1:
            raise ParameterError("need at least one task")
        self.R = np.full((num_tasks, num_tasks), np.nan)
        self.r = np.full(num_tasks, np.nan)

    @classmethod
    def from_arrays(cls, R, r=None):
        R = np.asarray(R, dtype=np.float64)
        if R.ndim != 2 or R.shape[0] != R.shape[1]:
            raise ParameterError(f"result matrix must be square, got {R.shape}")
        rm = cls(R.shape[0])
        for i, j in zip(*np.nonzero(~np.isnan(R))):
            rm.set(i, j, R[i, j])
        if r is not None:
            for j, v in enumerate(r):
                if not np.isnan(v):
                    rm.set_random(j, v)
        return rm

    @property
    def T(self):
        return len(self.r)

    def set(self, after_task, eval_task, accuracy):
        if not 0.0 <= accuracy <= 1.0:
            raise ParameterError(f"accuracy {accuracy} outside [0, 1]")
        self.R[after_task, eval_task] = accuracy

    def set_random(self, eval_task, accuracy):
        if not 0.0 <= accuracy <= 1.0:
            raise ParameterError(f"accuracy {accuracy} outside [0, 1]")
        self.r[eval_task] = accuracy

    def final_row(self):
        row = self.R[-1]
        if np.isnan(row).any():
            raise StateError("final row of the result matrix is incomplete")
        return row.copy()

    def entries(self):
        for i, j in zip(*np.nonzero(~np.isnan(self.R))):
            yield int(i), int(j), float(self.R[i, j])


def acc(rm):
    return float(np.mean(rm.final_row()))


def fwt(rm):
    T = rm.T
    if T < 2:
        raise UndefinedMetricError("forward transfer needs at least two tasks")
    ahead = np.array([rm.R[i - 1, i] for i in range(1, T)])
    chance = rm.r[1:]
    if np.isnan(ahead).any() or np.isnan(chance).any():
        raise StateError("superdiagonal or random baseline incomplete")
    return float(np.sum(ahead - chance) / (T - 1))


def bwt(rm, exclude_first=False):
    T = rm.T
    if T < 2:
        raise UndefinedMetricError("backward transfer needs at least two tasks")
    start = 1 if exclude_first else 0
    if T - 1 - start < 1:
        raise UndefinedMetricError("backward transfer without the first task needs three tasks")
    final = rm.final_row()
    diag = np.diag(rm.R)
    if np.isnan(diag[start : T - 1]).any():
        raise StateError("diagonal of the result matrix is incomplete")
    return float(np.sum(final[start : T - 1] - diag[start : T - 1]) / (T - 1 - start))


def per_task_final(rm):
    return rm.final_row()


def summary(rm):
    out = {"acc": acc(rm), "per_task_final": per_task_final(rm).tolist()}
    if rm.T >= 2:
        out["fwt"] = fwt(rm)
        out["bwt"] = bwt(rm)
    if rm.T >= 3:
        out["bwt_excluding_first"] = bwt(rm, exclude_first=True)
    return out


def write_matrix_csv(rm, path, config_hash=None):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["after_task", "eval_task", "accuracy"])
        for i, j, value in rm.entries():
            writer.writerow([i, j, repr(value)])


def read_matrix_csv(path, num_tasks=None):
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    reader = csv.DictReader(lines)
    for row in reader:
        rows.append((int(row["after_task"]), int(row["eval_task"]), float(row["accuracy"])))
    T = num_tasks or 1 + max(max(i, j) for i, j, _ in rows)
    rm = ResultMatrix(T)
    for i, j, v in rows:
        rm.set(i, j, v)
    return rm


def write_summary_json(rm, path, config=None, config_hash=None, extra=None):
    payload = summary(rm)
    payload["matrix"] = [[None if np.isnan(v) else float(v) for v in row] for row in rm.R]
    payload["random_baseline"] = [None if np.isnan(v) else float(v) for v in rm.r]
    if extra:
        payload.update(extra)
    if config is not None:
        payload["config"] = config
    if config_hash:
        payload["config_hash"] = config_hash
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return payload
