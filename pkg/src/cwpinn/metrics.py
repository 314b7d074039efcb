"""Test-set metrics and CSV exports.

Floats are written with ``repr`` (shortest round-trip decimal) so that
repeated runs produce byte-identical files.
"""

from __future__ import annotations

import csv
import functools
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import jax
import numpy as np

from .problems import ProblemSpec, grid_points, predict_fields, sample_test_points

HISTORY_COLUMNS = ("iteration", "loss_total", "loss_residual", "loss_fixed", "rel_l2", "l_inf", "lr")


def fmt(value) -> str:
    return repr(float(value))


@dataclass(frozen=True)
class TestSet:
    points: np.ndarray
    truth: np.ndarray  # (n, n_fields), noiseless

    __test__ = False  # not a pytest class

    def __post_init__(self):
        if len(self.points) != len(self.truth):
            raise ValueError("test points and truth differ in length")

    @classmethod
    def for_problem(cls, problem: ProblemSpec, n: int = 90_000, seed: int = 0) -> "TestSet":
        if problem.exact_solution is None:
            raise ValueError(f"problem {problem.name!r} has no exact solution")
        pts = sample_test_points(problem, n, seed)
        truth = np.asarray(problem.exact_solution(pts), dtype=np.float64).reshape(n, -1)
        return cls(pts, truth)


@dataclass
class TrainingRecord:
    iteration: int
    loss_total: float
    loss_residual: float
    loss_fixed: float
    rel_l2: float
    l_inf: float
    lr: float
    wall_ms: float = 0.0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.rel_l2 < 0 or self.l_inf < 0:
            raise ValueError("error metrics must be non-negative")


def rel_l2(pred, truth) -> float:
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    truth = np.asarray(truth, dtype=np.float64).reshape(-1)
    if pred.shape != truth.shape or pred.size == 0:
        raise ValueError("pred and truth must be non-empty and equally long")
    denom = np.linalg.norm(truth)
    if denom == 0:
        raise ValueError("relative L2 error is undefined for an all-zero truth vector")
    return float(np.linalg.norm(pred - truth) / denom)


def l_inf(pred, truth) -> float:
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    truth = np.asarray(truth, dtype=np.float64).reshape(-1)
    if pred.shape != truth.shape:
        raise ValueError("pred and truth must be equally long")
    if pred.size == 0:
        return 0.0
    return float(np.max(np.abs(pred - truth)))


@functools.partial(jax.jit, static_argnums=0)
def _predict(problem, params, X):
    return predict_fields(problem, params, X)


def predict(problem: ProblemSpec, params, points, chunk: int = 8192) -> np.ndarray:
    """Hard-constrained predictions of every field, shape (n, n_fields).

    Points go through one compiled block shape (the tail is padded), so a
    point's prediction does not depend on the batch it arrived in.
    """
    params = tuple(np.asarray(p, dtype=np.float64) for p in params)
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != problem.input_dim:
        raise ValueError(f"expected points of shape (n, {problem.input_dim})")
    if not np.all(np.isfinite(points)):
        raise ValueError("points contain non-finite entries")
    parts = []
    for start in range(0, len(points), chunk):
        block = points[start:start + chunk]
        if len(block) < chunk:
            block = np.concatenate([block, np.repeat(block[-1:], chunk - len(block), axis=0)])
        parts.append(np.asarray(_predict(problem, params, block)))
    if not parts:
        return np.zeros((0, len(problem.field_names)))
    return np.concatenate(parts)[:len(points)]


def evaluate(problem: ProblemSpec, params, test: TestSet) -> dict[str, tuple[float, float]]:
    """(relative L2, L-infinity) for every predicted field against the test truth."""
    pred = predict(problem, params, test.points)
    return {
        name: (rel_l2(pred[:, k], test.truth[:, k]), l_inf(pred[:, k], test.truth[:, k]))
        for k, name in enumerate(problem.field_names)
    }


def history_columns(field_names) -> list[str]:
    cols = list(HISTORY_COLUMNS[:-1])
    for name in field_names[1:]:
        cols += [f"rel_l2_{name}", f"l_inf_{name}"]
    return cols + ["lr"]


def write_history(records, path, field_names=("u",)) -> None:
    """history.csv: one row per checkpoint; wall-clock time is kept out of it."""
    cols = history_columns(field_names)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(cols)
        for rec in records:
            row = asdict(rec)
            row.update(rec.extra)
            writer.writerow([str(row[c]) if c == "iteration" else fmt(row[c]) for c in cols])


def write_timing(records, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["iteration", "wall_ms"])
        for rec in records:
            writer.writerow([rec.iteration, f"{rec.wall_ms:.4f}"])


def read_history(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "iteration" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


def write_summary(path, summary: dict) -> None:
    """Key-value summary as sorted JSON."""
    def clean(v):
        if isinstance(v, float) and not math.isfinite(v):
            return str(v)
        return v
    Path(path).write_text(json.dumps({k: clean(v) for k, v in summary.items()}, indent=2, sort_keys=True) + "\n")


def export_field_grid(problem: ProblemSpec, params, shape, path) -> np.ndarray:
    """CSV per grid node: coordinates, prediction, truth and absolute error per field."""
    pts = grid_points(problem, tuple(shape))
    pred = predict(problem, params, pts)
    truth = None if problem.exact_solution is None else np.asarray(problem.exact_solution(pts)).reshape(len(pts), -1)
    header = list(problem.coord_names)
    for name in problem.field_names:
        header.append(f"{name}_pred")
        if truth is not None:
            header += [f"{name}_true", f"{name}_abs_err"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i, p in enumerate(pts):
            row = [fmt(v) for v in p]
            for k in range(len(problem.field_names)):
                row.append(fmt(pred[i, k]))
                if truth is not None:
                    row += [fmt(truth[i, k]), fmt(abs(pred[i, k] - truth[i, k]))]
            writer.writerow(row)
    return pred


def write_weight_snapshot(path, points, lambdas, coord_names) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["index", *coord_names, "lambda"])
        for i, (p, lam) in enumerate(zip(points, lambdas)):
            writer.writerow([i, *(fmt(v) for v in p), fmt(lam)])


def append_collocation_snapshot(path, iteration, points, coord_names) -> None:
    """Append one block of rows ``iter, index, coordinates...`` (header on creation)."""
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if new:
            writer.writerow(["iter", "index", *coord_names])
        for i, p in enumerate(points):
            writer.writerow([iteration, i, *(fmt(v) for v in p)])
