"""Periodic replacement of collocation points by their worst neighbour."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .weighting import RESAMPLING_SCHEMES, SmoothedResiduals


@dataclass(frozen=True)
class CollocationSet:
    """Current residual points, the centres their neighbourhoods are drawn
    around, and the per-point weights travelling with them."""

    points: np.ndarray
    centers: np.ndarray
    weights: np.ndarray
    last_resample_iter: int = 0

    def __post_init__(self):
        n = len(self.points)
        if len(self.centers) != n or len(self.weights) != n:
            raise ValueError("points, centers and weights must have equal length")

    @classmethod
    def from_points(cls, points, weights) -> "CollocationSet":
        points = np.asarray(points, dtype=np.float64)
        return cls(points, points.copy(), np.asarray(weights, dtype=np.float64))


def should_resample(iteration: int, K: int, scheme: str) -> bool:
    if K < 1:
        raise ValueError("K must be at least 1")
    return scheme in RESAMPLING_SCHEMES and iteration > 0 and iteration % K == 0


def best_candidates(points, neighbor_points, center_residuals, neighbor_residuals):
    """Arg-max of |r| over {x_i} and its neighbours for every i.

    Index 0 is the incumbent, so ties keep the current point and otherwise
    resolve to the lowest neighbour index. Returns (new_points, choice).
    """
    points = np.asarray(points)
    cand = np.concatenate([points[:, None, :], np.asarray(neighbor_points)], axis=1)
    scores = np.concatenate(
        [np.abs(np.asarray(center_residuals))[:, None], np.abs(np.asarray(neighbor_residuals))], axis=1,
    )
    choice = np.argmax(scores, axis=1)
    return cand[np.arange(len(points)), choice], choice


def resample(cset: CollocationSet, smoothed: SmoothedResiduals, scheme: str,
             iteration: int | None = None) -> CollocationSet:
    """Move each point to the highest-residual candidate of its neighbourhood.

    ``cwp`` re-centres the neighbourhood on the new point; ``cwp_fix`` keeps
    the original centre. Weights are carried over unchanged. The smoothed
    residuals must come from the current points (and iteration, if given).
    """
    if scheme not in RESAMPLING_SCHEMES:
        raise ValueError(f"resampling applies to {RESAMPLING_SCHEMES}, not {scheme!r}")
    if iteration is not None and smoothed.iteration is not None and smoothed.iteration != iteration:
        raise ValueError(f"stale smoothed residuals from iteration {smoothed.iteration}, expected {iteration}")
    if smoothed.points.shape != cset.points.shape or not np.array_equal(smoothed.points, cset.points):
        raise ValueError("smoothed residuals were not computed at the current collocation points")
    new_points, _ = best_candidates(cset.points, smoothed.neighbor_points,
                                    smoothed.center_residuals, smoothed.neighbor_residuals)
    centers = new_points.copy() if scheme == "cwp" else cset.centers
    last = cset.last_resample_iter if iteration is None else iteration
    return replace(cset, points=new_points, centers=centers, last_resample_iter=last)
