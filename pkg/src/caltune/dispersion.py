"""Text-feature dispersion (centroid distance) and correlation statistics.

A feature set is an ``(N, D)`` array, one row per class. Everything here
accepts anything ``np.asarray`` turns into that shape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import DimensionMismatch, InsufficientSurvivors, InvalidRange, LengthMismatch, ZeroVariance
from .numeric import ZERO_NORM

DEFAULT_BAND = 0.03
MIN_SURVIVORS = 3


@dataclass(frozen=True)
class DispersionStats:
    centroid: np.ndarray
    atfd: float
    per_class_distance: np.ndarray


def as_feature_set(features) -> np.ndarray:
    try:
        t = np.asarray(features, dtype=np.float64)
    except ValueError as exc:
        # ragged rows
        raise DimensionMismatch(f"feature rows differ in length: {exc}") from None
    if t.ndim != 2:
        raise DimensionMismatch(f"expected an (N, D) feature set, got shape {t.shape}")
    if t.shape[0] < 2:
        raise DimensionMismatch(f"need at least 2 class features, got {t.shape[0]}")
    return t


def centroid(features) -> np.ndarray:
    t = as_feature_set(features)
    return t.mean(axis=0)


def _centroid(t: np.ndarray) -> np.ndarray:
    # a summed mean of equal rows can drift by an ulp; keep that case exact
    if np.all(t == t[0]):
        return t[0].copy()
    return t.mean(axis=0)


def atfd(features) -> DispersionStats:
    """Mean L2 distance from the centroid to each class feature."""
    t = as_feature_set(features)
    c = _centroid(t)
    dist = np.linalg.norm(t - c, axis=1)
    return DispersionStats(c, float(dist.mean()), dist)


def atfd_gradient(features) -> np.ndarray:
    """Gradient of ATFD w.r.t. every feature row, centroid dependence included.

    Rows sitting on the centroid contribute a zero unit vector (subgradient).
    """
    t = as_feature_set(features)
    n = t.shape[0]
    diff = t - _centroid(t)
    dist = np.linalg.norm(diff, axis=1, keepdims=True)
    unit = np.where(dist > ZERO_NORM, diff / np.where(dist > ZERO_NORM, dist, 1.0), 0.0)
    return (unit - unit.mean(axis=0)) / n


def _pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.shape != y.shape:
        raise LengthMismatch(f"lengths {x.size} and {y.size} differ")
    if x.size < 2:
        raise LengthMismatch("need at least two observations")
    return x, y


def pearson(x, y) -> float:
    x, y = _pair(x, y)
    dx = x - x.mean()
    dy = y - y.mean()
    sx = math.sqrt(float(dx @ dx))
    sy = math.sqrt(float(dy @ dy))
    if sx == 0.0 or sy == 0.0:
        raise ZeroVariance("correlation undefined for a constant series")
    return float(np.clip((dx @ dy) / (sx * sy), -1.0, 1.0))


def rank(x) -> np.ndarray:
    """1-based ranks, ties sharing the average of the positions they span."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(x.size, dtype=np.float64)
    xs = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(x, y) -> float:
    x, y = _pair(x, y)
    return pearson(rank(x), rank(y))


@dataclass(frozen=True)
class FamilyCorrelation:
    pearson_r: float
    retained_count: int
    spearman_rho: float


def correlate_prompt_family(
    prompt_results: Sequence[Mapping[str, float]],
    accuracy_band: float = DEFAULT_BAND,
) -> FamilyCorrelation:
    """Correlate ATFD with ECE over prompts whose accuracy is near the best.

    Only prompts with ``accuracy >= max(accuracy) - accuracy_band`` are kept;
    accuracy is a fraction, so the default band is three points. The
    comparison allows 1e-12 of slack so that a prompt exactly on the band edge
    survives the float subtraction.
    """
    if not prompt_results:
        raise InsufficientSurvivors("no prompt results")
    if accuracy_band < 0:
        raise InvalidRange("accuracy_band must be non-negative")
    best = max(float(r["accuracy"]) for r in prompt_results)
    floor = best - accuracy_band - 1e-12
    kept = [r for r in prompt_results if float(r["accuracy"]) >= floor]
    if len(kept) < MIN_SURVIVORS:
        raise InsufficientSurvivors(
            f"{len(kept)} prompt(s) within {accuracy_band:g} of the best accuracy; need {MIN_SURVIVORS}"
        )
    a = [float(r["atfd"]) for r in kept]
    e = [float(r["ece"]) for r in kept]
    return FamilyCorrelation(pearson(a, e), len(kept), spearman(a, e))
