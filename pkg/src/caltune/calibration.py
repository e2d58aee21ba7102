"""Expected Calibration Error, reliability bins and temperature scaling."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DimensionMismatch, EmptyRecordSet, InvalidRange, NonPositiveTemperature
from .numeric import argmax_lowest, as_vector, softmax_temperature

DEFAULT_BINS = 15
DEFAULT_SEARCH_RANGE = (1e-3, 1e3)
LOG_T_TOL = 1e-4
_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class PredictionRecord:
    logits: np.ndarray
    probs: np.ndarray
    predicted: int
    confidence: float
    label: int
    tau: float = 1.0

    @property
    def correct(self) -> bool:
        return self.predicted == self.label

    @property
    def n_classes(self) -> int:
        return int(self.logits.shape[0])


def make_record(logits, tau: float, label: int) -> PredictionRecord:
    logits = as_vector(logits).copy()
    logits.setflags(write=False)
    probs = softmax_temperature(logits, tau)
    probs.setflags(write=False)
    label = int(label)
    if not 0 <= label < logits.shape[0]:
        raise DimensionMismatch(f"label {label} outside [0, {logits.shape[0]})")
    # argmax on probs, not logits: the record must be self-consistent
    predicted = argmax_lowest(probs)
    return PredictionRecord(logits, probs, predicted, float(probs[predicted]), label, float(tau))


def apply_temperature(record_or_logits, T: float, tau_base: float = 1.0, label: int | None = None) -> PredictionRecord:
    """Re-softmax at temperature ``T * tau_base``.

    A :class:`PredictionRecord` carries its own base temperature and label;
    raw logits need ``label`` (and optionally ``tau_base``).
    """
    if not T > 0:
        raise NonPositiveTemperature(f"T must be positive, got {T!r}")
    if isinstance(record_or_logits, PredictionRecord):
        rec = record_or_logits
        return make_record(rec.logits, T * rec.tau, rec.label)
    if label is None:
        raise TypeError("label is required when passing raw logits")
    return make_record(record_or_logits, T * tau_base, label)


@dataclass(frozen=True)
class ReliabilityBins:
    """Equal-width confidence bins; bin ``k`` (1-based) covers ``((k-1)/K, k/K]``."""

    n_bins: int
    edges: np.ndarray
    counts: np.ndarray
    accuracy: np.ndarray
    confidence: np.ndarray

    def rows(self):
        for k in range(self.n_bins):
            yield (
                float(self.edges[k]),
                float(self.edges[k + 1]),
                int(self.counts[k]),
                float(self.accuracy[k]),
                float(self.confidence[k]),
            )


@dataclass(frozen=True)
class CalibrationReport:
    ece: float
    accuracy: float
    mean_confidence: float
    bins: ReliabilityBins = field(repr=False)

    def summary(self) -> dict:
        return {
            "ece": self.ece,
            "accuracy": self.accuracy,
            "mean_confidence": self.mean_confidence,
            "n_bins": self.bins.n_bins,
            "count": int(self.bins.counts.sum()),
        }


def bin_edges(n_bins: int) -> np.ndarray:
    return np.array([k / n_bins for k in range(n_bins + 1)], dtype=np.float64)


def assign_bins(confidences, n_bins: int) -> np.ndarray:
    """Zero-based bin index for each confidence.

    ``ceil(c * K)`` is only a first guess; the result is corrected against the
    edge values so membership matches ``lo < c <= hi`` exactly.
    """
    c = as_vector(confidences)
    edges = bin_edges(n_bins)
    idx = np.clip(np.ceil(c * n_bins).astype(np.int64), 1, n_bins)
    up = (c > edges[idx]) & (idx < n_bins)
    idx[up] += 1
    down = (c <= edges[idx - 1]) & (idx > 1)
    idx[down] -= 1
    return idx - 1


def ece_from_arrays(confidences, correct, n_bins: int = DEFAULT_BINS) -> CalibrationReport:
    conf = as_vector(confidences).reshape(-1)
    hit = np.asarray(correct, dtype=np.float64).reshape(-1)
    if conf.size == 0:
        raise EmptyRecordSet("no records to score")
    if conf.shape != hit.shape:
        raise DimensionMismatch("confidences and correctness differ in length")
    if n_bins < 1:
        raise InvalidRange(f"bin count must be >= 1, got {n_bins}")
    m = conf.size
    idx = assign_bins(conf, n_bins)
    counts = np.bincount(idx, minlength=n_bins)
    hit_sum = np.bincount(idx, weights=hit, minlength=n_bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=n_bins)
    acc = np.zeros(n_bins)
    mean_conf = np.zeros(n_bins)
    total = 0.0
    for k in range(n_bins):
        if counts[k] == 0:
            continue
        acc[k] = hit_sum[k] / counts[k]
        mean_conf[k] = conf_sum[k] / counts[k]
        total += counts[k] / m * abs(acc[k] - mean_conf[k])
    bins = ReliabilityBins(n_bins, bin_edges(n_bins), counts, acc, mean_conf)
    # overall sums accumulate like a single bin, so K=1 gives ece == |acc - conf| exactly
    whole = np.zeros(m, dtype=np.intp)
    return CalibrationReport(
        ece=float(total),
        accuracy=float(np.bincount(whole, weights=hit)[0] / m),
        mean_confidence=float(np.bincount(whole, weights=conf)[0] / m),
        bins=bins,
    )


def ece(records: Sequence[PredictionRecord], n_bins: int = DEFAULT_BINS) -> CalibrationReport:
    """Bin-weighted mean gap between accuracy and confidence over ``records``."""
    records = list(records)
    if not records:
        raise EmptyRecordSet("no records to score")
    conf = [r.confidence for r in records]
    hit = [r.predicted == r.label for r in records]
    return ece_from_arrays(conf, hit, n_bins)


def _stack_pairs(pairs) -> tuple[np.ndarray, np.ndarray]:
    pairs = list(pairs)
    if not pairs:
        raise EmptyRecordSet("no logit/label pairs")
    logits = []
    labels = []
    for p in pairs:
        if isinstance(p, PredictionRecord):
            logits.append(p.logits / p.tau)
            labels.append(p.label)
        else:
            lg, lb = p
            logits.append(as_vector(lg))
            labels.append(int(lb))
    widths = {len(x) for x in logits}
    if len(widths) != 1:
        raise DimensionMismatch(f"pairs disagree on class count: {sorted(widths)}")
    return np.vstack(logits), np.asarray(labels, dtype=np.int64)


def nll(logits: np.ndarray, labels: np.ndarray, T: float) -> float:
    """Mean negative log-likelihood of ``softmax(logits / T)``."""
    z = logits / T
    zmax = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=1)) + zmax[:, 0]
    return float(np.mean(lse - z[np.arange(len(labels)), labels]))


def fit_temperature(
    pairs: Iterable,
    search_range: tuple[float, float] = DEFAULT_SEARCH_RANGE,
    tol: float = LOG_T_TOL,
) -> float:
    """Temperature minimizing mean NLL, by golden-section search on ``ln T``.

    ``pairs`` holds ``(logits, label)`` tuples or :class:`PredictionRecord`
    objects (whose logits are first divided by their own base temperature).
    The endpoints and ``T = 1`` are also scored, so the fit never does worse
    than leaving the logits alone.
    """
    t_min, t_max = (float(v) for v in search_range)
    if not (0 < t_min < t_max) or not math.isfinite(t_max):
        raise InvalidRange(f"need 0 < T_min < T_max, got {search_range!r}")
    logits, labels = _stack_pairs(pairs)

    def f(log_t: float) -> float:
        return nll(logits, labels, math.exp(log_t))

    a, b = math.log(t_min), math.log(t_max)
    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _INVPHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INVPHI * (b - a)
            fd = f(d)
    candidates = [(a + b) / 2.0, math.log(t_min), math.log(t_max)]
    if t_min <= 1.0 <= t_max:
        candidates.append(0.0)
    best = min(candidates, key=f)
    return math.exp(best)
