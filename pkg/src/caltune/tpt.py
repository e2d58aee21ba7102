"""Test-time prompt tuning: entropy loss, dispersion loss, joint update, experiments."""

from __future__ import annotations

import hashlib
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .calibration import DEFAULT_BINS, CalibrationReport, PredictionRecord, ece, make_record
from .dispersion import atfd, atfd_gradient
from .errors import InvalidRange, NonFiniteGradient
from .numeric import entropy, entropy_grad, l2_normalize_rows, softmax_backward, softmax_temperature
from .optim import AdamW, GradientDescent
from .sim import (
    DEFAULT_TAU,
    ClassVocabulary,
    PromptEmbedding,
    SampleBatch,
    SyntheticEncoderConfig,
    TextForward,
    augment,
    derive_seed,
)

OPTIMIZERS = ("adamw", "sgd")
# long names accepted in config files
OPTIMIZER_ALIASES = {
    "adaptive_moment_decoupled_decay": "adamw",
    "plain_gradient_descent": "sgd",
}
ARMS = ("baseline", "tpt", "ctpt", "ensemble")
LAMBDA_FINE_GRAINED = 50.0
LAMBDA_SHIFT = 20.0


@dataclass(frozen=True)
class TuningConfig:
    lam: float = LAMBDA_FINE_GRAINED
    learning_rate: float = 0.005
    steps: int = 1
    n_views: int = 64
    confidence_percentile: float = 0.10
    optimizer: str = "adamw"
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.01
    view_sigma: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "optimizer", OPTIMIZER_ALIASES.get(self.optimizer, self.optimizer))
        if self.lam < 0:
            raise InvalidRange("lambda must be >= 0")
        if self.learning_rate < 0:
            raise InvalidRange("learning_rate must be >= 0")
        if self.steps < 1 or self.n_views < 1:
            raise InvalidRange("steps and n_views must be >= 1")
        if not 0 < self.confidence_percentile <= 1:
            raise InvalidRange("confidence_percentile must lie in (0, 1]")
        if self.optimizer not in OPTIMIZERS:
            raise InvalidRange(f"optimizer must be one of {OPTIMIZERS}")
        if self.view_sigma < 0:
            raise InvalidRange("view_sigma must be >= 0")

    def make_optimizer(self):
        if self.optimizer == "sgd":
            return GradientDescent(self.learning_rate)
        return AdamW(self.learning_rate, self.beta1, self.beta2, self.epsilon, self.weight_decay)


@dataclass(frozen=True)
class LossGrad:
    loss: float
    grad: np.ndarray
    mask: np.ndarray | None = None


def n_confident(n_views: int, percentile: float) -> int:
    # the epsilon keeps 0.1 * 30 from rounding up to 4
    return min(n_views, max(1, math.ceil(percentile * n_views - 1e-9)))


def select_confident(probs: np.ndarray, percentile: float) -> np.ndarray:
    """Indices (ascending) of the lowest-entropy views; ties go to the lower index."""
    h = entropy(probs)
    k = n_confident(probs.shape[0], percentile)
    return np.sort(np.argsort(np.atleast_1d(h), kind="stable")[:k])


def tpt_loss(
    prompt: PromptEmbedding,
    vocab: ClassVocabulary,
    views,
    cfg: SyntheticEncoderConfig,
    tau: float = DEFAULT_TAU,
    confidence_percentile: float = 0.10,
    mask: np.ndarray | None = None,
) -> LossGrad:
    """Entropy of the mean prediction over the most confident views.

    The selected views are returned as ``mask``; passing it back in freezes
    the selection, which is how the gradient treats it.
    """
    v = l2_normalize_rows(np.atleast_2d(np.asarray(views, dtype=np.float64)))
    fwd = TextForward(prompt.tokens, vocab.embeddings, cfg)
    scores = v @ fwd.features.T
    probs = softmax_temperature(scores, tau)
    if mask is None:
        mask = select_confident(probs, confidence_percentile)
    kept = probs[mask]
    k = kept.shape[0]
    p_bar = kept.mean(axis=0)
    loss = entropy(p_bar)
    g_probs = np.broadcast_to(entropy_grad(p_bar) / k, kept.shape)
    g_scores = softmax_backward(kept, g_probs, tau)
    g_feats = g_scores.T @ v[mask]
    return LossGrad(float(loss), fwd.backward(g_feats), mask)


def ctpt_loss(prompt: PromptEmbedding, vocab: ClassVocabulary, cfg: SyntheticEncoderConfig) -> LossGrad:
    """Negative text-feature dispersion and its prompt gradient."""
    fwd = TextForward(prompt.tokens, vocab.embeddings, cfg)
    stats = atfd(fwd.features)
    g = fwd.backward(-atfd_gradient(fwd.features))
    return LossGrad(-stats.atfd, g)


@dataclass(frozen=True)
class StepResult:
    prompt: PromptEmbedding
    tpt_loss: float
    ctpt_loss: float
    grad: np.ndarray = field(repr=False)


def joint_gradient(prompt, vocab, views, cfg, tune: TuningConfig, tau=DEFAULT_TAU):
    lt = tpt_loss(prompt, vocab, views, cfg, tau, tune.confidence_percentile)
    lc = ctpt_loss(prompt, vocab, cfg)
    return lt, lc, lt.grad + tune.lam * lc.grad


def joint_step(
    prompt: PromptEmbedding,
    vocab: ClassVocabulary,
    views,
    cfg: SyntheticEncoderConfig,
    tune: TuningConfig,
    tau: float = DEFAULT_TAU,
    optimizer=None,
) -> StepResult:
    """One update on ``L_tpt + lam * L_ctpt``.

    Without an explicit ``optimizer`` a fresh one is built, so state never
    carries over between calls.
    """
    lt, lc, g = joint_gradient(prompt, vocab, views, cfg, tune, tau)
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradient("joint gradient contains NaN or Inf")
    opt = optimizer if optimizer is not None else tune.make_optimizer()
    new_tokens = opt.step(prompt.tokens, g)
    if not np.all(np.isfinite(new_tokens)):
        raise NonFiniteGradient("optimizer produced non-finite prompt")
    return StepResult(PromptEmbedding(new_tokens), lt.loss, lc.loss, g)


@dataclass(frozen=True)
class Sample:
    latent: np.ndarray
    label: int
    view_seed: int
    index: int = 0


@dataclass(frozen=True)
class EpisodeResult:
    index: int
    record_before: PredictionRecord
    record_after: PredictionRecord
    atfd_before: float
    atfd_after: float
    tpt_loss_trace: tuple
    ctpt_loss_trace: tuple
    view_hash: str
    failed: bool = False


def view_digest(views: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(views).tobytes()).hexdigest()[:16]


def _logits(prompt, vocab, cfg, latent) -> tuple[np.ndarray, float]:
    fwd = TextForward(prompt.tokens, vocab.embeddings, cfg)
    v = latent / np.linalg.norm(latent)
    return v @ fwd.features.T, atfd(fwd.features).atfd


def run_episode(
    sample: Sample,
    prompt_init: PromptEmbedding,
    vocab: ClassVocabulary,
    cfg: SyntheticEncoderConfig,
    tune: TuningConfig,
    tau: float = DEFAULT_TAU,
    tuned: bool = True,
) -> EpisodeResult:
    """Tune a copy of ``prompt_init`` on one sample's views and score the clean view.

    ``tuned=False`` is the zero-shot arm: no update, after equals before.
    """
    logits0, atfd0 = _logits(prompt_init, vocab, cfg, sample.latent)
    before = make_record(logits0, tau, sample.label)
    views = augment(sample.latent, tune.n_views, sample.view_seed, tune.view_sigma)
    digest = view_digest(views)
    if not tuned:
        return EpisodeResult(sample.index, before, before, atfd0, atfd0, (), (), digest)
    opt = tune.make_optimizer()
    prompt = prompt_init
    tpt_trace, ctpt_trace = [], []
    try:
        for _ in range(tune.steps):
            step = joint_step(prompt, vocab, views, cfg, tune, tau, optimizer=opt)
            prompt = step.prompt
            tpt_trace.append(step.tpt_loss)
            ctpt_trace.append(step.ctpt_loss)
        logits1, atfd1 = _logits(prompt, vocab, cfg, sample.latent)
        after = make_record(logits1, tau, sample.label)
    except (NonFiniteGradient, FloatingPointError):
        pad = [math.nan] * (tune.steps - len(tpt_trace))
        return EpisodeResult(
            sample.index, before, before, atfd0, atfd0,
            tuple(tpt_trace + pad), tuple(ctpt_trace + pad), digest, failed=True,
        )
    return EpisodeResult(sample.index, before, after, atfd0, atfd1, tuple(tpt_trace), tuple(ctpt_trace), digest)


def samples_from_batch(batch: SampleBatch) -> list[Sample]:
    return [
        Sample(batch.latents[i], int(batch.labels[i]), derive_seed(batch.seed, i), i)
        for i in range(len(batch))
    ]


def resolve_threads(threads: int | None = None) -> int:
    if threads is not None:
        return max(1, int(threads))
    env = os.environ.get("CALTUNE_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _map(fn, items, threads: int):
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


@dataclass
class ArmResult:
    name: str
    report: CalibrationReport
    mean_atfd: float
    episodes: list = field(repr=False)
    n_failed: int = 0


@dataclass
class ExperimentResult:
    arms: dict
    tune: TuningConfig
    tau: float
    n_bins: int

    def table(self) -> list[dict]:
        """Per-episode rows, one per (episode, arm), ordered by episode then arm."""
        rows = []
        n = len(next(iter(self.arms.values())).episodes)
        for i in range(n):
            for name, arm in self.arms.items():
                ep = arm.episodes[i]
                rows.append(
                    {
                        "episode": ep.index,
                        "arm": name,
                        "label": ep.record_before.label,
                        "pred_before": ep.record_before.predicted,
                        "conf_before": ep.record_before.confidence,
                        "pred_after": ep.record_after.predicted,
                        "conf_after": ep.record_after.confidence,
                        "atfd_before": ep.atfd_before,
                        "atfd_after": ep.atfd_after,
                        "failed": int(ep.failed),
                        "view_hash": ep.view_hash,
                    }
                )
        return rows

    def summary(self) -> dict:
        out = {}
        for name, arm in self.arms.items():
            s = arm.report.summary()
            s["mean_atfd"] = arm.mean_atfd
            s["n_failed"] = arm.n_failed
            out[name] = s
        return out


def _ensemble_episode(sample, prompt_inits, vocab, cfg, tune, tau) -> EpisodeResult:
    results = [run_episode(sample, p, vocab, cfg, tune, tau) for p in prompt_inits]
    before = make_record(np.mean([r.record_before.logits for r in results], axis=0), tau, sample.label)
    after = make_record(np.mean([r.record_after.logits for r in results], axis=0), tau, sample.label)
    return EpisodeResult(
        sample.index,
        before,
        after,
        float(np.mean([r.atfd_before for r in results])),
        float(np.mean([r.atfd_after for r in results])),
        tuple(np.mean([r.tpt_loss_trace for r in results], axis=0)),
        tuple(np.mean([r.ctpt_loss_trace for r in results], axis=0)),
        results[0].view_hash,
        failed=any(r.failed for r in results),
    )


def run_arm(
    name: str,
    samples: Sequence[Sample],
    prompt_inits: Sequence[PromptEmbedding],
    vocab: ClassVocabulary,
    cfg: SyntheticEncoderConfig,
    tune: TuningConfig,
    tau: float = DEFAULT_TAU,
    n_bins: int = DEFAULT_BINS,
    threads: int | None = None,
) -> ArmResult:
    if name not in ARMS:
        raise InvalidRange(f"unknown arm {name!r}; choose from {ARMS}")
    prompt_inits = list(prompt_inits)
    if name == "ensemble":
        fn = lambda s: _ensemble_episode(s, prompt_inits, vocab, cfg, tune, tau)  # noqa: E731
    else:
        arm_tune = replace(tune, lam=0.0) if name == "tpt" else tune
        tuned = name != "baseline"
        fn = lambda s: run_episode(s, prompt_inits[0], vocab, cfg, arm_tune, tau, tuned)  # noqa: E731
    episodes = _map(fn, list(samples), resolve_threads(threads))
    episodes.sort(key=lambda e: e.index)
    report = ece([e.record_after for e in episodes], n_bins)
    mean_atfd = float(np.mean([e.atfd_after for e in episodes]))
    return ArmResult(name, report, mean_atfd, episodes, sum(e.failed for e in episodes))


def run_experiment(
    batch: SampleBatch,
    prompt_inits: Sequence[PromptEmbedding],
    vocab: ClassVocabulary,
    cfg: SyntheticEncoderConfig,
    tune: TuningConfig,
    tau: float = DEFAULT_TAU,
    arms: Sequence[str] = ("baseline", "tpt", "ctpt"),
    n_bins: int = DEFAULT_BINS,
    threads: int | None = None,
) -> ExperimentResult:
    """Score every requested arm on the same episodes (same latents, same views).

    ``baseline`` is the untuned prompt, ``tpt`` the entropy loss alone,
    ``ctpt`` the joint loss at ``tune.lam`` and ``ensemble`` the joint loss
    applied to every prompt in ``prompt_inits`` with logits averaged.
    """
    if len(batch) == 0:
        raise InvalidRange("empty dataset")
    if not prompt_inits:
        raise InvalidRange("need at least one initial prompt")
    samples = samples_from_batch(batch)
    results = {
        name: run_arm(name, samples, prompt_inits, vocab, cfg, tune, tau, n_bins, threads) for name in arms
    }
    return ExperimentResult(results, tune, tau, n_bins)


def sweep_lambda(
    batch: SampleBatch,
    prompt_init: PromptEmbedding,
    lambdas: Sequence[float],
    vocab: ClassVocabulary,
    cfg: SyntheticEncoderConfig,
    tune: TuningConfig,
    tau: float = DEFAULT_TAU,
    n_bins: int = DEFAULT_BINS,
    threads: int | None = None,
) -> list[dict]:
    """Accuracy, ECE and mean dispersion of the joint arm for each lambda."""
    lambdas = [float(x) for x in lambdas]
    if len(lambdas) < 2:
        raise InvalidRange("a sweep needs at least two lambda values")
    samples = samples_from_batch(batch)
    rows = []
    for lam in lambdas:
        arm = run_arm("ctpt", samples, [prompt_init], vocab, cfg, replace(tune, lam=lam), tau, n_bins, threads)
        rows.append(
            {
                "lambda": lam,
                "accuracy": arm.report.accuracy,
                "ece": arm.report.ece,
                "mean_atfd": arm.mean_atfd,
            }
        )
    return rows


def pareto_front(rows: Sequence[dict]) -> list[dict]:
    """Rows not dominated in (higher accuracy, lower ECE), sorted by accuracy."""
    front = []
    for r in rows:
        dominated = any(
            o["accuracy"] >= r["accuracy"] and o["ece"] <= r["ece"]
            and (o["accuracy"] > r["accuracy"] or o["ece"] < r["ece"])
            for o in rows
        )
        if not dominated:
            front.append(r)
    return sorted(front, key=lambda r: (r["accuracy"], -r["ece"]))
