"""Seeded synthetic two-tower encoder pair standing in for CLIP.

Text side: ``t = normalize(W_t @ [mean_pool(prompt); class_embedding])`` with
``W_t = [A | B]``. ``B`` is a perturbed identity so text features land near
their class embeddings; ``A`` injects the shared prompt offset that moves
every class feature at once.

Image side: latents live directly in the shared space; the encoder only
normalizes them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .calibration import PredictionRecord, make_record
from .errors import DimensionMismatch, GenerationFailure, InvalidRange, ZeroVector
from .numeric import l2_normalize, l2_normalize_rows

MIN_CLASS_DISTANCE = 0.1
MAX_RESAMPLES = 1000
DEFAULT_TAU = 0.01
DEFAULT_POOLED_NORM = 0.1


def derive_seed(base: int, *keys: int) -> int:
    """Stable 64-bit child seed for ``(base, *keys)``."""
    ss = np.random.SeedSequence([int(base) & 0xFFFFFFFFFFFFFFFF, *[int(k) for k in keys]])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def rng_for(base: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(base) & 0xFFFFFFFFFFFFFFFF, *[int(k) for k in keys]]))


# stream tags keep the different consumers of one seed independent
_VOCAB, _MIXING, _PROMPT, _BATCH, _VIEWS = 1, 2, 3, 4, 5


@dataclass(frozen=True)
class ClassVocabulary:
    embeddings: np.ndarray  # (N, D), unit rows
    seed: int = 0

    @property
    def n_classes(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


@dataclass(frozen=True)
class SyntheticEncoderConfig:
    dim: int
    prompt_len: int
    seed: int
    text_mixing: np.ndarray = field(repr=False)  # (D, 2D)
    image_noise_sigma: float = 0.25
    label_noise: float = 0.2

    def __post_init__(self):
        if self.dim < 4:
            raise InvalidRange(f"embedding dim must be >= 4, got {self.dim}")
        if self.prompt_len < 1:
            raise InvalidRange("prompt length must be >= 1")
        if self.image_noise_sigma < 0:
            raise InvalidRange("image_noise_sigma must be >= 0")
        if not 0 <= self.label_noise < 0.5:
            raise InvalidRange("label_noise must lie in [0, 0.5)")
        if self.text_mixing.shape != (self.dim, 2 * self.dim):
            raise DimensionMismatch(f"text_mixing must be ({self.dim}, {2 * self.dim})")

    @property
    def prompt_block(self) -> np.ndarray:
        return self.text_mixing[:, : self.dim]

    @property
    def class_block(self) -> np.ndarray:
        return self.text_mixing[:, self.dim :]


@dataclass(frozen=True)
class PromptEmbedding:
    tokens: np.ndarray  # (L, D)

    def __post_init__(self):
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 1:
            raise DimensionMismatch(f"prompt tokens must be (L, D) with L >= 1, got {self.tokens.shape}")
        if not np.all(np.isfinite(self.tokens)):
            raise InvalidRange("prompt tokens must be finite")

    @property
    def shape(self) -> tuple[int, int]:
        return self.tokens.shape


@dataclass(frozen=True)
class SampleBatch:
    latents: np.ndarray  # (M, D)
    labels: np.ndarray  # (M,)
    seed: int

    def __len__(self) -> int:
        return self.labels.shape[0]


def generate_vocabulary(seed: int, n_classes: int, dim: int) -> ClassVocabulary:
    """``n_classes`` unit vectors uniform on the sphere, pairwise farther apart than 0.1."""
    if n_classes < 2 or dim < 4:
        raise InvalidRange(f"need N >= 2 and D >= 4, got N={n_classes}, D={dim}")
    rng = rng_for(seed, _VOCAB)
    for _ in range(MAX_RESAMPLES):
        e = l2_normalize_rows(rng.standard_normal((n_classes, dim)))
        gram = np.clip(e @ e.T, -1.0, 1.0)
        np.fill_diagonal(gram, -1.0)
        # |a - b|^2 = 2 - 2 a.b for unit vectors
        if 2.0 - 2.0 * gram.max() > MIN_CLASS_DISTANCE**2:
            e.setflags(write=False)
            return ClassVocabulary(e, int(seed))
    raise GenerationFailure(
        f"no {n_classes} classes in R^{dim} separated by {MIN_CLASS_DISTANCE} after {MAX_RESAMPLES} draws"
    )


def make_encoder_config(
    dim: int = 64,
    prompt_len: int = 4,
    seed: int = 1,
    image_noise_sigma: float = 0.15,
    label_noise: float = 0.2,
    prompt_gain: float = 80.0,
    class_jitter: float = 1.0,
) -> SyntheticEncoderConfig:
    """Draw ``W_t = [A | B]`` from ``seed``.

    ``A`` is ``prompt_gain`` times a random orthogonal matrix, so the shared
    offset has norm ``prompt_gain * |mean_pool(prompt)|`` regardless of its
    direction. ``B`` is identity plus gaussian jitter of scale ``class_jitter``.

    With the default prompt (pooled norm about 0.1) the offset is about 8
    times longer than a class term. Text features then sit in a narrow cone
    around the offset, which is the regime where zero-shot predictions are
    over-confident and prompt tuning sharpens them further.
    """
    if prompt_gain <= 0 or class_jitter < 0:
        raise InvalidRange("prompt_gain must be > 0 and class_jitter >= 0")
    rng = rng_for(seed, _MIXING)
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    a = prompt_gain * q
    b = np.eye(dim) + class_jitter * rng.standard_normal((dim, dim)) / np.sqrt(dim)
    w = np.hstack([a, b])
    w.setflags(write=False)
    return SyntheticEncoderConfig(dim, prompt_len, int(seed), w, float(image_noise_sigma), float(label_noise))


def token_scale(prompt_len: int, dim: int, pooled_norm: float = DEFAULT_POOLED_NORM) -> float:
    """Per-entry std that gives the mean-pooled prompt an expected norm of about ``pooled_norm``."""
    return pooled_norm * np.sqrt(prompt_len / dim)


def random_prompt(seed: int, prompt_len: int, dim: int, scale: float = 1.0) -> PromptEmbedding:
    """Gaussian prompt tokens with per-entry std ``scale``."""
    rng = rng_for(seed, _PROMPT)
    return PromptEmbedding(scale * rng.standard_normal((prompt_len, dim)))


def default_prompt(cfg: SyntheticEncoderConfig, pooled_norm: float = DEFAULT_POOLED_NORM) -> PromptEmbedding:
    """The fixed initial prompt for an encoder config (the hand-written prompt analogue)."""
    return random_prompt(cfg.seed, cfg.prompt_len, cfg.dim, token_scale(cfg.prompt_len, cfg.dim, pooled_norm))


def prompt_family(
    cfg: SyntheticEncoderConfig,
    n_prompts: int = 40,
    base_seed: int = 1000,
    scale_range: tuple[float, float] = (0.5, 4.0),
    pooled_norm: float = DEFAULT_POOLED_NORM,
) -> list[PromptEmbedding]:
    """Seeded random prompts of equal shape whose magnitudes vary log-uniformly.

    Prompt ``j`` uses seed ``base_seed + j``: a scale multiplier drawn from
    ``exp(U(ln lo, ln hi))``, then gaussian tokens. Varying magnitude as well
    as direction matters here: text-feature spread and confidence both track
    the prompt norm, so a direction-only family barely moves either.
    """
    lo, hi = scale_range
    if not 0 < lo <= hi:
        raise InvalidRange(f"scale_range must satisfy 0 < lo <= hi, got {scale_range}")
    if n_prompts < 1:
        raise InvalidRange("n_prompts must be >= 1")
    base = token_scale(cfg.prompt_len, cfg.dim, pooled_norm)
    out = []
    for j in range(n_prompts):
        rng = rng_for(base_seed + j, _PROMPT)
        mult = np.exp(rng.uniform(np.log(lo), np.log(hi)))
        out.append(PromptEmbedding(mult * base * rng.standard_normal((cfg.prompt_len, cfg.dim))))
    return out


def ensemble_prompt_set(
    cfg: SyntheticEncoderConfig, n_prompts: int = 4, pooled_norm: float = DEFAULT_POOLED_NORM
) -> list[PromptEmbedding]:
    """The default prompt followed by ``n_prompts - 1`` other initializations of the same scale."""
    if n_prompts < 1:
        raise InvalidRange("n_prompts must be >= 1")
    scale = token_scale(cfg.prompt_len, cfg.dim, pooled_norm)
    out = [default_prompt(cfg, pooled_norm)]
    for j in range(1, n_prompts):
        out.append(random_prompt(derive_seed(cfg.seed, j), cfg.prompt_len, cfg.dim, scale))
    return out


class TextForward:
    """Text features for all classes under one prompt, with a cached backward pass."""

    def __init__(self, tokens: np.ndarray, class_embeddings: np.ndarray, cfg: SyntheticEncoderConfig):
        tokens = np.asarray(tokens, dtype=np.float64)
        e = np.asarray(class_embeddings, dtype=np.float64)
        if tokens.ndim != 2 or tokens.shape[1] != cfg.dim:
            raise DimensionMismatch(f"prompt tokens {tokens.shape} do not match dim {cfg.dim}")
        if e.ndim != 2 or e.shape[1] != cfg.dim:
            raise DimensionMismatch(f"class embeddings {e.shape} do not match dim {cfg.dim}")
        self.cfg = cfg
        self.prompt_len = tokens.shape[0]
        pooled = tokens.mean(axis=0)
        u = cfg.prompt_block @ pooled + e @ cfg.class_block.T
        self.norms = np.linalg.norm(u, axis=1, keepdims=True)
        if np.any(~(self.norms > 1e-12)):
            raise ZeroVector("text pre-activation vanished; cannot normalize")
        self.features = u / self.norms

    def backward(self, grad_features: np.ndarray) -> np.ndarray:
        """Map d loss / d features (N, D) to d loss / d prompt tokens (L, D)."""
        g = np.asarray(grad_features, dtype=np.float64)
        t = self.features
        g_u = (g - np.sum(g * t, axis=1, keepdims=True) * t) / self.norms
        g_pooled = self.cfg.prompt_block.T @ g_u.sum(axis=0)
        return np.tile(g_pooled / self.prompt_len, (self.prompt_len, 1))


def text_features(prompt: PromptEmbedding, vocab: ClassVocabulary, cfg: SyntheticEncoderConfig) -> np.ndarray:
    return TextForward(prompt.tokens, vocab.embeddings, cfg).features


def text_encode(prompt: PromptEmbedding, class_embedding, cfg: SyntheticEncoderConfig) -> np.ndarray:
    e = np.asarray(class_embedding, dtype=np.float64).reshape(1, -1)
    return TextForward(prompt.tokens, e, cfg).features[0]


def text_encode_vjp(prompt: PromptEmbedding, class_embedding, cfg: SyntheticEncoderConfig, cotangent) -> np.ndarray:
    """``J^T cotangent`` for the prompt-token Jacobian of :func:`text_encode`."""
    e = np.asarray(class_embedding, dtype=np.float64).reshape(1, -1)
    fwd = TextForward(prompt.tokens, e, cfg)
    return fwd.backward(np.asarray(cotangent, dtype=np.float64).reshape(1, -1))


def image_encode(latent, cfg: SyntheticEncoderConfig | None = None) -> np.ndarray:
    latent = np.asarray(latent, dtype=np.float64)
    if cfg is not None and latent.shape[-1] != cfg.dim:
        raise DimensionMismatch(f"latent has dim {latent.shape[-1]}, encoder expects {cfg.dim}")
    if latent.ndim == 1:
        return l2_normalize(latent)
    return l2_normalize_rows(latent)


def generate_batch(vocab: ClassVocabulary, cfg: SyntheticEncoderConfig, n_samples: int, seed: int) -> SampleBatch:
    """Noisy latents around their class embeddings; a ``label_noise`` fraction get a uniformly redrawn label."""
    if n_samples < 1:
        raise InvalidRange("batch size must be >= 1")
    if vocab.dim != cfg.dim:
        raise DimensionMismatch(f"vocabulary dim {vocab.dim} != encoder dim {cfg.dim}")
    rng = rng_for(seed, _BATCH)
    n = vocab.n_classes
    true = rng.integers(0, n, size=n_samples)
    latents = vocab.embeddings[true] + cfg.image_noise_sigma * rng.standard_normal((n_samples, cfg.dim))
    flip = rng.random(n_samples) < cfg.label_noise
    redraw = rng.integers(0, n, size=n_samples)
    labels = np.where(flip, redraw, true)
    latents.setflags(write=False)
    labels.setflags(write=False)
    return SampleBatch(latents, labels, int(seed))


def augment(latent, n_views: int, seed: int, view_sigma: float = 0.05) -> np.ndarray:
    """``(n_views, D)`` array; row 0 is the untouched latent, the rest add gaussian noise."""
    if n_views < 1:
        raise InvalidRange("n_views must be >= 1")
    latent = np.asarray(latent, dtype=np.float64)
    views = np.repeat(latent[None, :], n_views, axis=0)
    if n_views > 1 and view_sigma > 0:
        rng = rng_for(seed, _VIEWS)
        views[1:] += view_sigma * rng.standard_normal((n_views - 1, latent.shape[0]))
    return views


def similarity_logits(text_feats: np.ndarray, image_latents) -> np.ndarray:
    """Cosine similarities; ``(N,)`` for one latent, ``(n, N)`` for a stack."""
    v = image_encode(image_latents)
    return v @ text_feats.T


def zero_shot_predict(
    prompt: PromptEmbedding,
    vocab: ClassVocabulary,
    image_latent,
    cfg: SyntheticEncoderConfig,
    tau: float = DEFAULT_TAU,
    label: int = 0,
) -> PredictionRecord:
    logits = similarity_logits(text_features(prompt, vocab, cfg), image_latent)
    return make_record(logits, tau, label)


def ensemble_logits(prompts, vocab: ClassVocabulary, image_latent, cfg: SyntheticEncoderConfig) -> np.ndarray:
    prompts = list(prompts)
    if not prompts:
        raise InvalidRange("ensemble needs at least one prompt")
    stack = [similarity_logits(text_features(p, vocab, cfg), image_latent) for p in prompts]
    return np.mean(stack, axis=0)


def ensemble_predict(
    prompts,
    vocab: ClassVocabulary,
    image_latent,
    cfg: SyntheticEncoderConfig,
    tau: float = DEFAULT_TAU,
    label: int = 0,
) -> PredictionRecord:
    """Average logits across prompts, then apply a single softmax."""
    return make_record(ensemble_logits(prompts, vocab, image_latent, cfg), tau, label)
