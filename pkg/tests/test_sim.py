import numpy as np
import pytest

from caltune.calibration import ece_from_arrays, make_record
from caltune.errors import DimensionMismatch, GenerationFailure, InvalidRange, ZeroVector
from caltune.numeric import grad_check, softmax_temperature
from caltune.sim import (
    ClassVocabulary,
    PromptEmbedding,
    SyntheticEncoderConfig,
    augment,
    default_prompt,
    derive_seed,
    ensemble_logits,
    ensemble_predict,
    ensemble_prompt_set,
    generate_batch,
    generate_vocabulary,
    image_encode,
    make_encoder_config,
    prompt_family,
    random_prompt,
    similarity_logits,
    text_encode,
    text_encode_vjp,
    text_features,
    zero_shot_predict,
)


def small_setup(seed=3, n=6, d=8, sigma=0.1, label_noise=0.0):
    cfg = make_encoder_config(dim=d, prompt_len=3, seed=seed, image_noise_sigma=sigma, label_noise=label_noise)
    vocab = generate_vocabulary(seed, n, d)
    return cfg, vocab


def test_vocabulary_determinism_and_seed_sensitivity():
    a = generate_vocabulary(7, 10, 16)
    b = generate_vocabulary(7, 10, 16)
    c = generate_vocabulary(8, 10, 16)
    np.testing.assert_array_equal(a.embeddings, b.embeddings)
    assert not np.array_equal(a.embeddings, c.embeddings)
    np.testing.assert_allclose(np.linalg.norm(a.embeddings, axis=1), 1.0, atol=1e-12)


def test_vocabulary_min_distance():
    v = generate_vocabulary(0, 50, 16).embeddings
    d = np.linalg.norm(v[:, None] - v[None], axis=2)
    np.fill_diagonal(d, np.inf)
    assert d.min() > 0.1


def test_vocabulary_infeasible_packing():
    with pytest.raises(GenerationFailure):
        generate_vocabulary(0, 1000, 4)


def test_vocabulary_bad_args():
    with pytest.raises(InvalidRange):
        generate_vocabulary(0, 1, 8)
    with pytest.raises(InvalidRange):
        generate_vocabulary(0, 5, 3)


def test_encoder_config_validation():
    w = np.zeros((8, 16))
    with pytest.raises(InvalidRange):
        SyntheticEncoderConfig(3, 1, 0, np.zeros((3, 6)))
    with pytest.raises(InvalidRange):
        SyntheticEncoderConfig(8, 1, 0, w, image_noise_sigma=-0.1)
    with pytest.raises(InvalidRange):
        SyntheticEncoderConfig(8, 1, 0, w, label_noise=0.5)
    with pytest.raises(DimensionMismatch):
        SyntheticEncoderConfig(8, 1, 0, np.zeros((8, 8)))


def test_prompt_embedding_invariants():
    with pytest.raises(DimensionMismatch):
        PromptEmbedding(np.zeros((0, 4)))
    with pytest.raises(InvalidRange):
        PromptEmbedding(np.array([[np.nan, 0.0]]))


def test_text_encode_unit_norm_and_distinct_classes():
    cfg, vocab = small_setup()
    rng = np.random.default_rng(0)
    for _ in range(50):
        p = PromptEmbedding(rng.standard_normal((3, 8)))
        feats = text_features(p, vocab, cfg)
        np.testing.assert_allclose(np.linalg.norm(feats, axis=1), 1.0, atol=1e-9)
        assert np.linalg.norm(feats[0] - feats[1]) > 0
        np.testing.assert_allclose(text_encode(p, vocab.embeddings[2], cfg), feats[2], atol=1e-15)


def test_text_encode_dimension_mismatch():
    cfg, vocab = small_setup()
    with pytest.raises(DimensionMismatch):
        text_encode(PromptEmbedding(np.ones((3, 5))), vocab.embeddings[0], cfg)
    with pytest.raises(DimensionMismatch):
        text_encode(PromptEmbedding(np.ones((3, 8))), np.ones(5), cfg)


def test_text_encode_vjp_matches_finite_differences():
    worst = 0.0
    for k in range(50):
        rng = np.random.default_rng(100 + k)
        cfg, vocab = small_setup(seed=k, d=int(rng.integers(4, 10)))
        shape = (cfg.prompt_len, cfg.dim)
        p = rng.standard_normal(shape) * 0.3
        e = vocab.embeddings[int(rng.integers(vocab.n_classes))]
        w = rng.standard_normal(cfg.dim)

        def f(x):
            return float(w @ text_encode(PromptEmbedding(x.reshape(shape)), e, cfg))

        g = text_encode_vjp(PromptEmbedding(p), e, cfg, w)
        worst = max(worst, grad_check(f, p.ravel(), g.ravel()))
    assert worst < 1e-4


def test_image_encode():
    v = generate_vocabulary(1, 5, 8).embeddings
    np.testing.assert_allclose(image_encode(v[0]), v[0], atol=1e-15)
    rng = np.random.default_rng(2)
    x = rng.standard_normal(8) * 40
    assert abs(np.linalg.norm(image_encode(x)) - 1) < 1e-9
    with pytest.raises(ZeroVector):
        image_encode(np.zeros(8))


def test_image_encode_small_noise_keeps_nearest_class():
    vocab = generate_vocabulary(4, 20, 32)
    rng = np.random.default_rng(4)
    for y in range(20):
        for _ in range(10):
            f = image_encode(vocab.embeddings[y] + 0.1 * rng.standard_normal(32) / np.sqrt(32))
            assert int(np.argmax(vocab.embeddings @ f)) == y


def test_generate_batch_determinism_and_labels():
    cfg, vocab = small_setup(sigma=0.2, label_noise=0.3)
    a = generate_batch(vocab, cfg, 100, 9)
    b = generate_batch(vocab, cfg, 100, 9)
    np.testing.assert_array_equal(a.latents, b.latents)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert a.labels.min() >= 0 and a.labels.max() < vocab.n_classes
    with pytest.raises(InvalidRange):
        generate_batch(vocab, cfg, 0, 9)


def test_separable_limit_is_perfect_and_calibrated():
    for seed in (1, 2, 3):
        for n in (5, 20, 50):
            cfg = make_encoder_config(seed=seed, image_noise_sigma=0.0, label_noise=0.0)
            vocab = generate_vocabulary(seed, n, cfg.dim)
            batch = generate_batch(vocab, cfg, 200, seed)
            probs = softmax_temperature(similarity_logits(text_features(default_prompt(cfg), vocab, cfg), batch.latents), 0.01)
            pred = probs.argmax(axis=1)
            rep = ece_from_arrays(probs.max(axis=1), pred == batch.labels)
            assert rep.accuracy == 1.0
            assert rep.ece < 0.05


def test_label_noise_half_with_two_classes():
    # half the labels are redrawn and half of those land on the true class again
    d = 8
    cfg = make_encoder_config(dim=d, seed=5, image_noise_sigma=0.0, label_noise=0.4999999)
    vocab = ClassVocabulary(np.eye(d)[:2], 0)
    batch = generate_batch(vocab, cfg, 20000, 5)
    truth = np.argmax(batch.latents @ vocab.embeddings.T, axis=1)
    assert abs(np.mean(truth == batch.labels) - 0.75) < 0.03


def test_augment():
    x = np.arange(6, dtype=float) + 1
    np.testing.assert_array_equal(augment(x, 1, 0), [x])
    np.testing.assert_array_equal(augment(x, 5, 0, view_sigma=0.0), np.tile(x, (5, 1)))
    a = augment(x, 8, 3, 0.1)
    np.testing.assert_array_equal(a[0], x)
    assert not np.array_equal(a[1], x)
    np.testing.assert_array_equal(a, augment(x, 8, 3, 0.1))
    with pytest.raises(InvalidRange):
        augment(x, 0, 3)


def test_zero_shot_separable_case():
    cfg = make_encoder_config(seed=3)
    vocab = generate_vocabulary(3, 20, cfg.dim)
    p = default_prompt(cfg)
    for y in range(20):
        rec = zero_shot_predict(p, vocab, vocab.embeddings[y], cfg, 0.01, y)
        assert rec.predicted == y


def test_zero_shot_symmetric_pair():
    # identity mixing with no prompt term: features are the class embeddings
    d = 4
    w = np.hstack([np.zeros((d, d)), np.eye(d)])
    cfg = SyntheticEncoderConfig(d, 1, 0, w)
    vocab = ClassVocabulary(np.eye(d)[:2], 0)
    rec = zero_shot_predict(PromptEmbedding(np.ones((1, d))), vocab, np.array([1.0, 1.0, 0.0, 0.0]), cfg, 0.01, 0)
    assert rec.confidence == pytest.approx(0.5, abs=1e-12)


def test_zero_shot_record_invariants():
    cfg = make_encoder_config(seed=2)
    vocab = generate_vocabulary(2, 20, cfg.dim)
    batch = generate_batch(vocab, cfg, 1000, 2)
    p = default_prompt(cfg)
    for x, y in zip(batch.latents, batch.labels):
        rec = zero_shot_predict(p, vocab, x, cfg, 0.01, int(y))
        assert abs(rec.probs.sum() - 1) < 1e-9
        assert rec.confidence == rec.probs[rec.predicted] == rec.probs.max()
        assert 1 / 20 - 1e-12 <= rec.confidence <= 1


def test_ensemble_predict():
    cfg, vocab = small_setup()
    rng = np.random.default_rng(8)
    x = rng.standard_normal(8)
    p1 = random_prompt(1, 3, 8, 0.3)
    p2 = random_prompt(2, 3, 8, 0.3)
    single = zero_shot_predict(p1, vocab, x, cfg, 0.01, 0)
    np.testing.assert_array_equal(ensemble_predict([p1], vocab, x, cfg, 0.01, 0).probs, single.probs)
    np.testing.assert_allclose(ensemble_predict([p1, p1], vocab, x, cfg, 0.01, 0).probs, single.probs, atol=1e-15)
    with pytest.raises(InvalidRange):
        ensemble_logits([], vocab, x, cfg)


def test_ensemble_averages_logits_before_softmax():
    cfg, vocab = small_setup()
    x = np.random.default_rng(9).standard_normal(8)
    p1 = random_prompt(1, 3, 8, 2.0)
    p2 = random_prompt(2, 3, 8, 0.1)
    logit_avg = ensemble_predict([p1, p2], vocab, x, cfg, 0.01, 0).probs
    prob_avg = (zero_shot_predict(p1, vocab, x, cfg, 0.01).probs + zero_shot_predict(p2, vocab, x, cfg, 0.01).probs) / 2
    assert np.max(np.abs(logit_avg - prob_avg)) > 1e-6


def test_prompt_family_and_ensemble_sets():
    cfg = make_encoder_config()
    fam = prompt_family(cfg, 40)
    assert len(fam) == 40 and all(p.shape == (cfg.prompt_len, cfg.dim) for p in fam)
    norms = [np.linalg.norm(p.tokens.mean(axis=0)) for p in fam]
    assert max(norms) / min(norms) > 3
    again = prompt_family(cfg, 40)
    assert all(np.array_equal(a.tokens, b.tokens) for a, b in zip(fam, again))
    ens = ensemble_prompt_set(cfg, 4)
    np.testing.assert_array_equal(ens[0].tokens, default_prompt(cfg).tokens)
    assert len({p.tokens.tobytes() for p in ens}) == 4
    with pytest.raises(InvalidRange):
        prompt_family(cfg, 5, scale_range=(2.0, 1.0))


def test_prompt_sensitivity_ece_range_exceeds_accuracy_range():
    cfg = make_encoder_config()
    vocab = generate_vocabulary(1, 20, cfg.dim)
    batch = generate_batch(vocab, cfg, 500, 1)
    accs, eces = [], []
    for p in prompt_family(cfg, 40):
        probs = softmax_temperature(similarity_logits(text_features(p, vocab, cfg), batch.latents), 0.01)
        rep = ece_from_arrays(probs.max(axis=1), probs.argmax(axis=1) == batch.labels)
        accs.append(rep.accuracy)
        eces.append(rep.ece)
    accs, eces = np.array(accs), np.array(eces)
    keep = accs >= accs.max() - 0.03 - 1e-12
    assert np.ptp(eces[keep]) > 2 * np.ptp(accs[keep])


def test_derive_seed_stable():
    assert derive_seed(1, 2) == derive_seed(1, 2)
    assert derive_seed(1, 2) != derive_seed(1, 3)
    assert derive_seed(1, 2) != derive_seed(2, 2)


def test_make_record_from_pipeline_matches_batched_logits():
    cfg, vocab = small_setup()
    x = np.random.default_rng(1).standard_normal((3, 8))
    p = default_prompt(cfg)
    batched = similarity_logits(text_features(p, vocab, cfg), x)
    for i in range(3):
        np.testing.assert_allclose(zero_shot_predict(p, vocab, x[i], cfg).logits, batched[i], atol=1e-15)
        assert make_record(batched[i], 0.01, 0).predicted == int(np.argmax(batched[i]))
