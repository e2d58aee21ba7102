"""Run a configured simulation and write its result bundle."""

from __future__ import annotations

import datetime as _dt
from pathlib import Path

import numpy as np

from . import __version__
from .calibration import ece_from_arrays
from .config import ExperimentConfig
from .dispersion import atfd, correlate_prompt_family
from .errors import InsufficientSurvivors
from .fileio import EmbeddingSet, atomic_write, csv_text, dict_rows_csv, embeddings_document, json_text, sha256_file
from .numeric import softmax_temperature
from .sim import (
    ensemble_prompt_set,
    generate_batch,
    generate_vocabulary,
    prompt_family,
    similarity_logits,
    text_features,
)
from .tpt import pareto_front, run_experiment, sweep_lambda

EPISODE_COLUMNS = (
    "episode", "arm", "label", "pred_before", "conf_before", "pred_after", "conf_after",
    "atfd_before", "atfd_after", "failed", "view_hash",
)


def evaluate_prompts(prompts, ids, vocab, batch, cfg, tau, n_bins) -> list[dict]:
    """Zero-shot accuracy, ECE and ATFD of each prompt over the whole batch."""
    rows = []
    for pid, p in zip(ids, prompts):
        feats = text_features(p, vocab, cfg)
        probs = softmax_temperature(similarity_logits(feats, batch.latents), tau)
        pred = np.argmax(probs, axis=1)
        rep = ece_from_arrays(probs[np.arange(len(pred)), pred], pred == batch.labels, n_bins)
        rows.append(
            {
                "prompt_id": pid,
                "prompt_norm": float(np.linalg.norm(p.tokens.mean(axis=0))),
                "accuracy": rep.accuracy,
                "ece": rep.ece,
                "mean_confidence": rep.mean_confidence,
                "atfd": atfd(feats).atfd,
            }
        )
    return rows


def run_simulation(config: ExperimentConfig, sweep=None, threads=None, out_dir=None) -> dict:
    """Execute ``config`` and write every artifact; returns ``{name: path}``.

    ``sweep`` overrides the config's lambda list. Data files are pure
    functions of the config; only MANIFEST.json carries a timestamp.
    """
    doc = config.doc
    cfg = config.encoder_config()
    tune = config.tuning_config()
    tau = float(doc["tau"])
    n_bins = doc["n_bins"]
    seeds = doc["seeds"]
    vocab = generate_vocabulary(seeds["vocabulary"], doc["n_classes"], cfg.dim)
    batch = generate_batch(vocab, cfg, doc["n_samples"], seeds["batch"])
    inits = ensemble_prompt_set(cfg, doc["ensemble_size"], doc["prompt_pooled_norm"])

    out = Path(out_dir) if out_dir is not None else config.output_dir
    files: dict[str, Path] = {}

    def emit(name, text):
        path = out / name
        atomic_write(path, text)
        files[name] = path

    res = run_experiment(batch, inits, vocab, cfg, tune, tau, doc["arms"], n_bins, threads)
    report = {"config_hash": config.hash(), "n_episodes": len(batch), "arms": res.summary()}

    emit("episodes.csv", dict_rows_csv(res.table(), EPISODE_COLUMNS))
    rel_rows = []
    for name, arm in res.arms.items():
        for lo, hi, count, acc, conf in arm.report.bins.rows():
            rel_rows.append((name, lo, hi, count, acc, conf))
    emit("reliability.csv", csv_text(("arm", "bin_lo", "bin_hi", "count", "acc", "conf"), rel_rows))

    sets = [EmbeddingSet("init", text_features(inits[0], vocab, cfg))]
    lambdas = sweep if sweep is not None else doc["sweep_lambda"]
    if lambdas is not None:
        rows = sweep_lambda(batch, inits[0], lambdas, vocab, cfg, tune, tau, n_bins, threads)
        front = {id(r) for r in pareto_front(rows)}
        for r in rows:
            r["pareto"] = int(id(r) in front)
        emit("sweep.csv", dict_rows_csv(rows, ("lambda", "accuracy", "ece", "mean_atfd", "pareto")))

    fam = doc["prompt_family"]
    if fam is not None:
        prompts = prompt_family(cfg, fam["n_prompts"], fam["base_seed"], tuple(fam["scale_range"]), doc["prompt_pooled_norm"])
        ids = [f"family_{j:03d}" for j in range(len(prompts))]
        rows = evaluate_prompts(prompts, ids, vocab, batch, cfg, tau, n_bins)
        emit("family.csv", dict_rows_csv(rows))
        sets += [EmbeddingSet(pid, text_features(p, vocab, cfg)) for pid, p in zip(ids, prompts)]
        try:
            c = correlate_prompt_family(rows, fam["accuracy_band"])
            report["family_correlation"] = {
                "pearson_r": c.pearson_r,
                "spearman_rho": c.spearman_rho,
                "retained_count": c.retained_count,
            }
        except InsufficientSurvivors as exc:
            report["family_correlation"] = {"error": str(exc)}

    emit("embeddings.json", json_text(embeddings_document(sets)))
    emit("report.json", json_text(report))

    manifest = {
        "caltune_version": __version__,
        "config_hash": config.hash(),
        "config": doc,
        "created_utc": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "files": {name: sha256_file(path) for name, path in sorted(files.items())},
    }
    emit("MANIFEST.json", json_text(manifest))
    return files
