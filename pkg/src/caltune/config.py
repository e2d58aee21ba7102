"""Experiment configuration: JSON schema, defaults, and object construction.

A config document fully determines a simulation. Validation happens before
anything runs; errors carry the JSON pointer of the offending value.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import jsonschema

from .calibration import DEFAULT_BINS
from .errors import ConfigError
from .sim import DEFAULT_POOLED_NORM, DEFAULT_TAU
from .tpt import ARMS, OPTIMIZER_ALIASES, OPTIMIZERS

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_nonneg = {"type": "number", "minimum": 0}
_posint = {"type": "integer", "minimum": 1}
_seed = {"type": "integer", "minimum": 0, "maximum": 2**64 - 1}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


SCHEMA = _obj(
    {
        "encoder": _obj(
            {
                "dim": {"type": "integer", "minimum": 4},
                "prompt_len": _posint,
                "image_noise_sigma": _nonneg,
                "label_noise": {"type": "number", "minimum": 0, "exclusiveMaximum": 0.5},
                "prompt_gain": _pos,
                "class_jitter": _nonneg,
            }
        ),
        "tuning": _obj(
            {
                "lambda": _nonneg,
                "learning_rate": _nonneg,
                "steps": _posint,
                "n_views": _posint,
                "confidence_percentile": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "optimizer": {"enum": list(OPTIMIZERS) + list(OPTIMIZER_ALIASES)},
                "beta1": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "beta2": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "epsilon": _pos,
                "weight_decay": _nonneg,
                "view_sigma": _nonneg,
            }
        ),
        "n_classes": {"type": "integer", "minimum": 2},
        "n_samples": _posint,
        "tau": _pos,
        "n_bins": _posint,
        "seeds": _obj({"encoder": _seed, "vocabulary": _seed, "batch": _seed}),
        "prompt_pooled_norm": _pos,
        "arms": {"type": "array", "items": {"enum": list(ARMS)}, "minItems": 1, "uniqueItems": True},
        "ensemble_size": _posint,
        "sweep_lambda": {"type": "array", "items": _nonneg, "minItems": 2},
        "prompt_family": _obj(
            {
                "n_prompts": {"type": "integer", "minimum": 3},
                "base_seed": _seed,
                "scale_range": {"type": "array", "items": _pos, "minItems": 2, "maxItems": 2},
                "accuracy_band": _nonneg,
            }
        ),
        "output": _obj({"dir": {"type": "string", "minLength": 1}}),
    }
)

DEFAULTS = {
    "encoder": {
        "dim": 64,
        "prompt_len": 4,
        "image_noise_sigma": 0.15,
        "label_noise": 0.2,
        "prompt_gain": 80.0,
        "class_jitter": 1.0,
    },
    "tuning": {
        "lambda": 50.0,
        "learning_rate": 0.005,
        "steps": 1,
        "n_views": 64,
        "confidence_percentile": 0.10,
        "optimizer": "adamw",
        "beta1": 0.9,
        "beta2": 0.999,
        "epsilon": 1e-8,
        "weight_decay": 0.01,
        "view_sigma": 0.05,
    },
    "n_classes": 20,
    "n_samples": 500,
    "tau": DEFAULT_TAU,
    "n_bins": DEFAULT_BINS,
    "seeds": {"encoder": 1, "vocabulary": 1, "batch": 1},
    "prompt_pooled_norm": DEFAULT_POOLED_NORM,
    "arms": ["baseline", "tpt", "ctpt"],
    "ensemble_size": 4,
    "sweep_lambda": None,
    "prompt_family": None,
    "output": {"dir": "caltune_out"},
}

FAMILY_DEFAULTS = {"n_prompts": 40, "base_seed": 1000, "scale_range": [0.5, 4.0], "accuracy_band": 0.03}


def json_pointer(path) -> str:
    return "".join("/" + str(p).replace("~", "~0").replace("/", "~1") for p in path)


def _first_error(doc) -> ConfigError | None:
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: (list(map(str, e.absolute_path)), e.validator))
    if not errors:
        return None
    err = errors[0]
    path = list(err.absolute_path)
    if err.validator == "additionalProperties" and isinstance(err.instance, dict):
        allowed = set(err.schema.get("properties", {}))
        extra = sorted(k for k in err.instance if k not in allowed)
        return ConfigError(json_pointer(path + extra[:1]), f"unknown key {extra[0]!r}")
    return ConfigError(json_pointer(path), err.message)


def _merge(defaults: dict, given: dict) -> dict:
    out = copy.deepcopy(defaults)
    for k, v in given.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    """A validated config with every default filled in."""

    doc: dict
    base_dir: Path

    @classmethod
    def from_dict(cls, doc, base_dir=".") -> "ExperimentConfig":
        err = _first_error(doc)
        if err is not None:
            raise err
        full = _merge(DEFAULTS, doc)
        if full["prompt_family"] is not None:
            full["prompt_family"] = _merge(FAMILY_DEFAULTS, full["prompt_family"])
            lo, hi = full["prompt_family"]["scale_range"]
            if lo > hi:
                raise ConfigError("/prompt_family/scale_range", "lower bound exceeds upper bound")
        if "ensemble" in full["arms"] and full["ensemble_size"] < 2:
            raise ConfigError("/ensemble_size", "the ensemble arm needs at least 2 prompts")
        return cls(full, Path(base_dir))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError("", f"cannot read {path}: {exc.strerror}") from None
        try:
            doc = json.loads(text)
        except ValueError as exc:
            raise ConfigError("", f"invalid JSON: {exc}") from None
        return cls.from_dict(doc, path.parent)

    def canonical_json(self) -> str:
        return json.dumps(self.doc, sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()

    @property
    def output_dir(self) -> Path:
        d = Path(self.doc["output"]["dir"])
        return d if d.is_absolute() else self.base_dir / d

    def encoder_config(self):
        from .sim import make_encoder_config

        e = self.doc["encoder"]
        return make_encoder_config(
            e["dim"], e["prompt_len"], self.doc["seeds"]["encoder"], e["image_noise_sigma"],
            e["label_noise"], e["prompt_gain"], e["class_jitter"],
        )

    def tuning_config(self):
        from .tpt import TuningConfig

        t = self.doc["tuning"]
        return TuningConfig(
            lam=float(t["lambda"]),
            learning_rate=float(t["learning_rate"]),
            steps=t["steps"],
            n_views=t["n_views"],
            confidence_percentile=float(t["confidence_percentile"]),
            optimizer=t["optimizer"],
            beta1=float(t["beta1"]),
            beta2=float(t["beta2"]),
            epsilon=float(t["epsilon"]),
            weight_decay=float(t["weight_decay"]),
            view_sigma=float(t["view_sigma"]),
        )
