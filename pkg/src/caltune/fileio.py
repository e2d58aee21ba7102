"""File formats: JSONL prediction logs, embedding dumps, CSV tables.

Every writer goes through :func:`atomic_write` so a crashed run never leaves
a half-written file under the final name.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .calibration import PredictionRecord, make_record
from .errors import DimensionMismatch, EmptyRecordSet, InconsistentClassCount, MalformedLine


@dataclass(frozen=True)
class LogEntry:
    logits: np.ndarray
    label: int
    id: str | None = None


def _reject_constant(name):
    raise ValueError(f"non-finite literal {name}")


def _is_number(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def parse_log_line(text: str, lineno: int) -> LogEntry:
    try:
        obj = json.loads(text, parse_constant=_reject_constant)
    except ValueError as exc:
        raise MalformedLine(lineno, f"invalid JSON ({exc})") from None
    if not isinstance(obj, dict):
        raise MalformedLine(lineno, "expected a JSON object")
    extra = set(obj) - {"logits", "label", "id"}
    if extra:
        raise MalformedLine(lineno, f"unexpected key(s) {sorted(extra)}")
    logits = obj.get("logits")
    if not isinstance(logits, list) or not logits or not all(_is_number(v) for v in logits):
        raise MalformedLine(lineno, "'logits' must be a non-empty list of numbers")
    arr = np.array(logits, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise MalformedLine(lineno, "logits contain NaN or Inf")
    label = obj.get("label")
    if not isinstance(label, int) or isinstance(label, bool):
        raise MalformedLine(lineno, "'label' must be an integer")
    if not 0 <= label < arr.size:
        raise MalformedLine(lineno, f"label {label} outside [0, {arr.size})")
    ident = obj.get("id")
    if ident is not None and not isinstance(ident, str):
        raise MalformedLine(lineno, "'id' must be a string")
    return LogEntry(arr, label, ident)


def read_log(path) -> list[LogEntry]:
    """Parse a JSONL prediction log. Blank lines are skipped but still counted."""
    entries: list[LogEntry] = []
    n_classes = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            entry = parse_log_line(line, lineno)
            if n_classes is None:
                n_classes = entry.logits.size
            elif entry.logits.size != n_classes:
                raise InconsistentClassCount(
                    lineno, f"{entry.logits.size} logits, earlier lines have {n_classes}"
                )
            entries.append(entry)
    if not entries:
        raise EmptyRecordSet(f"{path}: no prediction records")
    return entries


def log_records(entries: Sequence[LogEntry], tau: float = 1.0) -> list[PredictionRecord]:
    return [make_record(e.logits, tau, e.label) for e in entries]


def write_log(path, logits, labels, ids=None) -> None:
    lines = []
    for i, (row, y) in enumerate(zip(logits, labels)):
        obj = {"logits": [float(v) for v in row], "label": int(y)}
        if ids is not None:
            obj["id"] = str(ids[i])
        lines.append(json.dumps(obj))
    atomic_write(path, "".join(line + "\n" for line in lines))


@dataclass(frozen=True)
class EmbeddingSet:
    prompt_id: str
    features: np.ndarray  # (N, D)


def read_embeddings(path) -> list[EmbeddingSet]:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh, parse_constant=_reject_constant)
        except ValueError as exc:
            raise DimensionMismatch(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict) or not isinstance(doc.get("dim"), int) or not isinstance(doc.get("sets"), list):
        raise DimensionMismatch(f"{path}: expected {{'dim': int, 'sets': [...]}}")
    dim = doc["dim"]
    out = []
    for k, item in enumerate(doc["sets"]):
        pid = item.get("prompt_id", f"#{k}") if isinstance(item, dict) else f"#{k}"
        feats = item.get("features") if isinstance(item, dict) else None
        if not isinstance(feats, list) or not feats:
            raise DimensionMismatch(f"prompt_id {pid!r}: 'features' must be a non-empty list of rows")
        for r, row in enumerate(feats):
            if not isinstance(row, list) or len(row) != dim or not all(_is_number(v) for v in row):
                got = len(row) if isinstance(row, list) else type(row).__name__
                raise DimensionMismatch(f"prompt_id {pid!r}: row {r} has length {got}, expected dim {dim}")
        arr = np.array(feats, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise DimensionMismatch(f"prompt_id {pid!r}: features contain NaN or Inf")
        out.append(EmbeddingSet(str(pid), arr))
    return out


def embeddings_document(sets: Iterable[EmbeddingSet]) -> dict:
    sets = list(sets)
    dim = int(sets[0].features.shape[1]) if sets else 0
    return {
        "dim": dim,
        "sets": [{"prompt_id": s.prompt_id, "features": s.features.tolist()} for s in sets],
    }


def fmt(value) -> str:
    """CSV cell text: floats at 17 significant digits, everything else via str."""
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if math.isnan(v):
            return "nan"
        return format(v, ".17g")
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (np.integer,)):
        return str(int(value))
    return str(value)


def csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()


def dict_rows_csv(rows: Sequence[dict], header: Sequence[str] | None = None) -> str:
    if header is None:
        header = list(rows[0]) if rows else []
    return csv_text(header, ([r[h] for h in header] for r in rows))


def read_csv_columns(path, required: Sequence[str]) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in required if c not in (reader.fieldnames or [])]
        if missing:
            raise DimensionMismatch(f"{path}: missing column(s) {missing}")
        out = []
        for lineno, row in enumerate(reader, start=2):
            try:
                vals = {c: float(row[c]) for c in required}
            except (TypeError, ValueError):
                raise MalformedLine(lineno, f"non-numeric value in {required}") from None
            if not all(math.isfinite(v) for v in vals.values()):
                raise MalformedLine(lineno, "NaN or Inf value")
            out.append({**row, **vals})
    return out


def json_text(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def atomic_write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()
