"""JSONL corpora: pretrain/SFT samples, preference pairs, PRM solutions.

Schemas (one object per line)::

    pretrain    {"kind": "language"|"multimodal", "text": str, "target": str, "image": IMAGE?}
    preference  {"query": str, "chosen": str, "rejected": str, "image": IMAGE?}
    prm         {"question": str, "steps": [str, ...], "labels": ["+"|"-", ...], "image": IMAGE?}

    IMAGE = {"h": int, "w": int, "grid": [int, ...]}   (row-major, h*w values)

Unknown keys are ignored. With a vocab supplied, every text field must tokenize.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable

import numpy as np

from ..errors import DataError, IngestionError, StructuralError
from ..vocab import Vocab
from .samples import (
    LANGUAGE,
    MULTIMODAL,
    PALETTE_SIZE,
    PATCH_SIZE,
    PreferencePair,
    Sample,
    StepwiseSolution,
    SyntheticImage,
)

SCHEMAS = ("pretrain", "preference", "prm")


def _image(obj, line: int) -> SyntheticImage | None:
    if obj is None:
        return None
    if not isinstance(obj, dict):
        raise IngestionError(line, "image", "must be an object")
    for key in ("h", "w", "grid"):
        if key not in obj:
            raise IngestionError(line, f"image.{key}", "missing")
    h, w, grid = obj["h"], obj["w"], obj["grid"]
    if not (isinstance(h, int) and isinstance(w, int) and h > 0 and w > 0):
        raise IngestionError(line, "image.h", "h and w must be positive integers")
    if h % (2 * PATCH_SIZE) or w % (2 * PATCH_SIZE):
        raise IngestionError(line, "image.h", f"dims must be divisible by {2 * PATCH_SIZE}")
    if not isinstance(grid, list) or len(grid) != h * w:
        raise IngestionError(line, "image.grid", f"must be a list of h*w = {h * w} integers")
    if not all(isinstance(v, int) and 0 <= v < PALETTE_SIZE for v in grid):
        raise IngestionError(line, "image.grid", f"values must be integers in [0, {PALETTE_SIZE})")
    return SyntheticImage(np.array(grid, dtype=np.int64).reshape(h, w))


def _string(rec: dict, key: str, line: int, vocab: Vocab | None, required: bool = True) -> str:
    if key not in rec:
        if required:
            raise IngestionError(line, key, "missing")
        return ""
    value = rec[key]
    if not isinstance(value, str):
        raise IngestionError(line, key, "must be a string")
    if vocab is not None:
        try:
            vocab.encode(value)
        except DataError as exc:
            raise IngestionError(line, key, str(exc)) from None
    return value


def _pretrain(rec: dict, line: int, vocab: Vocab | None) -> Sample:
    kind = rec.get("kind")
    if kind not in (LANGUAGE, MULTIMODAL):
        raise IngestionError(line, "kind", 'must be "language" or "multimodal"')
    image = _image(rec.get("image"), line)
    if kind == LANGUAGE and image is not None:
        raise IngestionError(line, "image", "language samples must not carry an image")
    text = _string(rec, "text", line, vocab)
    target = _string(rec, "target", line, vocab, required=False)
    return Sample(kind, text, target, image)


def _preference(rec: dict, line: int, vocab: Vocab | None) -> PreferencePair:
    query = _string(rec, "query", line, vocab)
    chosen = _string(rec, "chosen", line, vocab)
    rejected = _string(rec, "rejected", line, vocab)
    if chosen == rejected:
        raise IngestionError(line, "rejected", "identical to chosen")
    return PreferencePair(query, chosen, rejected, _image(rec.get("image"), line))


def _prm(rec: dict, line: int, vocab: Vocab | None) -> StepwiseSolution:
    question = _string(rec, "question", line, vocab)
    steps = rec.get("steps")
    if not isinstance(steps, list) or not steps or not all(isinstance(s, str) for s in steps):
        raise IngestionError(line, "steps", "must be a non-empty list of strings")
    if vocab is not None:
        for s in steps:
            try:
                vocab.encode(s)
            except DataError as exc:
                raise IngestionError(line, "steps", str(exc)) from None
    labels = rec.get("labels")
    if labels is not None:
        if not isinstance(labels, list) or any(v not in ("+", "-") for v in labels):
            raise IngestionError(line, "labels", 'must be a list of "+"/"-"')
        if len(labels) != len(steps):
            raise IngestionError(line, "labels", f"{len(labels)} labels for {len(steps)} steps")
        labels = [v == "+" for v in labels]
    return StepwiseSolution(question, steps, labels, _image(rec.get("image"), line))


_PARSERS = {"pretrain": _pretrain, "preference": _preference, "prm": _prm}


def ingest_jsonl(path: str | Path, schema: str, vocab: Vocab | None = None) -> list:
    """Parse and validate a JSONL corpus. Blank lines are skipped; an empty file yields []."""
    if schema not in _PARSERS:
        raise DataError(f"unknown schema {schema!r}; expected one of {SCHEMAS}")
    parse = _PARSERS[schema]
    records = []
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    with fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise IngestionError(lineno, "<line>", f"invalid JSON: {exc.msg}") from None
            if not isinstance(rec, dict):
                raise IngestionError(lineno, "<line>", "expected a JSON object")
            try:
                records.append(parse(rec, lineno, vocab))
            except StructuralError as exc:
                raise IngestionError(lineno, "<record>", str(exc)) from None
    return records


def to_record(item) -> dict:
    image = getattr(item, "image", None)
    if isinstance(item, Sample):
        rec = {"kind": item.kind, "text": item.text, "target": item.target}
    elif isinstance(item, PreferencePair):
        rec = {"query": item.query, "chosen": item.chosen, "rejected": item.rejected}
    elif isinstance(item, StepwiseSolution):
        rec = {"question": item.question, "steps": list(item.steps)}
        if item.labels is not None:
            rec["labels"] = ["+" if v else "-" for v in item.labels]
    else:
        raise TypeError(f"cannot serialize {type(item).__name__}")
    if image is not None:
        rec["image"] = image.to_json()
    return rec


def emit_jsonl(items: Iterable, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for item in items:
            fh.write(json.dumps(to_record(item), separators=(",", ":")) + "\n")
