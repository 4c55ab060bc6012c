"""Dataset files: line-delimited JSON records with an optional binary sidecar.

The first line is a header ``{"format": "marmot-dataset", "format_version": 1}``.
Every following line is one record::

    {"id": "ex1", "text": "...", "captions": ["..."],
     "image_features": [[[...]]] | "relative/path.npy", "label": 0}

``captions`` and ``image_features`` are either both present or both absent.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from marmot.model import MultimodalExample
from marmot.vocab import Vocab, tokenize

log = logging.getLogger(__name__)

DATASET_FORMAT = "marmot-dataset"
FORMAT_VERSION = 1


class DatasetError(ValueError):
    """Collected per-line validation errors for a dataset file."""

    def __init__(self, path, errors: list):
        self.path = str(path)
        self.errors = errors
        lines = "\n".join(f"  line {n}: {msg}" for n, msg in errors)
        super().__init__(f"{len(errors)} invalid record(s) in {path}:\n{lines}")


@dataclass
class DatasetRecord:
    id: str
    text: str = ""
    captions: list = field(default_factory=list)
    image: Optional[np.ndarray] = None
    label: Optional[int] = None

    def __eq__(self, other) -> bool:
        if not isinstance(other, DatasetRecord):
            return NotImplemented
        same_image = (self.image is None and other.image is None) or (
            self.image is not None and other.image is not None and np.array_equal(self.image, other.image)
        )
        return (self.id, self.text, self.captions, self.label) == (
            other.id,
            other.text,
            other.captions,
            other.label,
        ) and same_image


def _parse_record(obj, base: Path) -> DatasetRecord:
    if not isinstance(obj, dict):
        raise ValueError("record is not an object")
    if "id" not in obj:
        raise ValueError("missing id")
    text = obj.get("text") or ""
    captions = obj.get("captions") or []
    feats = obj.get("image_features")
    if not isinstance(text, str) or not isinstance(captions, list) or not all(isinstance(c, str) for c in captions):
        raise ValueError("text must be a string and captions a list of strings")
    if bool(captions) != (feats is not None):
        raise ValueError("captions and image_features must be given together")
    image = None
    if feats is not None:
        image = np.load(base / feats) if isinstance(feats, str) else np.asarray(feats, dtype=np.float64)
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3 or min(image.shape) < 1:
            raise ValueError(f"image_features must be C x H x W, got shape {image.shape}")
    if not text.strip() and image is None:
        raise ValueError("record has neither text nor an image")
    label = obj.get("label")
    if label is not None and label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label!r}")
    return DatasetRecord(str(obj["id"]), text, list(captions), image, label)


def read_records(path) -> list:
    """Parse and validate a dataset file; raises DatasetError listing bad lines."""
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not any(line.strip() for line in lines):
        log.warning("dataset %s is empty", path)
        return []
    records, errors, shape = [], [], None
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            errors.append((lineno, f"invalid JSON: {exc.msg}"))
            continue
        if lineno == 1 and isinstance(obj, dict) and "format_version" in obj:
            if obj.get("format") != DATASET_FORMAT or obj["format_version"] != FORMAT_VERSION:
                errors.append((lineno, f"unsupported header {obj}"))
            continue
        try:
            rec = _parse_record(obj, path.parent)
        except (ValueError, OSError) as exc:
            errors.append((lineno, str(exc)))
            continue
        if rec.image is not None:
            if shape is None:
                shape = rec.image.shape
            elif rec.image.shape != shape:
                errors.append((lineno, f"image shape {rec.image.shape} differs from {shape}"))
                continue
        records.append(rec)
    if errors:
        raise DatasetError(path, errors)
    return records


def write_records(records, path, sidecar: bool = False) -> None:
    """Write records; with ``sidecar`` image maps go to ``<stem>_features/<id>.npy``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    side_dir = path.parent / f"{path.stem}_features"
    out = [json.dumps({"format": DATASET_FORMAT, "format_version": FORMAT_VERSION})]
    for k, rec in enumerate(records):
        obj = {"id": rec.id, "text": rec.text}
        if rec.image is not None:
            obj["captions"] = list(rec.captions)
            if sidecar:
                side_dir.mkdir(exist_ok=True)
                name = f"{k:06d}.npy"
                np.save(side_dir / name, rec.image)
                obj["image_features"] = f"{side_dir.name}/{name}"
            else:
                obj["image_features"] = rec.image.tolist()
        if rec.label is not None:
            obj["label"] = int(rec.label)
        out.append(json.dumps(obj))
    path.write_text("\n".join(out) + "\n", encoding="utf-8")


def encode(record: DatasetRecord, vocab: Vocab, max_len: Optional[int] = None) -> MultimodalExample:
    captions = [tokenize(c, vocab, max_len) for c in record.captions]
    text = tokenize(record.text, vocab, max_len)
    if record.image is not None and not all(captions):
        raise ValueError(f"record {record.id}: a caption has no tokens")
    return MultimodalExample(record.id, text, captions, record.image, record.label)


def load_dataset(path, vocab: Vocab, max_len: Optional[int] = None) -> list:
    records = read_records(path)
    examples, errors = [], []
    for rec in records:
        try:
            examples.append(encode(rec, vocab, max_len))
        except ValueError as exc:
            errors.append((rec.id, str(exc)))
    if errors:
        raise DatasetError(path, errors)
    return examples


def record_texts(records) -> list:
    return [t for r in records for t in [r.text, *r.captions]]
