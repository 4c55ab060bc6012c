"""Run configuration loaded from JSON.

Example::

    {
      "model": {"d": 32, "heads": 2, "encoder_layers": 2, "decoder_layers": 1,
                "max_positions": 32, "pooling": "mean"},
      "train": {"learning_rate": 0.003, "batch_size": 4, "epochs": 30},
      "vocab_path": null,
      "trace": {"example_ids": []}
    }

``vocab_size`` and ``channels`` are filled in from the vocabulary and the
training data, so they are normally left out of ``model``.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from marmot.training import TrainConfig

MODEL_DEFAULTS = {
    "d": 32,
    "heads": 2,
    "encoder_layers": 2,
    "decoder_layers": 1,
    "max_positions": 32,
    "pooling": "mean",
    "k_hidden": 64,
}

TRAIN_DEFAULTS = {"learning_rate": 3e-3, "batch_size": 4, "epochs": 30}


@dataclass
class RunConfig:
    model: dict = field(default_factory=lambda: dict(MODEL_DEFAULTS))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(**TRAIN_DEFAULTS))
    vocab_path: Optional[str] = None
    trace_ids: list = field(default_factory=list)

    def __post_init__(self):
        d, heads = self.model.get("d", 32), self.model.get("heads", 2)
        if d % heads:
            raise ValueError(f"model.d={d} must be divisible by model.heads={heads}")

    def to_dict(self) -> dict:
        return {
            "model": dict(self.model),
            "train": dataclasses.asdict(self.train),
            "vocab_path": self.vocab_path,
            "trace": {"example_ids": list(self.trace_ids)},
        }

    @classmethod
    def from_dict(cls, obj: dict, base: Optional[Path] = None) -> "RunConfig":
        unknown = set(obj) - {"model", "train", "vocab_path", "trace"}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        model = {**MODEL_DEFAULTS, **obj.get("model", {})}
        train = TrainConfig(**{**TRAIN_DEFAULTS, **obj.get("train", {})})
        vocab_path = obj.get("vocab_path")
        if vocab_path is not None:
            resolved = (base / vocab_path) if base is not None else Path(vocab_path)
            if not resolved.exists():
                raise FileNotFoundError(f"vocabulary file not found: {resolved}")
            vocab_path = str(resolved)
        trace_ids = list(obj.get("trace", {}).get("example_ids", []))
        return cls(model, train, vocab_path, trace_ids)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text(encoding="utf-8")), base=path.parent)
