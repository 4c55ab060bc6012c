"""Synthetic text x image interaction task.

Bit ``a`` picks the text keyword (alpha/beta), bit ``b`` picks the image
brightness (feature mean +1 or -1) and its matching caption. On the
multimodal part the label is ``a XOR b``, so text alone is at chance there;
the (a, b) combinations are balanced exactly. A fraction of examples has no
image or caption and is labelled ``a``, which exercises the missing-modality
path.
"""

from __future__ import annotations

import numpy as np

from marmot.data import DatasetRecord
from marmot.tensor import make_rng

KEYWORDS = {1: "alpha", 0: "beta"}
CAPTIONS = {1: "bright scene", 0: "dark scene"}
TEXT_TEMPLATE = "the post mentions {}"


def gen_synth(
    n: int,
    seed: int,
    channels: int = 4,
    height: int = 2,
    width: int = 2,
    missing_fraction: float = 0.25,
    noise: float = 0.5,
) -> list:
    if n % 2:
        raise ValueError(f"n must be even, got {n}")
    if not 0 <= missing_fraction <= 1:
        raise ValueError("missing_fraction must be in [0, 1]")
    rng = make_rng(seed)
    n_missing = int(round(n * missing_fraction))
    combos = [(0, 0), (0, 1), (1, 0), (1, 1)]
    records = []
    for i in range(n - n_missing):
        a, b = combos[i % 4]
        mean = 1.0 if b else -1.0
        image = rng.normal(mean, noise, (channels, height, width))
        records.append(
            DatasetRecord("", TEXT_TEMPLATE.format(KEYWORDS[a]), [CAPTIONS[b]], image, a ^ b)
        )
    for i in range(n_missing):
        a = i % 2
        records.append(DatasetRecord("", TEXT_TEMPLATE.format(KEYWORDS[a]), [], None, a))
    order = rng.permutation(n)
    out = []
    for k, idx in enumerate(order):
        rec = records[idx]
        rec.id = f"synth-{seed}-{k:04d}"
        out.append(rec)
    return out
