"""Versioned on-disk formats: params, reports, predictions, attention traces.

Every file carries ``format`` and ``format_version`` in its header. Output is
byte-stable: JSON is written with sorted keys and params archives use a
fixed zip timestamp.
"""

from __future__ import annotations

import dataclasses
import io
import json
import zipfile
from pathlib import Path

import numpy as np

from marmot.model import MarmotParams, ModelConfig, init_params

FORMAT_VERSION = 1
PARAMS_FORMAT = "marmot-params"
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


class FormatError(ValueError):
    pass


def _check_header(obj: dict, fmt: str, path) -> None:
    if obj.get("format") != fmt or obj.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{path}: expected {fmt} v{FORMAT_VERSION}, found {obj.get('format')} v{obj.get('format_version')}")


def write_json(path, fmt: str, payload: dict) -> None:
    obj = {"format": fmt, "format_version": FORMAT_VERSION, **payload}
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_json(path, fmt: str) -> dict:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    _check_header(obj, fmt, path)
    return obj


def save_params(params: MarmotParams, path) -> None:
    """Write an ``.npz``-compatible archive: one array per parameter plus a JSON header."""
    meta = {
        "format": PARAMS_FORMAT,
        "format_version": FORMAT_VERSION,
        "model_config": dataclasses.asdict(params.config),
        "layer_norm_eps": _ln_eps(params),
    }
    entries = [("__meta__", np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8))]
    entries += list((name, t.data) for name, t in params.named_parameters().items())
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in entries:
            buf = io.BytesIO()
            np.save(buf, np.ascontiguousarray(arr), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=_ZIP_EPOCH), buf.getvalue())


def _ln_eps(params: MarmotParams) -> float:
    for block in params.fusion_encoder + params.translation_decoder:
        return block.ln1.eps
    return 1e-12


def load_params(path) -> MarmotParams:
    with np.load(path, allow_pickle=False) as archive:
        if "__meta__" not in archive:
            raise FormatError(f"{path}: missing params header")
        meta = json.loads(bytes(archive["__meta__"]).decode())
        _check_header(meta, PARAMS_FORMAT, path)
        params = init_params(ModelConfig(**meta["model_config"]), seed=0)
        named = params.named_parameters()
        stored = set(archive.files) - {"__meta__"}
        if stored != set(named):
            raise FormatError(f"{path}: parameter names do not match the model config")
        for name, t in named.items():
            arr = archive[name]
            if arr.shape != t.shape:
                raise FormatError(f"{path}: {name} has shape {arr.shape}, expected {t.shape}")
            t.data = arr.astype(np.float64)
    eps = meta.get("layer_norm_eps", 1e-12)
    for block in params.fusion_encoder + params.translation_decoder:
        for ln in (getattr(block, k) for k in ("ln1", "ln2", "ln3") if hasattr(block, k)):
            ln.eps = eps
    return params


def write_predictions(path, rows) -> None:
    """Tab-separated ``id, class, p_positive`` with a versioned comment header."""
    lines = [f"# format=marmot-predictions format_version={FORMAT_VERSION}", "id\tclass\tp_positive"]
    lines += [f"{ex_id}\t{cls}\t{p!r}" for ex_id, cls, p in rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_predictions(path) -> list:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or f"format_version={FORMAT_VERSION}" not in lines[0]:
        raise FormatError(f"{path}: missing predictions header")
    rows = []
    for line in lines[2:]:
        ex_id, cls, p = line.split("\t")
        rows.append((ex_id, int(cls), float(p)))
    return rows
