"""The MARMOT classifier: modality translation followed by masked fusion.

Pipeline for one example::

    image map (C x H x W) --1x1 projection--> H*W rows of width d
    caption tokens --decoder stack, cross-attending to those rows--> translated image
    [CLS] | text | captions | translated image --encoder stack--> pooled vector
    pooled vector --two-layer ReLU head--> 2 logits

Examples without an image get a dummy image and a dummy caption. Their
positions are marked absent and the fusion mask blocks them completely, so
neither their content nor the translation decoder affects the output.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from marmot.attention import (
    CAPTION_TYPE,
    IMAGE_TYPE,
    TEXT_TYPE,
    EmbeddingTables,
    build_fusion_mask,
    embed,
)
from marmot.tensor import ShapeError, Tensor, concat, make_rng, matmul, relu, softmax_array, take_rows
from marmot.transformer import DecoderBlockParams, EncoderBlockParams, stack
from marmot.vocab import PAD, SEP

POOLING_MODES = ("cls", "mean")
SEG_CLS, SEG_TEXT, SEG_CAPTION, SEG_IMAGE = "CLS", "TEXT", "CAPTION", "IMAGE"
THIRD_TYPE_NOISE_VARIANCE = 1e-4


@dataclass
class ModelConfig:
    vocab_size: int
    channels: int
    d: int = 32
    heads: int = 2
    encoder_layers: int = 2
    decoder_layers: int = 1
    d_ff: Optional[int] = None
    k_hidden: Optional[int] = None
    max_positions: int = 64
    pooling: str = "cls"
    init_std: float = 0.02

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError(f"d={self.d} must be divisible by heads={self.heads}")
        if self.pooling not in POOLING_MODES:
            raise ValueError(f"pooling must be one of {POOLING_MODES}, got {self.pooling!r}")
        if self.d_ff is None:
            self.d_ff = 4 * self.d
        if self.k_hidden is None:
            self.k_hidden = max(1, self.d // 2)
        if self.vocab_size <= SEP or self.channels < 1 or self.max_positions < 1:
            raise ValueError("vocab_size, channels and max_positions are too small")


@dataclass
class MultimodalExample:
    id: str
    text: list
    captions: list = field(default_factory=list)
    image: Optional[np.ndarray] = None  # C x H x W
    label: Optional[int] = None

    def __post_init__(self):
        if self.image is not None:
            self.image = np.asarray(self.image, dtype=np.float64)
            if self.image.ndim != 3 or min(self.image.shape) < 1:
                raise ValueError(f"example {self.id}: image must be C x H x W, got {self.image.shape}")
        if bool(self.captions) != (self.image is not None):
            raise ValueError(f"example {self.id}: captions must be given exactly when an image is")
        if any(len(c) == 0 for c in self.captions):
            raise ValueError(f"example {self.id}: empty caption")
        if not self.text and self.image is None:
            raise ValueError(f"example {self.id}: needs text, an image, or both")
        if self.label not in (None, 0, 1):
            raise ValueError(f"example {self.id}: label must be 0 or 1, got {self.label!r}")

    @property
    def has_image(self) -> bool:
        return self.image is not None


def without_image(example: MultimodalExample) -> MultimodalExample:
    """Text-only view of an example; the image and captions become masked dummies."""
    return dataclasses.replace(example, captions=[], image=None)


@dataclass
class ClassifierParams:
    w1: Tensor  # d x k_hidden
    b1: Tensor
    w2: Tensor  # k_hidden x 2
    b2: Tensor


@dataclass
class MarmotParams:
    config: ModelConfig
    proj_w: Tensor  # C x d, a 1x1 convolution applied to every spatial cell
    proj_b: Tensor
    translation_decoder: list
    fusion_encoder: list
    tables: EmbeddingTables
    cls_embedding: Tensor
    classifier: ClassifierParams

    def named_parameters(self) -> dict:
        """Flat ``{dotted.name: Tensor}`` view in a fixed order."""
        return dict(_walk(self, ""))

    def parameters(self) -> list:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None


def _walk(obj, prefix: str) -> Iterator[tuple]:
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from _walk(item, f"{prefix}.{i}")
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, ModelConfig):
        for f in dataclasses.fields(obj):
            name = f"{prefix}.{f.name}" if prefix else f.name
            yield from _walk(getattr(obj, f.name), name)


def parameter_group(name: str) -> str:
    """Freeze-schedule group of a parameter: image, decoder, encoder or head."""
    if name.startswith("proj_"):
        return "image"
    if name.startswith("translation_decoder"):
        return "decoder"
    if name.startswith("classifier"):
        return "head"
    return "encoder"


def init_third_token_type(t1, t2, rng: np.random.Generator, variance: float = THIRD_TYPE_NOISE_VARIANCE):
    """Average of two token-type vectors plus N(0, variance) noise per dimension."""
    t1, t2 = np.asarray(t1, dtype=np.float64), np.asarray(t2, dtype=np.float64)
    if t1.shape != t2.shape:
        raise ShapeError(f"token-type vectors differ in shape: {t1.shape} vs {t2.shape}")
    noise = rng.normal(0.0, np.sqrt(variance), t1.shape) if variance > 0 else 0.0
    return (t1 + t2) / 2.0 + noise


def init_params(config: ModelConfig, seed: int) -> MarmotParams:
    """Gaussian(0, init_std) weights, zero biases, unit layer-norm gains."""
    rng = make_rng(seed)
    d, std = config.d, config.init_std

    def gauss(*shape):
        return Tensor(rng.normal(0.0, std, shape), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    proj_w = gauss(config.channels, d)
    decoder = [
        DecoderBlockParams.init(d, config.heads, config.d_ff, rng, std) for _ in range(config.decoder_layers)
    ]
    encoder = [
        EncoderBlockParams.init(d, config.heads, config.d_ff, rng, std) for _ in range(config.encoder_layers)
    ]
    tables = EmbeddingTables.init(config.vocab_size, config.max_positions, d, rng, std)
    type_table = tables.token_type.data
    type_table[IMAGE_TYPE] = init_third_token_type(type_table[TEXT_TYPE], type_table[CAPTION_TYPE], rng)
    cls_embedding = gauss(d)
    head = ClassifierParams(gauss(d, config.k_hidden), zeros(config.k_hidden), gauss(config.k_hidden, 2), zeros(2))
    return MarmotParams(config, proj_w, zeros(d), decoder, encoder, tables, cls_embedding, head)


def project_and_flatten(image, proj_w: Tensor, proj_b: Optional[Tensor] = None) -> Tensor:
    """Map every spatial cell's channel vector to width d; cells in row-major order."""
    data = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    if data.ndim != 3:
        raise ShapeError(f"image map must be C x H x W, got {data.shape}")
    c, h, w = data.shape
    if proj_w.shape[0] != c:
        raise ShapeError(f"projection expects {proj_w.shape[0]} channels, image has {c}")
    cells = Tensor(data.reshape(c, h * w).T) if not isinstance(image, Tensor) else image.reshape(c, h * w).T
    rows = matmul(cells, proj_w)
    return rows + proj_b if proj_b is not None else rows


def caption_layout(captions: Sequence[Sequence[int]]) -> tuple:
    """Join captions with [SEP]; positions restart at 0 for every caption."""
    ids, positions = [], []
    for k, cap in enumerate(captions):
        if k:
            ids.append(SEP)
            positions.append(len(captions[k - 1]))
        ids.extend(cap)
        positions.extend(range(len(cap)))
    return np.asarray(ids, dtype=np.int64), np.asarray(positions, dtype=np.int64)


def modality_translation(captions, img_rows: Tensor, params: MarmotParams, trace: Optional[list] = None) -> Tensor:
    """Decode caption tokens against the image rows; one output row per caption token."""
    ids, positions = caption_layout(captions)
    if ids.size == 0:
        raise ValueError("modality translation needs at least one caption token")
    x = embed(ids, np.full(ids.shape, CAPTION_TYPE), positions, params.tables)
    return stack(params.translation_decoder, x, img_rows, None, None, trace=trace)


@dataclass
class SegmentedSequence:
    embeddings: Tensor  # n x d
    segments: list
    token_ids: np.ndarray  # -1 where the position is not a vocabulary token
    token_types: np.ndarray
    positions: np.ndarray
    present: np.ndarray

    def __len__(self) -> int:
        return len(self.segments)


def assemble(
    example: MultimodalExample,
    translated: Optional[Tensor],
    tables: EmbeddingTables,
    cls_embedding: Tensor,
    dummy_caption: Optional[Sequence[Sequence[int]]] = None,
) -> SegmentedSequence:
    """Lay out ``[CLS] | text | captions | translated image`` with presence flags."""
    d = tables.token.shape[1]
    has_text, has_image = bool(example.text), example.has_image
    text_ids = np.asarray(example.text if has_text else [PAD], dtype=np.int64)
    captions = example.captions if has_image else (dummy_caption or [[PAD]])
    cap_ids, cap_pos = caption_layout(captions)
    n_img = 0 if translated is None else translated.shape[0]

    cls_row = (
        cls_embedding.reshape(1, d)
        + take_rows(tables.position, [0])
        + take_rows(tables.token_type, [TEXT_TYPE])
    )
    text_pos = np.arange(len(text_ids), dtype=np.int64)
    parts = [
        cls_row,
        embed(text_ids, np.full(text_ids.shape, TEXT_TYPE), text_pos, tables),
        embed(cap_ids, np.full(cap_ids.shape, CAPTION_TYPE), cap_pos, tables),
    ]
    if n_img:
        # translated rows already went through the decoder; only the type embedding is added
        parts.append(translated + take_rows(tables.token_type, [IMAGE_TYPE]))

    segments = [SEG_CLS] + [SEG_TEXT] * len(text_ids) + [SEG_CAPTION] * len(cap_ids) + [SEG_IMAGE] * n_img
    token_ids = np.concatenate([[-1], text_ids, cap_ids, np.full(n_img, -1)]).astype(np.int64)
    token_types = np.concatenate(
        [[TEXT_TYPE], np.full(len(text_ids), TEXT_TYPE), np.full(len(cap_ids), CAPTION_TYPE), np.full(n_img, IMAGE_TYPE)]
    ).astype(np.int64)
    positions = np.concatenate([[0], text_pos, cap_pos, np.arange(n_img)]).astype(np.int64)
    present = np.concatenate(
        [[True], np.full(len(text_ids), has_text), np.full(len(cap_ids) + n_img, has_image)]
    ).astype(bool)
    return SegmentedSequence(concat(parts, axis=0), segments, token_ids, token_types, positions, present)


def pool(hidden: Tensor, seq: SegmentedSequence, mode: str) -> Tensor:
    """CLS output vector, or mean over present non-CLS positions."""
    if mode == "cls":
        return hidden[0]
    if mode == "mean":
        idx = np.flatnonzero(seq.present & (np.asarray(seq.segments) != SEG_CLS))
        return take_rows(hidden, idx).mean(axis=0)
    raise ValueError(f"unknown pooling mode {mode!r}")


def classify(rep: Tensor, head: ClassifierParams) -> Tensor:
    hidden = relu(matmul(rep.reshape(1, -1), head.w1) + head.b1)
    return (matmul(hidden, head.w2) + head.b2).reshape(2)


@dataclass
class ForwardOutput:
    logits: Tensor
    representation: Tensor
    sequence: SegmentedSequence
    traces: Optional[dict] = None


def forward(
    example: MultimodalExample,
    params: MarmotParams,
    trace: bool = False,
    dummy_image: Optional[np.ndarray] = None,
    dummy_caption: Optional[Sequence[Sequence[int]]] = None,
) -> ForwardOutput:
    cfg = params.config
    if example.has_image:
        image, captions = example.image, example.captions
    else:
        image = np.zeros((cfg.channels, 1, 1)) if dummy_image is None else dummy_image
        captions = dummy_caption or [[PAD]]
    traces = {"translation": [], "fusion": []} if trace else None

    img_rows = project_and_flatten(image, params.proj_w, params.proj_b)
    translated = modality_translation(captions, img_rows, params, traces["translation"] if trace else None)
    seq = assemble(example, translated, params.tables, params.cls_embedding, dummy_caption=captions)
    mask = build_fusion_mask(seq)
    hidden = stack(params.fusion_encoder, seq.embeddings, mask, trace=traces["fusion"] if trace else None)
    rep = pool(hidden, seq, cfg.pooling)
    return ForwardOutput(classify(rep, params.classifier), rep, seq, traces)


def positive_probability(logits) -> float:
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    return float(softmax_array(data)[0][1])


def predict(example: MultimodalExample, params: MarmotParams, threshold: float = 0.5) -> tuple:
    """Return ``(class, p_positive)``; class 1 iff p_positive >= threshold."""
    p = positive_probability(forward(example, params).logits)
    return int(p >= threshold), p
