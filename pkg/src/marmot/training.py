"""Training: cross-entropy, decoupled-decay Adam, three-stage LR schedule, freezing.

The freeze schedule has three phases measured in epochs:

* ``[0, freeze_decoder_epochs)``: only the image projection (and the new
  classifier head) is updated;
* ``[freeze_decoder_epochs, freeze_encoder_epochs)``: the translation decoder
  joins;
* ``[freeze_encoder_epochs, epochs)``: everything is trained end to end.

The learning rate warms up linearly over the first ``warmup_fraction`` of all
optimizer steps, stays flat while anything is frozen, then follows a cosine
from the set rate to zero over the end-to-end phase. With no freezing this is
plain warmup + cosine.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from marmot import metrics
from marmot.model import (
    MarmotParams,
    ModelConfig,
    MultimodalExample,
    forward,
    init_params,
    parameter_group,
    positive_probability,
)
from marmot.tensor import Tensor, backward, derive_seeds, log_softmax, make_rng

log = logging.getLogger(__name__)

METRICS = ("f1", "auc", "accuracy")


@dataclass
class AdamConfig:
    eps: float = 1e-8
    beta1: float = 0.9
    beta2: float = 0.98
    weight_decay: float = 0.01


@dataclass
class TrainConfig:
    learning_rate: float = 5e-5
    batch_size: int = 32
    epochs: int = 8
    warmup_fraction: float = 0.10
    freeze_decoder_epochs: int = 0
    freeze_encoder_epochs: int = 0
    adam: AdamConfig = field(default_factory=AdamConfig)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.adam, dict):
            self.adam = AdamConfig(**self.adam)
        if not 0 <= self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must be in [0, 1)")
        if not 0 <= self.freeze_decoder_epochs <= self.freeze_encoder_epochs <= self.epochs:
            raise ValueError("need 0 <= freeze_decoder_epochs <= freeze_encoder_epochs <= epochs")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")


class TrainingDiverged(FloatingPointError):
    def __init__(self, message: str, report: Optional["TrainReport"] = None):
        super().__init__(message)
        self.report = report


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """``-log softmax(logits)[label]``, stabilised by max-subtraction."""
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label!r}")
    return -log_softmax(logits, axis=-1)[label]


@dataclass
class AdamSlot:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def adam_step(
    params: dict,
    state: dict,
    lr: float,
    cfg: AdamConfig,
    trainable: Callable[[str], bool] = lambda name: True,
    no_decay: frozenset = frozenset(),
) -> None:
    """One AdamW update in place.

    Weight decay is decoupled: ``w -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * w)``.
    Parameters rejected by ``trainable`` are left untouched and keep their
    moment estimates and step counts. A missing gradient counts as zero.
    """
    for name, p in params.items():
        if not trainable(name):
            continue
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        if not np.isfinite(g).all():
            raise TrainingDiverged(f"non-finite gradient in {parameter_group(name)} parameter {name}")
        slot = state.get(name)
        if slot is None:
            slot = state[name] = AdamSlot(np.zeros_like(p.data), np.zeros_like(p.data))
        slot.t += 1
        slot.m = cfg.beta1 * slot.m + (1.0 - cfg.beta1) * g
        slot.v = cfg.beta2 * slot.v + (1.0 - cfg.beta2) * g * g
        m_hat = slot.m / (1.0 - cfg.beta1**slot.t)
        v_hat = slot.v / (1.0 - cfg.beta2**slot.t)
        update = m_hat / (np.sqrt(v_hat) + cfg.eps)
        if cfg.weight_decay and name not in no_decay:
            update = update + cfg.weight_decay * p.data
        p.data = p.data - lr * update


def lr_at(iteration: int, total_iterations: int, cfg: TrainConfig) -> float:
    lr = cfg.learning_rate
    warmup = int(cfg.warmup_fraction * total_iterations)
    if cfg.warmup_fraction > 0:
        warmup = max(warmup, 1)  # short runs still start from zero
    if iteration < warmup:
        return lr * iteration / warmup
    frozen_end = total_iterations * cfg.freeze_encoder_epochs // cfg.epochs
    decay_start = max(warmup, frozen_end)
    if iteration < decay_start:
        return lr
    span = total_iterations - 1 - decay_start
    if span <= 0:
        return 0.0
    progress = min(1.0, (iteration - decay_start) / span)
    return lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class TrainableGroups(NamedTuple):
    image: bool
    decoder: bool
    encoder: bool


def trainable_groups(epoch: int, cfg: TrainConfig) -> TrainableGroups:
    return TrainableGroups(
        image=True,
        decoder=epoch >= cfg.freeze_decoder_epochs,
        encoder=epoch >= cfg.freeze_encoder_epochs,
    )


def _trainable_predicate(groups: TrainableGroups) -> Callable[[str], bool]:
    flags = {"image": groups.image, "decoder": groups.decoder, "encoder": groups.encoder, "head": True}
    return lambda name: flags[parameter_group(name)]


def predict_all(params: MarmotParams, examples: Sequence[MultimodalExample], threshold: float = 0.5):
    probs = np.array([positive_probability(forward(ex, params).logits) for ex in examples])
    return (probs >= threshold).astype(np.int64), probs


def accuracy(params: MarmotParams, examples: Sequence[MultimodalExample], threshold: float = 0.5) -> float:
    classes, _ = predict_all(params, examples, threshold)
    return float(np.mean(classes == np.array([ex.label for ex in examples])))


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_accuracy: Optional[float]
    learning_rate: float
    trainable: dict


@dataclass
class TrainReport:
    config: dict
    seed: int
    epochs: list
    final_train_accuracy: Optional[float]
    params: Optional[MarmotParams] = field(default=None, repr=False, compare=False)

    @property
    def val_curve(self) -> list:
        return [e.val_accuracy for e in self.epochs]

    @property
    def loss_curve(self) -> list:
        return [e.train_loss for e in self.epochs]

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "seed": self.seed,
            "epochs": [dataclasses.asdict(e) for e in self.epochs],
            "final_train_accuracy": self.final_train_accuracy,
        }


def train(
    train_set: Sequence[MultimodalExample],
    val_set: Optional[Sequence[MultimodalExample]],
    params: MarmotParams,
    cfg: TrainConfig,
    on_epoch_end: Optional[Callable[[EpochRecord, MarmotParams], None]] = None,
) -> TrainReport:
    """Mini-batch training in place on ``params``; deterministic given ``cfg.seed``.

    ``on_epoch_end`` is called after every epoch with that epoch's record.
    """
    if not train_set:
        raise ValueError("training set is empty")
    if any(ex.label is None for ex in train_set):
        raise ValueError("every training example needs a label")
    rng = make_rng(cfg.seed)
    named = params.named_parameters()
    no_decay = frozenset(n for n, t in named.items() if t.ndim == 1)
    state: dict = {}
    n = len(train_set)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    report = TrainReport(dataclasses.asdict(cfg), cfg.seed, [], None, params)
    step = 0
    for epoch in range(cfg.epochs):
        groups = trainable_groups(epoch, cfg)
        trainable = _trainable_predicate(groups)
        order = rng.permutation(n)
        batch_losses = []
        lr = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            params.zero_grad()
            batch_loss = 0.0
            for i in batch:
                ex = train_set[i]
                loss = cross_entropy(forward(ex, params).logits, ex.label) * (1.0 / len(batch))
                backward(loss)
                batch_loss += float(loss.data)
            if not math.isfinite(batch_loss):
                raise TrainingDiverged(f"loss became {batch_loss} at epoch {epoch}", report)
            lr = lr_at(step, total, cfg)
            try:
                adam_step(named, state, lr, cfg.adam, trainable, no_decay)
            except TrainingDiverged as exc:
                exc.report = report
                raise
            batch_losses.append(batch_loss)
            step += 1
        val_acc = accuracy(params, val_set) if val_set else None
        record = EpochRecord(epoch, float(np.mean(batch_losses)), val_acc, lr, groups._asdict())
        report.epochs.append(record)
        log.info("epoch %d loss %.4f val_acc %s", epoch, record.train_loss, val_acc)
        if on_epoch_end is not None:
            on_epoch_end(record, params)
    params.zero_grad()
    report.final_train_accuracy = accuracy(params, train_set)
    return report


def score_model(params: MarmotParams, examples: Sequence[MultimodalExample], metric: str) -> Optional[float]:
    """Selection score: positive-class F1, AUC or accuracy."""
    if metric not in METRICS:
        raise ValueError(f"metric must be one of {METRICS}")
    classes, probs = predict_all(params, examples)
    labels = [ex.label for ex in examples]
    if metric == "accuracy":
        return float(np.mean(classes == np.array(labels)))
    if metric == "auc":
        return metrics.auc(probs, labels)
    return metrics.scores(metrics.confusion(classes, labels)).f1_1


@dataclass
class GridResult:
    best: TrainConfig
    best_score: Optional[float]
    cells: list  # (TrainConfig, score) in grid order


def _grid_cell(args):
    train_set, val_set, model_config, cfg, init_seed, metric = args
    params = init_params(model_config, init_seed)
    train(train_set, val_set, params, cfg)
    return score_model(params, val_set, metric)


def grid_search(
    train_set,
    val_set,
    model_config: ModelConfig,
    base: TrainConfig,
    learning_rates: Sequence[float],
    batch_sizes: Sequence[int],
    epochs: Sequence[int],
    metric: str = "f1",
    init_seed: int = 0,
    workers: int = 1,
) -> GridResult:
    """Train one model per (lr, batch, epochs) cell and keep the best by ``metric``.

    Every cell starts from the same initialisation. Undefined scores lose to
    any defined one; ties go to the earlier cell.
    """
    cells = [
        dataclasses.replace(base, learning_rate=lr, batch_size=bs, epochs=ep)
        for lr in learning_rates
        for bs in batch_sizes
        for ep in epochs
    ]
    if not cells:
        raise ValueError("empty grid")
    jobs = [(train_set, val_set, model_config, c, init_seed, metric) for c in cells]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_grid_cell, jobs))
    else:
        results = [_grid_cell(j) for j in jobs]
    best_i = 0
    for i, s in enumerate(results):
        current = results[best_i]
        if s is not None and (current is None or s > current):
            best_i = i
    return GridResult(cells[best_i], results[best_i], list(zip(cells, results)))


def _member(args):
    train_set, val_set, model_config, cfg = args
    params = init_params(model_config, cfg.seed)
    train(train_set, val_set, params, cfg)
    return params


def deep_ensemble(
    train_set,
    model_config: ModelConfig,
    cfg: TrainConfig,
    members: int = 11,
    val_set=None,
    workers: int = 1,
) -> list:
    """Train ``members`` independently seeded models (seeds derived from ``cfg.seed``)."""
    if members < 1 or members % 2 == 0:
        raise ValueError(f"ensemble size must be odd to avoid vote ties, got {members}")
    seeds = derive_seeds(cfg.seed, members)
    jobs = [(train_set, val_set, model_config, dataclasses.replace(cfg, seed=s)) for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(_member, jobs))
    return [_member(j) for j in jobs]


def majority_vote(classes: Sequence[int]) -> int:
    classes = list(classes)
    if len(classes) % 2 == 0:
        raise ValueError("majority vote needs an odd number of voters")
    return int(sum(classes) * 2 > len(classes))


def ensemble_predict(models: Sequence[MarmotParams], example: MultimodalExample, threshold: float = 0.5) -> tuple:
    """Majority class over members, plus the members' mean positive probability."""
    if len(models) % 2 == 0:
        raise ValueError("ensemble needs an odd number of members")
    probs = [positive_probability(forward(example, m).logits) for m in models]
    return majority_vote(int(p >= threshold) for p in probs), float(np.mean(probs))
