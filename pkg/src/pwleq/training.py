"""Pre-training with exact activations, re-training after the PWL swap and
training from scratch with PWL activations."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .activation import PwlSpec
from .channel import Dataset
from .metrics import QResult, bit_errors, format_q, parse_q
from .model import (
    EXACT,
    ActivationSet,
    EqualizerParams,
    equalizer_forward,
    forward_backward,
    init_params,
    swap_activations,
    window_arrays,
)
from .nncore import AdamState, TrainingError, adam_step, make_rng

log = logging.getLogger(__name__)

TAIL_FRACTION_LIMIT = 0.9


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    patience: int = 10
    train_fraction: float = 8 / 9  # 4096 of the default 4608 windows
    hidden: int = 35

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_mse: float
    val_mse: float
    val_q_db: float
    tail_fraction: float

    def line(self) -> str:
        return f"{self.epoch},{self.train_mse!r},{self.val_mse!r},{format_q(self.val_q_db)},{self.tail_fraction!r}"

    @classmethod
    def parse(cls, line: str) -> "EpochRecord":
        e, tr, va, q, tail = line.strip().split(",")
        return cls(int(e), float(tr), float(va), parse_q(q), float(tail))


LOG_HEADER = "epoch,train_mse,val_mse,val_q_db,tail_fraction"


@dataclass
class TrainingLog:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0

    def text(self) -> str:
        return "\n".join([LOG_HEADER] + [r.line() for r in self.records]) + "\n"

    @property
    def best(self) -> EpochRecord:
        return next(r for r in self.records if r.epoch == self.best_epoch)

    def running_best_q(self) -> list[float]:
        return list(np.maximum.accumulate([r.val_q_db for r in self.records]))

    def epochs_to_reach(self, q_target_db: float) -> float:
        """First logged epoch whose validation Q reaches the target, or inf."""
        for r in self.records:
            if r.val_q_db >= q_target_db:
                return r.epoch
        return math.inf


@dataclass(frozen=True)
class Split:
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    order: int


def split_dataset(dataset: Dataset, tc: TrainConfig) -> Split:
    x, y = window_arrays(dataset.rx, dataset.tx)
    if len(x) < 2:
        raise ValueError("need at least two windows to train and validate")
    n_train = min(max(int(round(len(x) * tc.train_fraction)), 1), len(x) - 1)
    return Split(x[:n_train], y[:n_train], x[n_train:], y[n_train:], dataset.config.qam_order)


def _validate(params, acts, split: Split, batch: int = 512) -> tuple[float, QResult, float]:
    stats: dict = {}
    sq = 0.0
    errors = n_bits = 0
    for start in range(0, len(split.val_x), batch):
        out = equalizer_forward(params, split.val_x[start : start + batch], acts, stats=stats)
        tgt = split.val_y[start : start + batch]
        sq += float(np.sum((out - tgt) ** 2))
        e, n = bit_errors(out[..., 0] + 1j * out[..., 1], tgt[..., 0] + 1j * tgt[..., 1], split.order)
        errors += e
        n_bits += n
    mse = sq / split.val_y.size
    q = QResult.from_counts(errors, n_bits)
    tail = stats["tail_hits"] / stats["total"] if stats.get("total") else 0.0
    return mse, q, tail


def _mse(params, acts, x, y, batch: int = 512) -> float:
    sq = 0.0
    for start in range(0, len(x), batch):
        out = equalizer_forward(params, x[start : start + batch], acts)
        sq += float(np.sum((out - y[start : start + batch]) ** 2))
    return sq / y.size


def _score(q_db: float, mse: float) -> tuple[float, float]:
    return (q_db, -mse)


def fit(
    params: EqualizerParams,
    acts: ActivationSet,
    split: Split,
    tc: TrainConfig,
    label: str = "train",
    stop_at_q: float | None = None,
) -> tuple[EqualizerParams, TrainingLog]:
    """Adam on the MSE loss with best-validation checkpointing.

    Epoch 0 records the starting point. The checkpoint kept is the one with
    the highest validation Q (lower validation MSE breaks ties); training
    stops after ``patience`` epochs without improvement, or as soon as the
    validation Q reaches ``stop_at_q`` when that is given.
    """
    rng = make_rng(tc.seed)
    state = AdamState.for_params(params.as_dict(), lr=tc.lr)
    current = params.as_dict()
    logbook = TrainingLog()

    val_mse, val_q, tail = _validate(params, acts, split)
    train_mse = _mse(params, acts, split.train_x, split.train_y)
    logbook.records.append(EpochRecord(0, train_mse, val_mse, val_q.q_db, tail))
    best_params, best_score = params, _score(val_q.q_db, val_mse)
    since_best = 0
    log.info("%s epoch 0: train %.5f val %.5f Q %s", label, train_mse, val_mse, format_q(val_q.q_db))

    n = len(split.train_x)
    for epoch in range(1, tc.epochs + 1):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, tc.batch_size):
            idx = order[start : start + tc.batch_size]
            p = EqualizerParams.from_dict(current)
            _, grads, loss = forward_backward(p, split.train_x[idx], acts, target=split.train_y[idx])
            if not math.isfinite(loss):
                raise TrainingError(f"{label}: non-finite loss at epoch {epoch}")
            current, state = adam_step(current, grads.as_dict(), state)
            losses.append(loss * len(idx))
        train_mse = float(np.sum(losses) / n)
        p = EqualizerParams.from_dict(current)
        val_mse, val_q, tail = _validate(p, acts, split)
        logbook.records.append(EpochRecord(epoch, train_mse, val_mse, val_q.q_db, tail))
        log.info(
            "%s epoch %d: train %.5f val %.5f Q %s tail %.3f",
            label, epoch, train_mse, val_mse, format_q(val_q.q_db), tail,
        )
        if tail >= TAIL_FRACTION_LIMIT:
            raise TrainingError(
                f"{label}: {tail:.3f} of PWL inputs sit on flat segments at epoch {epoch} (dead gradients)"
            )
        score = _score(val_q.q_db, val_mse)
        if score > best_score:
            best_params, best_score, logbook.best_epoch = p, score, epoch
            since_best = 0
            if stop_at_q is not None and val_q.q_db >= stop_at_q:
                break
        else:
            since_best += 1
            if since_best >= tc.patience:
                break
    return best_params, logbook


def pretrain(dataset: Dataset, tc: TrainConfig) -> tuple[EqualizerParams, TrainingLog]:
    split = split_dataset(dataset, tc)
    return fit(init_params(tc.seed, hidden=tc.hidden), EXACT, split, tc, "pretrain")


def retrain(
    params: EqualizerParams,
    sigmoid_spec: PwlSpec,
    tanh_spec: PwlSpec,
    dataset: Dataset,
    tc: TrainConfig,
) -> tuple[EqualizerParams, TrainingLog]:
    split = split_dataset(dataset, tc)
    acts = swap_activations(EXACT, sigmoid_spec, tanh_spec)
    return fit(params, acts, split, tc, f"retrain-K{tanh_spec.segments}")


def train_scratch(
    sigmoid_spec: PwlSpec,
    tanh_spec: PwlSpec,
    dataset: Dataset,
    tc: TrainConfig,
    stop_at_q: float | None = None,
) -> tuple[EqualizerParams, TrainingLog]:
    split = split_dataset(dataset, tc)
    acts = swap_activations(EXACT, sigmoid_spec, tanh_spec)
    params = init_params(tc.seed, hidden=tc.hidden)
    return fit(params, acts, split, tc, f"scratch-K{tanh_spec.segments}", stop_at_q=stop_at_q)
