"""Training loop (Adam + binary cross entropy + early stopping) and evaluation."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .container import atomic_write, atomic_write_json
from .dataset import Example, alternate_labels, batch, collate, collate_pairs, epoch_rng
from .errors import ArgumentError, NumericError
from .model import ModelState, decisions_correct, head, predict_arrays, similarity_blocks

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    lr: float = 1e-3
    batch_size: int = 64
    patience: int = 5
    monitor: str = "val_loss"
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    # Both slot orderings of a pair go into the same batch and share one
    # forward pass; False shuffles the two examples independently.
    pair_batching: bool = True
    dtype: str = "float64"

    def __post_init__(self):
        if self.epochs < 1:
            raise ArgumentError(f"epochs must be >= 1, got {self.epochs}")
        if not 0 <= self.patience < self.epochs:
            raise ArgumentError(f"need 0 <= patience < epochs, got {self.patience}")
        if self.monitor != "val_loss":
            raise ArgumentError("only 'val_loss' can be monitored")
        if self.pair_batching and self.batch_size % 2:
            raise ArgumentError("pair batching needs an even batch size")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float
    seconds: float = field(default=0.0, compare=False)


@dataclass
class TrainLog:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False

    @property
    def best(self) -> EpochRecord:
        return self.epochs[self.best_epoch]

    def to_rows(self, include_timing: bool = False) -> list[dict]:
        rows = []
        for r in self.epochs:
            row = {
                "epoch": r.epoch,
                "train_loss": r.train_loss,
                "val_loss": r.val_loss,
                "val_acc": r.val_acc,
            }
            if include_timing:
                row["seconds"] = r.seconds
            rows.append(row)
        return rows

    def to_dict(self, include_timing: bool = False) -> dict:
        return {
            "best_epoch": self.best_epoch,
            "stopped_early": self.stopped_early,
            "epochs": self.to_rows(include_timing),
        }

    def to_csv(self, include_timing: bool = False) -> str:
        rows = self.to_rows(include_timing)
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]) if rows else ["epoch"], lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
        return buf.getvalue()

    def write_csv(self, path, include_timing: bool = False):
        atomic_write(path, self.to_csv(include_timing).encode())

    def write_json(self, path, include_timing: bool = False, **extra):
        atomic_write_json(path, {**extra, **self.to_dict(include_timing)})


def _model_dtype(state: ModelState):
    return state.params["head.w"].data.dtype


def _bce(p: np.ndarray, y: np.ndarray) -> float:
    pc = np.clip(p, ad.PROB_CLAMP, 1 - ad.PROB_CLAMP)
    return float(-np.mean(y * np.log(pc) + (1 - y) * np.log(1 - pc)))


def score_pairs(model, pairs, chunk: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """Model output for both orderings of every pair, in pair order.

    ``model`` is a :class:`ModelState` or any callable mapping collated
    ``{feature: (eeg, matched, mismatched)}`` arrays to the same pair of
    arrays that :func:`predict_arrays` returns.
    """
    scorer = model if callable(model) else (lambda inputs: predict_arrays(model, inputs))
    dtype = np.float64 if callable(model) else _model_dtype(model)
    first, second = [], []
    for i in range(0, len(pairs), chunk):
        p1, p2 = scorer(collate_pairs(pairs[i : i + chunk], dtype=dtype))
        first.append(np.asarray(p1, dtype=float))
        second.append(np.asarray(p2, dtype=float))
    return np.concatenate(first), np.concatenate(second)


def evaluate(model, pairs, chunk: int = 32) -> float:
    """Fraction of correct decisions over both orderings of every pair."""
    if not pairs:
        raise ArgumentError("cannot evaluate on an empty test set")
    p1, p2 = score_pairs(model, pairs, chunk)
    return float(decisions_correct(p1, p2).mean())


def validation_metrics(model, pairs, chunk: int = 32) -> tuple[float, float]:
    p1, p2 = score_pairs(model, pairs, chunk)
    loss = 0.5 * (_bce(p1, np.ones_like(p1)) + _bce(p2, np.zeros_like(p2)))
    return loss, float(decisions_correct(p1, p2).mean())


def _pair_batch_loss(state: ModelState, pairs, dtype):
    inputs = collate_pairs(pairs, dtype=dtype)
    blocks = similarity_blocks(state, inputs)
    p_match_a = head(state, blocks)
    p_match_b = head(state, [(b, a) for a, b in blocks])
    probs = ad.concat([p_match_a, p_match_b], axis=0)
    labels = np.concatenate([np.ones(len(pairs)), np.zeros(len(pairs))])
    return ad.bce_loss(probs, labels)


def _example_batch_loss(state: ModelState, examples: list[Example], dtype):
    inputs, labels = collate(examples, dtype=dtype)
    blocks = similarity_blocks(state, inputs)
    return ad.bce_loss(head(state, blocks), labels)


def train(
    model: ModelState, train_pairs, val_pairs, config: TrainConfig = TrainConfig()
) -> tuple[ModelState, TrainLog]:
    """Fit ``model`` (a copy is trained) and return the best-validation weights.

    Each epoch visits every pair in both slot orderings, in an order fixed by
    ``(config.seed, epoch)``. Training stops after ``config.patience`` epochs
    without a lower validation loss, or after ``config.epochs``.
    """
    if not train_pairs or not val_pairs:
        raise ArgumentError("training and validation sets must be non-empty")
    dtype = np.dtype(config.dtype)
    state = model.astype(dtype)
    params = state.parameters()
    examples = None if config.pair_batching else alternate_labels(train_pairs)

    logbook = TrainLog()
    best_loss = np.inf
    best_weights = state.weights()
    since_best = 0
    step = 0
    for epoch in range(config.epochs):
        tic = time.perf_counter()
        total, count = 0.0, 0
        if config.pair_batching:
            order = epoch_rng(config.seed, epoch).permutation(len(train_pairs))
            half = config.batch_size // 2
            batches = [[train_pairs[j] for j in order[i : i + half]] for i in range(0, len(order), half)]
        else:
            batches = list(batch(examples, config.batch_size, config.seed, epoch))
        for b_idx, items in enumerate(batches):
            state.zero_grad()
            if config.pair_batching:
                loss = _pair_batch_loss(state, items, dtype)
                n_items = 2 * len(items)
            else:
                loss = _example_batch_loss(state, items, dtype)
                n_items = len(items)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss {value} at epoch {epoch}, batch {b_idx}")
            loss.backward()
            step += 1
            ad.adam_step(params, None, config.lr, config.beta1, config.beta2, config.eps, step)
            total += value * n_items
            count += n_items
        val_loss, val_acc = validation_metrics(state, val_pairs)
        if not np.isfinite(val_loss):
            raise NumericError(f"non-finite validation loss at epoch {epoch}")
        logbook.epochs.append(
            EpochRecord(epoch, total / count, val_loss, val_acc, time.perf_counter() - tic)
        )
        log.debug("epoch %d train %.4f val %.4f acc %.3f", epoch, total / count, val_loss, val_acc)
        if val_loss < best_loss:
            best_loss = val_loss
            best_weights = state.weights()
            logbook.best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience and config.patience > 0:
                logbook.stopped_early = True
                break
    state.load_weights(best_weights)
    return state, logbook
