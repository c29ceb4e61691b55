"""Mini-batch training with Nesterov SGD and early stopping on total validation loss."""

from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from .autodiff import NesterovSGD
from .guidance import Batch, LossWeighter, MultiTaskModel, backward_all, combined_objective
from .seeding import substream

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    momentum: float = 0.9
    batch_size: int = 32
    max_epochs: int = 30
    patience: int = 5
    seed: int = 0
    weighting: str = "uncertainty"
    kendall_classification: bool = False
    transductive: bool = False
    pos_weight: float | None = None
    neg_weight: float | None = None

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")


def class_weights(labels: np.ndarray) -> tuple[float, float]:
    """``(pos_weight, neg_weight)`` = (negative fraction, positive fraction)."""
    y = np.asarray(labels, float)
    y = y[~np.isnan(y)]
    if y.size == 0:
        return 1.0, 1.0
    pos = float(np.mean(y == 1))
    return 1.0 - pos, pos


@dataclass
class EpochRecord:
    epoch: int
    train_losses: dict[str, float]
    val_losses: dict[str, float]
    val_total: float
    log_vars: dict[str, float]


@dataclass
class TrainHistory:
    tasks: list[str]
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0

    @property
    def val_totals(self) -> list[float]:
        return [r.val_total for r in self.records]

    def to_csv(self, path) -> None:
        header = (["epoch"] + [f"train_{t}" for t in self.tasks] + [f"val_{t}" for t in self.tasks]
                  + ["val_total"] + [f"s_{t}" for t in self.tasks])
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for r in self.records:
                writer.writerow([r.epoch] + [repr(r.train_losses[t]) for t in self.tasks]
                                + [repr(r.val_losses[t]) for t in self.tasks] + [repr(r.val_total)]
                                + [repr(r.log_vars[t]) for t in self.tasks])


def early_stop_check(val_losses, patience: int) -> tuple[bool, int]:
    """Stop once the last ``patience`` epochs all fail to beat the best so far.

    Only strict improvement counts. Epochs are 1-based.
    """
    if len(val_losses) == 0:
        raise ValueError("need at least one recorded epoch")
    best_epoch, best = 1, val_losses[0]
    since = 0
    for epoch, loss in enumerate(val_losses[1:], start=2):
        if loss < best:
            best, best_epoch, since = loss, epoch, 0
        else:
            since += 1
    return since >= patience, best_epoch


def evaluate_losses(model: MultiTaskModel, weighter: LossWeighter, data: Batch, batch_size: int = 256):
    """Row-weighted per-task losses and combined objective over a whole split."""
    totals = {t: 0.0 for t in weighter.tasks}
    counts = {t: 0 for t in weighter.tasks}
    for start in range(0, len(data), batch_size):
        chunk = data.subset(slice(start, start + batch_size))
        _, losses = combined_objective(model, chunk, weighter)
        for spec in model.specs:
            target = chunk.labels if spec.kind == "main_binary" else chunk.targets[spec.target_key]
            k = int(np.sum(~np.isnan(np.asarray(target, float))))
            totals[spec.name] += losses[spec.name] * k
            counts[spec.name] += k
    losses = {t: totals[t] / counts[t] if counts[t] else 0.0 for t in weighter.tasks}
    return weighter.objective(losses), losses


def with_class_weights(model: MultiTaskModel, pos_weight: float, neg_weight: float) -> None:
    model.main_spec = dataclasses.replace(model.main_spec, pos_weight=pos_weight, neg_weight=neg_weight)
    model.specs[0] = model.main_spec


def train(model: MultiTaskModel, weighter: LossWeighter, train_set: Batch, val_set: Batch,
          config: TrainConfig, extra_set: Batch | None = None) -> TrainHistory:
    """Train in place; the best-validation parameters are restored on exit.

    ``extra_set`` rows (labels ignored) join the extra tasks only, which is
    the transductive variant; it is used only when ``config.transductive``.
    """
    pos_w, neg_w = class_weights(train_set.labels)
    with_class_weights(model, config.pos_weight if config.pos_weight is not None else pos_w,
                       config.neg_weight if config.neg_weight is not None else neg_w)
    data = train_set
    if config.transductive and extra_set is not None and len(extra_set):
        data = Batch.concat([train_set, extra_set.without_labels()])
    params = model.params() + weighter.params()
    opt = NesterovSGD(params, config.lr, config.momentum)
    history = TrainHistory(list(weighter.tasks))
    best_total, best_state = np.inf, None
    n = len(data)
    for epoch in range(1, config.max_epochs + 1):
        order = substream(config.seed, "shuffle", epoch).permutation(n)
        sums = {t: 0.0 for t in weighter.tasks}
        n_batches = 0
        for b, start in enumerate(range(0, n, config.batch_size)):
            batch = data.subset(order[start:start + config.batch_size])
            opt.lookahead()
            opt.zero_grad()
            total, losses = backward_all(model, batch, weighter, training=True,
                                         rng=substream(config.seed, "dropout", epoch, b))
            if not np.isfinite(total):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}, batch {b}: {losses}")
            try:
                opt.step()
            except FloatingPointError as exc:
                raise FloatingPointError(f"epoch {epoch}, batch {b}: {exc}") from None
            for t in sums:
                sums[t] += losses[t]
            n_batches += 1
        val_total, val_losses = evaluate_losses(model, weighter, val_set)
        if not np.isfinite(val_total):
            raise FloatingPointError(f"non-finite validation loss at epoch {epoch}")
        history.records.append(EpochRecord(
            epoch, {t: sums[t] / n_batches for t in sums}, val_losses, val_total,
            dict(zip(weighter.tasks, map(float, weighter.log_vars.values)))))
        log.debug("epoch %d val_total %.5f %s", epoch, val_total, val_losses)
        if val_total < best_total:
            best_total = val_total
            best_state = (model.state(), weighter.log_vars.values.copy())
        stop, best_epoch = early_stop_check(history.val_totals, config.patience)
        history.best_epoch = best_epoch
        history.stopped_epoch = epoch
        if stop:
            break
    if best_state is not None:
        model.load_state(best_state[0])
        weighter.log_vars.values[...] = best_state[1]
    return history
