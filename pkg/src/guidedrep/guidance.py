"""Multi-head model with a shared trunk, gradient reversal, and loss weighting.

Every head reads the last dense-stack output. The trunk gradient is the sum
of each head's input gradient scaled by its task weight and by ``alpha``
(``-1`` reverses it); head parameters always descend their own weighted loss.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import (
    Conv2D,
    Dense,
    Dropout,
    Flatten,
    GlobalAvgPool,
    ReLU,
    Sequential,
    Tensor,
    central_difference,
    cce_loss,
    mse_loss,
    relative_error,
    sigmoid,
    wbce_loss,
)
from .seeding import substream

CHECKPOINT_VERSION = 1

HEAD_LOSSES = {"main_binary": "wbce", "aux_regression": "mse", "adv_categorical": "cce"}


@dataclass(frozen=True)
class HeadSpec:
    name: str
    kind: str
    alpha: int = 1
    output_arity: int = 1
    target: str | None = None
    pos_weight: float = 1.0
    neg_weight: float = 1.0

    def __post_init__(self):
        if self.kind not in HEAD_LOSSES:
            raise ValueError(f"unknown head kind {self.kind!r}")
        if self.alpha not in (-1, 1):
            raise ValueError(f"alpha must be -1 or +1, got {self.alpha}")
        if self.output_arity < 1:
            raise ValueError("output_arity must be >= 1")
        if self.kind == "main_binary" and self.alpha != 1:
            raise ValueError("the main head cannot be adversarial")
        if self.kind != "adv_categorical" and self.output_arity != 1:
            raise ValueError(f"{self.kind} heads have a single output")

    @property
    def loss(self) -> str:
        return HEAD_LOSSES[self.kind]

    @property
    def target_key(self) -> str:
        return self.target or self.name

    @property
    def is_classification(self) -> bool:
        return self.kind != "aux_regression"


def main_head(pos_weight: float = 1.0, neg_weight: float = 1.0) -> HeadSpec:
    return HeadSpec("main", "main_binary", pos_weight=pos_weight, neg_weight=neg_weight)


def regression_head(name: str, target: str | None = None) -> HeadSpec:
    return HeadSpec(name, "aux_regression", target=target)


def categorical_head(name: str, n_classes: int, adversarial: bool = True, target: str | None = None) -> HeadSpec:
    return HeadSpec(name, "adv_categorical", alpha=-1 if adversarial else 1, output_arity=n_classes, target=target)


def grl_apply(upstream_grad: np.ndarray, alpha: int) -> np.ndarray:
    """Backward half of gradient reversal: scale by ``alpha``.

    The forward half is the identity, so there is nothing to apply there.
    """
    return upstream_grad if alpha == 1 else alpha * upstream_grad


@dataclass
class Batch:
    """Aligned rows of inputs, main labels, concept targets, and domains.

    Missing labels and targets are NaN; such rows contribute no loss and no
    gradient for that task.
    """

    inputs: np.ndarray
    labels: np.ndarray
    targets: dict[str, np.ndarray] = field(default_factory=dict)
    domain_ids: np.ndarray | None = None
    sample_ids: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.inputs)
        self.labels = np.asarray(self.labels, dtype=float)
        if len(self.labels) != n:
            raise ValueError("labels and inputs are misaligned")
        for key, value in self.targets.items():
            if len(value) != n:
                raise ValueError(f"target {key!r} misaligned with inputs")
        if self.domain_ids is None:
            self.domain_ids = np.zeros(n, dtype=int)
        if self.sample_ids is None:
            self.sample_ids = np.array([str(i) for i in range(n)])

    def __len__(self) -> int:
        return len(self.inputs)

    def subset(self, idx) -> "Batch":
        return Batch(
            self.inputs[idx],
            self.labels[idx],
            {k: v[idx] for k, v in self.targets.items()},
            self.domain_ids[idx],
            self.sample_ids[idx],
        )

    @staticmethod
    def concat(batches: Sequence["Batch"]) -> "Batch":
        keys = sorted(set().union(*(b.targets for b in batches)))
        targets = {}
        for k in keys:
            parts = [b.targets[k] if k in b.targets else np.full(len(b), np.nan) for b in batches]
            targets[k] = np.concatenate([np.asarray(p, dtype=float) for p in parts])
        return Batch(
            np.concatenate([b.inputs for b in batches]),
            np.concatenate([b.labels for b in batches]),
            targets,
            np.concatenate([b.domain_ids for b in batches]),
            np.concatenate([b.sample_ids for b in batches]),
        )

    def without_labels(self) -> "Batch":
        return dataclasses.replace(self, labels=np.full(len(self), np.nan))


@dataclass(frozen=True)
class ModelConfig:
    """Trunk architecture. An input shape of length 1 builds a dense-only trunk."""

    input_shape: tuple[int, ...] = (64, 64, 3)
    conv_channels: tuple[int, ...] = (8, 16, 32)
    dense_widths: tuple[int, ...] = (256, 128, 64)
    kernel: int = 3
    stride: int = 2
    dropout: float = 0.8
    l2: float = 1e-4
    dtype: str = "float64"
    input_offset: float = 0.0
    input_scale: float = 1.0


class MultiTaskModel:
    def __init__(self, config: ModelConfig, heads: Sequence[HeadSpec], seed: int = 0):
        specs = list(heads)
        mains = [h for h in specs if h.kind == "main_binary"]
        if len(mains) != 1:
            raise ValueError("exactly one main_binary head is required")
        names = [h.name for h in specs]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate head names: {names}")
        self.config = config
        self.seed = seed
        self.main_spec = mains[0]
        self.specs = [self.main_spec] + [h for h in specs if h is not self.main_spec]
        dtype = np.dtype(config.dtype)
        rng = substream(seed, "init")
        layers, taps = [], {}
        if len(config.input_shape) == 3:
            channels = config.input_shape[2]
            for i, out_ch in enumerate(config.conv_channels, start=1):
                layers += [Conv2D(channels, out_ch, rng, config.kernel, config.stride, dtype=dtype, name=f"conv{i}"),
                           ReLU()]
                taps[f"conv{i}"] = len(layers) - 1
                channels = out_ch
            layers.append(GlobalAvgPool())
            taps["gap"] = len(layers) - 1
            width = channels
        else:
            layers.append(Flatten())
            taps["input"] = 0
            width = int(np.prod(config.input_shape))
        for i, units in enumerate(config.dense_widths, start=1):
            layers += [Dense(width, units, rng, l2=config.l2, dtype=dtype, name=f"dense{i}"), ReLU()]
            taps[f"dense{i}"] = len(layers) - 1
            layers.append(Dropout(config.dropout))
            width = units
        taps["embedding"] = len(layers) - 1
        self.trunk = Sequential(layers, taps)
        self.embedding_width = width
        self.heads = {spec.name: Dense(width, spec.output_arity, rng, dtype=dtype, name=f"head.{spec.name}")
                      for spec in self.specs}

    @property
    def extra_specs(self) -> list[HeadSpec]:
        return self.specs[1:]

    @property
    def tap_names(self) -> list[str]:
        return list(self.trunk.taps)

    def trunk_params(self) -> list[Tensor]:
        return self.trunk.params()

    def head_params(self, name: str) -> list[Tensor]:
        return self.heads[name].params()

    def params(self) -> list[Tensor]:
        return self.trunk_params() + [p for spec in self.specs for p in self.head_params(spec.name)]

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()

    def dropout_layers(self) -> list[Dropout]:
        return [layer for layer in self.trunk.layers if isinstance(layer, Dropout)]

    def _prepare(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=self.config.dtype)
        if self.config.input_offset or self.config.input_scale != 1.0:
            x = (x - self.config.input_offset) * self.config.input_scale
        return x

    def forward(self, x: np.ndarray, training: bool = False, rng=None) -> dict[str, np.ndarray]:
        """Raw head outputs; the main head output is the sigmoid probability."""
        h = self.trunk.forward(self._prepare(x), training=training, rng=rng)
        out = {}
        for spec in self.specs:
            z = self.heads[spec.name].forward(h, training=training)
            out[spec.name] = sigmoid(z[:, 0]) if spec.kind == "main_binary" else (
                z[:, 0] if spec.kind == "aux_regression" else z)
        return out

    def backward(self, head_grads: dict[str, np.ndarray]) -> None:
        """Backpropagate per-head output gradients (already task-weighted)."""
        trunk_grad = None
        for spec in self.specs:
            g = head_grads[spec.name]
            g2 = g if g.ndim == 2 else g[:, None]
            h_grad = grl_apply(self.heads[spec.name].backward(g2), spec.alpha)
            trunk_grad = h_grad if trunk_grad is None else trunk_grad + h_grad
        self.trunk.backward(trunk_grad)

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        parts = [self.forward(x[i:i + batch_size])["main"] for i in range(0, len(x), batch_size)]
        return np.concatenate(parts) if parts else np.zeros(0)

    def activations(self, x: np.ndarray, tap: str, batch_size: int = 256) -> np.ndarray:
        if tap not in self.trunk.taps:
            raise KeyError(f"unknown tap {tap!r}; valid taps: {', '.join(self.tap_names)}")
        parts = []
        for i in range(0, len(x), batch_size):
            _, tapped = self.trunk.forward(self._prepare(x[i:i + batch_size]), training=False, collect=[tap])
            a = tapped[tap]
            parts.append(a.mean(axis=(1, 2)) if a.ndim == 4 else a)
        return np.concatenate(parts)

    def l2_penalty(self) -> float:
        return self.trunk.l2_penalty()

    def state(self) -> list[np.ndarray]:
        return [p.values.copy() for p in self.params()]

    def load_state(self, values: Sequence[np.ndarray]) -> None:
        params = self.params()
        if len(values) != len(params):
            raise ValueError("state does not match model parameters")
        for p, v in zip(params, values):
            if p.shape != v.shape:
                raise ValueError(f"shape mismatch for {p.name}: {p.shape} vs {v.shape}")
            p.values[...] = v


class LossWeighter:
    """Vanilla fixed weights or learned per-task log-variances.

    In uncertainty mode each task contributes ``exp(-s)/2 * L + s/2`` with
    ``s = log sigma^2``. With ``kendall_classification`` classification tasks
    use ``exp(-s) * L`` instead.
    """

    def __init__(self, tasks: Sequence[str], mode: str = "vanilla", lambdas: dict[str, float] | None = None,
                 classification_tasks: Sequence[str] = (), kendall_classification: bool = False):
        if mode not in ("vanilla", "uncertainty"):
            raise ValueError(f"unknown weighting mode {mode!r}")
        self.tasks = list(tasks)
        self.mode = mode
        lambdas = dict(lambdas or {})
        unknown = set(lambdas) - set(self.tasks)
        if unknown:
            raise ValueError(f"lambdas for unknown tasks: {sorted(unknown)}")
        self.lambdas = {t: float(lambdas.get(t, 1.0)) for t in self.tasks}
        if any(v < 0 for v in self.lambdas.values()):
            raise ValueError("vanilla weights must be nonnegative")
        self.classification_tasks = set(classification_tasks)
        self.kendall_classification = kendall_classification
        self.log_vars = Tensor(np.zeros(len(self.tasks)), "log_vars")

    @classmethod
    def for_model(cls, model: MultiTaskModel, mode: str = "vanilla", **kwargs) -> "LossWeighter":
        return cls([s.name for s in model.specs], mode,
                   classification_tasks=[s.name for s in model.specs if s.is_classification], **kwargs)

    def params(self) -> list[Tensor]:
        return [self.log_vars] if self.mode == "uncertainty" else []

    def _factor(self, task: str) -> float:
        return 1.0 if (self.kendall_classification and task in self.classification_tasks) else 0.5

    def weights(self) -> dict[str, float]:
        if self.mode == "vanilla":
            return dict(self.lambdas)
        return {t: self._factor(t) * float(np.exp(-s)) for t, s in zip(self.tasks, self.log_vars.values)}

    def objective(self, losses: dict[str, float]) -> float:
        w = self.weights()
        total = sum(w[t] * losses[t] for t in self.tasks)
        if self.mode == "uncertainty":
            total += 0.5 * float(np.sum(self.log_vars.values))
        return float(total)

    def backward(self, losses: dict[str, float]) -> None:
        if self.mode != "uncertainty":
            return
        for i, t in enumerate(self.tasks):
            self.log_vars.grad[i] += uncertainty_grad(self.log_vars.values[i], losses[t], self._factor(t))

    def state(self) -> dict:
        return {"tasks": self.tasks, "mode": self.mode, "lambdas": self.lambdas,
                "classification_tasks": sorted(self.classification_tasks),
                "kendall_classification": self.kendall_classification}


def uncertainty_grad(s: float, loss: float, factor: float = 0.5) -> float:
    """Derivative of ``factor*exp(-s)*loss + s/2`` with respect to ``s``."""
    return float(-factor * np.exp(-s) * loss + 0.5)


def _require_targets(model: MultiTaskModel, batch: Batch) -> None:
    for spec in model.extra_specs:
        if spec.target_key not in batch.targets:
            raise KeyError(f"batch has no targets {spec.target_key!r} for head {spec.name!r}")


def task_losses(model: MultiTaskModel, batch: Batch, training: bool = False, rng=None):
    """Forward pass; returns per-task mean losses and d(mean loss)/d(head output).

    A task's mean runs over the rows that carry its target.
    """
    _require_targets(model, batch)
    outputs = model.forward(batch.inputs, training=training, rng=rng)
    losses, grads = {}, {}
    for spec in model.specs:
        out = outputs[spec.name]
        target = batch.labels if spec.kind == "main_binary" else np.asarray(batch.targets[spec.target_key], float)
        present = ~np.isnan(target)
        count = int(present.sum())
        grad = np.zeros_like(out, dtype=float)
        if count == 0:
            losses[spec.name] = 0.0
            grads[spec.name] = grad
            continue
        if spec.kind == "main_binary":
            p = out[present]
            loss, dp = wbce_loss(p, target[present], spec.pos_weight, spec.neg_weight)
            grad[present] = dp * p * (1.0 - p) / count
        elif spec.kind == "aux_regression":
            loss, dz = mse_loss(out[present], target[present])
            grad[present] = dz / count
        else:
            loss, dz = cce_loss(out[present], target[present].astype(int))
            grad[present] = dz / count
        losses[spec.name] = float(np.sum(loss) / count)
        grads[spec.name] = grad
    return losses, grads


def combined_objective(model: MultiTaskModel, batch: Batch, weighter: LossWeighter,
                       training: bool = False, rng=None) -> tuple[float, dict[str, float]]:
    if len(batch) == 0:
        raise ValueError("empty batch")
    losses, _ = task_losses(model, batch, training=training, rng=rng)
    return weighter.objective(losses), losses


def backward_all(model: MultiTaskModel, batch: Batch, weighter: LossWeighter,
                 training: bool = False, rng=None) -> tuple[float, dict[str, float]]:
    """Forward + backward on ``batch``; accumulates gradients into every parameter.

    Returns the combined objective (without the L2 penalty) and per-task losses.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    losses, grads = task_losses(model, batch, training=training, rng=rng)
    w = weighter.weights()
    model.backward({name: w[name] * g for name, g in grads.items()})
    weighter.backward(losses)
    return weighter.objective(losses), losses


@dataclass
class GradCheckReport:
    max_rel_error: float
    valid: bool = True
    reason: str = ""
    per_param: dict[str, float] = field(default_factory=dict)


def gradient_check(model: MultiTaskModel, batch: Batch, weighter: LossWeighter, eps: float = 1e-5,
                   training: bool = False, replay_masks: bool = True, seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients with central differences of the objective.

    With reversal active the trunk update is not the gradient of the combined
    objective, so the reference for trunk parameters is assembled task by
    task: ``sum_t w_t * alpha_t * dL_t/dtheta`` plus the L2 term.
    """
    dropouts = [d for d in model.dropout_layers() if d.rate > 0]
    if training and dropouts and not replay_masks:
        return GradCheckReport(float("nan"), valid=False,
                               reason="dropout active in training mode without mask replay")
    rng = substream(seed, "dropout", 0)
    for d in dropouts:
        d.replay = False
        d.mask = None
    model.zero_grad()
    for p in weighter.params():
        p.zero_grad()
    backward_all(model, batch, weighter, training=training, rng=rng)
    if training:
        for d in dropouts:
            d.replay = True

    def losses_now():
        return task_losses(model, batch, training=training, rng=rng)[0]

    trunk_ids = {id(p) for p in model.trunk_params()}
    w = weighter.weights()
    alpha = {s.name: s.alpha for s in model.specs}
    report = GradCheckReport(0.0)
    try:
        for p in model.params():
            if id(p) in trunk_ids:
                coef = {t: w[t] * alpha[t] for t in weighter.tasks}
            else:
                coef = dict(w)

            def fn(coef=coef):
                ls = losses_now()
                return sum(coef[t] * ls[t] for t in weighter.tasks) + model.l2_penalty()

            err = relative_error(p.grad, central_difference(fn, p, eps))
            report.per_param[p.name] = err
            report.max_rel_error = max(report.max_rel_error, err)
        for p in weighter.params():
            err = relative_error(p.grad, central_difference(lambda: weighter.objective(losses_now()), p, eps))
            report.per_param[p.name] = err
            report.max_rel_error = max(report.max_rel_error, err)
    finally:
        for d in dropouts:
            d.replay = False
    return report


def save_checkpoint(path, model: MultiTaskModel, weighter: LossWeighter | None = None) -> None:
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": dataclasses.asdict(model.config),
        "seed": model.seed,
        "heads": [dataclasses.asdict(s) for s in model.specs],
        "params": [[p.name, list(p.shape)] for p in model.params()],
        "weighter": weighter.state() if weighter is not None else None,
    }
    arrays = {f"p{i:03d}": p.values for i, p in enumerate(model.params())}
    if weighter is not None:
        arrays["log_vars"] = weighter.log_vars.values
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta)), **arrays)


def load_checkpoint(path) -> tuple[MultiTaskModel, LossWeighter | None]:
    with np.load(Path(path), allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        cfg = meta["config"]
        for key in ("input_shape", "conv_channels", "dense_widths"):
            cfg[key] = tuple(cfg[key])
        model = MultiTaskModel(ModelConfig(**cfg), [HeadSpec(**h) for h in meta["heads"]], seed=meta["seed"])
        model.load_state([data[f"p{i:03d}"] for i in range(len(model.params()))])
        weighter = None
        if meta["weighter"] is not None:
            ws = meta["weighter"]
            weighter = LossWeighter(ws["tasks"], ws["mode"], ws["lambdas"], ws["classification_tasks"],
                                    ws["kendall_classification"])
            weighter.log_vars.values[...] = data["log_vars"]
    return model, weighter
