"""Linear probes on stored activations, and PCA projections for plotting."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .guidance import MultiTaskModel
from .seeding import substream


@dataclass
class ActivationMatrix:
    sample_ids: np.ndarray
    layer: str
    values: np.ndarray

    def __post_init__(self):
        if len(self.sample_ids) != len(self.values):
            raise ValueError("one activation row per sample is required")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["sample_id"] + [f"{self.layer}_{j}" for j in range(self.values.shape[1])])
            for sid, row in zip(self.sample_ids, self.values):
                writer.writerow([sid] + [repr(float(v)) for v in row])


def extract_activations(model: MultiTaskModel, inputs: np.ndarray, layer: str,
                        sample_ids=None) -> ActivationMatrix:
    """Inference-mode activations at a tap; 4-D maps are average-pooled."""
    values = model.activations(inputs, layer)
    ids = np.arange(len(inputs)).astype(str) if sample_ids is None else np.asarray(sample_ids)
    return ActivationMatrix(ids, layer, values)


@dataclass
class ProbeResult:
    kind: str
    weights: np.ndarray
    bias: np.ndarray
    score: float
    train_score: float
    n_train: int
    n_test: int

    @property
    def metric(self) -> str:
        return "r2" if self.kind == "regression" else "accuracy"


def probe_split(n: int, train_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    order = substream(seed, "probe").permutation(n)
    n_train = int(round(n * train_fraction))
    n_train = min(max(n_train, 1), n - 1)
    return np.sort(order[:n_train]), np.sort(order[n_train:])


def r2_score(y: np.ndarray, pred: np.ndarray) -> float:
    y = np.asarray(y, float)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        raise ValueError("R^2 undefined for constant targets")
    return 1.0 - float(np.sum((y - pred) ** 2)) / ss_tot


def ridge_fit(x: np.ndarray, y: np.ndarray, ridge: float = 1e-3) -> tuple[np.ndarray, float]:
    """Least squares with an unpenalized intercept; ``ridge=0`` is plain least squares."""
    x_mean, y_mean = x.mean(axis=0), y.mean()
    xc, yc = x - x_mean, y - y_mean
    if ridge > 0:
        d = x.shape[1]
        xa = np.vstack([xc, np.sqrt(ridge) * np.eye(d)])
        ya = np.concatenate([yc, np.zeros(d)])
    else:
        xa, ya = xc, yc
    w, *_ = np.linalg.lstsq(xa, ya, rcond=None)
    return w, float(y_mean - x_mean @ w)


def _standardize(x_train: np.ndarray, x_test: np.ndarray):
    mu = x_train.mean(axis=0)
    sd = x_train.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    return (x_train - mu) / sd, (x_test - mu) / sd


def logistic_fit(x: np.ndarray, y: np.ndarray, n_classes: int, ridge: float = 1e-3):
    """Multinomial logistic regression by L-BFGS on the mean cross-entropy."""
    n, d = x.shape
    onehot = np.eye(n_classes)[y]

    def loss_grad(theta):
        w = theta[: d * n_classes].reshape(d, n_classes)
        b = theta[d * n_classes:]
        z = x @ w + b
        z = z - z.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        loss = -np.sum(onehot * logp) / n + 0.5 * ridge * np.sum(w ** 2)
        g = (np.exp(logp) - onehot) / n
        return loss, np.concatenate([(x.T @ g + ridge * w).ravel(), g.sum(axis=0)])

    theta0 = np.zeros(d * n_classes + n_classes)
    res = optimize.minimize(loss_grad, theta0, jac=True, method="L-BFGS-B", options={"maxiter": 500})
    return res.x[: d * n_classes].reshape(d, n_classes), res.x[d * n_classes:]


def fit_linear_probe(acts, targets, kind: str = "regression", train_fraction: float = 0.8,
                     ridge: float = 1e-3, seed: int = 0) -> ProbeResult:
    """Fit on a seeded train fraction and score the held-out rows.

    Regression reports R^2 (negative when worse than the mean); classification
    reports accuracy.
    """
    x = np.asarray(acts.values if isinstance(acts, ActivationMatrix) else acts, float)
    y = np.asarray(targets)
    if len(x) < 10:
        raise ValueError("linear probes need at least 10 rows")
    if len(y) != len(x):
        raise ValueError("targets misaligned with activations")
    tr, te = probe_split(len(x), train_fraction, seed)
    if kind == "regression":
        y = y.astype(float)
        w, b = ridge_fit(x[tr], y[tr], ridge)
        return ProbeResult(kind, w, np.array([b]), r2_score(y[te], x[te] @ w + b),
                           r2_score(y[tr], x[tr] @ w + b), len(tr), len(te))
    if kind == "classification":
        classes, y_idx = np.unique(y.astype(int), return_inverse=True)
        xtr, xte = _standardize(x[tr], x[te])
        w, b = logistic_fit(xtr, y_idx[tr], len(classes), ridge)
        acc_te = float(np.mean(np.argmax(xte @ w + b, axis=1) == y_idx[te]))
        acc_tr = float(np.mean(np.argmax(xtr @ w + b, axis=1) == y_idx[tr]))
        return ProbeResult(kind, w, b, acc_te, acc_tr, len(tr), len(te))
    raise ValueError(f"unknown probe kind {kind!r}")


@dataclass
class Projection:
    coords: np.ndarray
    explained_variance: np.ndarray
    explained_ratio: np.ndarray
    components: np.ndarray


def pca_project(acts, components: int = 2) -> Projection:
    """Mean-centred projection onto the top eigenvectors of the covariance."""
    x = np.asarray(acts.values if isinstance(acts, ActivationMatrix) else acts, float)
    if len(x) < components:
        raise ValueError("need at least as many rows as components")
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / len(x)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]
    # Sign convention: largest-magnitude loading of each component is positive.
    flip = np.sign(evecs[np.argmax(np.abs(evecs), axis=0), np.arange(evecs.shape[1])])
    evecs = evecs * np.where(flip == 0, 1.0, flip)
    k = min(components, x.shape[1])
    total = evals.sum()
    ratio = evals[:k] / total if total > 0 else np.zeros(k)
    coords = xc @ evecs[:, :k]
    if k < components:
        coords = np.hstack([coords, np.zeros((len(x), components - k))])
    return Projection(coords, evals[:k], ratio, evecs[:, :k])


def write_projection_csv(path, sample_ids, coords, labels, concept) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sample_id", "x", "y", "label", "concept"])
        for sid, (x, y), lab, c in zip(sample_ids, coords[:, :2], labels, concept):
            writer.writerow([sid, repr(float(x)), repr(float(y)), int(lab), repr(float(c))])
