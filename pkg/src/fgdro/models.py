"""Per-sample loss models and client datasets.

Three kinds are built in:

* ``QUADRATIC``: ``0.5 * ||w - center||^2``, independent of the sample. Each
  client carries its own center, which gives closed-form optima.
* ``LEAST_SQUARES``: ``0.5 * (x.w - y)^2``.
* ``LOGISTIC``: binary cross-entropy with labels in {0, 1}, written as
  ``softplus(x.w) - y * x.w``.

Every kind accepts an optional ``l2`` penalty ``0.5 * l2 * ||w||^2``. All
losses are nonnegative.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np
from scipy.special import expit

from .core import ShapeError


class LossKind(str, enum.Enum):
    QUADRATIC = "QUADRATIC"
    LEAST_SQUARES = "LEAST_SQUARES"
    LOGISTIC = "LOGISTIC"


class Sample(NamedTuple):
    features: np.ndarray
    target: float


@dataclass(frozen=True)
class LossModel:
    kind: LossKind
    l2: float = 0.0
    center: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", LossKind(self.kind))
        if self.kind is LossKind.QUADRATIC:
            if self.center is None:
                raise ValueError("QUADRATIC loss needs a center")
            object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(-1))
        if self.l2 < 0:
            raise ValueError("l2 must be nonnegative")

    @classmethod
    def quadratic(cls, center, l2: float = 0.0) -> "LossModel":
        return cls(LossKind.QUADRATIC, l2, np.asarray(center, dtype=np.float64))

    @classmethod
    def least_squares(cls, l2: float = 0.0) -> "LossModel":
        return cls(LossKind.LEAST_SQUARES, l2)

    @classmethod
    def logistic(cls, l2: float = 0.0) -> "LossModel":
        return cls(LossKind.LOGISTIC, l2)


@dataclass(frozen=True)
class ClientDataset:
    """Samples of one client, stored as a feature matrix and a target vector."""

    X: np.ndarray
    y: np.ndarray
    client_id: int = 0

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        if X.shape[0] == 0:
            raise ValueError(f"client {self.client_id}: dataset is empty")
        if X.shape[0] != y.shape[0]:
            raise ValueError(f"client {self.client_id}: {X.shape[0]} feature rows but {y.shape[0]} targets")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @classmethod
    def from_samples(cls, samples: Sequence[Sample], client_id: int = 0) -> "ClientDataset":
        if len(samples) == 0:
            raise ValueError(f"client {client_id}: dataset is empty")
        X = np.stack([np.asarray(s.features, dtype=np.float64).reshape(-1) for s in samples])
        y = np.array([float(s.target) for s in samples])
        return cls(X, y, client_id)

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @property
    def samples(self) -> list[Sample]:
        return list(iter(self))

    def __iter__(self) -> Iterator[Sample]:
        for x, t in zip(self.X, self.y):
            yield Sample(x, float(t))

    def subset(self, idx: np.ndarray) -> "ClientDataset":
        return ClientDataset(self.X[idx], self.y[idx], self.client_id)


def _check_dim(model: LossModel, w: np.ndarray, X: np.ndarray | None) -> None:
    if w.ndim != 1:
        raise ShapeError(f"w must be 1-D, got shape {w.shape}")
    if model.kind is LossKind.QUADRATIC:
        if model.center.shape != w.shape:
            raise ShapeError(f"w has dimension {w.shape[0]}, center has {model.center.shape[0]}")
    elif X is not None and X.shape[-1] != w.shape[0]:
        raise ShapeError(f"w has dimension {w.shape[0]}, features have {X.shape[-1]}")


def _softplus(z: np.ndarray) -> np.ndarray:
    # log(1 + exp(z)) without overflow for large |z|
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def batch_losses(model: LossModel, w: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-sample losses for the rows of ``X``."""
    w = np.asarray(w, dtype=np.float64)
    _check_dim(model, w, X)
    penalty = 0.5 * model.l2 * float(w @ w) if model.l2 else 0.0
    if model.kind is LossKind.QUADRATIC:
        diff = w - model.center
        return np.full(X.shape[0], 0.5 * float(np.sum(diff * diff)) + penalty)
    z = X @ w
    if model.kind is LossKind.LEAST_SQUARES:
        return 0.5 * (z - y) ** 2 + penalty
    return _softplus(z) - y * z + penalty


def batch_loss_grad(model: LossModel, w: np.ndarray, X: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean loss and mean gradient over the rows of ``X``."""
    w = np.asarray(w, dtype=np.float64)
    _check_dim(model, w, X)
    if model.kind is LossKind.QUADRATIC:
        diff = w - model.center
        # same reduction as ClientPool so both paths agree bit for bit
        loss, grad = 0.5 * float(np.sum(diff * diff)), diff
    else:
        z = X @ w
        if model.kind is LossKind.LEAST_SQUARES:
            r = z - y
            loss = float(np.mean(0.5 * r * r))
        else:
            r = expit(z) - y
            loss = float(np.mean(_softplus(z) - y * z))
        grad = X.T @ r / X.shape[0]
    if model.l2:
        loss += 0.5 * model.l2 * float(w @ w)
        grad = grad + model.l2 * w
    return loss, grad


def loss_value(model: LossModel, w: np.ndarray, z: Sample) -> float:
    x = np.asarray(z.features, dtype=np.float64).reshape(1, -1)
    return float(batch_losses(model, w, x, np.array([float(z.target)]))[0])


def loss_grad(model: LossModel, w: np.ndarray, z: Sample) -> np.ndarray:
    x = np.asarray(z.features, dtype=np.float64).reshape(1, -1)
    return batch_loss_grad(model, w, x, np.array([float(z.target)]))[1]


def client_mean_loss(model: LossModel, w: np.ndarray, ds: ClientDataset) -> float:
    # np.mean accumulates pairwise
    return float(np.mean(batch_losses(model, w, ds.X, ds.y)))


def client_mean_grad(model: LossModel, w: np.ndarray, ds: ClientDataset) -> np.ndarray:
    return batch_loss_grad(model, w, ds.X, ds.y)[1]


def client_loss_grad(model: LossModel, w: np.ndarray, ds: ClientDataset) -> tuple[float, np.ndarray]:
    return batch_loss_grad(model, w, ds.X, ds.y)


# ---------------------------------------------------------------------------
# CSV ingestion: one row per sample, feature columns followed by the target


def load_dataset_csv(path: str | Path, client_id: int = 0, header: bool | None = None) -> ClientDataset:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise ValueError(f"{path}: no rows")
    if header is None:
        try:
            [float(c) for c in rows[0]]
            header = False
        except ValueError:
            header = True
    if header:
        rows = rows[1:]
    data = np.array([[float(c) for c in r] for r in rows], dtype=np.float64)
    if data.ndim != 2 or data.shape[1] < 2:
        raise ValueError(f"{path}: need at least one feature column and a target column")
    return ClientDataset(data[:, :-1], data[:, -1], client_id)


def save_dataset_csv(ds: ClientDataset, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"x{j}" for j in range(ds.dim)] + ["target"])
        for x, t in zip(ds.X, ds.y):
            writer.writerow([repr(float(v)) for v in x] + [repr(float(t))])
