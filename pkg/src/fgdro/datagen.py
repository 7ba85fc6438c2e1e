"""Synthetic heterogeneous clients and Dirichlet label partitioning."""

from __future__ import annotations

import enum
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .models import ClientDataset, LossModel

log = logging.getLogger(__name__)


class SyntheticKind(str, enum.Enum):
    QUADRATIC_CLIENTS = "QUADRATIC_CLIENTS"
    LINREG_CLIENTS = "LINREG_CLIENTS"
    LOGREG_CLIENTS = "LOGREG_CLIENTS"


@dataclass(frozen=True)
class SyntheticSpec:
    """Per-client optima are ``w* + delta_i`` with ``delta_i ~ heterogeneity * N(0, I)``.

    For QUADRATIC_CLIENTS the shared optimum ``w*`` is the origin and the
    samples are placeholders (the loss ignores them). For the regression
    kinds ``w* ~ N(0, I)``, features are standard normal, and ``noise_std``
    scales Gaussian noise on the targets (LINREG) or on the logits before
    thresholding (LOGREG, which flips labels near the boundary).
    """

    kind: SyntheticKind
    N: int
    dim: int
    heterogeneity: float = 1.0
    sizes: tuple[int, ...] | None = None
    noise_std: float = 0.1
    seed: int = 0
    l2: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", SyntheticKind(self.kind))
        sizes = tuple(int(s) for s in self.sizes) if self.sizes is not None else (1,) * self.N
        object.__setattr__(self, "sizes", sizes)

    def problems(self) -> list[str]:
        out = []
        if self.N < 1:
            out.append("N must be positive")
        if self.dim < 1:
            out.append("dim must be positive")
        if len(self.sizes) != self.N:
            out.append(f"sizes has length {len(self.sizes)}, expected N={self.N}")
        if any(s < 1 for s in self.sizes):
            out.append("all sizes must be positive")
        if self.heterogeneity < 0 or self.noise_std < 0:
            out.append("heterogeneity and noise_std must be nonnegative")
        return out


def generate(spec: SyntheticSpec) -> list[tuple[LossModel, ClientDataset]]:
    """Deterministic (model, dataset) pairs, one per client."""
    problems = spec.problems()
    if problems:
        raise ValueError("invalid SyntheticSpec: " + "; ".join(problems))
    rng = np.random.default_rng(spec.seed)
    d = spec.dim
    if spec.kind is SyntheticKind.QUADRATIC_CLIENTS:
        w_star = np.zeros(d)
    else:
        w_star = rng.standard_normal(d)
    deltas = spec.heterogeneity * rng.standard_normal((spec.N, d))

    clients = []
    for i, n in enumerate(spec.sizes):
        opt = w_star + deltas[i]
        if spec.kind is SyntheticKind.QUADRATIC_CLIENTS:
            clients.append((LossModel.quadratic(opt, spec.l2), ClientDataset(np.zeros((n, d)), np.zeros(n), i)))
            continue
        X = rng.standard_normal((n, d))
        noise = spec.noise_std * rng.standard_normal(n)
        if spec.kind is SyntheticKind.LINREG_CLIENTS:
            clients.append((LossModel.least_squares(spec.l2), ClientDataset(X, X @ opt + noise, i)))
        else:
            y = (X @ opt + noise > 0).astype(np.float64)
            clients.append((LossModel.logistic(spec.l2), ClientDataset(X, y, i)))
    return clients


def client_optima(clients: Sequence[tuple[LossModel, ClientDataset]]) -> np.ndarray:
    """Centers of QUADRATIC clients, stacked (N, d)."""
    return np.stack([m.center for m, _ in clients])


# ---------------------------------------------------------------------------
# Dirichlet partition


@dataclass(frozen=True)
class DirichletPartitionSpec:
    alpha: float
    N: int
    labels: Sequence = field(repr=False)
    seed: int = 0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.N < 1:
            raise ValueError("N must be positive")


def dirichlet_partition(spec: DirichletPartitionSpec) -> list[list[int]]:
    """Split sample indices across clients with per-class Dirichlet proportions.

    For each class (in sorted label order) the class indices are shuffled,
    proportions are drawn from ``Dirichlet(alpha * 1_N)``, each client gets
    ``floor(p_j * n_class)`` of them and the rounding remainder goes to the
    client with the largest proportion. Index lists are returned sorted.
    """
    labels = np.asarray(spec.labels)
    if labels.size == 0:
        raise ValueError("labels must be nonempty")
    rng = np.random.default_rng(spec.seed)
    parts: list[list[int]] = [[] for _ in range(spec.N)]
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        rng.shuffle(idx)
        p = rng.dirichlet(np.full(spec.N, spec.alpha))
        if not (np.all(np.isfinite(p)) and p.sum() > 0):
            p = np.zeros(spec.N)
            p[rng.integers(spec.N)] = 1.0
        counts = np.floor(p * idx.size).astype(int)
        counts[int(np.argmax(p))] += idx.size - counts.sum()
        for j, chunk in enumerate(np.split(idx, np.cumsum(counts)[:-1])):
            parts[j].extend(int(k) for k in chunk)
    out = [sorted(p) for p in parts]
    empty = [j for j, p in enumerate(out) if not p]
    if empty:
        log.warning("dirichlet_partition: %d empty client(s): %s", len(empty), empty)
    return out


def empty_clients(parts: Sequence[Sequence[int]]) -> list[int]:
    return [j for j, p in enumerate(parts) if len(p) == 0]


# ---------------------------------------------------------------------------
# imbalance


@dataclass(frozen=True)
class ImbalanceReport:
    client_ratio: float
    class_ratio: float | None  # None when not a classification task


def class_imbalance_ratio(labels: Sequence) -> float:
    counts = Counter(np.asarray(labels).tolist())
    return max(counts.values()) / min(counts.values())


def imbalance_report(datasets: Sequence, classification: bool | None = None) -> ImbalanceReport:
    """Client ratio (largest / smallest client) and class ratio over the union.

    ``datasets`` holds :class:`ClientDataset` objects or per-client label
    arrays (possibly empty). Classification is detected from {0, 1}-valued
    targets unless given explicitly.
    """
    if len(datasets) == 0:
        raise ValueError("need at least one client")
    labels = [np.asarray(ds.y if isinstance(ds, ClientDataset) else ds).reshape(-1) for ds in datasets]
    sizes = [lab.size for lab in labels]
    if min(sizes) == 0:
        log.warning("imbalance_report: a client has zero samples; client ratio is infinite")
        client_ratio = math.inf
    else:
        client_ratio = max(sizes) / min(sizes)
    union = np.concatenate(labels)
    if classification is None:
        classification = union.size > 0 and bool(np.all(np.isin(union, (0, 1))))
    class_ratio = class_imbalance_ratio(union) if classification and union.size else None
    return ImbalanceReport(client_ratio, class_ratio)
