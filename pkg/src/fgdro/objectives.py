"""Exact full-data objectives over a set of clients.

Client losses are ``g_i(w) = client_mean_loss(model_i, w, D_i)``.

CVaR form, jointly in ``(w, s)``::

    F(w, s) = mean_i max(g_i(w) - s, 0) + (K / N) * s

whose minimum over ``s`` is the sum of the K largest client losses divided
by N.

KL form::

    F(w) = lam * log(mean_i exp(g_i(w) / lam))
    grad F(w) = sum_i p_i * grad g_i(w),   p = softmax(g / lam)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit, logsumexp, softmax

from .core import NonFiniteError, ShapeError
from .models import ClientDataset, LossKind, LossModel, _softplus, client_loss_grad, client_mean_loss

Client = tuple[LossModel, ClientDataset]


class ClientPool:
    """Vectorized per-client mean losses and gradients.

    When every client uses the same loss kind the datasets are stacked once
    and each evaluation is a handful of array operations; otherwise it falls
    back to a loop over :func:`client_loss_grad`.
    """

    def __init__(self, clients: Sequence[Client]):
        if len(clients) == 0:
            raise ValueError("need at least one client")
        self.clients = list(clients)
        self.n = len(self.clients)
        models = [m for m, _ in self.clients]
        kinds = {m.kind for m in models}
        self.l2 = np.array([m.l2 for m, _ in self.clients])
        self.kind = kinds.pop() if len(kinds) == 1 else None
        if self.kind is LossKind.QUADRATIC:
            self.centers = np.stack([m.center for m in models])
            self.dim = self.centers.shape[1]
        elif self.kind is not None:
            dims = {ds.dim for _, ds in self.clients}
            if len(dims) != 1:
                raise ShapeError(f"clients disagree on feature dimension: {sorted(dims)}")
            self.dim = dims.pop()
            self.X = np.concatenate([ds.X for _, ds in self.clients])
            self.y = np.concatenate([ds.y for _, ds in self.clients])
            sizes = np.array([len(ds) for _, ds in self.clients])
            self.counts = sizes.astype(np.float64)
            self.starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        else:
            self.dim = None

    def losses(self, w: np.ndarray) -> np.ndarray:
        return self.losses_grads(w, need_grad=False)[0]

    def losses_grads(self, w: np.ndarray, need_grad: bool = True):
        w = np.asarray(w, dtype=np.float64)
        if self.dim is not None and w.shape != (self.dim,):
            raise ShapeError(f"w has shape {w.shape}, clients expect ({self.dim},)")
        penalty = 0.5 * self.l2 * float(w @ w)
        if self.kind is LossKind.QUADRATIC:
            diff = w - self.centers
            losses = 0.5 * np.sum(diff * diff, axis=1) + penalty
            grads = diff + self.l2[:, None] * w if need_grad else None
            return losses, grads
        if self.kind is None:
            pairs = [client_loss_grad(m, w, ds) for m, ds in self.clients]
            return np.array([p[0] for p in pairs]), np.stack([p[1] for p in pairs])
        z = self.X @ w
        if self.kind is LossKind.LEAST_SQUARES:
            r = z - self.y
            per = 0.5 * r * r
        else:
            r = expit(z) - self.y
            per = _softplus(z) - self.y * z
        losses = np.add.reduceat(per, self.starts) / self.counts + penalty
        grads = None
        if need_grad:
            grads = np.add.reduceat(r[:, None] * self.X, self.starts, axis=0) / self.counts[:, None]
            grads = grads + self.l2[:, None] * w
        return losses, grads


def client_losses(clients: Sequence[Client], w: np.ndarray) -> np.ndarray:
    """Reference (unvectorized) per-client mean losses."""
    return np.array([client_mean_loss(m, w, ds) for m, ds in clients])


@dataclass(frozen=True)
class CvarObjective:
    K: int
    clients: Sequence[Client]
    pool: ClientPool = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not 1 <= self.K <= len(self.clients):
            raise ValueError(f"K={self.K} out of range [1, {len(self.clients)}]")
        object.__setattr__(self, "pool", ClientPool(self.clients))

    @property
    def N(self) -> int:
        return len(self.clients)


@dataclass(frozen=True)
class KlObjective:
    lam: float
    clients: Sequence[Client]
    pool: ClientPool = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")
        object.__setattr__(self, "pool", ClientPool(self.clients))

    @property
    def N(self) -> int:
        return len(self.clients)


@dataclass(frozen=True)
class ProxDiagnostic:
    rho_hat: float = 2.0
    inner_steps: int = 2000
    inner_step_size: float | None = None  # defaults to 1 / rho_hat

    def __post_init__(self):
        if not self.rho_hat > 0:
            raise ValueError("rho_hat must be positive")
        if self.inner_steps < 0:
            raise ValueError("inner_steps must be nonnegative")

    @property
    def step0(self) -> float:
        return 1.0 / self.rho_hat if self.inner_step_size is None else self.inner_step_size


# ---------------------------------------------------------------------------
# CVaR


def cvar_value_from_losses(losses: np.ndarray, K: int, s: float) -> float:
    N = losses.shape[0]
    return float(np.sum(np.maximum(losses - s, 0.0)) / N + K / N * s)


def cvar_objective(obj: CvarObjective, w: np.ndarray, s: float) -> float:
    return cvar_value_from_losses(obj.pool.losses(w), obj.K, s)


def top_k_from_losses(losses: np.ndarray, K: int) -> tuple[float, float]:
    """(sum of the K largest losses / N, K-th largest loss)."""
    desc = np.sort(np.asarray(losses, dtype=np.float64))[::-1]
    return float(np.sum(desc[:K]) / desc.shape[0]), float(desc[K - 1])


def cvar_optimal_value(obj: CvarObjective, w: np.ndarray) -> tuple[float, float]:
    """Minimize the CVaR form over ``s`` exactly.

    Any ``s`` between the (K+1)-th and K-th largest losses is a minimizer;
    the K-th largest is returned.
    """
    return top_k_from_losses(obj.pool.losses(w), obj.K)


def cvar_subgradient(obj: CvarObjective, w: np.ndarray, s: float) -> tuple[np.ndarray, float]:
    losses, grads = obj.pool.losses_grads(w)
    return _cvar_subgrad(losses, grads, obj.K, s)


def _cvar_subgrad(losses, grads, K, s):
    N = losses.shape[0]
    # strict inequality: clients exactly at the threshold contribute nothing
    active = losses - s > 0
    gw = grads[active].sum(axis=0) / N if active.any() else np.zeros(grads.shape[1])
    gs = -np.count_nonzero(active) / N + K / N
    return gw, gs


# ---------------------------------------------------------------------------
# KL


def kl_value_from_losses(losses: np.ndarray, lam: float) -> float:
    losses = np.asarray(losses, dtype=np.float64)
    return float(lam * (logsumexp(losses / lam) - math.log(losses.shape[0])))


def kl_weights_from_losses(losses: np.ndarray, lam: float) -> np.ndarray:
    return softmax(np.asarray(losses, dtype=np.float64) / lam)


def kl_objective(obj: KlObjective, w: np.ndarray) -> float:
    return kl_value_from_losses(obj.pool.losses(w), obj.lam)


def kl_client_weights(obj: KlObjective, w: np.ndarray) -> np.ndarray:
    """``p_i = g_i / (N * g)``: the simplex weights the KL form puts on each client."""
    return kl_weights_from_losses(obj.pool.losses(w), obj.lam)


def kl_gradient(obj: KlObjective, w: np.ndarray) -> np.ndarray:
    losses, grads = obj.pool.losses_grads(w)
    return kl_weights_from_losses(losses, obj.lam) @ grads


def kl_value_and_gradient(obj: KlObjective, w: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Objective, gradient and per-client losses from a single pass."""
    losses, grads = obj.pool.losses_grads(w)
    return kl_value_from_losses(losses, obj.lam), kl_weights_from_losses(losses, obj.lam) @ grads, losses


# ---------------------------------------------------------------------------
# Moreau envelope diagnostic


def prox_descent(
    value_subgrad: Callable[[np.ndarray], tuple[float, np.ndarray]],
    center: np.ndarray,
    rho_hat: float,
    steps: int,
    step0: float,
) -> tuple[np.ndarray, float]:
    """Subgradient descent on ``phi(x) = F(x) + rho_hat/2 * ||x - center||^2``.

    Steps are ``step0 / sqrt(t)``. Returns the iterate with the lowest
    ``phi`` seen (starting from ``center``) and that value, so more steps
    never give a worse answer.
    """
    x = np.array(center, dtype=np.float64)
    best_x = x.copy()
    best = math.inf
    for t in range(steps + 1):
        f, g = value_subgrad(x)
        diff = x - center
        phi = f + 0.5 * rho_hat * float(diff @ diff)
        if not math.isfinite(phi):
            raise NonFiniteError(f"proximal objective became non-finite at inner step {t}")
        if phi < best:
            best, best_x = phi, x.copy()
        if t == steps:
            break
        x = x - step0 / math.sqrt(t + 1) * (g + rho_hat * diff)
        if not np.all(np.isfinite(x)):
            raise NonFiniteError(f"proximal iterate became non-finite at inner step {t + 1}")
    return best_x, best


def prox_point(diag: ProxDiagnostic, obj: CvarObjective, w: np.ndarray, s: float):
    """Approximate proximal point of the CVaR form at ``(w, s)``.

    Returns ``(w_hat, s_hat, dist_sq)`` with
    ``dist_sq = ||w_hat - w||^2 + (s_hat - s)^2``. A small ``dist_sq``
    means ``(w, s)`` is close to a point with a small subgradient.
    """
    w = np.asarray(w, dtype=np.float64)
    d = w.shape[0]
    pool, K = obj.pool, obj.K

    def value_subgrad(x):
        losses, grads = pool.losses_grads(x[:d])
        gw, gs = _cvar_subgrad(losses, grads, K, x[d])
        return cvar_value_from_losses(losses, K, x[d]), np.append(gw, gs)

    center = np.append(w, float(s))
    best_x, _ = prox_descent(value_subgrad, center, diag.rho_hat, diag.inner_steps, diag.step0)
    diff = best_x - center
    return best_x[:d].copy(), float(best_x[d]), float(diff @ diff)


def prox_objective(obj: CvarObjective, rho_hat: float, w: np.ndarray, s: float, w_hat, s_hat) -> float:
    dw = np.asarray(w_hat) - np.asarray(w)
    return cvar_objective(obj, w_hat, s_hat) + 0.5 * rho_hat * (float(dw @ dw) + (s_hat - s) ** 2)
