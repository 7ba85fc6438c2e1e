"""Local-step transitions and round-boundary aggregation.

Each ``*_step`` function takes the state a client holds before a local
step and returns a fresh state; the input is never modified. Minibatches
enter through their mean loss and mean gradient at the pre-step model.

The compositional weight of the KL family is ``exp(u / lam) / v`` in both
the ``v`` update and the gradient scaling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import Algorithm, ClientState, NonFiniteError, RunConfig, average_vectors, check_same_shape
from .models import ClientDataset, LossModel, Sample, batch_loss_grad

EXP_CLAMP = 700.0

VECTOR_FIELDS = ("w", "m", "q")
SCALAR_FIELDS = ("s", "v")


@dataclass(frozen=True)
class LocalStepResult:
    state: ClientState
    loss: float
    clamped: bool = False


@dataclass(frozen=True)
class AggregationSpec:
    fields: frozenset

    @classmethod
    def for_algorithm(cls, algorithm: Algorithm | str) -> "AggregationSpec":
        return cls(_AGGREGATED[Algorithm(algorithm)])


_AGGREGATED = {
    Algorithm.FGDRO_CVAR: frozenset({"w", "s"}),
    Algorithm.FGDRO_KL: frozenset({"w", "v", "m"}),
    Algorithm.FGDRO_KL_ADAM: frozenset({"w", "v", "m", "q"}),
    Algorithm.LOCAL_ADAM: frozenset({"w", "m", "q"}),
    Algorithm.FEDAVG: frozenset({"w"}),
}


def _batch_arrays(batch) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(batch, ClientDataset):
        return batch.X, batch.y
    if isinstance(batch, tuple) and len(batch) == 2 and isinstance(batch[0], np.ndarray):
        return batch
    samples: Sequence[Sample] = batch
    if len(samples) == 0:
        raise ValueError("empty minibatch")
    X = np.stack([np.asarray(z.features, dtype=np.float64).reshape(-1) for z in samples])
    y = np.array([float(z.target) for z in samples])
    return X, y


def exp_clamped(x: float) -> tuple[float, bool]:
    """``exp(min(x, 700))`` and whether the clamp was hit."""
    if x > EXP_CLAMP:
        return math.exp(EXP_CLAMP), True
    return math.exp(x), False


def _finite(state: ClientState) -> ClientState:
    if not state.is_finite():
        raise NonFiniteError("local step produced a non-finite state")
    return state


def cvar_local_step(state: ClientState, batch, cfg: RunConfig, model: LossModel) -> LocalStepResult:
    X, y = _batch_arrays(batch)
    loss, grad = batch_loss_grad(model, state.w, X, y)
    b1 = cfg.beta1
    u = (1 - b1) * state.u + b1 * loss
    # same pre-update threshold and same subgradient selection for s and w
    active = u - state.s > 0
    v = -float(active) + cfg.cvar_k / cfg.num_clients
    s = state.s - cfg.eta_s * v
    m = grad.copy() if active else np.zeros_like(state.w)
    w = state.w - cfg.eta1 * m
    new = ClientState(w, u, state.v, s, m, state.q.copy())
    return LocalStepResult(_finite(new), loss)


def _kl_weighted_grad(state: ClientState, loss: float, grad: np.ndarray, cfg: RunConfig):
    b1, b2 = cfg.beta1, cfg.beta2
    u = (1 - b1) * state.u + b1 * loss
    e, clamped = exp_clamped(u / cfg.lam)
    v = (1 - b2) * state.v + b2 * e
    h = (e / v) * grad
    return u, v, h, clamped


def kl_local_step(state: ClientState, batch, cfg: RunConfig, model: LossModel) -> LocalStepResult:
    X, y = _batch_arrays(batch)
    loss, grad = batch_loss_grad(model, state.w, X, y)
    u, v, h, clamped = _kl_weighted_grad(state, loss, grad, cfg)
    m = (1 - cfg.beta3) * state.m + cfg.beta3 * h
    w = state.w - cfg.eta * m
    new = ClientState(w, u, v, state.s, m, state.q.copy())
    return LocalStepResult(_finite(new), loss, clamped)


def _adam_move(state: ClientState, h: np.ndarray, cfg: RunConfig):
    m = (1 - cfg.beta3) * state.m + cfg.beta3 * h
    q = (1 - cfg.beta4) * state.q + cfg.beta4 * (h * h)
    w = state.w - cfg.eta * m / (np.sqrt(q) + cfg.tau)
    return w, m, q


def kl_adam_local_step(state: ClientState, batch, cfg: RunConfig, model: LossModel) -> LocalStepResult:
    X, y = _batch_arrays(batch)
    loss, grad = batch_loss_grad(model, state.w, X, y)
    u, v, h, clamped = _kl_weighted_grad(state, loss, grad, cfg)
    w, m, q = _adam_move(state, h, cfg)
    new = ClientState(w, u, v, state.s, m, q)
    return LocalStepResult(_finite(new), loss, clamped)


def local_adam_step(state: ClientState, batch, cfg: RunConfig, model: LossModel) -> LocalStepResult:
    X, y = _batch_arrays(batch)
    loss, grad = batch_loss_grad(model, state.w, X, y)
    w, m, q = _adam_move(state, grad, cfg)
    new = ClientState(w, state.u, state.v, state.s, m, q)
    return LocalStepResult(_finite(new), loss)


def fedavg_local_step(state: ClientState, batch, cfg: RunConfig, model: LossModel) -> LocalStepResult:
    X, y = _batch_arrays(batch)
    loss, grad = batch_loss_grad(model, state.w, X, y)
    new = ClientState(state.w - cfg.eta * grad, state.u, state.v, state.s, state.m.copy(), state.q.copy())
    return LocalStepResult(_finite(new), loss)


StepFn = Callable[[ClientState, object, RunConfig, LossModel], LocalStepResult]

STEP_FUNCTIONS: dict[Algorithm, StepFn] = {
    Algorithm.FGDRO_CVAR: cvar_local_step,
    Algorithm.FGDRO_KL: kl_local_step,
    Algorithm.FGDRO_KL_ADAM: kl_adam_local_step,
    Algorithm.LOCAL_ADAM: local_adam_step,
    Algorithm.FEDAVG: fedavg_local_step,
}


@dataclass(frozen=True)
class RoundTemplate:
    """Averaged fields to broadcast; every other field stays client-local."""

    values: dict
    spec: AggregationSpec

    @property
    def carry_local(self) -> frozenset:
        return frozenset({"w", "u", "v", "s", "m", "q"}) - self.spec.fields

    def apply(self, local: ClientState) -> ClientState:
        out = local.copy()
        for name, value in self.values.items():
            setattr(out, name, value.copy() if isinstance(value, np.ndarray) else value)
        return out


def aggregate(states: Sequence[ClientState], spec: AggregationSpec) -> RoundTemplate:
    """Coordinate-wise mean of exactly the fields in ``spec``; ``u`` is never averaged."""
    if len(states) == 0:
        raise ValueError("cannot aggregate an empty list of states")
    check_same_shape(*[st.w for st in states])
    values = {}
    for name in sorted(spec.fields):
        if name in VECTOR_FIELDS:
            values[name] = average_vectors([getattr(st, name) for st in states])
        elif name in SCALAR_FIELDS:
            values[name] = float(average_vectors([np.array([getattr(st, name)]) for st in states])[0])
        else:
            raise ValueError(f"field {name!r} cannot be aggregated")
    return RoundTemplate(values, spec)


def communication_cost(spec: AggregationSpec, d: int) -> int:
    """Real numbers each client uploads per round."""
    return sum(d if name in VECTOR_FIELDS else 1 for name in spec.fields)
