"""Round/step execution engine.

A run holds N clients. Every round each client starts from the broadcast
template, takes ``local_steps`` steps on minibatches drawn from its own
``(master_seed, client, round)`` stream, and the fields named by the
algorithm's :class:`AggregationSpec` are averaged at the barrier. Metrics
are evaluated with the exact full-data oracles on the averaged model.

The loss tracker ``u`` is never aggregated: every client, FGDRO-CVaR
included, starts a round from the ``u`` it ended the previous round with.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .algorithms import (STEP_FUNCTIONS, AggregationSpec, RoundTemplate, aggregate, communication_cost,
                         exp_clamped)
from .core import (Algorithm, ClientState, MetricsRecord, NonFiniteError, RunConfig, as_vector, derive_rng,
                   validate_config, write_metrics_csv)
from .models import ClientDataset, LossModel, batch_loss_grad
from .objectives import (CvarObjective, KlObjective, ProxDiagnostic, cvar_optimal_value, kl_value_and_gradient,
                         prox_point)

log = logging.getLogger(__name__)

Client = tuple[LossModel, ClientDataset]


@dataclass
class RunOptions:
    parallel: str = "sequential"  # "sequential" | "thread" | "process"
    workers: int = 1
    iterate_log: bool = False
    iterate_stride: int = 1
    prox: ProxDiagnostic = field(default_factory=ProxDiagnostic)
    diag_every: int = 1
    record_wall_time: bool = False
    check_consensus: bool = False

    def __post_init__(self):
        if self.parallel not in ("sequential", "thread", "process"):
            raise ValueError(f"unknown parallel mode {self.parallel!r}")
        if self.iterate_stride < 1 or self.diag_every < 1:
            raise ValueError("iterate_stride and diag_every must be >= 1")


@dataclass
class FederationRun:
    cfg: RunConfig
    clients: Sequence[Client]
    states: list[ClientState]
    history: list[MetricsRecord] = field(default_factory=list)
    iterate_log: list[tuple[int, int, np.ndarray]] | None = None
    clamp_events: int = 0

    @property
    def rounds_done(self) -> int:
        return len(self.history)

    @property
    def spec(self) -> AggregationSpec:
        return AggregationSpec.for_algorithm(self.cfg.algorithm)

    @property
    def dim(self) -> int:
        return self.states[0].dim

    def averaged_model(self) -> np.ndarray:
        return np.mean(np.stack([st.w for st in self.states]), axis=0)

    def averaged_threshold(self) -> float:
        return float(np.mean([st.s for st in self.states]))


@dataclass(frozen=True)
class Evaluation:
    worst_client_loss: float
    avg_client_loss: float
    objective_value: float
    stationarity: float  # exact ||grad F||^2, or prox dist_sq for CVaR


# ---------------------------------------------------------------------------
# minibatches


def round_batches(cfg: RunConfig, client_id: int, round: int, n: int) -> np.ndarray:
    """Sample indices for all local steps of one client in one round, shape (I, b)."""
    rng = derive_rng(cfg.master_seed, client_id, round)
    return rng.integers(0, n, size=(cfg.local_steps, cfg.batch_size))


def _client_round(task) -> tuple[ClientState, np.ndarray | None, int]:
    cid, state, model, ds, cfg, rnd, want_iterates = task
    step = STEP_FUNCTIONS[cfg.algorithm]
    idx = round_batches(cfg, cid, rnd, len(ds))
    iterates = np.empty((cfg.local_steps, state.dim)) if want_iterates else None
    clamps = 0
    for t in range(cfg.local_steps):
        try:
            res = step(state, (ds.X[idx[t]], ds.y[idx[t]]), cfg, model)
        except NonFiniteError as exc:
            raise NonFiniteError(str(exc).split(" (")[0], client=cid, round=rnd, step=t + 1) from exc
        state = res.state
        clamps += res.clamped
        if want_iterates:
            iterates[t] = state.w
    return state, iterates, clamps


# ---------------------------------------------------------------------------
# initialization


def initial_states(cfg: RunConfig, clients: Sequence[Client], initial_w) -> list[ClientState]:
    """Round-1 states.

    KL family: u starts at the loss of the first round-1 minibatch at the
    initial model, and v at the client average of exp(u / lam). CVaR starts
    with u = 0 and s = 0. Moment vectors start at zero.
    """
    w0 = as_vector(initial_w)
    states = [ClientState(w0.copy()) for _ in clients]
    if cfg.algorithm.is_kl_family:
        for i, ((model, ds), st) in enumerate(zip(clients, states)):
            idx = round_batches(cfg, i, 1, len(ds))[0]
            st.u = batch_loss_grad(model, w0, ds.X[idx], ds.y[idx])[0]
        v0 = float(np.mean([exp_clamped(st.u / cfg.lam)[0] for st in states]))
        for st in states:
            st.v = v0
    return states


def check_consensus(states: Sequence[ClientState], spec: AggregationSpec) -> None:
    ref = states[0]
    for i, st in enumerate(states[1:], start=1):
        for name in spec.fields:
            a, b = getattr(ref, name), getattr(st, name)
            same = np.array_equal(a, b) if isinstance(a, np.ndarray) else a == b
            if not same:
                raise AssertionError(f"consensus broken on field {name!r} at client {i}")


# ---------------------------------------------------------------------------
# evaluation


class _Oracles:
    def __init__(self, cfg: RunConfig, clients: Sequence[Client], prox: ProxDiagnostic):
        self.cfg = cfg
        self.kl = KlObjective(cfg.lam, clients)
        self.cvar = CvarObjective(cfg.cvar_k, clients) if cfg.algorithm is Algorithm.FGDRO_CVAR else None
        self.prox = prox

    def evaluate(self, w: np.ndarray, s: float, with_stationarity: bool = True) -> Evaluation:
        alg = self.cfg.algorithm
        if alg is Algorithm.FGDRO_CVAR:
            losses = self.cvar.pool.losses(w)
            value, _ = cvar_optimal_value(self.cvar, w)
            stat = prox_point(self.prox, self.cvar, w, s)[2] if with_stationarity else math.nan
        elif alg.is_kl_family:
            value, grad, losses = kl_value_and_gradient(self.kl, w)
            stat = float(grad @ grad)
        else:
            losses, grads = self.kl.pool.losses_grads(w)
            value = float(np.mean(losses))
            grad = grads.mean(axis=0)
            stat = float(grad @ grad)
        return Evaluation(float(np.max(losses)), float(np.mean(losses)), float(value), stat)


def evaluate(run: FederationRun, w: np.ndarray, s: float | None = None,
             prox: ProxDiagnostic | None = None) -> Evaluation:
    """Worst/average client loss, objective and stationarity diagnostic at ``w``.

    For FGDRO-CVaR the diagnostic is the proximal ``dist_sq`` at ``(w, s)``;
    ``s`` defaults to the run's current averaged threshold.
    """
    oracles = _Oracles(run.cfg, run.clients, prox or ProxDiagnostic())
    if s is None:
        s = run.averaged_threshold()
    return oracles.evaluate(np.asarray(w, dtype=np.float64), s)


# ---------------------------------------------------------------------------
# driver


def run(cfg: RunConfig, clients: Sequence[Client], initial_w=None, options: RunOptions | None = None,
        resume: FederationRun | None = None) -> FederationRun:
    """Execute rounds until ``cfg.rounds`` are complete.

    With ``resume`` the run continues from that run's broadcast states and
    history; seeds are keyed by absolute round index, so R rounds in one go
    and R1 + (R - R1) rounds with a resume give the same result.
    """
    options = options or RunOptions()
    problems = validate_config(cfg)
    if problems:
        raise ValueError("invalid config: " + "; ".join(problems))
    if len(clients) != cfg.num_clients:
        raise ValueError(f"config has num_clients={cfg.num_clients} but {len(clients)} clients were given")

    if resume is None:
        if initial_w is None:
            initial_w = np.zeros(_infer_dim(clients))
        fr = FederationRun(cfg, list(clients), initial_states(cfg, clients, initial_w),
                           iterate_log=[] if options.iterate_log else None)
    else:
        fr = FederationRun(cfg, list(clients), [st.copy() for st in resume.states], list(resume.history),
                           None if resume.iterate_log is None else list(resume.iterate_log),
                           resume.clamp_events)
        if options.iterate_log and fr.iterate_log is None:
            fr.iterate_log = []

    spec = fr.spec
    per_round = cfg.num_clients * communication_cost(spec, fr.dim)
    oracles = _Oracles(cfg, fr.clients, options.prox)
    want_iterates = fr.iterate_log is not None
    t_start = time.perf_counter()

    pool = None
    if options.parallel == "thread":
        pool = ThreadPoolExecutor(max_workers=options.workers)
    elif options.parallel == "process":
        pool = ProcessPoolExecutor(max_workers=options.workers)
    try:
        for rnd in range(fr.rounds_done + 1, cfg.rounds + 1):
            tasks = [(i, st, m, ds, cfg, rnd, want_iterates)
                     for i, (st, (m, ds)) in enumerate(zip(fr.states, fr.clients))]
            results = list(pool.map(_client_round, tasks)) if pool else [_client_round(t) for t in tasks]

            local_states = [r[0] for r in results]
            fr.clamp_events += sum(r[2] for r in results)
            if want_iterates:
                avg_iter = np.mean(np.stack([r[1] for r in results]), axis=0)
                for t in range(0, cfg.local_steps, options.iterate_stride):
                    fr.iterate_log.append((rnd, t + 1, avg_iter[t].copy()))

            template: RoundTemplate = aggregate(local_states, spec)
            fr.states = [template.apply(st) for st in local_states]
            if options.check_consensus:
                check_consensus(fr.states, spec)

            w_bar = fr.states[0].w
            s_bar = fr.states[0].s
            with_stat = rnd % options.diag_every == 0 or rnd == cfg.rounds
            ev = oracles.evaluate(w_bar, s_bar, with_stat)
            wall = int(round(1000 * (time.perf_counter() - t_start))) if options.record_wall_time else 0
            fr.history.append(MetricsRecord(rnd, ev.objective_value, ev.stationarity, ev.worst_client_loss,
                                            ev.avg_client_loss, rnd * per_round, wall))
    finally:
        if pool is not None:
            pool.shutdown()

    if fr.clamp_events:
        log.warning("exp(u/lambda) hit the clamp %d times; losses may exceed the bounded-loss regime",
                    fr.clamp_events)
    return fr


def _infer_dim(clients: Sequence[Client]) -> int:
    model, ds = clients[0]
    return model.center.shape[0] if model.center is not None else ds.dim


# ---------------------------------------------------------------------------
# output selection


def sample_output_index(fr: FederationRun, selection_seed: int) -> tuple[int, int]:
    """Uniformly sampled ``(round, step)`` among the logged iterates."""
    if not fr.iterate_log:
        raise ValueError("iterate_log was not recorded for this run")
    rng = np.random.default_rng(selection_seed)
    k = int(rng.integers(len(fr.iterate_log)))
    r, t, _ = fr.iterate_log[k]
    return r, t


def select_output(fr: FederationRun, selection_seed: int) -> np.ndarray:
    """Client-averaged model at a uniformly sampled ``(round, step)``."""
    r, t = sample_output_index(fr, selection_seed)
    for rr, tt, w in fr.iterate_log:
        if (rr, tt) == (r, t):
            return w.copy()
    raise AssertionError("sampled index missing from iterate log")


def last_model(fr: FederationRun) -> np.ndarray:
    return fr.averaged_model()


# ---------------------------------------------------------------------------
# persistence


def run_id(cfg: RunConfig, extra: dict[str, Any] | None = None) -> str:
    payload = json.dumps({"config": cfg.to_dict(), "extra": extra or {}}, sort_keys=True)
    return hashlib.sha1(payload.encode()).hexdigest()


def checkpoint_dict(fr: FederationRun) -> dict[str, Any]:
    return {
        "config": fr.cfg.to_dict(),
        "rounds_done": fr.rounds_done,
        "clamp_events": fr.clamp_events,
        "states": [st.to_dict() for st in fr.states],
        "history": [list(rec.row()) for rec in fr.history],
    }


def save_checkpoint(fr: FederationRun, path: str | Path) -> None:
    Path(path).write_text(json.dumps(checkpoint_dict(fr), indent=1))


def load_checkpoint(path: str | Path, clients: Sequence[Client]) -> FederationRun:
    data = json.loads(Path(path).read_text())
    cfg = RunConfig.from_dict(data["config"])
    history = [MetricsRecord(int(r[0]), float(r[1]), float(r[2]), float(r[3]), float(r[4]), int(r[5]), int(r[6]))
               for r in data["history"]]
    states = [ClientState.from_dict(s) for s in data["states"]]
    return FederationRun(cfg, list(clients), states, history, None, int(data.get("clamp_events", 0)))


def write_outputs(fr: FederationRun, out_dir: str | Path, extra: dict[str, Any] | None = None) -> dict[str, Any]:
    """Write ``metrics.csv``, ``summary.json`` and ``checkpoint.json`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(fr.history, out / "metrics.csv")
    final = fr.history[-1] if fr.history else None
    summary = {
        "run_id": run_id(fr.cfg, extra),
        "algorithm": fr.cfg.algorithm.value,
        "config": fr.cfg.to_dict(),
        "final": None if final is None else {
            "round": final.round,
            "objective_value": final.objective_value,
            "exact_grad_norm_sq": final.exact_grad_norm_sq,
            "worst_client_loss": final.worst_client_loss,
            "avg_client_loss": final.avg_client_loss,
            "comm_scalars_cumulative": final.comm_scalars_cumulative,
        },
        "clamp_events": fr.clamp_events,
        "extra": extra or {},
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    save_checkpoint(fr, out / "checkpoint.json")
    return summary
