"""Fixed-seed property battery behind ``fgdro validate``."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .algorithms import AggregationSpec, communication_cost
from .core import Algorithm, RunConfig
from .datagen import DirichletPartitionSpec, SyntheticSpec, dirichlet_partition, generate
from .federation import RunOptions, check_consensus, run
from .models import ClientDataset, LossKind, LossModel, Sample, loss_grad, loss_value
from .objectives import CvarObjective, KlObjective, client_losses, cvar_optimal_value, kl_client_weights, kl_gradient, kl_objective


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail}"


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    g = np.empty_like(x)
    for j in range(x.shape[0]):
        e = np.zeros_like(x)
        e[j] = h
        g[j] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), floor))


def random_logistic_clients(rng: np.random.Generator, N: int, d: int, max_n: int = 12):
    clients = []
    for i in range(N):
        n = int(rng.integers(1, max_n + 1))
        X = rng.standard_normal((n, d))
        y = (rng.random(n) < 0.5).astype(float)
        clients.append((LossModel.logistic(), ClientDataset(X, y, i)))
    return clients


def check_kl_gradient(grad_fn=kl_gradient, instances: int = 50, seed: int = 0, tol: float = 1e-5) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in range(instances):
        N, d = int(rng.integers(1, 9)), int(rng.integers(1, 21))
        lam = (0.1, 1.0, 10.0)[k % 3]
        obj = KlObjective(lam, random_logistic_clients(rng, N, d))
        w = rng.standard_normal(d)
        fd = central_difference(lambda x: kl_objective(obj, x), w)
        worst = max(worst, relative_error(grad_fn(obj, w), fd))
    return CheckResult("kl_gradient_vs_finite_differences", worst <= tol, f"max rel err {worst:.2e} (tol {tol:g})")


def check_loss_gradients(seed: int = 0, tol: float = 1e-5) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for kind in LossKind:
        for _ in range(20):
            d = int(rng.integers(1, 10))
            z = Sample(rng.standard_normal(d), float(rng.integers(0, 2)))
            if kind is LossKind.QUADRATIC:
                model = LossModel.quadratic(rng.standard_normal(d), l2=0.1)
            else:
                model = LossModel(kind, l2=0.1)
            w = rng.standard_normal(d)
            fd = central_difference(lambda x: loss_value(model, x, z), w)
            worst = max(worst, relative_error(loss_grad(model, w, z), fd))
    return CheckResult("loss_grad_vs_finite_differences", worst <= tol, f"max rel err {worst:.2e} (tol {tol:g})")


def check_cvar_identity(instances: int = 200, seed: int = 0, tol: float = 1e-9) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst, s_ok = 0.0, True
    for _ in range(instances):
        N = int(rng.integers(1, 17))
        K = int(rng.integers(1, N + 1))
        d = 3
        clients = [(LossModel.quadratic(rng.standard_normal(d) * rng.uniform(0, 3)), ClientDataset(np.zeros((1, d)), [0.0], i))
                   for i in range(N)]
        obj = CvarObjective(K, clients)
        w = rng.standard_normal(d)
        ranked = sorted(client_losses(clients, w), reverse=True)
        value, s_star = cvar_optimal_value(obj, w)
        worst = max(worst, abs(value - sum(ranked[:K]) / N))
        s_ok &= s_star == ranked[K - 1]
    return CheckResult("cvar_top_k_identity", worst <= tol and s_ok, f"max |dvalue| {worst:.1e}, s_star exact: {s_ok}")


def check_kl_weights(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    positive = True
    for k in range(30):
        obj = KlObjective((0.1, 1.0, 10.0)[k % 3], random_logistic_clients(rng, int(rng.integers(1, 9)), 4))
        p = kl_client_weights(obj, rng.standard_normal(4))
        worst = max(worst, abs(p.sum() - 1))
        positive &= bool(np.all(p > 0))
    return CheckResult("kl_weights_on_simplex", worst <= 1e-12 and positive, f"max |sum-1| {worst:.1e}")


def check_reduction_to_fedavg(tol: float = 1e-6) -> CheckResult:
    clients = generate(SyntheticSpec("QUADRATIC_CLIENTS", 4, 3, 1.0, seed=3))
    w0 = np.full(3, 0.5)
    base = RunConfig(num_clients=4, rounds=10, local_steps=10, eta=0.05, lam=1e9, beta3=1.0, master_seed=7)
    opts = RunOptions(iterate_log=True)
    kl = run(replace(base, algorithm=Algorithm.FGDRO_KL), clients, w0, opts)
    fa = run(replace(base, algorithm=Algorithm.FEDAVG), clients, w0, opts)
    dev = max(float(np.max(np.abs(a[2] - b[2]))) for a, b in zip(kl.iterate_log, fa.iterate_log))
    return CheckResult("kl_reduces_to_fedavg", dev <= tol, f"max trajectory deviation {dev:.1e} (tol {tol:g})")


def check_consensus_and_comm() -> CheckResult:
    clients = generate(SyntheticSpec("LOGREG_CLIENTS", 4, 3, 1.0, sizes=(20, 20, 20, 5), seed=1))
    problems = []
    for alg in Algorithm:
        cfg = RunConfig(num_clients=4, rounds=5, local_steps=3, eta=0.05, cvar_k=2, batch_size=4, algorithm=alg)
        fr = run(cfg, clients, None, RunOptions(check_consensus=True))
        spec = AggregationSpec.for_algorithm(alg)
        check_consensus(fr.states, spec)
        want = cfg.rounds * cfg.num_clients * communication_cost(spec, 3)
        if fr.history[-1].comm_scalars_cumulative != want:
            problems.append(alg.value)
    return CheckResult("consensus_and_comm_accounting", not problems, "ok" if not problems else f"bad: {problems}")


def check_partition() -> CheckResult:
    labels = np.repeat(np.arange(4), [50, 30, 10, 5])
    ok = True
    quiet = logging.getLogger("fgdro.datagen")
    level = quiet.level
    quiet.setLevel(logging.ERROR)  # empty clients are expected at alpha = 0.05
    try:
        for alpha in (0.05, 1.0, 100.0):
            for seed in range(5):
                parts = dirichlet_partition(DirichletPartitionSpec(alpha, 7, labels, seed))
                flat = sorted(i for p in parts for i in p)
                ok &= flat == list(range(labels.size))
    finally:
        quiet.setLevel(level)
    return CheckResult("dirichlet_partition_exact", ok, "disjoint and exhaustive" if ok else "not a partition")


def run_battery(grad_fn=None) -> list[CheckResult]:
    """All checks at fixed seeds. ``grad_fn`` replaces the KL gradient under test."""
    grad_fn = kl_gradient if grad_fn is None else grad_fn
    return [
        check_loss_gradients(),
        check_kl_gradient(grad_fn),
        check_cvar_identity(),
        check_kl_weights(),
        check_reduction_to_fedavg(),
        check_consensus_and_comm(),
        check_partition(),
    ]
