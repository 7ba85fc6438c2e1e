from dataclasses import replace

import numpy as np
import pytest

from fgdro.algorithms import AggregationSpec, communication_cost
from fgdro.core import Algorithm, NonFiniteError, RunConfig, read_metrics_csv
from fgdro.datagen import SyntheticSpec, generate
from fgdro.federation import (RunOptions, check_consensus, evaluate, last_model, load_checkpoint, round_batches,
                              run, sample_output_index, select_output, write_outputs)
from fgdro.models import ClientDataset, LossModel, batch_loss_grad
from fgdro.objectives import ProxDiagnostic


def test_single_fedavg_step():
    a = np.array([1.0, -1.0])
    clients = [(LossModel.quadratic(a), ClientDataset([[0.0]], [0.0]))]
    w0 = np.array([3.0, 0.5])
    fr = run(RunConfig(eta=0.2, algorithm="FEDAVG"), clients, w0)
    assert np.array_equal(fr.averaged_model(), w0 - 0.2 * (w0 - a))
    assert len(fr.history) == 1 and fr.history[0].round == 1


@pytest.mark.parametrize("alg", list(Algorithm))
def test_run_is_deterministic(alg, logreg_clients):
    cfg = RunConfig(num_clients=4, rounds=6, local_steps=3, eta=0.05, cvar_k=2, batch_size=4, algorithm=alg,
                    master_seed=11)
    opts = RunOptions(prox=ProxDiagnostic(2.0, 50))
    a = run(cfg, logreg_clients, None, opts)
    b = run(cfg, logreg_clients, None, opts)
    assert a.history == b.history
    assert np.array_equal(a.averaged_model(), b.averaged_model())


@pytest.mark.parametrize("alg", list(Algorithm))
def test_resume_matches_single_run(alg, logreg_clients, tmp_path):
    cfg = RunConfig(num_clients=4, rounds=5, local_steps=3, eta=0.05, cvar_k=2, batch_size=3, algorithm=alg)
    opts = RunOptions(prox=ProxDiagnostic(2.0, 30))
    full = run(cfg, logreg_clients, None, opts)
    part = run(replace(cfg, rounds=2), logreg_clients, None, opts)
    write_outputs(part, tmp_path)
    restored = load_checkpoint(tmp_path / "checkpoint.json", logreg_clients)
    rest = run(cfg, logreg_clients, None, opts, resume=restored)
    assert rest.history == full.history
    for a, b in zip(rest.states, full.states):
        assert a.to_dict() == b.to_dict()


@pytest.mark.parametrize("mode", ["thread", "process"])
def test_parallel_matches_sequential(mode, logreg_clients):
    cfg = RunConfig(num_clients=4, rounds=4, local_steps=5, eta=0.05, batch_size=4, algorithm="FGDRO_KL_ADAM")
    seq = run(cfg, logreg_clients)
    par = run(cfg, logreg_clients, None, RunOptions(parallel=mode, workers=3))
    assert seq.history == par.history


@pytest.mark.parametrize("alg", list(Algorithm))
def test_consensus_and_comm(alg, logreg_clients):
    cfg = RunConfig(num_clients=4, rounds=7, local_steps=2, eta=0.05, cvar_k=3, batch_size=2, algorithm=alg)
    fr = run(cfg, logreg_clients, None, RunOptions(check_consensus=True, prox=ProxDiagnostic(2.0, 10)))
    spec = AggregationSpec.for_algorithm(alg)
    check_consensus(fr.states, spec)
    cost = communication_cost(spec, 3)
    assert [h.comm_scalars_cumulative for h in fr.history] == [r * 4 * cost for r in range(1, 8)]


def test_u_is_never_averaged(logreg_clients):
    cfg = RunConfig(num_clients=4, rounds=3, local_steps=2, eta=0.05, batch_size=2)
    fr = run(cfg, logreg_clients)
    assert len({st.u for st in fr.states}) == 4


def test_round_batches_shape_and_determinism():
    cfg = RunConfig(local_steps=4, batch_size=3, master_seed=5)
    a = round_batches(cfg, 2, 7, 10)
    assert a.shape == (4, 3) and a.min() >= 0 and a.max() < 10
    assert np.array_equal(a, round_batches(cfg, 2, 7, 10))
    assert not np.array_equal(a, round_batches(cfg, 2, 8, 10))


def test_kl_initialization(logreg_clients):
    cfg = RunConfig(num_clients=4, rounds=1, local_steps=1, batch_size=2, lam=0.5)
    from fgdro.federation import initial_states
    w0 = np.full(3, 0.2)
    states = initial_states(cfg, logreg_clients, w0)
    for i, ((m, ds), st) in enumerate(zip(logreg_clients, states)):
        idx = round_batches(cfg, i, 1, len(ds))[0]
        assert st.u == batch_loss_grad(m, w0, ds.X[idx], ds.y[idx])[0]
    assert states[0].v == pytest.approx(np.mean([np.exp(st.u / 0.5) for st in states]))
    cv = initial_states(replace(cfg, algorithm="FGDRO_CVAR"), logreg_clients, w0)
    assert all(st.u == 0.0 and st.s == 0.0 for st in cv)


def test_single_client_kl_is_momentum_sgd_on_weighted_gradient():
    rng = np.random.default_rng(0)
    ds = ClientDataset(rng.standard_normal((30, 2)), rng.standard_normal(30))
    model = LossModel.least_squares()
    cfg = RunConfig(rounds=6, local_steps=1, eta=0.1, beta1=0.3, beta2=0.2, beta3=0.5, lam=2.0, master_seed=3)
    fr = run(cfg, [(model, ds)], np.zeros(2))
    # replay centrally with the same batches
    w, m = np.zeros(2), np.zeros(2)
    idx0 = round_batches(cfg, 0, 1, 30)[0]
    u = batch_loss_grad(model, w, ds.X[idx0], ds.y[idx0])[0]
    v = np.exp(u / 2.0)
    for r in range(1, 7):
        idx = round_batches(cfg, 0, r, 30)[0]
        loss, g = batch_loss_grad(model, w, ds.X[idx], ds.y[idx])
        u = 0.7 * u + 0.3 * loss
        e = np.exp(u / 2.0)
        v = 0.8 * v + 0.2 * e
        m = 0.5 * m + 0.5 * (e / v) * g
        w = w - 0.1 * m
    assert np.array_equal(fr.averaged_model(), w)


def test_cvar_inactive_client_does_not_move():
    from fgdro.core import ClientState
    from fgdro.federation import _client_round
    model, ds = LossModel.quadratic([0.5]), ClientDataset([[0.0]], [0.0], 0)
    cfg = RunConfig(num_clients=2, local_steps=6, eta=0.01, cvar_k=1, beta1=0.5, algorithm="FGDRO_CVAR")
    start = ClientState(np.zeros(1), u=0.0, s=10.0)  # losses 0.125 stay far below s
    state, iterates, _ = _client_round((0, start, model, ds, cfg, 1, True))
    assert np.all(iterates == 0.0) and np.array_equal(state.m, [0.0])
    assert state.s == pytest.approx(10.0 - 6 * 0.01 * 0.5)


def test_evaluate_examples(quad_clients):
    clients = [(LossModel.quadratic([0.0]), ClientDataset([[0.0]], [0.0], 0)),
               (LossModel.quadratic([2.0]), ClientDataset([[0.0]], [0.0], 1))]
    fr = run(RunConfig(num_clients=2, eta=0.1), clients, np.zeros(1))
    ev = evaluate(fr, np.array([1.0]))
    assert ev.worst_client_loss == ev.avg_client_loss == 0.5
    assert ev.stationarity <= 1e-12
    ev = evaluate(fr, np.array([np.sqrt(2)]))  # losses 1 and (2 - sqrt2)^2 / 2
    assert ev.worst_client_loss == pytest.approx(1.0)
    cv = run(RunConfig(num_clients=10, cvar_k=3, algorithm="FGDRO_CVAR"), quad_clients, np.ones(5),
             RunOptions(prox=ProxDiagnostic(2.0, 20)))
    assert evaluate(cv, np.ones(5), 0.0, ProxDiagnostic(2.0, 20)).stationarity > 0


def test_output_selection():
    clients = [(LossModel.quadratic([0.0]), ClientDataset([[0.0]], [0.0]))]
    fr = run(RunConfig(eta=0.1), clients, np.ones(1), RunOptions(iterate_log=True))
    assert np.array_equal(select_output(fr, 0), fr.iterate_log[0][2])
    at_opt = run(RunConfig(rounds=3, local_steps=4, eta=0.1), clients, np.zeros(1), RunOptions(iterate_log=True))
    assert all(np.array_equal(select_output(at_opt, s), [0.0]) for s in range(5))
    fr = run(RunConfig(rounds=5, local_steps=3, eta=0.1), clients, np.ones(1), RunOptions(iterate_log=True))
    assert sample_output_index(fr, 9) == sample_output_index(fr, 9)
    assert np.array_equal(last_model(fr), fr.averaged_model())
    with pytest.raises(ValueError):
        select_output(run(RunConfig(eta=0.1), clients, np.ones(1)), 0)


def test_iterate_stride():
    clients = [(LossModel.quadratic([0.0]), ClientDataset([[0.0]], [0.0]))]
    fr = run(RunConfig(rounds=2, local_steps=6, eta=0.1), clients, np.ones(1),
             RunOptions(iterate_log=True, iterate_stride=3))
    assert [(r, t) for r, t, _ in fr.iterate_log] == [(1, 1), (1, 4), (2, 1), (2, 4)]


def test_run_rejects_bad_inputs(logreg_clients):
    with pytest.raises(ValueError, match="K out of range"):
        run(RunConfig(num_clients=4, cvar_k=9), logreg_clients)
    with pytest.raises(ValueError, match="num_clients"):
        run(RunConfig(num_clients=3), logreg_clients)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_aborts_with_location():
    clients = [(LossModel.least_squares(), ClientDataset([[1e200]], [1.0], 0))]
    with pytest.raises(NonFiniteError) as info:
        run(RunConfig(eta=1e200, algorithm="FEDAVG"), clients, np.zeros(1))
    assert info.value.client == 0 and info.value.round == 1 and info.value.step == 1


def test_write_outputs(tmp_path, logreg_clients):
    cfg = RunConfig(num_clients=4, rounds=3, local_steps=2, batch_size=2)
    fr = run(cfg, logreg_clients)
    summary = write_outputs(fr, tmp_path, {"note": 1})
    assert read_metrics_csv(tmp_path / "metrics.csv") == fr.history
    assert summary["final"]["round"] == 3 and summary["config"]["rounds"] == 3
    first = (tmp_path / "metrics.csv").read_bytes()
    write_outputs(run(cfg, logreg_clients), tmp_path, {"note": 1})
    assert (tmp_path / "metrics.csv").read_bytes() == first
    assert all(h.wall_ms == 0 for h in fr.history)


def test_monotone_trend_over_rounds(quad_clients):
    """End-of-run ||grad F||^2 does not grow by more than 2x as R doubles."""
    finals = []
    for R in (50, 100, 200, 400):
        cfg = RunConfig(num_clients=10, rounds=R, local_steps=8, lam=5.0, beta2=0.0125, beta3=0.03125,
                        master_seed=1)
        from fgdro.core import theory_schedule
        fr = run(theory_schedule(cfg), quad_clients, np.ones(5))
        finals.append(fr.history[-1].exact_grad_norm_sq)
    assert all(b <= 2 * a for a, b in zip(finals, finals[1:]))
