import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fgdro.core import (CONFIG_KEYS, METRICS_HEADER, Algorithm, ClientState, MetricsRecord, ShapeError, RunConfig,
                        average_vectors, check_same_shape, derive_rng, load_config_file, theory_schedule,
                        parse_override, read_metrics_csv, validate_config, write_metrics_csv)


def test_derive_rng_same_key_same_stream():
    a = derive_rng(42, 0, 1).random(100)
    b = derive_rng(42, 0, 1).random(100)
    assert np.array_equal(a, b)


def test_derive_rng_distinct_keys_differ():
    base = derive_rng(42, 0, 1).random()
    assert derive_rng(42, 1, 1).random() != base
    assert derive_rng(43, 0, 1).random() != base
    assert derive_rng(42, 0, 2).random() != base


def test_derive_rng_order_independent():
    # drawing other streams first must not change a given stream
    first = derive_rng(7, 3, 5).random(10)
    for c in range(5):
        derive_rng(7, c, 5).random(50)
    assert np.array_equal(first, derive_rng(7, 3, 5).random(10))


def test_validate_config_examples():
    assert validate_config(RunConfig(num_clients=4, cvar_k=4, lam=1.0, beta1=0.1, beta2=0.1, beta3=0.1,
                                     beta4=0.1)) == []
    msgs = validate_config(RunConfig(num_clients=4, cvar_k=0))
    assert any("K out of range" in m for m in msgs)
    msgs = validate_config(RunConfig(beta1=1.5))
    assert any("β out of range" in m and "beta1" in m for m in msgs)


@pytest.mark.parametrize("bad", [dict(lam=0.0), dict(tau=-1.0), dict(eta=0.0), dict(rounds=0),
                                 dict(eta2=-0.1), dict(beta4=0.0)])
def test_validate_config_rejects(bad):
    assert validate_config(RunConfig(**bad))


def test_config_dict_round_trip_uses_lambda_key():
    cfg = RunConfig(num_clients=3, lam=2.5, algorithm="FGDRO_CVAR", cvar_k=2)
    d = cfg.to_dict()
    assert "lambda" in d and "lam" not in d
    assert set(d) == set(CONFIG_KEYS)
    assert RunConfig.from_dict(d) == cfg


def test_from_dict_rejects_unknown_key():
    with pytest.raises(KeyError, match="bogus"):
        RunConfig.from_dict({"bogus": 1})


def test_from_dict_rejects_fractional_int():
    with pytest.raises(ValueError):
        RunConfig.from_dict({"rounds": 2.5})


def test_parse_override():
    assert parse_override("eta=0.01") == ("eta", 0.01)
    assert parse_override("algorithm=FEDAVG") == ("algorithm", "FEDAVG")
    with pytest.raises(KeyError):
        parse_override("nope=1")
    with pytest.raises(ValueError):
        parse_override("eta")


def test_load_config_file_yaml_and_json(tmp_path):
    (tmp_path / "a.yaml").write_text("rounds: 3\nlambda: 2.0\n")
    (tmp_path / "b.json").write_text(json.dumps({"rounds": 3, "lambda": 2.0}))
    assert load_config_file(tmp_path / "a.yaml") == load_config_file(tmp_path / "b.json")


def test_theory_schedule_kl_and_cvar():
    kl = theory_schedule(RunConfig(rounds=400, local_steps=8))
    assert kl.eta == pytest.approx(1 / np.sqrt(3200)) and kl.beta1 == kl.eta
    cv = theory_schedule(RunConfig(rounds=100, local_steps=8, algorithm=Algorithm.FGDRO_CVAR))
    assert cv.eta == pytest.approx(1e-3) and cv.eta2 == cv.eta and cv.beta1 == pytest.approx(0.01)


def test_vector_helpers_are_shape_checked():
    assert np.array_equal(average_vectors([np.array([1.0]), np.array([3.0])]), [2.0])
    with pytest.raises(ShapeError):
        check_same_shape(np.zeros(2), np.zeros(3))
    with pytest.raises(ShapeError):
        average_vectors([np.zeros(2), np.zeros(3)])


def test_client_state_defaults_and_copy():
    st_ = ClientState(np.ones(3))
    assert np.array_equal(st_.m, np.zeros(3)) and np.array_equal(st_.q, np.zeros(3))
    c = st_.copy()
    c.w[0] = 5.0
    assert st_.w[0] == 1.0
    assert ClientState.from_dict(json.loads(json.dumps(st_.to_dict()))).to_dict() == st_.to_dict()
    with pytest.raises(ShapeError):
        ClientState(np.ones(3), m=np.ones(2))


finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(finite, finite, finite, finite, st.integers(0, 10**9)), min_size=0, max_size=5))
def test_metrics_csv_round_trip_exact(tmp_path_factory, rows):
    recs = [MetricsRecord(i + 1, a, b, c, d, n, 0) for i, (a, b, c, d, n) in enumerate(rows)]
    path = tmp_path_factory.mktemp("m") / "metrics.csv"
    write_metrics_csv(recs, path)
    assert read_metrics_csv(path) == recs
    assert path.read_text().splitlines()[0] == ",".join(METRICS_HEADER)


def test_read_metrics_rejects_bad_header(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        read_metrics_csv(p)


def test_algorithm_family():
    assert Algorithm.FGDRO_KL.is_kl_family and Algorithm.FGDRO_KL_ADAM.is_kl_family
    assert not Algorithm.FEDAVG.is_kl_family and not Algorithm.FGDRO_CVAR.is_kl_family


def test_with_overrides():
    cfg = RunConfig(rounds=3).with_overrides({"lambda": 4, "eta": 0.5})
    assert cfg.lam == 4.0 and cfg.eta == 0.5 and cfg.rounds == 3
    assert replace(cfg, eta2=0.1).eta_s == 0.1 and cfg.eta_s == 0.5
