"""Shared types: run configuration, client state, metric rows, seeded streams."""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
import yaml


class Algorithm(str, enum.Enum):
    FGDRO_CVAR = "FGDRO_CVAR"
    FGDRO_KL = "FGDRO_KL"
    FGDRO_KL_ADAM = "FGDRO_KL_ADAM"
    LOCAL_ADAM = "LOCAL_ADAM"
    FEDAVG = "FEDAVG"

    @property
    def is_kl_family(self) -> bool:
        return self in (Algorithm.FGDRO_KL, Algorithm.FGDRO_KL_ADAM)


class ShapeError(ValueError):
    """Raised when two parameter vectors do not have the same shape."""


class NonFiniteError(FloatingPointError):
    """A state update produced NaN or Inf."""

    def __init__(self, message: str, client: int | None = None,
                 round: int | None = None, step: int | None = None):
        self.client = client
        self.round = round
        self.step = step
        where = []
        if client is not None:
            where.append(f"client={client}")
        if round is not None:
            where.append(f"round={round}")
        if step is not None:
            where.append(f"step={step}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


# ---------------------------------------------------------------------------
# parameter vectors


def as_vector(values: Iterable[float] | np.ndarray) -> np.ndarray:
    """Copy ``values`` into a 1-D float64 array, rejecting non-finite entries."""
    out = np.array(values, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError("parameter vector has non-finite entries")
    return out


def check_same_shape(*arrays: np.ndarray) -> None:
    if not arrays:
        return
    shape = np.shape(arrays[0])
    for a in arrays[1:]:
        if np.shape(a) != shape:
            raise ShapeError(f"shape mismatch: {shape} vs {np.shape(a)}")


def average_vectors(arrays: Sequence[np.ndarray]) -> np.ndarray:
    """Coordinate-wise mean; every input must have the same shape.

    Computed as ``a_0 + mean(a_j - a_0)`` so that averaging identical inputs
    returns them bit for bit.
    """
    if len(arrays) == 0:
        raise ValueError("cannot average an empty list")
    check_same_shape(*arrays)
    stacked = np.stack([np.asarray(a, dtype=np.float64) for a in arrays])
    return stacked[0] + np.mean(stacked - stacked[0], axis=0)


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class RunConfig:
    """Hyperparameters of one federated run.

    ``lam`` is the KL temperature; it is read from and written to config
    files under the key ``lambda``. ``eta2`` is the threshold step size of
    FGDRO-CVaR and falls back to ``eta`` when unset.
    """

    num_clients: int = 1
    rounds: int = 1
    local_steps: int = 1
    eta: float = 0.01
    eta2: float | None = None
    beta1: float = 0.1
    beta2: float = 0.1
    beta3: float = 0.1
    beta4: float = 0.01
    lam: float = 1.0
    cvar_k: int = 1
    tau: float = 1e-3
    batch_size: int = 1
    master_seed: int = 0
    algorithm: Algorithm = Algorithm.FGDRO_KL

    def __post_init__(self):
        object.__setattr__(self, "algorithm", Algorithm(self.algorithm))

    @property
    def eta1(self) -> float:
        return self.eta

    @property
    def eta_s(self) -> float:
        return self.eta if self.eta2 is None else self.eta2

    def to_dict(self) -> dict[str, Any]:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, Algorithm):
                value = value.value
            out[_FILE_KEY.get(f.name, f.name)] = value
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, value in data.items():
            name = _ATTR_KEY.get(key, key)
            if name not in known:
                raise KeyError(f"unknown RunConfig field {key!r}")
            kwargs[name] = _coerce(name, value)
        return cls(**kwargs)

    def with_overrides(self, overrides: Mapping[str, Any]) -> "RunConfig":
        merged = self.to_dict()
        merged.update(overrides)
        return RunConfig.from_dict(merged)


_FILE_KEY = {"lam": "lambda"}
_ATTR_KEY = {"lambda": "lam", "eta1": "eta"}
_INT_FIELDS = {"num_clients", "rounds", "local_steps", "cvar_k", "batch_size", "master_seed"}
CONFIG_KEYS = tuple(_FILE_KEY.get(f.name, f.name) for f in fields(RunConfig))


def _coerce(name: str, value: Any) -> Any:
    if value is None:
        return None
    if name == "algorithm":
        return Algorithm(str(value).upper())
    if name in _INT_FIELDS:
        if isinstance(value, float) and not value.is_integer():
            raise ValueError(f"{name} must be an integer, got {value}")
        return int(value)
    return float(value)


def parse_override(text: str) -> tuple[str, Any]:
    """Parse ``key=value`` into a (config key, YAML-typed value) pair."""
    if "=" not in text:
        raise ValueError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if _ATTR_KEY.get(key, key) not in {f.name for f in fields(RunConfig)}:
        raise KeyError(f"unknown RunConfig field {key!r}")
    return key, yaml.safe_load(raw)


def validate_config(cfg: RunConfig) -> list[str]:
    """Return every violated constraint; an empty list means the config is usable."""
    problems = []
    for name in ("num_clients", "rounds", "local_steps", "batch_size"):
        if getattr(cfg, name) < 1:
            problems.append(f"{name} must be a positive integer")
    if not 1 <= cfg.cvar_k <= max(cfg.num_clients, 0):
        problems.append(f"K out of range: cvar_k={cfg.cvar_k} not in [1, {cfg.num_clients}]")
    if not (cfg.lam > 0 and math.isfinite(cfg.lam)):
        problems.append(f"lambda must be > 0, got {cfg.lam}")
    if not (cfg.tau > 0 and math.isfinite(cfg.tau)):
        problems.append(f"tau must be > 0, got {cfg.tau}")
    for name in ("beta1", "beta2", "beta3", "beta4"):
        b = getattr(cfg, name)
        if not 0 < b <= 1:
            problems.append(f"β out of range: {name}={b} not in (0, 1]")
    for name, value in (("eta", cfg.eta), ("eta2", cfg.eta2)):
        if value is not None and not (value > 0 and math.isfinite(value)):
            problems.append(f"step size {name} must be > 0, got {value}")
    if not 0 <= cfg.master_seed < 2**64:
        problems.append("master_seed must fit in an unsigned 64-bit integer")
    return problems


def load_config_file(path: str | Path) -> dict[str, Any]:
    """Read a YAML or JSON config file into a plain dict."""
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json":
        data = json.loads(text)
    else:
        data = yaml.safe_load(text)
    if not isinstance(data, dict):
        raise ValueError(f"{path}: top level must be a mapping")
    return data


def theory_schedule(cfg: RunConfig) -> RunConfig:
    """Unit-constant step sizes from the convergence theorems.

    KL family and the ERM baselines: eta = beta1 = 1/sqrt(R*I).
    FGDRO-CVaR: eta = eta2 = R^(-3/2), beta1 = 1/R.
    """
    R, I = cfg.rounds, cfg.local_steps
    if cfg.algorithm is Algorithm.FGDRO_CVAR:
        eta = R ** -1.5
        return replace(cfg, eta=eta, eta2=eta, beta1=min(1.0, 1.0 / R))
    step = 1.0 / math.sqrt(R * I)
    return replace(cfg, eta=step, beta1=min(1.0, step))


# ---------------------------------------------------------------------------
# randomness


def derive_rng(master_seed: int, client_id: int, round: int) -> np.random.Generator:
    """Counter-based stream keyed by ``(master_seed, client_id, round)``.

    The stream does not depend on how many other streams were created before
    it, so client loops can run in any order or in parallel.
    """
    seq = np.random.SeedSequence(int(master_seed), spawn_key=(int(client_id), int(round)))
    return np.random.Generator(np.random.Philox(seq))


# ---------------------------------------------------------------------------
# client state and metrics


@dataclass
class ClientState:
    w: np.ndarray
    u: float = 0.0
    v: float = 1.0
    s: float = 0.0
    m: np.ndarray | None = None
    q: np.ndarray | None = None

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        if self.m is None:
            self.m = np.zeros_like(self.w)
        if self.q is None:
            self.q = np.zeros_like(self.w)
        check_same_shape(self.w, self.m, self.q)

    @property
    def dim(self) -> int:
        return self.w.shape[0]

    def copy(self) -> "ClientState":
        return ClientState(self.w.copy(), self.u, self.v, self.s, self.m.copy(), self.q.copy())

    def is_finite(self) -> bool:
        return bool(
            np.all(np.isfinite(self.w)) and np.all(np.isfinite(self.m)) and np.all(np.isfinite(self.q))
            and math.isfinite(self.u) and math.isfinite(self.v) and math.isfinite(self.s)
        )

    def to_dict(self) -> dict[str, Any]:
        return {"w": self.w.tolist(), "u": self.u, "v": self.v, "s": self.s,
                "m": self.m.tolist(), "q": self.q.tolist()}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ClientState":
        return cls(np.asarray(data["w"], dtype=np.float64), float(data["u"]), float(data["v"]),
                   float(data["s"]), np.asarray(data["m"], dtype=np.float64),
                   np.asarray(data["q"], dtype=np.float64))


METRICS_HEADER = (
    "round",
    "objective_value",
    "exact_grad_norm_sq",
    "worst_client_loss",
    "avg_client_loss",
    "comm_scalars_cumulative",
    "wall_ms",
)


@dataclass(frozen=True)
class MetricsRecord:
    round: int
    objective_value: float
    exact_grad_norm_sq: float
    worst_client_loss: float
    avg_client_loss: float
    comm_scalars_cumulative: int
    wall_ms: int = 0

    def row(self) -> list[str]:
        return [str(self.round), repr(float(self.objective_value)), repr(float(self.exact_grad_norm_sq)),
                repr(float(self.worst_client_loss)), repr(float(self.avg_client_loss)),
                str(self.comm_scalars_cumulative), str(self.wall_ms)]


def write_metrics_csv(records: Sequence[MetricsRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for rec in records:
            writer.writerow(rec.row())


def read_metrics_csv(path: str | Path) -> list[MetricsRecord]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != METRICS_HEADER:
            raise ValueError(f"{path}: unexpected metrics header {header}")
        out = []
        for row in reader:
            if len(row) != len(METRICS_HEADER):
                raise ValueError(f"{path}: malformed row {row}")
            out.append(MetricsRecord(int(row[0]), float(row[1]), float(row[2]), float(row[3]),
                                     float(row[4]), int(row[5]), int(row[6])))
    return out


def records_to_dicts(records: Sequence[MetricsRecord]) -> list[dict[str, Any]]:
    return [asdict(r) for r in records]


__all__ = [
    "Algorithm", "ShapeError", "NonFiniteError", "RunConfig", "ClientState", "MetricsRecord",
    "METRICS_HEADER", "CONFIG_KEYS", "as_vector", "check_same_shape", "average_vectors",
    "validate_config", "load_config_file", "parse_override", "theory_schedule", "derive_rng",
    "write_metrics_csv", "read_metrics_csv", "records_to_dicts",
]
