"""Command-line entry point: ``fgdro {run,sweep,validate,partition,report}``.

A run config is a YAML (or JSON) mapping. Top-level keys are RunConfig
fields (``lambda`` for the KL temperature). A few optional sections
describe everything else a run needs::

    num_clients: 10
    rounds: 400
    local_steps: 8
    algorithm: FGDRO_KL
    schedule: paper            # or none
    initial_w: ones            # zeros | ones | list of floats
    data:
      kind: QUADRATIC_CLIENTS  # LINREG_CLIENTS | LOGREG_CLIENTS | CSV
      dim: 5
      heterogeneity: 1.0
      seed: 0
    diagnostics:
      rho_hat: 2.0
      inner_steps: 2000
      diag_every: 1
    execution:
      parallel: sequential     # thread | process
      workers: 1

For ``kind: CSV`` the section lists ``paths`` (one file per client,
relative to the config file) and ``loss`` (LEAST_SQUARES or LOGISTIC).

Precedence for RunConfig values is flag > schedule > file > default; the
source of every value is written to ``summary.json``.

Exit codes: 0 success, 1 a check / cell / report failed, 2 bad config or
arguments, 3 a run aborted on a non-finite value.
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from . import validation
from .core import (CONFIG_KEYS, METRICS_HEADER, NonFiniteError, RunConfig, load_config_file, parse_override,
                   read_metrics_csv, theory_schedule, validate_config)
from .datagen import (DirichletPartitionSpec, SyntheticKind, SyntheticSpec, dirichlet_partition, empty_clients,
                      generate, imbalance_report)
from .federation import RunOptions, run, write_outputs
from .models import LossKind, LossModel, load_dataset_csv
from .objectives import ProxDiagnostic

log = logging.getLogger(__name__)

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_NONFINITE = 0, 1, 2, 3

SECTIONS = ("data", "diagnostics", "execution", "schedule", "initial_w")
DATA_KEYS = {"kind", "dim", "heterogeneity", "sizes", "noise_std", "seed", "l2", "paths", "loss", "header"}
DIAG_KEYS = {"rho_hat", "inner_steps", "inner_step_size", "diag_every"}
EXEC_KEYS = {"parallel", "workers"}

# short grid names accepted by ``sweep --grid``
GRID_ALIASES = {"R": "rounds", "I": "local_steps", "lambda": "lambda", "lam": "lambda", "K": "cvar_k",
                "eta": "eta", "rounds": "rounds", "local_steps": "local_steps", "cvar_k": "cvar_k"}


class ConfigError(ValueError):
    pass


@dataclass
class Prepared:
    cfg: RunConfig
    clients: list
    initial_w: np.ndarray | None
    options: RunOptions
    provenance: dict[str, str]
    schedule: str


# ---------------------------------------------------------------------------
# config assembly


def _check_keys(section: str, given: dict, allowed: set) -> None:
    unknown = sorted(set(given) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section}: {', '.join(unknown)}")


def split_config(data: dict[str, Any]) -> tuple[dict[str, Any], dict[str, Any]]:
    """Separate RunConfig fields from the extra sections; reject anything else."""
    fields, extra = {}, {}
    for key, value in data.items():
        if key in SECTIONS:
            extra[key] = value
        elif key in CONFIG_KEYS or key in ("lam", "eta1"):
            fields["lambda" if key == "lam" else key] = value
        else:
            raise ConfigError(f"unknown config field {key!r}")
    return fields, extra


def build_config(file_fields: dict[str, Any], flags: dict[str, Any], schedule: str) -> tuple[RunConfig, dict]:
    """Merge default, file, schedule and flag values, tracking where each came from."""
    try:
        provenance = {k: "default" for k in CONFIG_KEYS}
        merged = dict(file_fields)
        provenance.update({k: "file" for k in file_fields})
        merged.update(flags)
        cfg = RunConfig.from_dict(merged)
        if schedule == "paper":
            before = cfg.to_dict()
            scheduled = theory_schedule(cfg).to_dict()
            for k, v in scheduled.items():
                if v != before[k] and k not in flags:
                    provenance[k] = "schedule"
            cfg = RunConfig.from_dict({**scheduled, **flags})
        elif schedule not in ("none", None):
            raise ConfigError(f"unknown schedule {schedule!r} (expected 'paper' or 'none')")
        provenance.update({k: "flag" for k in flags})
    except KeyError as exc:
        raise ConfigError(exc.args[0]) from None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    problems = validate_config(cfg)
    if problems:
        raise ConfigError("; ".join(problems))
    return cfg, provenance


def build_clients(data: dict[str, Any], cfg: RunConfig, base_dir: Path) -> list:
    _check_keys("data", data, DATA_KEYS)
    kind = str(data.get("kind", "QUADRATIC_CLIENTS")).upper()
    if kind == "CSV":
        paths = data.get("paths") or []
        loss = LossKind(str(data.get("loss", "LOGISTIC")).upper())
        if loss is LossKind.QUADRATIC:
            raise ConfigError("data.loss: QUADRATIC clients are synthetic only")
        model = LossModel(loss, float(data.get("l2", 0.0)))
        clients = [(model, load_dataset_csv(base_dir / p, i, data.get("header"))) for i, p in enumerate(paths)]
    else:
        try:
            spec = SyntheticSpec(SyntheticKind(kind), cfg.num_clients, int(data.get("dim", 5)),
                                 float(data.get("heterogeneity", 1.0)), data.get("sizes"),
                                 float(data.get("noise_std", 0.1)), int(data.get("seed", 0)),
                                 float(data.get("l2", 0.0)))
            clients = generate(spec)
        except ValueError as exc:
            raise ConfigError(f"data: {exc}") from None
    if len(clients) != cfg.num_clients:
        raise ConfigError(f"num_clients={cfg.num_clients} but data provides {len(clients)} clients")
    return clients


def build_initial_w(spec: Any, dim: int) -> np.ndarray | None:
    if spec is None or spec == "zeros":
        return None
    if spec == "ones":
        return np.ones(dim)
    w = np.asarray(spec, dtype=np.float64).reshape(-1)
    if w.shape != (dim,):
        raise ConfigError(f"initial_w has {w.shape[0]} entries, model dimension is {dim}")
    return w


def build_options(extra: dict[str, Any], parallel: str | None, workers: int | None) -> RunOptions:
    diag = extra.get("diagnostics") or {}
    exe = extra.get("execution") or {}
    _check_keys("diagnostics", diag, DIAG_KEYS)
    _check_keys("execution", exe, EXEC_KEYS)
    try:
        prox = ProxDiagnostic(float(diag.get("rho_hat", 2.0)), int(diag.get("inner_steps", 2000)),
                              diag.get("inner_step_size"))
        return RunOptions(parallel=parallel or exe.get("parallel", "sequential"),
                          workers=int(workers or exe.get("workers", 1)),
                          prox=prox, diag_every=int(diag.get("diag_every", 1)))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def prepare(data: dict[str, Any], flags: dict[str, Any], base_dir: Path, schedule: str | None = None,
            parallel: str | None = None, workers: int | None = None) -> Prepared:
    file_fields, extra = split_config(data)
    schedule = schedule or extra.get("schedule") or "none"
    cfg, provenance = build_config(file_fields, flags, schedule)
    clients = build_clients(extra.get("data") or {}, cfg, base_dir)
    model, ds = clients[0]
    dim = model.center.shape[0] if model.center is not None else ds.dim
    w0 = build_initial_w(extra.get("initial_w"), dim)
    options = build_options(extra, parallel, workers)
    return Prepared(cfg, clients, w0, options, provenance, schedule)


def execute(prep: Prepared, out_dir: Path) -> dict[str, Any]:
    fr = run(prep.cfg, prep.clients, prep.initial_w, prep.options)
    extra = {"provenance": prep.provenance, "schedule": prep.schedule}
    return write_outputs(fr, out_dir, extra)


def _parse_overrides(items: Sequence[str]) -> dict[str, Any]:
    out = {}
    for item in items:
        try:
            key, value = parse_override(item)
        except (KeyError, ValueError) as exc:
            raise ConfigError(exc.args[0]) from None
        out["lambda" if key == "lam" else key] = value
    return out


def _load(path: str) -> dict[str, Any]:
    try:
        return load_config_file(path)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except (ValueError, yaml.YAMLError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.6g}"


# ---------------------------------------------------------------------------
# subcommands


def cmd_run(args) -> int:
    try:
        data = _load(args.config)
        flags = _parse_overrides(args.overrides)
        prep = prepare(data, flags, Path(args.config).parent, args.schedule, args.parallel, args.workers)
        if args.timing:
            prep.options.record_wall_time = True
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        summary = execute(prep, Path(args.output))
    except NonFiniteError as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    final = summary["final"]
    label = "prox_dist_sq" if prep.cfg.algorithm.value == "FGDRO_CVAR" else "grad_norm_sq"
    print(f"{summary['algorithm']} round {final['round']}: worst_client_loss={_fmt(final['worst_client_loss'])} "
          f"avg_client_loss={_fmt(final['avg_client_loss'])} {label}={_fmt(final['exact_grad_norm_sq'])}")
    print(f"wrote {args.output}/metrics.csv, summary.json, checkpoint.json")
    return EXIT_OK


def parse_grid(items: Sequence[str]) -> list[tuple[str, list[Any]]]:
    grid = []
    for item in items:
        if "=" not in item:
            raise ConfigError(f"grid entry {item!r} is not of the form key=v1,v2,...")
        key, raw = item.split("=", 1)
        if key not in GRID_ALIASES:
            raise ConfigError(f"grid key {key!r} not sweepable (use R, I, lambda, K or eta)")
        values = [yaml.safe_load(v) for v in raw.split(",") if v.strip()]
        if not values:
            raise ConfigError(f"grid key {key!r} has no values")
        grid.append((GRID_ALIASES[key], values))
    return grid


def _cell_name(cell: dict[str, Any]) -> str:
    return "_".join(f"{k}={v}" for k, v in cell.items())


def _run_cell(task) -> dict[str, Any]:
    data, flags, base_dir, schedule, out_dir = task
    row = {"status": "ok", "error": ""}
    try:
        prep = prepare(data, flags, base_dir, schedule)
        summary = execute(prep, out_dir)
        row.update({k: summary["final"][k] for k in METRICS_HEADER if k in summary["final"]})
    except (ConfigError, NonFiniteError, ValueError) as exc:
        row.update(status="failed", error=str(exc))
    return row


def cmd_sweep(args) -> int:
    try:
        data = _load(args.config)
        flags = _parse_overrides(args.overrides)
        grid = parse_grid(args.grid)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if not grid:
        print("config error: empty grid (pass at least one --grid key=v1,v2)", file=sys.stderr)
        return EXIT_CONFIG

    keys = [k for k, _ in grid]
    cells = [dict(zip(keys, combo)) for combo in itertools.product(*(v for _, v in grid))]
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    tasks = []
    for cell in cells:
        cell_flags = {**flags, **cell}
        if args.budget is not None:
            I = int(cell_flags.get("local_steps", data.get("local_steps", 1)))
            cell_flags["rounds"] = max(1, args.budget // I)
        tasks.append((data, cell_flags, Path(args.config).parent, args.schedule, out / _cell_name(cell)))

    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_run_cell, tasks))
    else:
        rows = [_run_cell(t) for t in tasks]

    columns = ["cell"] + keys + ["rounds_run", "status"] + list(METRICS_HEADER[1:6]) + ["error"]
    with open(out / "index.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for cell, task, row in zip(cells, tasks, rows):
            metrics = [repr(float(row[k])) if k in row else "" for k in METRICS_HEADER[1:5]]
            comm = str(row.get("comm_scalars_cumulative", ""))
            writer.writerow([_cell_name(cell)] + [cell[k] for k in keys] + [task[1].get("rounds", ""), row["status"]]
                            + metrics + [comm, row["error"]])
    failed = [_cell_name(c) for c, r in zip(cells, rows) if r["status"] != "ok"]
    print(f"{len(cells)} cell(s), {len(failed)} failed; index at {out / 'index.csv'}")
    for name, row in zip(cells, rows):
        if row["status"] != "ok":
            print(f"FAILED {_cell_name(name)}: {row['error']}", file=sys.stderr)
    return EXIT_FAILED if failed else EXIT_OK


def cmd_validate(args) -> int:
    results = validation.run_battery()
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} check(s) failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_FAILED
    print(f"all {len(results)} checks passed")
    return EXIT_OK


def _json_number(x: float) -> float | str | None:
    if x is None:
        return None
    return "inf" if math.isinf(x) else x


def cmd_partition(args) -> int:
    try:
        labels = np.loadtxt(args.labels, delimiter=",", ndmin=1, dtype=str)
        if labels.ndim > 1:
            labels = labels[:, -1]
        spec = DirichletPartitionSpec(args.alpha, args.clients, labels, args.seed)
    except (OSError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    parts = dirichlet_partition(spec)
    report = imbalance_report([labels[p] for p in parts], classification=True)
    payload = {
        "alpha": args.alpha, "clients": args.clients, "seed": args.seed,
        "sizes": [len(p) for p in parts],
        "empty_clients": empty_clients(parts),
        "client_imbalance_ratio": _json_number(report.client_ratio),
        "class_imbalance_ratio": _json_number(report.class_ratio),
        "parts": parts,
    }
    text = json.dumps(payload, sort_keys=True) + "\n"
    if args.output:
        Path(args.output).write_text(text)
        print(f"sizes {payload['sizes']}; client ratio {payload['client_imbalance_ratio']}; wrote {args.output}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def report_table(dirs: Sequence[str]) -> str:
    """Fixed-width comparison table, one row per run directory, in argument order."""
    rows = []
    for d in dirs:
        path = Path(d) / "metrics.csv"
        if not path.is_file():
            raise ConfigError(f"{d}: no metrics.csv")
        try:
            records = read_metrics_csv(path)
        except (ValueError, IndexError, KeyError) as exc:
            raise ConfigError(f"{d}: corrupt metrics.csv ({exc})") from None
        if not records:
            raise ConfigError(f"{d}: metrics.csv has no rows")
        algorithm = "?"
        summary = Path(d) / "summary.json"
        if summary.is_file():
            try:
                algorithm = json.loads(summary.read_text()).get("algorithm", "?")
            except json.JSONDecodeError:
                raise ConfigError(f"{d}: corrupt summary.json") from None
        last = records[-1]
        rows.append([d, algorithm, str(last.round), _fmt(last.worst_client_loss), _fmt(last.avg_client_loss),
                     _fmt(last.exact_grad_norm_sq), str(last.comm_scalars_cumulative)])
    header = ["run", "algorithm", "rounds", "worst_loss", "avg_loss", "diagnostic", "comm_scalars"]
    widths = [max(len(r[j]) for r in rows + [header]) for j in range(len(header))]
    buf = io.StringIO()
    for r in [header] + rows:
        buf.write("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() + "\n")
    return buf.getvalue()


def cmd_report(args) -> int:
    try:
        table = report_table(args.dirs)
    except ConfigError as exc:
        print(f"report error: {exc}", file=sys.stderr)
        return EXIT_FAILED
    sys.stdout.write(table)
    if args.output:
        Path(args.output).write_text(table)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fgdro", description="Federated group DRO simulator.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one federated training job")
    p.add_argument("config", help="YAML or JSON config file")
    p.add_argument("overrides", nargs="*", help="RunConfig overrides, key=value")
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.add_argument("--schedule", choices=("paper", "none"), default=None,
                   help="'paper' sets eta and beta1 from R and I with unit constants")
    p.add_argument("--parallel", choices=("sequential", "thread", "process"), default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--timing", action="store_true", help="record wall_ms (makes metrics.csv non-reproducible)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run the cross-product of a parameter grid")
    p.add_argument("config")
    p.add_argument("overrides", nargs="*", help="overrides applied to every cell, key=value")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--grid", action="append", default=[], metavar="KEY=V1,V2",
                   help="sweep values for R, I, lambda, K or eta; repeat for more keys")
    p.add_argument("--budget", type=int, default=None, help="fix R*I: each cell runs budget // I rounds")
    p.add_argument("--schedule", choices=("paper", "none"), default=None)
    p.add_argument("--jobs", type=int, default=1, help="cells run in parallel processes")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("validate", help="run the fixed-seed property battery")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("partition", help="Dirichlet label partition across clients")
    p.add_argument("labels", help="text/CSV file of labels, one sample per line (last column)")
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--clients", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", default=None, help="JSON output path (stdout if omitted)")
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("report", help="compare finished runs")
    p.add_argument("dirs", nargs="+", help="run output directories")
    p.add_argument("-o", "--output", default=None, help="also write the table here")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
