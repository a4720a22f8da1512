"""Run scenarios and write artifacts: trace.csv, metrics.csv, summary.json, config.yaml."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .hybrid import HybridArc, SimSetup, record_metrics, simulate
from .scenario import Scenario, ScenarioError, build_setup

log = logging.getLogger(__name__)

ASYMPTOTIC_FRACTION = 0.2


@dataclass
class RunArtifacts:
    out_dir: Path | None
    scenario: Scenario
    setup: SimSetup
    arc: HybridArc
    summary: dict

    @property
    def trace_path(self) -> Path:
        return self.out_dir / "trace.csv"

    @property
    def metrics_path(self) -> Path:
        return self.out_dir / "metrics.csv"

    @property
    def summary_path(self) -> Path:
        return self.out_dir / "summary.json"


def trace_columns(n: int, n_theta: int) -> list[str]:
    return (["t", "j"] + [f"x_{i + 1}" for i in range(n)] + [f"xhat_{i + 1}" for i in range(n)]
            + ["xi", "y"] + [f"theta_{i + 1}" for i in range(n_theta)] + ["err_norm", "pred_err"])


def trace_table(arc: HybridArc, setup: SimSetup) -> np.ndarray:
    m = record_metrics(arc, model_set=setup.identifier.model_set, plant=setup.plant)
    return np.column_stack([arc.t, arc.j, arc.x, arc.xhat, arc.xi, arc.y, arc.theta,
                            m["err_norm"], m["pred_err"]])


def _window_start(horizon: float) -> float:
    return (1.0 - ASYMPTOTIC_FRACTION) * horizon


def trace_statistics(table: np.ndarray, n: int, horizon: float) -> dict:
    """Summary entries that can be recomputed exactly from the trace rows."""
    t = table[:, 0]
    err = table[:, -2]
    w = t >= _window_start(horizon)
    return {
        "final_err_norm": float(err[-1]),
        "trace_asym_err_norm": float(err[w].max()),
        "trace_rows": int(table.shape[0]),
    }


def summarize(arc: HybridArc, setup: SimSetup, table: np.ndarray, runtime: float) -> dict:
    n = setup.plant.n
    H = setup.horizon
    ft = arc.full_times
    w = ft >= _window_start(H)
    jl = arc.jumps
    jw = jl.t >= _window_start(H)
    out = {
        "horizon": H,
        "h": setup.h,
        "n_steps": int(ft.size - 1),
        "n_jumps": int(jl.t.size),
        "j_star": jl.j_star,
        "asym_err_norm": float(arc.err_norm_full[w].max()),
        "asym_err_abs": arc.err_abs[w].max(axis=0).tolist(),
        "theta_final": jl.theta[-1].tolist() if jl.t.size else [],
        "invariant_exits": int(arc.invariant_exits),
        "runtime_s": round(runtime, 3),
    }
    if jl.t.size and jl.theta.shape[1] and jl.theta.shape == jl.theta_true.shape:
        err = np.abs(jl.theta - jl.theta_true)
        out["theta_true_final"] = jl.theta_true[-1].tolist()
        out["asym_theta_err"] = err[jw].max(axis=0).tolist() if jw.any() else None
    if jl.t.size:
        out["asym_pred_err"] = float(np.abs(jl.pred_err[jw]).max()) if jw.any() else None
    out.update(trace_statistics(table, n, H))
    return out


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_table(path: Path, header: list[str], rows: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_table(path: Path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        rows = [[float(v) for v in row] for row in r]
    return header, np.array(rows).reshape(len(rows), len(header))


def metrics_table(arc: HybridArc) -> tuple[list[str], np.ndarray]:
    jl = arc.jumps
    k = jl.theta.shape[1]
    kt = jl.theta_true.shape[1]
    header = (["j", "t"] + [f"theta_{i + 1}" for i in range(k)] + [f"theta_true_{i + 1}" for i in range(kt)]
              + ["pe_ok", "msv", "u_out", "phi", "pred_err"])
    rows = np.column_stack([np.arange(1, jl.t.size + 1), jl.t, jl.theta, jl.theta_true,
                            jl.pe_ok.astype(float), jl.msv, jl.u_out, jl.phi, jl.pred_err])
    return header, rows


def run(scenario: Scenario, out_dir: str | Path | None = None, seed: int | None = None,
        overrides=None) -> RunArtifacts:
    """Simulate one scenario; write artifacts when ``out_dir`` is given."""
    sc = scenario.with_overrides(overrides).with_seed(seed)
    setup = build_setup(sc)
    t0 = time.perf_counter()
    arc = simulate(setup)
    runtime = time.perf_counter() - t0
    table = trace_table(arc, setup)
    summary = summarize(arc, setup, table, runtime)
    summary["scenario"] = sc.name
    log.info("%s: %d jumps, asymptotic |xhat - x| = %.3e (%.1f s)", sc.name,
             summary["n_jumps"], summary["asym_err_norm"], runtime)
    out = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_table(out / "trace.csv", trace_columns(setup.plant.n, arc.theta.shape[1]), table)
        header, rows = metrics_table(arc)
        write_table(out / "metrics.csv", header, rows)
        (out / "config.yaml").write_text(sc.to_yaml())
        stable = {k: v for k, v in summary.items() if k != "runtime_s"}
        (out / "summary.json").write_text(json.dumps(stable, indent=2, sort_keys=True) + "\n")
    return RunArtifacts(out, sc, setup, arc, summary)


SWEEP_FIELDS = ("final_err_norm", "asym_err_norm", "asym_err_abs", "asym_theta_err", "asym_pred_err", "j_star")


def sweep(scenario: Scenario, param: str, values, out_dir: str | Path | None = None,
          seed: int | None = None, overrides=None) -> tuple[list[RunArtifacts], list[dict]]:
    """One run per value of the dotted ``param``; returns runs and summary rows."""
    values = list(values)
    if not values:
        raise ScenarioError(param, "sweep needs at least one value", scenario.source)
    base = scenario.with_overrides(overrides)
    base.get(param)
    runs, rows = [], []
    for v in values:
        sub = None if out_dir is None else Path(out_dir) / f"{param}={v}"
        art = run(base.with_value(param, v), sub, seed)
        runs.append(art)
        row = {param: v}
        for f in SWEEP_FIELDS:
            val = art.summary.get(f)
            if isinstance(val, list):
                row.update({f"{f}_{i + 1}": x for i, x in enumerate(val)})
            else:
                row[f] = val
        rows.append(row)
    if out_dir is not None:
        keys = list(dict.fromkeys(k for r in rows for k in r))
        with open(Path(out_dir) / "summary.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    return runs, rows
