"""SVG plots of run directories (error norm, parameter traces, model fit)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .runner import read_table  # noqa: E402
from .scenario import Scenario, build_identifier, build_plant  # noqa: E402
from .wavelet import WaveletIdentifier, cascade_predict  # noqa: E402

KINDS = ("error_norm", "theta_traces", "model_fit")


def _error_norm(run_dir: Path, ax):
    header, rows = read_table(run_dir / "trace.csv")
    t, e = rows[:, header.index("t")], rows[:, header.index("err_norm")]
    if np.any(e > 0):
        ax.semilogy(t, np.where(e > 0, e, np.nan), lw=0.8)
    else:
        ax.plot(t, e, lw=0.8)
    ax.set_xlabel("t [s]")
    ax.set_ylabel("|xhat - x|")


def _theta_traces(run_dir: Path, ax):
    header, rows = read_table(run_dir / "metrics.csv")
    t = rows[:, header.index("t")] if rows.size else np.zeros(0)
    th = [c for c in header if c.startswith("theta_") and not c.startswith("theta_true")]
    tr = [c for c in header if c.startswith("theta_true_")]
    for c in th:
        ax.plot(t, rows[:, header.index(c)], lw=0.8, label=c)
    if len(tr) == len(th) and len(th) <= 10:
        for c in tr:
            ax.plot(t, rows[:, header.index(c)], "--", color="gray", lw=0.8)
    if len(th) <= 10:
        ax.legend(fontsize=7)
    ax.set_xlabel("t [s]")
    ax.set_ylabel("theta")


def _model_fit(run_dir: Path, ax, n_points: int = 601):
    sc = Scenario.load(run_dir / "config.yaml")
    plant = build_plant(sc)
    ident = build_identifier(sc, plant.n)
    header, rows = read_table(run_dir / "metrics.csv")
    th_cols = [header.index(c) for c in header if c.startswith("theta_") and not c.startswith("theta_true")]
    theta = rows[-1, th_cols] if rows.size else np.zeros(ident.n_theta)
    params = rows[-1, [header.index(c) for c in header if c.startswith("theta_true_")]] if rows.size else plant.params
    x_star = sc.get("observer.x_star")
    if plant.name.startswith("example_va"):
        lo, hi = -6.0, 6.0
    else:
        lo, hi = x_star[0] if x_star else (-10.0, 10.0)
    s = np.linspace(lo, hi, n_points)
    X = np.zeros((n_points, plant.n))
    X[:, 0] = s
    ax.plot(s, plant.with_params(params).phi_batch(X), "k", lw=1.2, label="phi")
    if isinstance(ident, WaveletIdentifier):
        for k in range(1, len(ident.stages) + 1):
            v, _ = cascade_predict(ident, theta, X, k)
            ax.plot(s, v, lw=0.8, label=f"scale {ident.stages[k - 1].scale}")
    elif ident.n_theta:
        ax.plot(s, ident.model_set.phi_hat(theta, X), lw=0.8, label="phi_hat")
    else:
        ax.plot(s, np.zeros_like(s), lw=0.8, label="phi_hat")
    ax.set_xlabel("x_1 (other coordinates 0)")
    ax.legend(fontsize=7)


def plot(run_dir: str | Path, kind: str, output: str | Path | None = None) -> Path:
    """Write ``<kind>.svg`` into the run directory (or ``output``)."""
    if kind not in KINDS:
        raise ValueError(f"unknown plot kind {kind!r}; expected one of {KINDS}")
    run_dir = Path(run_dir)
    fig, ax = plt.subplots(figsize=(7, 3.5))
    {"error_norm": _error_norm, "theta_traces": _theta_traces, "model_fit": _model_fit}[kind](run_dir, ax)
    ax.grid(True, lw=0.3)
    fig.tight_layout()
    out = Path(output) if output else run_dir / f"{kind}.svg"
    fig.savefig(out, format="svg")
    plt.close(fig)
    return out
