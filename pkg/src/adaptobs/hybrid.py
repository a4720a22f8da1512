"""Clocked hybrid interconnection of plant, extended observer and identifier.

Flows are integrated with fixed-step RK4 on the grid ``t = k h``; the clock
jumps are snapped to that grid. Between jumps the compiled kernel
:func:`_flow_segment` integrates the joint state ``(x, xhat, xi)``; jumps and
recording happen in Python.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numba
import numpy as np

from .identifier import Identifier
from .numerics import IntegrationDiverged, NoiseProcess, interp_samples, rk4_step, sat
from .observer import ObserverGains, observer_flow, psi_unsaturated
from .plant import PlantModel, plant_flow

log = logging.getLogger(__name__)


class SimulationError(RuntimeError):
    """Failure inside a run, tagged with the hybrid time ``(t, j)``."""

    def __init__(self, msg: str, t: float, j: int):
        self.t = t
        self.j = j
        super().__init__(f"{msg} at (t={t:.6g}, j={j})")


@dataclass(frozen=True)
class ClockConfig:
    """Dwell times in ``[t_low, t_high]``; periodic unless ``schedule`` is given.

    ``schedule`` is either a sequence of dwell times (cycled) or a callable
    ``j -> dwell``.
    """

    t_low: float
    t_high: float
    period: float | None = None
    schedule: Sequence[float] | Callable[[int], float] | None = None

    def __post_init__(self):
        if not 0 < self.t_low <= self.t_high < math.inf:
            raise ValueError(f"clock needs 0 < t_low <= t_high < inf, got {self.t_low}, {self.t_high}")
        if self.period is not None and not self.t_low <= self.period <= self.t_high:
            raise ValueError("period must lie in [t_low, t_high]")

    @classmethod
    def periodic(cls, T: float) -> "ClockConfig":
        return cls(T, T, T)

    def dwell(self, j: int) -> float:
        if self.schedule is None:
            d = self.period if self.period is not None else self.t_high
        elif callable(self.schedule):
            d = float(self.schedule(j))
        else:
            d = float(self.schedule[j % len(self.schedule)])
        if not self.t_low - 1e-12 <= d <= self.t_high + 1e-12:
            raise ValueError(f"dwell {d} for jump {j} outside [{self.t_low}, {self.t_high}]")
        return d

    def jump_steps(self, n_steps: int, h: float, tau0: float = 0.0) -> list[int]:
        """Grid indices ``k`` (``t = k h``) of the jumps in ``(0, n_steps]``."""
        out = []
        t = -tau0
        j = 0
        while True:
            t += self.dwell(j)
            k = int(round(t / h))
            if k > n_steps:
                return out
            if k <= (out[-1] if out else 0):
                raise ValueError("dwell time shorter than the integration step")
            out.append(k)
            j += 1


@dataclass(frozen=True)
class HybridTimeStamp:
    t: float
    j: int

    def __le__(self, other: "HybridTimeStamp") -> bool:
        return self.t <= other.t and self.j <= other.j


@dataclass
class InterconnectionState:
    tau: float
    x: np.ndarray
    xhat: np.ndarray
    xi: float
    z: Any


@dataclass
class JumpLog:
    """Per-jump records (index ``j-1`` holds jump ``j``)."""

    t: np.ndarray
    theta: np.ndarray          # post-jump estimate
    theta_true: np.ndarray     # plant parameters in force at the jump
    pe_ok: np.ndarray
    msv: np.ndarray
    u_in: np.ndarray
    u_out: np.ndarray
    x: np.ndarray
    phi: np.ndarray            # true phi(x) at the jump
    pred_err: np.ndarray       # phi(x) - phi_hat(theta, x) with the post-jump theta

    @property
    def j_star(self) -> int | None:
        """First jump count at which the persistence test holds."""
        idx = np.flatnonzero(self.pe_ok)
        return int(idx[0]) + 1 if idx.size else None


@dataclass
class HybridArc:
    """Recorded solution on a hybrid time domain.

    Rows are flow samples (every ``record_every`` steps) plus a pre/post
    pair at each recorded jump. ``err_abs`` holds ``|xhat_i - x_i|`` at every
    integration step, independently of decimation.
    """

    t: np.ndarray
    j: np.ndarray
    x: np.ndarray
    xhat: np.ndarray
    xi: np.ndarray
    y: np.ndarray
    theta: np.ndarray
    params: np.ndarray
    jump_markers: np.ndarray
    jumps: JumpLog
    h: float
    err_abs: np.ndarray
    final_state: InterconnectionState
    invariant_exits: int = 0

    def __len__(self) -> int:
        return self.t.size

    @property
    def stamps(self) -> list[HybridTimeStamp]:
        return [HybridTimeStamp(float(a), int(b)) for a, b in zip(self.t, self.j)]

    @property
    def err_norm_full(self) -> np.ndarray:
        return np.linalg.norm(self.err_abs, axis=1)

    @property
    def full_times(self) -> np.ndarray:
        return np.arange(self.err_abs.shape[0]) * self.h


@dataclass
class SimSetup:
    plant: PlantModel
    gains: ObserverGains
    psi_bar: float
    identifier: Identifier
    clock: ClockConfig
    horizon: float
    h: float = 1e-3
    x0: Any = None
    xhat0: Any = None
    xi0: float = 0.0
    tau0: float = 0.0
    z0: Any = None
    q: float = 0.0
    noise: NoiseProcess | None = None
    d_amp: Any = None
    d_noise: Sequence[NoiseProcess] | None = None
    events: Sequence[tuple[float, Any]] = ()
    record_every: int = 1
    record_jumps_every: int = 1
    backend: str = "numba"

    def __post_init__(self):
        n = self.plant.n
        if self.gains.n != n:
            raise ValueError(f"observer order {self.gains.n} does not match plant order {n}")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if not self.h > 0:
            raise ValueError("integration step must be positive")
        if self.q < 0:
            raise ValueError("noise scale q must be >= 0")
        if self.record_every < 1 or self.record_jumps_every < 1:
            raise ValueError("record intervals must be >= 1")
        if self.backend not in ("numba", "python"):
            raise ValueError(f"unknown backend {self.backend!r}")
        self.x0 = np.zeros(n) if self.x0 is None else np.asarray(self.x0, dtype=float)
        self.xhat0 = np.zeros(n) if self.xhat0 is None else np.asarray(self.xhat0, dtype=float)
        if self.x0.shape != (n,) or self.xhat0.shape != (n,):
            raise ValueError(f"initial states must have dimension {n}")
        if not 0.0 <= self.tau0 <= self.clock.t_high:
            raise ValueError("tau0 must lie in [0, t_high]")


@numba.njit(cache=True)
def _interp(table, period, t):
    pos = t / period
    k = int(math.floor(pos))
    frac = pos - k
    return table[k] + frac * (table[k + 1] - table[k])


@numba.njit(cache=True)
def _rhs(t, s, n, phi_kernel, phi_params, dir_kernel, dir_params, theta, use_psi,
         lam1, lam2, psi_bar, noise, q, noise_period, dist, dist_period, use_dist, out):
    x = s[:n]
    xh = s[n:2 * n]
    xi = s[2 * n]
    for i in range(n - 1):
        out[i] = x[i + 1]
    out[n - 1] = phi_kernel(x, phi_params)
    if use_dist:
        for i in range(n):
            out[i] += _interp(dist[i], dist_period, t)
    y = x[0]
    if q != 0.0:
        y += q * _interp(noise, noise_period, t)
    e = y - xh[0]
    v = np.empty(n)
    for i in range(n - 1):
        v[i] = xh[i + 1]
    v[n - 1] = xi
    p = 0.0
    if use_psi:
        p = dir_kernel(theta, xh, v, dir_params)
        if p > psi_bar:
            p = psi_bar
        elif p < -psi_bar:
            p = -psi_bar
    for i in range(n):
        out[n + i] = v[i] + lam1[i] * e
    out[2 * n] = p + lam2 * e


@numba.njit(cache=True)
def _flow_segment(s0, step0, nsteps, h, n, phi_kernel, phi_params, dir_kernel, dir_params,
                  theta, use_psi, lam1, lam2, psi_bar, noise, q, noise_period,
                  dist, dist_period, use_dist, out):
    """RK4 from grid index ``step0`` for ``nsteps`` steps; ``out[k]`` is the state
    after step ``k + 1``. Returns the first step with a non-finite state or -1."""
    m = s0.shape[0]
    s = s0.copy()
    k1 = np.empty(m)
    k2 = np.empty(m)
    k3 = np.empty(m)
    k4 = np.empty(m)
    tmp = np.empty(m)
    for k in range(nsteps):
        t = (step0 + k) * h
        _rhs(t, s, n, phi_kernel, phi_params, dir_kernel, dir_params, theta, use_psi,
             lam1, lam2, psi_bar, noise, q, noise_period, dist, dist_period, use_dist, k1)
        for i in range(m):
            tmp[i] = s[i] + 0.5 * h * k1[i]
        _rhs(t + 0.5 * h, tmp, n, phi_kernel, phi_params, dir_kernel, dir_params, theta, use_psi,
             lam1, lam2, psi_bar, noise, q, noise_period, dist, dist_period, use_dist, k2)
        for i in range(m):
            tmp[i] = s[i] + 0.5 * h * k2[i]
        _rhs(t + 0.5 * h, tmp, n, phi_kernel, phi_params, dir_kernel, dir_params, theta, use_psi,
             lam1, lam2, psi_bar, noise, q, noise_period, dist, dist_period, use_dist, k3)
        for i in range(m):
            tmp[i] = s[i] + h * k3[i]
        _rhs(t + h, tmp, n, phi_kernel, phi_params, dir_kernel, dir_params, theta, use_psi,
             lam1, lam2, psi_bar, noise, q, noise_period, dist, dist_period, use_dist, k4)
        ok = True
        for i in range(m):
            s[i] = s[i] + (h / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
            if not math.isfinite(s[i]):
                ok = False
            out[k, i] = s[i]
        if not ok:
            return k
    return -1


class _Inputs:
    """Precomputed noise and disturbance sample tables for one run."""

    def __init__(self, setup: SimSetup):
        n = setup.plant.n
        H = setup.horizon + setup.h
        if setup.q > 0:
            p = setup.noise or NoiseProcess(seed=0)
            self.noise = p.samples(0, int(math.ceil(H / p.sample_period)) + 3)
            self.noise_period = p.sample_period
        else:
            self.noise = np.zeros(2)
            self.noise_period = 1.0
        amp = None if setup.d_amp is None else np.broadcast_to(np.asarray(setup.d_amp, dtype=float), (n,))
        self.use_dist = amp is not None and bool(np.any(amp != 0))
        if self.use_dist:
            procs = setup.d_noise or [NoiseProcess(seed=0, stream=1 + i) for i in range(n)]
            self.dist_period = procs[0].sample_period
            if any(p.sample_period != self.dist_period for p in procs):
                raise ValueError("disturbance channels must share one sample period")
            count = int(math.ceil(H / self.dist_period)) + 3
            self.dist = np.stack([a * p.samples(0, count) for a, p in zip(amp, procs)])
        else:
            self.dist = np.zeros((n, 2))
            self.dist_period = 1.0

    def nu(self, t):
        return interp_samples(self.noise, self.noise_period, t)

    def d(self, t):
        if not self.use_dist:
            return None
        return np.array([interp_samples(row, self.dist_period, t) for row in self.dist])


def _python_segment(setup, inputs, s0, step0, nsteps, params, theta, use_psi, out):
    """Reference integrator built from the public building blocks."""
    n = setup.plant.n
    plant = setup.plant.with_params(params)
    ms = setup.identifier.model_set

    def f(t, s):
        x, xh, xi = s[:n], s[n:2 * n], s[2 * n]
        y = x[0] + (setup.q * inputs.nu(t) if setup.q != 0.0 else 0.0)
        p = sat(psi_unsaturated(theta, xh, xi, ms), setup.psi_bar) if use_psi else 0.0
        dxh, dxi = observer_flow(setup.gains, xh, xi, y, p)
        return np.concatenate([plant_flow(plant, x, inputs.d(t)), dxh, [dxi]])

    s = s0.copy()
    for k in range(nsteps):
        try:
            s = rk4_step(f, s, (step0 + k) * setup.h, setup.h)
        except IntegrationDiverged:
            out[k] = np.nan
            return k
        out[k] = s
    return -1


def _phi_hat_rows(model_set, theta_rows, x_rows):
    if model_set.n_theta == 0:
        return np.zeros(x_rows.shape[0])
    if model_set.regressor is not None:
        return np.einsum("ij,ij->i", np.asarray(model_set.regressor(x_rows)), theta_rows)
    return np.array([model_set.phi_hat(th, x) for th, x in zip(theta_rows, x_rows)])


def simulate(setup: SimSetup) -> HybridArc:
    """Run the interconnection up to ``setup.horizon``."""
    plant, ident, h = setup.plant, setup.identifier, setup.h
    n = plant.n
    ms = ident.model_set
    n_steps = int(round(setup.horizon / h))
    if abs(n_steps * h - setup.horizon) > 1e-9 * max(1.0, setup.horizon):
        raise ValueError("horizon must be a multiple of the integration step")
    jump_steps = setup.clock.jump_steps(n_steps, h, setup.tau0)
    jump_set = set(jump_steps)
    events = {}
    for t_ev, p in setup.events:
        k = int(round(float(t_ev) / h))
        if 0 <= k <= n_steps:
            events[k] = np.asarray(p, dtype=float)
    params = np.asarray(plant.params, dtype=float)
    if 0 in events:
        params = events.pop(0)
    inputs = _Inputs(setup)

    use_psi = ms.n_theta > 0
    phi_kernel = plant.phi_kernel
    boundaries = sorted(jump_set | set(events) | {n_steps})

    z = ident.initial_state() if setup.z0 is None else setup.z0
    theta = np.ascontiguousarray(ident.output(z), dtype=float) if use_psi else np.zeros(0)
    theta_k = theta if use_psi else np.zeros(1)
    s = np.concatenate([setup.x0, setup.xhat0, [float(setup.xi0)]])

    n_theta = theta.size
    rows_t, rows_j, rows_s, rows_th, rows_p, markers = [], [], [], [], [], []
    err_abs = np.empty((n_steps + 1, n))
    err_abs[0] = np.abs(s[n:2 * n] - s[:n])
    jl = {k: [] for k in ("t", "theta", "theta_true", "pe_ok", "msv", "u_in", "u_out", "x", "phi")}

    def record(k_step, j, state, th):
        rows_t.append(k_step * h)
        rows_j.append(j)
        rows_s.append(state.copy())
        rows_th.append(th)
        rows_p.append(params)

    record(0, 0, s, theta)
    cur = 0
    j = 0
    exits = 0
    longest = max(b - a for a, b in zip([0] + boundaries, boundaries))
    seg = np.empty((max(1, longest), 2 * n + 1))
    for b in boundaries:
        nsteps = b - cur
        if nsteps > 0:
            out = seg[:nsteps]
            if setup.backend == "numba":
                bad = _flow_segment(s, cur, nsteps, h, n, phi_kernel, params, ms.dir_kernel,
                                    ms.kernel_params, theta_k, use_psi, setup.gains.lambda1,
                                    setup.gains.lambda2, setup.psi_bar, inputs.noise, setup.q,
                                    inputs.noise_period, inputs.dist, inputs.dist_period,
                                    inputs.use_dist, out)
            else:
                bad = _python_segment(setup, inputs, s, cur, nsteps, params, theta, use_psi, out)
            if bad >= 0:
                comp = int(np.flatnonzero(~np.isfinite(out[bad]))[0])
                raise IntegrationDiverged(comp, (cur + bad + 1) * h, j)
            err_abs[cur + 1: b + 1] = np.abs(out[:, n:2 * n] - out[:, :n])
            if plant.invariant_set is not None:
                xs = out[:, :n]
                inside = (np.all(np.abs(xs) <= plant.invariant_set.hi, axis=1)
                          if hasattr(plant.invariant_set, "hi")
                          else np.linalg.norm(xs, axis=1) <= plant.invariant_set.radius)
                new_exits = int(np.count_nonzero(~inside))
                if new_exits and not exits:
                    log.warning("plant state left the invariant set near t=%.4g", (cur + 1 + np.argmin(inside)) * h)
                exits += new_exits
            first = cur + 1 + ((-(cur + 1)) % setup.record_every)
            for k_step in range(first, b + 1, setup.record_every):
                record(k_step, j, out[k_step - cur - 1], theta)
            s = out[nsteps - 1].copy()
            cur = b
        if b in jump_set:
            t_now = b * h
            theta_pre = theta
            u_in = s[n:2 * n].copy()
            u_out = float(s[2 * n])
            try:
                z = ident.jump(z, u_in, u_out, t_now)
                theta = np.ascontiguousarray(ident.output(z), dtype=float) if use_psi else theta
                pe_ok, msv_val = ident.pe_status(z)
            except Exception as exc:
                raise SimulationError(f"identifier jump failed: {exc}", t_now, j) from exc
            if use_psi:
                theta_k = theta
            if (j + 1) % setup.record_jumps_every == 0:
                if b % setup.record_every != 0:
                    record(b, j, s, theta_pre)
                markers.append(len(rows_t))
                record(b, j + 1, s, theta)
            j += 1
            jl["t"].append(t_now)
            jl["theta"].append(theta)
            jl["theta_true"].append(params)
            jl["pe_ok"].append(bool(pe_ok))
            jl["msv"].append(float(msv_val))
            jl["u_in"].append(u_in)
            jl["u_out"].append(u_out)
            jl["x"].append(s[:n].copy())
            jl["phi"].append(float(phi_kernel(s[:n], params)))
        if b in events:
            params = events[b]

    S = np.array(rows_s)
    X = S[:, :n]
    Th = np.array(rows_th).reshape(len(rows_t), n_theta)
    t_arr = np.array(rows_t)
    y = X[:, 0] + (setup.q * np.array([inputs.nu(t) for t in t_arr]) if setup.q != 0.0 else 0.0)
    J = len(jl["t"])
    jx = np.array(jl["x"]).reshape(J, n)
    jth = np.array(jl["theta"]).reshape(J, n_theta)
    jlog = JumpLog(
        t=np.array(jl["t"]),
        theta=jth,
        theta_true=np.array(jl["theta_true"]).reshape(J, -1),
        pe_ok=np.array(jl["pe_ok"], dtype=bool),
        msv=np.array(jl["msv"]),
        u_in=np.array(jl["u_in"]).reshape(J, n),
        u_out=np.array(jl["u_out"]),
        x=jx,
        phi=np.array(jl["phi"]),
        pred_err=np.array(jl["phi"]) - _phi_hat_rows(ms, jth, jx) if J else np.zeros(0),
    )
    final = InterconnectionState(
        tau=(n_steps - (jump_steps[-1] if jump_steps else 0)) * h + (0.0 if jump_steps else setup.tau0),
        x=s[:n].copy(), xhat=s[n:2 * n].copy(), xi=float(s[2 * n]), z=z)
    return HybridArc(
        t=t_arr, j=np.array(rows_j), x=X, xhat=S[:, n:2 * n], xi=S[:, 2 * n], y=y, theta=Th,
        params=np.array(rows_p).reshape(len(rows_t), -1), jump_markers=np.array(markers, dtype=int),
        jumps=jlog, h=h, err_abs=err_abs, final_state=final, invariant_exits=exits,
    )


def record_metrics(arc: HybridArc, truth=None, model_set=None, plant: PlantModel | None = None) -> dict:
    """Per-row error norms, per-jump parameter and prediction errors.

    ``truth`` (rows of true states aligned with the arc) defaults to the
    arc's own plant trajectory. ``pred_err`` per row needs ``model_set`` and
    ``plant``.
    """
    truth = arc.x if truth is None else np.asarray(truth, dtype=float)
    if truth.shape != arc.xhat.shape:
        raise ValueError(f"truth has shape {truth.shape}, arc states have {arc.xhat.shape}")
    err = arc.xhat - truth
    out = {
        "t": arc.t,
        "j": arc.j,
        "err_norm": np.linalg.norm(err, axis=1),
        "err_abs": np.abs(err),
        "jump_t": arc.jumps.t,
        "jump_theta": arc.jumps.theta,
        "jump_pred_err": arc.jumps.pred_err,
    }
    if arc.jumps.theta.shape[1] and arc.jumps.theta.shape == arc.jumps.theta_true.shape:
        out["theta_err"] = np.abs(arc.jumps.theta - arc.jumps.theta_true)
    if model_set is not None and plant is not None:
        phi = np.array([plant.phi_kernel(x, p) for x, p in zip(truth, arc.params)])
        out["pred_err"] = phi - _phi_hat_rows(model_set, arc.theta, truth)
    return out
