"""Identifier abstraction, prediction error, cost functional and contract checks.

An identifier is a discrete-time system updated at clock jumps. Concrete
identifiers are stateless objects: the state ``z`` is an explicit value passed
through :meth:`Identifier.jump`, which keeps two-trajectory stability checks
trivial to write.
"""
from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numba
import numpy as np


@numba.njit(cache=True)
def zero_dir_kernel(theta, x, v, params):
    return 0.0


@dataclass(frozen=True)
class ModelSet:
    """Family ``phi_hat(theta, .)`` with its x-gradient.

    ``dir_kernel(theta, x, v, params)`` is the jitted directional derivative
    ``d phi_hat(theta, x)/dx . v`` used inside the flow kernel.
    """

    n_theta: int
    phi_hat: Callable[[np.ndarray, np.ndarray], Any]
    phi_hat_grad_x: Callable[[np.ndarray, np.ndarray], np.ndarray]
    dir_kernel: Callable = zero_dir_kernel
    kernel_params: tuple = (np.zeros(0),)
    regressor: Any = None

    @classmethod
    def linear(cls, regressor) -> "ModelSet":
        """``phi_hat(theta, x) = theta . sigma(x)``."""

        def phi_hat(theta, x):
            return np.asarray(regressor(x)) @ np.asarray(theta, dtype=float)

        def grad(theta, x):
            return np.asarray(theta, dtype=float) @ regressor.jacobian(x)

        return cls(
            n_theta=regressor.n_theta,
            phi_hat=phi_hat,
            phi_hat_grad_x=grad,
            dir_kernel=regressor.dir_kernel,
            kernel_params=regressor.kernel_params,
            regressor=regressor,
        )

    @classmethod
    def empty(cls, n: int) -> "ModelSet":
        return cls(
            n_theta=0,
            phi_hat=lambda theta, x: np.zeros(np.shape(x)[:-1]) if np.ndim(x) > 1 else 0.0,
            phi_hat_grad_x=lambda theta, x: np.zeros(n),
        )


def prediction_error(model_set: ModelSet, theta, x, phi_val):
    """``phi(x) - phi_hat(theta, x)``; vectorised over rows of ``x``."""
    return phi_val - model_set.phi_hat(np.asarray(theta, dtype=float), np.asarray(x, dtype=float))


@dataclass(frozen=True)
class DataSet:
    """Samples ``(u_in(i), u_out(i))`` recorded at successive jumps."""

    u_in: np.ndarray
    u_out: np.ndarray

    def __post_init__(self):
        u_in = np.atleast_2d(np.asarray(self.u_in, dtype=float))
        u_out = np.asarray(self.u_out, dtype=float).reshape(-1)
        if u_in.shape[0] != u_out.shape[0]:
            raise ValueError("u_in and u_out must have the same number of samples")
        object.__setattr__(self, "u_in", u_in)
        object.__setattr__(self, "u_out", u_out)

    def __len__(self) -> int:
        return self.u_out.shape[0]

    def head(self, j: int) -> "DataSet":
        return DataSet(self.u_in[:j], self.u_out[:j])


@dataclass(frozen=True)
class CostConfig:
    """``J(j, theta) = sum_i c(i, j, eps_i) + r(theta)``.

    ``quadratic = (mu, R)`` marks the weighted least-squares member, for which
    optimality is also checked through the normal equations.
    """

    integral_cost: Callable[[int, int, float], float]
    regularizer: Callable[[np.ndarray], float]
    quadratic: tuple | None = None


def least_squares_cost(mu: float, R) -> CostConfig:
    R = np.atleast_2d(np.asarray(R, dtype=float))
    return CostConfig(
        integral_cost=lambda i, j, e: mu ** (j - i - 1) * float(e) ** 2,
        regularizer=lambda th: float(th @ R @ th),
        quadratic=(mu, R),
    )


def cost(cfg: CostConfig, data: DataSet, model_set: ModelSet, j: int, theta) -> float:
    if j > len(data):
        raise ValueError(f"j={j} exceeds the data set length {len(data)}")
    theta = np.asarray(theta, dtype=float)
    total = 0.0
    if j > 0:
        eps = prediction_error(model_set, theta, data.u_in[:j], data.u_out[:j])
        eps = np.broadcast_to(eps, (j,))
        if cfg.quadratic is not None:
            mu = cfg.quadratic[0]
            w = mu ** np.arange(j - 1, -1, -1, dtype=float)
            total = float(np.sum(w * eps**2))
        else:
            total = float(sum(cfg.integral_cost(i, j, eps[i]) for i in range(j)))
    return total + cfg.regularizer(theta)


def normal_equations(cfg: CostConfig, data: DataSet, model_set: ModelSet, j: int):
    """Gram matrix and right-hand side of the weighted least-squares problem."""
    if cfg.quadratic is None or model_set.regressor is None:
        raise ValueError("normal equations need a quadratic cost and a linear model set")
    mu, R = cfg.quadratic
    S = np.asarray(model_set.regressor(data.u_in[:j])).reshape(j, model_set.n_theta)
    w = mu ** np.arange(j - 1, -1, -1, dtype=float)
    G = (S * w[:, None]).T @ S + R
    b = (S * w[:, None]).T @ data.u_out[:j]
    return G, b


class Identifier(ABC):
    """Jump map ``z+ = jump(z, u_in, u_out)`` and output ``theta = output(z)``."""

    model_set: ModelSet

    @property
    def n_theta(self) -> int:
        return self.model_set.n_theta

    @abstractmethod
    def initial_state(self) -> Any:
        """State used at the start of a closed-loop run."""

    def ideal_initial_state(self) -> Any:
        """Initial state of the optimal steady-state trajectory z*."""
        return self.initial_state()

    @abstractmethod
    def jump(self, z, u_in, u_out, t: float = math.inf):
        ...

    @abstractmethod
    def output(self, z) -> np.ndarray:
        ...

    @abstractmethod
    def distance(self, za, zb) -> float:
        ...

    def pe_status(self, z) -> tuple[bool, float]:
        return True, math.nan

    def run(self, data: DataSet, z0=None, delta: np.ndarray | None = None) -> list:
        """States ``z(0..len(data))`` driven by ``data`` plus optional disturbance rows."""
        z = self.initial_state() if z0 is None else z0
        states = [z]
        for i in range(len(data)):
            u_in, u_out = data.u_in[i], data.u_out[i]
            if delta is not None:
                u_in = u_in + delta[i, :-1]
                u_out = u_out + delta[i, -1]
            z = self.jump(z, u_in, u_out)
            states.append(z)
        return states


class NullIdentifier(Identifier):
    """No identification: empty parameter, psi = 0."""

    def __init__(self, n: int):
        self.model_set = ModelSet.empty(n)

    def initial_state(self):
        return ()

    def jump(self, z, u_in, u_out, t=math.inf):
        return z

    def output(self, z):
        return np.zeros(0)

    def distance(self, za, zb):
        return 0.0


@dataclass
class OptimalityReport:
    ok: bool
    j: int
    theta: np.ndarray
    cost: float
    normal_residual: float | None
    rhs_norm: float | None
    worst_increase: float
    worst_delta: np.ndarray | None
    n_probes: int

    def __str__(self):
        return (f"optimality j={self.j} ok={self.ok} cost={self.cost:.3e} "
                f"normal_residual={self.normal_residual} worst_increase={self.worst_increase:.3e}")


def check_optimality(identifier: Identifier, data: DataSet, cfg: CostConfig, j: int,
                     tol: float = 1e-8, *, z0=None, n_probes: int = 1000,
                     magnitudes: Sequence[float] = (1e-3, 1e-1, 1.0),
                     rng: np.random.Generator | None = None) -> OptimalityReport:
    """Check that ``gamma(z(j))`` minimises ``J(j, .)``.

    Runs the identifier from its ideal initial state over the first ``j``
    samples, then tests the normal-equation residual (quadratic costs) and
    ``J(theta) <= J(theta + delta)`` over random probes.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    z = identifier.ideal_initial_state() if z0 is None else z0
    for i in range(j):
        z = identifier.jump(z, data.u_in[i], data.u_out[i])
    theta = identifier.output(z)
    ms = identifier.model_set
    j0 = cost(cfg, data, ms, j, theta)

    residual = rhs_norm = None
    ok = True
    if cfg.quadratic is not None and ms.regressor is not None:
        G, b = normal_equations(cfg, data, ms, j)
        residual = float(np.linalg.norm(G @ theta - b))
        rhs_norm = float(np.linalg.norm(b))
        ok &= residual <= tol * max(rhs_norm, 1e-300) or residual <= tol
    worst = math.inf
    worst_delta = None
    mags = np.resize(np.asarray(magnitudes, dtype=float), n_probes)
    for m in mags:
        d = rng.standard_normal(theta.size)
        d *= m / max(np.linalg.norm(d), 1e-300)
        inc = cost(cfg, data, ms, j, theta + d) - j0
        if inc < worst:
            worst, worst_delta = inc, d
    ok &= worst >= -1e-9 * (1.0 + abs(j0))
    return OptimalityReport(bool(ok), j, theta, j0, residual, rhs_norm, worst, worst_delta, n_probes)


@dataclass
class StabilityReport:
    ok: bool
    contraction_rate: float
    distances: np.ndarray
    lipschitz: dict = field(default_factory=dict)
    deviations: dict = field(default_factory=dict)

    def __str__(self):
        return (f"stability ok={self.ok} rate={self.contraction_rate:.4g} "
                f"L={ {k: round(v, 6) for k, v in self.lipschitz.items()} }")


def _random_ball(rng, count, dim, radius):
    d = rng.standard_normal((count, dim))
    d /= np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-300)
    return d * radius * rng.uniform(0.0, 1.0, (count, 1))


def check_stability(identifier: Identifier, data: DataSet, delta_bound: float = 0.1, *,
                    z_a0=None, z_b0=None, scales: Sequence[float] = (1e-2, 1e-1, 1.0),
                    lipschitz_spread: float = 3.0,
                    rng: np.random.Generator | None = None) -> StabilityReport:
    """Empirical stability test.

    (i) two runs with no disturbance from different initial states must
    approach geometrically; (ii) runs with bounded disturbances ``|delta| <= D``
    for ``D in delta_bound * scales`` must stay within ``L * D`` of the
    undisturbed run with ``L`` stable across ``D`` within ``lipschitz_spread``.
    """
    if delta_bound < 0:
        raise ValueError("delta_bound must be >= 0")
    rng = np.random.default_rng(1) if rng is None else rng
    za0 = identifier.ideal_initial_state() if z_a0 is None else z_a0
    zb0 = identifier.initial_state() if z_b0 is None else z_b0
    run_a = identifier.run(data, za0)
    run_b = identifier.run(data, zb0)
    dist = np.array([identifier.distance(a, b) for a, b in zip(run_a, run_b)])
    ratios = [dist[k + 1] / dist[k] for k in range(len(dist) - 1) if dist[k] > 1e-300]
    rate = max(ratios) if ratios else 0.0
    ok = rate < 1.0 or not ratios

    lips, devs = {}, {}
    dim = data.u_in.shape[1] + 1
    for s in scales:
        D = delta_bound * s
        delta = _random_ball(rng, len(data), dim, D)
        run_d = identifier.run(data, za0, delta)
        dev = max(identifier.distance(a, b) for a, b in zip(run_a, run_d))
        devs[D] = dev
        lips[D] = dev / D if D > 0 else 0.0
    finite = [v for v in lips.values() if v > 0]
    if finite:
        ok &= max(finite) <= lipschitz_spread * min(finite)
    if delta_bound == 0:
        ok &= all(v == 0.0 for v in devs.values())
    return StabilityReport(bool(ok), float(rate), dist, lips, devs)


class FixedIdentifier(Identifier):
    """Identity jump map: ``z+ = z`` and ``theta = z`` for a given model set."""

    def __init__(self, model_set: ModelSet, theta):
        self.model_set = model_set
        self.theta = np.asarray(theta, dtype=float)
        if self.theta.shape != (model_set.n_theta,):
            raise ValueError(f"theta must have {model_set.n_theta} entries")

    def initial_state(self):
        return self.theta.copy()

    def jump(self, z, u_in, u_out, t=math.inf):
        return z

    def output(self, z):
        return np.asarray(z, dtype=float)

    def distance(self, za, zb):
        return float(np.linalg.norm(np.asarray(za) - np.asarray(zb)))
