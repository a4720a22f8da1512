"""Recursive least squares with forgetting, regularisation and saturated maps."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .identifier import Identifier, ModelSet
from .numerics import DEFAULT_RANK_TOL, UndefinedMsv, msv_sym, pinv_sym, sat


class Regressor:
    """Regressor ``sigma: R^n -> R^n_theta`` with Jacobian and a jitted
    directional-derivative kernel ``(theta, x, v, params) -> theta . J(x) v``."""

    name = "regressor"
    n_in: int
    n_theta: int
    kernel_params: tuple = (np.zeros(0),)

    def __call__(self, x) -> np.ndarray:
        raise NotImplementedError

    def jacobian(self, x) -> np.ndarray:
        raise NotImplementedError


@numba.njit(cache=True)
def _vb_dir(theta, x, v, params):
    x1, x2, x3 = x[0], x[1], x[2]
    d1 = v[1]
    d2 = 6.0 * x1 * x2 * v[0] + 3.0 * x1 * x1 * v[1]
    d3 = (-2.0 * x1 * x3 - 2.0 * x2 * x2) * v[0] - 4.0 * x1 * x2 * v[1] + (1.0 - x1 * x1) * v[2]
    return theta[0] * d1 + theta[1] * d2 + theta[2] * d3


class VBBasis(Regressor):
    """sigma(x) = (x2, 3 x1^2 x2, (1 - x1^2) x3 - 2 x1 x2^2)."""

    name = "vb_basis"
    n_in = 3
    n_theta = 3
    dir_kernel = staticmethod(_vb_dir)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
        return np.stack([x2, 3.0 * x1**2 * x2, (1.0 - x1**2) * x3 - 2.0 * x1 * x2**2], axis=-1)

    def jacobian(self, x):
        x1, x2, x3 = (float(v) for v in np.asarray(x, dtype=float))
        return np.array([
            [0.0, 1.0, 0.0],
            [6.0 * x1 * x2, 3.0 * x1**2, 0.0],
            [-2.0 * x1 * x3 - 2.0 * x2**2, -4.0 * x1 * x2, 1.0 - x1**2],
        ])


@numba.njit(cache=True)
def _identity_dir(theta, x, v, params):
    s = 0.0
    for i in range(theta.shape[0]):
        s += theta[i] * v[i]
    return s


class IdentityRegressor(Regressor):
    """sigma(x) = x."""

    name = "identity"
    dir_kernel = staticmethod(_identity_dir)

    def __init__(self, n: int):
        self.n_in = n
        self.n_theta = n

    def __call__(self, x):
        return np.asarray(x, dtype=float).copy()

    def jacobian(self, x):
        return np.eye(self.n_in)


REGRESSORS = {
    "vb_basis": lambda n: VBBasis(),
    "identity": IdentityRegressor,
}


def make_regressor(name: str, n: int) -> Regressor:
    try:
        reg = REGRESSORS[name](n)
    except KeyError:
        raise ValueError(f"unknown regressor {name!r}; known: {sorted(REGRESSORS)}") from None
    if reg.n_in != n:
        raise ValueError(f"regressor {name!r} expects state dimension {reg.n_in}, plant has {n}")
    return reg


@dataclass(frozen=True)
class RlsState:
    z1: np.ndarray
    z2: np.ndarray


@dataclass(frozen=True)
class RlsConfig:
    regressor: Regressor
    mu: float
    R: np.ndarray
    eps: float = 1e-3
    c_sigma: float = 1e7
    c_lambda: float = 1e8
    c_gamma: float = 10.0
    z1_0: np.ndarray | None = None
    z2_0: np.ndarray | None = None
    rank_tol: float = DEFAULT_RANK_TOL

    def __post_init__(self):
        n = self.regressor.n_theta
        if not 0.0 <= self.mu < 1.0:
            raise ValueError(f"forgetting factor must lie in [0, 1), got {self.mu}")
        R = np.asarray(self.R, dtype=float)
        R = R * np.eye(n) if R.ndim == 0 else R
        if R.shape != (n, n) or not np.allclose(R, R.T):
            raise ValueError("R must be a symmetric n_theta x n_theta matrix")
        if np.linalg.eigvalsh(R).min() < -1e-12:
            raise ValueError("R must be positive semidefinite")
        object.__setattr__(self, "R", R)
        z1 = np.eye(n) if self.z1_0 is None else np.asarray(self.z1_0, dtype=float)
        z1 = z1 * np.eye(n) if z1.ndim == 0 else z1
        z2 = np.zeros(n) if self.z2_0 is None else np.broadcast_to(
            np.asarray(self.z2_0, dtype=float), (n,)).copy()
        object.__setattr__(self, "z1_0", z1)
        object.__setattr__(self, "z2_0", z2)
        for name in ("eps", "c_sigma", "c_lambda", "c_gamma"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @property
    def n_theta(self) -> int:
        return self.regressor.n_theta


def rls_jump(cfg: RlsConfig, state: RlsState, u_in, u_out: float) -> RlsState:
    s = np.asarray(cfg.regressor(u_in), dtype=float)
    Sig = sat(np.outer(s, s), cfg.c_sigma)
    lam = sat(s * float(u_out), cfg.c_lambda)
    return RlsState(cfg.mu * state.z1 + Sig, cfg.mu * state.z2 + lam)


def rls_output(cfg: RlsConfig, state: RlsState) -> np.ndarray:
    theta = pinv_sym(state.z1 + cfg.R, cfg.rank_tol) @ state.z2
    return np.asarray(sat(theta, cfg.c_gamma), dtype=float).reshape(-1)


def pe_monitor(cfg: RlsConfig, state: RlsState) -> tuple[bool, float]:
    try:
        value = msv_sym(state.z1 + cfg.R, cfg.rank_tol)
    except UndefinedMsv:
        return False, 0.0
    return value >= cfg.eps, value


def saturation_constants(cfg: RlsConfig, x_star, xi_star, n_grid: int = 21) -> tuple[float, float]:
    """``c1 = sup|sigma sigma^T| / (1-mu)``, ``c2 = sup|sigma y| / (1-mu)`` on a grid."""
    axes = [np.linspace(lo, hi, n_grid) for lo, hi in zip(x_star.lo, x_star.hi)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(axes))
    norms = np.linalg.norm(cfg.regressor(pts), axis=-1)
    ymax = max(abs(xi_star[0]), abs(xi_star[1]))
    scale = 1.0 / (1.0 - cfg.mu)
    return scale * float(np.max(norms**2)), scale * float(np.max(norms) * ymax)


def input_lipschitz(cfg: RlsConfig, u_in, u_out) -> float:
    """Largest Jacobian norm of ``(u_in, u_out) -> (sigma sigma^T, sigma u_out)``.

    Output measured as ``|dSigma|_F + |dlambda|``; the maximum over the given
    sample points bounds the Lipschitz constant along segments between them.
    """
    best = 0.0
    for x, y in zip(np.atleast_2d(u_in), np.atleast_1d(u_out)):
        s = cfg.regressor(x)
        J = cfg.regressor.jacobian(x)
        n = x.size
        nt = s.size
        dSig = np.zeros((nt * nt, n + 1))
        for k in range(n):
            dSig[:, k] = (np.outer(J[:, k], s) + np.outer(s, J[:, k])).ravel()
        dlam = np.zeros((nt, n + 1))
        dlam[:, :n] = J * y
        dlam[:, n] = s
        best = max(best, np.linalg.norm(dSig, 2) + np.linalg.norm(dlam, 2))
    return float(best)


class RlsIdentifier(Identifier):
    def __init__(self, cfg: RlsConfig):
        self.cfg = cfg
        self.model_set = ModelSet.linear(cfg.regressor)

    def initial_state(self) -> RlsState:
        return RlsState(self.cfg.z1_0.copy(), self.cfg.z2_0.copy())

    def ideal_initial_state(self) -> RlsState:
        n = self.cfg.n_theta
        return RlsState(np.zeros((n, n)), np.zeros(n))

    def jump(self, z, u_in, u_out, t=math.inf):
        return rls_jump(self.cfg, z, u_in, u_out)

    def output(self, z):
        return rls_output(self.cfg, z)

    def distance(self, za, zb):
        return float(np.linalg.norm(za.z1 - zb.z1) + np.linalg.norm(za.z2 - zb.z2))

    def pe_status(self, z):
        return pe_monitor(self.cfg, z)
