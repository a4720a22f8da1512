"""Extended high-gain observer: gains, consistency term and flow."""
from __future__ import annotations

from dataclasses import dataclass
from math import comb

import numpy as np

from .identifier import ModelSet
from .numerics import sat
from .plant import Box


class ConfigError(ValueError):
    """Invalid observer or scenario configuration."""


def binomial_gains(n: int) -> np.ndarray:
    """Coefficients of (s + 1)^(n+1) without the leading one: all poles at -1."""
    return np.array([comb(n + 1, k) for k in range(1, n + 2)], dtype=float)


def extended_matrix(K) -> np.ndarray:
    """M = [[A, B], [0, 0]] - K [C, 0] for a single output."""
    K = np.asarray(K, dtype=float)
    m = K.size
    M = np.diag(np.ones(m - 1), 1)
    M[:, 0] -= K
    return M


@dataclass(frozen=True)
class ObserverGains:
    K: np.ndarray
    g: float
    lambda1: np.ndarray
    lambda2: float

    @property
    def n(self) -> int:
        return self.lambda1.size


def make_gains(n: int, K=None, g: float = 1.0) -> ObserverGains:
    """Gains ``Lambda1 = (g K1, ..., g^n Kn)`` and ``Lambda2 = g^(n+1) K_(n+1)``.

    Raises ConfigError unless the extended matrix built from K is Hurwitz.
    """
    if not g > 0:
        raise ConfigError(f"gain g must be positive, got {g}")
    K = binomial_gains(n) if K is None else np.asarray(K, dtype=float)
    if K.shape != (n + 1,):
        raise ConfigError(f"K needs {n + 1} coefficients for n={n}, got {K.size}")
    eig = np.linalg.eigvals(extended_matrix(K))
    bad = eig[eig.real >= 0]
    if bad.size:
        raise ConfigError(f"K={K.tolist()} is not Hurwitz; eigenvalues with Re >= 0: {bad.tolist()}")
    powers = g ** np.arange(1, n + 2, dtype=float)
    return ObserverGains(K=K, g=float(g), lambda1=powers[:n] * K[:n], lambda2=float(powers[n] * K[n]))


@dataclass(frozen=True)
class SaturationBoxes:
    x_star: Box
    xi_star: tuple[float, float]
    theta_star: Box | None
    psi_bar: float

    def __post_init__(self):
        if not self.psi_bar > 0:
            raise ConfigError("psi_bar must be positive")


def chain_velocity(xhat, xi) -> np.ndarray:
    """A xhat + B xi for the chain of integrators."""
    xhat = np.asarray(xhat, dtype=float)
    return np.append(xhat[1:], xi)


def psi_unsaturated(theta, xhat, xi, model_set: ModelSet) -> float:
    if model_set.n_theta == 0:
        return 0.0
    grad = model_set.phi_hat_grad_x(np.asarray(theta, dtype=float), np.asarray(xhat, dtype=float))
    return float(grad @ chain_velocity(xhat, xi))


def psi(theta, xhat, xi, model_set: ModelSet, boxes: SaturationBoxes) -> float:
    """Saturated consistency term ``sat_psi_bar(d phi_hat/dx (A xhat + B xi))``."""
    return sat(psi_unsaturated(theta, xhat, xi, model_set), boxes.psi_bar)


def observer_flow(gains: ObserverGains, xhat, xi: float, y: float, psi_val: float):
    xhat = np.asarray(xhat, dtype=float)
    innov = y - xhat[0]
    return chain_velocity(xhat, xi) + gains.lambda1 * innov, psi_val + gains.lambda2 * innov


def psi_bar_from_grid(model_set: ModelSet, x_star: Box, xi_star, theta_bound: float,
                      n_grid: int = 21, n_xi: int = 5, safety: float = 1.5) -> float:
    """Grid estimate of ``max |d phi_hat/dx (A x + B xi)|`` over the boxes, times ``safety``.

    For linear-in-theta model sets and ``theta`` in the cube of half-width
    ``theta_bound`` the max over theta is ``theta_bound * |J(x) v|_1``.
    """
    reg = model_set.regressor
    if model_set.n_theta == 0:
        return 1.0
    if reg is None:
        raise ConfigError("psi_bar must be given explicitly for a non-linear model set")
    axes = [np.linspace(lo, hi, n_grid) for lo, hi in zip(x_star.lo, x_star.hi)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(axes))
    xis = np.linspace(xi_star[0], xi_star[1], n_xi)
    best = 0.0
    for x in pts:
        J = reg.jacobian(x)
        for xi in xis:
            best = max(best, float(np.abs(J @ chain_velocity(x, xi)).sum()))
    return safety * theta_bound * best if best > 0 else 1.0
