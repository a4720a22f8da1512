"""Plant models in output-feedback canonical form and the example systems."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numba
import numpy as np

log = logging.getLogger(__name__)

# Nonlinearities are written against x[0], x[1], ... so the same source serves
# the jitted flow kernel (1-D x) and batch evaluation via ``py_func(X.T, p)``.


@numba.njit(cache=True)
def _phi_va1(x, p):
    return 4.0 * x[0] - x[0] ** 3


@numba.njit(cache=True)
def _phi_va2(x, p):
    return 3.0 * np.arctan(x[0]) - x[0]


@numba.njit(cache=True)
def _phi_vb(x, p):
    x1 = x[0]
    x2 = x[1]
    x3 = x[2]
    return (p[0] * x2 + 3.0 * p[1] * x1 * x1 * x2
            + p[2] * ((1.0 - x1 * x1) * x3 - 2.0 * x1 * x2 * x2))


@numba.njit(cache=True)
def _phi_linear(x, p):
    s = 0.0 * x[0]
    for i in range(p.shape[0]):
        s = s + p[i] * x[i]
    return s


@dataclass(frozen=True)
class Box:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        if lo.shape != hi.shape or np.any(lo > hi):
            raise ValueError("box needs lo <= hi with matching shapes")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def from_pairs(cls, pairs) -> "Box":
        arr = np.asarray(pairs, dtype=float).reshape(-1, 2)
        return cls(arr[:, 0], arr[:, 1])

    @property
    def dim(self) -> int:
        return self.lo.size

    def contains(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lo) and np.all(x <= self.hi))

    def to_pairs(self) -> list:
        return [[float(a), float(b)] for a, b in zip(self.lo, self.hi)]


@dataclass(frozen=True)
class Ball:
    radius: float

    def contains(self, x) -> bool:
        return bool(np.linalg.norm(x) <= self.radius)


@dataclass(frozen=True)
class PlantModel:
    """Chain of integrators ``x_i' = x_{i+1} + d_i``, ``x_n' = phi(x) + d_n``.

    ``phi_kernel`` is a jitted ``(x, params) -> float`` function; ``params``
    carries the ground-truth parameters (e.g. theta_T of example V-B).
    """

    name: str
    n: int
    phi_kernel: Callable
    params: np.ndarray = field(default_factory=lambda: np.zeros(0))
    x0_set: Box | None = None
    invariant_set: Box | Ball | None = None

    def phi(self, x) -> float:
        return float(self.phi_kernel(np.asarray(x, dtype=float), self.params))

    def phi_batch(self, xs) -> np.ndarray:
        """phi over rows of an ``(N, n)`` array."""
        xs = np.asarray(xs, dtype=float)
        out = self.phi_kernel.py_func(xs.T, self.params)
        return np.broadcast_to(np.asarray(out, dtype=float), xs.shape[:1]).copy()

    def with_params(self, params) -> "PlantModel":
        return replace(self, params=np.asarray(params, dtype=float))

    def in_invariant_set(self, x) -> bool:
        return True if self.invariant_set is None else self.invariant_set.contains(x)


def plant_flow(model: PlantModel, x, d=None) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (model.n,):
        raise ValueError(f"expected state of dimension {model.n}, got {x.shape}")
    out = np.empty(model.n)
    out[:-1] = x[1:]
    out[-1] = model.phi(x)
    if d is not None:
        out += np.asarray(d, dtype=float)
    return out


def output(model: PlantModel, x, nu_val: float = 0.0) -> float:
    x = np.asarray(x, dtype=float)
    if x.shape != (model.n,):
        raise ValueError(f"expected state of dimension {model.n}, got {x.shape}")
    return float(x[0] + nu_val)


def hamiltonian(model: PlantModel, x) -> float:
    """``H = x2^2/2 - int_0^{x1} phi`` for the two V-A oscillators."""
    x1, x2 = float(x[0]), float(x[1])
    if model.name == "example_va_phi1":
        integral = 2.0 * x1**2 - 0.25 * x1**4
    elif model.name == "example_va_phi2":
        # exact antiderivative of 3*atan(s) - s
        integral = 3.0 * x1 * np.arctan(x1) - 1.5 * np.log1p(x1**2) - 0.5 * x1**2
    else:
        raise ValueError(f"no Hamiltonian for plant {model.name!r}")
    return 0.5 * x2**2 - integral


VA_X0 = Box([-3.0, -4.0], [3.0, 4.0])
VB_THETA_BOX = Box([-5.0, -5.0, 0.0], [5.0, 0.0, 5.0])


def make_example_va(phi_choice: int) -> PlantModel:
    kernels = {1: _phi_va1, 2: _phi_va2}
    if phi_choice not in kernels:
        raise ValueError("phi_choice must be 1 or 2")
    return PlantModel(
        name=f"example_va_phi{phi_choice}",
        n=2,
        phi_kernel=kernels[phi_choice],
        x0_set=VA_X0,
        invariant_set=Ball(10.0),
    )


def make_example_vb(theta_true) -> PlantModel:
    theta = np.asarray(theta_true, dtype=float)
    if theta.shape != (3,):
        raise ValueError("theta_true must have 3 entries (alpha, beta, ell)")
    if not VB_THETA_BOX.contains(theta):
        raise ValueError(f"theta_true {theta.tolist()} outside [-5,5]x[-5,0]x[0,5]")
    return PlantModel(
        name="example_vb",
        n=3,
        phi_kernel=_phi_vb,
        params=theta,
        x0_set=Box([-2.0] * 3, [2.0] * 3),
        invariant_set=Box([-10.0, -10.0, -100.0], [10.0, 10.0, 100.0]),
    )


def make_custom_chain(n: int, coeffs=None) -> PlantModel:
    """Order-``n`` chain with linear ``phi(x) = coeffs . x`` (zero by default)."""
    if n < 1:
        raise ValueError("order must be >= 1")
    c = np.zeros(n) if coeffs is None else np.asarray(coeffs, dtype=float)
    if c.shape != (n,):
        raise ValueError(f"custom_chain needs {n} coefficients")
    return PlantModel(name="custom_chain", n=n, phi_kernel=_phi_linear, params=c)
