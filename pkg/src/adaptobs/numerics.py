"""Small dense linear algebra, the RK4 kernel, saturation and seeded noise."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

DEFAULT_RANK_TOL = 1e-12


class NumericsError(RuntimeError):
    pass


class IntegrationDiverged(NumericsError):
    """Raised when a flow step produces a non-finite state component."""

    def __init__(self, component: int, t: float, j: int | None = None):
        self.component = component
        self.t = t
        self.j = j
        where = f"t={t:.6g}" if j is None else f"(t={t:.6g}, j={j})"
        super().__init__(f"integration diverged in state component {component} at {where}")


class UndefinedMsv(NumericsError):
    pass


def rk4_step(f: Callable[[float, np.ndarray], np.ndarray], state, t: float, h: float) -> np.ndarray:
    """One classical Runge-Kutta step of ``dx/dt = f(t, x)``."""
    if not h > 0:
        raise ValueError("step size must be positive")
    x = np.asarray(state, dtype=float)
    k1 = np.asarray(f(t, x), dtype=float)
    k2 = np.asarray(f(t + 0.5 * h, x + 0.5 * h * k1), dtype=float)
    k3 = np.asarray(f(t + 0.5 * h, x + 0.5 * h * k2), dtype=float)
    k4 = np.asarray(f(t + h, x + h * k3), dtype=float)
    out = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    bad = np.flatnonzero(~np.isfinite(np.atleast_1d(out)))
    if bad.size:
        raise IntegrationDiverged(int(bad[0]), t + h)
    return out


def _svd(m: np.ndarray):
    try:
        return np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - LAPACK failure
        raise NumericsError(f"SVD did not converge: {exc}") from exc


def pinv(m, tol: float = DEFAULT_RANK_TOL) -> np.ndarray:
    """Moore-Penrose pseudoinverse.

    Singular values at or below ``tol * s_max`` are treated as zero.
    """
    a = np.atleast_2d(np.asarray(m, dtype=float))
    if not np.all(np.isfinite(a)):
        raise NumericsError("pinv of a non-finite matrix")
    u, s, vt = _svd(a)
    out = np.zeros((a.shape[1], a.shape[0]))
    if s.size == 0 or s[0] == 0.0:
        return out
    keep = s > tol * s[0]
    return (vt[keep].T / s[keep]) @ u[:, keep].T


def msv(m, tol: float = DEFAULT_RANK_TOL) -> float:
    """Minimum non-zero singular value (relative rank tolerance ``tol``)."""
    a = np.atleast_2d(np.asarray(m, dtype=float))
    s = _svd(a)[1]
    if s.size == 0 or s[0] == 0.0:
        raise UndefinedMsv("msv of an all-zero matrix is undefined")
    return float(s[s > tol * s[0]].min())


def pinv_sym(m, tol: float = DEFAULT_RANK_TOL) -> np.ndarray:
    """Pseudoinverse of a symmetric matrix through its eigendecomposition.

    Same result as :func:`pinv` (singular values are the absolute
    eigenvalues) at roughly half the cost for large matrices.
    """
    a = np.atleast_2d(np.asarray(m, dtype=float))
    if not np.all(np.isfinite(a)):
        raise NumericsError("pinv of a non-finite matrix")
    w, v = np.linalg.eigh(a)
    smax = np.abs(w).max(initial=0.0)
    if smax == 0.0:
        return np.zeros_like(a)
    keep = np.abs(w) > tol * smax
    return (v[:, keep] / w[keep]) @ v[:, keep].T


def msv_sym(m, tol: float = DEFAULT_RANK_TOL) -> float:
    """:func:`msv` for a symmetric matrix."""
    s = np.abs(np.linalg.eigvalsh(np.atleast_2d(np.asarray(m, dtype=float))))
    smax = s.max(initial=0.0)
    if smax == 0.0:
        raise UndefinedMsv("msv of an all-zero matrix is undefined")
    return float(s[s > tol * smax].min())


def sat(m, bound: float):
    """Entrywise clamp to ``[-bound, bound]``."""
    if not bound > 0:
        raise ValueError("saturation bound must be positive")
    out = np.minimum(np.maximum(m, -bound), bound)
    return float(out) if np.ndim(out) == 0 else out


_INV_2_53 = 1.0 / 9007199254740992.0


@dataclass(frozen=True)
class NoiseProcess:
    """Piecewise-linear interpolation of uniform samples in ``[-a/2, a/2]``.

    Sample ``k`` sits at ``t = k * sample_period``. Samples come from a
    Philox counter-based stream keyed by ``(seed, stream)``, so any sample
    index can be generated directly without replaying earlier ones.
    """

    seed: int
    sample_period: float = 0.1
    amplitude: float = 1.0
    stream: int = 0

    def __post_init__(self):
        if not self.sample_period > 0:
            raise ValueError("sample_period must be positive")
        if self.amplitude < 0:
            raise ValueError("amplitude must be >= 0")

    def _bitgen(self) -> np.random.Philox:
        return np.random.Philox(key=[int(self.seed) & (2**64 - 1), int(self.stream)])

    def samples(self, start: int, stop: int) -> np.ndarray:
        """Samples ``start..stop-1`` (scaled by ``amplitude``)."""
        if stop <= start:
            return np.zeros(0)
        bg = self._bitgen()
        block = start // 4
        bg.advance(block)
        raw = bg.random_raw(stop - 4 * block)[start - 4 * block:]
        u = (raw >> np.uint64(11)).astype(float) * _INV_2_53
        return self.amplitude * (u - 0.5)

    def sample(self, k: int) -> float:
        return float(self.samples(k, k + 1)[0])

    def value(self, t: float) -> float:
        if t < 0:
            raise ValueError("noise is defined for t >= 0")
        pos = t / self.sample_period
        k = int(np.floor(pos))
        frac = pos - k
        a, b = self.samples(k, k + 2)
        return float(a + frac * (b - a))


def noise_eval(p: NoiseProcess, t: float, q: float) -> float:
    """``q`` times the interpolated noise value at time ``t``."""
    if q == 0.0:
        return 0.0
    return q * p.value(t)


def interp_samples(samples: np.ndarray, period: float, t: float) -> float:
    """Linear interpolation of a precomputed sample table (same rule as NoiseProcess.value)."""
    pos = t / period
    k = int(np.floor(pos))
    frac = pos - k
    return float(samples[k] + frac * (samples[k + 1] - samples[k]))
