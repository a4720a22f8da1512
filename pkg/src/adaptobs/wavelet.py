"""B-spline multiresolution basis and the cascaded least-squares identifier.

Scale convention: larger ``i`` is coarser, ``f_{i,k}(s) = 2^{-i/2} f(2^{-i} s - k)``.
The scaling function is the cardinal B-spline ``N_m`` on ``[0, m]``; the
wavelet is ``psi(x) = sum_k g_k N_m(2x - k)`` with ``g`` taken from the
Cohen-Daubechies-Feauveau dual filter of order ``m_dual``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from itertools import product
from math import comb

import numba
import numpy as np

from .identifier import Identifier, ModelSet
from .plant import Box
from .rls import Regressor, RlsConfig, RlsState, pe_monitor, rls_jump, rls_output


def bspline_eval(m: int, x):
    """Cardinal B-spline ``N_m`` and its derivative via Cox-de Boor.

    ``N_1`` is the indicator of ``[0, 1)``, ``N_k(x) = (x N_{k-1}(x) +
    (k - x) N_{k-1}(x - 1)) / (k - 1)``, and ``N_m' = N_{m-1}(x) - N_{m-1}(x-1)``.
    """
    if m < 3:
        raise ValueError("B-spline order must be >= 3 for a C^1 basis")
    x = np.asarray(x, dtype=float)
    js = np.arange(m, dtype=float)
    u = x[..., None] - js
    b = ((u >= 0.0) & (u < 1.0)).astype(float)
    for k in range(2, m):
        u = x[..., None] - js[: m - k + 1]
        b = (u * b[..., : m - k + 1] + (k - u) * b[..., 1: m - k + 2]) / (k - 1)
    deriv = b[..., 0] - b[..., 1]
    value = (x * b[..., 0] + (m - x) * b[..., 1]) / (m - 1)
    if value.ndim == 0:
        return float(value), float(deriv)
    return value, deriv


def bspline_pieces(m: int) -> np.ndarray:
    """Polynomial pieces of ``N_m``: row ``p`` holds ascending coefficients in
    ``s = x - p`` on ``[p, p + 1)``."""
    P = [np.array([1.0])]
    for k in range(2, m + 1):
        nxt = []
        for p in range(k):
            acc = np.zeros(k)
            if p < k - 1:  # x * N_{k-1}(x), x = p + s
                prev = np.pad(P[p], (0, k - P[p].size))
                acc += p * prev + np.concatenate([[0.0], prev[:-1]])
            if p >= 1:  # (k - x) * N_{k-1}(x - 1)
                prev = np.pad(P[p - 1], (0, k - P[p - 1].size))
                acc += (k - p) * prev - np.concatenate([[0.0], prev[:-1]])
            nxt.append(acc / (k - 1))
        P = nxt
    return np.array(P)


def _laurent_mul(a, b):
    lo = a[0] + b[0]
    out = [Fraction(0)] * (len(a[1]) + len(b[1]) - 1)
    for i, x in enumerate(a[1]):
        for j, y in enumerate(b[1]):
            out[i + j] += x * y
    return lo, out


def _laurent_add(a, b):
    lo = min(a[0], b[0])
    hi = max(a[0] + len(a[1]), b[0] + len(b[1]))
    out = [Fraction(0)] * (hi - lo)
    for src in (a, b):
        for i, x in enumerate(src[1]):
            out[src[0] - lo + i] += x
    return lo, out


def cdf_filters(m: int, m_dual: int):
    """Exact CDF biorthogonal spline filters.

    Returns ``(h, h_dual, h_dual_offset)`` as Fractions, normalised so that
    ``phi(x) = sum_k h_k phi(2x - k)`` with ``sum h = 2``. The dual symbol is
    ``z^{-(m_dual - m)/2} ((1+z)/2)^m_dual P(y)``, ``y = (2 - z - 1/z)/4``,
    ``P(y) = sum_{n<K} C(K-1+n, n) y^n``, ``K = (m + m_dual)/2``.
    """
    if (m + m_dual) % 2:
        raise ValueError("m and m_dual must have the same parity")
    half = (0, [Fraction(1, 2), Fraction(1, 2)])

    def power(base, e):
        out = (0, [Fraction(1)])
        for _ in range(e):
            out = _laurent_mul(out, base)
        return out

    m0 = power(half, m)
    K = (m + m_dual) // 2
    y = (-1, [Fraction(-1, 4), Fraction(1, 2), Fraction(-1, 4)])
    P = (0, [Fraction(0)])
    for n in range(K):
        P = _laurent_add(P, _laurent_mul((0, [Fraction(comb(K - 1 + n, n))]), power(y, n)))
    dual = _laurent_mul(power(half, m_dual), P)
    dual = (dual[0] - (m_dual - m) // 2, dual[1])
    h = [2 * c for c in m0[1]]
    hd = [2 * c for c in dual[1]]
    # trim exact zeros at the ends
    while hd and hd[0] == 0:
        hd = hd[1:]
        dual = (dual[0] + 1, dual[1])
    while hd and hd[-1] == 0:
        hd = hd[:-1]
    return h, hd, dual[0]


@numba.njit(cache=True)
def _pp_eval(pieces, x):
    m = pieces.shape[0]
    if x < 0.0 or x >= m:
        return 0.0, 0.0
    p = int(math.floor(x))
    s = x - p
    val = pieces[p, m - 1]
    der = 0.0
    for q in range(m - 2, -1, -1):
        der = der * s + val
        val = val * s + pieces[p, q]
    return val, der


@numba.njit(cache=True)
def _psi_eval(pieces, g, goff, x):
    m = pieces.shape[0]
    if 2.0 * x <= goff or 2.0 * x >= goff + g.shape[0] - 1 + m:
        return 0.0, 0.0
    val = 0.0
    der = 0.0
    for j in range(g.shape[0]):
        v, d = _pp_eval(pieces, 2.0 * x - (goff + j))
        val += g[j] * v
        der += g[j] * d
    return val, 2.0 * der


@numba.njit(cache=True)
def _dilated(pieces, g, goff, wavelet, i, k, s):
    c = 2.0 ** (-i)
    amp = 2.0 ** (-0.5 * i)
    u = c * s - k
    if wavelet:
        v, d = _psi_eval(pieces, g, goff, u)
    else:
        v, d = _pp_eval(pieces, u)
    return amp * v, amp * c * d


@numba.njit(cache=True)
def _row_eval(pieces, g, goff, row, coords, x, fv, fd):
    """Fill per-coordinate factor values/derivatives of one tensor row.

    Returns False (factors left partially filled) as soon as x lies outside
    the row's support, in which case value and gradient are both zero.
    """
    pattern = row[0]
    i = row[1]
    nd = coords.shape[0]
    for c in range(nd):
        wavelet = (pattern >> c) & 1
        fv[c], fd[c] = _dilated(pieces, g, goff, wavelet, i, row[2 + c], x[coords[c]])
        if fv[c] == 0.0 and fd[c] == 0.0:
            return False
    return True


@numba.njit(cache=True)
def wavelet_dir_kernel(theta, x, v, params):
    """theta . (d sigma(x)/dx) v for a tensor wavelet regressor."""
    pieces, g, goff_arr, rows, coords = params
    goff = goff_arr[0]
    nd = coords.shape[0]
    fv = np.empty(nd)
    fd = np.empty(nd)
    total = 0.0
    for r in range(rows.shape[0]):
        if theta[r] == 0.0:
            continue
        if not _row_eval(pieces, g, goff, rows[r], coords, x, fv, fd):
            continue
        acc = 0.0
        for c in range(nd):
            if fd[c] == 0.0:
                continue
            term = fd[c] * v[coords[c]]
            for c2 in range(nd):
                if c2 != c:
                    term *= fv[c2]
            acc += term
        total += theta[r] * acc
    return total


@numba.njit(cache=True)
def _wavelet_batch(X, params, n_in):
    pieces, g, goff_arr, rows, coords = params
    goff = goff_arr[0]
    nd = coords.shape[0]
    N = X.shape[0]
    R = rows.shape[0]
    vals = np.zeros((N, R))
    grads = np.zeros((N, R, n_in))
    fv = np.empty(nd)
    fd = np.empty(nd)
    for a in range(N):
        for r in range(R):
            if not _row_eval(pieces, g, goff, rows[r], coords, X[a], fv, fd):
                continue
            prod_all = 1.0
            for c in range(nd):
                prod_all *= fv[c]
            vals[a, r] = prod_all
            for c in range(nd):
                term = fd[c]
                for c2 in range(nd):
                    if c2 != c:
                        term *= fv[c2]
                grads[a, r, coords[c]] += term
    return vals, grads


@dataclass(frozen=True)
class WaveletBasis:
    """Quadratic (by default) B-spline scaling function with its CDF wavelet."""

    order: int = 3
    dual_order: int = 5
    h: np.ndarray = field(init=False)
    g: np.ndarray = field(init=False)
    g_offset: int = field(init=False)
    pieces: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.order < 3:
            raise ValueError("scaling function must be C^1: order >= 3")
        h, hd, hd_off = cdf_filters(self.order, self.dual_order)
        # g_k = (-1)^k hd_{1-k}; hd index range [hd_off, hd_off + len - 1]
        k_lo = 1 - (hd_off + len(hd) - 1)
        k_hi = 1 - hd_off
        g = [(-1) ** (k % 2) * hd[(1 - k) - hd_off] for k in range(k_lo, k_hi + 1)]
        object.__setattr__(self, "h", np.array([float(c) for c in h]))
        object.__setattr__(self, "g", np.array([float(c) for c in g]))
        object.__setattr__(self, "g_offset", k_lo)
        object.__setattr__(self, "pieces", bspline_pieces(self.order))

    @property
    def phi_support(self) -> tuple[float, float]:
        return 0.0, float(self.order)

    @property
    def psi_support(self) -> tuple[float, float]:
        return self.g_offset / 2.0, (self.g_offset + self.g.size - 1 + self.order) / 2.0

    def phi(self, x):
        return bspline_eval(self.order, x)

    def psi(self, x):
        x = np.asarray(x, dtype=float)
        flat = [_psi_eval(self.pieces, self.g, self.g_offset, float(v)) for v in x.ravel()]
        val = np.array([f[0] for f in flat]).reshape(x.shape)
        der = np.array([f[1] for f in flat]).reshape(x.shape)
        if x.ndim == 0:
            return float(val), float(der)
        return val, der

    def dilated(self, kind: str, i: int, k: int, s):
        """``f_{i,k}(s) = 2^{-i/2} f(2^{-i} s - k)`` and its derivative in ``s``."""
        f = {"scaling": self.phi, "wavelet": self.psi}[kind]
        v, d = f(2.0 ** (-i) * np.asarray(s, dtype=float) - k)
        return 2.0 ** (-i / 2) * v, 2.0 ** (-1.5 * i) * d

    def kernel_params(self, rows: np.ndarray, coords: np.ndarray) -> tuple:
        return (self.pieces, self.g, np.array([self.g_offset], dtype=np.int64),
                np.ascontiguousarray(rows, dtype=np.int64),
                np.ascontiguousarray(coords, dtype=np.int64))


def two_scale_check(basis: WaveletBasis, grid) -> tuple[float, float]:
    """Max residuals of ``phi = sum h_k phi(2.-k)`` and ``psi = sum g_k phi(2.-k)``.

    The right-hand sides use Cox-de Boor; ``basis.psi`` uses the compiled
    piecewise-polynomial table, so the second residual is a real cross-check.
    """
    x = np.asarray(grid, dtype=float)
    rhs_phi = sum(hk * bspline_eval(basis.order, 2 * x - k)[0] for k, hk in enumerate(basis.h))
    rhs_psi = sum(gk * bspline_eval(basis.order, 2 * x - (basis.g_offset + k))[0]
                  for k, gk in enumerate(basis.g))
    r_phi = float(np.max(np.abs(basis.phi(x)[0] - rhs_phi)))
    r_psi = float(np.max(np.abs(basis.psi(x)[0] - rhs_psi)))
    return r_phi, r_psi


def tensor_eval(basis: WaveletBasis, kind, i: int, k, x):
    """Tensor-product function at scale ``i`` and shift ``k`` with its gradient.

    ``kind`` is ``"scaling"`` (all factors phi) or a wavelet index ``h`` in
    ``1..2^n - 1`` whose bit ``c`` selects psi on coordinate ``c``.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    n = x.size
    k = np.atleast_1d(np.asarray(k, dtype=np.int64))
    if k.size != n:
        raise ValueError("shift multi-index must match the dimension of x")
    if kind == "scaling":
        pattern = 0
    else:
        pattern = int(kind)
        if not 1 <= pattern <= 2**n - 1:
            raise ValueError(f"wavelet index must be in 1..{2**n - 1}, got {kind}")
    row = np.concatenate([[pattern, i], k]).astype(np.int64)
    fv, fd = np.empty(n), np.empty(n)
    if not _row_eval(basis.pieces, basis.g, basis.g_offset, row, np.arange(n), x, fv, fd):
        return 0.0, np.zeros(n)
    grad = np.array([fd[c] * np.prod(np.delete(fv, c)) for c in range(n)])
    return float(np.prod(fv)), grad


def _shift_range(lo: float, hi: float, i: int, support: tuple[float, float]) -> range:
    c = 2.0 ** (-i)
    return range(math.ceil(lo * c - support[1]), math.floor(hi * c - support[0]) + 1)


@dataclass(frozen=True)
class IndexSets:
    H: list
    K: dict

    def n_theta(self, i: int, i0: int, dim: int) -> int:
        return len(self.H) if i == i0 else (2**dim - 1) * len(self.K[i + 1])


def build_index_sets(basis: WaveletBasis, box: Box, i0: int, iT: int) -> IndexSets:
    """Shifts whose supports ``2^i (supp + k)`` intersect the box (closed intervals).

    Detail sets use the hull of the scaling and wavelet supports.
    """
    if iT > i0:
        raise ValueError("target scale must not exceed the starting scale")
    if box.dim == 0:
        raise ValueError("empty working box")
    ranges = [_shift_range(lo, hi, i0, basis.phi_support) for lo, hi in zip(box.lo, box.hi)]
    H = list(product(*ranges))
    hull = (min(basis.phi_support[0], basis.psi_support[0]), max(basis.phi_support[1], basis.psi_support[1]))
    K = {}
    for i in range(iT + 1, i0 + 1):
        K[i] = list(product(*[_shift_range(lo, hi, i, hull) for lo, hi in zip(box.lo, box.hi)]))
    return IndexSets(H, K)


class WaveletRegressor(Regressor):
    """Column of tensor scaling/wavelet functions acting on ``coords`` of x.

    ``rows[r] = (pattern, scale, k_1..k_d)``; pattern 0 is the scaling product.
    """

    name = "wavelet"

    def __init__(self, basis: WaveletBasis, rows, coords, n_in: int):
        self.basis = basis
        self.rows = np.asarray(rows, dtype=np.int64).reshape(-1, 2 + len(coords))
        self.coords = np.asarray(coords, dtype=np.int64)
        self.n_in = n_in
        self.n_theta = self.rows.shape[0]
        self.kernel_params = basis.kernel_params(self.rows, self.coords)
        self.dir_kernel = wavelet_dir_kernel

    def _batch(self, x):
        x = np.asarray(x, dtype=float)
        X = np.ascontiguousarray(x.reshape(-1, self.n_in))
        vals, grads = _wavelet_batch(X, self.kernel_params, self.n_in)
        return x.shape[:-1], vals, grads

    def __call__(self, x):
        shape, vals, _ = self._batch(x)
        return vals.reshape(shape + (self.n_theta,))

    def jacobian(self, x):
        _, _, grads = self._batch(x)
        return grads[0]


@dataclass(frozen=True)
class WaveletStage:
    scale: int
    cfg: RlsConfig
    enable_time: float = 0.0

    @property
    def regressor(self) -> WaveletRegressor:
        return self.cfg.regressor


def stage_rows(index_sets: IndexSets, scale: int, i0: int, dim: int) -> np.ndarray:
    if scale == i0:
        return np.array([(0, i0) + tuple(k) for k in index_sets.H], dtype=np.int64)
    return np.array([(h, scale + 1) + tuple(k) for k in index_sets.K[scale + 1]
                     for h in range(1, 2**dim)], dtype=np.int64)


class WaveletIdentifier(Identifier):
    """Chain of RLS stages, coarse to fine; each stage fits the residual
    left by the coarser ones (pre-jump estimates)."""

    def __init__(self, stages: list[WaveletStage], basis: WaveletBasis, coords, n_in: int):
        if not stages:
            raise ValueError("cascade needs at least one stage")
        scales = [s.scale for s in stages]
        if scales != sorted(scales, reverse=True):
            raise ValueError("stages must be ordered coarse to fine")
        self.stages = list(stages)
        self.basis = basis
        self.coords = np.asarray(coords, dtype=np.int64)
        self.n_in = n_in
        rows = np.concatenate([s.regressor.rows for s in stages])
        self.full_regressor = WaveletRegressor(basis, rows, self.coords, n_in)
        self.model_set = ModelSet.linear(self.full_regressor)
        self._slices = []
        start = 0
        for s in stages:
            self._slices.append(slice(start, start + s.cfg.n_theta))
            start += s.cfg.n_theta

    @classmethod
    def build(cls, basis: WaveletBasis, box: Box, coords, n_in: int, i0: int, iT: int,
              mu, R, enable_times=None, eps: float = 1e-3, c_sigma: float = 1e7,
              c_lambda: float = 1e8, c_gamma: float = 100.0) -> "WaveletIdentifier":
        n_stages = i0 - iT + 1
        mu = np.broadcast_to(np.asarray(mu, dtype=float), (n_stages,))
        R = np.broadcast_to(np.asarray(R, dtype=float), (n_stages,))
        times = np.zeros(n_stages) if enable_times is None else np.broadcast_to(
            np.asarray(enable_times, dtype=float), (n_stages,))
        sets = build_index_sets(basis, box, i0, iT)
        stages = []
        for idx, scale in enumerate(range(i0, iT - 1, -1)):
            reg = WaveletRegressor(basis, stage_rows(sets, scale, i0, len(coords)), coords, n_in)
            cfg = RlsConfig(regressor=reg, mu=float(mu[idx]), R=float(R[idx]) * np.eye(reg.n_theta),
                            eps=eps, c_sigma=c_sigma, c_lambda=c_lambda, c_gamma=c_gamma)
            stages.append(WaveletStage(scale, cfg, float(times[idx])))
        return cls(stages, basis, coords, n_in)

    def _active(self, stage: WaveletStage, now: float) -> bool:
        return now >= stage.enable_time - 1e-9 * max(1.0, abs(stage.enable_time))

    def initial_state(self):
        return tuple(RlsState(s.cfg.z1_0.copy(), s.cfg.z2_0.copy()) if self._active(s, 0.0)
                     else None for s in self.stages)

    def ideal_initial_state(self):
        return tuple(RlsState(np.zeros((s.cfg.n_theta,) * 2), np.zeros(s.cfg.n_theta))
                     for s in self.stages)

    def jump(self, z, u_in, u_out, t=math.inf):
        return cascade_jump(self, z, u_in, u_out, t)

    def stage_outputs(self, z) -> list[np.ndarray]:
        return [np.zeros(s.cfg.n_theta) if zs is None else rls_output(s.cfg, zs)
                for s, zs in zip(self.stages, z)]

    def output(self, z):
        return np.concatenate(self.stage_outputs(z))

    def distance(self, za, zb):
        total = 0.0
        for s, a, b in zip(self.stages, za, zb):
            n = s.cfg.n_theta
            a = a if a is not None else RlsState(np.zeros((n, n)), np.zeros(n))
            b = b if b is not None else RlsState(np.zeros((n, n)), np.zeros(n))
            total += float(np.linalg.norm(a.z1 - b.z1) + np.linalg.norm(a.z2 - b.z2))
        return total

    def pe_status(self, z):
        vals = [pe_monitor(s.cfg, zs) for s, zs in zip(self.stages, z) if zs is not None]
        if not vals:
            return False, 0.0
        return all(v[0] for v in vals), min(v[1] for v in vals)

    def theta_slices(self) -> list[slice]:
        return list(self._slices)

    def truncated(self, n_stages: int) -> "WaveletIdentifier":
        """The same cascade keeping only the ``n_stages`` coarsest stages."""
        return WaveletIdentifier(self.stages[:n_stages], self.basis, self.coords, self.n_in)


def cascade_jump(cascade: WaveletIdentifier, z, u_in, u_out: float, now: float = math.inf):
    """One jump of the whole chain; stages not yet enabled are skipped."""
    err = float(u_out)
    new = []
    for stage, zs in zip(cascade.stages, z):
        if zs is None:
            if not cascade._active(stage, now):
                new.append(None)
                continue
            zs = RlsState(stage.cfg.z1_0.copy(), stage.cfg.z2_0.copy())
        theta_pre = rls_output(stage.cfg, zs)
        new.append(rls_jump(stage.cfg, zs, u_in, err))
        err = err - float(theta_pre @ stage.regressor(u_in))
    return tuple(new)


def cascade_predict(cascade: WaveletIdentifier, theta, x, n_stages: int | None = None):
    """Partial sum over the first ``n_stages`` stages (all by default) and its x-gradient."""
    theta = np.asarray(theta, dtype=float).copy()
    if n_stages is not None:
        cut = cascade.theta_slices()[n_stages - 1].stop if n_stages > 0 else 0
        theta[cut:] = 0.0
    reg = cascade.full_regressor
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return float(reg(x) @ theta), theta @ reg.jacobian(x)
    shape, vals, grads = reg._batch(x)
    return (vals @ theta).reshape(shape), np.einsum("nrd,r->nd", grads, theta).reshape(shape + (cascade.n_in,))


def check_stage_independence(cascade: WaveletIdentifier, u_in, u_out, times=None) -> tuple[bool, float]:
    """Coarser stage states must be identical whether or not finer stages run.

    Replays the same inputs through every truncation of the chain and
    compares the retained stages bit for bit.
    """
    u_in = np.atleast_2d(np.asarray(u_in, dtype=float))
    u_out = np.asarray(u_out, dtype=float)
    times = np.full(len(u_out), math.inf) if times is None else np.asarray(times, dtype=float)

    def replay(c):
        z = c.initial_state() if np.all(np.isfinite(times)) else c.ideal_initial_state()
        hist = []
        for a, b, t in zip(u_in, u_out, times):
            z = c.jump(z, a, b, t)
            hist.append(z)
        return hist

    full = replay(cascade)
    worst = 0.0
    same = True
    for n_keep in range(1, len(cascade.stages)):
        part = replay(cascade.truncated(n_keep))
        for zf, zp in zip(full, part):
            for a, b in zip(zf[:n_keep], zp):
                if a is None or b is None:
                    same &= a is b
                    continue
                d = max(np.max(np.abs(a.z1 - b.z1)), np.max(np.abs(a.z2 - b.z2)))
                worst = max(worst, float(d))
                same &= bool(np.array_equal(a.z1, b.z1) and np.array_equal(a.z2, b.z2))
    return same, worst
