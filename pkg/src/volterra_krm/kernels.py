"""Kernels for Volterra maps of Wiener and Wiener-Hammerstein systems.

The building blocks are the diagonal-correlated (DC) kernel for impulse
responses, a function ``zeta`` that plays the role of a single impulse
response inside the off-diagonal blocks, and the multi-index kernel that
couples a p-th order map with a q-th order map.

Conventions used throughout the package:

* all lags are integers; kernels and ``zeta`` vanish at negative lags
  (causal blocks) and at lags ``>= n`` (FIR blocks of order ``n``);
* a multi-index ``(t_1, ..., t_p)`` is flattened row-major, ``t_1``
  slowest, exactly like ``np.kron`` / ``np.ravel_multi_index``;
* ``k2 is None`` encodes the delta kernel on the second block, i.e. the
  Wiener special case.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum
from functools import lru_cache
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import SizeExceeded

MAX_DENSE_SIZE = 100_000


@dataclass(frozen=True)
class DcParams:
    """Hyperparameters ``(c, alpha, beta)`` of the DC kernel."""

    c: float = 1.0
    alpha: float = 0.5
    beta: float = 0.1

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if not self.beta >= 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if not self.c >= 0:
            raise ValueError(f"c must be >= 0, got {self.c}")


class ZetaVariant(str, Enum):
    EXP_DECAY = "exp_decay"
    ORTHO_BASIS = "ortho_basis"


@dataclass(frozen=True)
class ZetaSpec:
    """``zeta`` built from the DC kernel ``params`` it is paired with."""

    variant: ZetaVariant
    params: DcParams
    l: int = 100

    def __post_init__(self):
        if self.variant == ZetaVariant.ORTHO_BASIS and self.l < 1:
            raise ValueError(f"number of bases must be >= 1, got {self.l}")


@dataclass(frozen=True)
class KernelHyper:
    """Full hyperparameter set of the structured Volterra kernel.

    Parameters
    ----------
    a : sequence of float
        Polynomial coefficients ``a_1..a_M``; ``M = len(a)``.
    h0 : float
        Zeroth-order map, handled as a mean term.
    k1 : DcParams
        Kernel of the first linear block.
    k2 : DcParams or None
        Kernel of the second linear block; ``None`` is the delta kernel
        and reduces the structure to a Wiener system.
    zeta_variant : ZetaVariant or None
        Off-diagonal coupling; ``None`` keeps only the diagonal blocks.
    sigma2 : float
        Noise variance.
    n : int
        Memory length (FIR order) of each linear block.
    n_basis : int
        Number of DC eigenfunctions for ``ZetaVariant.ORTHO_BASIS``.
    """

    a: tuple
    k1: DcParams
    n: int
    k2: Optional[DcParams] = None
    zeta_variant: Optional[ZetaVariant] = ZetaVariant.EXP_DECAY
    sigma2: float = 1.0
    h0: float = 0.0
    n_basis: int = 100

    def __post_init__(self):
        object.__setattr__(self, "a", tuple(float(x) for x in self.a))
        if self.zeta_variant is not None:
            object.__setattr__(self, "zeta_variant", ZetaVariant(self.zeta_variant))
        if len(self.a) < 1:
            raise ValueError("at least one polynomial coefficient is required")
        if self.n < 1:
            raise ValueError(f"memory length must be >= 1, got {self.n}")
        if not self.sigma2 > 0:
            raise ValueError(f"sigma2 must be > 0, got {self.sigma2}")

    @property
    def M(self) -> int:
        return len(self.a)

    @property
    def zeta(self) -> Optional[ZetaSpec]:
        if self.zeta_variant is None:
            return None
        return ZetaSpec(self.zeta_variant, self.k1, self.n_basis)

    @property
    def volterra_memory(self) -> int:
        """Memory of the implied Volterra series (``2n - 1`` with a second block)."""
        return self.n if self.k2 is None else 2 * self.n - 1

    def with_(self, **changes) -> "KernelHyper":
        return replace(self, **changes)


# --------------------------------------------------------------------------
# scalar / vectorized evaluators
# --------------------------------------------------------------------------


def dc_eval(t, s, p: DcParams):
    """DC kernel ``c^2 exp(-alpha (t+s)) exp(-beta |t-s|)`` at nonnegative lags."""
    t = np.asarray(t, dtype=float)
    s = np.asarray(s, dtype=float)
    out = p.c**2 * np.exp(-p.alpha * (t + s) - p.beta * np.abs(t - s))
    return out if out.ndim else float(out)


def causal_eval(f: Callable, *args, support: Optional[int] = None):
    """Evaluate ``f`` with zero extension to negative (or out-of-support) lags."""
    arrs = [np.asarray(x) for x in args]
    ok = np.ones(np.broadcast(*arrs).shape, dtype=bool)
    for x in arrs:
        ok &= x >= 0
        if support is not None:
            ok &= x < support
    if ok.ndim == 0:
        return f(*args) if ok else 0.0
    safe = [np.where(ok, x, 0) for x in arrs]
    return np.where(ok, f(*safe), 0.0)


def dc_eigenvalue(i: int) -> float:
    """``1 / ((i - 1/2)^2 pi^2)``, the i-th eigenvalue in the DC Mercer expansion."""
    return 1.0 / ((i - 0.5) ** 2 * math.pi**2)


def dc_eigenfunction(i: int, t, p: DcParams, sign: int = 1):
    """Eigenfunction ``sqrt(2) e^{(-alpha + sign*beta) t} sin((i-1/2) pi e^{-2 beta t})``.

    ``sign=+1`` is the convention that reproduces the DC kernel through the
    Mercer sum; ``sign=-1`` is kept only so that the choice can be tested.
    """
    t = np.asarray(t, dtype=float)
    w = (i - 0.5) * math.pi
    if sign == 1:
        # e^{(beta-alpha)t} sin(w e^{-2 beta t}) rewritten with sinc so that
        # neither factor overflows for large t.
        out = math.sqrt(2) * w * np.exp(-(p.alpha + p.beta) * t) * np.sinc((i - 0.5) * np.exp(-2 * p.beta * t))
    else:
        out = math.sqrt(2) * np.exp(-(p.alpha + p.beta) * t) * np.sin(w * np.exp(-2 * p.beta * t))
    return out if out.ndim else float(out)


def dc_eigenpair(i: int, p: DcParams, sign: int = 1):
    """Return ``(eigenvalue, eigenfunction)`` of the DC kernel with unit scale."""
    if i < 1:
        raise ValueError(f"eigen-index must be >= 1, got {i}")
    return dc_eigenvalue(i), lambda t: dc_eigenfunction(i, t, p, sign)


def _zeta_raw(t, z: ZetaSpec):
    t = np.asarray(t, dtype=float)
    p = z.params
    if z.variant == ZetaVariant.EXP_DECAY:
        return p.c * np.exp(-(p.alpha + p.beta) * t)
    # sum_i sqrt(2) eps_i psi_i(t) for all l terms at once; eps_i w_i = 1 / w_i
    h = _half_integers(z.l)
    x = np.exp(-2 * p.beta * t)
    if x.size and x.min() > 1e-150 and t.ndim == 1:
        # sinc(h x) / (h pi) = sin(pi h x) / (pi^2 h^2 x), and
        # sin(pi h_i x) = Im(e^{-i pi x / 2} e^{i pi x i}) with powers by cumulative product
        th = math.pi * x
        powers = np.cumprod(np.broadcast_to(np.exp(1j * th), (z.l, len(t))), axis=0)
        series = (np.exp(-0.5j * th) * (_inv_sq(z.l) @ powers)).imag / (math.pi**2 * x)
    else:
        series = (np.sinc(np.multiply.outer(h, x)) / (h * math.pi).reshape((-1,) + (1,) * x.ndim)).sum(axis=0)
    return p.c * 2.0 * np.exp(-(p.alpha + p.beta) * t) * series


@lru_cache(maxsize=64)
def _inv_sq(l: int) -> np.ndarray:
    w = 1.0 / _half_integers(l) ** 2
    w.setflags(write=False)
    return w


@lru_cache(maxsize=64)
def _half_integers(l: int) -> np.ndarray:
    h = np.arange(1, l + 1) - 0.5
    h.setflags(write=False)
    return h


def zeta_eval(t, z: ZetaSpec, support: Optional[int] = None):
    """Evaluate ``zeta`` at integer lags; zero at negative lags."""
    out = causal_eval(lambda x: _zeta_raw(x, z), t, support=support)
    return float(out) if np.ndim(out) == 0 else out


def dc_gram(n: int, p: DcParams, size: Optional[int] = None) -> np.ndarray:
    """``size x size`` Gram matrix of the DC kernel on lags ``0..size-1``.

    Entries with a lag ``>= n`` are zero (FIR truncation).
    """
    size = n if size is None else size
    t = np.arange(size)
    K = dc_eval(t[:, None], t[None, :], p)
    K = np.atleast_2d(K)
    if size > n:
        K[n:, :] = 0.0
        K[:, n:] = 0.0
    return K


def zeta_vector(n: int, z: Optional[ZetaSpec], size: Optional[int] = None) -> Optional[np.ndarray]:
    if z is None:
        return None
    size = n if size is None else size
    v = np.asarray(_zeta_raw(np.arange(size), z), dtype=float)
    v[n:] = 0.0
    return v


def wiener_kernel_eval(t_vec: Sequence[int], s_vec: Sequence[int], a_p: float, a_q: float,
                       k1: DcParams, z: Optional[ZetaSpec], support: Optional[int] = None) -> float:
    """Kernel between a p-th and a q-th order map of a Wiener system.

    For ``p <= q`` it is ``a_p a_q prod_{i<=p} k1(t_i, s_i) prod_{i>p} zeta(s_i)``
    and symmetrically for ``p > q``.  ``z=None`` drops the off-diagonal
    blocks (they evaluate to zero).
    """
    p, q = len(t_vec), len(s_vec)
    if p < 1 or q < 1:
        raise ValueError("multi-indices must be non-empty")
    if p != q and z is None:
        return 0.0
    k = min(p, q)
    val = a_p * a_q
    for i in range(k):
        val *= causal_eval(lambda x, y: dc_eval(x, y, k1), t_vec[i], s_vec[i], support=support)
    tail = s_vec[k:] if q > p else t_vec[k:]
    for x in tail:
        val *= zeta_eval(x, z, support=support)
    return float(val)


def wh_kernel_eval(t_vec, s_vec, a_p: float, a_q: float, k1: DcParams, k2: Optional[DcParams],
                   z: Optional[ZetaSpec], n: int) -> float:
    """Kernel between a p-th and a q-th order map of a Wiener-Hammerstein system.

    Double convolution of the Wiener kernel with ``k2`` over shifts
    ``0..n-1``.  ``k2=None`` is the delta kernel and returns the Wiener
    kernel itself.
    """
    if n < 1:
        raise ValueError(f"memory length must be >= 1, got {n}")
    t_vec = np.asarray(t_vec, dtype=int)
    s_vec = np.asarray(s_vec, dtype=int)
    if k2 is None:
        return wiener_kernel_eval(t_vec, s_vec, a_p, a_q, k1, z, support=n)
    total = 0.0
    for x1 in range(n):
        for x2 in range(n):
            w = dc_eval(x1, x2, k2)
            total += w * wiener_kernel_eval(t_vec - x1, s_vec - x2, a_p, a_q, k1, z, support=n)
    return total


# --------------------------------------------------------------------------
# dense matrices (oracles and small instances)
# --------------------------------------------------------------------------


def _kron_power(A: np.ndarray, m: int) -> np.ndarray:
    out = np.ones((1, 1))
    for _ in range(m):
        out = np.kron(out, A)
    return out


def _shift_block(block: np.ndarray, p: int, q: int, L: int, K2: np.ndarray) -> np.ndarray:
    """Apply the double shift-sum with ``K2`` to one ``L^p x L^q`` block."""
    T = block.reshape((L,) * (p + q))
    out = np.zeros_like(T)
    n2 = K2.shape[0]
    for x1 in range(min(n2, L)):
        for x2 in range(min(n2, L)):
            w = K2[x1, x2]
            if w == 0.0:
                continue
            dst = (slice(x1, None),) * p + (slice(x2, None),) * q
            src = (slice(0, L - x1),) * p + (slice(0, L - x2),) * q
            out[dst] += w * T[src]
    return out.reshape(block.shape)


def dense_kernel_matrix(h: KernelHyper, memory: Optional[int] = None, method: str = "kron") -> np.ndarray:
    """Dense kernel matrix over all maps of order ``1..M`` (the mean ``h0`` excluded).

    Parameters
    ----------
    h : KernelHyper
    memory : int, optional
        Lag window ``0..memory-1`` of the maps; defaults to ``h.n``.  Use
        ``h.volterra_memory`` to cover the full support of a
        Wiener-Hammerstein kernel.
    method : {"kron", "loop"}
        ``"kron"`` assembles blocks with Kronecker products and array
        shifts; ``"loop"`` calls :func:`wh_kernel_eval` entry by entry and is
        only meant for tiny cross-checks.
    """
    L = h.n if memory is None else memory
    M = h.M
    total = sum(L**m for m in range(1, M + 1))
    if L**M > MAX_DENSE_SIZE:
        raise SizeExceeded(f"memory^M = {L}^{M} exceeds {MAX_DENSE_SIZE}")
    offsets = np.cumsum([0] + [L**m for m in range(1, M + 1)])
    P = np.zeros((total, total))
    z = h.zeta
    if method == "loop":
        for p in range(1, M + 1):
            rows = list(np.ndindex(*(L,) * p))
            for q in range(1, M + 1):
                cols = list(np.ndindex(*(L,) * q))
                for i, tv in enumerate(rows):
                    for j, sv in enumerate(cols):
                        P[offsets[p - 1] + i, offsets[q - 1] + j] = wh_kernel_eval(
                            tv, sv, h.a[p - 1], h.a[q - 1], h.k1, h.k2, z, h.n)
        return P
    if method != "kron":
        raise ValueError(f"unknown method {method!r}")
    K1 = dc_gram(h.n, h.k1, size=L)
    zv = zeta_vector(h.n, z, size=L)
    K2 = None if h.k2 is None else dc_gram(h.n, h.k2)
    for p in range(1, M + 1):
        for q in range(p, M + 1):
            if p != q and zv is None:
                continue
            blk = h.a[p - 1] * h.a[q - 1] * np.kron(_kron_power(K1, p), _kron_power(zv[None, :], q - p)) \
                if q > p else h.a[p - 1] ** 2 * _kron_power(K1, p)
            if K2 is not None:
                blk = _shift_block(blk, p, q, L, K2)
            r0, c0 = offsets[p - 1], offsets[q - 1]
            P[r0:r0 + L**p, c0:c0 + L**q] = blk
            if q != p:
                P[c0:c0 + L**q, r0:r0 + L**p] = blk.T
    return P


def min_eig_check(Msym: np.ndarray, tol: float = 1e-8) -> bool:
    """True iff the smallest eigenvalue is ``>= -tol * (1 + ||M||_2)``."""
    w = np.linalg.eigvalsh(Msym)
    if w.size == 0:
        return True
    scale = np.max(np.abs(w))
    return bool(w[0] >= -tol * (1.0 + scale))
