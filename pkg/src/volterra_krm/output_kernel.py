"""Output kernel matrix ``Q = Phi P Phi^T`` without forming ``P`` or ``Phi``.

The Wiener part is assembled from ``X = Psi K1 Psi^T`` and ``psi = Psi zeta``
with Hadamard products; the second linear block enters as a 2-D
convolution with its ``n x n`` Gram matrix.  ``dense_phi`` builds the
monomial regressor explicitly and is used only as an oracle.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import signal

from .errors import InsufficientData, SizeExceeded
from .kernels import MAX_DENSE_SIZE, KernelHyper, dc_gram, zeta_vector

# below this value of rows * n the shifted-sum convolution beats the FFT
DIRECT_CONV_LIMIT = 2**14


class InitPolicy(str, Enum):
    PRE_WINDOW_ZERO = "pre_window_zero"
    TRIM_TO_KNOWN = "trim_to_known"


@dataclass(frozen=True)
class RegressorMatrix:
    """Toeplitz matrix of lagged inputs, ``psi[i, j] = u(k_i - j)``.

    ``t_offset`` is the 1-based time index of the first output row.  The
    first ``lead`` rows precede it; they feed the convolution with the
    second block and are not outputs themselves.
    """

    psi: np.ndarray
    init_policy: InitPolicy
    t_offset: int
    lead: int = 0

    @property
    def n(self) -> int:
        return self.psi.shape[1]

    @property
    def n_outputs(self) -> int:
        return self.psi.shape[0] - self.lead

    @property
    def start(self) -> int:
        """0-based index (into the input series) of the first output."""
        return self.t_offset - 1

    @property
    def outputs(self) -> np.ndarray:
        return self.psi[self.lead:]


def build_regressor(u, n: int, policy: InitPolicy | str = InitPolicy.TRIM_TO_KNOWN,
                    lead: int = 0) -> RegressorMatrix:
    """Lagged-input matrix for memory ``n``.

    With ``PRE_WINDOW_ZERO`` unknown past inputs are zeros and every sample
    yields an output row.  With ``TRIM_TO_KNOWN`` the first output is the
    first sample whose ``n + lead`` most recent inputs are all known.
    """
    u = np.asarray(u, dtype=float).ravel()
    policy = InitPolicy(policy)
    if n < 1:
        raise ValueError(f"memory length must be >= 1, got {n}")
    if policy == InitPolicy.TRIM_TO_KNOWN:
        first = n - 1 + lead
        if len(u) <= first:
            raise InsufficientData(
                f"series of length {len(u)} too short for {n + lead} known lags")
    else:
        first = 0
    padded = np.concatenate([np.zeros(n - 1 + lead), u])
    windows = sliding_window_view(padded, n)[:, ::-1]
    # window k of ``windows`` ends at padded index k + n - 1, i.e. time k - lead
    rows = windows[first:first + len(u) - first + lead]
    return RegressorMatrix(np.ascontiguousarray(rows), policy, first + 1, lead)


def eta_vectors(psi: np.ndarray, a) -> list:
    """``eta_m = sum_{l >= m} a_l psi^(l-m)`` for ``m = 1..M+1`` (last one zero)."""
    M = len(a)
    etas = [np.zeros_like(psi)]
    acc = np.zeros_like(psi)
    for m in range(M, 0, -1):
        acc = a[m - 1] + psi * acc
        etas.append(acc)
    etas.reverse()
    return etas


def _qw(psi_l: np.ndarray, psi_r: np.ndarray, K1: np.ndarray, zeta: Optional[np.ndarray], a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    M = len(a)
    X = psi_l @ (K1 @ psi_r.T)
    if zeta is None:
        acc = np.full_like(X, a[M - 1] ** 2)
        for m in range(M - 1, 0, -1):
            acc *= X
            acc += a[m - 1] ** 2
        acc *= X
        return acc
    vl = psi_l @ zeta
    vr = psi_r @ zeta
    el = eta_vectors(vl, a)
    er = eta_vectors(vr, a)
    # Horner form of sum_m X^m o (eta_m eta_m^T - (psi eta_{m+1})(psi eta_{m+1})^T)
    acc = np.multiply.outer(el[M - 1], er[M - 1])
    for m in range(M - 1, 0, -1):
        acc *= X
        acc += np.multiply.outer(el[m - 1], er[m - 1])
        acc -= np.multiply.outer(vl * el[m], vr * er[m])
    acc *= X
    return acc


def _psi_array(psi) -> np.ndarray:
    return psi.psi if isinstance(psi, RegressorMatrix) else np.asarray(psi, dtype=float)


def build_qw(psi, K1: np.ndarray, zeta_vec: Optional[np.ndarray], a, psi_right=None) -> np.ndarray:
    """Wiener output kernel matrix.

    Parameters
    ----------
    psi : RegressorMatrix or ndarray
        Row regressors (all rows, including any lead rows).
    K1 : (n, n) ndarray
    zeta_vec : (n,) ndarray or None
        Samples of ``zeta``; ``None`` keeps only the diagonal blocks.
    a : sequence of float
    psi_right : RegressorMatrix or ndarray, optional
        Column regressors for a cross kernel; defaults to ``psi``.
    """
    left = _psi_array(psi)
    right = left if psi_right is None else _psi_array(psi_right)
    out = _qw(left, right, K1, zeta_vec, a)
    if psi_right is None:
        out = 0.5 * (out + out.T)
    return out


def qw_term(psi, K1: np.ndarray, zeta_vec: np.ndarray, a, p: int, q: int) -> np.ndarray:
    """The single ``(p, q)`` contribution to ``build_qw`` (diagnostic)."""
    P = _psi_array(psi)
    X = P @ K1 @ P.T
    v = P @ zeta_vec
    k = min(p, q)
    out = a[p - 1] * a[q - 1] * X**k
    if p > q:
        out = out * (v**(p - q))[:, None]
    elif q > p:
        out = out * (v**(q - p))[None, :]
    return out


def conv2_q(K2: Optional[np.ndarray], qw: np.ndarray, lead: int = 0, method: str = "auto") -> np.ndarray:
    """``Q[t, s] = sum_{x1, x2} K2[x1, x2] qw[t + lead - x1, s + lead - x2]``.

    ``qw`` is zero-extended outside its range; the first ``lead`` rows and
    columns of ``qw`` are history and are cropped from the result.
    ``K2=None`` is the delta kernel.
    """
    rows, cols = qw.shape[0] - lead, qw.shape[1] - lead
    if K2 is None:
        return qw[lead:, lead:].copy()
    n = K2.shape[0]
    if method == "auto":
        method = "direct" if max(rows, cols) * n < DIRECT_CONV_LIMIT else "fft"
    if method == "fft":
        full = signal.fftconvolve(qw, K2, mode="full")
        return full[lead:lead + rows, lead:lead + cols]
    if method != "direct":
        raise ValueError(f"unknown method {method!r}")
    out = np.zeros((rows, cols))
    R, C = qw.shape
    for x1 in range(n):
        for x2 in range(n):
            w = K2[x1, x2]
            if w == 0.0:
                continue
            # output rows t with 0 <= t + lead - x1 < R
            t0 = max(0, x1 - lead)
            s0 = max(0, x2 - lead)
            t1 = min(rows, R - lead + x1)
            s1 = min(cols, C - lead + x2)
            if t0 >= t1 or s0 >= s1:
                continue
            out[t0:t1, s0:s1] += w * qw[t0 + lead - x1:t1 + lead - x1, s0 + lead - x2:s1 + lead - x2]
    return out


def kernel_pieces(h: KernelHyper):
    """``(K1, zeta_vec, K2)`` for the hyperparameters ``h``."""
    K1 = dc_gram(h.n, h.k1)
    zv = zeta_vector(h.n, h.zeta)
    K2 = None if h.k2 is None else dc_gram(h.n, h.k2)
    return K1, zv, K2


def regressor_for(u, h: KernelHyper, policy: InitPolicy | str = InitPolicy.TRIM_TO_KNOWN) -> RegressorMatrix:
    """Regressor with the lead rows needed by ``h`` (``n - 1`` with a second block)."""
    lead = 0 if h.k2 is None else h.n - 1
    return build_regressor(u, h.n, policy, lead=lead)


def output_kernel(reg: RegressorMatrix, h: KernelHyper, method: str = "auto") -> np.ndarray:
    """Output kernel matrix for the outputs of ``reg``."""
    K1, zv, K2 = kernel_pieces(h)
    qw = build_qw(reg, K1, zv, h.a)
    Q = conv2_q(K2, qw, lead=reg.lead, method=method)
    return 0.5 * (Q + Q.T)


def build_cross_q(psi_test, psi_train, K1: np.ndarray, K2: Optional[np.ndarray],
                  zeta_vec: Optional[np.ndarray], a, method: str = "auto") -> np.ndarray:
    """Cross output kernel between test rows and training rows.

    Both regressors must carry the same number of lead rows (``n - 1``
    when ``K2`` is given, zero otherwise).
    """
    lt = psi_test.lead if isinstance(psi_test, RegressorMatrix) else 0
    lr = psi_train.lead if isinstance(psi_train, RegressorMatrix) else 0
    if lt != lr:
        raise ValueError("test and training regressors need the same lead")
    qw = build_qw(psi_test, K1, zeta_vec, a, psi_right=psi_train)
    return conv2_q(K2, qw, lead=lt, method=method)


def dense_phi(psi, M: int) -> np.ndarray:
    """Monomial regressor ``[Phi_1, ..., Phi_M]`` (row-major multi-indices)."""
    P = psi.outputs if isinstance(psi, RegressorMatrix) else np.asarray(psi, dtype=float)
    N, n = P.shape
    if n**M > MAX_DENSE_SIZE:
        raise SizeExceeded(f"n^M = {n}^{M} exceeds {MAX_DENSE_SIZE}")
    blocks = []
    cur = np.ones((N, 1))
    for _ in range(M):
        cur = (cur[:, :, None] * P[:, None, :]).reshape(N, -1)
        blocks.append(cur)
    return np.hstack(blocks)
