"""Low-rank generators of the Wiener output kernel for separable inputs.

If the input satisfies ``u(t - b) = sum_i pi_i(t) rho_i(b)`` then
``X = Psi K1 Psi^T = U V^T`` with ``r`` columns, every Hadamard power of
``X`` has a multinomial factorization, and the whole output kernel is
``Q = Ubar Vbar^T`` with ``gamma`` columns.  Costs and log-determinants then
follow from the matrix inversion and determinant lemmas in ``O(N gamma^2)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg
from scipy import signal

from .errors import NonFinite, SeparationCheckFailed, SingularCore
from .kernels import DcParams

SEPARATION_TOL = 1e-12
# reciprocal condition number below which the core solve is rejected
RCOND_MIN = np.finfo(float).eps * 1e3
# relative pivot size below which a generator column counts as dependent
RANK_TOL = 1e-13

_geqp3, _orgqr, _potrf, _potrs = scipy.linalg.get_lapack_funcs(
    ("geqp3", "orgqr", "potrf", "potrs"), dtype=np.float64)


class InputFamily(str, Enum):
    EXPONENTIAL = "exponential"
    DAMPED_SINUSOID = "damped_sinusoid"
    POLY_TIMES_EXP = "poly_times_exp"
    CUSTOM = "custom"


@dataclass
class SeparableInputDesc:
    """Factorization ``u(t - b) = sum_i pi_i(t) rho_i(b)`` of an input signal."""

    pi_funcs: Sequence[Callable]
    rho_funcs: Sequence[Callable]
    family: InputFamily = InputFamily.CUSTOM
    signal: Optional[Callable] = None
    params: dict = field(default_factory=dict)

    @property
    def r(self) -> int:
        return len(self.pi_funcs)

    def pi(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        out = np.empty(t.shape + (self.r,))
        for i, f in enumerate(self.pi_funcs):
            out[..., i] = f(t)
        return out

    def rho(self, b) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        out = np.empty(b.shape + (self.r,))
        for i, f in enumerate(self.rho_funcs):
            out[..., i] = f(b)
        return out

    def check(self, times, n: int, tol: float = SEPARATION_TOL) -> None:
        """Verify the identity on the full ``times x 0..n-1`` grid."""
        times = np.asarray(times, dtype=float)
        if self.signal is None:
            raise SeparationCheckFailed("descriptor has no reference signal to check against")
        b = np.arange(n, dtype=float)
        lhs = np.asarray(self.signal(times[:, None] - b[None, :]), dtype=float)
        rhs = self.pi(times) @ self.rho(b).T
        scale = max(1.0, float(np.max(np.abs(lhs))) if lhs.size else 1.0)
        err = float(np.max(np.abs(lhs - rhs))) if lhs.size else 0.0
        if not err <= tol * scale:
            raise SeparationCheckFailed(f"separation identity violated by {err:.3e}")


def separate_input(family: InputFamily | str, N: int, n: int, t_start: int = 0,
                   pi_funcs=None, rho_funcs=None, signal_fn=None, **params) -> SeparableInputDesc:
    """Descriptor for a known input family, verified on the grid it will be used on.

    Parameters
    ----------
    family : InputFamily or str
        ``exponential``: ``A e^{-lam t}`` (r=1);
        ``damped_sinusoid``: ``A e^{-lam t} cos(omega t + phi)`` (r=2);
        ``poly_times_exp``: ``A t e^{-lam t}`` (r=2);
        ``custom``: user supplied ``pi_funcs``, ``rho_funcs`` and ``signal_fn``.
    N, n : int
        Number of output times and memory length of the grid to verify.
    t_start : int
        Time index of the first output.
    """
    family = InputFamily(family)
    A = float(params.get("amplitude", 1.0))
    lam = float(params.get("lam", 0.0))
    if family == InputFamily.EXPONENTIAL:
        sig = lambda t: A * np.exp(-lam * t)
        pis = [lambda t: A * np.exp(-lam * t)]
        rhos = [lambda b: np.exp(lam * b)]
    elif family == InputFamily.DAMPED_SINUSOID:
        om = float(params.get("omega", 0.0))
        ph = float(params.get("phi", 0.0))
        sig = lambda t: A * np.exp(-lam * t) * np.cos(om * t + ph)
        pis = [lambda t: A * np.exp(-lam * t) * np.cos(om * t + ph),
               lambda t: A * np.exp(-lam * t) * np.sin(om * t + ph)]
        rhos = [lambda b: np.exp(lam * b) * np.cos(om * b),
                lambda b: np.exp(lam * b) * np.sin(om * b)]
    elif family == InputFamily.POLY_TIMES_EXP:
        sig = lambda t: A * t * np.exp(-lam * t)
        pis = [lambda t: A * t * np.exp(-lam * t), lambda t: -A * np.exp(-lam * t)]
        rhos = [lambda b: np.exp(lam * b), lambda b: b * np.exp(lam * b)]
    else:
        if pi_funcs is None or rho_funcs is None or signal_fn is None:
            raise ValueError("custom descriptors need pi_funcs, rho_funcs and signal_fn")
        if len(pi_funcs) != len(rho_funcs):
            raise ValueError("pi_funcs and rho_funcs must have the same length")
        sig, pis, rhos = signal_fn, list(pi_funcs), list(rho_funcs)
    desc = SeparableInputDesc(pis, rhos, family, sig, dict(params))
    desc.check(np.arange(t_start, t_start + N), n)
    return desc


# --------------------------------------------------------------------------
# semiseparable kernels
# --------------------------------------------------------------------------


@dataclass
class SemiseparableKernelDesc:
    """``k(t, s) = sum_i mu_i(t) nu_i(s)`` for ``t >= s`` (swapped for ``t < s``).

    When every ``mu_i``/``nu_i`` is geometric, ``mu_i(t) = mu0_i * mr_i**t``,
    ``geometric`` holds the tuples ``(mu0_i, mr_i, nu0_i, nr_i)`` and the
    product is evaluated with first-order recursions that never form the
    (possibly overflowing) individual factors.
    """

    mu_funcs: Sequence[Callable]
    nu_funcs: Sequence[Callable]
    geometric: Optional[Sequence[tuple]] = None

    @property
    def p(self) -> int:
        return len(self.mu_funcs)

    def dense(self, n: int) -> np.ndarray:
        t = np.arange(n, dtype=float)
        K = np.zeros((n, n))
        for mu, nu in zip(self.mu_funcs, self.nu_funcs):
            lower = np.outer(mu(t), nu(t))
            K += np.tril(lower) + np.triu(lower.T, 1)
        return K


def dc_semiseparable(p: DcParams) -> SemiseparableKernelDesc:
    """The DC kernel as an extended-1 semiseparable kernel."""
    mr = math.exp(-(p.alpha + p.beta))
    nr = math.exp(-(p.alpha - p.beta))
    return SemiseparableKernelDesc(
        [lambda t: p.c**2 * mr**np.asarray(t, dtype=float)],
        [lambda s: nr**np.asarray(s, dtype=float)],
        geometric=[(p.c**2, mr, 1.0, nr)],
    )


def dc_quadratic_form(p: DcParams, H: np.ndarray) -> np.ndarray:
    """``H^T K H`` for the DC kernel ``K``, without forming ``K``.

    With ``L[t, s] = mr^t nr^s`` for ``s <= t``, ``K = c^2 (L + L^T - diag L)``
    and ``H^T L H = (mr^t H)^T cumsum(nr^t H)``.
    """
    H = np.asarray(H, dtype=float)
    n = H.shape[0]
    lm, ln = p.alpha + p.beta, p.alpha - p.beta
    if max(abs(lm), abs(ln)) * n >= 300.0:
        # powers would leave the floating-point range; use the filtered form
        return H.T @ semiseparable_apply(dc_semiseparable(p), H)
    t = np.arange(n, dtype=float)
    mu = np.exp(-lm * t)[:, None]
    nu = np.exp(-ln * t)[:, None]
    A = (mu * H).T @ np.cumsum(nu * H, axis=0)
    A += A.T
    A -= (mu * nu * H).T @ H
    A *= p.c**2
    return A


def semiseparable_apply(desc: SemiseparableKernelDesc, H: np.ndarray) -> np.ndarray:
    """``K H`` in ``O(n r p)`` by forward and backward accumulation."""
    H = np.asarray(H, dtype=float)
    squeeze = H.ndim == 1
    if squeeze:
        H = H[:, None]
    n = H.shape[0]
    out = np.zeros_like(H)
    if desc.geometric is not None:
        t = np.arange(n, dtype=float)[:, None]
        for mu0, mr, nu0, nr in desc.geometric:
            lm, ln = -math.log(mr), -math.log(nr) if nr > 0 else math.inf
            if max(abs(lm), abs(ln)) * n < 300.0:
                # factors stay well inside the floating-point range: plain cumulative sums
                mu = mr**t
                nu = nr**t
                fwd = np.cumsum(nu * H, axis=0)
                back = np.cumsum((mu * H)[::-1], axis=0)[::-1]
                fwd *= mu
                fwd[:-1] += nu[:-1] * back[1:]
                out += (mu0 * nu0) * fwd
                continue
            g = mr * nr
            # lower part: sum_{s<=t} mr^(t-s) (g^s H[s])
            low = signal.lfilter([1.0], [1.0, -mr], g**t * H, axis=0)
            # upper part: g^t sum_{s>t} mr^(s-t) H[s]
            rev = signal.lfilter([1.0], [1.0, -mr], H[::-1], axis=0)[::-1]
            up = np.zeros_like(H)
            up[:-1] = mr * rev[1:]
            out += mu0 * nu0 * (low + g**t * up)
    else:
        t = np.arange(n, dtype=float)
        for mu, nu in zip(desc.mu_funcs, desc.nu_funcs):
            m = np.asarray(mu(t), dtype=float)[:, None]
            v = np.asarray(nu(t), dtype=float)[:, None]
            fwd = np.cumsum(v * H, axis=0)
            back = np.cumsum((m * H)[::-1], axis=0)[::-1]
            tail = np.zeros_like(H)
            tail[:-1] = back[1:]
            out += m * fwd + v * tail
    return out[:, 0] if squeeze else out


# --------------------------------------------------------------------------
# generators
# --------------------------------------------------------------------------


@dataclass
class GeneratorPair:
    """``Q = U_bar V_bar^T``."""

    U_bar: np.ndarray
    V_bar: np.ndarray

    @property
    def gamma(self) -> int:
        return self.U_bar.shape[1]

    def dense(self) -> np.ndarray:
        return self.U_bar @ self.V_bar.T


def base_generators(desc: SeparableInputDesc, K1, times, n: Optional[int] = None):
    """``(U, V)`` with ``Psi K1 Psi^T = U V^T`` on the given output times.

    ``K1`` is either a dense ``n x n`` matrix or a semiseparable descriptor
    (then ``n`` must be given).
    """
    U = desc.pi(times)
    if isinstance(K1, SemiseparableKernelDesc):
        if n is None:
            raise ValueError("n is required with a semiseparable K1")
        H = desc.rho(np.arange(n))
        K1H = semiseparable_apply(K1, H)
    else:
        K1 = np.asarray(K1, dtype=float)
        H = desc.rho(np.arange(K1.shape[0]))
        K1H = K1 @ H
    V = U @ (H.T @ K1H)
    return U, V


def compositions(r: int, m: int) -> np.ndarray:
    """All ``(b_1..b_r) >= 0`` with sum ``m``, lexicographic with largest ``b_1`` first."""
    return _compositions(r, m).copy()


@lru_cache(maxsize=None)
def _compositions(r: int, m: int) -> np.ndarray:
    if r == 1:
        out = np.array([[m]], dtype=int)
    else:
        rows = []
        for b1 in range(m, -1, -1):
            for rest in _compositions(r - 1, m - b1):
                rows.append([b1, *rest])
        out = np.array(rows, dtype=int)
    out.setflags(write=False)
    return out


def multinomial_coefficients(E: np.ndarray) -> np.ndarray:
    m = int(E[0].sum())
    return np.array([math.factorial(m) / math.prod(math.factorial(int(b)) for b in row) for row in E])


def _power_columns(W: np.ndarray, m: int, with_coef: bool) -> np.ndarray:
    """Columns ``prod_i W[:, i]^{b_i}`` over the compositions of ``m``."""
    N, r = W.shape
    E = _compositions(r, m)
    # powers 0..m of every column, built by repeated products
    pw = np.empty((m + 1, N, r))
    pw[0] = 1.0
    for k in range(1, m + 1):
        np.multiply(pw[k - 1], W, out=pw[k])
    out = pw[E[:, 0], :, 0].T.copy()
    for i in range(1, r):
        out *= pw[E[:, i], :, i].T
    if with_coef:
        out *= _multinomial_cached(r, m)
    return out


@lru_cache(maxsize=None)
def _multinomial_cached(r: int, m: int) -> np.ndarray:
    c = multinomial_coefficients(_compositions(r, m))
    c.setflags(write=False)
    return c


def hadamard_power_generators(U: np.ndarray, V: np.ndarray, m: int):
    """Generators of ``(U V^T)^{o m}``; coefficients sit on the ``U`` side."""
    if m < 1:
        raise ValueError(f"power must be >= 1, got {m}")
    return _power_columns(U, m, True), _power_columns(V, m, False)


def n_compositions(r: int, m: int) -> int:
    return math.comb(r + m - 1, m)


def separability_rank(M: int, r: int, with_offdiag: bool = True) -> int:
    """Column count of the generators of the Wiener output kernel."""
    if M < 1 or r < 1:
        raise ValueError("M and r must be >= 1")
    if with_offdiag:
        return n_compositions(r, M) + 2 * sum(n_compositions(r, m) for m in range(1, M))
    return sum(n_compositions(r, m) for m in range(1, M + 1))


@lru_cache(maxsize=None)
def _layout(r: int, M: int, offdiag: bool):
    """Row plan of the generators: exponents, multinomial factors, scale-row index.

    Scale rows are ``eta_1..eta_{M-1}``, ``psi eta_2..psi eta_M`` and a
    constant row (offdiag), or one constant row per order (diagonal only).
    """
    exps, coefs, scale = [], [], []
    if offdiag:
        for m in range(1, M):
            E = _compositions(r, m)
            c = _multinomial_cached(r, m)
            for idx in (m - 1, M - 1 + m - 1):
                exps.append(E)
                coefs.append(c)
                scale.append(np.full(len(E), idx))
        E = _compositions(r, M)
        exps.append(E)
        coefs.append(_multinomial_cached(r, M))
        scale.append(np.full(len(E), 2 * M - 2))
    else:
        for m in range(1, M + 1):
            E = _compositions(r, m)
            exps.append(E)
            coefs.append(_multinomial_cached(r, m))
            scale.append(np.full(len(E), m - 1))
    out = (np.vstack(exps), np.concatenate(coefs), np.concatenate(scale))
    for x in out:
        x.setflags(write=False)
    return out


def _generators(Wt: np.ndarray, psi: Optional[np.ndarray], a, n_left: int) -> np.ndarray:
    """Generator rows for the stacked time axis ``Wt`` (shape ``r x T``).

    Columns ``< n_left`` belong to the left factor (signs and multinomial
    coefficients), the rest to the right factor.  ``psi`` follows the same
    stacking.  Returns a ``gamma x T`` array.
    """
    a = np.asarray(a, dtype=float)
    M = len(a)
    r, T = Wt.shape
    E, coef, sidx = _layout(r, M, psi is not None)
    # powers 0..M of every factor, laid out (power, factor, time)
    pw = np.empty((M + 1, r, T))
    pw[0] = 1.0
    for k in range(1, M + 1):
        np.multiply(pw[k - 1], Wt, out=pw[k])
    G = pw[E[:, 0], 0]
    for i in range(1, r):
        G *= pw[E[:, i], i]
    if psi is None:
        G[:, :n_left] *= (coef * a[sidx] ** 2)[:, None]
        return G
    S = np.empty((2 * M - 1, T))
    acc = np.zeros(T)
    eta_next = acc
    # eta_m = a_m + psi eta_{m+1}, from the top order down
    for m in range(M, 0, -1):
        eta = a[m - 1] + psi * acc
        if m < M:
            S[m - 1] = eta
            S[M - 1 + m - 1] = psi * eta_next
        eta_next = acc = eta
    S[M - 1:2 * M - 2, :n_left] *= -1.0
    S[2 * M - 2, :n_left] = a[M - 1] ** 2
    S[2 * M - 2, n_left:] = 1.0
    G *= S[sidx]
    G[:, :n_left] *= coef[:, None]
    return G


def left_generators(U: np.ndarray, psi: Optional[np.ndarray], a) -> np.ndarray:
    """``U_bar`` from the time-side factors ``U`` and ``psi = Psi zeta``.

    ``psi=None`` gives the diagonal-only kernel.
    """
    return _generators(U.T, psi, a, U.shape[0]).T


def right_generators(V: np.ndarray, psi: Optional[np.ndarray], a) -> np.ndarray:
    """``V_bar``; signs and coefficients live on the left side only."""
    return _generators(V.T, psi, a, 0).T


def assemble_q_generators(U: np.ndarray, V: np.ndarray, psi: Optional[np.ndarray], a) -> GeneratorPair:
    """Generators ``(U_bar, V_bar)`` of the Wiener output kernel.

    The columns are, for ``m = 1..M-1``, the multinomial columns of
    ``X^{o m}`` scaled by ``eta_m`` and by ``-(psi o eta_{m+1})``, followed
    by ``a_M^2`` times the columns of ``X^{o M}``.
    """
    N = U.shape[0]
    Wt = np.concatenate([U.T, V.T], axis=1)
    ps = None if psi is None else np.concatenate([psi, psi])
    G = _generators(Wt, ps, a, N)
    return GeneratorPair(G[:, :N].T, G[:, N:].T)


# --------------------------------------------------------------------------
# lemma-based solves
# --------------------------------------------------------------------------


@lru_cache(maxsize=256)
def _upper_mask(k: int, g: int) -> np.ndarray:
    m = np.triu(np.ones((k, g)))
    m.setflags(write=False)
    return m


class LowRankSolver:
    """Factorization of ``Q + sigma2 I`` for ``Q = U_bar V_bar^T`` symmetric PSD.

    The generators are projected on an orthonormal basis ``B`` of the column
    space of ``U_bar`` (pivoted QR, numerically dependent columns dropped),
    which contains the range of ``Q``.  Then ``Q = B S B^T`` with a small
    symmetric PSD core ``S`` and

    ``(Q + sigma2 I)^{-1} = B (S + sigma2 I)^{-1} B^T + (I - B B^T) / sigma2``,
    ``log det(Q + sigma2 I) = (N - k) log sigma2 + log det(S + sigma2 I)``.

    This is the inversion/determinant lemma pair with a symmetric core; the
    plain core ``sigma2 I + V_bar^T U_bar`` is nonsymmetric and loses all
    accuracy when generator columns are nearly collinear.
    """

    def __init__(self, gen: GeneratorPair, sigma2: float, rank_tol: float = RANK_TOL):
        if not sigma2 > 0:
            raise ValueError(f"sigma2 must be > 0, got {sigma2}")
        U, V = gen.U_bar, gen.V_bar
        self.N = U.shape[0]
        self.sigma2 = float(sigma2)
        nu = np.sqrt(np.einsum("ij,ij->j", U, U))
        nu[nu == 0] = 1.0
        U = U / nu
        V = V * nu
        self.k = 0
        self.B = np.zeros((self.N, 0))
        self.chol = None
        self.logdet_core = 0.0
        g = U.shape[1]
        if g == 0:
            return
        qr, jpvt, tau, _, info = _geqp3(U, overwrite_a=1)
        d = np.abs(qr.diagonal())
        # the first pivot is the largest; NaN anywhere propagates to it
        if not d[0] < math.inf:
            raise NonFinite("non-finite generators")
        k = int(np.count_nonzero(d > rank_tol * d[0])) if d[0] > 0 else 0
        if k == 0:
            if not np.isfinite(V).all():
                raise NonFinite("non-finite generators")
            return
        # U[:, P] = B R, so B^T U = R P^T
        BtU = np.empty((k, g))
        BtU[:, jpvt - 1] = qr[:k] * _upper_mask(k, g)
        B, _, info = _orgqr(qr[:, :k], tau[:k], overwrite_a=0)
        S = BtU @ (V.T @ B)
        S += S.T
        S *= 0.5
        S.flat[::k + 1] += self.sigma2
        c, info = _potrf(S, lower=1, clean=0)
        dg = c.diagonal()
        lo, hi = dg.min(), dg.max()
        if info != 0 or not (lo < math.inf and hi < math.inf):
            if not np.isfinite(S).all():
                raise NonFinite("non-finite generators")
            raise SingularCore(f"core matrix is not positive definite (info={info})")
        if (lo / hi) ** 2 < RCOND_MIN:
            raise SingularCore(f"core matrix condition estimate {(hi / lo) ** 2:.2e}")
        self.B = B
        self.k = k
        self.chol = c
        self.logdet_core = 2.0 * float(np.log(dg).sum())

    @property
    def gamma(self) -> int:
        """Numerical rank retained from the generators."""
        return self.k

    @property
    def logdet(self) -> float:
        """``log det(Q + sigma2 I)``."""
        return (self.N - self.k) * math.log(self.sigma2) + self.logdet_core

    def solve(self, Y: np.ndarray) -> np.ndarray:
        """``(Q + sigma2 I)^{-1} Y``."""
        Y = np.asarray(Y, dtype=float)
        if self.k == 0:
            return Y / self.sigma2
        z = self.B.T @ Y
        r = Y - self.B @ z
        # second projection: the residual is divided by sigma2, so its
        # round-off inside range(B) must not survive
        dz = self.B.T @ r
        r -= self.B @ dz
        z += dz
        w, _ = _potrs(self.chol, z, lower=1)
        return r / self.sigma2 + self.B @ w

    def quad(self, Y: np.ndarray) -> float:
        """``Y^T (Q + sigma2 I)^{-1} Y`` for a vector ``Y``."""
        Y = np.asarray(Y, dtype=float)
        return float(self.gram(Y[:, None])[0, 0])

    def gram(self, Y: np.ndarray, YtY: Optional[np.ndarray] = None) -> np.ndarray:
        """``Y^T (Q + sigma2 I)^{-1} Y`` for a matrix ``Y``; ``YtY`` may be passed in precomputed."""
        Y = np.asarray(Y, dtype=float)
        if YtY is None:
            YtY = Y.T @ Y
        if self.k == 0:
            return YtY / self.sigma2
        z = self.B.T @ Y
        w, _ = _potrs(self.chol, z, lower=1)
        return (YtY - z.T @ z) / self.sigma2 + z.T @ w


def eb_cost_fast(gen: GeneratorPair, Y_centered, sigma2: float) -> float:
    """``Y^T (Q + sigma2 I)^{-1} Y + log det(Q + sigma2 I)`` with ``Q = U_bar V_bar^T``."""
    Y = np.asarray(Y_centered, dtype=float)
    S = LowRankSolver(gen, sigma2)
    return S.quad(Y) + S.logdet


def predict_fast(U_cross: np.ndarray, gen: GeneratorPair, Y_centered, sigma2: float, h0: float = 0.0,
                 solver: Optional[LowRankSolver] = None) -> np.ndarray:
    """``h0 + U_cross V_bar^T (U_bar V_bar^T + sigma2 I)^{-1} Y``."""
    S = LowRankSolver(gen, sigma2) if solver is None else solver
    alpha = S.solve(np.asarray(Y_centered, dtype=float))
    return h0 + np.atleast_2d(U_cross) @ (gen.V_bar.T @ alpha)
