"""Empirical Bayes tuning, regularized prediction and post-fit extraction.

The EB cost of a hyperparameter set is

    (Y - h0)^T (Q + sigma2 I)^{-1} (Y - h0) + log det(Q + sigma2 I)

with ``h0`` profiled out as the generalized least-squares mean.  Two
evaluation paths are available: ``dense`` builds ``Q`` explicitly and uses a
Cholesky factorization; ``fast`` works with the low-rank generators of ``Q``
for separable inputs and Wiener structures.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property, lru_cache
from typing import Optional

import numpy as np
import scipy.linalg
from scipy.optimize import minimize

from .errors import (AllRestartsFailed, DegenerateFirstOrder, NonFinite,
                     SeparationCheckFailed, SingularCore, SizeExceeded)
from .kernels import MAX_DENSE_SIZE, DcParams, KernelHyper, ZetaVariant, zeta_vector
from .output_kernel import (InitPolicy, RegressorMatrix, build_cross_q, build_regressor,
                            kernel_pieces, output_kernel)
from .separable import (GeneratorPair, LowRankSolver, SeparableInputDesc, _generators, dc_quadratic_form,
                        left_generators, separability_rank)

BETA_SHIFT = 1e-6

# name -> (second linear block present, zeta variant)
VARIANTS = {
    "dc-bd": (True, None),
    "dc-decay": (True, ZetaVariant.EXP_DECAY),
    "dc-ob": (True, ZetaVariant.ORTHO_BASIS),
    "dc-bd-w": (False, None),
    "dc-decay-w": (False, ZetaVariant.EXP_DECAY),
    "dc-ob-w": (False, ZetaVariant.ORTHO_BASIS),
}


class FitPath(str, Enum):
    DENSE = "dense"
    FAST = "fast"


@dataclass(frozen=True)
class OptimizerConfig:
    """Multi-start Nelder-Mead settings; ``sigma2_rel_bounds`` are relative to ``var(Y)``."""

    restarts: int = 5
    max_iters: int = 2000
    tol_cost: float = 1e-6
    alpha_bounds: tuple = (1e-4, 2.0)
    beta_bounds: tuple = (0.0, 2.0)
    sigma2_rel_bounds: tuple = (1e-8, 1e2)
    a_max: float = 1e3
    scale_bounds: tuple = (1e-3, 1e3)

    def __post_init__(self):
        if self.restarts < 1:
            raise ValueError(f"restarts must be >= 1, got {self.restarts}")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")
        for name in ("alpha_bounds", "beta_bounds", "sigma2_rel_bounds", "scale_bounds"):
            lo, hi = getattr(self, name)
            if not (np.isfinite(lo) and np.isfinite(hi) and lo <= hi):
                raise ValueError(f"{name} must be finite with lo <= hi, got {(lo, hi)}")
        if not (self.alpha_bounds[0] > 0 and self.sigma2_rel_bounds[0] > 0 and self.scale_bounds[0] > 0):
            raise ValueError("lower bounds of alpha, sigma2 and scales must be positive")
        if not (np.isfinite(self.a_max) and self.a_max > 0):
            raise ValueError(f"a_max must be finite and positive, got {self.a_max}")


@dataclass(frozen=True)
class FitConfig:
    """What to fit and how.

    Parameters
    ----------
    variant : str
        One of :data:`VARIANTS`.  The ``-w`` variants drop the second linear
        block (Wiener structure); ``bd`` keeps only diagonal blocks, ``decay``
        and ``ob`` couple orders through an exponential or eigenfunction
        based ``zeta``.
    M, n : int
        Volterra order and memory length of each linear block.
    path : FitPath
        ``fast`` requires a Wiener variant and a separable training input;
        it silently falls back to ``dense`` when the generator rank exceeds N.
    fit_scales : bool
        Also tune the kernel scales ``c1`` (and ``c2``), which are otherwise
        fixed to 1 because the polynomial coefficients absorb them.
    """

    variant: str = "dc-decay-w"
    M: int = 2
    n: int = 50
    path: FitPath = FitPath.DENSE
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    init_policy: InitPolicy = InitPolicy.TRIM_TO_KNOWN
    n_basis: int = 100
    seed: int = 0
    fit_scales: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {sorted(VARIANTS)}")
        object.__setattr__(self, "path", FitPath(self.path))
        object.__setattr__(self, "init_policy", InitPolicy(self.init_policy))
        if self.M < 1 or self.n < 1:
            raise ValueError("M and n must be >= 1")
        if self.path == FitPath.FAST and VARIANTS[self.variant][0]:
            raise ValueError("the fast path needs a Wiener variant (name ending in -w)")

    @property
    def has_k2(self) -> bool:
        return VARIANTS[self.variant][0]

    @property
    def zeta_variant(self) -> Optional[ZetaVariant]:
        return VARIANTS[self.variant][1]


@dataclass
class FitData:
    """Training records: input ``u`` and output ``y`` sampled at the same times.

    ``separable`` describes ``u`` for the fast path (time index = position
    in ``u``).
    """

    u: np.ndarray
    y: np.ndarray
    separable: Optional[SeparableInputDesc] = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=float).ravel()
        self.y = np.asarray(self.y, dtype=float).ravel()
        if len(self.u) == 0:
            raise ValueError("empty training data")
        if self.u.shape != self.y.shape:
            raise ValueError(f"u and y lengths differ: {len(self.u)} vs {len(self.y)}")

    def prepared(self, n: int, lead: int, policy: InitPolicy) -> "_Prepared":
        key = (n, lead, InitPolicy(policy))
        if key not in self._cache:
            self._cache[key] = _Prepared.build(self, n, lead, InitPolicy(policy))
        return self._cache[key]


@dataclass
class _Prepared:
    """Data-dependent pieces shared by every objective evaluation."""

    reg: RegressorMatrix
    Y: np.ndarray
    y_shift: float
    var_y: float
    times: np.ndarray
    U0: Optional[np.ndarray] = None
    H: Optional[np.ndarray] = None

    @classmethod
    def build(cls, data: FitData, n: int, lead: int, policy: InitPolicy) -> "_Prepared":
        reg = build_regressor(data.u, n, policy, lead=lead)
        Y = data.y[reg.start:]
        times = np.arange(reg.start, reg.start + reg.n_outputs)
        U0 = H = None
        if data.separable is not None and lead == 0 and policy == InitPolicy.TRIM_TO_KNOWN:
            try:
                data.separable.check(times, n)
                U0 = data.separable.pi(times)
                H = data.separable.rho(np.arange(n))
            except SeparationCheckFailed:
                U0 = H = None
        shift = float(np.mean(Y))
        return cls(reg, Y - shift, shift, float(np.var(Y)), times, U0, H)

    @property
    def N(self) -> int:
        return len(self.Y)

    @cached_property
    def Ye(self) -> np.ndarray:
        """``[Y, 1]`` as a two-column right-hand side."""
        return np.column_stack([self.Y, np.ones(len(self.Y))])

    @cached_property
    def YeGram(self) -> np.ndarray:
        return self.Ye.T @ self.Ye

    @cached_property
    def U0T(self) -> np.ndarray:
        return np.ascontiguousarray(self.U0.T)


@dataclass
class _Evaluation:
    cost: float
    h0: float
    path: FitPath
    solver: object
    prep: "_Prepared" = field(repr=False)
    gen: Optional[GeneratorPair] = None

    @cached_property
    def weights(self) -> np.ndarray:
        """``(Q + sigma2 I)^{-1} (Y - h0)`` on the training outputs."""
        if self.path == FitPath.FAST:
            Z = self.solver.solve(self.prep.Ye)
        else:
            Z = scipy.linalg.cho_solve(self.solver, self.prep.Ye, check_finite=False)
        return Z[:, 0] - (self.h0 - self.prep.y_shift) * Z[:, 1]


def _fast_generators(h: KernelHyper, prep: _Prepared) -> GeneratorPair:
    N = prep.N
    HtKH = dc_quadratic_form(h.k1, prep.H)
    U0T = prep.U0T
    # time axis of the left factor U0 stacked with that of V = U0 H^T K1 H
    Wt = np.concatenate([U0T, HtKH.T @ U0T], axis=1)
    zv = zeta_vector(h.n, h.zeta)
    psi = None
    if zv is not None:
        p = (prep.H.T @ zv) @ U0T
        psi = np.concatenate([p, p])
    G = _generators(Wt, psi, h.a, N)
    return GeneratorPair(G[:, :N].T, G[:, N:].T)


def _fast_applicable(h: KernelHyper, prep: _Prepared) -> bool:
    if h.k2 is not None or prep.U0 is None:
        return False
    return _rank(h.M, prep.U0.shape[1], h.zeta is not None) <= prep.N


_rank = lru_cache(maxsize=None)(separability_rank)


def _evaluate(h: KernelHyper, prep: _Prepared, path: FitPath, profile_h0: bool = True) -> _Evaluation:
    N = prep.N
    s2 = h.sigma2
    if path == FitPath.FAST and _fast_applicable(h, prep):
        gen = _fast_generators(h, prep)
        solver = LowRankSolver(gen, s2)
        G = solver.gram(prep.Ye, prep.YeGram)
        logdet = solver.logdet
        used = FitPath.FAST
    else:
        gen = None
        Q = output_kernel(prep.reg, h)
        Q[np.diag_indices(N)] += s2
        try:
            solver = scipy.linalg.cho_factor(Q, lower=True, overwrite_a=True, check_finite=False)
        except np.linalg.LinAlgError as exc:
            raise SingularCore(f"Q + sigma2 I is not positive definite: {exc}") from exc
        G = prep.Ye.T @ scipy.linalg.cho_solve(solver, prep.Ye, check_finite=False)
        logdet = 2.0 * float(np.sum(np.log(np.diag(solver[0]))))
        used = FitPath.DENSE
    # G = [Y, e]^T A [Y, e] with A = (Q + sigma2 I)^{-1}
    yAy, eAy, eAe = float(G[0, 0]), 0.5 * float(G[0, 1] + G[1, 0]), float(G[1, 1])
    d = eAy / eAe if profile_h0 else h.h0 - prep.y_shift
    cost = yAy - 2.0 * d * eAy + d * d * eAe + logdet
    if not math.isfinite(cost):
        raise NonFinite(f"EB cost is {cost}")
    return _Evaluation(cost, d + prep.y_shift, used, solver, prep, gen)


def _prep_for(h: KernelHyper, data: FitData, policy: InitPolicy) -> _Prepared:
    return data.prepared(h.n, 0 if h.k2 is None else h.n - 1, policy)


def eb_objective(h: KernelHyper, data: FitData, path: FitPath | str = FitPath.DENSE,
                 policy: InitPolicy | str = InitPolicy.TRIM_TO_KNOWN, profile_h0: bool = True) -> float:
    """EB cost of ``h`` on ``data``.

    With ``profile_h0`` the mean ``h0`` is replaced by its closed-form
    optimum; otherwise ``h.h0`` is used as given.
    """
    prep = _prep_for(h, data, InitPolicy(policy))
    return _evaluate(h, prep, FitPath(path), profile_h0).cost


def profiled_h0(h: KernelHyper, data: FitData, path: FitPath | str = FitPath.DENSE,
                policy: InitPolicy | str = InitPolicy.TRIM_TO_KNOWN) -> float:
    """Closed-form minimizer of the EB cost over ``h0``."""
    prep = _prep_for(h, data, InitPolicy(policy))
    return _evaluate(h, prep, FitPath(path)).h0


# --------------------------------------------------------------------------
# parametrization
# --------------------------------------------------------------------------


class _Codec:
    """Map between ``KernelHyper`` and the unconstrained-ish optimizer vector."""

    def __init__(self, cfg: FitConfig, var_y: float):
        self.cfg = cfg
        o = cfg.optimizer
        self.var_y = var_y if var_y > 0 else 1.0
        la = (math.log(o.alpha_bounds[0]), math.log(o.alpha_bounds[1]))
        lb = (math.log(o.beta_bounds[0] + BETA_SHIFT), math.log(o.beta_bounds[1] + BETA_SHIFT))
        ls = (math.log(o.sigma2_rel_bounds[0] * self.var_y), math.log(o.sigma2_rel_bounds[1] * self.var_y))
        lc = (math.log(o.scale_bounds[0]), math.log(o.scale_bounds[1]))
        bounds = [la, lb]
        if cfg.has_k2:
            bounds += [la, lb]
        bounds.append(ls)
        bounds += [(-o.a_max, o.a_max)] * cfg.M
        if cfg.fit_scales:
            bounds += [lc] * (2 if cfg.has_k2 else 1)
        self.bounds = bounds
        # entries treated on a log scale
        self.n_log = 5 if cfg.has_k2 else 3

    def decode(self, x: np.ndarray) -> KernelHyper:
        cfg = self.cfg
        i = 0
        c1 = c2 = 1.0
        if cfg.fit_scales:
            c1 = math.exp(x[self.n_log + cfg.M])
            if cfg.has_k2:
                c2 = math.exp(x[self.n_log + cfg.M + 1])
        k1 = DcParams(c1, math.exp(x[0]), max(math.exp(x[1]) - BETA_SHIFT, 0.0))
        i = 2
        k2 = None
        if cfg.has_k2:
            k2 = DcParams(c2, math.exp(x[2]), max(math.exp(x[3]) - BETA_SHIFT, 0.0))
            i = 4
        sigma2 = math.exp(x[i])
        a = tuple(float(v) for v in x[i + 1:i + 1 + cfg.M])
        return KernelHyper(a=a, k1=k1, n=cfg.n, k2=k2, zeta_variant=cfg.zeta_variant,
                           sigma2=sigma2, n_basis=cfg.n_basis)

    def encode(self, h: KernelHyper) -> np.ndarray:
        x = [math.log(h.k1.alpha), math.log(h.k1.beta + BETA_SHIFT)]
        if self.cfg.has_k2:
            x += [math.log(h.k2.alpha), math.log(h.k2.beta + BETA_SHIFT)]
        x.append(math.log(h.sigma2))
        x += list(h.a)
        if self.cfg.fit_scales:
            x.append(math.log(h.k1.c))
            if self.cfg.has_k2:
                x.append(math.log(h.k2.c))
        return self.clip(np.array(x))

    def clip(self, x: np.ndarray) -> np.ndarray:
        lo = np.array([b[0] for b in self.bounds])
        hi = np.array([b[1] for b in self.bounds])
        return np.clip(x, lo, hi)


def _kernel_diag_mean(h: KernelHyper, prep: _Prepared, path: FitPath) -> float:
    if path == FitPath.FAST and _fast_applicable(h, prep):
        g = _fast_generators(h, prep)
        return float(np.mean(np.einsum("ij,ij->i", g.U_bar, g.V_bar)))
    return float(np.mean(np.diag(output_kernel(prep.reg, h))))


def _initial_hyper(cfg: FitConfig, prep: _Prepared, codec: _Codec, rng: np.random.Generator,
                   restart: int) -> KernelHyper:
    o = cfg.optimizer
    # decay to 10% over the memory window
    alpha0 = math.log(10.0) / cfg.n
    alpha0 = min(max(alpha0, o.alpha_bounds[0]), o.alpha_bounds[1])
    beta0 = min(max(alpha0, o.beta_bounds[0]), o.beta_bounds[1])
    k1 = DcParams(1.0, alpha0, beta0)
    k2 = None
    if cfg.has_k2:
        # restart 0 starts the second block near a delta, i.e. at the Wiener
        # special case, so the richer model begins where the simpler one would
        k2 = DcParams(1.0, o.alpha_bounds[1], o.beta_bounds[1]) if restart == 0 else DcParams(1.0, alpha0, beta0)
    signs = np.ones(cfg.M) if restart == 0 else rng.choice([-1.0, 1.0], size=cfg.M)
    h = KernelHyper(a=tuple(signs), k1=k1, n=cfg.n, k2=k2, zeta_variant=cfg.zeta_variant,
                    sigma2=0.1 * codec.var_y, n_basis=cfg.n_basis)
    x = codec.encode(h)
    if restart > 0:
        nl = codec.n_log
        x[:nl] += rng.standard_normal(nl)
        x[nl:nl + cfg.M] *= np.exp(rng.standard_normal(cfg.M))
        x = codec.clip(x)
    h = codec.decode(x)
    # each order gets its own share 2^-p of the prior output variance; a joint
    # rescale would let the high-degree monomials crowd out the low orders
    a = np.array(h.a)
    share = 0.5 ** np.arange(1, cfg.M + 1)
    share *= 0.9 * codec.var_y / share.sum()
    for p in range(cfg.M):
        unit = np.zeros(cfg.M)
        unit[p] = 1.0
        dm = _kernel_diag_mean(h.with_(a=tuple(unit)), prep, cfg.path)
        if dm > 0 and math.isfinite(dm):
            a[p] *= math.sqrt(share[p] / dm)
    return h.with_(a=tuple(np.clip(a, -o.a_max, o.a_max)))


# --------------------------------------------------------------------------
# fitting
# --------------------------------------------------------------------------


@dataclass
class RestartRecord:
    restart: int
    init_cost: float
    final_cost: float
    n_evals: int
    converged: bool


@dataclass
class FittedModel:
    """Immutable result of :func:`fit`."""

    hyper: KernelHyper
    cost: float
    config: FitConfig
    data: FitData
    path_used: FitPath
    restarts: list
    fit_seconds: float
    _eval: _Evaluation = field(repr=False, default=None)

    @property
    def prepared(self) -> _Prepared:
        return _prep_for(self.hyper, self.data, self.config.init_policy)

    @property
    def weights(self) -> np.ndarray:
        """``(Q + sigma2 I)^{-1} (Y - h0)`` on the training outputs."""
        return self._eval.weights

    def refresh_cost(self) -> float:
        """Recompute the EB cost at the optimum from scratch."""
        return _evaluate(self.hyper, self.prepared, self.path_used, profile_h0=False).cost


def fit(data: FitData, cfg: FitConfig) -> FittedModel:
    """Tune the hyperparameters of ``cfg.variant`` on ``data`` by EB."""
    t_start = time.perf_counter()
    lead = cfg.n - 1 if cfg.has_k2 else 0
    prep = data.prepared(cfg.n, lead, cfg.init_policy)
    if prep.N < 1:
        raise ValueError("no usable training outputs")
    path = cfg.path
    if path == FitPath.FAST and prep.U0 is None:
        raise SeparationCheckFailed("the fast path needs a verified separable description of the input")
    codec = _Codec(cfg, prep.var_y)
    seq = np.random.SeedSequence(cfg.seed)

    def objective(x):
        try:
            return _evaluate(codec.decode(x), prep, path).cost
        except (NonFinite, SingularCore, ValueError, FloatingPointError, np.linalg.LinAlgError):
            return math.inf

    best_x, best_cost = None, math.inf
    records = []
    for k in range(cfg.optimizer.restarts):
        # child k depends only on (seed, k): adding restarts never changes earlier ones
        rng = np.random.default_rng(np.random.SeedSequence(seq.entropy, spawn_key=(k,)))
        try:
            with np.errstate(all="ignore"):
                h_init = _initial_hyper(cfg, prep, codec, rng, k)
            x0 = codec.encode(h_init)
        except (NonFinite, SingularCore, ValueError, FloatingPointError):
            records.append(RestartRecord(k, math.inf, math.inf, 0, False))
            continue
        with np.errstate(all="ignore"):
            c0 = objective(x0)
        if not math.isfinite(c0):
            records.append(RestartRecord(k, math.inf, math.inf, 1, False))
            continue
        with np.errstate(all="ignore"):
            res = minimize(objective, x0, method="Nelder-Mead", bounds=codec.bounds,
                           options={"maxiter": cfg.optimizer.max_iters, "fatol": cfg.optimizer.tol_cost,
                                    "xatol": 1e-6, "adaptive": True})
        fx = float(res.fun) if math.isfinite(res.fun) and res.fun <= c0 else c0
        xk = res.x if fx < c0 else x0
        records.append(RestartRecord(k, c0, fx, int(res.nfev), bool(res.success)))
        if fx < best_cost:
            best_cost, best_x = fx, xk
    if best_x is None:
        raise AllRestartsFailed(f"all {cfg.optimizer.restarts} restarts failed at initialization")
    h = codec.decode(best_x)
    ev = _evaluate(h, prep, path)
    h = h.with_(h0=ev.h0)
    return FittedModel(h, ev.cost, cfg, data, ev.path, records, time.perf_counter() - t_start, ev)


def model_from_hyper(h: KernelHyper, data: FitData, path: FitPath | str = FitPath.DENSE,
                     policy: InitPolicy | str = InitPolicy.TRIM_TO_KNOWN, profile_h0: bool = True,
                     variant: Optional[str] = None) -> FittedModel:
    """Condition the kernel ``h`` on ``data`` without tuning (e.g. a saved optimum)."""
    policy = InitPolicy(policy)
    prep = _prep_for(h, data, policy)
    ev = _evaluate(h, prep, FitPath(path), profile_h0)
    h = h.with_(h0=ev.h0)
    if variant is None:
        variant = next(k for k, v in VARIANTS.items() if v == (h.k2 is not None, h.zeta_variant))
    cfg = FitConfig(variant=variant, M=h.M, n=h.n, path=FitPath(path) if h.k2 is None else FitPath.DENSE,
                    init_policy=policy, n_basis=h.n_basis)
    return FittedModel(h, ev.cost, cfg, data, ev.path, [], 0.0, ev)


# --------------------------------------------------------------------------
# prediction and extraction
# --------------------------------------------------------------------------


def predict(model: FittedModel, u_test, u_history=None,
            separable: Optional[SeparableInputDesc] = None) -> np.ndarray:
    """Predicted outputs for the input ``u_test``.

    Parameters
    ----------
    u_test : array_like
        Test input.
    u_history : array_like, optional
        Inputs immediately preceding ``u_test`` (for instance the training
        input when the test data continue the same record).  They supply the
        initial lags and no prediction is returned for them.
    separable : SeparableInputDesc, optional
        Description of the concatenated ``[u_history, u_test]`` record; with a
        model fitted on the fast path it lets the cross kernel be formed from
        generators.

    Returns
    -------
    ndarray
        One prediction per sample of ``u_test`` whose lags are available
        under the model's initial-condition policy (all of them with
        ``PRE_WINDOW_ZERO`` or enough history; otherwise the first
        ``n - 1`` (plus ``n - 1`` with a second block) samples are skipped).
    """
    h = model.hyper
    prep = model.prepared
    u_test = np.asarray(u_test, dtype=float).ravel()
    hist = np.zeros(0) if u_history is None else np.asarray(u_history, dtype=float).ravel()
    u_all = np.concatenate([hist, u_test])
    lead = prep.reg.lead
    reg = build_regressor(u_all, h.n, model.config.init_policy, lead=lead)
    # drop outputs that belong to the history
    skip = max(0, len(hist) - reg.start)
    w = model.weights
    desc = separable if separable is not None else model.data.separable
    if model._eval.gen is not None and desc is not None and prep.H is not None:
        times = np.arange(reg.start + skip, reg.start + reg.n_outputs)
        Hs = desc.rho(np.arange(h.n))
        try:
            if Hs.shape != prep.H.shape or not np.allclose(Hs, prep.H, rtol=1e-14, atol=0):
                raise SeparationCheckFailed("lag factors differ from the training description")
            desc.check(times, h.n)
            Ut = desc.pi(times)
            zv = zeta_vector(h.n, h.zeta)
            psi = None if zv is None else Ut @ (Hs.T @ zv)
            Ubar = left_generators(Ut, psi, h.a)
            return h.h0 + Ubar @ (model._eval.gen.V_bar.T @ w)
        except SeparationCheckFailed:
            pass
    K1, zv, K2 = kernel_pieces(h)
    test_rows = RegressorMatrix(reg.psi[skip:], reg.init_policy, reg.t_offset + skip, lead)
    out = np.empty(test_rows.n_outputs)
    # blocks keep the cross kernel memory bounded
    step = max(1, 4_000_000 // max(1, prep.reg.psi.shape[0]))
    for i0 in range(0, test_rows.n_outputs, step):
        i1 = min(test_rows.n_outputs, i0 + step)
        rows = RegressorMatrix(test_rows.psi[i0:i1 + lead], reg.init_policy, 0, lead)
        Qc = build_cross_q(rows, prep.reg, K1, K2, zv, h.a)
        out[i0:i1] = h.h0 + Qc @ w
    return out


def _wiener_functional(m: int, h: KernelHyper, psi: np.ndarray, weights: np.ndarray,
                       K1: np.ndarray, zv: Optional[np.ndarray]) -> np.ndarray:
    """``sum_r sum_q P^w_{mq} phi_q(row r) weights[r]`` for all multi-indices (m <= 2)."""
    a = h.a
    M = h.M
    B = K1 @ psi.T  # (n, R)
    v = None if zv is None else psi @ zv
    if m == 1:
        w = a[0] ** 2 * weights
        if v is not None:
            w = w + sum(a[0] * a[q - 1] * v ** (q - 1) * weights for q in range(2, M + 1))
        return B @ w
    if m == 2:
        if M < 2:
            return np.zeros((h.n, h.n))
        w = a[1] ** 2 * weights
        if v is not None:
            w = w + sum(a[1] * a[q - 1] * v ** (q - 2) * weights for q in range(3, M + 1))
        out = (B * w) @ B.T
        if v is not None:
            out += a[1] * a[0] * np.outer(B @ weights, zv)
        return out
    raise ValueError(f"map extraction is limited to orders 1 and 2, got {m}")


def extract_map(model: FittedModel, m: int) -> np.ndarray:
    """Posterior-mean estimate of the order-``m`` Volterra map (``m`` in 1, 2).

    Returns an ``m``-way array over lags ``0..L-1`` with ``L = n`` for Wiener
    variants and ``L = 2n - 1`` with a second linear block.
    """
    if m not in (1, 2):
        raise ValueError(f"map extraction is limited to orders 1 and 2, got {m}")
    h = model.hyper
    if m > h.M:
        return np.zeros((h.volterra_memory,) * m)
    L = h.volterra_memory
    if L**m > MAX_DENSE_SIZE:
        raise SizeExceeded(f"L^m = {L}^{m} exceeds {MAX_DENSE_SIZE}")
    prep = model.prepared
    psi = prep.reg.psi
    K1, zv, K2 = kernel_pieces(h)
    alpha = model.weights
    if K2 is None:
        return _wiener_functional(m, h, psi, alpha, K1, zv)
    n, lead, R = h.n, prep.reg.lead, psi.shape[0]
    # W[x2, r] = alpha[r - lead + x2], zero outside the outputs
    A = np.zeros((n, R))
    for x2 in range(n):
        lo = max(0, lead - x2)
        hi = min(R, lead - x2 + len(alpha))
        A[x2, lo:hi] = alpha[lo - lead + x2:hi - lead + x2]
    W = K2 @ A
    out = np.zeros((L,) * m)
    for x1 in range(n):
        T = _wiener_functional(m, h, psi, W[x1], K1, zv)
        if m == 1:
            out[x1:x1 + n] += T
        else:
            out[x1:x1 + n, x1:x1 + n] += T
    return out


@dataclass
class WienerDecomposition:
    g_hat: np.ndarray
    nl_hat: np.polynomial.Polynomial
    anchor_index: int


def decompose_wiener(model: FittedModel, g_anchor: float, anchor_index: Optional[int] = None,
                     threshold: float = 1e-3) -> WienerDecomposition:
    """Split a fitted Wiener model into a linear block and a polynomial.

    ``g_hat`` is the first-order map rescaled so that its value at the
    anchor equals ``g_anchor``.  The anchor is ``anchor_index`` when given,
    else the first lag with ``|h1| > threshold * max|h1|``.  The polynomial
    (degree ``M``, with constant term) is the least-squares fit of the
    training outputs on powers of ``x = g_hat * u``.
    """
    h = model.hyper
    if h.k2 is not None:
        raise ValueError("decompose_wiener needs a Wiener variant (no second linear block)")
    h1 = extract_map(model, 1)
    peak = float(np.max(np.abs(h1)))
    if anchor_index is None:
        idx = np.flatnonzero(np.abs(h1) > threshold * peak) if peak > 0 else np.array([], dtype=int)
        if idx.size == 0:
            raise DegenerateFirstOrder("first-order map is identically zero")
        t0 = int(idx[0])
    else:
        t0 = int(anchor_index)
        if not (0 <= t0 < len(h1)):
            raise ValueError(f"anchor_index {t0} outside 0..{len(h1) - 1}")
        if not abs(h1[t0]) > threshold * peak or peak == 0:
            raise DegenerateFirstOrder(f"first-order map is negligible at lag {t0}")
    g = h1 * (g_anchor / h1[t0])
    prep = model.prepared
    x = prep.reg.outputs @ g
    y = prep.Y + prep.y_shift
    V = np.vander(x, h.M + 1, increasing=True)
    coef, *_ = np.linalg.lstsq(V, y, rcond=None)
    return WienerDecomposition(g, np.polynomial.Polynomial(coef), t0)
