"""Ground-truth block-oriented systems, input signals and synthetic databanks.

Systems start at rest: before the first sample the input is zero and every
internal signal sits at the value it takes for a zero input.  With that
convention the simulated output equals the truncated Volterra series with
zero pre-window exactly (up to the impulse-response truncation).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import signal

from .errors import ConstraintUnsatisfiable, NonPolynomial, SizeExceeded, ZeroSignal
from .kernels import MAX_DENSE_SIZE

IR_TOL = 1e-10
IR_CAP = 4096


# --------------------------------------------------------------------------
# linear blocks
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LtiSystem:
    """Discrete-time transfer function ``B(q^-1) / A(q^-1)``.

    ``b`` and ``a`` are coefficient vectors in powers of ``q^-1`` with
    ``a[0] = 1``.  ``ir`` is the impulse response truncated after the last
    sample with ``|g| >= 1e-10`` (at most 4096 samples).
    """

    b: tuple
    a: tuple
    ir: np.ndarray = field(repr=False, compare=False, default=None)

    def __post_init__(self):
        b = tuple(float(x) for x in self.b)
        a = tuple(float(x) for x in self.a)
        if not a or a[0] == 0:
            raise ValueError("leading denominator coefficient must be nonzero")
        a0 = a[0]
        b = tuple(x / a0 for x in b)
        a = tuple(x / a0 for x in a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "a", a)
        if np.any(np.abs(self.poles) >= 1):
            raise ValueError("unstable system: pole modulus >= 1")
        if self.ir is None:
            object.__setattr__(self, "ir", _truncated_ir(b, a))

    @classmethod
    def from_zpk(cls, zeros: Sequence[complex], poles: Sequence[complex], gain: float) -> "LtiSystem":
        # polynomials in q^-1: prod (1 - z q^-1)
        b = gain * np.real_if_close(np.poly(zeros)) if len(zeros) else np.array([gain])
        a = np.real_if_close(np.poly(poles)) if len(poles) else np.array([1.0])
        return cls(tuple(np.real(b)), tuple(np.real(a)))

    @classmethod
    def fir(cls, taps: Sequence[float]) -> "LtiSystem":
        return cls(tuple(taps), (1.0,))

    @property
    def poles(self) -> np.ndarray:
        return np.roots(self.a) if len(self.a) > 1 else np.zeros(0, dtype=complex)

    @property
    def zeros(self) -> np.ndarray:
        b = np.trim_zeros(np.array(self.b), "f")
        return np.roots(b) if len(b) > 1 else np.zeros(0, dtype=complex)

    @property
    def gain(self) -> float:
        nz = [x for x in self.b if x != 0]
        return nz[0] if nz else 0.0

    def impulse_response(self, length: Optional[int] = None) -> np.ndarray:
        """``g(0..length-1)``, zero-padded past the truncation point."""
        if length is None:
            return self.ir.copy()
        out = np.zeros(length)
        k = min(length, len(self.ir))
        out[:k] = self.ir[:k]
        return out

    def filter(self, u) -> np.ndarray:
        """Causal response to ``u`` from rest (truncated impulse-response convolution)."""
        u = np.asarray(u, dtype=float)
        if len(u) == 0:
            return u.copy()
        return signal.oaconvolve(u, self.ir)[:len(u)] if len(self.ir) > 64 and len(u) > 64 \
            else np.convolve(u, self.ir)[:len(u)]

    def scaled(self, factor: float) -> "LtiSystem":
        return LtiSystem(tuple(factor * x for x in self.b), self.a)

    def describe(self) -> dict:
        return {"b": list(self.b), "a": list(self.a)}


def _truncated_ir(b, a) -> np.ndarray:
    imp = np.zeros(IR_CAP)
    imp[0] = 1.0
    g = signal.lfilter(b, a, imp)
    big = np.flatnonzero(np.abs(g) >= IR_TOL)
    L = int(big[-1]) + 1 if big.size else 1
    return g[:L]


@dataclass(frozen=True)
class OverdampedSpec:
    """Pin the ``count`` largest poles real positive in ``dominant_range``."""

    count: int = 5
    dominant_range: tuple = (0.7, 0.8)
    other_range: tuple = (0.1, 0.5)


def _conjugate_roots(count: int, modulus_range, rng, real_sign=None) -> list:
    lo, hi = modulus_range
    roots = []
    for _ in range(count // 2):
        r = rng.uniform(lo, hi)
        th = rng.uniform(0.0, math.pi)
        roots += [r * np.exp(1j * th), r * np.exp(-1j * th)]
    if count % 2:
        r = rng.uniform(lo, hi)
        s = 1.0 if real_sign is None else real_sign
        roots.append(complex(s * r))
    return roots


def random_stable_lti(order: int, modulus_range=(0.1, 0.9), overdamped: Optional[OverdampedSpec] = None,
                      rng: Optional[np.random.Generator] = None) -> LtiSystem:
    """Random stable system normalized to unit impulse-response energy.

    Poles come in conjugate pairs with uniform modulus and uniform angle in
    ``(0, pi)``; an odd order adds one real positive pole.  ``order - 1``
    zeros are drawn the same way (a leftover real zero gets a random sign).
    With ``overdamped`` the dominant poles are real positive in the given
    range and the others are drawn from ``overdamped.other_range``.
    """
    if order < 1:
        raise ValueError(f"order must be >= 1, got {order}")
    lo, hi = modulus_range
    if not (0 < lo <= hi < 1):
        raise ValueError(f"modulus range must satisfy 0 < lo <= hi < 1, got {modulus_range}")
    rng = np.random.default_rng() if rng is None else rng
    if overdamped is not None:
        if overdamped.count > order:
            raise ValueError("more dominant poles than the order")
        poles = [complex(rng.uniform(*overdamped.dominant_range)) for _ in range(overdamped.count)]
        poles += _conjugate_roots(order - overdamped.count, overdamped.other_range, rng)
    else:
        poles = _conjugate_roots(order, modulus_range, rng)
    zeros = _conjugate_roots(order - 1, modulus_range, rng, real_sign=float(rng.choice([-1.0, 1.0])))
    sys = LtiSystem.from_zpk(zeros, poles, 1.0)
    norm = float(np.linalg.norm(sys.ir))
    return sys.scaled(1.0 / norm)


# --------------------------------------------------------------------------
# block-oriented systems
# --------------------------------------------------------------------------


def saturation(x):
    """``1`` above 0.5, ``2x`` on ``[-0.5, 0.5)``, ``-1`` below -0.5."""
    x = np.asarray(x, dtype=float)
    return np.where(x >= 0.5, 1.0, np.where(x < -0.5, -1.0, 2.0 * x))


NONLINEARITIES = {"saturation": saturation}


@dataclass(frozen=True)
class WhSystem:
    """``y = G2[phi(G1[u])] + parallel_gain * u``.

    ``phi(z) = sum_m a[m] z^m`` unless ``nl_override`` names a function in
    :data:`NONLINEARITIES`.  ``g2=None`` is the identity (Wiener system).
    """

    g1: LtiSystem
    g2: Optional[LtiSystem]
    a: tuple
    nl_override: Optional[str] = None
    parallel_gain: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "a", tuple(float(x) for x in self.a))
        if self.nl_override is not None and self.nl_override not in NONLINEARITIES:
            raise ValueError(f"unknown nonlinearity {self.nl_override!r}")

    @property
    def M(self) -> int:
        return len(self.a) - 1

    def phi(self, z):
        z = np.asarray(z, dtype=float)
        if self.nl_override is not None:
            return NONLINEARITIES[self.nl_override](z)
        return np.polynomial.polynomial.polyval(z, self.a)

    @property
    def h0(self) -> float:
        """Output at rest."""
        rest = float(self.phi(0.0))
        return rest * (1.0 if self.g2 is None else float(np.sum(self.g2.ir)))

    def describe(self) -> dict:
        return {
            "g1": self.g1.describe(),
            "g2": None if self.g2 is None else self.g2.describe(),
            "a": list(self.a),
            "nl_override": self.nl_override,
            "parallel_gain": self.parallel_gain,
        }

    @classmethod
    def from_description(cls, d: dict) -> "WhSystem":
        g2 = None if d["g2"] is None else LtiSystem(tuple(d["g2"]["b"]), tuple(d["g2"]["a"]))
        return cls(LtiSystem(tuple(d["g1"]["b"]), tuple(d["g1"]["a"])), g2, tuple(d["a"]),
                   d.get("nl_override"), d.get("parallel_gain", 0.0))


def simulate_wh(sys: WhSystem, u) -> np.ndarray:
    """Noise-free output of ``sys`` driven by ``u`` from rest."""
    u = np.asarray(u, dtype=float)
    z = sys.g1.filter(u)
    x = sys.phi(z)
    if sys.g2 is None:
        y = x
    else:
        rest = float(sys.phi(0.0))
        y = rest * float(np.sum(sys.g2.ir)) + sys.g2.filter(x - rest)
    if sys.parallel_gain:
        y = y + sys.parallel_gain * u
    return y


def true_volterra_maps(sys: WhSystem, n: int, M: Optional[int] = None) -> list:
    """Volterra maps ``h_1..h_M`` on lags ``0..n-1``.

    ``h_m(t_1..t_m) = a_m sum_tau g2(tau) prod_i g1(t_i - tau)``; the constant
    term is :attr:`WhSystem.h0`.
    """
    if sys.nl_override is not None:
        raise NonPolynomial("Volterra maps need a polynomial nonlinearity")
    M = sys.M if M is None else M
    if n**M > MAX_DENSE_SIZE:
        raise SizeExceeded(f"n^M = {n}^{M} exceeds {MAX_DENSE_SIZE}")
    g1 = sys.g1.impulse_response(n)
    g2 = np.array([1.0]) if sys.g2 is None else sys.g2.impulse_response(n)
    maps = []
    for m in range(1, M + 1):
        am = sys.a[m] if m < len(sys.a) else 0.0
        h = np.zeros((n,) * m)
        for tau in range(len(g2)):
            if g2[tau] == 0.0:
                continue
            shifted = np.zeros(n)
            shifted[tau:] = g1[:n - tau]
            outer = shifted
            for _ in range(m - 1):
                outer = np.multiply.outer(outer, shifted)
            h += g2[tau] * outer
        h *= am
        if m == 1 and sys.parallel_gain:
            h[0] += sys.parallel_gain
        maps.append(h)
    return maps


def volterra_output(h0: float, maps: Sequence[np.ndarray], u) -> np.ndarray:
    """Truncated Volterra series driven by ``u`` with zero pre-window."""
    u = np.asarray(u, dtype=float)
    N = len(u)
    y = np.full(N, float(h0))
    for h in maps:
        m = h.ndim
        n = h.shape[0]
        padded = np.concatenate([np.zeros(n - 1), u])
        lags = np.lib.stride_tricks.sliding_window_view(padded, n)[:, ::-1]
        # contract one lag axis at a time
        T = np.einsum("tj,j...->t...", lags, h)
        for _ in range(m - 1):
            T = np.einsum("tj,tj...->t...", lags, T)
        y += T
    return y


# --------------------------------------------------------------------------
# inputs and noise
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class WhiteGaussian:
    kind: str = "white_gaussian"


@dataclass(frozen=True)
class Multisine:
    """Equal-amplitude random-phase multisine; ``band`` in units of the Nyquist frequency."""

    band: tuple = (0.0, 1.0)
    n_sines: int = 100
    shaping: Optional[Callable] = field(default=None, compare=False)
    kind: str = "multisine"


@dataclass(frozen=True)
class DecayingCosine:
    lam: float = 0.0003
    omega: float = 0.1
    phi: float = math.pi / 3
    kind: str = "decaying_cosine"


def generate_input(kind, N_total: int, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Input signal of length ``N_total`` (time index ``t = 0..N_total-1``)."""
    rng = np.random.default_rng() if rng is None else rng
    if N_total < 0:
        raise ValueError("N_total must be >= 0")
    if isinstance(kind, WhiteGaussian):
        return rng.standard_normal(N_total)
    if isinstance(kind, DecayingCosine):
        t = np.arange(N_total, dtype=float)
        return np.exp(-kind.lam * t) * np.cos(kind.omega * t + kind.phi)
    if isinstance(kind, Multisine):
        lo, hi = kind.band
        if not (0 <= lo < hi <= 1) or kind.n_sines < 1:
            raise ValueError(f"invalid multisine band {kind.band} or count {kind.n_sines}")
        # bin centres keep clear of DC and Nyquist
        f = lo + (np.arange(kind.n_sines) + 0.5) * (hi - lo) / kind.n_sines
        ph = rng.uniform(0.0, 2 * math.pi, kind.n_sines)
        t = np.arange(N_total, dtype=float)
        u = np.cos(np.multiply.outer(t, math.pi * f) + ph).sum(axis=1)
        if kind.shaping is not None:
            u = np.asarray(kind.shaping(u), dtype=float)
        p = float(np.mean(u**2)) if N_total else 1.0
        return u / math.sqrt(p) if p > 0 else u
    raise ValueError(f"unknown input kind {kind!r}")


def add_noise(y_clean, snr_db: float, rng: Optional[np.random.Generator] = None):
    """White Gaussian noise at ``snr_db``; returns ``(y_noisy, sigma2)``."""
    y_clean = np.asarray(y_clean, dtype=float)
    v = float(np.var(y_clean))
    if not v > 0:
        raise ZeroSignal("clean output has zero variance")
    sigma2 = v / 10 ** (snr_db / 10)
    rng = np.random.default_rng() if rng is None else rng
    return y_clean + math.sqrt(sigma2) * rng.standard_normal(len(y_clean)), sigma2


# --------------------------------------------------------------------------
# databanks
# --------------------------------------------------------------------------


@dataclass
class Dataset:
    """One input/output record split into training (first) and test (rest) parts."""

    u: np.ndarray
    y_noisy: np.ndarray
    y_clean: np.ndarray
    n_train: int
    sigma2_true: float
    snr_db: float
    seed: list
    tag: str
    system: Optional[WhSystem] = None
    input_desc: dict = field(default_factory=dict)
    index: int = 0

    @property
    def n_test(self) -> int:
        return len(self.u) - self.n_train

    @property
    def name(self) -> str:
        return f"{self.tag}-{self.index:04d}"

    def train(self):
        return self.u[:self.n_train], self.y_noisy[:self.n_train]

    def test(self):
        return self.u[self.n_train:], self.y_clean[self.n_train:]

    def realized_snr(self) -> float:
        noise = self.y_noisy - self.y_clean
        return 10 * math.log10(np.var(self.y_clean) / np.var(noise))

    def meta(self) -> dict:
        return {
            "name": self.name,
            "tag": self.tag,
            "index": self.index,
            "seed": self.seed,
            "n_train": self.n_train,
            "n_test": self.n_test,
            "sigma2_true": self.sigma2_true,
            "snr_db": self.snr_db,
            "system": None if self.system is None else self.system.describe(),
            "input": self.input_desc,
        }


def save_dataset(ds: Dataset, root) -> Path:
    """Write ``<root>/<name>/meta.json`` and ``data.csv``."""
    d = Path(root) / ds.name
    d.mkdir(parents=True, exist_ok=True)
    (d / "meta.json").write_text(json.dumps(ds.meta(), indent=2, sort_keys=True) + "\n")
    with open(d / "data.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "u", "y_noisy", "y_clean"])
        for t in range(len(ds.u)):
            w.writerow([t, repr(float(ds.u[t])), repr(float(ds.y_noisy[t])), repr(float(ds.y_clean[t]))])
    return d


def load_dataset(path) -> Dataset:
    d = Path(path)
    meta = json.loads((d / "meta.json").read_text())
    data = np.loadtxt(d / "data.csv", delimiter=",", skiprows=1, ndmin=2)
    system = None if meta.get("system") is None else WhSystem.from_description(meta["system"])
    return Dataset(data[:, 1].copy(), data[:, 2].copy(), data[:, 3].copy(), int(meta["n_train"]),
                   float(meta["sigma2_true"]), float(meta["snr_db"]), meta["seed"], meta["tag"],
                   system, meta.get("input", {}), int(meta.get("index", 0)))


@dataclass(frozen=True)
class D1Like:
    """Fixed system: static gain 2 in parallel with a squared branch through G1, G3 = 1.5 G1 and G2."""

    snr_db: float = 20.0
    tag: str = "d1like"


@dataclass(frozen=True)
class D2Like:
    config: str = "A"
    M: int = 2
    snr_db: float = 10.0
    tag: str = "d2like"

    def __post_init__(self):
        if self.config not in ("A", "B"):
            raise ValueError(f"config must be 'A' or 'B', got {self.config!r}")
        if self.M < 1:
            raise ValueError("M must be >= 1")


@dataclass(frozen=True)
class D3Like:
    noise_var: float = 0.01
    tag: str = "d3like"


@dataclass(frozen=True)
class D4Like:
    order: int = 15
    M: int = 3
    snr_db: float = 10.0
    tag: str = "d4like"


D1_G1 = ((0.0, 0.7568), (1.0, -1.812, 0.8578))
D1_G2 = ((0.0, 1.063), (1.0, -1.706, 0.7491))
D3_A = (-2.67, 2.96, -2.01, 0.914, -0.181, -0.0102)
D3_C = (-0.467, 1.12, -0.925, 0.308, -0.0364, 0.00110)
D4_INPUT = DecayingCosine(0.0003, 0.1, math.pi / 3)
RATIO_RANGE = (0.1, 10.0)
MAX_ATTEMPTS = 1000


def d1_system() -> WhSystem:
    g1 = LtiSystem(*D1_G1)
    g2 = LtiSystem(*D1_G2)
    # G1 u * G3 u = 1.5 (G1 u)^2
    return WhSystem(g1, g2, (0.0, 0.0, 1.5), parallel_gain=2.0)


def d3_system() -> WhSystem:
    g = LtiSystem((0.0,) + D3_C, (1.0,) + D3_A)
    return WhSystem(g, None, (0.0, 1.0), nl_override="saturation")


def _order_contributions(g1: LtiSystem, g2: LtiSystem, a: np.ndarray, u: np.ndarray) -> np.ndarray:
    z = g1.filter(u)
    return np.array([np.var(g2.filter(a[m] * z**m)) for m in range(1, len(a))])


def _balanced_coefficients(g1, g2, M, u, rng) -> np.ndarray:
    for _ in range(MAX_ATTEMPTS):
        a = rng.uniform(-1.0, 1.0, M + 1)
        v = _order_contributions(g1, g2, a, u)
        ratios = v[1:] / v[:-1]
        if np.all((ratios >= RATIO_RANGE[0]) & (ratios <= RATIO_RANGE[1])):
            return a
    raise ConstraintUnsatisfiable(f"no balanced coefficients after {MAX_ATTEMPTS} attempts")


def _seed_list(ss: np.random.SeedSequence) -> list:
    return [int(ss.entropy)] + [int(k) for k in ss.spawn_key]


def build_databank(which, count: int, N_train: int, seed: int = 0) -> list:
    """Synthetic datasets; dataset ``i`` uses its own counter-based stream.

    Test parts are five times the training length, except for
    :class:`D3Like` where they have equal length.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if N_train < 1:
        raise ValueError(f"N_train must be >= 1, got {N_train}")
    children = np.random.SeedSequence(seed).spawn(count)
    out = []
    for i, ss in enumerate(children):
        rng = np.random.Generator(np.random.Philox(ss))
        n_test = N_train if isinstance(which, D3Like) else 5 * N_train
        T = N_train + n_test
        if isinstance(which, D1Like):
            sys = d1_system()
            kind = Multisine((0.0, 1.0), 100)
            u = generate_input(kind, T, rng)
            desc = {"kind": "multisine", "band": [0.0, 1.0], "n_sines": 100}
            snr = which.snr_db
        elif isinstance(which, D2Like):
            u = generate_input(WhiteGaussian(), T, rng)
            if which.config == "A":
                g1 = random_stable_lti(30, (0.1, 0.9), rng=rng)
                g2 = random_stable_lti(30, (0.1, 0.9), rng=rng)
                a = np.concatenate([[0.0], rng.uniform(-1.0, 1.0, which.M)])
            else:
                g1 = random_stable_lti(15, (0.1, 0.9), OverdampedSpec(5, (0.7, 0.8), (0.1, 0.5)), rng=rng)
                g2 = random_stable_lti(30, (0.1, 0.9), rng=rng)
                a = _balanced_coefficients(g1, g2, which.M, u[:N_train], rng)
                a[0] = 0.0
            sys = WhSystem(g1, g2, tuple(a))
            desc = {"kind": "white_gaussian"}
            snr = which.snr_db
        elif isinstance(which, D3Like):
            sys = d3_system()
            u = generate_input(WhiteGaussian(), T, rng)
            desc = {"kind": "white_gaussian"}
            snr = None
        elif isinstance(which, D4Like):
            g1 = random_stable_lti(which.order, (0.1, 0.9), rng=rng)
            a = np.concatenate([[0.0], rng.uniform(-1.0, 1.0, which.M)])
            sys = WhSystem(g1, None, tuple(a))
            u = generate_input(D4_INPUT, T, rng)
            desc = {"kind": "decaying_cosine", "lam": D4_INPUT.lam, "omega": D4_INPUT.omega, "phi": D4_INPUT.phi}
            snr = which.snr_db
        else:
            raise ValueError(f"unknown databank {which!r}")
        y = simulate_wh(sys, u)
        if snr is None:
            s2 = which.noise_var
            y_noisy = y + math.sqrt(s2) * rng.standard_normal(T)
            snr = 10 * math.log10(np.var(y) / s2)
        else:
            y_noisy, s2 = add_noise(y, snr, rng)
        tag = which.tag + which.config.lower() if isinstance(which, D2Like) else which.tag
        out.append(Dataset(u, y_noisy, y, N_train, s2, snr, _seed_list(ss), tag, sys, desc, i))
    return out
