"""Fit percentages, Monte Carlo harness and EB-cost timing benchmark."""

from __future__ import annotations

import csv
import gc
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DegenerateReference, VolterraKrmError
from .estimator import (VARIANTS, FitConfig, FitData, FitPath, decompose_wiener, eb_objective, fit,
                        predict)
from .kernels import DcParams, KernelHyper
from .separable import InputFamily, SeparableInputDesc, separate_input
from .simulator import (D4_INPUT, Dataset, WhSystem, add_noise, generate_input, random_stable_lti,
                        simulate_wh)

NFIT_GRID = np.round(np.arange(-150, 151) * 0.01, 2)


def _fit_percent(ref, est) -> float:
    ref = np.asarray(ref, dtype=float).ravel()
    est = np.asarray(est, dtype=float).ravel()
    if ref.shape != est.shape:
        raise ValueError(f"length mismatch: {ref.shape[0]} vs {est.shape[0]}")
    spread = float(np.linalg.norm(ref - ref.mean()))
    if spread == 0.0:
        raise DegenerateReference("reference is constant")
    return 100.0 * (1.0 - float(np.linalg.norm(ref - est)) / spread)


def pfit(y_true_clean, y_hat) -> float:
    """Prediction fit ``100 (1 - |y - y_hat| / |y - mean(y)|)`` in percent."""
    return _fit_percent(y_true_clean, y_hat)


def gfit(g_true, g_hat) -> float:
    """Impulse-response fit in percent (same formula as :func:`pfit`)."""
    return _fit_percent(g_true, g_hat)


def nfit(nl_true: Callable, nl_hat: Callable) -> float:
    """Nonlinearity fit in percent on 301 evenly spaced points of ``[-1.5, 1.5]``."""
    return _fit_percent(nl_true(NFIT_GRID), nl_hat(NFIT_GRID))


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------


@dataclass
class FitRecord:
    dataset: str
    variant: str
    pfit: float
    gfit: Optional[float] = None
    nfit: Optional[float] = None
    cost: Optional[float] = None
    path: Optional[str] = None
    hyper: Optional[dict] = None
    fit_seconds: Optional[float] = None
    predict_seconds: Optional[float] = None
    error: Optional[str] = None

    TIMING_FIELDS = ("fit_seconds", "predict_seconds")


def hyper_to_dict(h: KernelHyper) -> dict:
    return {
        "a": list(h.a),
        "k1": asdict(h.k1),
        "k2": None if h.k2 is None else asdict(h.k2),
        "n": h.n,
        "zeta_variant": None if h.zeta_variant is None else h.zeta_variant.value,
        "sigma2": h.sigma2,
        "h0": h.h0,
        "n_basis": h.n_basis,
    }


def hyper_from_dict(d: dict) -> KernelHyper:
    return KernelHyper(a=tuple(d["a"]), k1=DcParams(**d["k1"]), n=int(d["n"]),
                       k2=None if d["k2"] is None else DcParams(**d["k2"]),
                       zeta_variant=d["zeta_variant"], sigma2=float(d["sigma2"]), h0=float(d["h0"]),
                       n_basis=int(d["n_basis"]))


def _summary(values) -> dict:
    v = np.array([x for x in values if x is not None and math.isfinite(x)], dtype=float)
    if v.size == 0:
        return {"count": 0, "mean": None, "median": None, "q1": None, "q3": None}
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return {"count": int(v.size), "mean": float(v.mean()), "median": float(med), "q1": float(q1), "q3": float(q3)}


@dataclass
class FitReport:
    """Per-(dataset, variant) records plus per-variant aggregates.

    Failed pairs carry ``pfit = NaN`` and an error message; they are
    left out of the aggregates and counted under ``failures``.
    """

    records: list = field(default_factory=list)

    def variants(self) -> list:
        seen = []
        for r in self.records:
            if r.variant not in seen:
                seen.append(r.variant)
        return seen

    def aggregate(self) -> dict:
        out = {}
        for v in self.variants():
            rs = [r for r in self.records if r.variant == v]
            out[v] = {
                "failures": sum(1 for r in rs if r.error is not None or not math.isfinite(r.pfit)),
                "pfit": _summary(r.pfit for r in rs),
                "gfit": _summary(r.gfit for r in rs),
                "nfit": _summary(r.nfit for r in rs),
            }
        return out

    def mean(self, variant: str, metric: str = "pfit") -> float:
        m = self.aggregate()[variant][metric]["mean"]
        return math.nan if m is None else m

    def _rows(self, include_timings: bool) -> list:
        rows = []
        for r in self.records:
            d = asdict(r)
            if not include_timings:
                for k in FitRecord.TIMING_FIELDS:
                    d.pop(k)
            rows.append(d)
        return rows

    def to_json(self, include_timings: bool = True) -> str:
        payload = {"records": self._rows(include_timings), "aggregate": self.aggregate()}
        return json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n"

    def to_csv(self, include_timings: bool = True) -> str:
        cols = ["dataset", "variant", "pfit", "gfit", "nfit", "cost", "path"]
        if include_timings:
            cols += list(FitRecord.TIMING_FIELDS)
        cols.append("error")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for d in self._rows(include_timings):
            w.writerow(["" if d[c] is None else d[c] for c in cols])
        return buf.getvalue()

    def save(self, directory, include_timings: bool = True) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "report.json").write_text(self.to_json(include_timings))
        (d / "report.csv").write_text(self.to_csv(include_timings))
        return d

    @classmethod
    def from_json(cls, text: str) -> "FitReport":
        payload = json.loads(text)
        recs = []
        for d in payload["records"]:
            d = {k: (math.nan if k == "pfit" and v is None else v) for k, v in d.items()}
            recs.append(FitRecord(**d))
        return cls(recs)


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, np.floating):
        return _jsonable(float(x))
    if isinstance(x, np.integer):
        return int(x)
    return x


# --------------------------------------------------------------------------
# Monte Carlo harness
# --------------------------------------------------------------------------


def dataset_separable(ds: Dataset, n: int) -> Optional[SeparableInputDesc]:
    """Separable description of a dataset's training input, when it has one."""
    inp = ds.input_desc
    if inp.get("kind") != "decaying_cosine":
        return None
    N = ds.n_train - n + 1
    if N < 1:
        return None
    return separate_input(InputFamily.DAMPED_SINUSOID, N, n, t_start=n - 1,
                          lam=inp["lam"], omega=inp["omega"], phi=inp["phi"])


def _is_wiener_truth(sys: Optional[WhSystem]) -> bool:
    return sys is not None and sys.g2 is None and sys.parallel_gain == 0.0


def fit_dataset(ds: Dataset, label: str, cfg: FitConfig, anchor_index: Optional[int] = None) -> FitRecord:
    """Fit one dataset with one configuration and score it; failures become NaN records."""
    try:
        u_tr, y_tr = ds.train()
        sep = dataset_separable(ds, cfg.n) if cfg.path == FitPath.FAST else None
        model = fit(FitData(u_tr, y_tr, sep), cfg)
        t0 = time.perf_counter()
        u_te, y_te = ds.test()
        y_hat = predict(model, u_te, u_history=u_tr)
        t_pred = time.perf_counter() - t0
        rec = FitRecord(ds.name, label, pfit(y_te[len(y_te) - len(y_hat):], y_hat), cost=model.cost,
                        path=model.path_used.value, hyper=hyper_to_dict(model.hyper),
                        fit_seconds=model.fit_seconds, predict_seconds=t_pred)
        if _is_wiener_truth(ds.system) and not cfg.has_k2:
            g_true = ds.system.g1.impulse_response(cfg.n)
            idx = int(np.flatnonzero(g_true)[0]) if anchor_index is None else anchor_index
            dec = decompose_wiener(model, float(g_true[idx]), anchor_index=idx)
            rec.gfit = gfit(g_true, dec.g_hat)
            rec.nfit = nfit(ds.system.phi, dec.nl_hat)
        return rec
    except (VolterraKrmError, ValueError, np.linalg.LinAlgError, FloatingPointError) as exc:
        return FitRecord(ds.name, label, math.nan, error=f"{type(exc).__name__}: {exc}")


def _pair_seed(base: int, index: int) -> int:
    return int(np.random.SeedSequence([base, index]).generate_state(1)[0])


def _run_pair(args):
    ds, label, cfg, anchor_index = args
    return fit_dataset(ds, label, cfg, anchor_index)


def run_monte_carlo(datasets: Sequence[Dataset], variants, cfg: FitConfig, n_jobs: int = 1,
                    anchor_index: Optional[int] = None) -> FitReport:
    """Fit every (dataset, variant) pair and collect the scores.

    Parameters
    ----------
    datasets : sequence of Dataset
    variants : sequence
        Variant names from :data:`VARIANTS` or ``(label, FitConfig)`` pairs.
        A name replaces ``cfg.variant``; the fitting path falls back to
        dense for variants with a second linear block.
    cfg : FitConfig
        Base configuration.  Each dataset gets the seed derived from
        ``(cfg.seed, dataset.index)`` so results do not depend on ordering.
    n_jobs : int
        Worker processes; ``1`` runs inline.
    """
    if not datasets:
        raise ValueError("no datasets")
    if not variants:
        raise ValueError("no variants")
    jobs = []
    for ds in datasets:
        seed = _pair_seed(cfg.seed, ds.index)
        for v in variants:
            if isinstance(v, str):
                if v not in VARIANTS:
                    raise ValueError(f"unknown variant {v!r}")
                path = cfg.path if not VARIANTS[v][0] else FitPath.DENSE
                label, c = v, replace(cfg, variant=v, path=path, seed=seed)
            else:
                label, c = v
                c = replace(c, seed=seed)
            jobs.append((ds, label, c, anchor_index))
    if n_jobs == 1:
        recs = [_run_pair(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=n_jobs) as ex:
            recs = list(ex.map(_run_pair, jobs))
    return FitReport(recs)


# --------------------------------------------------------------------------
# timing
# --------------------------------------------------------------------------


@dataclass
class TimingTable:
    """Median seconds per EB-cost evaluation, per variant and N."""

    rows: list  # (variant, N, median_s)
    slopes: dict

    def medians(self, variant: str) -> dict:
        return {N: t for v, N, t in self.rows if v == variant}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["variant", "N", "median_s", "slope"])
        for v, N, t in self.rows:
            w.writerow([v, N, f"{t:.6e}", f"{self.slopes[v]:.4f}"])
        return buf.getvalue()

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        p = d / "timings.csv"
        p.write_text(self.to_csv())
        return p


def loglog_slope(N_list, times) -> float:
    return float(np.polyfit(np.log(np.asarray(N_list, float)), np.log(np.asarray(times, float)), 1)[0])


def _parse_variant(spec: str):
    name, _, path = spec.partition(":")
    if name not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}")
    if not path:
        path = FitPath.DENSE.value if VARIANTS[name][0] else FitPath.FAST.value
    return name, FitPath(path)


def benchmark_data(N_max: int, n: int = 50, M: int = 3, seed: int = 0, snr_db: float = 10.0) -> tuple:
    """Decaying-cosine input through a random order-15 Wiener system, ``N_max`` outputs after trimming."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    g1 = random_stable_lti(15, (0.1, 0.9), rng=rng)
    a = np.concatenate([[0.0], rng.uniform(-1.0, 1.0, M)])
    T = N_max + n - 1
    u = generate_input(D4_INPUT, T, rng)
    y, _ = add_noise(simulate_wh(WhSystem(g1, None, tuple(a)), u), snr_db, rng)
    return u, y


def benchmark_timing(N_list, variants=("dc-bd-w", "dc-decay-w", "dc-ob-w"), repetitions: int = 7,
                     n: int = 50, M: int = 3, seed: int = 0, warmup: int = 2,
                     min_batch_seconds: float = 0.02, log: Optional[Callable] = None) -> TimingTable:
    """Median wall time of one EB-cost evaluation for each variant and N.

    Parameters
    ----------
    N_list : sequence of int
        Ascending numbers of training outputs.
    variants : sequence of str
        Variant names, optionally suffixed ``:dense`` or ``:fast``; the
        default path is fast for Wiener variants and dense otherwise.
    repetitions : int
        Timed repetitions per (variant, N).  Each repetition runs enough
        back-to-back evaluations to last ``min_batch_seconds`` and records
        their mean; the table holds the median over repetitions.  The N
        values are interleaved within each repetition so slow drifts of
        the machine affect all of them alike.
    """
    N_list = [int(N) for N in N_list]
    if any(b <= a for a, b in zip(N_list, N_list[1:])):
        raise ValueError("N_list must be strictly ascending")
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    specs = [(v, *_parse_variant(v)) for v in variants]
    # room for the lead rows of variants with a second block
    u, y = benchmark_data(N_list[-1] + n - 1, n, M, seed)
    alpha = math.log(10.0) / n
    cases = {}
    for label, name, path in specs:
        has_k2, zv = VARIANTS[name]
        h = KernelHyper(a=tuple([1.0] * M), k1=DcParams(1.0, alpha, alpha), n=n,
                        k2=DcParams(1.0, alpha, alpha) if has_k2 else None, zeta_variant=zv,
                        sigma2=0.1 * float(np.var(y)))
        lead = n - 1 if has_k2 else 0
        for N in N_list:
            T = N + n - 1 + lead
            sep = None
            if path == FitPath.FAST:
                sep = separate_input(InputFamily.DAMPED_SINUSOID, N, n, t_start=n - 1 + lead,
                                     lam=D4_INPUT.lam, omega=D4_INPUT.omega, phi=D4_INPUT.phi)
            data = FitData(u[:T], y[:T], sep)
            call = (lambda h=h, data=data, path=path: eb_objective(h, data, path))
            for _ in range(max(1, warmup)):
                t0 = time.perf_counter()
                call()
                single = time.perf_counter() - t0
            cases[(label, N)] = (call, max(1, math.ceil(min_batch_seconds / max(single, 1e-9))))
    samples = {k: [] for k in cases}
    # like timeit: no garbage collection inside timed batches
    gc_was_enabled = gc.isenabled()
    gc.disable()
    try:
        for _ in range(repetitions):
            for label, _, _ in specs:
                for N in N_list:
                    call, batch = cases[(label, N)]
                    t0 = time.perf_counter()
                    for _ in range(batch):
                        call()
                    samples[(label, N)].append((time.perf_counter() - t0) / batch)
            gc.collect()
    finally:
        if gc_was_enabled:
            gc.enable()
    rows, slopes = [], {}
    for label, _, _ in specs:
        meds = [float(np.median(samples[(label, N)])) for N in N_list]
        rows += [(label, N, t) for N, t in zip(N_list, meds)]
        slopes[label] = loglog_slope(N_list, meds) if len(N_list) > 1 else math.nan
        if log is not None:
            log(f"{label}: " + ", ".join(f"N={N} {t * 1e3:.3f} ms" for N, t in zip(N_list, meds))
                + f"; slope {slopes[label]:.3f}")
    return TimingTable(rows, slopes)
