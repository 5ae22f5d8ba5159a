"""Command-line interface: ``volterra-krm <command> [--config FILE] [flags]``.

Every command reads its options from an optional TOML file (keys at the top
level or in a table named after the command) and then from flags, which
win.  Unknown keys are rejected before any work starts.

Exit codes: 0 success, 2 configuration error, 3 input/output error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path
from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from . import __version__
from .errors import VolterraKrmError
from .estimator import VARIANTS, FitConfig, FitData, FitPath, OptimizerConfig, fit, model_from_hyper, predict
from .metrics import (FitRecord, FitReport, benchmark_timing, dataset_separable, hyper_from_dict,
                      hyper_to_dict, pfit, run_monte_carlo)
from .output_kernel import InitPolicy
from .simulator import D1Like, D2Like, D3Like, D4Like, build_databank, load_dataset, save_dataset

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

OUT_ENV = "VOLTERRA_KRM_OUT"
DEFAULT_OUT = "volterra_out"

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

Bank = Literal["d1like", "d2like", "d3like", "d4like"]
Policy = Literal["trim_to_known", "pre_window_zero"]


class ConfigError(Exception):
    pass


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


def _check_variant(v: str) -> str:
    if v not in VARIANTS:
        raise ValueError(f"unknown variant {v!r}; expected one of {sorted(VARIANTS)}")
    return v


class SimulateConfig(_Section):
    bank: Bank = "d4like"
    bank_config: Literal["A", "B"] = Field("A", description="D2-like system recipe")
    M: Optional[int] = Field(None, ge=1, description="polynomial degree (d2like, d4like)")
    snr_db: Optional[float] = Field(None, description="signal-to-noise ratio; bank default when unset")
    count: int = Field(5, ge=1)
    n_train: int = Field(300, ge=1)
    seed: int = 0
    out: Optional[str] = None


class FitCommandConfig(_Section):
    dataset: str
    variant: str = "dc-decay-w"
    M: int = Field(2, ge=1)
    n: int = Field(50, ge=1)
    path: Literal["dense", "fast"] = "dense"
    policy: Policy = "trim_to_known"
    restarts: int = Field(5, ge=1)
    max_iters: int = Field(2000, ge=1)
    seed: int = 0
    out: Optional[str] = None

    _variant = field_validator("variant")(_check_variant)


class PredictConfig(_Section):
    model: str
    dataset: Optional[str] = Field(None, description="defaults to the dataset the model was fitted on")
    out: Optional[str] = None


class BenchmarkConfig(_Section):
    bank: Literal["d4like"] = "d4like"
    N: List[int] = Field(default_factory=lambda: [1000, 2000, 4000, 8000])
    variants: List[str] = Field(default_factory=lambda: ["dc-bd-w", "dc-decay-w", "dc-ob-w"])
    repetitions: int = Field(7, ge=1)
    n: int = Field(50, ge=1)
    M: int = Field(3, ge=1)
    seed: int = 0
    out: Optional[str] = None

    @field_validator("N")
    @classmethod
    def _ascending(cls, v):
        if not v or any(x < 1 for x in v) or any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("N must be a nonempty strictly ascending list of positive integers")
        return v

    @field_validator("variants")
    @classmethod
    def _variants(cls, v):
        for item in v:
            name, _, path = item.partition(":")
            _check_variant(name)
            if path not in ("", "dense", "fast"):
                raise ValueError(f"unknown path suffix in {item!r}")
        return v


class ReportConfig(_Section):
    bank: Bank = "d2like"
    bank_config: Literal["A", "B"] = "B"
    count: int = Field(20, ge=1)
    n_train: int = Field(300, ge=1)
    snr_db: Optional[float] = None
    variants: List[str] = Field(default_factory=lambda: ["dc-ob", "dc-bd", "dc-bd-w"])
    M: int = Field(2, ge=1)
    n: int = Field(50, ge=1)
    policy: Policy = "pre_window_zero"
    restarts: int = Field(5, ge=1)
    max_iters: int = Field(2000, ge=1)
    seed: int = 0
    jobs: Optional[int] = Field(None, ge=1, description="worker processes; all available when unset")
    out: Optional[str] = None

    @field_validator("variants")
    @classmethod
    def _variants(cls, v):
        if not v:
            raise ValueError("at least one variant is needed")
        return [_check_variant(x) for x in v]


COMMANDS = {
    "simulate": SimulateConfig,
    "fit": FitCommandConfig,
    "predict": PredictConfig,
    "benchmark": BenchmarkConfig,
    "report": ReportConfig,
}

LIST_FIELDS = {"N": int, "variants": str}


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_options(p: argparse.ArgumentParser, model: type) -> None:
    p.add_argument("--config", help="TOML file with default values for the options below")
    for name, f in model.model_fields.items():
        default = "required" if f.is_required() else (
            f.default_factory() if f.default_factory is not None else f.default)
        text = (f.description + "; " if f.description else "") + f"default: {default}"
        p.add_argument(_flag(name), dest=name, default=None, help=text)


def _parse_list(raw: str, kind):
    items = [x.strip() for x in str(raw).split(",") if x.strip()]
    try:
        return [kind(x) for x in items]
    except ValueError as exc:
        raise ConfigError(f"cannot parse list {raw!r}: {exc}") from exc


def load_config(command: str, ns: argparse.Namespace):
    """Merge file values and flag overrides and validate them."""
    model = COMMANDS[command]
    values = {}
    if ns.config:
        try:
            with open(ns.config, "rb") as fh:
                raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{ns.config}: {exc}") from exc
        if command in raw and isinstance(raw[command], dict):
            others = {k for k in raw if k != command}
            if others:
                raise ConfigError(f"{ns.config}: unexpected keys next to [{command}]: {sorted(others)}")
            raw = raw[command]
        values.update(raw)
    for name in model.model_fields:
        v = getattr(ns, name, None)
        if v is None:
            continue
        values[name] = _parse_list(v, LIST_FIELDS[name]) if name in LIST_FIELDS else v
    try:
        return model.model_validate(values)
    except ValidationError as exc:
        lines = []
        for e in exc.errors():
            loc = ".".join(str(x) for x in e["loc"]) or "<root>"
            lines.append(f"{loc}: {e['msg']}")
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(lines)) from exc


def output_root(cfg_out: Optional[str], command: str) -> Path:
    if cfg_out:
        return Path(cfg_out)
    return Path(os.environ.get(OUT_ENV, DEFAULT_OUT)) / command


def reference_markdown() -> str:
    """Option reference for every command (used for the docs page)."""
    out = ["# Command reference", ""]
    for cmd, model in COMMANDS.items():
        out += [f"## `{cmd}`", "", "| option | default | notes |", "|---|---|---|"]
        for name, f in model.model_fields.items():
            default = "required" if f.is_required() else (
                f.default_factory() if f.default_factory is not None else f.default)
            out.append(f"| `{_flag(name)}` | `{default}` | {f.description or ''} |")
        out.append("")
    return "\n".join(out)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def _bank(name: str, bank_config: str = "A", M: Optional[int] = None, snr_db: Optional[float] = None):
    if name == "d1like":
        return D1Like() if snr_db is None else D1Like(snr_db=snr_db)
    if name == "d2like":
        kw = {"config": bank_config}
        if M is not None:
            kw["M"] = M
        if snr_db is not None:
            kw["snr_db"] = snr_db
        return D2Like(**kw)
    if name == "d3like":
        return D3Like()
    kw = {}
    if M is not None:
        kw["M"] = M
    if snr_db is not None:
        kw["snr_db"] = snr_db
    return D4Like(**kw)


def cmd_simulate(cfg: SimulateConfig) -> int:
    out = output_root(cfg.out, "simulate")
    bank = _bank(cfg.bank, cfg.bank_config, cfg.M, cfg.snr_db)
    datasets = build_databank(bank, cfg.count, cfg.n_train, seed=cfg.seed)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for ds in datasets:
        save_dataset(ds, out)
        entries.append({"name": ds.name, "n_train": ds.n_train, "n_test": ds.n_test,
                        "snr_db": ds.snr_db, "sigma2_true": ds.sigma2_true})
    manifest = {"bank": cfg.bank, "seed": cfg.seed, "count": cfg.count, "datasets": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(datasets)} datasets to {out}")
    return EXIT_OK


def _fit_config(variant, M, n, path, policy, restarts, max_iters, seed) -> FitConfig:
    return FitConfig(variant=variant, M=M, n=n, path=FitPath(path), init_policy=InitPolicy(policy),
                     optimizer=OptimizerConfig(restarts=restarts, max_iters=max_iters), seed=seed)


def _append_report(out: Path, rec: FitRecord) -> None:
    p = out / "report.json"
    report = FitReport.from_json(p.read_text()) if p.exists() else FitReport()
    report.records = [r for r in report.records if (r.dataset, r.variant) != (rec.dataset, rec.variant)]
    report.records.append(rec)
    report.save(out)


def cmd_fit(cfg: FitCommandConfig) -> int:
    ds = load_dataset(cfg.dataset)
    try:
        fc = _fit_config(cfg.variant, cfg.M, cfg.n, cfg.path, cfg.policy, cfg.restarts, cfg.max_iters, cfg.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    u_tr, y_tr = ds.train()
    sep = dataset_separable(ds, cfg.n) if fc.path == FitPath.FAST else None
    if fc.path == FitPath.FAST and sep is None:
        raise ConfigError("path 'fast' needs a dataset with a separable (decaying cosine) input")
    model = fit(FitData(u_tr, y_tr, sep), fc)
    u_te, y_te = ds.test()
    y_hat = predict(model, u_te, u_history=u_tr)
    score = pfit(y_te[len(y_te) - len(y_hat):], y_hat)
    out = output_root(cfg.out, "fit")
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "dataset": str(Path(cfg.dataset).resolve()),
        "variant": cfg.variant,
        "seed": cfg.seed,
        "policy": cfg.policy,
        "path_requested": cfg.path,
        "path_used": model.path_used.value,
        "cost": model.cost,
        "hyper": hyper_to_dict(model.hyper),
        "pfit": score,
        "fit_seconds": model.fit_seconds,
    }
    (out / "model.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    _append_report(out, FitRecord(ds.name, cfg.variant, score, cost=model.cost, path=model.path_used.value,
                                  hyper=doc["hyper"], fit_seconds=model.fit_seconds))
    print(f"{ds.name} {cfg.variant}: PFit {score:.2f}  EB cost {model.cost:.6g}  ({model.path_used.value} path)")
    return EXIT_OK


def cmd_predict(cfg: PredictConfig) -> int:
    doc = json.loads(Path(cfg.model).read_text())
    try:
        h = hyper_from_dict(doc["hyper"])
        ds = load_dataset(cfg.dataset or doc["dataset"])
        policy = InitPolicy(doc["policy"])
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"{cfg.model}: malformed model file ({exc})") from exc
    u_tr, y_tr = ds.train()
    path = FitPath(doc.get("path_used", "dense"))
    sep = dataset_separable(ds, h.n) if path == FitPath.FAST else None
    model = model_from_hyper(h, FitData(u_tr, y_tr, sep), path, policy, profile_h0=False,
                             variant=doc.get("variant"))
    u_te, y_te = ds.test()
    y_hat = predict(model, u_te, u_history=u_tr)
    offset = ds.n_train + len(u_te) - len(y_hat)
    out = output_root(cfg.out, "predict")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "y_hat", "y_clean"])
        for i, v in enumerate(y_hat):
            w.writerow([offset + i, repr(float(v)), repr(float(ds.y_clean[offset + i]))])
    score = pfit(y_te[len(y_te) - len(y_hat):], y_hat)
    print(f"{ds.name}: PFit {score:.2f} on {len(y_hat)} test samples")
    return EXIT_OK


def cmd_benchmark(cfg: BenchmarkConfig) -> int:
    table = benchmark_timing(cfg.N, cfg.variants, repetitions=cfg.repetitions, n=cfg.n, M=cfg.M,
                             seed=cfg.seed)
    out = output_root(cfg.out, "benchmark")
    table.save(out)
    print(f"{'variant':<20}{'N':>8}{'median_s':>14}")
    for v, N, t in table.rows:
        print(f"{v:<20}{N:>8}{t:>14.6e}")
    for v, s in table.slopes.items():
        print(f"slope {v}: {s:.3f}")
    return EXIT_OK


def cmd_report(cfg: ReportConfig) -> int:
    bank = _bank(cfg.bank, cfg.bank_config, cfg.M, cfg.snr_db)
    datasets = build_databank(bank, cfg.count, cfg.n_train, seed=cfg.seed)
    base = _fit_config(cfg.variants[0], cfg.M, cfg.n, "dense", cfg.policy, cfg.restarts, cfg.max_iters, cfg.seed)
    jobs = cfg.jobs or os.cpu_count() or 1
    report = run_monte_carlo(datasets, cfg.variants, base, n_jobs=jobs)
    out = output_root(cfg.out, "report")
    report.save(out)
    agg = report.aggregate()
    print(f"{'variant':<14}{'mean PFit':>11}{'median':>9}{'failed':>8}")
    for v in report.variants():
        a = agg[v]["pfit"]
        mean = "nan" if a["mean"] is None else f"{a['mean']:.2f}"
        med = "nan" if a["median"] is None else f"{a['median']:.2f}"
        print(f"{v:<14}{mean:>11}{med:>9}{agg[v]['failures']:>8}")
    return EXIT_OK


HANDLERS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "benchmark": cmd_benchmark,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="volterra-krm", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    helps = {
        "simulate": "generate a synthetic databank",
        "fit": "fit a kernel variant to one dataset",
        "predict": "predict the test split of a dataset with a saved model",
        "benchmark": "time EB-cost evaluations over a range of N",
        "report": "Monte Carlo comparison of kernel variants on a databank",
    }
    for name, model in COMMANDS.items():
        sp = sub.add_parser(name, help=helps[name], description=helps[name])
        _add_options(sp, model)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    try:
        cfg = load_config(ns.command, ns)
        return HANDLERS[ns.command](cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except VolterraKrmError as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
