"""Evaluation harness: rank correlation of proxies against benchmark accuracy.

Accuracy is always external input (nothing here trains a model); bench files
are JSON-lines with an `arch` string and an `accuracy` percentage per line.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import hardware
from .hardware import LatencyTable
from .proxies import ProxyConfig, count_linear_regions, ntk_kappa
from .space import CellArch, MacroConfig, parse_arch
from .util import derive_seed

__all__ = [
    "BenchRecord",
    "TauReport",
    "ReportEntry",
    "BenchFormatError",
    "AllTiedError",
    "kendall_tau",
    "load_bench",
    "tau_sweep",
    "compare_report",
    "PROXY_NAMES",
]

PROXY_NAMES = ("kappa", "lr", "flops", "latency", "combined")


class BenchFormatError(ValueError):
    """Bench file line is malformed; the message carries the line number."""


class AllTiedError(ValueError):
    """Kendall tau is undefined when one side is entirely tied."""


@dataclass(frozen=True)
class BenchRecord:
    arch: str
    accuracy: float


@dataclass(frozen=True)
class TauReport:
    proxy: str
    axis: str
    axis_values: tuple[float, ...]
    taus: tuple[float, ...]
    sample_size: int
    seed: int

    def to_dicts(self) -> list[dict]:
        return [
            {
                "proxy": self.proxy,
                "axis": self.axis,
                "axis_value": v,
                "tau": t,
                "sample_size": self.sample_size,
                "seed": self.seed,
            }
            for v, t in zip(self.axis_values, self.taus)
        ]

    def to_text(self) -> str:
        lines = [f"{'proxy':<10} {self.axis:>12} {'tau':>9} {'n':>6}"]
        for v, t in zip(self.axis_values, self.taus):
            lines.append(f"{self.proxy:<10} {v:>12g} {t:>9.4f} {self.sample_size:>6}")
        return "\n".join(lines)


def kendall_tau(a, b) -> float:
    """Tie-adjusted tau-b from exact integer pair counts.

    tau = (C - D) / sqrt((C + D + Ta) * (C + D + Tb)) where Ta / Tb count
    pairs tied only in a / only in b. Comparison-based, so infinities are
    handled without arithmetic on the values.
    """
    av = np.asarray(a, dtype=np.float64)
    bv = np.asarray(b, dtype=np.float64)
    if av.ndim != 1 or bv.ndim != 1 or av.shape != bv.shape:
        raise ValueError(f"need two equal-length vectors, got {av.shape} and {bv.shape}")
    n = av.shape[0]
    if n < 2:
        raise ValueError("need at least 2 observations")
    gt_a = av[:, None] > av[None, :]
    gt_b = bv[:, None] > bv[None, :]
    eq_a = av[:, None] == av[None, :]
    eq_b = bv[:, None] == bv[None, :]
    upper = np.triu(np.ones((n, n), dtype=bool), 1)
    concordant = int((((gt_a & gt_b) | (gt_a.T & gt_b.T)) & upper).sum())
    discordant = int((((gt_a & gt_b.T) | (gt_a.T & gt_b)) & upper).sum())
    tied_a_only = int(((eq_a & ~eq_b) & upper).sum())
    tied_b_only = int(((eq_b & ~eq_a) & upper).sum())
    total = n * (n - 1) // 2
    if int((eq_a & upper).sum()) == total:
        raise AllTiedError("first vector is entirely tied")
    if int((eq_b & upper).sum()) == total:
        raise AllTiedError("second vector is entirely tied")
    denom = math.sqrt(
        (concordant + discordant + tied_a_only) * (concordant + discordant + tied_b_only)
    )
    return (concordant - discordant) / denom


def load_bench(path: str) -> list[BenchRecord]:
    """Read and validate a JSON-lines bench file."""
    records: list[BenchRecord] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise BenchFormatError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            if not isinstance(obj, dict) or "arch" not in obj or "accuracy" not in obj:
                raise BenchFormatError(f"{path}:{lineno}: need 'arch' and 'accuracy' fields")
            arch = obj["arch"]
            try:
                parse_arch(arch)
            except ValueError as exc:
                raise BenchFormatError(f"{path}:{lineno}: {exc}") from exc
            acc = obj["accuracy"]
            if not isinstance(acc, (int, float)) or not 0.0 <= float(acc) <= 100.0:
                raise BenchFormatError(
                    f"{path}:{lineno}: accuracy {acc!r} outside [0, 100]"
                )
            if arch in seen:
                raise BenchFormatError(f"{path}:{lineno}: duplicate arch {arch}")
            seen.add(arch)
            records.append(BenchRecord(arch=arch, accuracy=float(acc)))
    return records


def _proxy_values(
    archs: list[CellArch],
    proxy: str,
    m: MacroConfig,
    cfg: ProxyConfig,
    lut: LatencyTable | None,
    threads: int,
    weights: tuple[float, float, float, float],
) -> np.ndarray:
    """Per-arch proxy score, oriented so that higher should mean better accuracy."""

    def one(metric: str):
        def fn(a: CellArch) -> float:
            if metric == "kappa":
                return ntk_kappa(a, m, cfg)[0]
            if metric == "lr":
                return float(count_linear_regions(a, m, cfg))
            if metric == "flops":
                return float(hardware.count_flops(a, m).flops)
            return hardware.estimate_latency(a, m, lut).latency_us

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                return np.array(list(pool.map(fn, archs)))
        return np.array([fn(a) for a in archs])

    if proxy == "kappa":
        return -one("kappa")  # lower condition number is better
    if proxy == "lr":
        return one("lr")
    if proxy == "flops":
        return one("flops")
    if proxy == "latency":
        if lut is None:
            raise ValueError("latency proxy needs a latency table")
        return one("latency")
    if proxy == "combined":
        w_k, w_r, w_f, w_l = weights
        columns = [(one("kappa"), False, w_k), (one("lr"), True, w_r), (one("flops"), False, w_f)]
        if w_l > 0:
            if lut is None:
                raise ValueError("combined proxy with w_latency > 0 needs a latency table")
            columns.append((one("latency"), False, w_l))
        score = np.zeros(len(archs))
        for values, descending, weight in columns:
            order = np.argsort(-values if descending else values, kind="stable")
            ranks = np.empty(len(archs))
            ranks[order] = np.arange(1, len(archs) + 1)
            score += weight * ranks
        return -score  # low rank-sum is better
    raise ValueError(f"unknown proxy {proxy!r}; expected one of {PROXY_NAMES}")


def tau_sweep(
    records: list[BenchRecord],
    proxy: str,
    axis: str,
    axis_values,
    m: MacroConfig,
    cfg: ProxyConfig,
    lut: LatencyTable | None = None,
    sample: int = 500,
    threads: int = 1,
    weights: tuple[float, float, float, float] = (1.0, 1.0, 0.0, 0.0),
) -> TauReport:
    """Kendall tau of a proxy against accuracy per axis value.

    axis is "batch_size" or "repeats"; kappa is negated before correlating
    so every proxy reads higher-is-better.
    """
    if len(records) < 2:
        raise ValueError("need at least 2 bench records")
    if axis not in ("batch_size", "repeats"):
        raise ValueError(f"axis must be batch_size or repeats, got {axis!r}")
    if sample < len(records):
        rng = np.random.default_rng(derive_seed(cfg.seed, "tau-sample"))
        idx = sorted(rng.choice(len(records), size=sample, replace=False))
        records = [records[i] for i in idx]
    archs = [parse_arch(r.arch) for r in records]
    acc = np.array([r.accuracy for r in records])
    taus = []
    for value in axis_values:
        cfg_v = replace(cfg, **{("batch_size" if axis == "batch_size" else "ntk_repeats"): int(value)})
        scores = _proxy_values(archs, proxy, m, cfg_v, lut, threads, weights)
        taus.append(kendall_tau(scores, acc))
    return TauReport(
        proxy=proxy,
        axis=axis,
        axis_values=tuple(float(v) for v in axis_values),
        taus=tuple(taus),
        sample_size=len(records),
        seed=cfg.seed,
    )


@dataclass(frozen=True)
class ReportEntry:
    """One comparison row; computed fields fill in when an arch is given."""

    label: str
    arch: str | None = None
    flops_m: float | None = None
    params_m: float | None = None
    latency_us: float | None = None
    search_time_h: float | None = None
    acc: float | None = None


def _fmt(value, pattern: str) -> str:
    return pattern.format(value) if value is not None else "-"


def compare_report(
    entries: list[ReportEntry],
    m: MacroConfig,
    lut: LatencyTable | None = None,
    baseline: str | None = None,
) -> tuple[str, list[dict]]:
    """Aligned comparison table plus JSON-ready rows.

    Speedup is baseline latency over row latency; accuracy is rendered
    verbatim from the input, never computed.
    """
    rows: list[dict] = []
    for entry in entries:
        flops_m, params_m, latency = entry.flops_m, entry.params_m, entry.latency_us
        if entry.arch is not None:
            arch = parse_arch(entry.arch)
            breakdown = (
                hardware.estimate_latency(arch, m, lut) if lut else hardware.count_flops(arch, m)
            )
            flops_m = breakdown.flops / 1e6
            params_m = breakdown.params / 1e6
            if lut:
                latency = breakdown.latency_us
        rows.append(
            {
                "label": entry.label,
                "arch": entry.arch,
                "flops_m": flops_m,
                "params_m": params_m,
                "latency_us": latency,
                "search_time_h": entry.search_time_h,
                "acc": entry.acc,
            }
        )
    base_latency = None
    if baseline is not None:
        matches = [r for r in rows if r["label"] == baseline]
        if not matches:
            raise ValueError(f"baseline label {baseline!r} not found")
        base_latency = matches[0]["latency_us"]
    else:
        for r in rows:
            if r["latency_us"] is not None:
                base_latency = r["latency_us"]
                break
    for r in rows:
        if base_latency is not None and r["latency_us"]:
            r["speedup"] = base_latency / r["latency_us"]
        else:
            r["speedup"] = None

    width = max(12, max(len(r["label"]) for r in rows) + 1)
    header = (
        f"{'framework':<{width}} {'FLOPs (M)':>10} {'Params (M)':>11} "
        f"{'Speedup':>8} {'Search Time':>12} {'ACC':>7}"
    )
    lines = [header, "-" * len(header)]
    for r in rows:
        speedup = f"{r['speedup']:.2f}×" if r["speedup"] is not None else "-"
        lines.append(
            f"{r['label']:<{width}} {_fmt(r['flops_m'], '{:.2f}'):>10} "
            f"{_fmt(r['params_m'], '{:.3f}'):>11} {speedup:>8} "
            f"{_fmt(r['search_time_h'], '{:g}'):>12} {_fmt(r['acc'], '{:.2f}'):>7}"
        )
    return "\n".join(lines), rows
