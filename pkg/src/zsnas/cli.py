"""Command-line entry point tying the search, scoring and reporting together.

Verbs: score, search, enumerate, flops, latency, tau, report. Every flag
mirrors a config-file key 1:1 (flat `key = value` lines); flags override the
file. Exit codes: 0 success, 2 input/parse errors, 3 latency-table problems,
4 infeasible budgets.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass

from . import hardware
from .bench import (
    AllTiedError,
    BenchFormatError,
    ReportEntry,
    compare_report,
    load_bench,
    tau_sweep,
)
from .hardware import (
    LatencyTable,
    LatencyTableError,
    MissingLatencyKeyError,
    load_latency_table,
)
from .proxies import BatchFileError, ProxyConfig, score_arch
from .search import InfeasibleBudgetError, SearchConfig, SupernetState, run_search
from .space import (
    ArchSyntaxError,
    MacroConfig,
    ResolutionError,
    enumerate_space,
    format_arch,
    parse_arch,
)
EXIT_OK = 0
EXIT_INPUT = 2
EXIT_LUT = 3
EXIT_INFEASIBLE = 4


class ConfigError(ValueError):
    """Bad config file or flag value."""


_INT_KEYS = {
    "seed", "threads", "batch_size", "repeats", "lr_samples", "cells_per_stage",
    "stem_channels", "num_classes", "sample", "limit", "flops_budget",
}
_FLOAT_KEYS = {"wk", "wr", "wf", "wl", "latency_budget_us"}
_BOOL_KEYS = {"no_fig"}
_STR_KEYS = {
    "lut", "out", "arch", "bench", "entries", "input", "lr_resolution", "schedule",
    "input_source", "batch_file", "proxy", "axis", "axis_values", "baseline", "edges",
}
_ALL_KEYS = _INT_KEYS | _FLOAT_KEYS | _BOOL_KEYS | _STR_KEYS


def _parse_config_file(path: str) -> dict:
    values: dict = {}
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#") or line.startswith(";"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, _, raw = line.partition("=")
            key = key.strip().replace("-", "_")
            raw = raw.strip()
            if key not in _ALL_KEYS:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = _convert(key, raw, f"{path}:{lineno}")
    return values


def _convert(key: str, raw: str, where: str):
    try:
        if key in _INT_KEYS:
            return int(raw)
        if key in _FLOAT_KEYS:
            return float(raw)
        if key in _BOOL_KEYS:
            if raw.lower() in ("1", "true", "yes"):
                return True
            if raw.lower() in ("0", "false", "no"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        return raw
    except ValueError as exc:
        raise ConfigError(f"{where}: bad value for {key}: {exc}") from exc


def _parse_shape(text: str, what: str) -> tuple[int, int, int]:
    parts = text.lower().replace("x", ",").split(",")
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError as exc:
        raise ConfigError(f"bad {what} {text!r}: {exc}") from exc
    if len(dims) != 3 or min(dims) < 1:
        raise ConfigError(f"bad {what} {text!r}: need CxHxW")
    return dims


@dataclass
class RunConfig:
    """Merged file + flag settings with typed accessors."""

    values: dict

    def get(self, key: str, default=None):
        return self.values.get(key, default)

    @property
    def macro(self) -> MacroConfig:
        return MacroConfig(
            stem_channels=self.get("stem_channels", 16),
            cells_per_stage=self.get("cells_per_stage", 5),
            num_classes=self.get("num_classes", 10),
            input_shape=_parse_shape(self.get("input", "3x32x32"), "input shape"),
        )

    @property
    def proxy(self) -> ProxyConfig:
        return ProxyConfig(
            batch_size=self.get("batch_size", 32),
            ntk_repeats=self.get("repeats", 3),
            lr_samples=self.get("lr_samples", 1000),
            lr_input_resolution=_parse_shape(self.get("lr_resolution", "3x8x8"), "lr resolution"),
            seed=self.get("seed", 0),
            input_source=self.get("input_source", "gaussian"),
            batch_file=self.get("batch_file"),
        )

    @property
    def threads(self) -> int:
        return self.get("threads") or os.cpu_count() or 1

    def load_lut(self, required: bool = False) -> LatencyTable | None:
        path = self.get("lut")
        if path is None:
            if required:
                raise ConfigError("this command needs --lut")
            return None
        return load_latency_table(path)


def _emit(lines: list[dict], out: str | None) -> None:
    text = "\n".join(json.dumps(line) for line in lines)
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def _maybe_figure(cfg: RunConfig, render, *args) -> None:
    out = cfg.get("out")
    if not out or cfg.get("no_fig"):
        return
    stem, _, _ = out.rpartition(".")
    render(*args, (stem or out) + ".png")


def cmd_score(cfg: RunConfig) -> int:
    arch = parse_arch(_required(cfg, "arch"))
    lut = cfg.load_lut()
    scores = score_arch(arch, cfg.macro, cfg.proxy, lut)
    payload = {"arch": format_arch(arch), **scores.to_dict()}
    print(json.dumps(payload))
    if cfg.get("out"):
        _emit([payload], cfg.get("out"))
    return EXIT_OK


def _initial_state(cfg: RunConfig) -> SupernetState | None:
    # desk-scale experiments: 6 '/'-separated groups of ':'-joined op names
    spec = cfg.get("edges")
    if not spec:
        return None
    from .space import OP_NAMES, OpKind

    groups = spec.split("/")
    if len(groups) != 6:
        raise ConfigError("edges needs 6 '/'-separated groups of ':'-joined op names")
    choices = []
    for group in groups:
        ops = []
        for name in group.split(":"):
            if name not in OP_NAMES:
                raise ConfigError(f"unknown op {name!r} in edges")
            ops.append(OpKind(OP_NAMES.index(name)))
        choices.append(tuple(sorted(set(ops))))
    return SupernetState(tuple(choices))


def cmd_search(cfg: RunConfig) -> int:
    lut = cfg.load_lut()
    search_cfg = SearchConfig(
        macro=cfg.macro,
        proxy=cfg.proxy,
        w_kappa=cfg.get("wk", 1.0),
        w_lr=cfg.get("wr", 1.0),
        w_flops=cfg.get("wf", 0.0),
        w_latency=cfg.get("wl", 0.0),
        latency_budget_us=cfg.get("latency_budget_us"),
        flops_budget=cfg.get("flops_budget"),
        lut=lut,
        schedule=cfg.get("schedule", "per_edge"),
        threads=cfg.threads,
        initial_state=_initial_state(cfg),
    )
    report = run_search(search_cfg)
    lines = [step.to_dict() for step in report.prune_log]
    lines.append(report.final_dict())
    _emit(lines, cfg.get("out"))
    if cfg.get("out"):
        from . import figures

        _maybe_figure(cfg, figures.search_figure, report)
    print(report.arch)
    return EXIT_OK


def cmd_enumerate(cfg: RunConfig) -> int:
    limit = cfg.get("limit")
    out = cfg.get("out")
    sink = open(out, "w", encoding="utf-8") if out else sys.stdout
    try:
        for i, arch in enumerate(enumerate_space()):
            if limit is not None and i >= limit:
                break
            sink.write(format_arch(arch) + "\n")
    finally:
        if out:
            sink.close()
    return EXIT_OK


def cmd_flops(cfg: RunConfig) -> int:
    arch = parse_arch(_required(cfg, "arch"))
    breakdown = hardware.count_flops(arch, cfg.macro)
    payload = {
        "arch": format_arch(arch),
        "flops": breakdown.flops,
        "params": breakdown.params,
        "rows": [r.to_dict() for r in breakdown.rows],
    }
    print(json.dumps({"arch": payload["arch"], "flops": breakdown.flops, "params": breakdown.params}))
    if cfg.get("out"):
        _emit([payload], cfg.get("out"))
    return EXIT_OK


def cmd_latency(cfg: RunConfig) -> int:
    if cfg.get("list_keys"):
        macro = cfg.macro
        for key in hardware.required_latency_keys(macro):
            print(",".join(str(k) for k in key) + ",required")
        for key in hardware.optional_latency_keys(macro):
            print(",".join(str(k) for k in key) + ",optional")
        return EXIT_OK
    arch = parse_arch(_required(cfg, "arch"))
    lut = cfg.load_lut(required=True)
    breakdown = hardware.estimate_latency(arch, cfg.macro, lut)
    payload = {
        "arch": format_arch(arch),
        "latency_us": breakdown.latency_us,
        "overhead_us": lut.overhead_us,
        "rows": [r.to_dict() for r in breakdown.rows],
    }
    print(json.dumps({"arch": payload["arch"], "latency_us": breakdown.latency_us}))
    if cfg.get("out"):
        _emit([payload], cfg.get("out"))
    return EXIT_OK


def cmd_tau(cfg: RunConfig) -> int:
    records = load_bench(_required(cfg, "bench"))
    proxy = cfg.get("proxy", "kappa")
    axis = cfg.get("axis", "batch_size")
    raw_values = cfg.get("axis_values", "8,16,32")
    try:
        axis_values = [int(v) for v in str(raw_values).split(",") if v]
    except ValueError as exc:
        raise ConfigError(f"bad axis values {raw_values!r}: {exc}") from exc
    lut = cfg.load_lut()
    report = tau_sweep(
        records,
        proxy,
        axis,
        axis_values,
        cfg.macro,
        cfg.proxy,
        lut=lut,
        sample=cfg.get("sample", 500),
        threads=cfg.threads,
        weights=(cfg.get("wk", 1.0), cfg.get("wr", 1.0), cfg.get("wf", 0.0), cfg.get("wl", 0.0)),
    )
    _emit(report.to_dicts(), cfg.get("out"))
    print(report.to_text())
    if cfg.get("out"):
        from . import figures

        _maybe_figure(cfg, figures.tau_figure, report)
    return EXIT_OK


def cmd_report(cfg: RunConfig) -> int:
    path = _required(cfg, "entries")
    entries: list[ReportEntry] = []
    try:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise BenchFormatError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
                if "label" not in obj:
                    raise BenchFormatError(f"{path}:{lineno}: entry needs a label")
                entries.append(
                    ReportEntry(
                        label=obj["label"],
                        arch=obj.get("arch"),
                        flops_m=obj.get("flops_m"),
                        params_m=obj.get("params_m"),
                        latency_us=obj.get("latency_us"),
                        search_time_h=obj.get("search_time_h"),
                        acc=obj.get("acc"),
                    )
                )
    except OSError as exc:
        raise BenchFormatError(f"cannot read entries file: {exc}") from exc
    lut = cfg.load_lut()
    text, rows = compare_report(entries, cfg.macro, lut, baseline=cfg.get("baseline"))
    print(text)
    if cfg.get("out"):
        _emit(rows, cfg.get("out"))
        from . import figures

        _maybe_figure(cfg, figures.report_figure, rows)
    return EXIT_OK


def _required(cfg: RunConfig, key: str) -> str:
    value = cfg.get(key)
    if value is None:
        raise ConfigError(f"this command needs --{key.replace('_', '-')}")
    return value


_COMMANDS = {
    "score": cmd_score,
    "search": cmd_search,
    "enumerate": cmd_enumerate,
    "flops": cmd_flops,
    "latency": cmd_latency,
    "tau": cmd_tau,
    "report": cmd_report,
}


def _build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="flat key = value config file")
    shared.add_argument("--seed", type=int)
    shared.add_argument("--threads", type=int)
    shared.add_argument("--lut", help="latency table CSV")
    shared.add_argument("--out", help="output path for JSON-lines (figures go next to it)")
    shared.add_argument("--arch", help="architecture string")
    shared.add_argument("--latency-budget-us", type=float, dest="latency_budget_us")
    shared.add_argument("--flops-budget", type=int, dest="flops_budget")
    shared.add_argument("--wk", type=float, help="weight of the trainability rank")
    shared.add_argument("--wr", type=float, help="weight of the expressivity rank")
    shared.add_argument("--wf", type=float, help="weight of the FLOPs rank")
    shared.add_argument("--wl", type=float, help="weight of the latency rank")
    shared.add_argument("--batch-size", type=int, dest="batch_size")
    shared.add_argument("--repeats", type=int, help="kernel evaluations per architecture")
    shared.add_argument("--lr-samples", type=int, dest="lr_samples")
    shared.add_argument("--lr-resolution", dest="lr_resolution", help="CxHxW, e.g. 3x8x8")
    shared.add_argument("--cells-per-stage", type=int, dest="cells_per_stage")
    shared.add_argument("--stem-channels", type=int, dest="stem_channels")
    shared.add_argument("--num-classes", type=int, dest="num_classes")
    shared.add_argument("--input", help="input CxHxW, e.g. 3x32x32")
    shared.add_argument("--input-source", dest="input_source", choices=("gaussian", "image_file"))
    shared.add_argument("--batch-file", dest="batch_file")
    shared.add_argument("--schedule", choices=("per_edge", "global"))
    shared.add_argument("--edges", help="restrict the start state: 6 '/'-groups of ':'-joined ops")
    shared.add_argument("--no-fig", action="store_true", default=None, dest="no_fig")

    parser = argparse.ArgumentParser(
        prog="zsnas",
        description="Zero-shot hardware-aware cell architecture search",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("score", parents=[shared], help="proxy scores for one architecture")
    sub.add_parser("search", parents=[shared], help="prune the supernet under budgets")
    enum_p = sub.add_parser("enumerate", parents=[shared], help="list the whole space")
    enum_p.add_argument("--limit", type=int)
    sub.add_parser("flops", parents=[shared], help="FLOPs/params breakdown")
    lat_p = sub.add_parser("latency", parents=[shared], help="latency breakdown from a table")
    lat_p.add_argument("--list-keys", action="store_true", dest="list_keys",
                       help="print the table keys this macro needs")
    tau_p = sub.add_parser("tau", parents=[shared], help="rank correlation against a bench file")
    tau_p.add_argument("--bench", help="JSON-lines bench file")
    tau_p.add_argument("--proxy", choices=("kappa", "lr", "flops", "latency", "combined"))
    tau_p.add_argument("--axis", choices=("batch_size", "repeats"))
    tau_p.add_argument("--axis-values", dest="axis_values", help="comma-separated, e.g. 8,16,32")
    tau_p.add_argument("--sample", type=int, help="max records to correlate (default 500)")
    rep_p = sub.add_parser("report", parents=[shared], help="comparison table")
    rep_p.add_argument("--entries", help="JSON-lines rows, each with a label")
    rep_p.add_argument("--baseline", help="label whose latency anchors the speedup column")
    return parser


def _merge_config(args: argparse.Namespace) -> RunConfig:
    values: dict = {}
    if args.config:
        values.update(_parse_config_file(args.config))
    for key, value in vars(args).items():
        if key in ("command", "config") or value is None:
            continue
        values[key] = value
    return RunConfig(values)


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = _merge_config(args)
        return _COMMANDS[args.command](cfg)
    except (LatencyTableError, MissingLatencyKeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_LUT
    except InfeasibleBudgetError as exc:
        print(f"error: {exc} (lower bound {exc.bound}, budget {exc.budget})", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (ArchSyntaxError, BenchFormatError, ConfigError, BatchFileError,
            ResolutionError, AllTiedError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
