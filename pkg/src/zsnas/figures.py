"""Figure rendering for report outputs. Written next to the delimited files."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

__all__ = ["tau_figure", "search_figure", "report_figure"]

_DPI = 150


def tau_figure(report, path: str) -> None:
    """Kendall tau against the sweep axis for one proxy."""
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    ax.plot(report.axis_values, report.taus, marker="o", color="tab:blue")
    values = report.axis_values
    if len(values) > 1 and all(v > 0 and math.log2(v).is_integer() for v in values):
        ax.set_xscale("log", base=2)
    ax.set_xlabel(report.axis.replace("_", " "))
    ax.set_ylabel("Kendall tau")
    ax.set_ylim(-1.05, 1.05)
    ax.axhline(0.0, color="gray", lw=0.8, ls=":")
    ax.grid(True, alpha=0.3)
    ax.set_title(f"{report.proxy} proxy, n={report.sample_size}")
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def search_figure(report, path: str) -> None:
    """Prune trajectory: surviving operators and expected cost per step."""
    steps = report.prune_log
    xs = list(range(1, len(steps) + 1))
    has_latency = steps and steps[0].expected_latency_us is not None
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8.2, 3.4))
    ax1.step(xs, [s.surviving_total for s in steps], where="post", color="tab:blue")
    ax1.set_xlabel("prune step")
    ax1.set_ylabel("surviving operators")
    ax1.grid(True, alpha=0.3)
    ax2.plot(xs, [s.expected_flops / 1e6 for s in steps], marker=".", color="tab:orange",
             label="expected FLOPs (M)")
    ax2.set_xlabel("prune step")
    ax2.set_ylabel("expected FLOPs (M)")
    if has_latency:
        twin = ax2.twinx()
        twin.plot(xs, [s.expected_latency_us / 1e3 for s in steps], marker=".",
                  color="tab:green", label="expected latency (ms)")
        twin.set_ylabel("expected latency (ms)")
    ax2.grid(True, alpha=0.3)
    fig.suptitle(f"search trajectory: {report.arch}", fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def report_figure(rows: list[dict], path: str) -> None:
    """Grouped bars of the comparison table's computable columns."""
    labels = [r["label"] for r in rows]
    panels = [
        ("flops_m", "FLOPs (M)", 1.0),
        ("params_m", "Params (M)", 1.0),
        ("latency_us", "Latency (ms)", 1e-3),
    ]
    fig, axes = plt.subplots(1, len(panels), figsize=(3.0 * len(panels), 3.2))
    for ax, (field, title, scale) in zip(axes, panels):
        values = [r[field] * scale if r[field] is not None else 0.0 for r in rows]
        ax.bar(labels, values, color="tab:blue", alpha=0.85)
        ax.set_title(title, fontsize=9)
        ax.tick_params(axis="x", rotation=45, labelsize=8)
        ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
