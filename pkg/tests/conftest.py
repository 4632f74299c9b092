"""Shared test helpers: finite-difference oracles and synthetic latency tables."""

from __future__ import annotations

import numpy as np
import pytest

from zsnas import hardware, nn
from zsnas.hardware import LatencyTable
from zsnas.space import MacroConfig


def fd_param_grad(net: nn.Network, x: np.ndarray, seed_grad: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of <seed_grad, output> over every parameter."""
    grad = np.empty(net.param_count)
    for p in range(net.param_count):
        orig = net.params[p]
        net.params[p] = orig + h
        y_plus, _ = nn.forward(net, x)
        net.params[p] = orig - h
        y_minus, _ = nn.forward(net, x)
        net.params[p] = orig
        grad[p] = float((seed_grad * (y_plus - y_minus)).sum()) / (2.0 * h)
    return grad


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Worst-case per-coordinate relative error with an absolute floor."""
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)
    return float(np.max(np.abs(a - b) / denom))


def make_lut(
    m: MacroConfig,
    op_us: dict[str, float] | None = None,
    overhead_us: float = 100.0,
    stage_scale: tuple[float, float, float] = (1.0, 1.0, 1.0),
) -> LatencyTable:
    """Synthetic table covering every key the macro can need.

    op_us values are per cell-op instance (scaled per stage); skeleton units
    get fixed integer costs so sums stay exact in float64.
    """
    defaults = {
        "nor_conv_1x1": 40.0,
        "nor_conv_3x3": 160.0,
        "avg_pool_3x3": 12.0,
        "skip_connect": 2.0,
        "none": 0.0,
        "stem": 50.0,
        "reduction": 80.0,
        "classifier": 6.0,
        "global_avg_pool": 4.0,
    }
    if op_us:
        defaults.update(op_us)
    entries: dict = {}
    for key in hardware.required_latency_keys(m) + hardware.optional_latency_keys(m):
        op = key[0]
        scale = 1.0
        if op in ("none", "skip_connect", "nor_conv_1x1", "nor_conv_3x3", "avg_pool_3x3"):
            stage = [s[0] for s in m.stage_maps].index(key[1])
            scale = stage_scale[stage]
        entries[key] = defaults[op] * scale
    return LatencyTable(entries=entries, overhead_us=overhead_us, device_label="synthetic")


def lut_to_csv(table: LatencyTable, path) -> str:
    lines = [",".join(hardware.LUT_HEADER)]
    lines.append(f"{hardware.OVERHEAD_ROW},0,0,0,0,0,{table.overhead_us}")
    for key, value in sorted(table.entries.items()):
        lines.append(",".join(str(k) for k in key) + f",{value}")
    path = str(path)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


@pytest.fixture
def desk_macro() -> MacroConfig:
    return MacroConfig(cells_per_stage=1, input_shape=(3, 8, 8))
