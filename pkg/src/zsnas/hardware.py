"""Hardware indicators: analytic FLOPs/parameter counts and table-driven latency.

FLOPs convention: multiplies and adds are counted separately (a conv MAC is
2 FLOPs); average pooling costs one op per window cell; relu and the zero /
identity edge operators are free. Latency is a pure sum of profiled entries
keyed by (op, c_in, c_out, h_in, w_in, stride) plus a constant device
overhead; `none`, `skip_connect` and the global pool default to 0 us when
the table has no entry for them.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

from .space import EDGES, CellArch, MacroConfig, OpKind, SupernetState

__all__ = [
    "LatencyKey",
    "LatencyTable",
    "CostRow",
    "CostBreakdown",
    "LatencyTableError",
    "MissingLatencyKeyError",
    "load_latency_table",
    "count_flops",
    "estimate_latency",
    "cost_breakdown",
    "min_completion_latency",
    "min_completion_flops",
    "expected_latency",
    "expected_flops",
    "required_latency_keys",
    "optional_latency_keys",
]

LatencyKey = tuple[str, int, int, int, int, int]

OVERHEAD_ROW = "__overhead__"
LUT_HEADER = ("op", "c_in", "c_out", "h", "w", "stride", "latency_us")

# cheap data-movement units: absent table entries count as 0 us
_OPTIONAL_OPS = frozenset({"none", "skip_connect", "global_avg_pool"})


class LatencyTableError(ValueError):
    """Latency table file is malformed."""


class MissingLatencyKeyError(KeyError):
    """A required (op, shape) entry is absent from the table."""

    def __init__(self, key: LatencyKey):
        super().__init__(key)
        self.key = key

    def __str__(self) -> str:
        op, c_in, c_out, h, w, stride = self.key
        return (
            f"latency table has no entry for op={op} c_in={c_in} c_out={c_out} "
            f"h={h} w={w} stride={stride}"
        )


@dataclass(frozen=True)
class LatencyTable:
    entries: dict[LatencyKey, float]
    overhead_us: float
    device_label: str = ""

    def lookup(self, key: LatencyKey) -> float:
        value = self.entries.get(key)
        if value is None:
            if key[0] in _OPTIONAL_OPS:
                return 0.0
            raise MissingLatencyKeyError(key)
        return value


def load_latency_table(path: str) -> LatencyTable:
    """Read the LUT CSV; one `__overhead__` row is mandatory, keys must be unique."""
    entries: dict[LatencyKey, float] = {}
    overhead: float | None = None
    device_label = ""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header_seen = False
        for lineno, row in enumerate(reader, start=1):
            if not row or (row[0].startswith("#") and len(row) == 1):
                if row and row[0].startswith("# device:"):
                    device_label = row[0].split(":", 1)[1].strip()
                continue
            if not header_seen:
                if tuple(cell.strip() for cell in row) != LUT_HEADER:
                    raise LatencyTableError(
                        f"{path}:{lineno}: header must be {','.join(LUT_HEADER)}"
                    )
                header_seen = True
                continue
            if len(row) != 7:
                raise LatencyTableError(f"{path}:{lineno}: expected 7 fields, got {len(row)}")
            op = row[0].strip()
            try:
                dims = tuple(int(cell) for cell in row[1:6])
                latency = float(row[6])
            except ValueError as exc:
                raise LatencyTableError(f"{path}:{lineno}: {exc}") from exc
            if latency < 0:
                raise LatencyTableError(f"{path}:{lineno}: negative latency {latency}")
            if op == OVERHEAD_ROW:
                if overhead is not None:
                    raise LatencyTableError(f"{path}:{lineno}: duplicate overhead row")
                overhead = latency
                continue
            key: LatencyKey = (op,) + dims
            if key in entries:
                raise LatencyTableError(f"{path}:{lineno}: duplicate key {key}")
            entries[key] = latency
    if overhead is None:
        raise LatencyTableError(f"{path}: missing mandatory {OVERHEAD_ROW} row")
    return LatencyTable(entries=entries, overhead_us=overhead, device_label=device_label)


@dataclass(frozen=True)
class CostRow:
    index: int
    op: str
    c_in: int
    c_out: int
    h: int
    w: int
    stride: int
    flops: int
    params: int
    latency_us: float = 0.0

    @property
    def key(self) -> LatencyKey:
        return (self.op, self.c_in, self.c_out, self.h, self.w, self.stride)

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "op": self.op,
            "c_in": self.c_in,
            "c_out": self.c_out,
            "h": self.h,
            "w": self.w,
            "stride": self.stride,
            "flops": self.flops,
            "params": self.params,
            "latency_us": self.latency_us,
        }


@dataclass(frozen=True)
class CostBreakdown:
    rows: tuple[CostRow, ...]
    flops: int
    params: int
    latency_us: float


def _conv_cost(c_in: int, c_out: int, k: int, h_out: int, w_out: int) -> tuple[int, int]:
    flops = 2 * h_out * w_out * c_out * c_in * k * k
    params = c_out * (c_in * k * k + 1)
    return flops, params


def _edge_op_cost(op: OpKind, c: int, h: int, w: int) -> tuple[int, int]:
    """(flops, params) of one cell edge operator on a (c, h, w) map."""
    if op is OpKind.NOR_CONV_1X1:
        return _conv_cost(c, c, 1, h, w)
    if op is OpKind.NOR_CONV_3X3:
        return _conv_cost(c, c, 3, h, w)
    if op is OpKind.AVG_POOL_3X3:
        return (h * w * c * 9, 0)
    return (0, 0)


def _reduction_cost(c_in: int, c_out: int, h: int, w: int) -> tuple[int, int]:
    """Composite block: 3x3/s2 conv, 3x3 conv, 2x2 avgpool + 1x1 conv shortcut."""
    ho, wo = h // 2, w // 2
    f1, p1 = _conv_cost(c_in, c_out, 3, ho, wo)
    f2, p2 = _conv_cost(c_out, c_out, 3, ho, wo)
    f3, p3 = _conv_cost(c_in, c_out, 1, ho, wo)
    pool = ho * wo * c_in * 4
    return (f1 + f2 + f3 + pool, p1 + p2 + p3)


def _skeleton_rows(m: MacroConfig) -> tuple[list[CostRow], list[CostRow]]:
    """(prefix rows before the stages, suffix rows after) - no cell edges."""
    c_in, h, w = m.input_shape
    c1, c2, c3 = m.channels
    sf, sp = _conv_cost(c_in, c1, 3, h, w)
    prefix = [CostRow(0, "stem", c_in, c1, h, w, 1, sf, sp)]
    gap_h, gap_w = h // 4, w // 4
    suffix = [
        CostRow(0, "global_avg_pool", c3, c3, gap_h, gap_w, 1, gap_h * gap_w * c3, 0),
        CostRow(0, "classifier", c3, m.num_classes, 1, 1, 1, 2 * c3 * m.num_classes,
                m.num_classes * (c3 + 1)),
    ]
    return prefix, suffix


def _reduction_row(m: MacroConfig, stage: int) -> CostRow:
    _, h, w = m.input_shape
    c = m.channels
    h_in, w_in = (h, w) if stage == 1 else (h // 2, w // 2)
    flops, params = _reduction_cost(c[stage - 1], c[stage], h_in, w_in)
    return CostRow(0, "reduction", c[stage - 1], c[stage], h_in, w_in, 2, flops, params)


def cost_breakdown(
    a: CellArch, m: MacroConfig, lut: LatencyTable | None = None
) -> CostBreakdown:
    """Per-unit cost rows for one architecture; totals are exact sums."""
    prefix, suffix = _skeleton_rows(m)
    rows: list[CostRow] = list(prefix)
    for stage, (c, h, w) in enumerate(m.stage_maps):
        if stage:
            rows.append(_reduction_row(m, stage))
        for _ in range(m.cells_per_stage):
            for e in range(len(EDGES)):
                op = a.ops[e]
                flops, params = _edge_op_cost(op, c, h, w)
                rows.append(CostRow(0, op.op_name, c, c, h, w, 1, flops, params))
    rows.extend(suffix)
    out: list[CostRow] = []
    total_latency = 0.0
    for i, row in enumerate(rows):
        latency = lut.lookup(row.key) if lut else 0.0
        total_latency += latency
        out.append(
            CostRow(i, row.op, row.c_in, row.c_out, row.h, row.w, row.stride,
                    row.flops, row.params, latency)
        )
    if lut:
        total_latency += lut.overhead_us
    return CostBreakdown(
        rows=tuple(out),
        flops=sum(r.flops for r in out),
        params=sum(r.params for r in out),
        latency_us=total_latency,
    )


def count_flops(a: CellArch, m: MacroConfig) -> CostBreakdown:
    """FLOPs and parameter totals; latency fields stay zero."""
    return cost_breakdown(a, m, None)


def estimate_latency(a: CellArch, m: MacroConfig, lut: LatencyTable) -> CostBreakdown:
    """Sum of per-unit table lookups plus the constant overhead."""
    if lut is None:
        raise ValueError("latency estimation needs a loaded table")
    return cost_breakdown(a, m, lut)


def _edge_cost_tables(
    m: MacroConfig, lut: LatencyTable | None
) -> dict[OpKind, tuple[int, float]]:
    """Total (flops, latency) of choosing an op on one edge, over all cell instances."""
    table: dict[OpKind, tuple[int, float]] = {}
    for op in OpKind:
        flops = 0
        latency = 0.0
        for c, h, w in m.stage_maps:
            f, _ = _edge_op_cost(op, c, h, w)
            flops += m.cells_per_stage * f
            if lut:
                latency += m.cells_per_stage * lut.lookup((op.op_name, c, c, h, w, 1))
        table[op] = (flops, latency)
    return table


def _fixed_costs(m: MacroConfig, lut: LatencyTable | None) -> tuple[int, float]:
    """(flops, latency) of stem, reductions, pool and classifier, plus overhead."""
    prefix, suffix = _skeleton_rows(m)
    rows = prefix + [_reduction_row(m, 1), _reduction_row(m, 2)] + suffix
    flops = sum(r.flops for r in rows)
    latency = 0.0
    if lut:
        latency = sum(lut.lookup(r.key) for r in rows) + lut.overhead_us
    return flops, latency


def min_completion_latency(st: SupernetState, m: MacroConfig, lut: LatencyTable) -> float:
    """Lower bound: pick the cheapest surviving operator on every edge."""
    per_op = _edge_cost_tables(m, lut)
    _, fixed = _fixed_costs(m, lut)
    return fixed + sum(min(per_op[o][1] for o in ops) for ops in st.choices)


def min_completion_flops(st: SupernetState, m: MacroConfig) -> int:
    per_op = _edge_cost_tables(m, None)
    fixed, _ = _fixed_costs(m, None)
    return fixed + sum(min(per_op[o][0] for o in ops) for ops in st.choices)


def expected_latency(st: SupernetState, m: MacroConfig, lut: LatencyTable) -> float:
    """Uniform-expectation latency: mean over surviving operators per edge."""
    per_op = _edge_cost_tables(m, lut)
    _, fixed = _fixed_costs(m, lut)
    return fixed + sum(
        sum(per_op[o][1] for o in ops) / len(ops) for ops in st.choices
    )


def expected_flops(st: SupernetState, m: MacroConfig) -> float:
    per_op = _edge_cost_tables(m, None)
    fixed, _ = _fixed_costs(m, None)
    return fixed + sum(
        sum(per_op[o][0] for o in ops) / len(ops) for ops in st.choices
    )


def required_latency_keys(m: MacroConfig) -> list[LatencyKey]:
    """Keys a table must provide to cover every architecture of the macro."""
    keys: list[LatencyKey] = []
    prefix, suffix = _skeleton_rows(m)
    keys.append(prefix[0].key)
    for stage in (1, 2):
        keys.append(_reduction_row(m, stage).key)
    for c, h, w in m.stage_maps:
        for op in (OpKind.NOR_CONV_1X1, OpKind.NOR_CONV_3X3, OpKind.AVG_POOL_3X3):
            keys.append((op.op_name, c, c, h, w, 1))
    keys.append(suffix[1].key)  # classifier
    return keys


def optional_latency_keys(m: MacroConfig) -> list[LatencyKey]:
    """Zero-default keys that may still be profiled explicitly."""
    keys: list[LatencyKey] = []
    for c, h, w in m.stage_maps:
        for op in (OpKind.NONE, OpKind.SKIP_CONNECT):
            keys.append((op.op_name, c, c, h, w, 1))
    _, suffix = _skeleton_rows(m)
    keys.append(suffix[0].key)  # global_avg_pool
    return keys
