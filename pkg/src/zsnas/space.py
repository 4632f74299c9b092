"""Cell search space: DAG encoding, enumeration, supernet state, network builders.

The cell is the complete DAG on 4 nodes (node 0 input, node 3 output); each
of the 6 edges carries one operator out of 5 candidates, and every node sums
its incoming edge outputs. The macro skeleton stacks the cell in three
stages (channels C, 2C, 4C) joined by fixed stride-2 residual reduction
blocks, with a stem conv in front and a global-average-pool + linear head.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from enum import IntEnum
from typing import Iterator

from .nn import Layer, Network, init_params

__all__ = [
    "OpKind",
    "OP_NAMES",
    "EDGES",
    "CellArch",
    "SupernetState",
    "MacroConfig",
    "ArchSyntaxError",
    "UnknownOperatorError",
    "ResolvedStateError",
    "PruneError",
    "ResolutionError",
    "parse_arch",
    "format_arch",
    "enumerate_space",
    "space_size",
    "build_full_network",
    "build_lr_network",
    "supernet_network",
    "supernet_lr_network",
]

OP_NAMES = ("none", "skip_connect", "nor_conv_1x1", "nor_conv_3x3", "avg_pool_3x3")

# edge order follows the string grammar: node 1, then node 2, then node 3
EDGES = ((1, 0), (2, 0), (2, 1), (3, 0), (3, 1), (3, 2))


class OpKind(IntEnum):
    NONE = 0
    SKIP_CONNECT = 1
    NOR_CONV_1X1 = 2
    NOR_CONV_3X3 = 3
    AVG_POOL_3X3 = 4

    @property
    def op_name(self) -> str:
        return OP_NAMES[self.value]


_NAME_TO_OP = {name: OpKind(i) for i, name in enumerate(OP_NAMES)}


class ArchSyntaxError(ValueError):
    """Architecture string does not match the grammar."""


class UnknownOperatorError(ArchSyntaxError):
    """Architecture string names an operator outside the search space."""


class ResolvedStateError(ValueError):
    """Operation requires an unresolved supernet state."""


class PruneError(ValueError):
    """Invalid prune: operator absent or edge would become empty."""


class ResolutionError(ValueError):
    """Input resolution too small for the two stride-2 reductions."""


@dataclass(frozen=True)
class CellArch:
    """One operator per edge, in EDGES order."""

    ops: tuple[OpKind, ...]

    def __post_init__(self):
        if len(self.ops) != len(EDGES) or not all(isinstance(o, OpKind) for o in self.ops):
            raise ValueError(f"need {len(EDGES)} OpKind entries, got {self.ops!r}")

    def op(self, dst: int, src: int) -> OpKind:
        return self.ops[EDGES.index((dst, src))]

    def __str__(self) -> str:
        return format_arch(self)


@dataclass(frozen=True)
class SupernetState:
    """Surviving operator choices per edge; resolved when all are singletons."""

    choices: tuple[tuple[OpKind, ...], ...]

    def __post_init__(self):
        if len(self.choices) != len(EDGES):
            raise ValueError(f"need {len(EDGES)} edge sets")
        for e, ops in enumerate(self.choices):
            if not ops:
                raise ValueError(f"edge {e} has no surviving operators")
            if tuple(sorted(set(ops))) != tuple(ops):
                raise ValueError(f"edge {e} choices must be sorted and unique: {ops!r}")

    @classmethod
    def full(cls) -> "SupernetState":
        all_ops = tuple(OpKind)
        return cls(tuple(all_ops for _ in EDGES))

    @property
    def resolved(self) -> bool:
        return all(len(ops) == 1 for ops in self.choices)

    @property
    def total_ops(self) -> int:
        return sum(len(ops) for ops in self.choices)

    def to_arch(self) -> CellArch:
        if not self.resolved:
            raise ResolvedStateError("state still has undecided edges")
        return CellArch(tuple(ops[0] for ops in self.choices))

    def key(self) -> str:
        """Canonical compact form, used for sub-seed derivation."""
        return ";".join("".join(str(int(o)) for o in ops) for ops in self.choices)


def candidate_prunes(st: SupernetState) -> list[tuple[int, OpKind]]:
    """All (edge, op) removals available on undecided edges, in (edge, op) order."""
    if st.resolved:
        raise ResolvedStateError("no prunes possible on a resolved state")
    return [(e, op) for e, ops in enumerate(st.choices) if len(ops) > 1 for op in ops]


def apply_prune(st: SupernetState, edge: int, op: OpKind) -> SupernetState:
    """Remove op from the edge; returns a new state, the input is unchanged."""
    ops = st.choices[edge]
    if op not in ops:
        raise PruneError(f"{op.op_name} is not present on edge {edge}")
    if len(ops) == 1:
        raise PruneError(f"edge {edge} would become empty")
    remaining = tuple(o for o in ops if o != op)
    return SupernetState(st.choices[:edge] + (remaining,) + st.choices[edge + 1 :])


def parse_arch(s: str) -> CellArch:
    """Parse the canonical cell string, e.g. "|none~0|+|none~0|none~1|+..."."""
    ops: list[OpKind] = []
    pos = 0

    def expect(ch: str) -> None:
        nonlocal pos
        if pos >= len(s) or s[pos] != ch:
            found = s[pos] if pos < len(s) else "end of string"
            raise ArchSyntaxError(f"expected {ch!r} at position {pos}, found {found!r}")
        pos += 1

    for node in (1, 2, 3):
        if node > 1:
            expect("+")
        expect("|")
        for src in range(node):
            start = pos
            end = s.find("|", pos)
            if end < 0:
                raise ArchSyntaxError(f"unterminated edge token at position {start}")
            token = s[start:end]
            name, sep, idx = token.rpartition("~")
            if not sep or not name:
                raise ArchSyntaxError(f"malformed edge token {token!r} at position {start}")
            if name not in _NAME_TO_OP:
                raise UnknownOperatorError(
                    f"unknown operator {name!r} at position {start}; "
                    f"expected one of {', '.join(OP_NAMES)}"
                )
            if idx != str(src):
                raise ArchSyntaxError(
                    f"edge source ~{idx} at position {start}, expected ~{src}"
                )
            ops.append(_NAME_TO_OP[name])
            pos = end + 1
    if pos != len(s):
        raise ArchSyntaxError(f"trailing characters at position {pos}")
    return CellArch(tuple(ops))


def format_arch(a: CellArch) -> str:
    n = [op.op_name for op in a.ops]
    return f"|{n[0]}~0|+|{n[1]}~0|{n[2]}~1|+|{n[3]}~0|{n[4]}~1|{n[5]}~2|"


def space_size() -> int:
    return len(OP_NAMES) ** len(EDGES)


def enumerate_space() -> Iterator[CellArch]:
    """All architectures in lexicographic edge-code order (all-none first)."""
    for combo in itertools.product(tuple(OpKind), repeat=len(EDGES)):
        yield CellArch(combo)


@dataclass(frozen=True)
class MacroConfig:
    """Fixed macro skeleton; stage channels are stem_channels x (1, 2, 4)."""

    stem_channels: int = 16
    cells_per_stage: int = 5
    num_classes: int = 10
    input_shape: tuple[int, int, int] = (3, 32, 32)

    def __post_init__(self):
        if self.stem_channels < 1 or self.cells_per_stage < 1 or self.num_classes < 1:
            raise ValueError("macro sizes must be positive")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ValueError(f"input shape must be (C, H, W) positive, got {self.input_shape}")

    @property
    def channels(self) -> tuple[int, int, int]:
        return (self.stem_channels, 2 * self.stem_channels, 4 * self.stem_channels)

    @property
    def stage_maps(self) -> tuple[tuple[int, int, int], ...]:
        """(C, H, W) of the feature map inside each stage."""
        _, h, w = self.input_shape
        c1, c2, c3 = self.channels
        return ((c1, h, w), (c2, h // 2, w // 2), (c3, h // 4, w // 4))


def _check_resolution(h: int, w: int) -> None:
    # two stride-2 reductions: H and W must survive halving twice with the
    # conv (ceil) and avgpool (floor) branches staying aligned
    if h < 4 or w < 4 or h % 4 or w % 4:
        raise ResolutionError(
            f"resolution {h}x{w} too small for the pooling pyramid; "
            "height and width must be multiples of 4"
        )


def _edge_contribution(
    layers: list[Layer],
    src_idx: int,
    ops: tuple[OpKind, ...],
    channels: int,
    relu_convs: bool,
) -> int | None:
    """Append records for one edge; returns the contribution index or None.

    A multi-op edge outputs the mean over its surviving operators; `none`
    contributes a zero term but still counts in the divisor.
    """
    outs: list[int] = []
    for op in ops:
        if op is OpKind.NONE:
            continue
        if op is OpKind.SKIP_CONNECT:
            outs.append(src_idx)
            continue
        if op in (OpKind.NOR_CONV_1X1, OpKind.NOR_CONV_3X3):
            k = 1 if op is OpKind.NOR_CONV_1X1 else 3
            layers.append(
                Layer(
                    "conv2d",
                    (src_idx,),
                    c_in=channels,
                    c_out=channels,
                    k=k,
                    stride=1,
                    pad=k // 2,
                    label=op.op_name,
                )
            )
            idx = len(layers) - 1
            if relu_convs:
                layers.append(Layer("relu", (idx,)))
                idx = len(layers) - 1
            outs.append(idx)
            continue
        layers.append(
            Layer("avgpool", (src_idx,), k=3, stride=1, pad=1, label=op.op_name)
        )
        outs.append(len(layers) - 1)
    if not outs:
        return None
    if len(ops) == 1:
        return outs[0]
    if len(outs) > 1:
        layers.append(Layer("add", tuple(outs)))
        summed = len(layers) - 1
    else:
        summed = outs[0]
    layers.append(Layer("scale", (summed,), alpha=1.0 / len(ops)))
    return len(layers) - 1


def _append_cell(
    layers: list[Layer],
    cell_in: int,
    opsets: tuple[tuple[OpKind, ...], ...],
    channels: int,
    relu_convs: bool,
) -> int:
    nodes = [cell_in, -1, -1, -1]
    for dst in (1, 2, 3):
        contribs = []
        for e, (d, s) in enumerate(EDGES):
            if d != dst:
                continue
            out = _edge_contribution(layers, nodes[s], opsets[e], channels, relu_convs)
            if out is not None:
                contribs.append(out)
        if len(contribs) == 1:
            nodes[dst] = contribs[0]
        else:
            layers.append(Layer("add", tuple(contribs), shape_src=cell_in))
            nodes[dst] = len(layers) - 1
    return nodes[3]


def _append_reduction(layers: list[Layer], src: int, c_in: int, c_out: int) -> int:
    """Fixed stride-2 residual block: two 3x3 convs plus a pooled 1x1 shortcut."""
    layers.append(Layer("conv2d", (src,), c_in=c_in, c_out=c_out, k=3, stride=2, pad=1, label="reduction"))
    a = len(layers) - 1
    layers.append(Layer("conv2d", (a,), c_in=c_out, c_out=c_out, k=3, stride=1, pad=1, label="reduction"))
    main = len(layers) - 1
    layers.append(Layer("avgpool", (src,), k=2, stride=2, pad=0, label="reduction"))
    pooled = len(layers) - 1
    layers.append(Layer("conv2d", (pooled,), c_in=c_in, c_out=c_out, k=1, stride=1, pad=0, label="reduction"))
    short = len(layers) - 1
    layers.append(Layer("add", (main, short)))
    return len(layers) - 1


def _build(
    opsets: tuple[tuple[OpKind, ...], ...],
    m: MacroConfig,
    *,
    lr_mode: bool,
    input_shape: tuple[int, int, int],
    seed: int,
) -> Network:
    c_in, h, w = input_shape
    _check_resolution(h, w)
    channels = m.channels
    layers = [Layer("input")]
    layers.append(
        Layer("conv2d", (0,), c_in=c_in, c_out=channels[0], k=3, stride=1, pad=1, label="stem")
    )
    cur = len(layers) - 1
    for stage in range(3):
        if stage:
            cur = _append_reduction(layers, cur, channels[stage - 1], channels[stage])
        for _ in range(m.cells_per_stage):
            cur = _append_cell(layers, cur, opsets, channels[stage], lr_mode)
    if not lr_mode:
        layers.append(Layer("global_avg_pool", (cur,), label="global_avg_pool"))
        gap = len(layers) - 1
        layers.append(
            Layer("linear", (gap,), c_in=channels[2], c_out=m.num_classes, label="classifier")
        )
    net = Network(layers, input_shape)
    return init_params(net, seed)


def build_full_network(a: CellArch, m: MacroConfig, seed: int) -> Network:
    """Stem, three stages of cells with reductions, pool and classifier head."""
    return _build(
        tuple((op,) for op in a.ops), m, lr_mode=False, input_shape=m.input_shape, seed=seed
    )


def build_lr_network(
    a: CellArch,
    m: MacroConfig,
    seed: int,
    input_shape: tuple[int, int, int] | None = None,
) -> Network:
    """Same topology with a relu after every cell conv and no classifier head."""
    return _build(
        tuple((op,) for op in a.ops),
        m,
        lr_mode=True,
        input_shape=input_shape or m.input_shape,
        seed=seed,
    )


def supernet_network(st: SupernetState, m: MacroConfig, seed: int) -> Network:
    """Network where each edge averages the outputs of its surviving operators."""
    return _build(st.choices, m, lr_mode=False, input_shape=m.input_shape, seed=seed)


def supernet_lr_network(
    st: SupernetState,
    m: MacroConfig,
    seed: int,
    input_shape: tuple[int, int, int] | None = None,
) -> Network:
    return _build(
        st.choices, m, lr_mode=True, input_shape=input_shape or m.input_shape, seed=seed
    )
