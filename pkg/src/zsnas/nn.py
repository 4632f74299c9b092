"""Minimal dense layer graph with forward evaluation and reverse-mode gradients.

Tensors are float64 numpy arrays in NCHW layout (row-major). A Network is a
topologically ordered list of layer records sharing one flat parameter
vector; evaluation is a pure function of (params, input), so values are safe
to share across threads.

Supported layer kinds: input, conv2d, relu, avgpool, global_avg_pool,
linear, plus the structural add/scale records used to wire DAG cells.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Layer",
    "Network",
    "Tape",
    "ShapeError",
    "StaleTapeError",
    "NoReluError",
    "conv_out_dim",
    "forward",
    "grad_params",
    "init_params",
    "activation_pattern",
]


class ShapeError(ValueError):
    """Layer wiring or input shape mismatch; the message names the layer."""


class StaleTapeError(RuntimeError):
    """The network parameters changed after the tape was recorded."""


class NoReluError(ValueError):
    """Activation patterns need at least one relu layer."""


_PARAM_KINDS = ("conv2d", "linear")
_KINDS = frozenset(
    {"input", "conv2d", "relu", "avgpool", "global_avg_pool", "linear", "add", "scale"}
)


def conv_out_dim(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


@dataclass
class Layer:
    """One record of the graph. Treat as write-once after Network construction."""

    kind: str
    srcs: tuple[int, ...] = ()
    c_in: int = 0
    c_out: int = 0
    k: int = 0
    stride: int = 1
    pad: int = 0
    alpha: float = 1.0
    bias: bool = True
    shape_src: int = -1  # add: layer whose output shape an empty sum copies
    label: str = ""  # cost-attribution tag, e.g. "nor_conv_3x3" or "stem"
    # assigned by Network.__init__
    out_shape: tuple[int, ...] = ()
    w_off: int = 0
    w_len: int = 0
    b_off: int = 0
    b_len: int = 0


class Network:
    """Validated layer graph with a flat float64 parameter vector."""

    def __init__(self, layers: list[Layer], input_shape: tuple[int, int, int]):
        if not layers or layers[0].kind != "input":
            raise ShapeError("layer 0 must be the input record")
        self.input_shape = tuple(int(d) for d in input_shape)
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ShapeError(f"input shape must be (C, H, W) positive, got {input_shape}")
        self.layers = layers
        offset = 0
        for i, layer in enumerate(layers):
            if layer.kind not in _KINDS:
                raise ShapeError(f"layer {i}: unknown kind {layer.kind!r}")
            if any(s >= i or s < 0 for s in layer.srcs):
                raise ShapeError(f"layer {i} ({layer.kind}): sources must precede it")
            layer.out_shape = self._infer_shape(i, layer)
            if layer.kind in _PARAM_KINDS:
                if layer.kind == "conv2d":
                    layer.w_off, layer.w_len = offset, layer.c_out * layer.c_in * layer.k * layer.k
                else:
                    layer.w_off, layer.w_len = offset, layer.c_out * layer.c_in
                offset += layer.w_len
                layer.b_off, layer.b_len = offset, layer.c_out if layer.bias else 0
                offset += layer.b_len
        self.param_count = offset
        self.params = np.zeros(offset, dtype=np.float64)
        self.num_relu_units = sum(
            int(np.prod(l.out_shape)) for l in layers if l.kind == "relu"
        )

    def _shape_of(self, idx: int) -> tuple[int, ...]:
        return self.layers[idx].out_shape

    def _infer_shape(self, i: int, layer: Layer) -> tuple[int, ...]:
        kind = layer.kind
        if kind == "input":
            return self.input_shape
        if kind == "add":
            ref = layer.shape_src if layer.shape_src >= 0 else layer.srcs[0]
            shape = self._shape_of(ref)
            for s in layer.srcs:
                if self._shape_of(s) != shape:
                    raise ShapeError(
                        f"layer {i} (add): source {s} shape {self._shape_of(s)} != {shape}"
                    )
            return shape
        if not layer.srcs:
            raise ShapeError(f"layer {i} ({kind}): missing source")
        src = self._shape_of(layer.srcs[0])
        if kind in ("relu", "scale"):
            return src
        if kind == "conv2d":
            if len(src) != 3 or src[0] != layer.c_in:
                raise ShapeError(f"layer {i} (conv2d): expected {layer.c_in} input channels, got {src}")
            ho = conv_out_dim(src[1], layer.k, layer.stride, layer.pad)
            wo = conv_out_dim(src[2], layer.k, layer.stride, layer.pad)
            if ho < 1 or wo < 1:
                raise ShapeError(f"layer {i} (conv2d): kernel {layer.k} too large for map {src}")
            return (layer.c_out, ho, wo)
        if kind == "avgpool":
            if len(src) != 3:
                raise ShapeError(f"layer {i} (avgpool): needs a C,H,W source, got {src}")
            ho = conv_out_dim(src[1], layer.k, layer.stride, layer.pad)
            wo = conv_out_dim(src[2], layer.k, layer.stride, layer.pad)
            if ho < 1 or wo < 1:
                raise ShapeError(f"layer {i} (avgpool): window {layer.k} too large for map {src}")
            return (src[0], ho, wo)
        if kind == "global_avg_pool":
            if len(src) != 3:
                raise ShapeError(f"layer {i} (global_avg_pool): needs a C,H,W source, got {src}")
            return (src[0],)
        if kind == "linear":
            if len(src) != 1 or src[0] != layer.c_in:
                raise ShapeError(f"layer {i} (linear): expected {layer.c_in} features, got {src}")
            return (layer.c_out,)
        raise ShapeError(f"layer {i}: unknown kind {kind!r}")

    def weight_view(self, layer: Layer) -> np.ndarray:
        if layer.kind == "conv2d":
            return self.params[layer.w_off : layer.w_off + layer.w_len].reshape(
                layer.c_out, layer.c_in, layer.k, layer.k
            )
        return self.params[layer.w_off : layer.w_off + layer.w_len].reshape(
            layer.c_out, layer.c_in
        )

    def bias_view(self, layer: Layer) -> np.ndarray:
        return self.params[layer.b_off : layer.b_off + layer.b_len]


@dataclass
class Tape:
    """Per-layer forward values for one pass, plus a params fingerprint."""

    values: list[np.ndarray]
    fingerprint: bytes
    _conv_cols: dict[int, np.ndarray] = field(default_factory=dict)


def _fingerprint(params: np.ndarray) -> bytes:
    return hashlib.blake2b(params.tobytes(), digest_size=16).digest()


def init_params(net: Network, seed: int) -> Network:
    """Fill weights with N(0, 2/fan_in) draws and zero all biases, in layer order."""
    rng = np.random.default_rng(seed)
    for layer in net.layers:
        if layer.kind not in _PARAM_KINDS:
            continue
        fan_in = layer.c_in * layer.k * layer.k if layer.kind == "conv2d" else layer.c_in
        std = math.sqrt(2.0 / fan_in)
        net.params[layer.w_off : layer.w_off + layer.w_len] = rng.normal(0.0, std, layer.w_len)
        net.params[layer.b_off : layer.b_off + layer.b_len] = 0.0
    return net


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[0], xp.shape[1]
    cols = np.empty((n, c, k, k, ho, wo), dtype=np.float64)
    for ki in range(k):
        for kj in range(k):
            cols[:, :, ki, kj] = xp[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride]
    return cols.reshape(n, c * k * k, ho * wo)


def _col2im(dcols: np.ndarray, xshape: tuple, k: int, stride: int, pad: int, ho: int, wo: int) -> np.ndarray:
    n, c, h, w = xshape
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    dc = dcols.reshape(n, c, k, k, ho, wo)
    for ki in range(k):
        for kj in range(k):
            dxp[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride] += dc[:, :, ki, kj]
    if pad == 0:
        return dxp
    return dxp[:, :, pad : pad + h, pad : pad + w]


def _pool_counts(h: int, w: int, k: int, stride: int, pad: int, ho: int, wo: int) -> np.ndarray:
    # number of non-pad cells in each window; divisor of the window mean
    ones = _pad(np.ones((1, 1, h, w)), pad)
    return _im2col(ones, k, stride, ho, wo).reshape(k * k, ho * wo).sum(axis=0).reshape(ho, wo)


def forward(net: Network, x: np.ndarray) -> tuple[np.ndarray, Tape]:
    """Evaluate the graph on a batch; returns the last layer's value and the tape."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[1:] != net.input_shape:
        raise ShapeError(
            f"layer 0 (input): batch shape {x.shape} does not match (N, {net.input_shape})"
        )
    n = x.shape[0]
    values: list[np.ndarray] = [x]
    for i, layer in enumerate(net.layers[1:], start=1):
        kind = layer.kind
        if kind == "add":
            if layer.srcs:
                out = values[layer.srcs[0]].copy()
                for s in layer.srcs[1:]:
                    out += values[s]
            else:
                out = np.zeros((n,) + layer.out_shape, dtype=np.float64)
        elif kind == "relu":
            out = np.maximum(values[layer.srcs[0]], 0.0)
        elif kind == "scale":
            out = layer.alpha * values[layer.srcs[0]]
        elif kind == "conv2d":
            src = values[layer.srcs[0]]
            co, ho, wo = layer.out_shape
            cols = _im2col(_pad(src, layer.pad), layer.k, layer.stride, ho, wo)
            w2 = net.weight_view(layer).reshape(co, -1)
            out = w2 @ cols
            if layer.b_len:
                out += net.bias_view(layer)[None, :, None]
            out = out.reshape(n, co, ho, wo)
        elif kind == "avgpool":
            src = values[layer.srcs[0]]
            c, ho, wo = layer.out_shape
            cols = _im2col(_pad(src, layer.pad), layer.k, layer.stride, ho, wo)
            cnt = _pool_counts(src.shape[2], src.shape[3], layer.k, layer.stride, layer.pad, ho, wo)
            summed = cols.reshape(n, c, layer.k * layer.k, ho * wo).sum(axis=2)
            out = (summed / cnt.reshape(1, 1, ho * wo)).reshape(n, c, ho, wo)
        elif kind == "global_avg_pool":
            out = values[layer.srcs[0]].mean(axis=(2, 3))
        elif kind == "linear":
            src = values[layer.srcs[0]]
            out = src @ net.weight_view(layer).T
            if layer.b_len:
                out += net.bias_view(layer)
        else:
            raise ShapeError(f"layer {i}: unknown kind {kind!r}")
        values.append(out)
    return values[-1], Tape(values=values, fingerprint=_fingerprint(net.params))


def _conv_cols(net: Network, tape: Tape, idx: int) -> np.ndarray:
    cols = tape._conv_cols.get(idx)
    if cols is None:
        layer = net.layers[idx]
        _, ho, wo = layer.out_shape
        cols = _im2col(_pad(tape.values[layer.srcs[0]], layer.pad), layer.k, layer.stride, ho, wo)
        tape._conv_cols[idx] = cols
    return cols


def grad_params(
    net: Network,
    tape: Tape,
    output_seed_grad: np.ndarray,
    return_input_grad: bool = False,
):
    """Reverse sweep: gradient of <output_seed_grad, output> over the flat params.

    With return_input_grad=True also returns the gradient w.r.t. the input batch.
    """
    if tape.fingerprint != _fingerprint(net.params):
        raise StaleTapeError("network parameters changed since this tape was recorded")
    seed = np.asarray(output_seed_grad, dtype=np.float64)
    if seed.shape != tape.values[-1].shape:
        raise ShapeError(
            f"seed gradient shape {seed.shape} does not match output {tape.values[-1].shape}"
        )
    grads: list[np.ndarray | None] = [None] * len(net.layers)
    grads[len(net.layers) - 1] = seed
    pgrad = np.zeros(net.param_count, dtype=np.float64)

    def accumulate(idx: int, g: np.ndarray) -> None:
        grads[idx] = g if grads[idx] is None else grads[idx] + g

    for i in range(len(net.layers) - 1, 0, -1):
        g = grads[i]
        if g is None:
            continue
        layer = net.layers[i]
        kind = layer.kind
        if kind == "add":
            for s in layer.srcs:
                accumulate(s, g)
        elif kind == "relu":
            accumulate(layer.srcs[0], g * (tape.values[layer.srcs[0]] > 0))
        elif kind == "scale":
            accumulate(layer.srcs[0], layer.alpha * g)
        elif kind == "conv2d":
            src = tape.values[layer.srcs[0]]
            n = src.shape[0]
            co, ho, wo = layer.out_shape
            cols = _conv_cols(net, tape, i)
            gf = g.reshape(n, co, ho * wo)
            dw = np.einsum("nol,nkl->ok", gf, cols)
            pgrad[layer.w_off : layer.w_off + layer.w_len] += dw.ravel()
            if layer.b_len:
                pgrad[layer.b_off : layer.b_off + layer.b_len] += gf.sum(axis=(0, 2))
            w2 = net.weight_view(layer).reshape(co, -1)
            dcols = np.einsum("ok,nol->nkl", w2, gf)
            accumulate(
                layer.srcs[0],
                _col2im(dcols, src.shape, layer.k, layer.stride, layer.pad, ho, wo),
            )
        elif kind == "avgpool":
            src = tape.values[layer.srcs[0]]
            n, c = src.shape[0], src.shape[1]
            _, ho, wo = layer.out_shape
            cnt = _pool_counts(src.shape[2], src.shape[3], layer.k, layer.stride, layer.pad, ho, wo)
            gw = (g / cnt[None, None]).reshape(n, c, 1, ho * wo)
            dcols = np.broadcast_to(gw, (n, c, layer.k * layer.k, ho * wo)).reshape(
                n, c * layer.k * layer.k, ho * wo
            )
            accumulate(
                layer.srcs[0],
                _col2im(dcols, src.shape, layer.k, layer.stride, layer.pad, ho, wo),
            )
        elif kind == "global_avg_pool":
            src_shape = tape.values[layer.srcs[0]].shape
            area = src_shape[2] * src_shape[3]
            accumulate(
                layer.srcs[0],
                np.broadcast_to(g[:, :, None, None] / area, src_shape).copy(),
            )
        elif kind == "linear":
            src = tape.values[layer.srcs[0]]
            pgrad[layer.w_off : layer.w_off + layer.w_len] += (g.T @ src).ravel()
            if layer.b_len:
                pgrad[layer.b_off : layer.b_off + layer.b_len] += g.sum(axis=0)
            accumulate(layer.srcs[0], g @ net.weight_view(layer))
    if return_input_grad:
        g0 = grads[0]
        if g0 is None:
            g0 = np.zeros_like(tape.values[0])
        return pgrad, g0
    return pgrad


def activation_pattern(net: Network, tape: Tape) -> np.ndarray:
    """Boolean (N, units) array: one bit per relu unit per sample, layer-major.

    A bit is set iff the pre-activation is strictly positive; exact zeros map
    to 0 so ties break deterministically.
    """
    chunks = []
    n = tape.values[0].shape[0]
    for layer in net.layers:
        if layer.kind == "relu":
            pre = tape.values[layer.srcs[0]]
            chunks.append((pre > 0).reshape(n, -1))
    if not chunks:
        raise NoReluError("network has no relu layers")
    return np.concatenate(chunks, axis=1)
