"""Trainless performance indicators computed at initialization.

Two proxies rank candidate cells without any training: the condition number
of the per-sample gradient Gram matrix (trainability) and the number of
distinct relu activation patterns over a random input sample (expressivity).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import hardware
from .nn import Network, activation_pattern, forward, grad_params
from .space import (
    CellArch,
    MacroConfig,
    SupernetState,
    build_full_network,
    build_lr_network,
    format_arch,
    supernet_lr_network,
    supernet_network,
)
from .util import derive_seed, json_safe

__all__ = [
    "ProxyConfig",
    "ProxyScores",
    "NonSymmetricError",
    "NonConvergenceError",
    "BatchFileError",
    "jacobi_eigenvalues",
    "condition_number",
    "ntk_matrix",
    "ntk_kappa",
    "ntk_kappa_for_state",
    "count_linear_regions",
    "count_linear_regions_for_state",
    "read_batch_file",
    "score_arch",
]

SENTINEL = math.inf

_LR_FORWARD_CHUNK = 256


class NonSymmetricError(ValueError):
    """Matrix is not symmetric within tolerance."""


class NonConvergenceError(RuntimeError):
    """Jacobi sweeps did not reduce the off-diagonal mass in time."""


class BatchFileError(ValueError):
    """Raw batch file is malformed."""


def _off_norm(a: np.ndarray) -> float:
    # summed from the off-diagonal entries themselves: no cancellation floor
    off = a.copy()
    np.fill_diagonal(off, 0.0)
    return float(np.linalg.norm(off))


@dataclass(frozen=True)
class ProxyConfig:
    batch_size: int = 32
    ntk_repeats: int = 3
    lr_samples: int = 1000
    lr_input_resolution: tuple[int, int, int] = (3, 8, 8)
    seed: int = 0
    input_source: str = "gaussian"  # or "image_file"
    batch_file: str | None = None

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.ntk_repeats < 1:
            raise ValueError("ntk_repeats must be >= 1")
        if self.lr_samples < 1:
            raise ValueError("lr_samples must be >= 1")
        if self.input_source not in ("gaussian", "image_file"):
            raise ValueError(f"unknown input source {self.input_source!r}")
        if self.input_source == "image_file" and not self.batch_file:
            raise ValueError("image_file source needs batch_file")


@dataclass(frozen=True)
class ProxyScores:
    """All indicators for one architecture; latency only when a table was given."""

    kappa: float
    kappa_per_repeat: tuple[float, ...]
    lr_count: int
    flops: int
    params: int
    latency_us: float | None = None

    def to_dict(self) -> dict:
        d = {
            "kappa": json_safe(self.kappa),
            "kappa_per_repeat": [json_safe(k) for k in self.kappa_per_repeat],
            "lr_count": self.lr_count,
            "flops": self.flops,
            "params": self.params,
        }
        if self.latency_us is not None:
            d["latency_us"] = self.latency_us
        return d


def jacobi_eigenvalues(
    a: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100
) -> np.ndarray:
    """Eigenvalues of a symmetric matrix via cyclic Jacobi rotations.

    Converged when the off-diagonal Frobenius norm drops below tol times the
    (rotation-invariant) Frobenius norm of the input.
    """
    A = np.array(a, dtype=np.float64)
    n = A.shape[0]
    if n == 1:
        return A.diagonal().copy()
    norm = float(np.linalg.norm(A))
    if norm == 0.0:
        return np.zeros(n)
    for _ in range(max_sweeps):
        if _off_norm(A) < tol * norm:
            return A.diagonal().copy()
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if apq == 0.0:
                    continue
                diff = A[q, q] - A[p, p]
                if abs(apq) * 1e100 < abs(diff):
                    t = apq / diff  # first-order rotation, avoids overflow in theta
                else:
                    theta = diff / (2.0 * apq)
                    t = math.copysign(1.0, theta) / (abs(theta) + math.hypot(1.0, theta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = t * c
                app, aqq = A[p, p], A[q, q]
                col_p = A[:, p].copy()
                col_q = A[:, q].copy()
                A[:, p] = c * col_p - s * col_q
                A[:, q] = s * col_p + c * col_q
                row_p = A[p, :].copy()
                row_q = A[q, :].copy()
                A[p, :] = c * row_p - s * row_q
                A[q, :] = s * row_p + c * row_q
                A[p, p] = app - t * apq
                A[q, q] = aqq + t * apq
                A[p, q] = 0.0
                A[q, p] = 0.0
    off = _off_norm(A)
    if off < tol * norm:
        return A.diagonal().copy()
    raise NonConvergenceError(
        f"off-diagonal norm {off:.3e} above {tol:.0e} * {norm:.3e} after {max_sweeps} sweeps"
    )


def condition_number(theta: np.ndarray) -> float:
    """lambda_max / lambda_min of a symmetric matrix, +inf when near-singular.

    The sentinel is returned whenever lambda_min <= 1e-12 * lambda_max, which
    also covers rank-deficient and all-zero kernels.
    """
    theta = np.asarray(theta, dtype=np.float64)
    if theta.ndim != 2 or theta.shape[0] != theta.shape[1]:
        raise NonSymmetricError(f"expected a square matrix, got shape {theta.shape}")
    asym = float(np.abs(theta - theta.T).max())
    if asym > 1e-8:
        raise NonSymmetricError(f"matrix asymmetry {asym:.3e} exceeds 1e-8")
    evals = jacobi_eigenvalues(0.5 * (theta + theta.T))
    lmax = float(evals.max())
    lmin = float(evals.min())
    if lmax <= 0.0 or lmin <= 1e-12 * lmax:
        return SENTINEL
    return lmax / lmin


def ntk_matrix(net: Network, batch: np.ndarray) -> np.ndarray:
    """B x B Gram matrix of per-sample parameter gradients.

    Row i is the gradient of the summed logits of sample i over the flat
    parameter vector; the result is J @ J.T mirrored to be exactly symmetric.
    """
    batch = np.asarray(batch, dtype=np.float64)
    b = batch.shape[0]
    if b < 2:
        raise ValueError(f"need a batch of at least 2 samples, got {b}")
    jac = np.empty((b, net.param_count), dtype=np.float64)
    for i in range(b):
        y, tape = forward(net, batch[i : i + 1])
        jac[i] = grad_params(net, tape, np.ones_like(y))
    t = jac @ jac.T
    upper = np.triu(t)
    return upper + np.triu(t, 1).T


def _gaussian_batch(shape: tuple[int, ...], seed: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal(shape)


_batch_file_cache: dict[str, np.ndarray] = {}


def read_batch_file(path: str) -> np.ndarray:
    """Load a raw batch: 4 uint32 LE dims (N, C, H, W) then float32 LE data."""
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) != 16:
            raise BatchFileError(f"{path}: truncated header")
        n, c, h, w = struct.unpack("<4I", head)
        if min(n, c, h, w) < 1:
            raise BatchFileError(f"{path}: non-positive dimension in header {(n, c, h, w)}")
        count = n * c * h * w
        raw = fh.read(4 * count)
        if len(raw) != 4 * count:
            raise BatchFileError(
                f"{path}: expected {4 * count} data bytes, found {len(raw)}"
            )
        if fh.read(1):
            raise BatchFileError(f"{path}: trailing bytes after {count} floats")
    data = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    return data.reshape(n, c, h, w)


def _file_batch(cfg: ProxyConfig, shape: tuple[int, int, int], repeat: int) -> np.ndarray:
    data = _batch_file_cache.get(cfg.batch_file)
    if data is None:
        data = read_batch_file(cfg.batch_file)
        _batch_file_cache[cfg.batch_file] = data
    if data.shape[1:] != shape:
        raise BatchFileError(
            f"{cfg.batch_file}: sample shape {data.shape[1:]} does not match network input {shape}"
        )
    if data.shape[0] < cfg.batch_size:
        raise BatchFileError(
            f"{cfg.batch_file}: {data.shape[0]} samples < batch size {cfg.batch_size}"
        )
    start = ((repeat - 1) * cfg.batch_size) % data.shape[0]
    idx = (start + np.arange(cfg.batch_size)) % data.shape[0]
    return data[idx]


def _draw_batch(cfg: ProxyConfig, shape: tuple[int, int, int], seed: int, repeat: int) -> np.ndarray:
    if cfg.input_source == "gaussian":
        return _gaussian_batch((cfg.batch_size,) + shape, seed)
    return _file_batch(cfg, shape, repeat)


def _kappa_for_builder(
    builder: Callable[[int], Network],
    subject_key: str,
    cfg: ProxyConfig,
    input_shape: tuple[int, int, int],
) -> tuple[float, tuple[float, ...]]:
    per_repeat = []
    for r in range(1, cfg.ntk_repeats + 1):
        net = builder(derive_seed(cfg.seed, subject_key, "ntk-init", r))
        batch = _draw_batch(cfg, input_shape, derive_seed(cfg.seed, subject_key, "ntk-batch", r), r)
        per_repeat.append(condition_number(ntk_matrix(net, batch)))
    mean = SENTINEL if any(math.isinf(k) for k in per_repeat) else sum(per_repeat) / len(per_repeat)
    return mean, tuple(per_repeat)


def ntk_kappa(a: CellArch, m: MacroConfig, cfg: ProxyConfig) -> tuple[float, tuple[float, ...]]:
    """Mean condition number over ntk_repeats fresh (init, batch) draws."""
    return _kappa_for_builder(
        lambda seed: build_full_network(a, m, seed), format_arch(a), cfg, m.input_shape
    )


def ntk_kappa_for_state(
    st: SupernetState, m: MacroConfig, cfg: ProxyConfig
) -> tuple[float, tuple[float, ...]]:
    return _kappa_for_builder(
        lambda seed: supernet_network(st, m, seed), st.key(), cfg, m.input_shape
    )


def _regions_for_builder(
    builder: Callable[[int], Network], subject_key: str, cfg: ProxyConfig
) -> int:
    net = builder(derive_seed(cfg.seed, subject_key, "lr-init"))
    if net.num_relu_units == 0:
        return 1  # affine map: a single region
    rng = np.random.default_rng(derive_seed(cfg.seed, subject_key, "lr-batch"))
    samples = rng.standard_normal((cfg.lr_samples,) + cfg.lr_input_resolution)
    patterns: set[bytes] = set()
    for lo in range(0, cfg.lr_samples, _LR_FORWARD_CHUNK):
        chunk = samples[lo : lo + _LR_FORWARD_CHUNK]
        _, tape = forward(net, chunk)
        bits = activation_pattern(net, tape)
        packed = np.packbits(bits, axis=1)
        for row in packed:
            patterns.add(row.tobytes())
    return len(patterns)


def count_linear_regions(a: CellArch, m: MacroConfig, cfg: ProxyConfig) -> int:
    """Distinct activation patterns among lr_samples gaussian inputs."""
    return _regions_for_builder(
        lambda seed: build_lr_network(a, m, seed, cfg.lr_input_resolution),
        format_arch(a),
        cfg,
    )


def count_linear_regions_for_state(st: SupernetState, m: MacroConfig, cfg: ProxyConfig) -> int:
    return _regions_for_builder(
        lambda seed: supernet_lr_network(st, m, seed, cfg.lr_input_resolution),
        st.key(),
        cfg,
    )


def score_arch(
    a: CellArch,
    m: MacroConfig,
    cfg: ProxyConfig,
    lut: "hardware.LatencyTable | None" = None,
) -> ProxyScores:
    """All indicators for one architecture."""
    kappa, per_repeat = ntk_kappa(a, m, cfg)
    regions = count_linear_regions(a, m, cfg)
    breakdown = hardware.estimate_latency(a, m, lut) if lut else hardware.count_flops(a, m)
    return ProxyScores(
        kappa=kappa,
        kappa_per_repeat=per_repeat,
        lr_count=regions,
        flops=breakdown.flops,
        params=breakdown.params,
        latency_us=breakdown.latency_us if lut else None,
    )
