"""Acceptance suite: one test per release criterion, each printing a verdict.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines. The full-space search (criterion 7) takes a minute or two; everything
else is seconds.
"""

import dataclasses
import itertools
import math
import os
import time

import numpy as np
import pytest

from conftest import fd_param_grad, make_lut, rel_err
from zsnas import hardware, nn
from zsnas.bench import BenchRecord, kendall_tau, tau_sweep
from zsnas.proxies import (
    ProxyConfig,
    condition_number,
    count_linear_regions,
    jacobi_eigenvalues,
    ntk_matrix,
)
from zsnas.search import InfeasibleBudgetError, SearchConfig, run_search
from zsnas.space import (
    CellArch,
    MacroConfig,
    OpKind,
    SupernetState,
    apply_prune,
    candidate_prunes,
    enumerate_space,
    format_arch,
    parse_arch,
)

DESK = MacroConfig(cells_per_stage=1, input_shape=(3, 8, 8))
ALL_SKIP = "|skip_connect~0|+|skip_connect~0|skip_connect~1|+|skip_connect~0|skip_connect~1|skip_connect~2|"


def verdict(number: int, name: str) -> None:
    print(f"\nACCEPTANCE CRITERION {number} ({name}): PASS")


# -----------------------------------------------------------------------
# 1. gradient suite
# -----------------------------------------------------------------------


def _kink_safe_input(net: nn.Network, shape, rng) -> np.ndarray:
    # central differences straddle the relu kink when a pre-activation sits
    # within ~h of zero; redraw until every unit has a comfortable margin
    for _ in range(100):
        x = rng.standard_normal((2,) + shape)
        _, tape = nn.forward(net, x)
        margins = [
            float(np.abs(tape.values[l.srcs[0]]).min())
            for l in net.layers
            if l.kind == "relu"
        ]
        if not margins or min(margins) > 1e-4:
            return x
    raise AssertionError("could not sample a kink-safe input")


def test_criterion_1_gradient_suite():
    """Analytic vs central finite differences for every primitive, 100 seeds."""
    start = time.perf_counter()
    nets = {
        "conv2d": ([nn.Layer("conv2d", (0,), c_in=2, c_out=2, k=3, stride=1, pad=1)], (2, 4, 4)),
        "conv_strided": ([nn.Layer("conv2d", (0,), c_in=1, c_out=2, k=3, stride=2, pad=1)], (1, 5, 5)),
        "relu": ([nn.Layer("conv2d", (0,), c_in=1, c_out=2, k=1),
                  nn.Layer("relu", (1,))], (1, 3, 3)),
        "avgpool": ([nn.Layer("conv2d", (0,), c_in=1, c_out=2, k=1),
                     nn.Layer("avgpool", (1,), k=3, stride=1, pad=1)], (1, 4, 4)),
        "global_avg_pool": ([nn.Layer("conv2d", (0,), c_in=1, c_out=2, k=1),
                             nn.Layer("global_avg_pool", (1,))], (1, 3, 3)),
        "linear": ([nn.Layer("global_avg_pool", (0,)),
                    nn.Layer("linear", (1,), c_in=2, c_out=3)], (2, 2, 2)),
    }
    for name, (tail, shape) in nets.items():
        for seed in range(100):
            net = nn.Network([nn.Layer("input")] + list(tail), shape)
            nn.init_params(net, seed)
            rng = np.random.default_rng(10_000 + seed)
            x = _kink_safe_input(net, shape, rng)
            y, tape = nn.forward(net, x)
            seed_grad = rng.standard_normal(y.shape)
            analytic = nn.grad_params(net, tape, seed_grad)
            numeric = fd_param_grad(net, x, seed_grad, h=1e-5)
            err = rel_err(analytic, numeric)
            assert err < 1e-4, f"{name} seed {seed}: relative error {err:.2e}"
    elapsed = time.perf_counter() - start
    assert elapsed < 60.0, f"gradient suite took {elapsed:.1f}s"
    verdict(1, "gradient suite")


# -----------------------------------------------------------------------
# 2. gradient-kernel suite
# -----------------------------------------------------------------------


def _two_layer_net(seed: int) -> nn.Network:
    layers = [
        nn.Layer("input"),
        nn.Layer("conv2d", (0,), c_in=1, c_out=2, k=3, pad=1),
        nn.Layer("relu", (1,)),
        nn.Layer("conv2d", (2,), c_in=2, c_out=1, k=1),
    ]
    return nn.init_params(nn.Network(layers, (1, 3, 3)), seed)


def test_criterion_2_ntk_suite():
    """Symmetry, positive semidefiniteness, duplicate sentinel, FD Jacobian."""
    for seed in range(10):
        net = _two_layer_net(seed)
        batch = np.random.default_rng(200 + seed).standard_normal((6, 1, 3, 3))
        theta = ntk_matrix(net, batch)
        assert np.abs(theta - theta.T).max() < 1e-8
        evals = jacobi_eigenvalues(theta)
        assert evals.min() >= -1e-8 * max(evals.max(), 0.0)

    net = _two_layer_net(77)
    x = np.random.default_rng(300).standard_normal((1, 1, 3, 3))
    dup = np.concatenate([x, np.random.default_rng(301).standard_normal((3, 1, 3, 3)), x])
    assert condition_number(ntk_matrix(net, dup)) == math.inf

    net = _two_layer_net(5)
    batch = np.random.default_rng(302).standard_normal((4, 1, 3, 3))
    theta = ntk_matrix(net, batch)
    h = 1e-5
    jac = np.empty((4, net.param_count))
    for p in range(net.param_count):
        orig = net.params[p]
        net.params[p] = orig + h
        yp, _ = nn.forward(net, batch)
        net.params[p] = orig - h
        ym, _ = nn.forward(net, batch)
        net.params[p] = orig
        jac[:, p] = (yp - ym).reshape(4, -1).sum(axis=1) / (2 * h)
    assert rel_err(theta, jac @ jac.T) < 1e-3
    verdict(2, "gradient-kernel suite")


# -----------------------------------------------------------------------
# 3. eigensolver vs shifted power iteration
# -----------------------------------------------------------------------


def _dominant_eigenvalue(m: np.ndarray, iters: int = 500_000, tol: float = 1e-14) -> float:
    v = np.full(m.shape[0], 1.0 / math.sqrt(m.shape[0]))
    prev = math.inf
    for i in range(iters):
        w = m @ v
        v = w / np.linalg.norm(w)
        if i % 16 == 0:
            val = float(v @ (m @ v))
            if abs(val - prev) <= tol * max(1.0, abs(val)):
                return val
            prev = val
    return float(v @ (m @ v))


def _power_iteration_kappa(a: np.ndarray) -> float:
    n = a.shape[0]
    shift = float(np.abs(a).sum(axis=1).max()) + 1.0  # Gershgorin radius
    lmax = _dominant_eigenvalue(a + shift * np.eye(n)) - shift
    lmin = lmax + 1.0 - _dominant_eigenvalue((lmax + 1.0) * np.eye(n) - a)
    return lmax / lmin


def test_criterion_3_eigensolver():
    assert condition_number(np.eye(16)) == 1.0
    assert abs(condition_number(np.diag([9.0, 1.0])) - 9.0) < 1e-10
    rng = np.random.default_rng(42)
    for trial in range(10):
        # random orthogonal basis; eigenvalues spaced for oracle convergence
        q, _ = np.linalg.qr(rng.standard_normal((32, 32)))
        evals = np.sort(rng.uniform(0.5, 10.0, size=32))
        for i in range(1, 32):
            evals[i] = max(evals[i], evals[i - 1] * 1.05)
        a = (q * evals) @ q.T
        a = 0.5 * (a + a.T)
        ours = condition_number(a)
        oracle = _power_iteration_kappa(a)
        assert abs(ours - oracle) < 1e-6 * oracle, f"trial {trial}: {ours} vs {oracle}"
    verdict(3, "eigensolver vs shifted power iteration")


# -----------------------------------------------------------------------
# 4. linear regions vs exhaustive sign enumeration
# -----------------------------------------------------------------------


def test_criterion_4_linear_regions():
    rng = np.random.default_rng(7)

    # (a) 3 relu units behind a bias-free linear map, oracle on raw weights
    w = rng.standard_normal((3, 2))
    layers = [
        nn.Layer("input"),
        nn.Layer("global_avg_pool", (0,)),
        nn.Layer("linear", (1,), c_in=2, c_out=3, bias=False),
        nn.Layer("relu", (2,)),
    ]
    net = nn.Network(layers, (2, 1, 1))
    net.params[:] = w.ravel()
    pts = rng.standard_normal((40, 2))
    _, tape = nn.forward(net, pts.reshape(-1, 2, 1, 1))
    bits = nn.activation_pattern(net, tape)
    ours = len({row.tobytes() for row in np.packbits(bits, axis=1)})
    oracle = len({tuple((w @ p) > 0) for p in pts})
    assert ours == oracle

    # (b) 8 relu units behind a 1x1 conv, oracle via an explicit einsum
    wc = rng.standard_normal((2, 1))
    layers = [
        nn.Layer("input"),
        nn.Layer("conv2d", (0,), c_in=1, c_out=2, k=1, bias=False),
        nn.Layer("relu", (1,)),
    ]
    net = nn.Network(layers, (1, 2, 2))
    net.params[:] = wc.ravel()
    samples = rng.standard_normal((30, 1, 2, 2))
    _, tape = nn.forward(net, samples)
    bits = nn.activation_pattern(net, tape)
    ours = len({row.tobytes() for row in np.packbits(bits, axis=1)})
    pre = np.einsum("oc,nchw->nohw", wc, samples)
    oracle = len({tuple((s > 0).ravel()) for s in pre})
    assert ours == oracle

    # (c) the identity-only cell is one affine region
    cfg = ProxyConfig(batch_size=4, lr_samples=256, seed=1)
    assert count_linear_regions(parse_arch(ALL_SKIP), DESK, cfg) == 1
    verdict(4, "linear regions vs exhaustive enumeration")


# -----------------------------------------------------------------------
# 5. FLOPs / params
# -----------------------------------------------------------------------


def test_criterion_5_flops_params():
    assert hardware._conv_cost(16, 16, 3, 32, 32)[0] == 4_718_592

    all_none = CellArch(tuple([OpKind.NONE] * 6))
    all_conv = CellArch(tuple([OpKind.NOR_CONV_3X3] * 6))
    lo = hardware.count_flops(all_none, DESK).flops
    hi = hardware.count_flops(all_conv, DESK).flops
    rng = np.random.default_rng(11)
    for _ in range(100):
        a = CellArch(tuple(OpKind(int(v)) for v in rng.integers(0, 5, size=6)))
        assert lo <= hardware.count_flops(a, DESK).flops <= hi

    full = MacroConfig()  # 32x32 input, N=5
    lo_full = hardware.count_flops(all_none, full).flops
    hi_full = hardware.count_flops(all_conv, full).flops
    assert lo_full <= 51_040_000 <= hi_full
    assert lo_full <= 188_660_000 <= hi_full
    verdict(5, "FLOPs and parameter counting")


# -----------------------------------------------------------------------
# 6. latency model
# -----------------------------------------------------------------------


def test_criterion_6_latency_model():
    table = make_lut(DESK)  # integer-valued entries: float sums stay exact

    # exact additive reconstruction
    arch = parse_arch(
        "|nor_conv_1x1~0|+|avg_pool_3x3~0|none~1|+|skip_connect~0|none~1|nor_conv_3x3~2|"
    )
    bd = hardware.estimate_latency(arch, DESK, table)
    assert bd.latency_us == sum(r.latency_us for r in bd.rows) + table.overhead_us

    # removing one op drops the total by exactly its table entries
    ops = list(arch.ops)
    ops[5] = OpKind.NONE
    without = hardware.estimate_latency(CellArch(tuple(ops)), DESK, table)
    per_instance = [r.latency_us for r in bd.rows if r.op == "nor_conv_3x3"]
    assert bd.latency_us - without.latency_us == sum(per_instance)

    # brute force over the completions of a 3-edge toy state
    choices = [(OpKind.NONE,)] * 6
    choices[0] = (OpKind.SKIP_CONNECT, OpKind.NOR_CONV_1X1)
    choices[2] = (OpKind.NONE, OpKind.NOR_CONV_3X3, OpKind.AVG_POOL_3X3)
    choices[4] = (OpKind.NONE, OpKind.NOR_CONV_1X1)
    st = SupernetState(tuple(choices))
    brute = min(
        hardware.estimate_latency(CellArch(combo), DESK, table).latency_us
        for combo in itertools.product(*st.choices)
    )
    assert hardware.min_completion_latency(st, DESK, table) == brute

    # the bound never decreases along any pruning path
    rng = np.random.default_rng(13)
    st = SupernetState.full()
    bound = hardware.min_completion_latency(st, DESK, table)
    while not st.resolved:
        cands = candidate_prunes(st)
        st = apply_prune(st, *cands[rng.integers(len(cands))])
        new_bound = hardware.min_completion_latency(st, DESK, table)
        assert new_bound >= bound
        bound = new_bound
    verdict(6, "latency model")


# -----------------------------------------------------------------------
# 7. search efficiency, budget safety, determinism
# -----------------------------------------------------------------------


def test_criterion_7_search():
    table = make_lut(DESK)
    floor = hardware.min_completion_latency(SupernetState.full(), DESK, table)
    budget = floor + 2 * 3 * 160.0 + 4 * 3 * 12.0  # room for two conv edges

    proxy = ProxyConfig(batch_size=8, ntk_repeats=3, lr_samples=128, seed=2024)
    cfg = SearchConfig(macro=DESK, proxy=proxy, lut=table, latency_budget_us=budget)
    start = time.perf_counter()
    report = run_search(cfg)
    elapsed = time.perf_counter() - start

    assert report.proxy_evaluations <= 120
    ratio = 15625 / report.proxy_evaluations
    assert ratio >= 130.0
    assert report.scores.latency_us <= budget
    assert len(report.prune_log) == 24
    assert elapsed < 600.0, f"full search took {elapsed:.0f}s"

    # infeasible budgets error out with the blocking bound
    bad = SearchConfig(macro=DESK, proxy=proxy, lut=table, latency_budget_us=floor - 1.0)
    with pytest.raises(InfeasibleBudgetError) as err:
        run_search(bad)
    assert err.value.bound == floor

    # identical seeds across thread counts
    choices = [(OpKind.NONE,)] * 6
    choices[0] = (OpKind.NONE, OpKind.NOR_CONV_1X1)
    choices[4] = (OpKind.SKIP_CONNECT, OpKind.AVG_POOL_3X3)
    st = SupernetState(tuple(choices))
    fast = ProxyConfig(batch_size=4, ntk_repeats=1, lr_samples=16, seed=6)
    r1 = run_search(SearchConfig(macro=DESK, proxy=fast, initial_state=st, threads=1))
    r8 = run_search(SearchConfig(macro=DESK, proxy=fast, initial_state=st, threads=8))
    strip = lambda r: dataclasses.replace(r, wall_time_s=0.0)
    assert strip(r1) == strip(r8)

    print(f"\n  full-space search: {report.proxy_evaluations} evaluations "
          f"({ratio:.0f}x fewer than exhaustive), {elapsed:.0f}s, arch {report.arch}")
    verdict(7, "pruning search")


# -----------------------------------------------------------------------
# 8. Kendall tau
# -----------------------------------------------------------------------


def brute_force_tau(a, b) -> float:
    n = len(a)
    concordant = discordant = tied_a = tied_b = 0
    for i in range(n):
        for j in range(i + 1, n):
            if a[i] == a[j] and b[i] == b[j]:
                continue
            if a[i] == a[j]:
                tied_a += 1
            elif b[i] == b[j]:
                tied_b += 1
            elif ((a[i] - a[j]) > 0) == ((b[i] - b[j]) > 0):
                concordant += 1
            else:
                discordant += 1
    return (concordant - discordant) / math.sqrt(
        (concordant + discordant + tied_a) * (concordant + discordant + tied_b)
    )


def test_criterion_8_kendall_tau():
    rng = np.random.default_rng(99)
    checked = 0
    while checked < 1000:
        n = int(rng.integers(2, 30))
        # mixed continuous and small-integer draws so ties actually occur
        if rng.random() < 0.5:
            a = rng.integers(0, 5, size=n).astype(float)
            b = rng.integers(0, 5, size=n).astype(float)
        else:
            a = rng.standard_normal(n)
            b = rng.standard_normal(n)
        if np.all(a == a[0]) or np.all(b == b[0]):
            continue
        assert kendall_tau(a, b) == brute_force_tau(a.tolist(), b.tolist())
        checked += 1

    xs = list(range(50))
    assert kendall_tau(xs, [2.0 * x + 1 for x in xs]) == 1.0
    assert kendall_tau(xs, [-x for x in xs]) == -1.0
    assert kendall_tau([1, 1, 2, 3], [1, 2, 2, 4]) == brute_force_tau([1, 1, 2, 3], [1, 2, 2, 4])
    verdict(8, "Kendall tau")


# -----------------------------------------------------------------------
# 9. optional: directional consistency against real benchmark accuracies
# -----------------------------------------------------------------------


@pytest.mark.skipif(
    "ZSNAS_BENCH_FILE" not in os.environ,
    reason="set ZSNAS_BENCH_FILE to a bench JSONL file with real accuracies",
)
def test_criterion_9_benchmark_direction():
    from zsnas.bench import load_bench

    records = load_bench(os.environ["ZSNAS_BENCH_FILE"])
    cfg = ProxyConfig(batch_size=8, ntk_repeats=1, lr_samples=64, seed=0)
    kappa_report = tau_sweep(records, "kappa", "batch_size", [8], DESK, cfg, sample=500)
    lr_report = tau_sweep(records, "lr", "batch_size", [8], DESK, cfg, sample=500)
    assert kappa_report.taus[0] > 0.0
    assert lr_report.taus[0] > 0.0
    verdict(9, "benchmark directional consistency")
