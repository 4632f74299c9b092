"""Hardware-aware pruning search over the cell supernet.

Each round scores every available (edge, op) removal against the round-start
supernet, rank-aggregates the per-metric deltas with tunable weights, and
applies the winning prunes. The default schedule removes one operator from
every undecided edge per round, so a full search needs only
(ops_per_edge - 1) rounds of supernet evaluations instead of one evaluation
per architecture; a one-removal-per-round schedule is available as
schedule="global".

Budgets are enforced by lower-bound blocking: a removal is never applied if
the cheapest completion of the resulting state would exceed a configured
FLOPs or latency budget, so any returned architecture is feasible by
construction.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from . import hardware
from .hardware import LatencyTable
from .proxies import (
    ProxyConfig,
    ProxyScores,
    count_linear_regions_for_state,
    ntk_kappa_for_state,
    score_arch,
)
from .space import (
    EDGES,
    MacroConfig,
    OpKind,
    SupernetState,
    apply_prune,
    candidate_prunes,
    format_arch,
)

__all__ = [
    "SearchConfig",
    "SearchReport",
    "PruneStep",
    "Candidate",
    "InfeasibleBudgetError",
    "score_candidate",
    "rank_aggregate",
    "run_search",
]

SCHEDULES = ("per_edge", "global")


class InfeasibleBudgetError(RuntimeError):
    """No budget-respecting prune exists; carries the blocking lower bound."""

    def __init__(self, message: str, bound: float, budget: float):
        super().__init__(message)
        self.bound = bound
        self.budget = budget


@dataclass(frozen=True)
class SearchConfig:
    macro: MacroConfig
    proxy: ProxyConfig
    w_kappa: float = 1.0
    w_lr: float = 1.0
    w_flops: float = 0.0
    w_latency: float = 0.0
    latency_budget_us: float | None = None
    flops_budget: int | None = None
    lut: LatencyTable | None = None
    schedule: str = "per_edge"
    threads: int = 1
    initial_state: SupernetState | None = None

    def __post_init__(self):
        weights = (self.w_kappa, self.w_lr, self.w_flops, self.w_latency)
        if any(w < 0 or not math.isfinite(w) for w in weights):
            raise ValueError("weights must be finite and >= 0")
        if self.w_kappa == 0 and self.w_lr == 0:
            raise ValueError("at least one of w_kappa, w_lr must be positive")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        if (self.w_latency > 0 or self.latency_budget_us is not None) and self.lut is None:
            raise ValueError("a latency table is required when latency drives the search")

    @property
    def seed(self) -> int:
        return self.proxy.seed


@dataclass(frozen=True)
class StateScores:
    kappa: float
    lr_count: int
    expected_flops: float
    expected_latency_us: float | None


@dataclass
class Candidate:
    edge: int
    op: OpKind
    d_kappa: float
    d_lr: int
    d_flops: float
    d_latency: float
    ranks: dict[str, int] = field(default_factory=dict)
    combined: float = 0.0


@dataclass(frozen=True)
class PruneStep:
    round: int
    edge: int
    op: OpKind
    ranks: dict[str, int]
    combined: float
    surviving_total: int
    expected_flops: float
    expected_latency_us: float | None

    def to_dict(self) -> dict:
        d = {
            "round": self.round,
            "edge": self.edge,
            "edge_nodes": list(EDGES[self.edge]),
            "op": self.op.op_name,
            "ranks": self.ranks,
            "combined": self.combined,
            "surviving_total": self.surviving_total,
            "expected_flops": self.expected_flops,
        }
        if self.expected_latency_us is not None:
            d["expected_latency_us"] = self.expected_latency_us
        return d


@dataclass(frozen=True)
class SearchReport:
    arch: str
    scores: ProxyScores
    prune_log: tuple[PruneStep, ...]
    proxy_evaluations: int
    rounds: int
    wall_time_s: float

    def final_dict(self) -> dict:
        return {
            "arch": self.arch,
            "scores": self.scores.to_dict(),
            "proxy_evaluations": self.proxy_evaluations,
            "rounds": self.rounds,
            "wall_time_s": self.wall_time_s,
        }


def _eval_state(st: SupernetState, cfg: SearchConfig) -> StateScores:
    kappa, _ = ntk_kappa_for_state(st, cfg.macro, cfg.proxy)
    lr = count_linear_regions_for_state(st, cfg.macro, cfg.proxy)
    eflops = hardware.expected_flops(st, cfg.macro)
    elat = hardware.expected_latency(st, cfg.macro, cfg.lut) if cfg.lut else None
    return StateScores(kappa, lr, eflops, elat)


def _kappa_delta(pruned: float, current: float) -> float:
    if math.isinf(pruned):
        return math.inf  # degenerate kernel: ranked last on trainability
    if math.isinf(current):
        return -math.inf  # removal fixed a degenerate kernel
    return pruned - current


def _delta(pruned: StateScores, current: StateScores, candidate: tuple[int, OpKind]) -> Candidate:
    edge, op = candidate
    d_lat = 0.0
    if pruned.expected_latency_us is not None and current.expected_latency_us is not None:
        d_lat = pruned.expected_latency_us - current.expected_latency_us
    return Candidate(
        edge=edge,
        op=op,
        d_kappa=_kappa_delta(pruned.kappa, current.kappa),
        d_lr=pruned.lr_count - current.lr_count,
        d_flops=pruned.expected_flops - current.expected_flops,
        d_latency=d_lat,
    )


def score_candidate(
    st: SupernetState, prune: tuple[int, OpKind], cfg: SearchConfig
) -> Candidate:
    """Per-metric deltas of applying one removal, scored against st."""
    current = _eval_state(st, cfg)
    pruned = _eval_state(apply_prune(st, *prune), cfg)
    return _delta(pruned, current, prune)


def rank_aggregate(candidates: list[Candidate], cfg: SearchConfig) -> list[Candidate]:
    """Weighted rank-sum ordering, best first.

    Each metric ranks candidates 1..n (delta kappa, flops, latency ascending;
    delta region count descending); ties inside a metric and in the combined
    score break by (edge index, op code).
    """
    if not candidates:
        raise ValueError("need at least one candidate")
    metrics = (
        ("kappa", lambda c: c.d_kappa, False, cfg.w_kappa),
        ("lr", lambda c: c.d_lr, True, cfg.w_lr),
        ("flops", lambda c: c.d_flops, False, cfg.w_flops),
        ("latency", lambda c: c.d_latency, False, cfg.w_latency),
    )
    for cand in candidates:
        cand.ranks = {}
        cand.combined = 0.0
    for name, value, descending, weight in metrics:
        order = sorted(
            candidates,
            key=lambda c: (-value(c) if descending else value(c), c.edge, int(c.op)),
        )
        for rank, cand in enumerate(order, start=1):
            cand.ranks[name] = rank
            cand.combined += weight * rank
    return sorted(candidates, key=lambda c: (c.combined, c.edge, int(c.op)))


def _budget_ok(st: SupernetState, cfg: SearchConfig) -> bool:
    if cfg.latency_budget_us is not None:
        if hardware.min_completion_latency(st, cfg.macro, cfg.lut) > cfg.latency_budget_us:
            return False
    if cfg.flops_budget is not None:
        if hardware.min_completion_flops(st, cfg.macro) > cfg.flops_budget:
            return False
    return True


def _infeasible(st: SupernetState, cfg: SearchConfig, why: str) -> InfeasibleBudgetError:
    if cfg.latency_budget_us is not None:
        bound = hardware.min_completion_latency(st, cfg.macro, cfg.lut)
        budget = cfg.latency_budget_us
    else:
        bound = float(hardware.min_completion_flops(st, cfg.macro))
        budget = float(cfg.flops_budget)
    return InfeasibleBudgetError(
        f"{why} (completion lower bound {bound}, budget {budget})",
        bound=bound,
        budget=budget,
    )


def _check_initial_feasibility(st: SupernetState, cfg: SearchConfig) -> None:
    if cfg.latency_budget_us is not None:
        bound = hardware.min_completion_latency(st, cfg.macro, cfg.lut)
        if bound > cfg.latency_budget_us:
            raise InfeasibleBudgetError(
                f"latency budget {cfg.latency_budget_us} us is below the cheapest "
                f"completion ({bound} us)",
                bound=bound,
                budget=cfg.latency_budget_us,
            )
    if cfg.flops_budget is not None:
        bound = hardware.min_completion_flops(st, cfg.macro)
        if bound > cfg.flops_budget:
            raise InfeasibleBudgetError(
                f"FLOPs budget {cfg.flops_budget} is below the cheapest "
                f"completion ({bound})",
                bound=float(bound),
                budget=float(cfg.flops_budget),
            )


def run_search(cfg: SearchConfig) -> SearchReport:
    """Prune the supernet to a single architecture under the configured budgets."""
    start = time.perf_counter()
    st = cfg.initial_state or SupernetState.full()
    _check_initial_feasibility(st, cfg)
    evaluations = 0
    log: list[PruneStep] = []
    rounds = 0
    while not st.resolved:
        rounds += 1
        current = _eval_state(st, cfg)
        evaluations += 1
        candidates = [
            cand for cand in candidate_prunes(st) if _budget_ok(apply_prune(st, *cand), cfg)
        ]
        if not candidates:
            raise _infeasible(st, cfg, "every available prune violates a budget")

        def score_one(cand: tuple[int, OpKind]) -> Candidate:
            return _delta(_eval_state(apply_prune(st, *cand), cfg), current, cand)

        if cfg.threads > 1:
            with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
                scored = list(pool.map(score_one, candidates))
        else:
            scored = [score_one(cand) for cand in candidates]
        evaluations += len(scored)
        ranked = rank_aggregate(scored, cfg)

        applied_edges: set[int] = set()
        working = st
        for cand in ranked:
            if cfg.schedule == "global" and applied_edges:
                break
            if cand.edge in applied_edges:
                continue
            pruned = apply_prune(working, cand.edge, cand.op)
            # re-check against the working state: several removals in one
            # round can jointly raise the completion lower bound
            if not _budget_ok(pruned, cfg):
                continue
            working = pruned
            applied_edges.add(cand.edge)
            log.append(
                PruneStep(
                    round=rounds,
                    edge=cand.edge,
                    op=cand.op,
                    ranks=dict(cand.ranks),
                    combined=cand.combined,
                    surviving_total=working.total_ops,
                    expected_flops=hardware.expected_flops(working, cfg.macro),
                    expected_latency_us=(
                        hardware.expected_latency(working, cfg.macro, cfg.lut)
                        if cfg.lut
                        else None
                    ),
                )
            )
        if working is st:
            raise _infeasible(st, cfg, "no prune can be applied without violating a budget")
        st = working

    arch = st.to_arch()
    scores = score_arch(arch, cfg.macro, cfg.proxy, cfg.lut)
    evaluations += 1
    if cfg.latency_budget_us is not None and scores.latency_us > cfg.latency_budget_us:
        raise AssertionError("budget safety violated; blocking logic is broken")
    if cfg.flops_budget is not None and scores.flops > cfg.flops_budget:
        raise AssertionError("budget safety violated; blocking logic is broken")
    return SearchReport(
        arch=format_arch(arch),
        scores=scores,
        prune_log=tuple(log),
        proxy_evaluations=evaluations,
        rounds=rounds,
        wall_time_s=time.perf_counter() - start,
    )
