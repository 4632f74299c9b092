"""Zero-shot, hardware-aware cell architecture search for MCU-class CNNs.

Candidate cells are scored at initialization with a gradient-kernel
condition number, a linear-region count, analytic FLOPs/params and a
lookup-table latency model; a pruning search selects an architecture under
FLOPs and latency budgets without ever training a network.
"""

from .bench import (
    BenchRecord,
    ReportEntry,
    TauReport,
    compare_report,
    kendall_tau,
    load_bench,
    tau_sweep,
)
from .hardware import (
    CostBreakdown,
    LatencyTable,
    count_flops,
    estimate_latency,
    load_latency_table,
    min_completion_flops,
    min_completion_latency,
)
from .nn import Network, Tape, activation_pattern, forward, grad_params, init_params
from .proxies import (
    ProxyConfig,
    ProxyScores,
    condition_number,
    count_linear_regions,
    jacobi_eigenvalues,
    ntk_kappa,
    ntk_matrix,
    score_arch,
)
from .search import InfeasibleBudgetError, SearchConfig, SearchReport, run_search
from .space import (
    CellArch,
    MacroConfig,
    OpKind,
    SupernetState,
    apply_prune,
    build_full_network,
    build_lr_network,
    candidate_prunes,
    enumerate_space,
    format_arch,
    parse_arch,
    supernet_network,
)

__version__ = "0.1.0"
