"""Deterministic discrete-event simulator for multi-tenant GPU clusters."""

from .cluster import (
    MILLI,
    ClusterTopology,
    GpuDevice,
    Node,
    NodeNetGroup,
    TopologyError,
    load_topology,
    load_topology_file,
    make_topology,
    node_comm_tier,
    select_intra_node_devices,
)
from .engine import EngineError, SimConfig, SimResult, Simulation, run_simulation
from .metrics import (
    MetricsAccumulator,
    MetricsError,
    allocation_rate,
    consolidation_optimum,
    fragmentation_degree,
    fragmented_node_rate,
)
from .placement import (
    PLACEMENT_POLICIES,
    PlacementDecision,
    PlacementError,
    PlacementRequest,
    PodRequest,
    place,
    preselect_groups,
    score_node,
    topology_rank,
)
from .presets import PRESET_NAMES, Preset, PresetError, get_preset
from .queueing import (
    QUEUE_POLICIES,
    JobRun,
    PreemptionPlan,
    QueueingError,
    QueueScheduler,
    QuotaLedger,
    build_node_clearing_plan,
    build_preemption_plan,
)
from .snapshot import (
    Change,
    ResourceSnapshot,
    SnapshotError,
    SnapshotStore,
    advance_snapshot,
    initial_snapshot,
)
from .workload import (
    GeneratorParams,
    Job,
    PodSpec,
    TenantQuota,
    Trace,
    TraceError,
    generate_trace,
    load_quotas,
    load_quotas_file,
    parse_trace,
    parse_trace_file,
    write_trace,
    write_trace_file,
)

__version__ = "0.1.0"
