"""Joint operator-fusion and AllReduce-bucketing optimizer for
data-parallel training graphs."""

from .graph import (
    AllReduceInstr,
    DataEdge,
    FusionGroup,
    GraphMeta,
    HloGraph,
    OpNode,
    TensorBucket,
    build_graph,
    canonical_hash,
    load_graph,
    module_stats,
    save_graph,
    topo_order,
    validate_module,
)
from .rewrite import (
    OptimizationMethod,
    RewriteOutcome,
    fuse_allreduce,
    fuse_dup,
    fuse_nondup,
    neighbors_allreduce,
    random_apply,
)
from .simulator import CostProviders, Timeline, cost, fo_bound, simulate
from .comm import CommModelParams, CommSample, fit, predict, ring_allreduce_time
from .estimator import (
    EstimatorModel,
    EstimatorVariant,
    Profile,
    SubgraphFeatures,
    TrainConfig,
    adam_step,
    featurize,
    loss,
    lookup,
    make_cost_providers,
    predict_fused,
    train,
)
from .workloads import (
    HardwareParams,
    WorkloadSpec,
    gen_training_samples,
    gen_workload,
    make_profile,
    oracle_providers,
    oracle_time,
)
from .search import (
    SearchConfig,
    SearchResult,
    backtracking_search,
    exhaustive_search,
    greedy_postorder_fusion,
    threshold_allreduce_fusion,
)

__version__ = "0.1.0"
