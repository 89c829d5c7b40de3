"""Test-time routing-pathway optimization for sparse mixture-of-experts models.

A frozen MoE classifier often routes tokens through a suboptimal set of
experts.  This package optimizes the routing weights ("pathway") of each test
sample at inference time — by oracle gradient descent, neighborhood gradient
descent on reference-set surrogate losses, kernel regression over neighbor
pathways, or meanshift mode finding — and ships a planted desk-scale
benchmark where the optimal pathway is known by construction.
"""

from .errors import (
    DegenerateEmbeddingError,
    EmptyStoreError,
    NumericError,
    PathwayError,
    SerializationError,
    StoreError,
)
from .estimator import PathwayOptimizedClassifier
from .harness import (
    ExperimentConfig,
    FlipStats,
    ReportRow,
    config_hash,
    coverage_analysis,
    evaluate_arm,
    expand_ablation_grid,
    experiment_config_from_dict,
    expert_heatmap,
    flop_proxy,
    forwards_equivalent,
    optimizer_spec_from_dict,
    optimizer_spec_to_dict,
    run_experiment,
    step_curve,
    summarize,
)
from .kernels import KERNEL_KINDS, KernelSpec, kernel_eval, kernel_eval_array, resolve_bandwidth
from .model import (
    MoEModel,
    PlantRecord,
    PlantSpec,
    cross_entropy,
    generate_planted_benchmark,
    load_model,
    save_model,
)
from .neighborhood import (
    NEIGHBORHOOD_KINDS,
    NeighborhoodSpec,
    NeighborSet,
    select_neighbors,
    select_pathway_neighbors,
)
from .optimizers import (
    LR_KINDS,
    METHODS,
    LRSchedule,
    MaskSpec,
    OptimizationTrace,
    OptimizerSpec,
    StepRecord,
    lr_at,
    optimize_kernel_regression,
    optimize_mode_finding,
    optimize_ngd,
    optimize_oracle,
    parse_lr_schedule,
    parse_span,
    run_optimizer,
)
from .pathway import (
    OptimizationMask,
    RoutingConfig,
    SparseRouting,
    apply_masked_update,
    masked_distance,
    sparsify_pathway,
    sparsify_topk,
    validate_pathway,
)
from .refstore import (
    MeanPoolEmbedder,
    ReferenceEntry,
    ReferenceStore,
    build_reference_set,
    load_samples,
    load_store,
    save_samples,
    save_store,
    store_hash,
    verify_store,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    # errors
    "PathwayError", "NumericError", "StoreError", "EmptyStoreError",
    "DegenerateEmbeddingError", "SerializationError",
    # pathway core
    "RoutingConfig", "OptimizationMask", "SparseRouting", "validate_pathway",
    "sparsify_topk", "sparsify_pathway", "apply_masked_update", "masked_distance",
    # kernels
    "KERNEL_KINDS", "KernelSpec", "kernel_eval", "kernel_eval_array", "resolve_bandwidth",
    # neighborhood
    "NEIGHBORHOOD_KINDS", "NeighborhoodSpec", "NeighborSet",
    "select_neighbors", "select_pathway_neighbors",
    # reference store
    "MeanPoolEmbedder", "ReferenceEntry", "ReferenceStore", "build_reference_set",
    "save_store", "load_store", "store_hash", "verify_store",
    "save_samples", "load_samples",
    # model + benchmark
    "MoEModel", "PlantSpec", "PlantRecord", "cross_entropy",
    "generate_planted_benchmark", "save_model", "load_model",
    # optimizers
    "METHODS", "LR_KINDS", "LRSchedule", "lr_at", "parse_lr_schedule",
    "MaskSpec", "parse_span", "OptimizerSpec", "StepRecord", "OptimizationTrace",
    "optimize_oracle", "optimize_ngd", "optimize_kernel_regression",
    "optimize_mode_finding", "run_optimizer",
    # harness
    "ExperimentConfig", "ReportRow", "FlipStats", "run_experiment", "evaluate_arm",
    "summarize", "step_curve", "expert_heatmap", "coverage_analysis", "flop_proxy",
    "forwards_equivalent", "optimizer_spec_from_dict", "optimizer_spec_to_dict",
    "experiment_config_from_dict", "expand_ablation_grid", "config_hash",
    # estimator
    "PathwayOptimizedClassifier",
]
