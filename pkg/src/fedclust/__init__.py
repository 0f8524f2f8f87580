"""Desk-scale federated clustering lab.

Subpackages: numerics (linear algebra, k-means), data (ingestion and
heterogeneous partitioning), model (cluster-contrastive network and loss),
metrics (NMI, kappa, collapse diagnostics), federation (round orchestration),
theory (linear-network gradient-flow probe), cli (experiment harness).
"""

from .numerics import KMeansResult, SvdResult, covariance, correlation_matrix, frobenius_norm_sq, kmeans, svd
from .data import ClientShard, LabeledDataset, PartitionSpec, load_idx, partition_heterogeneous, synth_gmm
from .model import (
    ClusterContrastiveModel,
    DenseLayer,
    DenseStack,
    TrainConfig,
    assign_labels,
    backward,
    ccfc_loss,
    forward,
    neg_cosine,
    new_model,
    sgd_step,
)
from .metrics import CollapseReport, collapse_report, kappa, nmi
from .federation import (
    FailureConfig,
    FederationConfig,
    FederationResult,
    ServerState,
    aggregate_centroids,
    aggregate_models,
    apply_failures,
    client_round,
    init_server,
    run_federation,
)
from .theory import TheoryConfig, balanced_init, build_Q, build_Qbar, check_assumptions, flow_step, imbalance_sweep, run_flow, verify_theorem_31

__version__ = "0.1.0"
