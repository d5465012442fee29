"""Post-hoc batch-effect correction for cell embeddings.

Batch-indexed FiLM adapters (per-batch scale and shift in latent space) are
fit by a simulated federated loop: proximally regularized local updates per
batch, then sample-count-weighted averaging into a shared global adapter.
Ships with an integration-quality metrics suite and a synthetic benchmark
generator with known ground-truth effects.
"""

from . import io
from .core import (
    CellMetadata,
    DimensionError,
    EmbeddingMatrix,
    FedfilmError,
    FilmAdapter,
    MissingBatchError,
    ValidationError,
    apply_adapter,
    identity_adapter,
)
from .federation import (
    RoundRecord,
    ScenarioPlan,
    StageResult,
    aggregate,
    run_federated_fit,
    run_scenario,
)
from .metrics import (
    MetricsReport,
    NeighborGraph,
    aggregate_scores,
    build_neighbor_graph,
    evaluate,
)
from .objective import (
    ClientState,
    TrainConfig,
    client_local_update,
    local_gradient,
    local_loss,
    make_client_state,
)
from .synth import GroundTruth, SynthSpec, generate, pca

__version__ = "0.1.0"

__all__ = [
    "io",
    "CellMetadata",
    "ClientState",
    "DimensionError",
    "EmbeddingMatrix",
    "FedfilmError",
    "FilmAdapter",
    "GroundTruth",
    "MetricsReport",
    "MissingBatchError",
    "NeighborGraph",
    "RoundRecord",
    "ScenarioPlan",
    "StageResult",
    "SynthSpec",
    "TrainConfig",
    "ValidationError",
    "aggregate",
    "aggregate_scores",
    "apply_adapter",
    "build_neighbor_graph",
    "client_local_update",
    "evaluate",
    "generate",
    "identity_adapter",
    "local_gradient",
    "local_loss",
    "make_client_state",
    "pca",
    "run_federated_fit",
    "run_scenario",
]
