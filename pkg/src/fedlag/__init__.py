"""Deterministic federated-learning simulator with layer-wise gradient
conflict analysis and adaptive layer disentanglement."""

__version__ = "0.1.0"

from .aggregate import (
    BroadcastSet,
    StrategySpec,
    aggregate_mean,
    fixed_selection,
    split_broadcast,
    strategy_step,
)
from .config import ConfigError, RunConfig, validate_config
from .conflict import (
    ConflictReport,
    Trajectory,
    compute_trajectory,
    gc_score,
    layer_cosine,
    run_gda,
    select_layers,
)
from .data import (
    BlobSpec,
    ClientDataset,
    DirichletSpec,
    ToySpec,
    load_idx,
    make_blobs,
    make_toy_domain,
    partition_dirichlet,
)
from .nn import (
    Batch,
    CongruenceError,
    LayeredParams,
    LayerSlot,
    MlpSpec,
    backward,
    evaluate,
    forward_loss,
    init_model,
    local_train,
)
from .simulate import (
    Engine,
    ExperimentResult,
    LemmaProbeRecord,
    RoundRecord,
    load_checkpoint,
    probe_lemma1,
    run_experiment,
    sample_clients,
    save_checkpoint,
)

__all__ = [name for name in dir() if not name.startswith("_")]
