"""Communication-efficient federated group DRO: CVaR and KL variants, simulated."""

from .core import Algorithm, ClientState, MetricsRecord, RunConfig, derive_rng, validate_config
from .models import ClientDataset, LossKind, LossModel, Sample

__version__ = "0.1.0"

__all__ = [
    "Algorithm", "ClientState", "MetricsRecord", "RunConfig", "derive_rng", "validate_config",
    "ClientDataset", "LossKind", "LossModel", "Sample",
]
