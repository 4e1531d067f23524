"""Hi-C conditioned generation of bacterial chromosome conformation ensembles at desk scale."""

from .crossdit import CrossDiTGenerator, DitConfig, generate_ensemble
from .exceptions import ChromoforgeError, ConfigError, InvalidInputError, MissingInputError, \
    NumericalFault
from .geometry import Conformation, Ensemble, apply_rotation, center, normalize, \
    sample_uniform_rotation, scale_normalize
from .hic import HiCMap, aggregate_ensemble, circular_distance, contacts_from_structure, ps_curve
from .metrics import drmsd, mean_pairwise_drmsd, pcc_full, scc
from .simulation import SimConfig, run_trajectory
from .vae import ConformationVAE

__version__ = "0.1.0"

__all__ = [
    "Conformation", "Ensemble", "center", "scale_normalize", "normalize", "apply_rotation",
    "sample_uniform_rotation", "HiCMap", "contacts_from_structure", "aggregate_ensemble",
    "circular_distance", "ps_curve", "scc", "pcc_full", "drmsd", "mean_pairwise_drmsd",
    "SimConfig", "run_trajectory", "ConformationVAE", "CrossDiTGenerator", "DitConfig",
    "generate_ensemble", "ChromoforgeError", "ConfigError", "InvalidInputError",
    "MissingInputError", "NumericalFault",
]
