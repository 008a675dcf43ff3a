"""Gradient inversion attacks on simulated federated learning."""

from .closed_form import DegenerateGradientError, demix_cnn_single, recon_single_mlp
from .data import Dataset, synth_dataset
from .feasibility import check_cnn, check_cnn_no_dense, check_mlp_batch, check_multilayer_cnn
from .kernels import BACKEND
from .metrics import MatchReport, match_batch, mean_l1
from .models import CnnConfig, GradientBundle, MlpConfig, ModelParams, batch_gradient, init_params
from .recon import ReconJob, ReconResult, itr_rec, reconstruct

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "CnnConfig",
    "Dataset",
    "DegenerateGradientError",
    "GradientBundle",
    "MatchReport",
    "MlpConfig",
    "ModelParams",
    "ReconJob",
    "ReconResult",
    "batch_gradient",
    "check_cnn",
    "check_cnn_no_dense",
    "check_mlp_batch",
    "check_multilayer_cnn",
    "demix_cnn_single",
    "init_params",
    "itr_rec",
    "match_batch",
    "mean_l1",
    "recon_single_mlp",
    "reconstruct",
    "synth_dataset",
]
