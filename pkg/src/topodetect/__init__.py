"""Topological change detection by variational image registration."""

__version__ = "0.1.0"

from .baselines import score_jacdet, score_li_wyatt
from .detection import (
    ControlSet,
    OutlierScore,
    SymmetricScore,
    atlas_mean,
    inner_means,
    outlier_score,
    score_L,
    score_L_sym,
    score_Q,
    symmetric_score,
)
from .evaluation import BootstrapEstimate, RocCurve, bootstrap_auc, compute_roc, registration_metrics
from .grid import InvalidFieldError, NeighborGraph, jacobian_determinant, warp, warp_gradient
from .noise import NoiseParams, extract_features, update_noise
from .prior import (
    DegenerateBatchError,
    PriorParams,
    VariationalField,
    estimate_prior,
    kl_closed_form,
    kl_dense_oracle,
    update_running,
)
from .registration import RegistrationConfig, RegistrationError, RegistrationResult, elbo, register
from .synth import SynthSpec, generate_pair, generate_pairs, generate_population

__all__ = [n for n in dir() if not n.startswith("_")]
