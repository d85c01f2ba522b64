"""Truncated-time diffusion models on analytically tractable targets."""
from difftime.sde import DiffusionSpec, Family, TransitionKernel, drift_diffusion, pnoise, transition
from difftime.mixture import (
    GaussianMixture,
    conditional_score,
    diffuse,
    marginal_log_density,
    marginal_score,
    toy_mixture,
)
from difftime.score_model import (
    ScoreNet,
    TrainConfig,
    TrainedScore,
    TrainingDiverged,
    ZeroScore,
    dsm_loss,
    oracle_score,
    train,
)
from difftime.simulator import PathBatch, SimulationError, forward_sample, ode_solve, reverse_sample
from difftime.elbo import (
    ElboReport,
    Estimate,
    KlBoundReport,
    elbo_report,
    estimate_gap,
    estimate_I,
    estimate_K,
    estimate_kl,
    estimate_R,
    kl_bound_check,
    prop1_residual,
)
from difftime.aux import (
    AuxFitResult,
    bridged_reverse_sample,
    draw_fit_set,
    fit_aux,
    fit_em,
    prop4_check,
    select_bic,
)
from difftime.likelihood import LikelihoodResult, bpd, logdensity_ode, sequential_refit

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
