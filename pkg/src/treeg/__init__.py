"""Tree-search guidance for diffusion and masked discrete flow samplers."""
from .schedules import NoiseSchedule, StepCoeffs, build_schedule
from .continuous import (
    ContinuousCore,
    ContinuousState,
    GaussianMixtureData,
    GMMDenoiser,
    corrupt_continuous,
    ddpm_step,
    gmm_posterior_mean,
    posterior_step,
)
from .discrete import (
    DiscreteCore,
    DiscreteSequence,
    OffSupportError,
    RateSpec,
    TabularDataDistribution,
    TabularDenoiser,
    conditional_rate,
    corrupt_discrete,
    euler_step,
    model_rate,
    tabular_posterior,
)
from .guidance import Candidate, Cost, GuidanceConfig
from .tree_search import SearchTrace, predict_cost, run_tree_search, sweep_fixed_budget

__version__ = "0.1.0"
