"""Seamless phase I/II drug-combination trial design toolkit.

Core pieces: a copula-type toxicity surface with MCMC posterior inference,
a hierarchical response-rate model, moving-reference adaptive randomization,
the two-phase trial state machine with group-sequential updates for
late-onset responses, a replicated operating-characteristics simulator, and
a CLI plus HTTP service for conducting a live trial.
"""

from .dose_models import (
    DoseGrid,
    GammaPrior,
    LogisticCoeffs,
    ToxicityCounts,
    ToxicityParams,
    combo_toxicity,
    log_likelihood,
    log_posterior,
    logistic_truth,
    toxicity_surface,
)
from .efficacy import ArmData, EffPosteriorChain, posterior_mean, prob_exceeds, sample_efficacy_posterior
from .posterior import (
    InferenceError,
    McmcConfig,
    OracleError,
    ToxPosteriorChain,
    prob_below,
    quadrature_oracle,
    sample_toxicity_posterior,
)
from .randomization import RandProbs, draw_assignment, far_probabilities, mar_probabilities

__version__ = "0.1.0"
