"""Universal boosting variational inference.

Greedy mixture approximation of unnormalized densities under the Hellinger
metric, with KL gradient-boosting baselines, divergence estimators, and an
experiment CLI.
"""

from .boosting import (
    RunTrace,
    UbviConfig,
    geodesic_weight,
    greedy_objective,
    init_candidates,
    run_ubvi,
    theorem1_bound,
)
from .expfam import GaussComponent, affinity, grad_log_h, log_h, product_component, sample_sq
from .klboost import (
    BviConfig,
    DensityMixture,
    bvi_component_objective,
    kl_weight_update,
    run_bvi,
    run_vi,
)
from .linalg import WeightProblem, block_inverse_extend, nnls, solve_weights
from .mixture import SqrtMixture, empty_mixture, extend, hellinger_to, log_q, sample
from .stochopt import AdamConfig, MCObjective, adam_maximize, reparam_gradient, signed_log_gradient
from .targets import (
    LogisticModel,
    TargetDensity,
    make_banana,
    make_cauchy,
    make_gauss_mixture,
    make_logistic,
    synth_logistic_data,
)

__version__ = "0.1.0"
