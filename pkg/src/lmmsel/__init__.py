"""Joint selection of fixed and random effects in linear mixed models.

Fixed effects are selected through an l1 penalty on the complete-data
log-likelihood, random effects through variance-boundary deletion; the
optimization runs a multicycle ECM algorithm whose inner linear-algebra
never touches an n x n matrix.  BIC tuning, a known-variance GLS oracle
and a Monte-Carlo benchmark harness are included.
"""

from .blup import (BlupResult, GammaMatrix, HendersonFactor, NumericError,
                   blup_marginal_oracle, henderson_solve, track_factorizations)
from .ecm import (EcmConfig, FitResult, ParameterState, SupportCapExceeded,
                  complete_data_loglik, ecm_step, effective_unpenalized, fit,
                  initialize, neg2_penalized_marginal, refit)
from .model import (DegenerateColumnError, DimensionError, GroupingFactor,
                    MixedModelData, RandomEffectSpec, build_incidence, standardize)
from .oracle import (MarginalCovariance, gls_lasso, marginal_covariance,
                     profiled_objective, w_identity_check)
from .penalized_ls import (NonConvergenceError, SelectorConfig, SelectorOutcome,
                           adaptive_weights, kkt_residual, lasso_cd, make_selector,
                           register_selector, soft_threshold)
from .simgen import (SCENARIOS, SimulationReport, SimulationScenario, StudyResult,
                     evaluate, generate, run_study)
from .tuning import BicValue, TuningError, TuningResult, bic, lambda_grid, tune

__version__ = "0.1.0"
