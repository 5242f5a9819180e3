"""Splitting solvers for singular forward-backward SDEs with a degenerate
transport component and an indicator terminal condition."""

from .errors import (CFLError, ConfigError, FBSplitError, GridMismatchError,
                     MemoryBudgetError, RateExperimentError, StructuralViolation,
                     TrainingDivergedError)
from .grids import EGrid, PBox, SubGrid, TimeGrid, default_box, default_egrid
from .models import (MODELS, ModelSpec, make_bm_positive_model, make_linear_model,
                     make_multiplicative_model, reduce_to_1d, validate_class)
from .splitting import (RateReport, SchemeResult, l1_error, linf_error, rate_experiment,
                        run_alt_scheme, run_nn_scheme, run_proxy)

__version__ = "0.1.0"
