"""Leave-one-out versus out-of-sample risk for penalized GLMs."""
from .model import (
    CovarianceSpec,
    Dataset,
    ErrorMetric,
    ModelSpec,
    compute_snr,
    eval_loss,
    eval_loss_grad,
    generate_dataset,
    get_loss,
    make_model_spec,
)
from .penalty import (
    Box,
    EuclideanBall,
    FullSpace,
    GeneralizedLasso,
    GroupLasso,
    IsotoneCone,
    Lasso,
    NonnegativeOrthant,
    PenaltySpec,
    SchattenNorm,
    SmoothedPenalty,
    ZeroPenalty,
)
from .risk import RiskReport, compute_decomposition, compute_lo, compute_oo
from .solver import FitResult, LooFits, SolverConfig, fit, fit_loo, fit_smoothing_path, objective

__version__ = "0.1.0"
