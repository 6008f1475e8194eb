"""Toolkit for capturing conv-filter weight statistics as a Gaussian
mixture and transferring them into CNN training as a penalty term.

Pipeline: extract 3x3 filters from tensor archives, cluster and report
their structure, fit a diagonal-covariance mixture, then train networks
whose objective adds the mixture negative log likelihood per filter.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    EmptyBankError,
    EmptyResultError,
    FormatError,
    InvariantViolation,
    MonotonicityError,
    SizeConstraintError,
    ToolkitError,
    TrainingDiverged,
    TruncationError,
    ValidationError,
)
from .tensorio import (
    FilterBank,
    FilterMeta,
    GmmFile,
    TensorArchive,
    TensorEntry,
    extract_filters,
    read_fbank,
    read_gmm,
    read_tarc,
    write_fbank,
    write_gmm,
    write_tarc,
)
from .stats import (
    ClusterReport,
    KMeansModel,
    assign,
    cluster_moments,
    kmeans_fit,
    render_report,
)
from .gmm import (
    EmConfig,
    GaussianMixture,
    em_fit,
    em_fit_trace,
    gaussian_logpdf,
    gmm_logpdf,
    grad_approx,
    grad_exact,
    nll,
    nll_total,
    responsibilities,
    sample_mixture,
    select_component,
)
from .regularizer import RegConfig, reg_grad, reg_loss, total_objective
from .nn import (
    Dataset,
    Network,
    SynthSpec,
    TrainConfig,
    backward,
    build_network,
    evaluate,
    forward,
    freeze,
    load_cifar10,
    make_reference_net,
    sgd_step,
    synth_dataset,
    train,
)

__all__ = [name for name in dir() if not name.startswith("_")]
