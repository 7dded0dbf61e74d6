"""Surrogate-assisted weighted ABC for mixed continuous/discrete process parameters."""

__version__ = "0.1.0"

from .abc import (
    KernelDescriptor,
    SummaryVector,
    WeightedPosterior,
    dip_statistic,
    dip_threshold,
    forward_validate,
    posterior_summary,
    simulate_forward,
    sufficiency_check,
    summarize,
    systematic_resample,
    weigh,
    weighted_quantile,
)
from .dataset import (
    ColumnSpec,
    Dataset,
    GeneratorConfig,
    GroundTruth,
    generate_synthetic,
    load_dataset,
    load_schema,
    preprocess,
    rank_runs,
)
from .distfit import (
    FAMILIES,
    FittedPrior,
    McmcConfig,
    fit_family,
    mcmc_posterior,
    sample_prior,
    select_model,
)
from .geometry import (
    ClusterModel,
    EmbeddingTable,
    SimilarityMatrix,
    cosine_matrix,
    fallback_embed,
    spectral_cluster,
    stratify,
)
from .pipeline import PipelineConfig, PipelineReport, StageFailure, run_pipeline
from .surrogate import (
    BoostParams,
    SurrogateModel,
    cross_validate,
    feature_importance,
    fit,
    predict,
    predict_raw,
)

__all__ = [
    "__version__",
    "BoostParams",
    "ClusterModel",
    "ColumnSpec",
    "Dataset",
    "EmbeddingTable",
    "FAMILIES",
    "FittedPrior",
    "GeneratorConfig",
    "GroundTruth",
    "KernelDescriptor",
    "McmcConfig",
    "PipelineConfig",
    "PipelineReport",
    "SimilarityMatrix",
    "StageFailure",
    "SummaryVector",
    "SurrogateModel",
    "WeightedPosterior",
    "cosine_matrix",
    "cross_validate",
    "dip_statistic",
    "dip_threshold",
    "fallback_embed",
    "feature_importance",
    "fit",
    "fit_family",
    "forward_validate",
    "generate_synthetic",
    "load_dataset",
    "load_schema",
    "mcmc_posterior",
    "posterior_summary",
    "predict",
    "predict_raw",
    "preprocess",
    "rank_runs",
    "run_pipeline",
    "sample_prior",
    "select_model",
    "simulate_forward",
    "spectral_cluster",
    "stratify",
    "sufficiency_check",
    "summarize",
    "systematic_resample",
    "weigh",
    "weighted_quantile",
]
