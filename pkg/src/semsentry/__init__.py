"""
SemSentry - semantic anomaly monitoring for autonomous systems.

SemSentry turns object-detector output into natural-language scene
descriptions, asks a language model (or a deterministic stand-in) whether
any object could confuse the system's policy, and measures the result
against ground-truth anomaly intervals. Classical OOD baselines (PCA,
Gaussian-mixture Mahalanobis and likelihood scores, quantile calibration)
run over the same corpora for side-by-side reports.

Example usage:
    from semsentry import (
        GenConfig, RuleOracleBackend, ScenarioClass, generate,
        interval_metrics, load_template, monitor_episode,
    )

    counts = {ScenarioClass.ANOMALOUS_STOP: 4, ScenarioClass.NOMINAL_STOP: 4}
    episodes = generate(GenConfig(counts=counts))
    template = load_template("driving_fewshot")
    oracle = RuleOracleBackend()
    verdicts = [v for ep in episodes for v in monitor_episode(ep, template, oracle)]
    print(interval_metrics(episodes, verdicts).total.tpr)
"""

from .backends import (
    BackendRequest,
    BackendResponse,
    RemoteBackend,
    ReplayBackend,
    RuleOracleBackend,
    WireSchema,
    build_backend,
    query,
)
from .baselines import (
    BaselineModels,
    CalibratedDetector,
    GaussianMixtureModel,
    PcaModel,
    calibrate,
    detector_verdicts,
    fit_gmm,
    fit_pca,
    flag,
    load_model,
    save_model,
    score_gmm_nll,
    score_mahalanobis_min,
    score_recon_error,
    select_n_components,
)
from .cache import ReplayCache
from .config import RunConfig, load_run_config
from .describer import (
    OrderPolicy,
    SceneDescription,
    Vocabulary,
    describe,
    load_vocabulary,
    permute_description,
)
from .episodes import (
    AnomalyKind,
    Classification,
    Detection,
    Episode,
    FailedVerdict,
    Frame,
    MonitorVerdict,
    ScenarioClass,
    TaskOutcome,
    VisibilityInterval,
    read_episodes,
    read_verdicts,
    write_episodes,
    write_verdicts,
)
from .evaluation import (
    ConfusionMatrix2x2,
    IntervalMetrics,
    build_report,
    episode_detection_rate,
    fault_confusion,
    interval_metrics,
    load_reference,
    perception_error_metrics,
    render_report,
)
from .exceptions import (
    BackendError,
    BackendTimeoutError,
    BackendTransportError,
    CacheMissError,
    CalibrationError,
    ConfigError,
    DimensionMismatchError,
    EpisodeMonitorError,
    EvaluationError,
    MissingPlaceholderError,
    ModelError,
    ModelFitError,
    RecordFormatError,
    SemSentryError,
    TemplateError,
    UnknownBindingError,
    ValidationError,
    VerdictParseError,
)
from .logging_utils import SUMMARY, configure_for_tests, get_logger
from .monitor import SamplerConfig, monitor_episode, probe_order_sensitivity
from .prompts import PromptStyle, PromptTemplate, load_template, render_prompt
from .scenegen import GenConfig, NoiseConfig, apply_noise, generate
from .verdicts import parse_verdict, synthesize_response

__version__ = "0.1.0"
__all__ = [
    # Data model
    "AnomalyKind",
    "Classification",
    "Detection",
    "Episode",
    "FailedVerdict",
    "Frame",
    "MonitorVerdict",
    "ScenarioClass",
    "TaskOutcome",
    "VisibilityInterval",
    "read_episodes",
    "read_verdicts",
    "write_episodes",
    "write_verdicts",
    # Generation and description
    "GenConfig",
    "NoiseConfig",
    "apply_noise",
    "generate",
    "OrderPolicy",
    "SceneDescription",
    "Vocabulary",
    "describe",
    "load_vocabulary",
    "permute_description",
    # Monitoring
    "PromptStyle",
    "PromptTemplate",
    "load_template",
    "render_prompt",
    "parse_verdict",
    "synthesize_response",
    "BackendRequest",
    "BackendResponse",
    "RemoteBackend",
    "ReplayBackend",
    "ReplayCache",
    "RuleOracleBackend",
    "WireSchema",
    "build_backend",
    "query",
    "SamplerConfig",
    "monitor_episode",
    "probe_order_sensitivity",
    # Baselines
    "BaselineModels",
    "CalibratedDetector",
    "GaussianMixtureModel",
    "PcaModel",
    "calibrate",
    "detector_verdicts",
    "fit_gmm",
    "fit_pca",
    "flag",
    "load_model",
    "save_model",
    "score_gmm_nll",
    "score_mahalanobis_min",
    "score_recon_error",
    "select_n_components",
    # Evaluation
    "ConfusionMatrix2x2",
    "IntervalMetrics",
    "build_report",
    "episode_detection_rate",
    "fault_confusion",
    "interval_metrics",
    "load_reference",
    "perception_error_metrics",
    "render_report",
    # Configuration
    "RunConfig",
    "load_run_config",
    # Exceptions
    "SemSentryError",
    "ConfigError",
    "ValidationError",
    "RecordFormatError",
    "TemplateError",
    "MissingPlaceholderError",
    "UnknownBindingError",
    "VerdictParseError",
    "BackendError",
    "BackendTimeoutError",
    "BackendTransportError",
    "CacheMissError",
    "EpisodeMonitorError",
    "ModelError",
    "ModelFitError",
    "DimensionMismatchError",
    "CalibrationError",
    "EvaluationError",
    # Logging
    "SUMMARY",
    "configure_for_tests",
    "get_logger",
]
