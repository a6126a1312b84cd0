"""
Run configuration for the ``semsentry`` command line.

A run configuration is a YAML document with the sections ``paths``,
``backend``, ``sampler``, ``detector``, ``eval`` and ``gen`` plus a top-level
``seed``. Every section is optional; unknown keys are rejected. Command-line
flags override file values, which override the defaults below.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union

import yaml

from .backends import BACKEND_CHOICES, WireSchema
from .baselines import DEFAULT_N_COMPONENTS, DEFAULT_PCA_DIM, validate_score_kind
from .describer import OrderPolicy
from .evaluation import DEFAULT_COMPARE_AS, REPORT_FORMATS
from .exceptions import ConfigError
from .monitor import SamplerConfig
from .scenegen import GenConfig

SECTION_KEYS: Dict[str, frozenset] = {
    "paths": frozenset(
        {
            "episodes",
            "verdicts",
            "models",
            "reports",
            "template",
            "vocabulary",
            "cache",
            "oracle_rules",
            "reference",
        }
    ),
    "backend": frozenset({"kind", "record_inner", "timeout_s", "max_tries", "wire"}),
    "sampler": frozenset(
        {
            "stride",
            "target_hz",
            "max_in_flight",
            "order_policy",
            "order_seed",
            "keyword_fallback",
            "temperature",
            "max_tokens",
            "monitor_name",
        }
    ),
    "detector": frozenset({"score_kind", "pca_dim", "n_components", "quantile"}),
    "eval": frozenset({"compare_as", "formats"}),
}
TOP_LEVEL_KEYS = frozenset(SECTION_KEYS) | {"seed", "gen"}

# RunConfig field for each (section, key) whose names differ
FIELD_FOR = {
    ("paths", "models"): "models_dir",
    ("paths", "reports"): "reports_dir",
    ("backend", "kind"): "backend",
    ("eval", "formats"): "report_formats",
}


@dataclass(frozen=True)
class RunConfig:
    """
    Settings shared by every subcommand.

    ``template`` None means the built-in template for each episode's domain.
    ``n_components`` may be the string "auto" to choose K by held-out
    likelihood.
    """

    episodes: Optional[str] = None
    verdicts: Optional[str] = None
    models_dir: str = "models"
    reports_dir: str = "reports"
    template: Optional[str] = None
    vocabulary: Optional[str] = None
    cache: Optional[str] = None
    oracle_rules: Optional[str] = None
    reference: Optional[str] = None

    backend: str = "oracle"
    record_inner: str = "remote"
    timeout_s: float = 60.0
    max_tries: int = 4
    wire: Dict[str, Any] = field(default_factory=dict)

    sampler: SamplerConfig = field(default_factory=SamplerConfig)

    score_kind: str = "mahalanobis_min"
    pca_dim: int = DEFAULT_PCA_DIM
    n_components: Union[int, str] = DEFAULT_N_COMPONENTS
    quantile: float = 0.95

    compare_as: Dict[str, str] = field(default_factory=lambda: dict(DEFAULT_COMPARE_AS))
    report_formats: Tuple[str, ...] = REPORT_FORMATS

    seed: int = 0
    gen: Optional[GenConfig] = None
    source: str = "<defaults>"

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if not 0.0 < self.quantile < 1.0:
            raise ConfigError(f"quantile must lie in (0, 1), got {self.quantile}", key="quantile")
        if self.backend not in BACKEND_CHOICES:
            raise ConfigError(
                f"Unknown backend '{self.backend}' (choose from {', '.join(BACKEND_CHOICES)})",
                key="backend",
            )
        if self.record_inner not in ("remote", "oracle"):
            raise ConfigError(
                f"record_inner must be 'remote' or 'oracle', got '{self.record_inner}'",
                key="record_inner",
            )
        if self.timeout_s <= 0 or self.max_tries < 1:
            raise ConfigError("timeout_s must be positive and max_tries at least 1", key="backend")
        validate_score_kind(self.score_kind)
        if self.pca_dim < 1:
            raise ConfigError(f"pca_dim must be at least 1, got {self.pca_dim}", key="pca_dim")
        if self.n_components != "auto" and (
            not isinstance(self.n_components, int) or self.n_components < 1
        ):
            raise ConfigError(
                f"n_components must be a positive integer or 'auto', got {self.n_components!r}",
                key="n_components",
            )
        unknown_formats = set(self.report_formats) - set(REPORT_FORMATS)
        if unknown_formats:
            raise ConfigError(
                f"Unknown report format(s): {', '.join(sorted(unknown_formats))}", key="formats"
            )

    @property
    def wire_schema(self) -> WireSchema:
        return WireSchema.from_mapping(self.wire)

    def with_overrides(self, **overrides: Any) -> RunConfig:
        """Copy with every non-None override applied; sampler keys go to the sampler"""
        sampler_fields = {f.name for f in dataclasses.fields(SamplerConfig)}
        sampler_updates = {
            k: v for k, v in overrides.items() if k in sampler_fields and v is not None
        }
        updates = {
            k: v for k, v in overrides.items() if k not in sampler_fields and v is not None
        }
        unknown = set(updates) - {f.name for f in dataclasses.fields(self)}
        if unknown:
            raise ConfigError(f"Unknown override(s): {', '.join(sorted(unknown))}")
        if sampler_updates:
            updates["sampler"] = dataclasses.replace(self.sampler, **sampler_updates)
        if "seed" in updates and self.gen is not None:
            updates["gen"] = dataclasses.replace(self.gen, seed=updates["seed"])
        return dataclasses.replace(self, **updates)

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any], source: str = "<mapping>") -> RunConfig:
        unknown = set(data) - TOP_LEVEL_KEYS
        if unknown:
            raise ConfigError(
                f"Unknown key(s) in {source}: {', '.join(sorted(unknown))}",
                key=sorted(unknown)[0],
                path=source,
            )

        kwargs: Dict[str, Any] = {"source": source}
        sampler_kwargs: Dict[str, Any] = {}
        for section, allowed in SECTION_KEYS.items():
            values = data.get(section) or {}
            if not isinstance(values, Mapping):
                raise ConfigError(
                    f"Section '{section}' in {source} must be a mapping", key=section, path=source
                )
            bad = set(values) - allowed
            if bad:
                raise ConfigError(
                    f"Unknown key(s) in section '{section}' of {source}: "
                    f"{', '.join(sorted(bad))}",
                    key=f"{section}.{sorted(bad)[0]}",
                    path=source,
                )
            target = sampler_kwargs if section == "sampler" else kwargs
            for key, value in values.items():
                target[FIELD_FOR.get((section, key), key)] = value

        if "order_policy" in sampler_kwargs:
            try:
                sampler_kwargs["order_policy"] = OrderPolicy(sampler_kwargs["order_policy"])
            except ValueError:
                raise ConfigError(
                    f"Unknown order_policy '{sampler_kwargs['order_policy']}' in {source}",
                    key="sampler.order_policy",
                    path=source,
                ) from None
        try:
            kwargs["sampler"] = SamplerConfig(**sampler_kwargs)
        except TypeError as e:
            raise ConfigError(f"Bad sampler section in {source}: {e}", key="sampler") from e

        if "report_formats" in kwargs:
            kwargs["report_formats"] = tuple(kwargs["report_formats"])
        if "compare_as" in kwargs:
            kwargs["compare_as"] = {**DEFAULT_COMPARE_AS, **(kwargs["compare_as"] or {})}
        if "seed" in data:
            kwargs["seed"] = int(data["seed"])
        if data.get("gen") is not None:
            gen_data = dict(data["gen"])
            gen_data.setdefault("seed", kwargs.get("seed", 0))
            kwargs["gen"] = GenConfig.from_mapping(gen_data, source)
        return cls(**kwargs)


def load_run_config(path: Optional[Union[str, Path]] = None) -> RunConfig:
    """Read a run configuration; the defaults when ``path`` is None"""
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}", path=str(path))
    try:
        with path.open("r", encoding="utf-8") as handle:
            data = yaml.safe_load(handle) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"{path} is not valid YAML: {e}", path=str(path)) from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must contain a mapping", path=str(path))
    return RunConfig.from_mapping(data, str(path))


def require_file(path: Optional[str], what: str, hint: str) -> Path:
    """
    Path to an input that must exist.

    Raises:
        ConfigError: the path is unset or missing; the message ends with ``hint``
    """
    if not path:
        raise ConfigError(f"No {what} given. {hint}", key=what)
    resolved = Path(path)
    if not resolved.exists():
        raise ConfigError(f"{what.capitalize()} not found: {resolved}. {hint}", path=str(resolved))
    return resolved
