"""
SemSentry exception hierarchy.

Structured exceptions carrying their context as attributes, so callers and the
CLI can report exactly which episode, line, placeholder or backend failed.
Each class declares the process exit code the CLI maps it to.
"""

from typing import Any, List, Optional

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_BACKEND = 3


class SemSentryError(Exception):
    """
    Base exception for all SemSentry operations.

    Context keyword arguments are stored as instance attributes for
    programmatic access.
    """

    exit_code: int = EXIT_USAGE

    def __init__(self, message: str, **context: Any):
        super().__init__(message)
        for key, value in context.items():
            setattr(self, key, value)


class ConfigError(SemSentryError, ValueError):
    """Configuration file or flag combination is invalid."""

    exit_code = EXIT_USAGE

    def __init__(self, message: str, key: Optional[str] = None, path: Optional[str] = None):
        self.key = key
        self.path = path
        super().__init__(message, key=key, path=path)


class ValidationError(SemSentryError, ValueError):
    """
    Data does not satisfy a domain invariant.

    Can include multiple validation failures; ``entity_id`` names the
    episode (or other record) that failed.
    """

    exit_code = EXIT_DATA

    def __init__(
        self,
        message: str,
        validation_failures: Optional[List[str]] = None,
        entity_id: Optional[str] = None,
    ):
        self.validation_failures = validation_failures or []
        self.entity_id = entity_id

        if entity_id is not None and f"'{entity_id}'" not in message:
            message = f"{message} (episode '{entity_id}')"

        super().__init__(
            message,
            validation_failures=self.validation_failures,
            failure_count=len(self.validation_failures),
            entity_id=entity_id,
        )


class RecordFormatError(SemSentryError, ValueError):
    """A line of a JSON Lines file could not be decoded into a record."""

    exit_code = EXIT_DATA

    def __init__(
        self,
        message: str,
        path: Optional[str] = None,
        line_number: Optional[int] = None,
        orig: Optional[Exception] = None,
    ):
        self.path = path
        self.line_number = line_number
        self.orig = orig

        location = path or "<stream>"
        if line_number is not None:
            location += f":{line_number}"

        super().__init__(
            f"{location}: {message}", path=path, line_number=line_number, orig=orig
        )


class TemplateError(SemSentryError, KeyError):
    """Prompt template could not be loaded or rendered."""

    exit_code = EXIT_USAGE

    def __init__(self, message: str, template: Optional[str] = None, **context: Any):
        self.template = template
        super().__init__(message, template=template, **context)

    def __str__(self) -> str:
        # KeyError.__str__ would repr() the message
        return str(self.args[0]) if self.args else ""


class MissingPlaceholderError(TemplateError):
    """A required placeholder has no binding."""

    def __init__(self, placeholder: str, template: Optional[str] = None):
        self.placeholder = placeholder
        super().__init__(
            f"Missing binding for placeholder '{placeholder}' in template '{template}'",
            template=template,
            placeholder=placeholder,
        )


class UnknownBindingError(TemplateError):
    """A binding was supplied for a placeholder the template does not declare."""

    def __init__(self, binding: str, template: Optional[str] = None):
        self.binding = binding
        super().__init__(
            f"Unknown binding '{binding}' for template '{template}'",
            template=template,
            binding=binding,
        )


class VerdictParseError(SemSentryError, ValueError):
    """A monitor response could not be parsed into a verdict."""

    exit_code = EXIT_DATA

    def __init__(
        self,
        message: str,
        episode_id: Optional[str] = None,
        timestep: Optional[int] = None,
        excerpt: str = "",
    ):
        self.episode_id = episode_id
        self.timestep = timestep
        self.excerpt = excerpt[:200]
        super().__init__(message, episode_id=episode_id, timestep=timestep, excerpt=self.excerpt)


class BackendError(SemSentryError):
    """
    A monitor backend failed to produce a response.

    Wraps the underlying transport error (if any) in ``orig``.
    """

    exit_code = EXIT_BACKEND

    def __init__(self, message: str, backend: str = "unknown", orig: Optional[Exception] = None):
        self.backend = backend
        self.orig = orig
        super().__init__(message, backend=backend, orig=orig)


class BackendTimeoutError(BackendError, TimeoutError):
    """Backend did not answer within the configured timeout."""


class BackendTransportError(BackendError):
    """Transport failure (connection, HTTP status, malformed payload) after retries."""

    def __init__(
        self,
        message: str,
        backend: str = "remote",
        status_code: Optional[int] = None,
        orig: Optional[Exception] = None,
    ):
        self.status_code = status_code
        super().__init__(message, backend=backend, orig=orig)


class CacheMissError(BackendError, LookupError):
    """Strict replay mode was asked for a prompt that was never recorded."""

    def __init__(self, prompt_hash: str, template_name: str = ""):
        self.prompt_hash = prompt_hash
        self.template_name = template_name
        super().__init__(
            f"No recorded response for template '{template_name}' prompt {prompt_hash[:12]}",
            backend="replay",
        )


class EpisodeMonitorError(BackendError):
    """Every sampled frame of an episode failed at the backend."""

    def __init__(self, episode_id: str, failures: int, orig: Optional[Exception] = None):
        self.episode_id = episode_id
        self.failures = failures
        super().__init__(
            f"All {failures} sampled frames of episode '{episode_id}' failed at the backend",
            backend=getattr(orig, "backend", "unknown"),
            orig=orig,
        )


class ModelError(SemSentryError, ValueError):
    """Base class for baseline-model fitting and scoring errors."""

    exit_code = EXIT_DATA


class ModelFitError(ModelError):
    """Fitting preconditions are not met or the data is degenerate."""

    def __init__(self, message: str, model: str = "", **context: Any):
        self.model = model
        super().__init__(message, model=model, **context)


class DimensionMismatchError(ModelError):
    """Input vector dimension does not match the fitted model."""

    def __init__(self, expected: int, got: int, model: str = ""):
        self.expected = expected
        self.got = got
        self.model = model
        super().__init__(
            f"{model or 'model'} expects {expected}-dimensional input, got {got}",
            expected=expected,
            got=got,
            model=model,
        )


class CalibrationError(SemSentryError, ValueError):
    """Threshold calibration preconditions are not met."""

    exit_code = EXIT_DATA


class EvaluationError(SemSentryError, ValueError):
    """Verdicts and episodes cannot be reconciled for evaluation."""

    exit_code = EXIT_DATA

    def __init__(
        self, message: str, episode_id: Optional[str] = None, timestep: Optional[int] = None
    ):
        self.episode_id = episode_id
        self.timestep = timestep
        super().__init__(message, episode_id=episode_id, timestep=timestep)
