"""
Monitor backends.

A backend turns a rendered prompt into completion text. Three are provided:

- ``RuleOracleBackend``: deterministic, offline; classifies each scene line
  with a regular-expression rule table and answers in the template's
  response layout.
- ``RemoteBackend``: one completion endpoint over HTTP, with a timeout and
  bounded exponential-backoff retries.
- ``ReplayBackend``: answers from a ``ReplayCache``; with an inner backend,
  misses are forwarded and recorded.

All calls go through ``query``, which validates the request and logs timing.
"""

from __future__ import annotations

import os
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Protocol, Tuple, Union

import backoff
import httpx

from .cache import ReplayCache, prompt_key
from .describer import read_data_yaml
from .episodes import Classification, MonitorVerdict
from .exceptions import (
    BackendError,
    BackendTimeoutError,
    BackendTransportError,
    CacheMissError,
    ConfigError,
    ValidationError,
)
from .logging_utils import (
    get_logger,
    log_backend_call,
    log_error_with_context,
    log_performance_warning,
)
from .prompts import PromptStyle
from .verdicts import synthesize_response

logger = get_logger("backends")

API_URL_ENV = "SEMSENTRY_API_URL"
API_KEY_ENV = "SEMSENTRY_API_KEY"

SLOW_CALL_MS = 10_000.0


@dataclass(frozen=True)
class BackendRequest:
    prompt: str
    temperature: float = 0.0
    max_tokens: int = 512
    template_name: str = ""
    style: PromptStyle = PromptStyle.FEW_SHOT_COT
    bindings: Mapping[str, str] = field(default_factory=dict)
    scene_lines: Optional[Tuple[str, ...]] = None

    def __post_init__(self) -> None:
        failures = []
        if not self.prompt or not self.prompt.strip():
            failures.append("prompt must be nonempty")
        if self.temperature < 0:
            failures.append(f"temperature must be >= 0, got {self.temperature}")
        if self.max_tokens < 1:
            failures.append(f"max_tokens must be >= 1, got {self.max_tokens}")
        if failures:
            raise ValidationError(f"Invalid backend request: {'; '.join(failures)}", failures)


@dataclass(frozen=True)
class BackendResponse:
    text: str
    latency_s: float = 0.0
    prompt_tokens: Optional[int] = None
    completion_tokens: Optional[int] = None
    cached: bool = False


class Backend(Protocol):
    name: str

    def complete(self, request: BackendRequest) -> BackendResponse: ...


def query(backend: Backend, request: BackendRequest) -> BackendResponse:
    """
    Send one request to a backend.

    Raises:
        BackendTimeoutError: the backend did not answer in time
        BackendTransportError: transport failure after retries
        CacheMissError: strict replay and the prompt was never recorded
        BackendError: any other exception raised by the backend, chained
    """
    start_time = time.time()
    try:
        response = backend.complete(request)
    except BackendError:
        raise
    except Exception as e:
        error = BackendError(f"{backend.name} failed: {type(e).__name__}: {e}", backend.name, e)
        log_error_with_context("backends", error, "query", template=request.template_name)
        raise error from e
    elapsed_ms = (time.time() - start_time) * 1000

    log_backend_call(
        backend.name,
        request.template_name,
        elapsed_ms,
        cached=response.cached,
        prompt_chars=len(request.prompt),
    )
    log_performance_warning(
        "backends",
        f"{backend.name} query",
        elapsed_ms,
        SLOW_CALL_MS,
        template=request.template_name,
    )
    return response


# ---------------------------------------------------------------------------
# Rule oracle
# ---------------------------------------------------------------------------

_BINDING_RE = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)\}")
_ARTICLE_RE = re.compile(r"^(?:an?|the)\s+", re.IGNORECASE)
_COUNT_RE = re.compile(r"\s*\(\d+x\)$")
ORACLE_RULE_KEYS = {"label", "predicate", "classification"}


@dataclass(frozen=True)
class OracleRule:
    """(label pattern, predicate pattern) → classification"""

    label: str
    predicate: str = ".*"
    classification: Classification = Classification.ANOMALY

    def __post_init__(self) -> None:
        object.__setattr__(self, "classification", Classification(self.classification))
        for pattern in (self.label, self.predicate):
            probe = _BINDING_RE.sub("x", pattern)
            try:
                re.compile(probe)
            except re.error as e:
                raise ConfigError(f"Invalid oracle pattern '{pattern}': {e}", key=pattern) from e

    @property
    def bindings(self) -> frozenset:
        return frozenset(_BINDING_RE.findall(self.label + self.predicate))

    def compile(self, bindings: Mapping[str, str]) -> Optional[Tuple[re.Pattern, re.Pattern]]:
        """Patterns with bindings substituted; None if a binding is missing"""
        if not self.bindings <= set(bindings):
            return None

        def substitute(pattern: str) -> re.Pattern:
            text = _BINDING_RE.sub(lambda m: re.escape(str(bindings[m.group(1)])), pattern)
            return re.compile(text, re.IGNORECASE)

        return substitute(self.label), substitute(self.predicate)


def normalize_phrase(line: str) -> str:
    """Scene line without its leading article and count suffix"""
    return _ARTICLE_RE.sub("", _COUNT_RE.sub("", line.strip())).strip()


@dataclass(frozen=True)
class RuleOracleConfig:
    rules: Tuple[OracleRule, ...] = ()
    default: Classification = Classification.NORMAL

    def classify(self, line: str, bindings: Optional[Mapping[str, str]] = None) -> Classification:
        """First rule matching any (label, predicate) split of the line wins"""
        words = normalize_phrase(line).split()
        splits = [(" ".join(words[:i]), " ".join(words[i:])) for i in range(len(words), 0, -1)]
        for rule in self.rules:
            compiled = rule.compile(bindings or {})
            if compiled is None:
                continue
            label_re, predicate_re = compiled
            for label, predicate in splits:
                if label_re.fullmatch(label) and predicate_re.fullmatch(predicate):
                    return rule.classification
        return self.default

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any], source: str = "<mapping>") -> RuleOracleConfig:
        unknown = set(data) - {"rules", "default"}
        if unknown:
            raise ConfigError(
                f"Unknown oracle key(s) in {source}: {', '.join(sorted(unknown))}",
                key=sorted(unknown)[0],
                path=source,
            )
        rules = []
        for entry in data.get("rules") or []:
            extra = set(entry) - ORACLE_RULE_KEYS
            if extra or "label" not in entry:
                raise ConfigError(
                    f"Malformed oracle rule in {source}: {entry!r}", key="rules", path=source
                )
            rules.append(
                OracleRule(
                    label=str(entry["label"]),
                    predicate=str(entry.get("predicate", ".*") or ""),
                    classification=Classification(entry.get("classification", "anomaly")),
                )
            )
        return cls(tuple(rules), Classification(data.get("default", "normal")))


def load_oracle_rules(
    path: Optional[Union[str, Path]] = None, domain: str = "driving"
) -> RuleOracleConfig:
    data, source = read_data_yaml(path, "oracle_rules.yaml")
    if not isinstance(data, dict):
        raise ConfigError(f"Oracle rule file {source} must contain a mapping", path=source)
    if "rules" not in data:
        if domain not in data:
            raise ConfigError(f"No '{domain}' rules in {source}", key=domain, path=source)
        data = data[domain]
    return RuleOracleConfig.from_mapping(data, source)


def _bullet_lines(prompt: str) -> Tuple[str, ...]:
    return tuple(line[2:].strip() for line in prompt.splitlines() if line.startswith("- "))


class RuleOracleBackend:
    """
    Deterministic stand-in for a language model.

    Scene lines come from ``request.scene_lines`` or, failing that, from the
    prompt's "- " bullet lines. Without an explicit rule table the shipped
    driving table serves few-shot prompts and the manipulation table serves
    zero-shot prompts.
    """

    name = "oracle"

    def __init__(self, config: Optional[RuleOracleConfig] = None):
        self.config = config
        self._defaults: Dict[PromptStyle, RuleOracleConfig] = {}

    def rules_for(self, style: PromptStyle) -> RuleOracleConfig:
        if self.config is not None:
            return self.config
        if style not in self._defaults:
            domain = "manipulation" if style is PromptStyle.ZERO_SHOT_COT else "driving"
            self._defaults[style] = load_oracle_rules(domain=domain)
        return self._defaults[style]

    def classify(self, request: BackendRequest) -> MonitorVerdict:
        rules = self.rules_for(PromptStyle(request.style))
        lines = request.scene_lines
        if lines is None:
            lines = _bullet_lines(request.prompt)
        per_object = tuple((line, rules.classify(line, request.bindings)) for line in lines)
        overall = (
            Classification.ANOMALY
            if any(c is Classification.ANOMALY for _, c in per_object)
            else Classification.NORMAL
        )
        return MonitorVerdict("", 0, per_object, overall, monitor=self.name)

    def complete(self, request: BackendRequest) -> BackendResponse:
        start_time = time.time()
        text = synthesize_response(self.classify(request), request.style)
        return BackendResponse(text, latency_s=time.time() - start_time)


# ---------------------------------------------------------------------------
# Remote endpoint
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WireSchema:
    """
    Field mapping between requests and a completion endpoint.

    Response paths are dotted, with integer segments indexing lists, e.g.
    "choices.0.text" or "choices.0.message.content".
    """

    prompt_field: str = "prompt"
    temperature_field: str = "temperature"
    max_tokens_field: str = "max_tokens"
    extra: Mapping[str, Any] = field(default_factory=dict)
    text_path: str = "choices.0.text"
    prompt_tokens_path: Optional[str] = "usage.prompt_tokens"
    completion_tokens_path: Optional[str] = "usage.completion_tokens"
    prompt_as_messages: bool = False

    def payload(self, request: BackendRequest) -> Dict[str, Any]:
        body: Dict[str, Any] = dict(self.extra)
        if self.prompt_as_messages:
            body[self.prompt_field] = [{"role": "user", "content": request.prompt}]
        else:
            body[self.prompt_field] = request.prompt
        body[self.temperature_field] = request.temperature
        body[self.max_tokens_field] = request.max_tokens
        return body

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> WireSchema:
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(
                f"Unknown wire schema key(s): {', '.join(sorted(unknown))}", key=sorted(unknown)[0]
            )
        return cls(**data)


def extract_path(payload: Any, path: str) -> Any:
    """Follow a dotted path through nested dicts and lists"""
    node = payload
    for segment in path.split("."):
        if isinstance(node, list) and segment.isdigit():
            node = node[int(segment)]
        elif isinstance(node, dict):
            node = node[segment]
        else:
            raise KeyError(segment)
    return node


class _RetryableStatus(Exception):
    def __init__(self, response: httpx.Response):
        self.response = response
        super().__init__(f"HTTP {response.status_code}")


def _is_retryable(status_code: int) -> bool:
    return status_code == 429 or status_code >= 500


class RemoteBackend:
    """
    HTTP completion client.

    Retries transport errors, timeouts, HTTP 429 and 5xx with exponential
    backoff and jitter up to ``max_tries`` attempts; other HTTP errors fail
    immediately. ``transport`` may be an ``httpx.MockTransport`` in tests.
    """

    name = "remote"

    def __init__(
        self,
        url: str,
        api_key: Optional[str] = None,
        schema: Optional[WireSchema] = None,
        timeout_s: float = 60.0,
        max_tries: int = 4,
        backoff_factor: float = 1.0,
        transport: Optional[httpx.BaseTransport] = None,
    ):
        if not url:
            raise ConfigError(f"Remote backend needs an endpoint URL (set {API_URL_ENV})")
        self.url = url
        self.schema = schema or WireSchema()
        self.max_tries = max_tries
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self.client = httpx.Client(
            headers=headers, timeout=httpx.Timeout(timeout_s), transport=transport
        )
        self._post = backoff.on_exception(
            backoff.expo,
            (httpx.TransportError, _RetryableStatus),
            max_tries=max_tries,
            factor=backoff_factor,
            jitter=backoff.full_jitter,
            on_backoff=self._log_retry,
            logger=None,
        )(self._post_once)

    @classmethod
    def from_env(cls, schema: Optional[WireSchema] = None, **kwargs: Any) -> RemoteBackend:
        url = os.environ.get(API_URL_ENV, "")
        if not url:
            raise ConfigError(
                f"{API_URL_ENV} is not set; export the completion endpoint URL "
                "or choose --backend oracle",
                key=API_URL_ENV,
            )
        return cls(url, api_key=os.environ.get(API_KEY_ENV), schema=schema, **kwargs)

    def _log_retry(self, details: Dict[str, Any]) -> None:
        logger.info(
            f"🔁 Retrying remote call (attempt {details['tries']}/{self.max_tries}, "
            f"waiting {details.get('wait', 0.0):.2f}s): {details.get('exception')}"
        )

    def _post_once(self, body: Dict[str, Any]) -> httpx.Response:
        response = self.client.post(self.url, json=body)
        if _is_retryable(response.status_code):
            raise _RetryableStatus(response)
        return response

    def complete(self, request: BackendRequest) -> BackendResponse:
        start_time = time.time()
        try:
            response = self._post(self.schema.payload(request))
        except httpx.TimeoutException as e:
            raise BackendTimeoutError(
                f"Remote backend timed out after {self.max_tries} attempts", "remote", e
            ) from e
        except httpx.TransportError as e:
            raise BackendTransportError(
                f"Remote backend unreachable after {self.max_tries} attempts: {e}", orig=e
            ) from e
        except _RetryableStatus as e:
            raise BackendTransportError(
                f"Remote backend returned HTTP {e.response.status_code} "
                f"after {self.max_tries} attempts",
                status_code=e.response.status_code,
                orig=e,
            ) from e
        latency_s = time.time() - start_time

        if response.status_code >= 400:
            raise BackendTransportError(
                f"Remote backend rejected the request: HTTP {response.status_code}",
                status_code=response.status_code,
            )
        try:
            payload = response.json()
            text = extract_path(payload, self.schema.text_path)
        except (ValueError, KeyError, IndexError, TypeError) as e:
            raise BackendTransportError(
                f"Malformed response payload (no '{self.schema.text_path}')",
                status_code=response.status_code,
                orig=e,
            ) from e
        if not isinstance(text, str):
            raise BackendTransportError(
                f"Response field '{self.schema.text_path}' is not text",
                status_code=response.status_code,
            )

        return BackendResponse(
            text=text,
            latency_s=latency_s,
            prompt_tokens=self._token_count(payload, self.schema.prompt_tokens_path),
            completion_tokens=self._token_count(payload, self.schema.completion_tokens_path),
        )

    @staticmethod
    def _token_count(payload: Any, path: Optional[str]) -> Optional[int]:
        if not path:
            return None
        try:
            return int(extract_path(payload, path))
        except (KeyError, IndexError, TypeError, ValueError):
            return None

    def close(self) -> None:
        self.client.close()


# ---------------------------------------------------------------------------
# Record / replay
# ---------------------------------------------------------------------------


class ReplayBackend:
    """
    Cache-backed backend.

    Without ``inner`` this is strict replay: a miss raises ``CacheMissError``.
    With ``inner`` a miss is answered by the inner backend and recorded.
    """

    def __init__(self, cache: ReplayCache, inner: Optional[Backend] = None):
        self.cache = cache
        self.inner = inner
        self.name = "replay" if inner is None else f"record:{inner.name}"
        self.hits = 0
        self.misses = 0

    @property
    def strict(self) -> bool:
        return self.inner is None

    def complete(self, request: BackendRequest) -> BackendResponse:
        key = prompt_key(request.template_name, request.prompt)
        hit = self.cache.get(key)
        if hit is not None:
            self.hits += 1
            return BackendResponse(
                hit.text, hit.latency_s, hit.prompt_tokens, hit.completion_tokens, cached=True
            )

        self.misses += 1
        if self.inner is None:
            raise CacheMissError(key, request.template_name)
        response = self.inner.complete(request)
        self.cache.put(
            key,
            request.template_name,
            response.text,
            response.latency_s,
            response.prompt_tokens,
            response.completion_tokens,
        )
        return response


BACKEND_CHOICES = ("remote", "oracle", "replay", "record")


def build_backend(
    kind: str,
    cache_path: Optional[str] = None,
    schema: Optional[WireSchema] = None,
    oracle_rules: Optional[RuleOracleConfig] = None,
    record_inner: str = "remote",
    **remote_kwargs: Any,
) -> Backend:
    """
    Backend for a CLI/config selection.

    "record" wraps ``record_inner`` ("remote" or "oracle") with the cache at
    ``cache_path``; "replay" reads that cache strictly.
    """
    if kind == "oracle":
        return RuleOracleBackend(oracle_rules)
    if kind == "remote":
        return RemoteBackend.from_env(schema, **remote_kwargs)
    if kind in ("replay", "record"):
        if not cache_path:
            raise ConfigError(f"--backend {kind} needs a cache path", key="cache")
        try:
            cache = ReplayCache(cache_path)
        except ValueError as e:
            raise ConfigError(str(e), key="cache", path=str(cache_path)) from e
        if kind == "replay":
            return ReplayBackend(cache)
        inner: Backend = (
            RuleOracleBackend(oracle_rules)
            if record_inner == "oracle"
            else RemoteBackend.from_env(schema, **remote_kwargs)
        )
        return ReplayBackend(cache, inner)
    raise ConfigError(
        f"Unknown backend '{kind}' (choose from {', '.join(BACKEND_CHOICES)})", key="backend"
    )