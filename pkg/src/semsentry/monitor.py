"""
Per-episode monitoring loop.

Samples an episode's frames, renders one prompt per sampled frame, queries
the backend with bounded concurrency, and parses each response into a
verdict. Failures stay local to their frame: a parse error or backend error
becomes a ``FailedVerdict`` in that frame's slot.
"""

from __future__ import annotations

import re
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

from .backends import Backend, BackendRequest, query
from .describer import (
    OrderPolicy,
    Vocabulary,
    describe,
    format_bullets,
    load_vocabulary,
    permute_description,
    vocabulary_for,
)
from .episodes import (
    Classification,
    Episode,
    FailedVerdict,
    FailureReason,
    Frame,
    MonitorVerdict,
    Verdict,
)
from .exceptions import (
    BackendError,
    ConfigError,
    EpisodeMonitorError,
    ValidationError,
    VerdictParseError,
)
from .logging_utils import WarningTally, get_logger, log_error_with_context
from .prompts import PromptTemplate, render_prompt
from .verdicts import parse_verdict

logger = get_logger("monitor")
tally = WarningTally("monitor")

TASK_SPEC_RE = re.compile(r"put the (\w+) blocks in a (\w+) bowl", re.IGNORECASE)


@dataclass(frozen=True)
class SamplerConfig:
    """
    How an episode is sampled and queried.

    ``target_hz`` overrides ``stride``: the stride becomes the frame count
    closest to one sampling period, e.g. 10 Hz frames at 2 Hz give stride 5.
    ``skip`` holds timesteps already evaluated (resumed runs).
    """

    stride: int = 1
    target_hz: Optional[float] = None
    max_in_flight: int = 4
    order_policy: OrderPolicy = OrderPolicy.AS_DETECTED
    order_seed: Optional[int] = None
    keyword_fallback: bool = False
    temperature: float = 0.0
    max_tokens: int = 512
    skip: FrozenSet[int] = field(default_factory=frozenset)
    monitor_name: str = "llm"

    def __post_init__(self) -> None:
        object.__setattr__(self, "order_policy", OrderPolicy(self.order_policy))
        object.__setattr__(self, "skip", frozenset(self.skip))
        failures = []
        if self.stride < 1:
            failures.append(f"stride must be >= 1, got {self.stride}")
        if self.target_hz is not None and self.target_hz <= 0:
            failures.append(f"target_hz must be > 0, got {self.target_hz}")
        if self.max_in_flight < 1:
            failures.append(f"max_in_flight must be >= 1, got {self.max_in_flight}")
        if self.temperature < 0:
            failures.append(f"temperature must be >= 0, got {self.temperature}")
        if failures:
            raise ConfigError(f"Invalid sampler settings: {'; '.join(failures)}", key="sampler")

    def stride_for(self, episode: Episode) -> int:
        if self.target_hz is None or len(episode.frames) < 2:
            return self.stride
        times = [f.time_s for f in episode.frames]
        period = statistics.median(b - a for a, b in zip(times, times[1:]))
        if period <= 0:
            return self.stride
        return max(1, round((1.0 / self.target_hz) / period))


def sample_frames(episode: Episode, sampler: SamplerConfig) -> List[Frame]:
    """Every ``stride``-th frame, starting at the first, minus skipped timesteps"""
    stride = sampler.stride_for(episode)
    return [f for f in episode.frames[::stride] if f.timestep not in sampler.skip]


def _task_bindings(
    template: PromptTemplate, task_spec: Optional[str], entity_id: str
) -> Dict[str, str]:
    wanted = template.placeholders & {"block_color", "bowl_color"}
    if not wanted:
        return {}
    match = TASK_SPEC_RE.search(task_spec or "")
    if match is None:
        raise ValidationError(
            f"Template '{template.name}' needs task colours but the task is "
            f"'{task_spec or ''}'",
            ["task_spec does not name block and bowl colours"],
            entity_id,
        )
    colors = {"block_color": match.group(1).lower(), "bowl_color": match.group(2).lower()}
    return {name: colors[name] for name in wanted}


def build_bindings(
    template: PromptTemplate, description_text: str, task_spec: Optional[str], entity_id: str
) -> Dict[str, str]:
    """Bindings for every placeholder of the shipped templates"""
    bindings = _task_bindings(template, task_spec, entity_id)
    slot = template.description_placeholder
    if slot is not None:
        bindings[slot] = description_text
    return bindings


def _request(
    template: PromptTemplate,
    lines: Tuple[str, ...],
    bindings: Dict[str, str],
    sampler: SamplerConfig,
) -> BackendRequest:
    return BackendRequest(
        prompt=render_prompt(template, bindings),
        temperature=sampler.temperature,
        max_tokens=sampler.max_tokens,
        template_name=template.name,
        style=template.style,
        bindings={k: v for k, v in bindings.items() if k != template.description_placeholder},
        scene_lines=lines,
    )


def _evaluate(
    backend: Backend,
    request: BackendRequest,
    episode_id: str,
    timestep: int,
    sampler: SamplerConfig,
) -> Verdict:
    try:
        response = query(backend, request)
    except BackendError as e:
        return FailedVerdict(
            episode_id, timestep, FailureReason.BACKEND_ERROR, str(e), monitor=sampler.monitor_name
        )

    try:
        verdict = parse_verdict(
            response.text,
            episode_id,
            timestep,
            keyword_fallback=sampler.keyword_fallback,
            monitor=sampler.monitor_name,
        )
    except VerdictParseError as e:
        tally.warn("unparseable", f"Unparseable response for {episode_id}@{timestep}: {e}")
        return FailedVerdict(
            episode_id,
            timestep,
            FailureReason.UNPARSEABLE,
            str(e),
            rationale=response.text,
            monitor=sampler.monitor_name,
        )

    if not verdict.per_object and request.scene_lines:
        message = f"Verdict for {episode_id}@{timestep} has no per-object classifications"
        tally.warn("no_per_object", message)
        # Only the keyword fallback may answer a non-empty scene without them
        if not sampler.keyword_fallback:
            return FailedVerdict(
                episode_id,
                timestep,
                FailureReason.UNPARSEABLE,
                message,
                rationale=response.text,
                monitor=sampler.monitor_name,
            )
    return verdict


def monitor_episode(
    episode: Episode,
    template: PromptTemplate,
    backend: Backend,
    sampler_config: Optional[SamplerConfig] = None,
    vocab: Optional[Vocabulary] = None,
) -> List[Verdict]:
    """
    Monitor one episode.

    Returns one verdict per sampled frame, in frame order, each carrying the
    frame's timestep. A frame whose response cannot be parsed or whose
    backend call fails yields a ``FailedVerdict`` in its slot.

    Raises:
        EpisodeMonitorError: every sampled frame failed at the backend
        TemplateError: the template cannot be rendered for this episode
    """
    sampler = sampler_config or SamplerConfig()
    vocab = vocab or vocabulary_for(episode.scenario_class)
    frames = sample_frames(episode, sampler)
    if not frames:
        return []

    requests = []
    for frame in frames:
        desc = describe(frame, vocab, sampler.order_policy, sampler.order_seed)
        bindings = build_bindings(template, format_bullets(desc), episode.task_spec, episode.id)
        requests.append(_request(template, desc.lines, bindings, sampler))

    start_time = time.time()
    with ThreadPoolExecutor(max_workers=min(sampler.max_in_flight, len(requests))) as pool:
        futures = [
            pool.submit(_evaluate, backend, request, episode.id, frame.timestep, sampler)
            for frame, request in zip(frames, requests)
        ]
        verdicts = [future.result() for future in futures]
    elapsed_ms = (time.time() - start_time) * 1000

    backend_failures = [
        v
        for v in verdicts
        if isinstance(v, FailedVerdict) and v.reason is FailureReason.BACKEND_ERROR
    ]
    if len(backend_failures) == len(verdicts):
        error = EpisodeMonitorError(episode.id, len(verdicts))
        log_error_with_context(
            "monitor", error, "monitor_episode", last_failure=backend_failures[-1].message
        )
        raise error

    anomalies = sum(1 for v in verdicts if v.is_anomaly)
    logger.debug(
        f"🔎 {episode.id}: {len(verdicts)} frames, {anomalies} anomaly, "
        f"{len(verdicts) - sum(isinstance(v, MonitorVerdict) for v in verdicts)} failed "
        f"({elapsed_ms:.0f}ms)"
    )
    return verdicts


@dataclass(frozen=True)
class ProbeRow:
    seed: int
    lines: Tuple[str, ...]
    overall: Optional[Classification]
    error: str = ""


@dataclass(frozen=True)
class OrderProbeResult:
    rows: Tuple[ProbeRow, ...]

    @property
    def consistent(self) -> bool:
        """All permutations parsed and agreed on the overall classification"""
        outcomes = {row.overall for row in self.rows}
        return len(outcomes) == 1 and None not in outcomes

    @property
    def anomaly_fraction(self) -> float:
        parsed = [row for row in self.rows if row.overall is not None]
        if not parsed:
            return 0.0
        return sum(row.overall is Classification.ANOMALY for row in parsed) / len(parsed)


def probe_order_sensitivity(
    frame: Frame,
    template: PromptTemplate,
    backend: Backend,
    seeds: Sequence[int],
    vocab: Optional[Vocabulary] = None,
    task_spec: Optional[str] = None,
    sampler_config: Optional[SamplerConfig] = None,
    entity_id: str = "probe",
) -> OrderProbeResult:
    """
    Query the same frame under several description orders.

    Each seed permutes the as-detected description; the row records the
    order sent and the parsed overall classification (None if the call or
    parse failed). Consistency is measured, not enforced.
    """
    sampler = sampler_config or SamplerConfig(max_in_flight=1)
    if vocab is None:
        vocab = load_vocabulary()
    base = describe(frame, vocab, OrderPolicy.AS_DETECTED)

    rows: List[ProbeRow] = []
    for seed in seeds:
        desc = permute_description(base, seed)
        bindings = build_bindings(template, format_bullets(desc), task_spec, entity_id)
        request = _request(template, desc.lines, bindings, sampler)
        verdict = _evaluate(backend, request, entity_id, frame.timestep, sampler)
        if isinstance(verdict, MonitorVerdict):
            rows.append(ProbeRow(seed, desc.lines, verdict.overall))
        else:
            rows.append(ProbeRow(seed, desc.lines, None, verdict.message))

    result = OrderProbeResult(tuple(rows))
    logger.info(
        f"🔀 Order probe over {len(rows)} permutations: "
        f"{'consistent' if result.consistent else 'inconsistent'} "
        f"(anomaly fraction {result.anomaly_fraction:.2f})"
    )
    return result
