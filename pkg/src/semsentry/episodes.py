"""
Episode data model and JSON Lines persistence.

Every other module consumes these types:
- Detection / Frame: symbolic perception output at one timestep
- VisibilityInterval / Episode: ground truth for evaluation
- MonitorVerdict / FailedVerdict: monitor output, one per evaluated frame

All values are immutable and validated on construction; an invalid value
raises ValidationError and is never observable.
"""

from __future__ import annotations

import json
import math
import numbers
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Mapping, Optional, Tuple, Union

from .exceptions import RecordFormatError, ValidationError
from .logging_utils import get_logger

logger = get_logger("episodes")

PathLike = Union[str, Path]


class ScenarioClass(str, Enum):
    NOMINAL_STOP = "nominal_stop"
    NOMINAL_LIGHT = "nominal_light"
    ANOMALOUS_STOP = "anomalous_stop"
    ANOMALOUS_LIGHT = "anomalous_light"
    STRANGE_OBJECT = "strange_object"
    MANIP_BASELINE = "manip_baseline"
    MANIP_NEUTRAL = "manip_neutral"
    MANIP_SEMANTIC = "manip_semantic"

    @property
    def is_driving(self) -> bool:
        return self in DRIVING_CLASSES

    @property
    def is_manipulation(self) -> bool:
        return self in MANIPULATION_CLASSES


class AnomalyKind(str, Enum):
    STOP_SIGN = "stop_sign"
    TRAFFIC_LIGHT = "traffic_light"
    STRANGE_OBJECT = "strange_object"
    SEMANTIC_DISTRACTOR = "semantic_distractor"
    NEUTRAL_DISTRACTOR = "neutral_distractor"


class TaskOutcome(str, Enum):
    SUCCESS = "success"
    FAILURE = "failure"


class Classification(str, Enum):
    NORMAL = "normal"
    ANOMALY = "anomaly"


class FailureReason(str, Enum):
    UNPARSEABLE = "unparseable"
    BACKEND_ERROR = "backend_error"


NOMINAL_DRIVING_CLASSES = (ScenarioClass.NOMINAL_STOP, ScenarioClass.NOMINAL_LIGHT)
ANOMALOUS_DRIVING_CLASSES = (
    ScenarioClass.ANOMALOUS_STOP,
    ScenarioClass.ANOMALOUS_LIGHT,
    ScenarioClass.STRANGE_OBJECT,
)
DRIVING_CLASSES = NOMINAL_DRIVING_CLASSES + ANOMALOUS_DRIVING_CLASSES
MANIPULATION_CLASSES = (
    ScenarioClass.MANIP_BASELINE,
    ScenarioClass.MANIP_NEUTRAL,
    ScenarioClass.MANIP_SEMANTIC,
)
# Classes whose episodes must carry no anomaly intervals
INTERVAL_FREE_CLASSES = NOMINAL_DRIVING_CLASSES + (ScenarioClass.MANIP_BASELINE,)


def _enum_value(enum_type: type, value: Any, field_name: str) -> Any:
    if isinstance(value, enum_type):
        return value
    try:
        return enum_type(value)
    except ValueError:
        allowed = ", ".join(m.value for m in enum_type)  # type: ignore[attr-defined]
        raise ValidationError(
            f"Unknown {field_name} '{value}' (expected one of: {allowed})",
            [f"{field_name}={value!r}"],
        ) from None


def _text(value: Any, what: str) -> str:
    if not isinstance(value, str):
        raise ValidationError(f"{what} must be a string, got {value!r}", [what])
    return value


def _integer(value: Any, what: str) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Real) or int(value) != value:
        raise ValidationError(f"{what} must be an integer, got {value!r}", [what])
    return int(value)


def _number(value: Any, what: str, finite: bool = True) -> float:
    if isinstance(value, bool) or not isinstance(value, numbers.Real):
        raise ValidationError(f"{what} must be a number, got {value!r}", [what])
    return _finite(value, what) if finite else float(value)


def _mapping(value: Any, what: str) -> Mapping[str, Any]:
    if not isinstance(value, Mapping):
        raise ValidationError(f"{what} must be an object, got {value!r}", [what])
    return value


def _records(value: Any, what: str) -> List[Any]:
    if not isinstance(value, list):
        raise ValidationError(f"{what} must be a list, got {value!r}", [what])
    return value


def _finite(value: float, what: str) -> float:
    value = float(value)
    if not math.isfinite(value):
        raise ValidationError(f"{what} must be finite, got {value}", [what])
    return value


@dataclass(frozen=True, slots=True)
class Detection:
    """An object label paired with a descriptive predicate."""

    label: str
    predicate: str = ""
    confidence: float = 1.0

    def __post_init__(self) -> None:
        if not _text(self.label, "label").strip():
            raise ValidationError("Detection label must be nonempty", ["label"])
        _text(self.predicate, "predicate")
        confidence = _number(self.confidence, "confidence")
        if not 0.0 <= confidence <= 1.0:
            raise ValidationError(
                f"Detection confidence must lie in [0, 1], got {confidence}", ["confidence"]
            )
        object.__setattr__(self, "confidence", confidence)

    def to_record(self) -> Dict[str, Any]:
        return {"label": self.label, "predicate": self.predicate, "confidence": self.confidence}

    @classmethod
    def from_record(cls, record: Mapping[str, Any]) -> Detection:
        record = _mapping(record, "detection")
        return cls(
            label=record["label"],
            predicate=record.get("predicate", ""),
            confidence=record.get("confidence", 1.0),
        )


@dataclass(frozen=True, slots=True)
class Frame:
    """
    Perception output at one timestep.

    ``perception_error`` is generator ground truth: True when the detections
    differ from the true scene, None when unknown.
    """

    timestep: int
    time_s: float
    detections: Tuple[Detection, ...] = ()
    embedding: Optional[Tuple[float, ...]] = None
    external_scores: Dict[str, float] = field(default_factory=dict)
    perception_error: Optional[bool] = None

    def __post_init__(self) -> None:
        timestep = _integer(self.timestep, "timestep")
        if timestep < 0:
            raise ValidationError(f"Frame timestep must be nonnegative, got {timestep}")
        time_s = _number(self.time_s, "time_s")
        if time_s < 0:
            raise ValidationError(f"Frame time_s must be nonnegative, got {time_s}", ["time_s"])

        if self.perception_error is not None and not isinstance(self.perception_error, bool):
            raise ValidationError(
                f"perception_error must be true, false or null, got {self.perception_error!r}",
                ["perception_error"],
            )

        object.__setattr__(self, "timestep", timestep)
        object.__setattr__(self, "time_s", time_s)
        object.__setattr__(self, "detections", tuple(self.detections))
        if self.embedding is not None:
            embedding = tuple(_number(v, "embedding", finite=False) for v in self.embedding)
            object.__setattr__(self, "embedding", embedding)
        object.__setattr__(
            self,
            "external_scores",
            {
                _text(k, "external_scores key"): _number(v, f"external_scores.{k}", finite=False)
                for k, v in _mapping(self.external_scores, "external_scores").items()
            },
        )

    def to_record(self) -> Dict[str, Any]:
        return {
            "timestep": self.timestep,
            "time_s": self.time_s,
            "detections": [d.to_record() for d in self.detections],
            "embedding": list(self.embedding) if self.embedding is not None else None,
            "external_scores": dict(self.external_scores),
            "perception_error": self.perception_error,
        }

    @classmethod
    def from_record(cls, record: Mapping[str, Any]) -> Frame:
        record = _mapping(record, "frame")
        embedding = record.get("embedding")
        detections = _records(record.get("detections", []), "detections")
        return cls(
            timestep=record["timestep"],
            time_s=record["time_s"],
            detections=tuple(Detection.from_record(d) for d in detections),
            embedding=tuple(_records(embedding, "embedding")) if embedding is not None else None,
            external_scores=record.get("external_scores") or {},
            perception_error=record.get("perception_error"),
        )


@dataclass(frozen=True, slots=True)
class VisibilityInterval:
    """Inclusive timestep range during which a ground-truth anomaly is in view."""

    start: int
    end: int
    anomaly_kind: AnomalyKind

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "anomaly_kind", _enum_value(AnomalyKind, self.anomaly_kind, "anomaly_kind")
        )
        object.__setattr__(self, "start", _integer(self.start, "interval start"))
        object.__setattr__(self, "end", _integer(self.end, "interval end"))
        if self.start < 0:
            raise ValidationError(f"Interval start must be nonnegative, got {self.start}")
        if self.start > self.end:
            raise ValidationError(
                f"Interval end {self.end} precedes start {self.start}",
                [f"interval [{self.start}, {self.end}]"],
            )

    def contains(self, timestep: int) -> bool:
        return self.start <= timestep <= self.end

    def to_record(self) -> Dict[str, Any]:
        return {"start": self.start, "end": self.end, "anomaly_kind": self.anomaly_kind.value}

    @classmethod
    def from_record(cls, record: Mapping[str, Any]) -> VisibilityInterval:
        record = _mapping(record, "anomaly interval")
        return cls(start=record["start"], end=record["end"], anomaly_kind=record["anomaly_kind"])


@dataclass(frozen=True, slots=True)
class Episode:
    """A timestamped frame sequence with ground-truth anomaly visibility."""

    id: str
    scenario_class: ScenarioClass
    frames: Tuple[Frame, ...]
    anomaly_intervals: Tuple[VisibilityInterval, ...] = ()
    task_outcome: Optional[TaskOutcome] = None
    task_spec: Optional[str] = None

    def __post_init__(self) -> None:
        if not _text(self.id, "id"):
            raise ValidationError("Episode id must be nonempty", ["id"])
        if self.task_spec is not None:
            _text(self.task_spec, "task_spec")
        try:
            scenario_class = _enum_value(ScenarioClass, self.scenario_class, "scenario_class")
            task_outcome = (
                _enum_value(TaskOutcome, self.task_outcome, "task_outcome")
                if self.task_outcome is not None
                else None
            )
        except ValidationError as e:
            raise ValidationError(str(e), e.validation_failures, entity_id=self.id) from None

        object.__setattr__(self, "scenario_class", scenario_class)
        object.__setattr__(self, "task_outcome", task_outcome)
        object.__setattr__(self, "frames", tuple(self.frames))
        object.__setattr__(self, "anomaly_intervals", tuple(self.anomaly_intervals))

        failures = self._check_invariants()
        if failures:
            raise ValidationError(
                f"Episode '{self.id}' is invalid: {'; '.join(failures)}",
                failures,
                entity_id=self.id,
            )

    def _check_invariants(self) -> List[str]:
        failures: List[str] = []

        timesteps = [f.timestep for f in self.frames]
        for prev, cur in zip(timesteps, timesteps[1:]):
            if cur <= prev:
                failures.append(f"timesteps not strictly increasing ({prev} then {cur})")
                break

        lengths = {len(f.embedding) for f in self.frames if f.embedding is not None}
        if len(lengths) > 1:
            failures.append(f"embedding lengths differ across frames: {sorted(lengths)}")

        intervals = self.anomaly_intervals
        if intervals and self.scenario_class in INTERVAL_FREE_CLASSES:
            failures.append(
                f"{self.scenario_class.value} episodes must not have anomaly intervals"
            )
        for prev_iv, cur_iv in zip(intervals, intervals[1:]):
            if cur_iv.start <= prev_iv.end:
                failures.append(
                    f"intervals overlap or are unsorted: [{prev_iv.start}, {prev_iv.end}] "
                    f"then [{cur_iv.start}, {cur_iv.end}]"
                )
        if intervals:
            if not timesteps:
                failures.append("anomaly intervals given for an episode without frames")
            else:
                lo, hi = timesteps[0], timesteps[-1]
                for iv in intervals:
                    if iv.start < lo or iv.end > hi:
                        failures.append(
                            f"interval [{iv.start}, {iv.end}] outside frame range [{lo}, {hi}]"
                        )
        return failures

    @property
    def timesteps(self) -> List[int]:
        return [f.timestep for f in self.frames]

    def frame_at(self, timestep: int) -> Optional[Frame]:
        for frame in self.frames:
            if frame.timestep == timestep:
                return frame
        return None

    def interval_for(self, timestep: int) -> Optional[VisibilityInterval]:
        for interval in self.anomaly_intervals:
            if interval.contains(timestep):
                return interval
        return None

    def in_view(self, timestep: int) -> bool:
        return self.interval_for(timestep) is not None

    def to_record(self) -> Dict[str, Any]:
        return {
            "id": self.id,
            "scenario_class": self.scenario_class.value,
            "frames": [f.to_record() for f in self.frames],
            "anomaly_intervals": [iv.to_record() for iv in self.anomaly_intervals],
            "task_outcome": self.task_outcome.value if self.task_outcome else None,
            "task_spec": self.task_spec,
        }

    @classmethod
    def from_record(cls, record: Mapping[str, Any]) -> Episode:
        record = _mapping(record, "episode")
        episode_id = _text(record["id"], "id")
        try:
            frames = tuple(Frame.from_record(f) for f in _records(record["frames"], "frames"))
            intervals = tuple(
                VisibilityInterval.from_record(iv)
                for iv in _records(record.get("anomaly_intervals", []), "anomaly_intervals")
            )
        except ValidationError as e:
            raise ValidationError(str(e), e.validation_failures, entity_id=episode_id) from None
        return cls(
            id=episode_id,
            scenario_class=record["scenario_class"],
            frames=frames,
            anomaly_intervals=intervals,
            task_outcome=record.get("task_outcome"),
            task_spec=record.get("task_spec"),
        )


def _check_source(verdict: Any) -> None:
    _text(verdict.episode_id, "episode_id")
    object.__setattr__(verdict, "timestep", _integer(verdict.timestep, "timestep"))
    _text(verdict.rationale, "rationale")
    _text(verdict.monitor, "monitor")


@dataclass(frozen=True, slots=True)
class MonitorVerdict:
    """Parsed monitor output for one evaluated frame."""

    episode_id: str
    timestep: int
    per_object: Tuple[Tuple[str, Classification], ...]
    overall: Classification
    rationale: str = ""
    monitor: str = "llm"

    def __post_init__(self) -> None:
        _check_source(self)
        object.__setattr__(
            self, "overall", _enum_value(Classification, self.overall, "classification")
        )
        object.__setattr__(
            self,
            "per_object",
            tuple(
                (_text(phrase, "object phrase"), _enum_value(Classification, c, "classification"))
                for phrase, c in self.per_object
            ),
        )

    @property
    def is_anomaly(self) -> bool:
        return self.overall is Classification.ANOMALY

    def to_record(self) -> Dict[str, Any]:
        return {
            "kind": "verdict",
            "episode_id": self.episode_id,
            "timestep": self.timestep,
            "per_object": [[phrase, c.value] for phrase, c in self.per_object],
            "overall": self.overall.value,
            "rationale": self.rationale,
            "monitor": self.monitor,
        }

    @classmethod
    def from_record(cls, record: Mapping[str, Any]) -> MonitorVerdict:
        return cls(
            episode_id=record["episode_id"],
            timestep=record["timestep"],
            per_object=tuple((p, c) for p, c in record.get("per_object", [])),
            overall=record["overall"],
            rationale=record.get("rationale", ""),
            monitor=record.get("monitor", "llm"),
        )


@dataclass(frozen=True, slots=True)
class FailedVerdict:
    """Marker for a sampled frame whose verdict was withheld."""

    episode_id: str
    timestep: int
    reason: FailureReason
    message: str = ""
    rationale: str = ""
    monitor: str = "llm"

    def __post_init__(self) -> None:
        _check_source(self)
        _text(self.message, "message")
        object.__setattr__(self, "reason", _enum_value(FailureReason, self.reason, "reason"))

    is_anomaly = False

    def to_record(self) -> Dict[str, Any]:
        return {
            "kind": "failure",
            "episode_id": self.episode_id,
            "timestep": self.timestep,
            "reason": self.reason.value,
            "message": self.message,
            "rationale": self.rationale,
            "monitor": self.monitor,
        }

    @classmethod
    def from_record(cls, record: Mapping[str, Any]) -> FailedVerdict:
        return cls(
            episode_id=record["episode_id"],
            timestep=record["timestep"],
            reason=record["reason"],
            message=record.get("message", ""),
            rationale=record.get("rationale", ""),
            monitor=record.get("monitor", "llm"),
        )


Verdict = Union[MonitorVerdict, FailedVerdict]


# JSON Lines persistence


def _dump_line(record: Mapping[str, Any], what: str) -> str:
    try:
        return json.dumps(record, ensure_ascii=False, separators=(",", ":"), allow_nan=False)
    except ValueError as e:
        raise ValidationError(
            f"Cannot serialize {what}: NaN and Infinity are not allowed",
            [str(e)],
            entity_id=record.get("id") or record.get("episode_id"),
        ) from e


def _reject_constant(name: str) -> float:
    raise ValueError(f"non-finite constant {name} is not allowed")


def _iter_records(path: PathLike) -> Iterator[Tuple[int, Dict[str, Any]]]:
    path = Path(path)
    with path.open("r", encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line, parse_constant=_reject_constant)
            except ValueError as e:
                raise RecordFormatError(
                    f"malformed record: {e}", path=str(path), line_number=line_number, orig=e
                ) from e
            if not isinstance(record, dict):
                raise RecordFormatError(
                    "record must be a JSON object", path=str(path), line_number=line_number
                )
            yield line_number, record


def _decode(path: PathLike, line_number: int, decode: Any, record: Dict[str, Any]) -> Any:
    try:
        return decode(record)
    except ValidationError as e:
        raise ValidationError(
            f"{path}:{line_number}: {e}", e.validation_failures, entity_id=e.entity_id
        ) from None
    except KeyError as e:
        raise RecordFormatError(
            f"missing field {e}", path=str(path), line_number=line_number, orig=e
        ) from e
    except (TypeError, ValueError) as e:
        raise RecordFormatError(
            f"bad field value: {e}", path=str(path), line_number=line_number, orig=e
        ) from e


def _write_lines(lines: Iterable[str], path: PathLike, mode: str) -> int:
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with path.open(mode, encoding="utf-8", newline="\n") as handle:
        for line in lines:
            handle.write(line + "\n")
            count += 1
    return count


def write_episodes(episodes: Iterable[Episode], path: PathLike) -> None:
    """
    Write episodes to a JSON Lines file, one self-contained record per line.

    Raises:
        ValidationError: if a value cannot be serialized (NaN/Infinity)
    """
    # Serialize everything first so a rejected record never leaves a partial file
    lines = [_dump_line(ep.to_record(), f"episode '{ep.id}'") for ep in episodes]
    count = _write_lines(lines, path, "w")
    logger.info(f"💾 Wrote {count} episodes to {path}")


def read_episodes(path: PathLike) -> List[Episode]:
    """
    Read and re-validate episodes from a JSON Lines file, preserving order.

    Raises:
        RecordFormatError: malformed line (carries ``line_number``)
        ValidationError: invariant violation (carries the episode id)
    """
    episodes = [
        _decode(path, line_number, Episode.from_record, record)
        for line_number, record in _iter_records(path)
    ]
    logger.info(f"📂 Read {len(episodes)} episodes from {path}")
    return episodes


def verdict_from_record(record: Mapping[str, Any]) -> Verdict:
    kind = record.get("kind", "verdict")
    if kind == "verdict":
        return MonitorVerdict.from_record(record)
    if kind == "failure":
        return FailedVerdict.from_record(record)
    raise ValueError(f"unknown record kind '{kind}'")


def write_verdicts(verdicts: Iterable[Verdict], path: PathLike) -> None:
    lines = [_dump_line(v.to_record(), "verdict") for v in verdicts]
    count = _write_lines(lines, path, "w")
    logger.info(f"💾 Wrote {count} verdicts to {path}")


def append_verdicts(verdicts: Iterable[Verdict], path: PathLike) -> int:
    """Append verdicts to an existing (or new) verdict file; returns the count appended"""
    lines = [_dump_line(v.to_record(), "verdict") for v in verdicts]
    return _write_lines(lines, path, "a")


def read_verdicts(path: PathLike) -> List[Verdict]:
    verdicts = [
        _decode(path, line_number, verdict_from_record, record)
        for line_number, record in _iter_records(path)
    ]
    logger.info(f"📂 Read {len(verdicts)} verdicts from {path}")
    return verdicts
