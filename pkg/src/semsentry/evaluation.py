"""
Evaluation of verdicts against episode ground truth.

Driving corpora use interval accounting: each anomaly visibility interval is
one true positive if any verdict inside it is an anomaly, else one false
negative; every evaluated timestep outside all intervals is a true negative
or false positive. In-view normal verdicts count toward neither TN nor FP.
Failed verdicts (unparseable or backend errors) are tallied separately and
never enter a rate.

Manipulation corpora use per-episode detection rates and success/failure
confusion matrices.
"""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple, Union

from .describer import read_data_yaml
from .episodes import (
    ANOMALOUS_DRIVING_CLASSES,
    DRIVING_CLASSES,
    MANIPULATION_CLASSES,
    NOMINAL_DRIVING_CLASSES,
    Episode,
    FailedVerdict,
    FailureReason,
    MonitorVerdict,
    ScenarioClass,
    TaskOutcome,
    Verdict,
)
from .exceptions import ConfigError, EvaluationError
from .logging_utils import WarningTally, get_logger

logger = get_logger("evaluation")
tally = WarningTally("evaluation")

NOMINAL_TOTAL = "nominal_total"
ANOMALOUS_TOTAL = "anomalous_total"
TOTAL = "total"

# (key, group heading, column heading) in report order
COLUMNS: Tuple[Tuple[str, str, str], ...] = (
    (ScenarioClass.NOMINAL_STOP.value, "Nominal", "Stop"),
    (ScenarioClass.NOMINAL_LIGHT.value, "Nominal", "Light"),
    (NOMINAL_TOTAL, "Nominal", "Total"),
    (ScenarioClass.ANOMALOUS_STOP.value, "Anomalous", "Stop"),
    (ScenarioClass.ANOMALOUS_LIGHT.value, "Anomalous", "Light"),
    (ScenarioClass.STRANGE_OBJECT.value, "Anomalous", "Strange"),
    (ANOMALOUS_TOTAL, "Anomalous", "Total"),
    (TOTAL, "Overall", "Total"),
)

DEFAULT_COMPARE_AS = {
    "mahalanobis_min": "mahalanobis",
    "external:scod": "scod",
    "recon_error": "autoencoder",
}


def _ratio(numerator: int, denominator: int) -> Optional[float]:
    return numerator / denominator if denominator else None


# ---------------------------------------------------------------------------
# Interval metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClassCounts:
    """Counts for one scenario class or pooled group"""

    tp: int = 0
    fn: int = 0
    tn: int = 0
    fp: int = 0
    unparseable: int = 0
    backend_failures: int = 0
    failed_out_of_view: int = 0
    skipped_intervals: int = 0
    episodes: int = 0

    def __add__(self, other: ClassCounts) -> ClassCounts:
        return ClassCounts(
            *(getattr(self, f.name) + getattr(other, f.name) for f in fields(ClassCounts))
        )

    @property
    def intervals(self) -> int:
        return self.tp + self.fn

    @property
    def observations(self) -> int:
        return self.tn + self.fp

    @property
    def unparseable_count(self) -> int:
        return self.unparseable + self.backend_failures

    @property
    def tpr(self) -> Optional[float]:
        return _ratio(self.tp, self.intervals)

    @property
    def fnr(self) -> Optional[float]:
        return _ratio(self.fn, self.intervals)

    @property
    def tnr(self) -> Optional[float]:
        return _ratio(self.tn, self.observations)

    @property
    def fpr(self) -> Optional[float]:
        return _ratio(self.fp, self.observations)


@dataclass(frozen=True)
class IntervalMetrics:
    monitor: str
    per_class: Mapping[ScenarioClass, ClassCounts]

    def column(self, key: str) -> ClassCounts:
        """Counts for a scenario class value or a pooled group name"""
        if key == NOMINAL_TOTAL:
            return self.pooled(NOMINAL_DRIVING_CLASSES)
        if key == ANOMALOUS_TOTAL:
            return self.pooled(ANOMALOUS_DRIVING_CLASSES)
        if key == TOTAL:
            return self.pooled(tuple(self.per_class))
        return self.per_class.get(ScenarioClass(key), ClassCounts())

    def pooled(self, classes: Iterable[ScenarioClass]) -> ClassCounts:
        total = ClassCounts()
        for cls in classes:
            total = total + self.per_class.get(cls, ClassCounts())
        return total

    @property
    def total(self) -> ClassCounts:
        return self.column(TOTAL)


def _monitor_names(verdicts: Sequence[Verdict]) -> List[str]:
    return sorted({v.monitor for v in verdicts})


def _select_monitor(
    verdicts: Iterable[Verdict], monitor: Optional[str]
) -> Tuple[str, List[Verdict]]:
    verdicts = list(verdicts)
    if monitor is not None:
        return monitor, [v for v in verdicts if v.monitor == monitor]
    names = _monitor_names(verdicts)
    if len(names) > 1:
        raise EvaluationError(
            f"Verdicts come from several monitors ({', '.join(names)}); choose one"
        )
    return (names[0] if names else "llm"), verdicts


def index_verdicts(
    episodes: Iterable[Episode], verdicts: Iterable[Verdict]
) -> Dict[str, Dict[int, Verdict]]:
    """
    Verdicts keyed by episode id and timestep.

    Raises:
        EvaluationError: a verdict names an unknown episode or timestep, or
            two verdicts share an (episode, timestep)
    """
    known = {ep.id: set(ep.timesteps) for ep in episodes}
    index: Dict[str, Dict[int, Verdict]] = {episode_id: {} for episode_id in known}
    for verdict in verdicts:
        if verdict.episode_id not in known:
            raise EvaluationError(
                f"Verdict references unknown episode '{verdict.episode_id}'",
                verdict.episode_id,
                verdict.timestep,
            )
        if verdict.timestep not in known[verdict.episode_id]:
            raise EvaluationError(
                f"Verdict references unknown timestep {verdict.timestep} "
                f"of episode '{verdict.episode_id}'",
                verdict.episode_id,
                verdict.timestep,
            )
        slot = index[verdict.episode_id]
        if verdict.timestep in slot:
            raise EvaluationError(
                f"Duplicate verdict for episode '{verdict.episode_id}' "
                f"timestep {verdict.timestep}",
                verdict.episode_id,
                verdict.timestep,
            )
        slot[verdict.timestep] = verdict
    return index


def _failure_counts(verdict: FailedVerdict) -> Dict[str, int]:
    if verdict.reason is FailureReason.UNPARSEABLE:
        return {"unparseable": 1}
    return {"backend_failures": 1}


def _episode_counts(episode: Episode, by_timestep: Mapping[int, Verdict]) -> ClassCounts:
    counts: Dict[str, int] = defaultdict(int)
    counts["episodes"] = 1

    for interval in episode.anomaly_intervals:
        parsed = [
            v
            for t, v in by_timestep.items()
            if interval.contains(t) and isinstance(v, MonitorVerdict)
        ]
        if not parsed:
            counts["skipped_intervals"] += 1
            tally.warn(
                "interval_skipped",
                f"Interval [{interval.start}, {interval.end}] of '{episode.id}' "
                "has no evaluated timestep; excluded",
            )
        elif any(v.is_anomaly for v in parsed):
            counts["tp"] += 1
        else:
            counts["fn"] += 1

    for timestep, verdict in by_timestep.items():
        in_view = episode.in_view(timestep)
        if isinstance(verdict, FailedVerdict):
            for key, n in _failure_counts(verdict).items():
                counts[key] += n
            if not in_view:
                counts["failed_out_of_view"] += 1
        elif not in_view:
            counts["fp" if verdict.is_anomaly else "tn"] += 1

    return ClassCounts(**counts)


def interval_metrics(
    episodes: Iterable[Episode], verdicts: Iterable[Verdict], monitor: Optional[str] = None
) -> IntervalMetrics:
    """
    Interval-based TP/FN and per-timestep TN/FP, per scenario class.

    Example:
        Timesteps 0..9, intervals [2, 4] and [7, 8], anomaly verdicts at 3
        and 9 (normal elsewhere) give TP=1, FN=1, FP=1, TN=4.

    Raises:
        EvaluationError: verdicts that cannot be matched to episode frames,
            or verdicts from several monitors without ``monitor``
    """
    episodes = list(episodes)
    name, selected = _select_monitor(verdicts, monitor)
    index = index_verdicts(episodes, selected)

    per_class: Dict[ScenarioClass, ClassCounts] = {}
    for episode in episodes:
        counts = _episode_counts(episode, index[episode.id])
        per_class[episode.scenario_class] = (
            per_class.get(episode.scenario_class, ClassCounts()) + counts
        )

    ordered = {cls: per_class[cls] for cls in ScenarioClass if cls in per_class}
    return IntervalMetrics(name, ordered)


# ---------------------------------------------------------------------------
# Perception errors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PerceptionErrorMetrics:
    """Alerts against frames whose detections differ from the true scene"""

    monitor: str
    tp: int = 0
    fn: int = 0
    tn: int = 0
    fp: int = 0

    @property
    def tpr(self) -> Optional[float]:
        return _ratio(self.tp, self.tp + self.fn)

    @property
    def fpr(self) -> Optional[float]:
        return _ratio(self.fp, self.fp + self.tn)


def perception_error_metrics(
    episodes: Iterable[Episode], verdicts: Iterable[Verdict], monitor: Optional[str] = None
) -> PerceptionErrorMetrics:
    """
    Over nominal driving episodes: TP is an alert on an erroneous frame,
    FP an alert on a correct one. Frames without perception ground truth
    and failed verdicts are ignored.
    """
    nominal = [ep for ep in episodes if ep.scenario_class in NOMINAL_DRIVING_CLASSES]
    name, selected = _select_monitor(verdicts, monitor)
    nominal_ids = {ep.id for ep in nominal}
    index = index_verdicts(nominal, [v for v in selected if v.episode_id in nominal_ids])

    counts: Dict[str, int] = defaultdict(int)
    for episode in nominal:
        for frame in episode.frames:
            verdict = index[episode.id].get(frame.timestep)
            if not isinstance(verdict, MonitorVerdict) or frame.perception_error is None:
                continue
            if frame.perception_error:
                counts["tp" if verdict.is_anomaly else "fn"] += 1
            else:
                counts["fp" if verdict.is_anomaly else "tn"] += 1
    return PerceptionErrorMetrics(name, **counts)


# ---------------------------------------------------------------------------
# Manipulation metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DetectionRate:
    variant: ScenarioClass
    flagged: int
    n: int
    monitor: str = "llm"

    @property
    def rate(self) -> float:
        return self.flagged / self.n


def _flagged_episodes(verdicts: Iterable[Verdict]) -> Set[str]:
    return {v.episode_id for v in verdicts if v.is_anomaly}


def episode_detection_rate(
    episodes: Iterable[Episode],
    verdicts: Iterable[Verdict],
    variant: Union[ScenarioClass, str],
    monitor: Optional[str] = None,
) -> DetectionRate:
    """
    Fraction of the variant's episodes with at least one anomaly verdict.

    Raises:
        EvaluationError: no episodes of the variant
    """
    variant = ScenarioClass(variant)
    selection = [ep for ep in episodes if ep.scenario_class is variant]
    if not selection:
        raise EvaluationError(f"No episodes of variant '{variant.value}' to evaluate")
    name, selected = _select_monitor(verdicts, monitor)
    flagged = _flagged_episodes(selected)
    hits = sum(1 for ep in selection if ep.id in flagged)
    return DetectionRate(variant, hits, len(selection), name)


@dataclass(frozen=True)
class ConfusionMatrix2x2:
    detected_success: int = 0
    missed_success: int = 0
    detected_failure: int = 0
    missed_failure: int = 0

    def __post_init__(self) -> None:
        if min(self.cells) < 0:
            raise EvaluationError(f"Confusion cells must be nonnegative: {self.cells}")

    @property
    def cells(self) -> Tuple[int, int, int, int]:
        return (
            self.detected_success,
            self.missed_success,
            self.detected_failure,
            self.missed_failure,
        )

    @property
    def total(self) -> int:
        return sum(self.cells)

    @property
    def detection_rate(self) -> Optional[float]:
        return _ratio(self.detected_success + self.detected_failure, self.total)

    @property
    def success_rate(self) -> Optional[float]:
        return _ratio(self.detected_success + self.missed_success, self.total)


def fault_confusion(
    episodes: Iterable[Episode],
    verdicts: Iterable[Verdict],
    monitor: Optional[str] = None,
    variant: Optional[Union[ScenarioClass, str]] = None,
) -> ConfusionMatrix2x2:
    """
    Episodes split by task outcome and by whether any verdict flagged them.

    Raises:
        EvaluationError: an episode has no task outcome
    """
    selection = list(episodes)
    if variant is not None:
        selection = [ep for ep in selection if ep.scenario_class is ScenarioClass(variant)]
    _, selected = _select_monitor(verdicts, monitor)
    flagged = _flagged_episodes(selected)

    cells: Dict[str, int] = defaultdict(int)
    for episode in selection:
        if episode.task_outcome is None:
            raise EvaluationError(
                f"Episode '{episode.id}' has no task outcome", episode_id=episode.id
            )
        outcome = "success" if episode.task_outcome is TaskOutcome.SUCCESS else "failure"
        detected = "detected" if episode.id in flagged else "missed"
        cells[f"{detected}_{outcome}"] += 1
    return ConfusionMatrix2x2(**cells)


# ---------------------------------------------------------------------------
# Reference results
# ---------------------------------------------------------------------------

REFERENCE_KEYS = {"interval", "perception_error", "detection_rate", "fault_confusion"}


@dataclass(frozen=True)
class Reference:
    """Published results, looked up by monitor alias"""

    data: Mapping[str, Any]
    source: str = ""

    def interval(self, alias: str, column: str) -> Optional[Mapping[str, Any]]:
        return (self.data.get("interval") or {}).get(alias, {}).get(column)

    def has_interval(self, alias: str) -> bool:
        return alias in (self.data.get("interval") or {})

    def perception(self, alias: str) -> Optional[Mapping[str, Any]]:
        return (self.data.get("perception_error") or {}).get(alias)

    def detection_rate(self, variant: ScenarioClass, alias: str) -> Optional[float]:
        rates = (self.data.get("detection_rate") or {}).get(variant.value, {})
        value = rates.get(alias)
        return None if value is None else float(value)

    def confusion(self, variant: ScenarioClass, alias: str) -> Optional[ConfusionMatrix2x2]:
        cells = (self.data.get("fault_confusion") or {}).get(variant.value, {}).get(alias)
        return None if cells is None else ConfusionMatrix2x2(*(int(c) for c in cells))


def load_reference(path: Optional[Union[str, Path]] = None) -> Reference:
    """Load reference results; the shipped file when ``path`` is None"""
    data, source = read_data_yaml(path, "reference_results.yaml")
    if not isinstance(data, dict):
        raise ConfigError(f"Reference file {source} must contain a mapping", path=source)
    unknown = set(data) - REFERENCE_KEYS
    if unknown:
        raise ConfigError(
            f"Unknown reference key(s) in {source}: {', '.join(sorted(unknown))}",
            key=sorted(unknown)[0],
            path=source,
        )
    return Reference(data, source)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class ReportBundle:
    interval: Dict[str, IntervalMetrics] = field(default_factory=dict)
    perception: Dict[str, PerceptionErrorMetrics] = field(default_factory=dict)
    detection_rates: List[DetectionRate] = field(default_factory=list)
    confusion: Dict[Tuple[ScenarioClass, str], ConfusionMatrix2x2] = field(default_factory=dict)
    compare_as: Dict[str, str] = field(default_factory=dict)

    def alias(self, monitor: str) -> str:
        return {**DEFAULT_COMPARE_AS, **self.compare_as}.get(monitor, monitor)

    @property
    def is_empty(self) -> bool:
        return not (self.interval or self.perception or self.detection_rates or self.confusion)


def build_report(
    episodes: Iterable[Episode],
    verdicts: Iterable[Verdict],
    compare_as: Optional[Mapping[str, str]] = None,
) -> ReportBundle:
    """
    Every applicable metric for every monitor present in ``verdicts``.

    Driving episodes give interval and perception-error metrics; each
    manipulation variant gives a detection rate and, when outcomes are
    known, a confusion matrix.
    """
    episodes = list(episodes)
    verdicts = list(verdicts)
    bundle = ReportBundle(compare_as=dict(compare_as or {}))
    driving = [ep for ep in episodes if ep.scenario_class in DRIVING_CLASSES]
    driving_ids = {ep.id for ep in driving}

    for name in _monitor_names(verdicts):
        mine = [v for v in verdicts if v.monitor == name]
        index_verdicts(episodes, mine)
        scored = {v.episode_id for v in mine}
        driving_scored = [ep for ep in driving if ep.id in scored]
        if driving_scored:
            on_road = [v for v in mine if v.episode_id in driving_ids]
            bundle.interval[name] = interval_metrics(driving, on_road, name)
            if any(ep.scenario_class in NOMINAL_DRIVING_CLASSES for ep in driving_scored):
                bundle.perception[name] = perception_error_metrics(driving, on_road, name)

        for variant in MANIPULATION_CLASSES:
            selection = [ep for ep in episodes if ep.scenario_class is variant]
            if not any(ep.id in scored for ep in selection):
                continue
            bundle.detection_rates.append(episode_detection_rate(selection, mine, variant, name))
            if all(ep.task_outcome is not None for ep in selection):
                bundle.confusion[(variant, name)] = fault_confusion(selection, mine, name)

    if bundle.is_empty:
        raise EvaluationError("No verdicts match the given episodes; nothing to report")
    return bundle


def _rate(value: Optional[float]) -> str:
    return "N/A" if value is None else f"{value:.2f}"


def _delta(value: Optional[float], reference: Any) -> str:
    if value is None or reference is None:
        return ""
    return f"{value - float(reference):+.2f}"


def _ref_cell(entry: Optional[Mapping[str, Any]], key: str) -> str:
    if entry is None or key not in entry:
        return ""
    return _rate(entry[key])


def _table(header: Sequence[Sequence[str]], rows: Sequence[Sequence[str]]) -> List[str]:
    all_rows = [list(r) for r in header] + [list(r) for r in rows]
    widths = [max(len(r[i]) for r in all_rows) for i in range(len(all_rows[0]))]

    def fmt(row: Sequence[str]) -> str:
        cells = [row[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(row[1:], widths[1:])]
        return "  ".join(cells).rstrip()

    lines = [fmt(r) for r in header]
    lines.append("  ".join("-" * w for w in widths))
    lines.extend(fmt(r) for r in rows)
    return lines


_INTERVAL_ROWS: Tuple[Tuple[str, str], ...] = (
    ("Semantic anomalies", "intervals"),
    ("TP", "tp"),
    ("FN", "fn"),
    ("TPR", "tpr"),
    ("FNR", "fnr"),
    ("Observations", "observations"),
    ("TN", "tn"),
    ("FP", "fp"),
    ("TNR", "tnr"),
    ("FPR", "fpr"),
    ("Unparseable", "unparseable"),
    ("Backend failures", "backend_failures"),
    ("Skipped intervals", "skipped_intervals"),
)
_RATE_KEYS = ("tpr", "fnr", "tnr", "fpr")


def _interval_section(
    metrics: IntervalMetrics, alias: str, reference: Optional[Reference]
) -> List[str]:
    header = [
        [""] + [group for _, group, _ in COLUMNS],
        [""] + [heading for _, _, heading in COLUMNS],
    ]
    columns = [metrics.column(key) for key, _, _ in COLUMNS]
    compare = reference is not None and reference.has_interval(alias)

    rows = []
    for label, attr in _INTERVAL_ROWS:
        values = [getattr(c, attr) for c in columns]
        if attr in _RATE_KEYS:
            rows.append([label] + [_rate(v) for v in values])
            if compare:
                assert reference is not None
                refs = [reference.interval(alias, key) for key, _, _ in COLUMNS]
                rows.append([f"{label} ref"] + [_ref_cell(r, attr) for r in refs])
                rows.append(
                    [f"{label} delta"]
                    + [_delta(v, (r or {}).get(attr)) for v, r in zip(values, refs)]
                )
        else:
            rows.append([label] + [str(v) for v in values])

    title = f"Interval metrics: {metrics.monitor}"
    if compare:
        title += f" (reference: {alias})"
    return [title] + _table(header, rows)


def _comparison_section(bundle: ReportBundle, reference: Optional[Reference]) -> List[str]:
    header = [
        ["", ""] + [group for _, group, _ in COLUMNS],
        ["Monitor", "Rate"] + [heading for _, _, heading in COLUMNS],
    ]
    rows = []
    for name, metrics in bundle.interval.items():
        alias = bundle.alias(name)
        for attr in ("tpr", "tnr"):
            values = [getattr(metrics.column(key), attr) for key, _, _ in COLUMNS]
            rows.append([name, attr.upper()] + [_rate(v) for v in values])
            if reference is not None and reference.has_interval(alias):
                refs = [reference.interval(alias, key) for key, _, _ in COLUMNS]
                rows.append([f"{alias} ref", attr.upper()] + [_ref_cell(r, attr) for r in refs])
    return ["Detector comparison"] + _table(header, rows)


def _perception_section(bundle: ReportBundle, reference: Optional[Reference]) -> List[str]:
    header = [["Monitor", "TP", "FN", "TN", "FP", "TPR", "FPR", "TPR ref", "FPR ref"]]
    rows = []
    for name, m in bundle.perception.items():
        ref = reference.perception(bundle.alias(name)) if reference is not None else None
        rows.append(
            [name, str(m.tp), str(m.fn), str(m.tn), str(m.fp), _rate(m.tpr), _rate(m.fpr)]
            + [_ref_cell(ref, "tpr"), _ref_cell(ref, "fpr")]
        )
    return ["Perception-error alerts (nominal episodes)"] + _table(header, rows)


def _detection_section(bundle: ReportBundle, reference: Optional[Reference]) -> List[str]:
    header = [["Variant", "Monitor", "Flagged", "Episodes", "Rate", "Ref", "Delta"]]
    rows = []
    for d in bundle.detection_rates:
        ref = (
            reference.detection_rate(d.variant, bundle.alias(d.monitor))
            if reference is not None
            else None
        )
        rows.append(
            [d.variant.value, d.monitor, str(d.flagged), str(d.n), _rate(d.rate)]
            + ["" if ref is None else _rate(ref), _delta(d.rate, ref)]
        )
    return ["Episode detection rates"] + _table(header, rows)


def _confusion_section(bundle: ReportBundle, reference: Optional[Reference]) -> List[str]:
    header = [
        ["", "", "Success", "Success", "Failure", "Failure", "", ""],
        ["Variant", "Monitor", "Detected", "Missed", "Detected", "Missed", "Rate", "Ref cells"],
    ]
    rows = []
    for (variant, name), cm in bundle.confusion.items():
        ref = reference.confusion(variant, bundle.alias(name)) if reference is not None else None
        rows.append(
            [variant.value, name]
            + [str(c) for c in cm.cells]
            + [_rate(cm.detection_rate), "" if ref is None else "/".join(map(str, ref.cells))]
        )
    return ["Fault detection confusion"] + _table(header, rows)


def _render_text(bundle: ReportBundle, reference: Optional[Reference]) -> str:
    sections: List[List[str]] = []
    for name, metrics in bundle.interval.items():
        sections.append(_interval_section(metrics, bundle.alias(name), reference))
    if len(bundle.interval) > 1:
        sections.append(_comparison_section(bundle, reference))
    if bundle.perception:
        sections.append(_perception_section(bundle, reference))
    if bundle.detection_rates:
        sections.append(_detection_section(bundle, reference))
    if bundle.confusion:
        sections.append(_confusion_section(bundle, reference))
    return "\n\n".join("\n".join(lines) for lines in sections) + "\n"


def _csv_value(value: Any) -> str:
    if value is None:
        return "N/A"
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def _render_csv(bundle: ReportBundle, reference: Optional[Reference]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["section", "monitor", "column", "metric", "value", "reference"])

    for name, metrics in bundle.interval.items():
        alias = bundle.alias(name)
        for key, _, _ in COLUMNS:
            counts = metrics.column(key)
            ref = reference.interval(alias, key) if reference is not None else None
            for _, attr in _INTERVAL_ROWS:
                ref_value = "" if ref is None or attr not in ref else _csv_value(ref[attr])
                writer.writerow(
                    ["interval", name, key, attr, _csv_value(getattr(counts, attr)), ref_value]
                )

    for name, m in bundle.perception.items():
        ref = reference.perception(bundle.alias(name)) if reference is not None else None
        for attr in ("tp", "fn", "tn", "fp", "tpr", "fpr"):
            ref_value = "" if ref is None or attr not in ref else _csv_value(ref[attr])
            writer.writerow(
                ["perception", name, "nominal", attr, _csv_value(getattr(m, attr)), ref_value]
            )

    for d in bundle.detection_rates:
        ref = (
            reference.detection_rate(d.variant, bundle.alias(d.monitor))
            if reference is not None
            else None
        )
        writer.writerow(
            ["detection", d.monitor, d.variant.value, "flagged", str(d.flagged), ""]
        )
        writer.writerow(["detection", d.monitor, d.variant.value, "n", str(d.n), ""])
        writer.writerow(
            [
                "detection",
                d.monitor,
                d.variant.value,
                "rate",
                _csv_value(d.rate),
                "" if ref is None else _csv_value(ref),
            ]
        )

    for (variant, name), cm in bundle.confusion.items():
        ref = reference.confusion(variant, bundle.alias(name)) if reference is not None else None
        for cell, value in zip(
            ("detected_success", "missed_success", "detected_failure", "missed_failure"),
            cm.cells,
        ):
            ref_value = "" if ref is None else str(getattr(ref, cell))
            writer.writerow(["confusion", name, variant.value, cell, str(value), ref_value])

    return buffer.getvalue()


REPORT_FORMATS = ("text", "csv")


def render_report(
    bundle: ReportBundle, fmt: str = "text", reference: Optional[Reference] = None
) -> str:
    """
    Render a report as aligned plain-text tables or as long-format CSV.

    With ``reference``, monitors whose name (or ``compare_as`` alias) has
    published results get reference and delta rows.
    """
    if bundle.is_empty:
        raise EvaluationError("Report bundle is empty")
    if fmt == "text":
        return _render_text(bundle, reference)
    if fmt == "csv":
        return _render_csv(bundle, reference)
    raise ConfigError(
        f"Unknown report format '{fmt}' (choose from {', '.join(REPORT_FORMATS)})", key="format"
    )
