"""
Tests for interval accounting, manipulation metrics and report rendering.
"""

import csv
import io

import numpy as np
import pytest

from conftest import make_episode, make_frame
from semsentry import evaluation
from semsentry.episodes import (
    AnomalyKind,
    Classification,
    Episode,
    FailedVerdict,
    FailureReason,
    MonitorVerdict,
    ScenarioClass,
    TaskOutcome,
    VisibilityInterval,
)
from semsentry.evaluation import (
    ClassCounts,
    ConfusionMatrix2x2,
    build_report,
    episode_detection_rate,
    fault_confusion,
    interval_metrics,
    load_reference,
    perception_error_metrics,
    render_report,
)
from semsentry.exceptions import ConfigError, EvaluationError

ANOMALY = Classification.ANOMALY
NORMAL = Classification.NORMAL


def _verdict(episode_id, t, overall, monitor="llm"):
    return MonitorVerdict(episode_id, t, (), overall, monitor=monitor)


def _manip(index, variant, outcome):
    kind = (
        AnomalyKind.SEMANTIC_DISTRACTOR
        if variant is ScenarioClass.MANIP_SEMANTIC
        else AnomalyKind.NEUTRAL_DISTRACTOR
    )
    return Episode(
        f"{variant.value}-{index:03d}",
        variant,
        (make_frame(0, ("red block", ""), ("green bowl", ""), ("red cup", "")),),
        (VisibilityInterval(0, 0, kind),),
        task_outcome=outcome,
        task_spec="put the red blocks in a green bowl",
    )


def _manip_corpus(variant, cells):
    """Episodes and llm verdicts realising the given confusion cells"""
    episodes, verdicts = [], []
    layout = [
        (TaskOutcome.SUCCESS, ANOMALY),
        (TaskOutcome.SUCCESS, NORMAL),
        (TaskOutcome.FAILURE, ANOMALY),
        (TaskOutcome.FAILURE, NORMAL),
    ]
    for (outcome, overall), count in zip(layout, cells):
        for _ in range(count):
            episode = _manip(len(episodes), variant, outcome)
            episodes.append(episode)
            verdicts.append(_verdict(episode.id, 0, overall))
    return episodes, verdicts


def _random_intervals(rng, n):
    intervals, t = [], 0
    while t < n:
        if rng.random() < 0.3:
            end = min(t + int(rng.integers(0, 3)), n - 1)
            intervals.append((t, end))
            t = end + 1
        else:
            t += 1
    return intervals


def _brute_force(episode, verdicts):
    """Reference counts computed frame by frame"""
    by_t = {v.timestep: v for v in verdicts}
    counts = dict(tp=0, fn=0, tn=0, fp=0, unparseable=0, backend_failures=0)
    counts.update(failed_out_of_view=0, skipped_intervals=0, episodes=1)
    for interval in episode.anomaly_intervals:
        inside = [
            by_t[t]
            for t in range(interval.start, interval.end + 1)
            if isinstance(by_t.get(t), MonitorVerdict)
        ]
        if not inside:
            counts["skipped_intervals"] += 1
        elif any(v.overall is ANOMALY for v in inside):
            counts["tp"] += 1
        else:
            counts["fn"] += 1
    for t in episode.timesteps:
        v = by_t.get(t)
        covered = any(i.start <= t <= i.end for i in episode.anomaly_intervals)
        if isinstance(v, FailedVerdict):
            key = "unparseable" if v.reason is FailureReason.UNPARSEABLE else "backend_failures"
            counts[key] += 1
            counts["failed_out_of_view"] += not covered
        elif v is not None and not covered:
            counts["fp" if v.overall is ANOMALY else "tn"] += 1
    return ClassCounts(**counts)


class TestIntervalMetrics:
    """Test interval-based accounting"""

    def test_worked_example(self):
        """Test intervals [2, 4] and [7, 8] with alerts at 3 and 9"""
        cls = ScenarioClass.ANOMALOUS_STOP
        episode = make_episode("anomalous_stop-000", cls, 10, [(2, 4), (7, 8)])
        verdicts = [
            _verdict(episode.id, t, ANOMALY if t in (3, 9) else NORMAL) for t in range(10)
        ]
        counts = interval_metrics([episode], verdicts).per_class[ScenarioClass.ANOMALOUS_STOP]
        assert (counts.tp, counts.fn, counts.fp, counts.tn) == (1, 1, 1, 4)
        assert counts.tpr == 0.5
        assert counts.fpr == 0.2

    def test_in_view_normal_counts_nowhere(self, sample_episode):
        """Test normal verdicts inside an interval are neither TN nor FP"""
        verdicts = [_verdict(sample_episode.id, t, NORMAL) for t in sample_episode.timesteps]
        counts = interval_metrics([sample_episode], verdicts).total
        assert (counts.fn, counts.tn, counts.fp) == (1, 3, 0)

    def test_brute_force_agreement(self):
        """Test accounting matches a frame-by-frame count over 1000 random cases"""
        rng = np.random.default_rng(1234)
        outcomes = ["missing", "normal", "anomaly", "unparseable", "backend_error"]
        for case in range(1000):
            episodes, verdicts, expected = [], [], ClassCounts()
            for e in range(int(rng.integers(1, 4))):
                n = int(rng.integers(1, 16))
                intervals = _random_intervals(rng, n)
                cls = ScenarioClass.ANOMALOUS_STOP if intervals else ScenarioClass.NOMINAL_STOP
                episode = make_episode(f"ep-{case}-{e}", cls, n, intervals)
                mine = []
                for t in range(n):
                    outcome = outcomes[int(rng.integers(len(outcomes)))]
                    if outcome in ("normal", "anomaly"):
                        mine.append(_verdict(episode.id, t, outcome))
                    elif outcome != "missing":
                        mine.append(FailedVerdict(episode.id, t, outcome))
                episodes.append(episode)
                verdicts.extend(mine)
                expected = expected + _brute_force(episode, mine)
            metrics = interval_metrics(episodes, verdicts, monitor="llm")
            assert metrics.total == expected, f"case {case}"

    def test_failed_verdicts_counted_separately(self, sample_episode):
        """Test failures never enter TN/FP and an all-failed interval is skipped"""
        verdicts = [
            _verdict(sample_episode.id, 0, NORMAL),
            FailedVerdict(sample_episode.id, 1, "unparseable"),
            FailedVerdict(sample_episode.id, 2, "backend_error"),
            FailedVerdict(sample_episode.id, 3, "unparseable"),
            _verdict(sample_episode.id, 4, ANOMALY),
        ]
        counts = interval_metrics([sample_episode], verdicts).total
        assert (counts.tp, counts.fn, counts.tn, counts.fp) == (0, 0, 1, 1)
        assert counts.unparseable == 2 and counts.backend_failures == 1
        assert counts.unparseable_count == 3
        assert counts.failed_out_of_view == 1
        assert counts.skipped_intervals == 1
        assert evaluation.tally.count("interval_skipped") == 1

    def test_pooled_columns_sum_counts(self):
        """Test pooled columns add counts rather than average rates"""
        stop = make_episode("nominal_stop-000", ScenarioClass.NOMINAL_STOP, 4)
        light = make_episode("nominal_light-000", ScenarioClass.NOMINAL_LIGHT, 2)
        verdicts = [_verdict(stop.id, t, ANOMALY if t == 0 else NORMAL) for t in range(4)]
        verdicts += [_verdict(light.id, t, ANOMALY) for t in range(2)]
        metrics = interval_metrics([stop, light], verdicts)
        pooled = metrics.column("nominal_total")
        assert (pooled.tn, pooled.fp) == (3, 3)
        assert pooled.fpr == 0.5
        assert metrics.column("anomalous_total").tpr is None

    def test_undefined_rates(self):
        """Test rates with a zero denominator are None"""
        assert ClassCounts().tpr is None
        assert ClassCounts().fpr is None

    def test_several_monitors_need_a_choice(self, sample_episode):
        """Test mixing monitors without naming one"""
        verdicts = [
            _verdict(sample_episode.id, 0, NORMAL, "llm"),
            _verdict(sample_episode.id, 0, ANOMALY, "gmm_nll"),
        ]
        with pytest.raises(EvaluationError, match="several monitors"):
            interval_metrics([sample_episode], verdicts)
        metrics = interval_metrics([sample_episode], verdicts, monitor="gmm_nll")
        assert metrics.monitor == "gmm_nll"
        assert metrics.total.fp == 1

    @pytest.mark.parametrize(
        "verdict, message",
        [
            (_verdict("ghost", 0, NORMAL), "unknown episode"),
            (_verdict("anomalous_light-000", 42, NORMAL), "unknown timestep"),
        ],
    )
    def test_unmatched_verdict(self, sample_episode, verdict, message):
        """Test verdicts must match episode frames"""
        with pytest.raises(EvaluationError, match=message):
            interval_metrics([sample_episode], [verdict])

    def test_duplicate_verdict(self, sample_episode):
        """Test two verdicts for one timestep"""
        verdicts = [_verdict(sample_episode.id, 1, NORMAL), _verdict(sample_episode.id, 1, ANOMALY)]
        with pytest.raises(EvaluationError, match="Duplicate") as exc_info:
            interval_metrics([sample_episode], verdicts)
        assert exc_info.value.timestep == 1


class TestPerceptionErrors:
    """Test alerts against detector errors on nominal episodes"""

    def test_counts(self):
        """Test alerts on erroneous and correct frames"""
        frames = (
            make_frame(0, perception_error=True),
            make_frame(1, perception_error=True),
            make_frame(2, perception_error=False),
            make_frame(3, perception_error=False),
            make_frame(4, perception_error=None),
        )
        episode = Episode("nominal_stop-000", ScenarioClass.NOMINAL_STOP, frames)
        overall = [ANOMALY, NORMAL, ANOMALY, NORMAL, ANOMALY]
        verdicts = [_verdict(episode.id, t, c) for t, c in enumerate(overall)]
        metrics = perception_error_metrics([episode], verdicts)
        assert (metrics.tp, metrics.fn, metrics.fp, metrics.tn) == (1, 1, 1, 1)
        assert metrics.tpr == 0.5

    def test_anomalous_episodes_ignored(self, sample_episode):
        """Test only nominal episodes are counted"""
        verdicts = [_verdict(sample_episode.id, t, ANOMALY) for t in sample_episode.timesteps]
        metrics = perception_error_metrics([sample_episode], verdicts)
        assert (metrics.tp, metrics.fn, metrics.fp, metrics.tn) == (0, 0, 0, 0)
        assert metrics.fpr is None


class TestManipulationMetrics:
    """Test detection rates and fault confusion matrices"""

    def test_detection_rate(self):
        """Test the fraction of flagged episodes"""
        episodes, verdicts = _manip_corpus(ScenarioClass.MANIP_NEUTRAL, (22, 114, 17, 97))
        rate = episode_detection_rate(episodes, verdicts, "manip_neutral")
        assert (rate.flagged, rate.n) == (39, 250)
        assert round(rate.rate, 2) == 0.16

    def test_no_episodes_of_variant(self):
        """Test an absent variant is an error"""
        with pytest.raises(EvaluationError, match="manip_baseline"):
            episode_detection_rate([], [], ScenarioClass.MANIP_BASELINE)

    @pytest.mark.parametrize(
        "variant, cells, rate",
        [
            (ScenarioClass.MANIP_SEMANTIC, (103, 11, 113, 23), 0.86),
            (ScenarioClass.MANIP_NEUTRAL, (22, 114, 17, 97), 0.16),
        ],
    )
    def test_confusion_reproduces_reference_cells(self, variant, cells, rate):
        """Test confusion cells, totals and detection rate for reference-sized corpora"""
        episodes, verdicts = _manip_corpus(variant, cells)
        cm = fault_confusion(episodes, verdicts)
        assert cm.cells == cells
        assert cm.total == 250
        assert round(cm.detection_rate, 2) == rate

    def test_any_alert_flags_episode(self):
        """Test one anomaly verdict among several flags the episode"""
        episode = make_episode("strange_object-000", ScenarioClass.STRANGE_OBJECT, 3, [(1, 1)])
        episode = Episode(
            episode.id,
            ScenarioClass.MANIP_SEMANTIC,
            episode.frames,
            (VisibilityInterval(1, 1, AnomalyKind.SEMANTIC_DISTRACTOR),),
            task_outcome=TaskOutcome.FAILURE,
        )
        verdicts = [_verdict(episode.id, 0, NORMAL), _verdict(episode.id, 2, ANOMALY)]
        assert fault_confusion([episode], verdicts).detected_failure == 1

    def test_missing_outcome(self):
        """Test confusion needs task outcomes"""
        episode = Episode("manip_baseline-000", ScenarioClass.MANIP_BASELINE, (make_frame(0),))
        with pytest.raises(EvaluationError, match="no task outcome"):
            fault_confusion([episode], [])

    def test_negative_cell(self):
        """Test confusion cells are nonnegative"""
        with pytest.raises(EvaluationError):
            ConfusionMatrix2x2(1, -1, 0, 0)


class TestReference:
    """Test the shipped reference results"""

    def test_shipped_values(self):
        """Test published rates and cells are available by alias"""
        reference = load_reference()
        assert reference.interval("llm", "total")["tpr"] == 0.92
        assert reference.interval("llm", "total")["observations"] == 1585
        assert reference.interval("llm_ground_truth", "anomalous_total")["tpr"] == 1.0
        assert reference.detection_rate(ScenarioClass.MANIP_SEMANTIC, "llm") == 0.86
        cm = reference.confusion(ScenarioClass.MANIP_SEMANTIC, "llm")
        assert cm.cells == (103, 11, 113, 23)
        assert reference.perception("scod") == {"tpr": 0.80, "fpr": 0.46}

    def test_confusion_totals(self):
        """Test every published confusion matrix covers 250 episodes"""
        reference = load_reference()
        for variant in (ScenarioClass.MANIP_SEMANTIC, ScenarioClass.MANIP_NEUTRAL):
            for alias in ("llm", "autoencoder"):
                assert reference.confusion(variant, alias).total == 250

    def test_unknown_key(self, tmp_path):
        """Test custom reference files are checked"""
        path = tmp_path / "ref.yaml"
        path.write_text("intervals: {}\n")
        with pytest.raises(ConfigError, match="intervals"):
            load_reference(path)


class TestReports:
    """Test report assembly and rendering"""

    @pytest.fixture
    def driving_bundle(self, sample_episode):
        llm = [
            _verdict(sample_episode.id, t, ANOMALY if t in (2, 3) else NORMAL)
            for t in sample_episode.timesteps
        ]
        gmm = [
            _verdict(sample_episode.id, t, ANOMALY, "mahalanobis_min")
            for t in sample_episode.timesteps
        ]
        return build_report([sample_episode], llm + gmm)

    def test_bundle_has_every_monitor(self, driving_bundle):
        """Test one interval block per monitor"""
        assert set(driving_bundle.interval) == {"llm", "mahalanobis_min"}
        assert driving_bundle.interval["llm"].total.tp == 1
        assert driving_bundle.alias("mahalanobis_min") == "mahalanobis"
        assert not driving_bundle.perception

    def test_text_report(self, driving_bundle):
        """Test titled sections and rates in the text report"""
        text = render_report(driving_bundle, "text")
        assert "Interval metrics: llm" in text
        assert "Interval metrics: mahalanobis_min" in text
        assert "Detector comparison" in text
        assert "N/A" in text
        assert "ref" not in text

    def test_text_report_with_reference(self, driving_bundle):
        """Test reference and delta rows for monitors with published results"""
        text = render_report(driving_bundle, "text", load_reference())
        assert "Interval metrics: llm (reference: llm)" in text
        assert "TPR ref" in text
        assert "TPR delta" in text
        assert "(reference: mahalanobis)" in text

    def test_csv_report(self, driving_bundle):
        """Test the long-format CSV"""
        rows = list(csv.reader(io.StringIO(render_report(driving_bundle, "csv"))))
        assert rows[0] == ["section", "monitor", "column", "metric", "value", "reference"]
        tpr = [r for r in rows if r[1] == "llm" and r[2] == "anomalous_light" and r[3] == "tpr"]
        assert tpr == [["interval", "llm", "anomalous_light", "tpr", "1.000000", ""]]

    def test_custom_alias(self, sample_episode):
        """Test compare_as maps a monitor onto a reference entry"""
        verdicts = [_verdict(sample_episode.id, t, NORMAL, "llm-run2") for t in range(5)]
        bundle = build_report([sample_episode], verdicts, {"llm-run2": "llm"})
        assert "(reference: llm)" in render_report(bundle, "text", load_reference())

    def test_manipulation_report(self):
        """Test manipulation variants produce rates and confusion tables"""
        episodes, verdicts = _manip_corpus(ScenarioClass.MANIP_SEMANTIC, (103, 11, 113, 23))
        bundle = build_report(episodes, verdicts)
        assert not bundle.interval
        text = render_report(bundle, "text", load_reference())
        assert "Episode detection rates" in text
        assert "Fault detection confusion" in text
        assert "103/11/113/23" in text

    def test_nothing_to_report(self, sample_episode):
        """Test verdicts for no known episode"""
        with pytest.raises(EvaluationError, match="nothing to report"):
            build_report([sample_episode], [])

    def test_unknown_format(self, driving_bundle):
        """Test an unsupported format"""
        with pytest.raises(ConfigError, match="Unknown report format"):
            render_report(driving_bundle, "html")
