"""
Tests for the per-episode monitoring loop and the order-sensitivity probe.
"""

import threading
import time

import pytest

from conftest import make_frame
from semsentry import monitor
from semsentry.backends import BackendResponse, RuleOracleBackend
from semsentry.episodes import (
    Classification,
    Detection,
    Episode,
    FailedVerdict,
    FailureReason,
    Frame,
    MonitorVerdict,
    ScenarioClass,
)
from semsentry.exceptions import (
    BackendTransportError,
    ConfigError,
    EpisodeMonitorError,
    ValidationError,
)
from semsentry.monitor import (
    SamplerConfig,
    monitor_episode,
    probe_order_sensitivity,
    sample_frames,
)
from semsentry.prompts import load_template


class ScriptedBackend:
    """Oracle answers, except for prompts mentioning a trigger phrase"""

    name = "scripted"

    def __init__(self, trigger="pedestrian", failure="garbage", delay_s=0.0):
        self.trigger = trigger
        self.failure = failure
        self.delay_s = delay_s
        self.oracle = RuleOracleBackend()
        self.prompts = []
        self.in_flight = 0
        self.max_seen = 0
        self._lock = threading.Lock()

    def complete(self, request):
        with self._lock:
            self.prompts.append(request.prompt)
            self.in_flight += 1
            self.max_seen = max(self.max_seen, self.in_flight)
        try:
            if self.delay_s:
                time.sleep(self.delay_s)
            if self.trigger and self.trigger in request.prompt.split("I see:")[-1]:
                if self.failure == "error":
                    raise BackendTransportError("HTTP 503", status_code=503)
                if self.failure == "crash":
                    raise RuntimeError("connection pool exhausted")
                return BackendResponse("I am not sure what to say.")
            return self.oracle.complete(request)
        finally:
            with self._lock:
                self.in_flight -= 1


def _ten_hz_episode(n=20):
    car = (Detection("car", "on the road"),)
    frames = tuple(Frame(t, round(t * 0.1, 6), car) for t in range(n))
    return Episode("nominal_light-000", ScenarioClass.NOMINAL_LIGHT, frames)


@pytest.fixture
def driving_template():
    return load_template("driving_fewshot")


class TestSamplerConfig:
    """Test sampler validation and stride selection"""

    def test_invalid_values(self):
        """Test every invalid setting is reported"""
        with pytest.raises(ConfigError, match="stride") as exc_info:
            SamplerConfig(stride=0, max_in_flight=0)
        assert "max_in_flight" in str(exc_info.value)

    def test_stride(self, sample_episode):
        """Test every second frame from the first"""
        frames = sample_frames(sample_episode, SamplerConfig(stride=2))
        assert [f.timestep for f in frames] == [0, 2, 4]

    def test_target_rate(self):
        """Test 10 Hz frames sampled at 2 Hz use stride 5"""
        episode = _ten_hz_episode()
        sampler = SamplerConfig(target_hz=2.0)
        assert sampler.stride_for(episode) == 5
        assert [f.timestep for f in sample_frames(episode, sampler)] == [0, 5, 10, 15]

    def test_target_rate_faster_than_frames(self):
        """Test a target rate above the frame rate samples every frame"""
        assert SamplerConfig(target_hz=50.0).stride_for(_ten_hz_episode()) == 1

    def test_skip(self, sample_episode):
        """Test already evaluated timesteps are skipped"""
        frames = sample_frames(sample_episode, SamplerConfig(skip={0, 3}))
        assert [f.timestep for f in frames] == [1, 2, 4]


class TestMonitorEpisode:
    """Test monitoring a single episode"""

    def test_oracle_flags_interval(self, sample_episode, driving_template):
        """Test one verdict per frame, anomaly exactly while the light is in view"""
        verdicts = monitor_episode(sample_episode, driving_template, RuleOracleBackend())
        assert [v.timestep for v in verdicts] == [0, 1, 2, 3, 4]
        assert [v.is_anomaly for v in verdicts] == [False, False, True, True, False]
        assert all(isinstance(v, MonitorVerdict) for v in verdicts)
        assert all(v.episode_id == "anomalous_light-000" for v in verdicts)

    def test_per_object_lines(self, sample_episode, driving_template):
        """Test per-object classifications follow the description"""
        verdicts = monitor_episode(sample_episode, driving_template, RuleOracleBackend())
        assert verdicts[3].per_object == (
            ("a traffic light on a truck", Classification.ANOMALY),
            ("a truck on the road", Classification.NORMAL),
        )

    def test_unparseable_frame_is_isolated(self, sample_episode, driving_template):
        """Test a garbage response fails only its own frame"""
        verdicts = monitor_episode(sample_episode, driving_template, ScriptedBackend())
        assert len(verdicts) == 5
        failed = verdicts[1]
        assert isinstance(failed, FailedVerdict)
        assert failed.reason is FailureReason.UNPARSEABLE
        assert failed.rationale == "I am not sure what to say."
        assert [v.is_anomaly for v in verdicts] == [False, False, True, True, False]
        assert monitor.tally.count("unparseable") == 1

    def test_backend_error_is_isolated(self, sample_episode, driving_template):
        """Test a backend error fails only its own frame"""
        backend = ScriptedBackend(failure="error")
        verdicts = monitor_episode(sample_episode, driving_template, backend)
        assert verdicts[1].reason is FailureReason.BACKEND_ERROR
        assert "503" in verdicts[1].message
        assert isinstance(verdicts[2], MonitorVerdict)

    def test_unexpected_exception_is_isolated(self, sample_episode, driving_template):
        """Test a backend raising an arbitrary exception fails only its own frame"""
        backend = ScriptedBackend(failure="crash")
        verdicts = monitor_episode(sample_episode, driving_template, backend)
        assert len(verdicts) == 5
        assert verdicts[1].reason is FailureReason.BACKEND_ERROR
        assert "RuntimeError: connection pool exhausted" in verdicts[1].message
        assert [v.is_anomaly for v in verdicts] == [False, False, True, True, False]

    def test_overall_without_objects_fails_frame(self, sample_episode, driving_template):
        """Test an overall line alone cannot answer a frame that has detections"""
        backend = ScriptedBackend()
        overall_only = "Overall Scenario Classification: Normal."
        backend.complete = lambda request: BackendResponse(overall_only)
        empty = Episode("nominal_light-001", ScenarioClass.NOMINAL_LIGHT, (make_frame(0),))
        episodes = [sample_episode, empty]
        verdicts = [v for ep in episodes for v in monitor_episode(ep, driving_template, backend)]
        assert all(v.reason is FailureReason.UNPARSEABLE for v in verdicts[:5])
        assert "no per-object classifications" in verdicts[0].message
        assert verdicts[0].rationale == overall_only
        assert isinstance(verdicts[5], MonitorVerdict)
        assert verdicts[5].per_object == ()

    def test_every_frame_failing(self, sample_episode, driving_template):
        """Test an episode whose every call fails raises EpisodeMonitorError"""
        backend = ScriptedBackend(trigger="a", failure="error")
        with pytest.raises(EpisodeMonitorError) as exc_info:
            monitor_episode(sample_episode, driving_template, backend)
        assert exc_info.value.failures == 5

    def test_keyword_fallback(self, sample_episode, driving_template):
        """Test the sampler's fallback setting reaches the parser"""
        backend = ScriptedBackend()
        backend_answer = "Nothing stands out; the scene is normal."
        backend.complete = lambda request: BackendResponse(backend_answer)
        sampler = SamplerConfig(keyword_fallback=True, monitor_name="llm-fallback")
        verdicts = monitor_episode(sample_episode, driving_template, backend, sampler)
        assert all(v.overall is Classification.NORMAL for v in verdicts)
        assert {v.monitor for v in verdicts} == {"llm-fallback"}

    def test_bounded_concurrency_keeps_order(self, sample_episode, driving_template):
        """Test in-flight calls never exceed the bound and results keep frame order"""
        backend = ScriptedBackend(trigger=None, delay_s=0.02)
        sampler = SamplerConfig(max_in_flight=2)
        verdicts = monitor_episode(sample_episode, driving_template, backend, sampler)
        assert backend.max_seen <= 2
        assert [v.timestep for v in verdicts] == [0, 1, 2, 3, 4]

    def test_prompt_contains_description(self, sample_episode, driving_template):
        """Test each prompt ends with the frame's bullet list"""
        backend = ScriptedBackend(trigger=None)
        monitor_episode(sample_episode, driving_template, backend, SamplerConfig(max_in_flight=1))
        assert backend.prompts[0].endswith("I see:\n- a car on the road")

    def test_no_frames_sampled(self, sample_episode, driving_template):
        """Test a fully skipped episode yields no verdicts"""
        sampler = SamplerConfig(skip={0, 1, 2, 3, 4})
        assert monitor_episode(sample_episode, driving_template, RuleOracleBackend(), sampler) == []

    def test_manipulation_episode(self, manipulation_episode):
        """Test the tabletop template binds task colours from the task"""
        template = load_template("manip_zeroshot")
        backend = ScriptedBackend(trigger=None)
        (verdict,) = monitor_episode(manipulation_episode, template, backend)
        assert verdict.is_anomaly
        assert ("a red cup", Classification.ANOMALY) in verdict.per_object
        assert "put the red blocks in a green bowl" in backend.prompts[0]

    def test_manipulation_needs_task(self, manipulation_episode):
        """Test a task without colours cannot fill the tabletop template"""
        episode = Episode(
            manipulation_episode.id,
            manipulation_episode.scenario_class,
            manipulation_episode.frames,
            manipulation_episode.anomaly_intervals,
            task_outcome=manipulation_episode.task_outcome,
            task_spec="tidy the table",
        )
        with pytest.raises(ValidationError, match="task colours"):
            monitor_episode(episode, load_template("manip_zeroshot"), RuleOracleBackend())


class TestOrderProbe:
    """Test description-order sensitivity probing"""

    def test_oracle_is_order_invariant(self, driving_template):
        """Test a two-object scene gets the same verdict under every order"""
        frame = make_frame(0, ("stop sign", "on a billboard"), ("car", "on the road"))
        result = probe_order_sensitivity(frame, driving_template, RuleOracleBackend(), range(6))
        assert len(result.rows) == 6
        assert result.consistent
        assert result.anomaly_fraction == 1.0
        for row in result.rows:
            assert sorted(row.lines) == ["a car on the road", "a stop sign on a billboard"]

    def test_failures_are_recorded(self, driving_template):
        """Test failed calls leave an empty overall and an error message"""
        frame = make_frame(0, ("pedestrian", "crossing the road"))
        result = probe_order_sensitivity(frame, driving_template, ScriptedBackend(), [1, 2])
        assert all(row.overall is None for row in result.rows)
        assert all(row.error for row in result.rows)
        assert not result.consistent
        assert result.anomaly_fraction == 0.0
