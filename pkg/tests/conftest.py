"""
Pytest configuration and fixtures for SemSentry tests.
"""

import sys
from pathlib import Path

import pytest

# Add src to Python path for testing
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from semsentry import describer, evaluation, monitor
from semsentry import baselines as baselines_module
from semsentry.episodes import (
    AnomalyKind,
    Detection,
    Episode,
    Frame,
    ScenarioClass,
    TaskOutcome,
    VisibilityInterval,
)
from semsentry.logging_utils import configure_for_tests
from semsentry.scenegen import GenConfig

configure_for_tests()

REFERENCE_COUNTS = {
    ScenarioClass.NOMINAL_STOP: 10,
    ScenarioClass.NOMINAL_LIGHT: 10,
    ScenarioClass.ANOMALOUS_STOP: 16,
    ScenarioClass.ANOMALOUS_LIGHT: 19,
    ScenarioClass.STRANGE_OBJECT: 15,
}
REFERENCE_BUDGETS = {
    ScenarioClass.NOMINAL_STOP: 309,
    ScenarioClass.NOMINAL_LIGHT: 494,
    ScenarioClass.ANOMALOUS_STOP: 248,
    ScenarioClass.ANOMALOUS_LIGHT: 197,
    ScenarioClass.STRANGE_OBJECT: 337,
}


def make_frame(timestep, *detections, embedding=None, scores=None, perception_error=None):
    """Frame at ``timestep`` (0.5 s spacing) from (label, predicate) pairs"""
    return Frame(
        timestep=timestep,
        time_s=timestep * 0.5,
        detections=tuple(Detection(label, predicate) for label, predicate in detections),
        embedding=embedding,
        external_scores=scores or {},
        perception_error=perception_error,
    )


def make_episode(episode_id, scenario_class, n_frames, intervals=(), **kwargs):
    """Episode with ``n_frames`` frames of one car and the given (start, end) intervals"""
    kind = {
        ScenarioClass.ANOMALOUS_STOP: AnomalyKind.STOP_SIGN,
        ScenarioClass.ANOMALOUS_LIGHT: AnomalyKind.TRAFFIC_LIGHT,
        ScenarioClass.STRANGE_OBJECT: AnomalyKind.STRANGE_OBJECT,
    }.get(ScenarioClass(scenario_class), AnomalyKind.STRANGE_OBJECT)
    frames = tuple(make_frame(t, ("car", "on the road")) for t in range(n_frames))
    return Episode(
        episode_id,
        scenario_class,
        frames,
        tuple(VisibilityInterval(start, end, kind) for start, end in intervals),
        **kwargs,
    )


@pytest.fixture(autouse=True)
def reset_tallies():
    """Warning counts start at zero in every test"""
    for tally in (describer.tally, monitor.tally, baselines_module.tally, evaluation.tally):
        tally.reset()
    yield


@pytest.fixture
def sample_episode():
    """Anomalous-light episode with a transported traffic light in view at t=2..3"""
    truck = [("traffic light", "on a truck"), ("truck", "on the road")]
    frames = (
        make_frame(0, ("car", "on the road")),
        make_frame(1, ("car", "on the road"), ("pedestrian", "on the sidewalk")),
        make_frame(2, ("car", "on the road"), *truck),
        make_frame(3, *truck),
        make_frame(4, ("car", "on the road")),
    )
    return Episode(
        "anomalous_light-000",
        ScenarioClass.ANOMALOUS_LIGHT,
        frames,
        (VisibilityInterval(2, 3, AnomalyKind.TRAFFIC_LIGHT),),
    )


@pytest.fixture
def manipulation_episode():
    """Semantic-distractor tabletop frame: a red cup next to a red-block task"""
    frame = make_frame(
        0,
        ("red block", ""),
        ("red block", ""),
        ("green bowl", ""),
        ("red cup", ""),
        ("blue bowl", ""),
    )
    return Episode(
        "manip_semantic-000",
        ScenarioClass.MANIP_SEMANTIC,
        (frame,),
        (VisibilityInterval(0, 0, AnomalyKind.SEMANTIC_DISTRACTOR),),
        task_outcome=TaskOutcome.FAILURE,
        task_spec="put the red blocks in a green bowl",
    )


@pytest.fixture
def reference_gen_config():
    """Noise-free generator settings with the reference counts and budgets"""
    return GenConfig(
        seed=0,
        counts=dict(REFERENCE_COUNTS),
        observation_budget=dict(REFERENCE_BUDGETS),
        embedding_dim=16,
        external_scores=("scod",),
    )
