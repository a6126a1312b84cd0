"""
Synthetic episode corpora.

Reproduces the driving scenario classes (nominal stop signs and traffic
lights, anomalous stop signs, transported traffic lights, strange objects on
the road) and the tabletop distractor variants as symbolic perception
streams, plus a detector-error model applied after ground truth is fixed.

Every episode draws from its own seed sequence keyed by (seed, class,
index), so corpora are deterministic and adding episodes of one class never
changes the episodes of another.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import yaml

from .describer import Vocabulary, load_vocabulary
from .episodes import (
    ANOMALOUS_DRIVING_CLASSES,
    AnomalyKind,
    Detection,
    Episode,
    Frame,
    ScenarioClass,
    TaskOutcome,
    VisibilityInterval,
)
from .exceptions import ConfigError
from .logging_utils import get_logger

logger = get_logger("scenegen")

STRANGE_OBJECTS = ("airplane", "boat", "elephant", "robot", "train")
STRANGE_PLACEMENTS = ("on the road", "in an adjacent lane")
BILLBOARD_ELIGIBLE = frozenset({"stop sign", "traffic light"})
BILLBOARD_PREDICATE = "on a billboard"

DEFAULT_SUCCESS_RATES = {
    ScenarioClass.MANIP_BASELINE: 0.70,
    ScenarioClass.MANIP_NEUTRAL: 0.544,
    ScenarioClass.MANIP_SEMANTIC: 0.456,
}

GEN_CONFIG_KEYS = {
    "seed",
    "counts",
    "episode_length",
    "anomaly_window",
    "noise",
    "vocabulary",
    "frame_period_s",
    "observation_budget",
    "embedding_dim",
    "embedding_noise",
    "external_scores",
    "success_rates",
}


@dataclass(frozen=True)
class NoiseConfig:
    """Detector-error rates; all default to a perfect detector."""

    billboard_hallucination_rate: float = 0.0
    label_swap_rate: float = 0.0
    dropout_rate: float = 0.0

    def __post_init__(self) -> None:
        for name in ("billboard_hallucination_rate", "label_swap_rate", "dropout_rate"):
            value = getattr(self, name)
            if not 0.0 <= float(value) <= 1.0:
                raise ConfigError(f"noise.{name} must lie in [0, 1], got {value}", key=name)

    @property
    def is_noise_free(self) -> bool:
        return not (self.billboard_hallucination_rate or self.label_swap_rate or self.dropout_rate)


@dataclass(frozen=True)
class GenConfig:
    """
    Corpus generation settings.

    ``observation_budget`` optionally fixes the total number of out-of-view
    timesteps per class; episode lengths are then derived from it instead of
    ``episode_length``.
    """

    seed: int = 0
    counts: Dict[ScenarioClass, int] = field(default_factory=dict)
    episode_length: int = 40
    anomaly_window: Tuple[int, int] = (4, 12)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    vocabulary: Optional[str] = None
    frame_period_s: float = 0.5
    observation_budget: Dict[ScenarioClass, int] = field(default_factory=dict)
    embedding_dim: int = 64
    embedding_noise: float = 0.05
    external_scores: Tuple[str, ...] = ()
    success_rates: Dict[ScenarioClass, float] = field(
        default_factory=lambda: dict(DEFAULT_SUCCESS_RATES)
    )

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        for cls, n in self.counts.items():
            if n < 0:
                raise ConfigError(f"counts.{cls.value} must be nonnegative, got {n}", key="counts")
        if self.episode_length < 1:
            raise ConfigError("episode_length must be at least 1", key="episode_length")
        lo, hi = self.anomaly_window
        if not 1 <= lo <= hi <= self.episode_length:
            raise ConfigError(
                f"anomaly_window ({lo}, {hi}) must satisfy 1 <= min <= max <= episode_length "
                f"({self.episode_length})",
                key="anomaly_window",
            )
        if self.frame_period_s <= 0:
            raise ConfigError("frame_period_s must be positive", key="frame_period_s")
        if self.embedding_dim < 0 or self.embedding_noise < 0:
            raise ConfigError("embedding settings must be nonnegative", key="embedding_dim")
        for cls, budget in self.observation_budget.items():
            n = self.counts.get(cls, 0)
            minimum = n if cls not in ANOMALOUS_DRIVING_CLASSES else 0
            if budget < minimum:
                raise ConfigError(
                    f"observation_budget.{cls.value}={budget} is too small for {n} episodes",
                    key="observation_budget",
                )
        for cls, rate in self.success_rates.items():
            if not 0.0 <= rate <= 1.0:
                raise ConfigError(
                    f"success_rates.{cls.value} must lie in [0, 1]", key="success_rates"
                )
        unknown_scores = set(self.external_scores) - {"scod"}
        if unknown_scores:
            raise ConfigError(
                f"Cannot synthesize external scores: {', '.join(sorted(unknown_scores))}",
                key="external_scores",
            )

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any], source: str = "<mapping>") -> GenConfig:
        unknown = set(data) - GEN_CONFIG_KEYS
        if unknown:
            raise ConfigError(
                f"Unknown generator key(s) in {source}: {', '.join(sorted(unknown))}",
                key=sorted(unknown)[0],
                path=source,
            )
        kwargs: Dict[str, Any] = {}
        for key in ("seed", "episode_length", "embedding_dim"):
            if key in data:
                kwargs[key] = int(data[key])
        for key in ("frame_period_s", "embedding_noise"):
            if key in data:
                kwargs[key] = float(data[key])
        if "anomaly_window" in data:
            lo, hi = data["anomaly_window"]
            kwargs["anomaly_window"] = (int(lo), int(hi))
        if "noise" in data:
            noise = dict(data["noise"] or {})
            try:
                kwargs["noise"] = NoiseConfig(**{k: float(v) for k, v in noise.items()})
            except TypeError as e:
                raise ConfigError(f"Bad noise section in {source}: {e}", key="noise") from e
        if data.get("vocabulary"):
            kwargs["vocabulary"] = str(data["vocabulary"])
        if "external_scores" in data:
            kwargs["external_scores"] = tuple(data["external_scores"] or ())
        for key, cast in (("counts", int), ("observation_budget", int), ("success_rates", float)):
            if key in data:
                kwargs[key] = _class_map(data[key] or {}, key, cast)
        if "success_rates" in kwargs:
            kwargs["success_rates"] = {**DEFAULT_SUCCESS_RATES, **kwargs["success_rates"]}
        return cls(**kwargs)


def _class_map(raw: Mapping[str, Any], key: str, cast: Any) -> Dict[ScenarioClass, Any]:
    result = {}
    for name, value in raw.items():
        try:
            result[ScenarioClass(name)] = cast(value)
        except ValueError:
            raise ConfigError(f"Unknown scenario class '{name}' in {key}", key=key) from None
    return result


def load_gen_config(path: Union[str, Path]) -> GenConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Generator config not found: {path}", path=str(path))
    with path.open("r", encoding="utf-8") as handle:
        data = yaml.safe_load(handle) or {}
    if "gen" in data and isinstance(data["gen"], dict):
        data = data["gen"]
    return GenConfig.from_mapping(data, str(path))


# Detector-error model


@dataclass
class NoiseState:
    """
    Random stream plus per-episode detector memory.

    ``swaps`` remembers, per (label, predicate) track, which label the
    detector reads it as (None = read correctly).
    """

    rng: np.random.Generator
    swap_pool: Tuple[str, ...] = ()
    swaps: Dict[Tuple[str, str], Optional[str]] = field(default_factory=dict)

    def candidates(self, label: str) -> List[str]:
        return [other for other in self.swap_pool if other != label]

    def assign(self, key: Tuple[str, str], misread: bool) -> None:
        """Fix how a track is read before its first frame"""
        candidates = self.candidates(key[0])
        target = None
        if misread and candidates:
            target = candidates[int(self.rng.random() * len(candidates))]
        self.swaps[key] = target


def swap_pool(vocab: Vocabulary) -> Tuple[str, ...]:
    """Labels a misread detection may take: the everyday scenery classes"""
    return vocab.nominal_subset or vocab.objects


def systematic_plan(n: int, rate: float, rng: np.random.Generator) -> List[bool]:
    """
    Choose which of n tracks are misread.

    Systematic sampling over a random order: every track is misread with
    probability ``rate`` and the total is floor(n*rate) or ceil(n*rate).
    """
    offset = float(rng.random())
    order = rng.permutation(n)
    return [
        math.floor((int(i) + 1) * rate + offset) > math.floor(int(i) * rate + offset)
        for i in order
    ]


def apply_noise(
    frame: Frame, noise: NoiseConfig, rng_state: Union[NoiseState, np.random.Generator]
) -> Frame:
    """
    Corrupt a frame's detections.

    Per detection, in order: dropout removes it; a label swap replaces its
    label with another everyday scenery object (decided once per track when a
    NoiseState is supplied); a stop sign or traffic light has its predicate
    rewritten to "on a billboard". Each detection consumes exactly four
    uniform draws, whatever the rates.
    """
    if isinstance(rng_state, NoiseState):
        state = rng_state
    else:
        state = NoiseState(rng_state, swap_pool(load_vocabulary()))

    noisy: List[Detection] = []
    for det in frame.detections:
        u_drop, u_swap, u_target, u_billboard = state.rng.random(4)
        if u_drop < noise.dropout_rate:
            continue

        key = (det.label, det.predicate)
        if key not in state.swaps:
            state.swaps[key] = None
            candidates = state.candidates(det.label)
            if candidates and u_swap < noise.label_swap_rate:
                state.swaps[key] = candidates[int(u_target * len(candidates))]
        label = state.swaps[key] or det.label

        predicate = det.predicate
        if det.label in BILLBOARD_ELIGIBLE and u_billboard < noise.billboard_hallucination_rate:
            predicate = BILLBOARD_PREDICATE

        noisy.append(Detection(label, predicate, det.confidence))

    detections = tuple(noisy)
    if detections == frame.detections:
        return frame
    return dataclasses.replace(frame, detections=detections, perception_error=True)


# Synthetic feature embeddings


class EmbeddingSpace:
    """Fixed pseudo-random unit directions per phrase, keyed by (seed, text)."""

    def __init__(self, dim: int, seed: int, jitter: float):
        self.dim = dim
        self.seed = seed
        self.jitter = jitter
        self._directions: Dict[str, np.ndarray] = {}

    def direction(self, text: str) -> np.ndarray:
        vec = self._directions.get(text)
        if vec is None:
            digest = int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "big")
            rng = np.random.default_rng([self.seed, digest])
            vec = rng.standard_normal(self.dim)
            vec /= np.linalg.norm(vec)
            self._directions[text] = vec
        return vec

    def embed(self, detections: Sequence[Detection], rng: np.random.Generator) -> Tuple[float, ...]:
        if detections:
            parts = [
                self.direction(d.label) + 0.5 * self.direction(f"~{d.predicate}")
                for d in detections
            ]
            base = np.mean(parts, axis=0)
        else:
            base = np.zeros(self.dim)
        vec = base + rng.normal(0.0, self.jitter, self.dim)
        return tuple(float(v) for v in np.round(vec, 6))


# Distractor catalog


@dataclass(frozen=True)
class Distractor:
    name: str
    description: str
    colors: Tuple[str, ...] = ()
    resembles: Tuple[str, ...] = ()


@dataclass(frozen=True)
class DistractorCatalog:
    task_colors: Tuple[str, ...]
    distractors: Tuple[Distractor, ...]

    @property
    def semantic(self) -> Tuple[Distractor, ...]:
        return tuple(d for d in self.distractors if d.resembles)


def load_distractor_catalog(path: Optional[Union[str, Path]] = None) -> DistractorCatalog:
    if path is None:
        text = resources.files("semsentry").joinpath("data", "distractors.yaml").read_text("utf-8")
        data = yaml.safe_load(text)
    else:
        with Path(path).open("r", encoding="utf-8") as handle:
            data = yaml.safe_load(handle)
    try:
        distractors = tuple(
            Distractor(
                name=entry["name"],
                description=entry["description"],
                colors=tuple(entry.get("colors") or ()),
                resembles=tuple(entry.get("resembles") or ()),
            )
            for entry in data["distractors"]
        )
        return DistractorCatalog(tuple(data["task_colors"]), distractors)
    except (KeyError, TypeError) as e:
        raise ConfigError(f"Malformed distractor catalog: {e}", path=str(path)) from e


# Episode construction


@dataclass
class _EpisodeContext:
    config: GenConfig
    vocab: Vocabulary
    truth_rng: np.random.Generator
    noise_state: NoiseState
    score_rng: np.random.Generator
    space: Optional[EmbeddingSpace]


def _choice(rng: np.random.Generator, options: Sequence[str]) -> str:
    return options[int(rng.integers(len(options)))]


def _background_tracks(ctx: _EpisodeContext) -> List[Tuple[str, str]]:
    rng = ctx.truth_rng
    nominal = ctx.vocab.nominal_subset or ctx.vocab.objects
    n_tracks = int(rng.integers(3, 8))
    tracks = []
    for _ in range(n_tracks):
        label = _choice(rng, nominal)
        tracks.append((label, _choice(rng, ctx.vocab.placements_for(label))))
    return tracks


def _background(ctx: _EpisodeContext, tracks: List[Tuple[str, str]]) -> List[Detection]:
    rng = ctx.truth_rng
    k = int(rng.integers(1, min(5, len(tracks)) + 1))
    chosen = sorted(rng.choice(len(tracks), size=k, replace=False))
    return [
        Detection(tracks[i][0], tracks[i][1], round(float(rng.uniform(0.5, 1.0)), 3))
        for i in chosen
    ]


def _window(ctx: _EpisodeContext, length: int) -> Tuple[int, int]:
    lo, hi = ctx.config.anomaly_window
    lo, hi = min(lo, length), min(hi, length)
    width = int(ctx.truth_rng.integers(lo, hi + 1))
    start = int(ctx.truth_rng.integers(0, length - width + 1))
    return start, start + width - 1


def _insert(ctx: _EpisodeContext, detections: List[Detection], extra: List[Detection]) -> None:
    for det in extra:
        position = int(ctx.truth_rng.integers(len(detections) + 1))
        detections.insert(position, det)


def _synthetic_scod(ctx: _EpisodeContext, frame: Frame) -> float:
    score = abs(float(ctx.score_rng.standard_normal()))
    if frame.perception_error:
        score += 2.0
    if any(d.label == "traffic light" and d.predicate == "on a truck" for d in frame.detections):
        score += 1.5
    return round(score, 6)


def _finish_frame(ctx: _EpisodeContext, timestep: int, truth: List[Detection]) -> Frame:
    embedding = ctx.space.embed(truth, ctx.truth_rng) if ctx.space is not None else None
    frame = Frame(
        timestep=timestep,
        time_s=round(timestep * ctx.config.frame_period_s, 9),
        detections=tuple(truth),
        embedding=embedding,
        perception_error=False,
    )
    frame = apply_noise(frame, ctx.config.noise, ctx.noise_state)
    if "scod" in ctx.config.external_scores:
        frame = dataclasses.replace(frame, external_scores={"scod": _synthetic_scod(ctx, frame)})
    return frame


def _driving_episode(
    ctx: _EpisodeContext,
    episode_id: str,
    cls: ScenarioClass,
    out_of_view: Optional[int],
    trigger_misread: bool = False,
) -> Episode:
    rng = ctx.truth_rng
    tracks = _background_tracks(ctx)

    trigger: List[Detection] = []
    kind: Optional[AnomalyKind] = None
    if cls is ScenarioClass.ANOMALOUS_STOP:
        trigger = [Detection("stop sign", BILLBOARD_PREDICATE, 0.9)]
        kind = AnomalyKind.STOP_SIGN
    elif cls is ScenarioClass.ANOMALOUS_LIGHT:
        trigger = [Detection("traffic light", "on a truck", 0.9), Detection("truck", "on the road")]
        kind = AnomalyKind.TRAFFIC_LIGHT
    elif cls is ScenarioClass.STRANGE_OBJECT:
        trigger = [Detection(_choice(rng, STRANGE_OBJECTS), _choice(rng, STRANGE_PLACEMENTS), 0.9)]
        kind = AnomalyKind.STRANGE_OBJECT
    elif cls is ScenarioClass.NOMINAL_STOP:
        trigger = [Detection("stop sign", _choice(rng, ctx.vocab.placements_for("stop sign")))]
    elif cls is ScenarioClass.NOMINAL_LIGHT:
        label = "traffic light"
        trigger = [Detection(label, _choice(rng, ctx.vocab.placements_for(label)))]

    if kind is not None:
        ctx.noise_state.assign((trigger[0].label, trigger[0].predicate), trigger_misread)
        lo, hi = ctx.config.anomaly_window
        width = int(rng.integers(lo, hi + 1))
        oov = out_of_view if out_of_view is not None else ctx.config.episode_length - width
        oov = max(oov, 0)
        length = oov + width
        start = int(rng.integers(0, oov + 1))
        window = (start, start + width - 1)
    else:
        length = out_of_view if out_of_view is not None else ctx.config.episode_length
        window = _window(ctx, length)

    frames = []
    for t in range(length):
        detections = _background(ctx, tracks)
        if window[0] <= t <= window[1]:
            _insert(ctx, detections, trigger)
        frames.append(_finish_frame(ctx, t, detections))

    intervals = (VisibilityInterval(window[0], window[1], kind),) if kind is not None else ()
    return Episode(episode_id, cls, tuple(frames), intervals)


def _manipulation_episode(
    ctx: _EpisodeContext, episode_id: str, cls: ScenarioClass, catalog: DistractorCatalog
) -> Episode:
    rng = ctx.truth_rng
    colors = list(catalog.task_colors)

    distractor: Optional[Distractor] = None
    if cls is ScenarioClass.MANIP_SEMANTIC:
        distractor = catalog.semantic[int(rng.integers(len(catalog.semantic)))]
        color, shape = _choice(rng, distractor.resembles).split(" ", 1)
        others = [c for c in colors if c != color]
        if shape == "block":
            block_color, bowl_color = color, _choice(rng, others)
        else:
            block_color, bowl_color = _choice(rng, others), color
    else:
        block_color = _choice(rng, colors)
        bowl_color = _choice(rng, [c for c in colors if c != block_color])
        if cls is ScenarioClass.MANIP_NEUTRAL:
            task = {block_color, bowl_color}
            neutral = [d for d in catalog.distractors if not task & set(d.colors)]
            distractor = neutral[int(rng.integers(len(neutral)))]

    spare = [c for c in colors if c not in (block_color, bowl_color)]
    detections = [
        Detection(f"{block_color} block"),
        Detection(f"{block_color} block"),
        Detection(f"{bowl_color} bowl"),
        Detection(f"{_choice(rng, spare)} block"),
        Detection(f"{_choice(rng, spare)} bowl"),
    ]
    intervals: Tuple[VisibilityInterval, ...] = ()
    if distractor is not None:
        _insert(ctx, detections, [Detection(distractor.description)])
        kind = (
            AnomalyKind.SEMANTIC_DISTRACTOR
            if cls is ScenarioClass.MANIP_SEMANTIC
            else AnomalyKind.NEUTRAL_DISTRACTOR
        )
        intervals = (VisibilityInterval(0, 0, kind),)

    # Perception noise models the driving detector only
    embedding = ctx.space.embed(detections, rng) if ctx.space is not None else None
    frame = Frame(0, 0.0, tuple(detections), embedding, perception_error=False)

    success = rng.random() < ctx.config.success_rates.get(cls, 0.5)
    return Episode(
        episode_id,
        cls,
        (frame,),
        intervals,
        task_outcome=TaskOutcome.SUCCESS if success else TaskOutcome.FAILURE,
        task_spec=f"put the {block_color} blocks in a {bowl_color} bowl",
    )


def _split_budget(budget: int, n: int) -> List[int]:
    base, remainder = divmod(budget, n)
    return [base + (1 if i < remainder else 0) for i in range(n)]


def generate(config: GenConfig) -> List[Episode]:
    """
    Generate a corpus of episodes.

    Classes are emitted in declaration order of ScenarioClass; episode ids
    are "<class>-<index:03d>".
    """
    driving_vocab = load_vocabulary(config.vocabulary, "driving")
    catalog: Optional[DistractorCatalog] = None
    space = (
        EmbeddingSpace(config.embedding_dim, config.seed, config.embedding_noise)
        if config.embedding_dim
        else None
    )

    # Misreads of the anomalous objects are spread evenly over the corpus
    n_triggers = sum(config.counts.get(cls, 0) for cls in ANOMALOUS_DRIVING_CLASSES)
    plan_rng = np.random.default_rng([config.seed, len(ScenarioClass)])
    misread = iter(systematic_plan(n_triggers, config.noise.label_swap_rate, plan_rng))

    episodes: List[Episode] = []
    for class_index, cls in enumerate(ScenarioClass):
        n = config.counts.get(cls, 0)
        if n == 0:
            continue
        budget = config.observation_budget.get(cls)
        lengths = _split_budget(budget, n) if budget is not None else [None] * n
        if cls.is_manipulation and catalog is None:
            catalog = load_distractor_catalog()

        for index in range(n):
            truth_seq, noise_seq, score_seq = np.random.SeedSequence(
                [config.seed, class_index, index]
            ).spawn(3)
            ctx = _EpisodeContext(
                config=config,
                vocab=driving_vocab,
                truth_rng=np.random.default_rng(truth_seq),
                noise_state=NoiseState(
                    np.random.default_rng(noise_seq), swap_pool(driving_vocab)
                ),
                score_rng=np.random.default_rng(score_seq),
                space=space,
            )
            episode_id = f"{cls.value}-{index:03d}"
            if cls.is_manipulation:
                assert catalog is not None
                episodes.append(_manipulation_episode(ctx, episode_id, cls, catalog))
            else:
                trigger_misread = cls in ANOMALOUS_DRIVING_CLASSES and next(misread)
                episodes.append(
                    _driving_episode(ctx, episode_id, cls, lengths[index], trigger_misread)
                )

    intervals = sum(len(ep.anomaly_intervals) for ep in episodes)
    logger.summary(
        f"🎬 Generated {len(episodes)} episodes ({intervals} anomaly intervals, "
        f"seed {config.seed}{', noisy' if not config.noise.is_noise_free else ''})"
    )
    return episodes
