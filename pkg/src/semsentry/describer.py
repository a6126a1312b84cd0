"""
Scene description generation.

Converts a frame's detections into the natural-language itemization the
prompt templates consume: one "a(n) <label> <predicate>" line per distinct
detection, in a configurable order.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

import numpy as np
import yaml

from .episodes import Frame, ScenarioClass
from .exceptions import ConfigError, ValidationError
from .logging_utils import WarningTally, get_logger

logger = get_logger("describer")
tally = WarningTally("describer")

VOCABULARY_KEYS = {"objects", "predicates", "nominal_subset", "placements"}


class OrderPolicy(str, Enum):
    AS_DETECTED = "as_detected"
    LEXICOGRAPHIC = "lexicographic"
    SHUFFLED = "shuffled"


@dataclass(frozen=True)
class Vocabulary:
    """Object and predicate phrases known to the detector."""

    objects: Tuple[str, ...]
    predicates: Tuple[str, ...] = ("",)
    nominal_subset: Tuple[str, ...] = ()
    placements: Dict[str, Tuple[str, ...]] = field(default_factory=dict)
    _known: frozenset = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if not self.objects:
            raise ValidationError("Vocabulary must list at least one object")
        known = frozenset(self.objects)
        object.__setattr__(self, "_known", known)
        extra = [o for o in self.nominal_subset if o not in known]
        if extra:
            raise ValidationError(
                f"nominal_subset entries missing from objects: {', '.join(extra)}", extra
            )
        unplaced = [label for label in self.placements if label not in known]
        if unplaced:
            raise ValidationError(
                f"placements given for unknown objects: {', '.join(unplaced)}", unplaced
            )

    def knows(self, label: str) -> bool:
        return label in self._known

    def placements_for(self, label: str) -> Tuple[str, ...]:
        """Plausible predicates for ``label``; falls back to all nonempty predicates"""
        placed = self.placements.get(label)
        if placed:
            return placed
        return tuple(p for p in self.predicates if p) or ("",)

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any], source: str = "<mapping>") -> Vocabulary:
        unknown = set(data) - VOCABULARY_KEYS
        if unknown:
            raise ConfigError(
                f"Unknown vocabulary key(s) in {source}: {', '.join(sorted(unknown))}",
                key=sorted(unknown)[0],
                path=source,
            )
        if "objects" not in data:
            raise ConfigError(f"Vocabulary in {source} has no 'objects'", key="objects")
        placements = {
            str(label): tuple(str(p) for p in preds)
            for label, preds in (data.get("placements") or {}).items()
        }
        return cls(
            objects=tuple(str(o) for o in data["objects"]),
            predicates=tuple("" if p is None else str(p) for p in data.get("predicates", [""])),
            nominal_subset=tuple(str(o) for o in data.get("nominal_subset", [])),
            placements=placements,
        )


def read_data_yaml(path: Optional[Union[str, Path]], default_name: str) -> Tuple[Any, str]:
    if path is None:
        text = resources.files("semsentry").joinpath("data", default_name).read_text("utf-8")
        return yaml.safe_load(text), f"semsentry/data/{default_name}"
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"File not found: {path}", path=str(path))
    with path.open("r", encoding="utf-8") as handle:
        return yaml.safe_load(handle), str(path)


@functools.lru_cache(maxsize=8)
def load_vocabulary(
    path: Optional[Union[str, Path]] = None, domain: str = "driving"
) -> Vocabulary:
    """
    Load a vocabulary file.

    The file holds one section per domain ("driving", "manipulation");
    a file without sections is treated as a single vocabulary.
    """
    data, source = read_data_yaml(path, "vocabulary.yaml")
    if not isinstance(data, dict):
        raise ConfigError(f"Vocabulary file {source} must contain a mapping", path=source)
    if "objects" not in data:
        if domain not in data:
            raise ConfigError(
                f"Vocabulary file {source} has no '{domain}' section", key=domain, path=source
            )
        data = data[domain]
    return Vocabulary.from_mapping(data, source)


def vocabulary_for(
    scenario_class: ScenarioClass, path: Optional[Union[str, Path]] = None
) -> Vocabulary:
    return load_vocabulary(path, "manipulation" if scenario_class.is_manipulation else "driving")


@dataclass(frozen=True)
class SceneDescription:
    lines: Tuple[str, ...]
    order_policy: OrderPolicy = OrderPolicy.AS_DETECTED
    seed: Optional[int] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "lines", tuple(line for line in self.lines if line.strip()))

    def __len__(self) -> int:
        return len(self.lines)


def article_for(label: str) -> str:
    return "an" if label[:1].lower() in "aeiou" else "a"


def render_detection(label: str, predicate: str = "") -> str:
    phrase = f"{article_for(label)} {label}"
    return f"{phrase} {predicate}" if predicate else phrase


def describe(
    frame: Frame,
    vocab: Vocabulary,
    order_policy: Union[OrderPolicy, str] = OrderPolicy.AS_DETECTED,
    seed: Optional[int] = None,
) -> SceneDescription:
    """
    Render a frame's detections as scene description lines.

    Duplicate (label, predicate) pairs collapse into one line with a count
    suffix, e.g. "a red block (2x)". Unknown labels pass through verbatim
    and are counted in ``describer.tally``.

    Example:
        >>> describe(frame, vocab).lines
        ('a traffic light on a truck', 'a car on the road')
    """
    policy = OrderPolicy(order_policy)

    counts: Dict[Tuple[str, str], int] = {}
    for det in frame.detections:
        if not vocab.knows(det.label):
            tally.warn("unknown_label", f"Label not in vocabulary: '{det.label}'")
        key = (det.label, det.predicate)
        counts[key] = counts.get(key, 0) + 1

    lines: List[str] = []
    for (label, predicate), n in counts.items():
        line = render_detection(label, predicate)
        lines.append(f"{line} ({n}x)" if n > 1 else line)

    description = SceneDescription(tuple(lines), OrderPolicy.AS_DETECTED)
    if policy is OrderPolicy.LEXICOGRAPHIC:
        return SceneDescription(tuple(sorted(lines)), policy)
    if policy is OrderPolicy.SHUFFLED:
        return permute_description(description, 0 if seed is None else seed)
    return description


def permute_description(desc: SceneDescription, seed: int) -> SceneDescription:
    """Same lines, order permuted deterministically by ``seed``"""
    order = np.random.default_rng(seed).permutation(len(desc.lines))
    lines = tuple(desc.lines[i] for i in order)
    return SceneDescription(lines, OrderPolicy.SHUFFLED, seed)


def format_bullets(desc: SceneDescription) -> str:
    """Bullet list bound into templates; empty description gives an empty string"""
    return "\n".join(f"- {line}" for line in desc.lines)
