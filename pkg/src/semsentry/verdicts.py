"""
Monitor response formats.

``synthesize_response`` writes a verdict in the response layout each prompt
style asks for; ``parse_verdict`` reads either layout back. Parsing is
anchored on the literal section labels:

few-shot layout::

    <object>:
    1. ... 4. <reasoning>
    Classification: Normal.
    ...
    Overall Scenario Classification: Anomaly.

zero-shot layout::

    <object>:
    Object Description: ...
    Misidentifiable as Block (yes or no): yes
    Misidentifiable as Bowl (yes or no): no
    ...
    Misidentifiable Objects Present (yes or no): yes
"""

from __future__ import annotations

import re
from typing import List, Optional, Tuple

from .episodes import Classification, MonitorVerdict
from .exceptions import VerdictParseError
from .prompts import PromptStyle

OVERALL_RE = re.compile(r"^overall scenario classification\s*:\s*(.*)$", re.IGNORECASE)
CLASSIFICATION_RE = re.compile(r"^classification\s*:\s*(.*)$", re.IGNORECASE)
PRESENT_RE = re.compile(
    r"^misidentifiable objects present(?:\s*\(yes or no\))?\s*:\s*(.*)$", re.IGNORECASE
)
MISIDENTIFIABLE_RE = re.compile(
    r"^misidentifiable as (?:block|bowl)(?:\s*\(yes or no\))?\s*:\s*(.*)$", re.IGNORECASE
)
HEADER_RE = re.compile(r"^(?P<phrase>.+?)\s*:\s*$")
FIELD_LABEL_RE = re.compile(
    r"^(overall scenario classification|classification|object description|"
    r"object similarity with .*|misidentifiable .*)$",
    re.IGNORECASE,
)

ANOMALY_WORDS = ("anomaly", "anomalous", "abnormal")
FALLBACK_LINES = 3


def _classification(value: str) -> Optional[Classification]:
    word = re.match(r"\s*([A-Za-z]+)", value)
    if word is None:
        return None
    token = word.group(1).lower()
    if token in ANOMALY_WORDS:
        return Classification.ANOMALY
    if token == "normal":
        return Classification.NORMAL
    return None


def _yes_no(value: str) -> Optional[bool]:
    word = re.match(r"\s*([A-Za-z]+)", value)
    if word is None:
        return None
    token = word.group(1).lower()
    if token == "yes":
        return True
    if token == "no":
        return False
    return None


def _header(line: str) -> Optional[str]:
    match = HEADER_RE.match(line)
    if match is None:
        return None
    phrase = match.group("phrase").strip()
    if FIELD_LABEL_RE.match(phrase):
        return None
    return phrase


_FEW_SHOT_NORMAL = (
    "1. Is this common to see while driving? Yes, this is commonly seen while driving.",
    "2. Can this influence the vehicle's behavior? It does not require any unusual response.",
    "3. Can the vehicle drive safely in its presence? Yes.",
    "4. Can this cause the vehicle to make unpredictable or unsafe maneuvers? No.",
)
_FEW_SHOT_ANOMALY = (
    "1. Is this common to see while driving? No, this is unusual in this context.",
    "2. Can this influence the vehicle's behavior? Yes, it may be mistaken for something "
    "the vehicle must react to.",
    "3. Can the vehicle drive safely in its presence? No, it could deceive the vehicle.",
    "4. Can this cause the vehicle to make unpredictable or unsafe maneuvers? Yes.",
)


def _capitalized(c: Classification) -> str:
    return "Anomaly" if c is Classification.ANOMALY else "Normal"


def synthesize_response(
    verdict: MonitorVerdict, style: PromptStyle = PromptStyle.FEW_SHOT_COT
) -> str:
    """Render a verdict in the response layout of ``style``"""
    lines: List[str] = []
    if PromptStyle(style) is PromptStyle.FEW_SHOT_COT:
        for phrase, c in verdict.per_object:
            lines.append(f"{phrase}:")
            lines.extend(_FEW_SHOT_ANOMALY if c is Classification.ANOMALY else _FEW_SHOT_NORMAL)
            lines.append(f"Classification: {_capitalized(c)}.")
        lines.append(f"Overall Scenario Classification: {_capitalized(verdict.overall)}.")
    else:
        for phrase, c in verdict.per_object:
            flagged = c is Classification.ANOMALY
            lines.extend(
                [
                    f"{phrase}:",
                    f"Object Description: {phrase}.",
                    "Object Similarity with Block Shape (explain): "
                    + ("it could pass for a block." if flagged else "none."),
                    "Object Similarity with Block Color (explain): "
                    + ("it shares the task color." if flagged else "none."),
                    f"Misidentifiable as Block (yes or no): {'yes' if flagged else 'no'}",
                    "Object Similarity with Bowl Shape (explain): none.",
                    "Object Similarity with Bowl Color (explain): none.",
                    "Misidentifiable as Bowl (yes or no): no",
                ]
            )
        present = "yes" if verdict.overall is Classification.ANOMALY else "no"
        lines.append(f"Misidentifiable Objects Present (yes or no): {present}")
    return "\n".join(lines)


def _parse_few_shot(lines: List[str]) -> Tuple[List[Tuple[str, Classification]], Optional[str]]:
    blocks: List[List] = []
    overall: Optional[str] = None
    for line in lines:
        match = OVERALL_RE.match(line)
        if match:
            overall = match.group(1)
            continue
        match = CLASSIFICATION_RE.match(line)
        if match:
            c = _classification(match.group(1))
            if blocks and c is not None:
                blocks[-1][1] = c
            continue
        phrase = _header(line)
        if phrase is not None:
            blocks.append([phrase, None])
    per_object = [(phrase, c) for phrase, c in blocks if c is not None]
    return per_object, overall


def _parse_zero_shot(lines: List[str]) -> Tuple[List[Tuple[str, Classification]], Optional[str]]:
    blocks: List[List] = []
    present: Optional[str] = None
    for line in lines:
        match = PRESENT_RE.match(line)
        if match:
            present = match.group(1)
            continue
        match = MISIDENTIFIABLE_RE.match(line)
        if match:
            answer = _yes_no(match.group(1))
            if blocks and answer is not None:
                blocks[-1][1] = blocks[-1][1] or answer
                blocks[-1][2] = True
            continue
        phrase = _header(line)
        if phrase is not None:
            blocks.append([phrase, False, False])
    per_object = [
        (phrase, Classification.ANOMALY if flagged else Classification.NORMAL)
        for phrase, flagged, answered in blocks
        if answered
    ]
    return per_object, present


def _keyword_scan(lines: List[str]) -> Optional[Classification]:
    tail = " ".join(lines[-FALLBACK_LINES:]).lower()
    if any(word in tail for word in ANOMALY_WORDS):
        return Classification.ANOMALY
    if "normal" in tail:
        return Classification.NORMAL
    return None


def parse_verdict(
    response_text: str,
    episode_id: str,
    timestep: int,
    keyword_fallback: bool = False,
    monitor: str = "llm",
) -> MonitorVerdict:
    """
    Parse a monitor response into a verdict.

    The few-shot layout is recognised by its "Overall Scenario
    Classification:" line (the last one wins); the zero-shot layout by
    "Misidentifiable Objects Present:" (yes = anomaly). With
    ``keyword_fallback`` a response lacking both is classified by scanning
    its final three lines for "anomaly"/"abnormal"/"normal".

    Raises:
        VerdictParseError: empty text, no overall decision, or an overall
            value that is neither normal nor anomaly
    """
    if not response_text or not response_text.strip():
        raise VerdictParseError("Empty response", episode_id, timestep)

    lines = [line.strip() for line in response_text.splitlines() if line.strip()]

    overall: Optional[Classification] = None
    raw: Optional[str] = None
    per_object: List[Tuple[str, Classification]] = []

    if any(OVERALL_RE.match(line) for line in lines):
        per_object, raw = _parse_few_shot(lines)
        overall = _classification(raw or "")
    elif any(PRESENT_RE.match(line) for line in lines):
        per_object, raw = _parse_zero_shot(lines)
        answer = _yes_no(raw or "")
        if answer is not None:
            overall = Classification.ANOMALY if answer else Classification.NORMAL
    else:
        per_object, _ = _parse_few_shot(lines)
        if keyword_fallback:
            overall = _keyword_scan(lines)

    if overall is None:
        if raw is not None:
            message = f"Unrecognised overall classification '{raw}'"
        elif per_object:
            message = "Per-object classifications present but no overall classification line"
        else:
            message = "No classification lines found"
        raise VerdictParseError(message, episode_id, timestep, excerpt=response_text)

    return MonitorVerdict(
        episode_id=episode_id,
        timestep=timestep,
        per_object=tuple(per_object),
        overall=overall,
        rationale=response_text,
        monitor=monitor,
    )
