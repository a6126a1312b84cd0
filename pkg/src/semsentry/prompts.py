"""
Prompt templates with named ``{placeholder}`` slots.

Templates ship as plain text files under ``semsentry/templates``; any other
file path may be loaded the same way.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import FrozenSet, Mapping, Optional, Union

from .exceptions import MissingPlaceholderError, TemplateError, UnknownBindingError
from .logging_utils import get_logger

logger = get_logger("prompts")

PLACEHOLDER_RE = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)\}")

DESCRIPTION_PLACEHOLDERS = ("scene_description", "scene_objects")


class PromptStyle(str, Enum):
    FEW_SHOT_COT = "few_shot_cot"
    ZERO_SHOT_COT = "zero_shot_cot"


BUILTIN_TEMPLATES = {
    "driving_fewshot": PromptStyle.FEW_SHOT_COT,
    "manip_zeroshot": PromptStyle.ZERO_SHOT_COT,
}


def placeholders_in(body: str) -> FrozenSet[str]:
    return frozenset(PLACEHOLDER_RE.findall(body))


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    body: str
    required_placeholders: FrozenSet[str]
    style: PromptStyle = PromptStyle.FEW_SHOT_COT

    def __post_init__(self) -> None:
        if not self.body.strip():
            raise TemplateError(f"Template '{self.name}' has an empty body", template=self.name)
        object.__setattr__(self, "required_placeholders", frozenset(self.required_placeholders))
        object.__setattr__(self, "style", PromptStyle(self.style))
        undeclared = self.required_placeholders - self.placeholders
        if undeclared:
            raise TemplateError(
                f"Template '{self.name}' declares placeholders absent from its body: "
                f"{', '.join(sorted(undeclared))}",
                template=self.name,
            )

    @property
    def placeholders(self) -> FrozenSet[str]:
        return placeholders_in(self.body)

    @property
    def description_placeholder(self) -> Optional[str]:
        for name in DESCRIPTION_PLACEHOLDERS:
            if name in self.placeholders:
                return name
        return None


def _infer_style(name: str, body: str) -> PromptStyle:
    if name in BUILTIN_TEMPLATES:
        return BUILTIN_TEMPLATES[name]
    if "Misidentifiable Objects Present" in body:
        return PromptStyle.ZERO_SHOT_COT
    return PromptStyle.FEW_SHOT_COT


def load_template(
    name_or_path: Union[str, Path], style: Optional[Union[PromptStyle, str]] = None
) -> PromptTemplate:
    """
    Load a template by built-in name ("driving_fewshot", "manip_zeroshot") or path.

    A single trailing newline is dropped so the rendered prompt ends with the
    final placeholder's content. Every placeholder in the body is required.
    """
    path = Path(name_or_path)
    if path.suffix == "" and str(name_or_path) in BUILTIN_TEMPLATES:
        name = str(name_or_path)
        body = resources.files("semsentry").joinpath("templates", f"{name}.txt").read_text("utf-8")
    else:
        if not path.exists():
            raise TemplateError(f"Template file not found: {path}", template=str(path))
        name = path.stem
        body = path.read_text(encoding="utf-8")

    if body.endswith("\n"):
        body = body[:-1]

    resolved = PromptStyle(style) if style is not None else _infer_style(name, body)
    template = PromptTemplate(name, body, placeholders_in(body), resolved)
    logger.debug(
        f"📄 Loaded template '{name}' ({resolved.value}, "
        f"placeholders: {', '.join(sorted(template.placeholders))})"
    )
    return template


def render_prompt(template: PromptTemplate, bindings: Mapping[str, str]) -> str:
    """
    Substitute every ``{placeholder}`` in the template body.

    Substitution is a single pass: braces inside bound values are never
    expanded.

    Raises:
        MissingPlaceholderError: a placeholder in the body has no binding
        UnknownBindingError: a binding names no placeholder of the template
    """
    present = template.placeholders
    for key in sorted(bindings):
        if key not in present:
            raise UnknownBindingError(key, template.name)
    for name in sorted(template.required_placeholders | present):
        if name not in bindings:
            raise MissingPlaceholderError(name, template.name)

    return PLACEHOLDER_RE.sub(lambda m: str(bindings[m.group(1)]), template.body)
