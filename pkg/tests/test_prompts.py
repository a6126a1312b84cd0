"""
Tests for prompt templates and rendering.
"""

import pytest

from semsentry.exceptions import MissingPlaceholderError, TemplateError, UnknownBindingError
from semsentry.prompts import PromptStyle, PromptTemplate, load_template, render_prompt


class TestLoadTemplate:
    """Test loading built-in and file templates"""

    def test_driving_builtin(self):
        """Test the few-shot driving template"""
        template = load_template("driving_fewshot")
        assert template.style is PromptStyle.FEW_SHOT_COT
        assert template.placeholders == {"scene_description"}
        assert template.description_placeholder == "scene_description"
        assert template.body.endswith("{scene_description}")

    def test_manipulation_builtin(self):
        """Test the zero-shot tabletop template"""
        template = load_template("manip_zeroshot")
        assert template.style is PromptStyle.ZERO_SHOT_COT
        assert template.placeholders == {"block_color", "bowl_color", "scene_objects"}
        assert template.description_placeholder == "scene_objects"

    def test_file_template(self, tmp_path):
        """Test a template file drops one trailing newline and takes its stem as name"""
        path = tmp_path / "custom.txt"
        path.write_text("Scene:\n{scene_description}\n\n", encoding="utf-8")
        template = load_template(path)
        assert template.name == "custom"
        assert template.body == "Scene:\n{scene_description}\n"
        assert template.required_placeholders == {"scene_description"}

    def test_style_inferred_from_body(self, tmp_path):
        """Test a body asking for misidentifiable objects is zero-shot"""
        path = tmp_path / "tabletop.txt"
        path.write_text("{scene_objects}\nMisidentifiable Objects Present (yes or no):")
        assert load_template(path).style is PromptStyle.ZERO_SHOT_COT

    def test_explicit_style(self, tmp_path):
        """Test an explicit style overrides inference"""
        path = tmp_path / "plain.txt"
        path.write_text("{scene_description}")
        assert load_template(path, "zero_shot_cot").style is PromptStyle.ZERO_SHOT_COT

    def test_missing_file(self, tmp_path):
        """Test a missing template file raises TemplateError"""
        with pytest.raises(TemplateError, match="not found"):
            load_template(tmp_path / "nope.txt")


class TestPromptTemplate:
    """Test template construction invariants"""

    def test_empty_body(self):
        """Test an empty body is rejected"""
        with pytest.raises(TemplateError, match="empty body"):
            PromptTemplate("blank", "   ", frozenset())

    def test_required_must_appear(self):
        """Test declared placeholders must occur in the body"""
        with pytest.raises(TemplateError, match="bowl_color"):
            PromptTemplate("t", "{block_color}", frozenset({"block_color", "bowl_color"}))

    def test_no_description_placeholder(self):
        """Test templates without a scene slot report None"""
        template = PromptTemplate("t", "Hello {name}", frozenset({"name"}))
        assert template.description_placeholder is None


class TestRenderPrompt:
    """Test placeholder substitution"""

    def test_substitutes_every_occurrence(self):
        """Test repeated placeholders are all bound"""
        template = PromptTemplate("t", "{a} and {b} then {a}", frozenset({"a", "b"}))
        assert render_prompt(template, {"a": "x", "b": "y"}) == "x and y then x"

    def test_missing_binding(self):
        """Test a missing binding names the placeholder"""
        template = load_template("manip_zeroshot")
        with pytest.raises(MissingPlaceholderError) as exc_info:
            render_prompt(template, {"block_color": "red", "scene_objects": "- a red cup"})
        assert exc_info.value.placeholder == "bowl_color"
        assert exc_info.value.template == "manip_zeroshot"

    def test_unknown_binding(self):
        """Test a binding with no placeholder is rejected"""
        template = load_template("driving_fewshot")
        with pytest.raises(UnknownBindingError) as exc_info:
            render_prompt(template, {"scene_description": "- a car", "weather": "rain"})
        assert exc_info.value.binding == "weather"

    def test_values_are_not_expanded(self):
        """Test braces inside bound values survive verbatim"""
        template = PromptTemplate("t", "{a}|{b}", frozenset({"a", "b"}))
        assert render_prompt(template, {"a": "{b}", "b": "{a}"}) == "{b}|{a}"

    def test_driving_prompt_ends_with_description(self):
        """Test the rendered driving prompt ends with the bullet list"""
        template = load_template("driving_fewshot")
        prompt = render_prompt(template, {"scene_description": "- a car on the road"})
        assert prompt.endswith("I see:\n- a car on the road")
        assert "{" not in prompt

    def test_manipulation_prompt(self):
        """Test the rendered tabletop prompt names the task colors"""
        template = load_template("manip_zeroshot")
        prompt = render_prompt(
            template,
            {"block_color": "red", "bowl_color": "green", "scene_objects": "- a red cup"},
        )
        assert "put the red blocks in a green bowl" in prompt
        assert "- a red cup" in prompt
        assert "{" not in prompt
