"""
Tests for monitor backends: rule oracle, HTTP endpoint and record/replay.
"""

import json

import httpx
import pytest

from semsentry.backends import (
    BackendRequest,
    OracleRule,
    RemoteBackend,
    ReplayBackend,
    RuleOracleBackend,
    RuleOracleConfig,
    WireSchema,
    build_backend,
    extract_path,
    load_oracle_rules,
    normalize_phrase,
    query,
)
from semsentry.cache import ReplayCache
from semsentry.episodes import Classification
from semsentry.exceptions import (
    BackendError,
    BackendTimeoutError,
    BackendTransportError,
    CacheMissError,
    ConfigError,
    ValidationError,
)
from semsentry.prompts import PromptStyle
from semsentry.verdicts import parse_verdict

URL = "http://monitor.test/v1/completions"


def _completion(text="Overall Scenario Classification: Normal."):
    return {
        "choices": [{"text": text}],
        "usage": {"prompt_tokens": 12, "completion_tokens": 7},
    }


def _remote(handler, **kwargs):
    kwargs.setdefault("backoff_factor", 0)
    return RemoteBackend(URL, transport=httpx.MockTransport(handler), **kwargs)


class TestBackendRequest:
    """Test request validation"""

    def test_empty_prompt(self):
        """Test a blank prompt is rejected"""
        with pytest.raises(ValidationError, match="prompt must be nonempty"):
            BackendRequest("  ")

    def test_collects_every_failure(self):
        """Test all invalid fields are reported together"""
        with pytest.raises(ValidationError) as exc_info:
            BackendRequest("p", temperature=-1, max_tokens=0)
        assert exc_info.value.failure_count == 2


class TestRuleOracle:
    """Test the deterministic rule backend"""

    @pytest.mark.parametrize(
        "line, expected",
        [
            ("a stop sign on a billboard", Classification.ANOMALY),
            ("a traffic light on a truck", Classification.ANOMALY),
            ("a stop sign at the intersection", Classification.NORMAL),
            ("an elephant on the road", Classification.ANOMALY),
            ("a train", Classification.ANOMALY),
            ("a car on the road (3x)", Classification.NORMAL),
            ("a billboard on the side of the road", Classification.NORMAL),
        ],
    )
    def test_driving_rules(self, line, expected):
        """Test the shipped driving rules"""
        assert load_oracle_rules().classify(line) is expected

    @pytest.mark.parametrize(
        "line, expected",
        [
            ("a red block", Classification.NORMAL),
            ("a green bowl", Classification.NORMAL),
            ("a red cup", Classification.ANOMALY),
            ("a green android toy", Classification.ANOMALY),
            ("a blue bowl", Classification.NORMAL),
            ("a black sandal", Classification.NORMAL),
        ],
    )
    def test_manipulation_rules(self, line, expected):
        """Test tabletop rules bound to the task colors"""
        rules = load_oracle_rules(domain="manipulation")
        bindings = {"block_color": "red", "bowl_color": "green"}
        assert rules.classify(line, bindings) is expected

    def test_rule_missing_binding_is_skipped(self):
        """Test a rule naming an absent binding never matches"""
        rules = load_oracle_rules(domain="manipulation")
        assert rules.classify("a red cup") is Classification.NORMAL

    def test_first_match_wins(self):
        """Test rule order decides"""
        config = RuleOracleConfig(
            (OracleRule("car", ".*", "normal"), OracleRule(".*", ".*", "anomaly"))
        )
        assert config.classify("a car on the road") is Classification.NORMAL
        assert config.classify("a bus on the road") is Classification.ANOMALY

    def test_invalid_pattern(self):
        """Test a broken regular expression is a configuration error"""
        with pytest.raises(ConfigError, match="Invalid oracle pattern"):
            OracleRule("stop (sign")

    def test_unknown_rule_key(self):
        """Test rule files are checked for stray keys"""
        with pytest.raises(ConfigError, match="Malformed oracle rule"):
            RuleOracleConfig.from_mapping({"rules": [{"label": "x", "verdict": "anomaly"}]})

    def test_custom_rule_file(self, tmp_path):
        """Test a single-table rule file"""
        path = tmp_path / "rules.yaml"
        path.write_text("default: anomaly\nrules:\n  - {label: car, classification: normal}\n")
        rules = load_oracle_rules(path)
        assert rules.classify("a car") is Classification.NORMAL
        assert rules.classify("a tree") is Classification.ANOMALY

    def test_normalize_phrase(self):
        """Test articles and count suffixes are stripped"""
        assert normalize_phrase("an elephant on the road (2x)") == "elephant on the road"
        assert normalize_phrase("the bridge") == "bridge"

    def test_answers_in_prompt_layout(self):
        """Test the oracle's text parses back to its own classification"""
        backend = RuleOracleBackend()
        request = BackendRequest(
            "I see:\n- a car on the road\n- a stop sign on a billboard",
            template_name="driving_fewshot",
        )
        response = query(backend, request)
        verdict = parse_verdict(response.text, "ep", 0)
        assert verdict.overall is Classification.ANOMALY
        assert verdict.per_object == (
            ("a car on the road", Classification.NORMAL),
            ("a stop sign on a billboard", Classification.ANOMALY),
        )

    def test_zero_shot_uses_manipulation_rules(self):
        """Test zero-shot prompts are answered with the tabletop table"""
        request = BackendRequest(
            "prompt",
            style=PromptStyle.ZERO_SHOT_COT,
            bindings={"block_color": "red", "bowl_color": "green"},
            scene_lines=("a red block", "a red cup"),
        )
        text = RuleOracleBackend().complete(request).text
        assert text.endswith("Misidentifiable Objects Present (yes or no): yes")


class TestQuery:
    """Test the backend call wrapper"""

    class _Broken:
        name = "broken"

        def complete(self, request):
            raise KeyError("choices")

    class _Slow:
        name = "slow"

        def complete(self, request):
            raise BackendTimeoutError("no answer in 30s", backend="slow")

    def test_unexpected_exception_becomes_backend_error(self):
        """Test an arbitrary exception is chained into a BackendError"""
        with pytest.raises(BackendError, match="broken failed: KeyError") as exc_info:
            query(self._Broken(), BackendRequest("prompt"))
        assert exc_info.value.backend == "broken"
        assert isinstance(exc_info.value.__cause__, KeyError)

    def test_backend_errors_pass_through(self):
        """Test a BackendError subclass keeps its type"""
        with pytest.raises(BackendTimeoutError):
            query(self._Slow(), BackendRequest("prompt"))


class TestRemoteBackend:
    """Test the HTTP client against a mock transport"""

    def test_payload_and_response(self):
        """Test the request body and parsed response fields"""
        seen = []

        def handler(request):
            seen.append(json.loads(request.content))
            text = "Overall Scenario Classification: Anomaly."
            return httpx.Response(200, json=_completion(text))

        backend = _remote(handler, api_key="secret")
        response = backend.complete(BackendRequest("- a train", max_tokens=64))
        assert response.text == "Overall Scenario Classification: Anomaly."
        assert (response.prompt_tokens, response.completion_tokens) == (12, 7)
        assert seen == [{"prompt": "- a train", "temperature": 0.0, "max_tokens": 64}]
        backend.close()

    def test_authorization_header(self):
        """Test the API key is sent as a bearer token"""
        headers = []

        def handler(request):
            headers.append(request.headers.get("authorization"))
            return httpx.Response(200, json=_completion())

        _remote(handler, api_key="secret").complete(BackendRequest("p"))
        assert headers == ["Bearer secret"]

    def test_chat_schema(self):
        """Test message-style payloads and a nested text path"""
        bodies = []

        def handler(request):
            bodies.append(json.loads(request.content))
            message = {"content": "Overall Scenario Classification: Normal"}
            return httpx.Response(200, json={"choices": [{"message": message}]})

        schema = WireSchema.from_mapping(
            {
                "prompt_field": "messages",
                "prompt_as_messages": True,
                "text_path": "choices.0.message.content",
                "extra": {"model": "any"},
            }
        )
        response = _remote(handler, schema=schema).complete(BackendRequest("hello"))
        assert response.text == "Overall Scenario Classification: Normal"
        assert response.prompt_tokens is None
        assert bodies[0]["messages"] == [{"role": "user", "content": "hello"}]
        assert bodies[0]["model"] == "any"

    def test_retries_then_succeeds(self):
        """Test 503 and 429 are retried"""
        statuses = iter([503, 429, 200])
        calls = []

        def handler(request):
            status = next(statuses)
            calls.append(status)
            if status == 200:
                return httpx.Response(200, json=_completion())
            return httpx.Response(status)

        response = _remote(handler, max_tries=4).complete(BackendRequest("p"))
        assert calls == [503, 429, 200]
        assert response.text.startswith("Overall")

    def test_gives_up_after_max_tries(self):
        """Test persistent 5xx becomes a transport error"""
        calls = []

        def handler(request):
            calls.append(1)
            return httpx.Response(500)

        with pytest.raises(BackendTransportError) as exc_info:
            _remote(handler, max_tries=3).complete(BackendRequest("p"))
        assert len(calls) == 3
        assert exc_info.value.status_code == 500
        assert exc_info.value.exit_code == 3

    def test_client_error_not_retried(self):
        """Test 4xx other than 429 fails at once"""
        calls = []

        def handler(request):
            calls.append(1)
            return httpx.Response(401)

        with pytest.raises(BackendTransportError, match="HTTP 401"):
            _remote(handler).complete(BackendRequest("p"))
        assert len(calls) == 1

    def test_timeout(self):
        """Test timeouts are retried then reported as BackendTimeoutError"""
        calls = []

        def handler(request):
            calls.append(1)
            raise httpx.ReadTimeout("too slow", request=request)

        with pytest.raises(BackendTimeoutError):
            _remote(handler, max_tries=2).complete(BackendRequest("p"))
        assert len(calls) == 2

    def test_connection_error(self):
        """Test connection failures become transport errors"""

        def handler(request):
            raise httpx.ConnectError("refused", request=request)

        with pytest.raises(BackendTransportError, match="unreachable"):
            _remote(handler, max_tries=1).complete(BackendRequest("p"))

    def test_malformed_payload(self):
        """Test a response without the text field"""

        def handler(request):
            return httpx.Response(200, json={"result": "hi"})

        with pytest.raises(BackendTransportError, match="Malformed response payload"):
            _remote(handler).complete(BackendRequest("p"))

    def test_from_env_requires_url(self, monkeypatch):
        """Test a missing endpoint URL is a configuration error"""
        monkeypatch.delenv("SEMSENTRY_API_URL", raising=False)
        with pytest.raises(ConfigError, match="SEMSENTRY_API_URL"):
            RemoteBackend.from_env()

    def test_unknown_wire_key(self):
        """Test wire schemas reject unknown keys"""
        with pytest.raises(ConfigError, match="text_pth"):
            WireSchema.from_mapping({"text_pth": "x"})

    def test_extract_path(self):
        """Test dotted paths through dicts and lists"""
        assert extract_path({"a": [{"b": 1}]}, "a.0.b") == 1
        with pytest.raises(KeyError):
            extract_path({"a": 1}, "a.b")


class TestReplayBackend:
    """Test record and strict replay"""

    def test_record_then_replay(self):
        """Test a recorded response is replayed without the inner backend"""
        cache = ReplayCache()
        request = BackendRequest("- a train", template_name="driving_fewshot")
        recorder = ReplayBackend(cache, RuleOracleBackend())
        recorded = recorder.complete(request)
        assert recorder.misses == 1 and not recorded.cached
        assert recorder.name == "record:oracle"

        replay = ReplayBackend(cache)
        replayed = replay.complete(request)
        assert replayed.text == recorded.text
        assert replayed.cached
        assert replay.hits == 1
        cache.close()

    def test_strict_miss(self):
        """Test strict replay raises on an unrecorded prompt"""
        with ReplayCache() as cache:
            replay = ReplayBackend(cache)
            assert replay.strict
            with pytest.raises(CacheMissError) as exc_info:
                replay.complete(BackendRequest("never seen", template_name="driving_fewshot"))
            assert exc_info.value.template_name == "driving_fewshot"
            assert replay.misses == 1

    def test_template_name_separates_entries(self):
        """Test identical prompts under different templates are distinct"""
        with ReplayCache() as cache:
            ReplayBackend(cache, RuleOracleBackend()).complete(
                BackendRequest("- a car", template_name="a")
            )
            with pytest.raises(CacheMissError):
                ReplayBackend(cache).complete(BackendRequest("- a car", template_name="b"))


class TestBuildBackend:
    """Test backend selection"""

    def test_oracle(self):
        """Test the oracle needs no configuration"""
        assert build_backend("oracle").name == "oracle"

    def test_replay_needs_cache(self):
        """Test replay without a cache path"""
        with pytest.raises(ConfigError, match="cache path"):
            build_backend("replay")

    def test_record_with_oracle(self, tmp_path):
        """Test record mode around the oracle"""
        backend = build_backend("record", str(tmp_path / "c.db"), record_inner="oracle")
        assert backend.name == "record:oracle"
        backend.cache.close()

    def test_unknown_kind(self):
        """Test an unknown backend name"""
        with pytest.raises(ConfigError, match="Unknown backend"):
            build_backend("telepathy")
