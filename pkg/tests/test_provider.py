import json

import pytest

from g2frag.provider import (
    AuthError,
    FailureKind,
    HttpBackend,
    ImagePart,
    MalformedResponse,
    Message,
    MissingFactor,
    MockBackend,
    ProviderClient,
    ProviderRequest,
    ProviderTimeout,
    RateLimitedError,
    RetryPolicy,
    Role,
    ScriptEntry,
    ServerError,
    TextPart,
    TokenBucket,
    UnmatchedRequest,
    load_script,
    parse_scores,
    text_request,
)


def make_client(entries, **kw):
    backend = MockBackend(entries=entries)
    return ProviderClient(backend, sleep=lambda s: None, **kw), backend


def any_request(text="hello"):
    return text_request("test-model", None, text)


# ---------------------------------------------------------------------------
# Mock scripting and retry behavior
# ---------------------------------------------------------------------------


def test_catch_all_script_reply():
    client, _ = make_client([ScriptEntry(reply="B")])
    assert client.complete(any_request()).text == "B"
    assert client.complete(any_request("anything else")).text == "B"


def test_retry_until_scripted_success():
    entries = [
        ScriptEntry(error="RateLimited", times=1),
        ScriptEntry(error="RateLimited", times=1),
        ScriptEntry(reply="ok"),
    ]
    client, backend = make_client(entries, retry=RetryPolicy(max_attempts=3, base_backoff_ms=1))
    assert client.complete(any_request()).text == "ok"
    assert backend.call_count == 3


def test_single_attempt_surfaces_timeout():
    client, backend = make_client(
        [ScriptEntry(error="Timeout")], retry=RetryPolicy(max_attempts=1, base_backoff_ms=1)
    )
    with pytest.raises(ProviderTimeout):
        client.complete(any_request())
    assert backend.call_count == 1


def test_auth_error_never_retried():
    client, backend = make_client(
        [ScriptEntry(error="AuthError")], retry=RetryPolicy(max_attempts=5, base_backoff_ms=1)
    )
    with pytest.raises(AuthError):
        client.complete(any_request())
    assert backend.call_count == 1


def test_non_retryable_kind_not_retried():
    policy = RetryPolicy(max_attempts=3, base_backoff_ms=1, retry_on=frozenset({FailureKind.TIMEOUT}))
    client, backend = make_client([ScriptEntry(error="ServerError")], retry=policy)
    with pytest.raises(ServerError):
        client.complete(any_request())
    assert backend.call_count == 1


def test_backoff_schedule_with_fake_clock():
    sleeps = []
    backend = MockBackend(entries=[ScriptEntry(error="ServerError")])
    policy = RetryPolicy(max_attempts=4, base_backoff_ms=100, backoff_multiplier=3.0)
    client = ProviderClient(backend, retry=policy, sleep=sleeps.append)
    with pytest.raises(ServerError):
        client.complete(any_request())
    # Before attempt k (k >= 2): base * multiplier^(k-2), in seconds.
    assert sleeps == [0.1, 0.3, 0.9]
    assert backend.call_count == 4


def test_script_matching_consumes_ordered_entries():
    entries = [
        ScriptEntry(contains=("alpha",), reply="first", times=1),
        ScriptEntry(contains=("alpha",), reply="second"),
    ]
    client, _ = make_client(entries)
    assert client.complete(any_request("alpha query")).text == "first"
    assert client.complete(any_request("alpha query")).text == "second"
    assert client.complete(any_request("alpha query")).text == "second"


def test_unmatched_request_is_an_error():
    client, _ = make_client([ScriptEntry(contains=("specific",), reply="x")])
    with pytest.raises(UnmatchedRequest):
        client.complete(any_request("other"))


def test_multi_contains_matcher():
    entries = [ScriptEntry(contains=("locality", "doorway"), reply="match")]
    client, _ = make_client(entries)
    assert client.complete(any_request("rate locality for the doorway question")).text == "match"
    with pytest.raises(UnmatchedRequest):
        client.complete(any_request("rate locality only"))


def test_load_script_file(tmp_path):
    path = tmp_path / "script.json"
    path.write_text(
        json.dumps(
            [
                {"match": {"contains": "hi"}, "reply": "hello"},
                {"match": {"contains": ["a", "b"]}, "error": "RateLimited", "times": 2},
                {"reply": "default"},
            ]
        )
    )
    entries = load_script(path)
    assert entries[0].contains == ("hi",)
    assert entries[1].contains == ("a", "b")
    assert entries[1].error == "RateLimited"
    assert entries[1].times == 2
    assert entries[2].contains == ()


def test_load_script_rejects_bad_entries(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps([{"match": {"contains": "x"}}]))
    with pytest.raises(ValueError):
        load_script(path)
    path.write_text(json.dumps([{"error": "NoSuchError"}]))
    with pytest.raises(ValueError):
        load_script(path)


# ---------------------------------------------------------------------------
# Scored completions
# ---------------------------------------------------------------------------


def test_parse_scores_basic():
    assert parse_scores("locality: 0.9\nsteps: 0.2", ["locality", "steps"]) == {
        "locality": 0.9,
        "steps": 0.2,
    }


def test_parse_scores_missing_factor():
    with pytest.raises(MissingFactor) as exc_info:
        parse_scores("locality: 0.9", ["locality", "steps"])
    assert exc_info.value.factor == "steps"


def test_parse_scores_clamps():
    assert parse_scores("locality: 1.7", ["locality"]) == {"locality": 1.0}
    assert parse_scores("locality: -0.4", ["locality"]) == {"locality": 0.0}


def test_parse_scores_ignores_surrounding_prose():
    text = "Here are my ratings:\nlocality: 0.5\nDone."
    assert parse_scores(text, ["locality"]) == {"locality": 0.5}


def test_complete_scored_through_client():
    client, _ = make_client([ScriptEntry(reply="a: 0.25\nb: 2.0")])
    assert client.complete_scored(any_request(), ["a", "b"]) == {"a": 0.25, "b": 1.0}


# ---------------------------------------------------------------------------
# Request validation
# ---------------------------------------------------------------------------


def test_request_requires_messages():
    with pytest.raises(ValueError):
        ProviderRequest(model_name="m", messages=())


def test_request_rejects_bad_media_type():
    msg = Message(Role.USER, (ImagePart(b"123", media_type="text/plain"),))
    with pytest.raises(ValueError):
        ProviderRequest(model_name="m", messages=(msg,))


# ---------------------------------------------------------------------------
# HTTP backend (no network: requests.post is monkeypatched)
# ---------------------------------------------------------------------------


class FakeHttpResponse:
    def __init__(self, status_code=200, body=None):
        self.status_code = status_code
        self._body = body or {}

    def json(self):
        return self._body


def test_http_wire_format(monkeypatch):
    captured = {}

    def fake_post(url, headers=None, json=None, timeout=None):
        captured.update(url=url, headers=headers, payload=json)
        return FakeHttpResponse(
            body={
                "choices": [{"message": {"content": "hi"}}],
                "usage": {"prompt_tokens": 7, "completion_tokens": 1},
            }
        )

    monkeypatch.setattr("g2frag.provider.requests.post", fake_post)
    backend = HttpBackend("https://api.example/v1", "sk-secret")
    request = ProviderRequest(
        model_name="gpt-test",
        messages=(
            Message(Role.SYSTEM, (TextPart("sys"),)),
            Message(Role.USER, (TextPart("see image"), ImagePart(b"PNGDATA"))),
        ),
        max_tokens=64,
    )
    response = backend.send(request)

    assert response.text == "hi"
    assert response.usage.prompt_tokens == 7
    assert captured["url"] == "https://api.example/v1/chat/completions"
    assert captured["headers"]["Authorization"] == "Bearer sk-secret"
    payload = captured["payload"]
    assert payload["model"] == "gpt-test"
    assert payload["temperature"] == 0.0
    assert payload["messages"][0] == {"role": "system", "content": [{"type": "text", "text": "sys"}]}
    image_block = payload["messages"][1]["content"][1]
    assert image_block["type"] == "image_url"
    assert image_block["image_url"]["url"].startswith("data:image/png;base64,")


@pytest.mark.parametrize(
    "status,error_type",
    [(401, AuthError), (403, AuthError), (429, RateLimitedError), (500, ServerError), (418, MalformedResponse)],
)
def test_http_status_mapping(monkeypatch, status, error_type):
    monkeypatch.setattr(
        "g2frag.provider.requests.post", lambda *a, **kw: FakeHttpResponse(status_code=status)
    )
    backend = HttpBackend("https://api.example/v1", "k")
    with pytest.raises(error_type):
        backend.send(any_request())


def test_http_malformed_body(monkeypatch):
    monkeypatch.setattr(
        "g2frag.provider.requests.post", lambda *a, **kw: FakeHttpResponse(body={"choices": []})
    )
    backend = HttpBackend("https://api.example/v1", "k")
    with pytest.raises(MalformedResponse):
        backend.send(any_request())


def test_repr_never_leaks_credential():
    backend = HttpBackend("https://api.example/v1", "sk-verysecret")
    assert "sk-verysecret" not in repr(backend)


def test_from_env_requires_key():
    with pytest.raises(AuthError):
        HttpBackend.from_env(environ={})


# ---------------------------------------------------------------------------
# Rate limiter
# ---------------------------------------------------------------------------


def test_token_bucket_blocks_after_burst():
    now = [0.0]
    sleeps = []

    def clock():
        return now[0]

    def sleep(s):
        sleeps.append(s)
        now[0] += s

    bucket = TokenBucket(per_minute=60, clock=clock, sleep=sleep)  # 1 token/second
    for _ in range(60):
        bucket.acquire()
    assert sleeps == []
    bucket.acquire()
    assert len(sleeps) == 1
    assert sleeps[0] == pytest.approx(1.0)
