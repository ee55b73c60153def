from __future__ import annotations

import json
import math
import threading
import time

import pytest

from patmatch.llm import (
    Completion,
    CompletionRequest,
    ResponseCache,
    ScriptRule,
    ScriptedBackend,
    cache_key,
    cached_complete,
    complete_many,
)


def make_backend(**kwargs):
    rules = [
        ScriptRule(matcher="extract key technical entities", response="[A], [B]"),
        ScriptRule(
            matcher="logprob probe",
            response="sure",
            logprobs=(("A", -0.6931), ("B", -0.6931)),
        ),
    ]
    return ScriptedBackend(rules, default_response="fallback", **kwargs)


def test_rule_match_returns_scripted_text():
    completion = make_backend().complete(
        CompletionRequest(prompt="please extract key technical entities now")
    )
    assert completion.text == "[A], [B]"
    assert completion.cached is False


def test_no_rule_matches_returns_default():
    completion = make_backend().complete(CompletionRequest(prompt="nothing relevant"))
    assert completion.text == "fallback"
    assert completion.cached is False


def test_logprobs_passed_through_only_when_requested():
    backend = make_backend()
    with_lp = backend.complete(CompletionRequest(prompt="logprob probe", want_logprobs=True))
    assert with_lp.token_logprobs == (("A", -0.6931), ("B", -0.6931))
    without = backend.complete(CompletionRequest(prompt="logprob probe"))
    assert without.token_logprobs is None


def test_regex_rule():
    backend = ScriptedBackend([ScriptRule(matcher=r"(?s)^Please select.*Ontology:", response="A", regex=True)])
    hit = backend.complete(CompletionRequest(prompt="Please select things\n\nOntology: x"))
    assert hit.text == "A"
    miss = backend.complete(CompletionRequest(prompt="Please select things"))
    assert miss.text == ""


def test_first_matching_rule_wins():
    backend = ScriptedBackend(
        [ScriptRule("alpha", "first"), ScriptRule("alpha", "second")]
    )
    assert backend.complete(CompletionRequest(prompt="alpha")).text == "first"


def test_request_validation():
    with pytest.raises(ValueError):
        CompletionRequest(prompt="")
    with pytest.raises(ValueError):
        CompletionRequest(prompt="x", temperature=-1.0)
    with pytest.raises(ValueError):
        CompletionRequest(prompt="x", temperature=math.inf)


def test_completion_logprob_validation():
    with pytest.raises(ValueError):
        Completion(text="x", token_logprobs=(("t", 0.5),))


def test_cache_hit_is_byte_identical(tmp_path):
    cache = ResponseCache(tmp_path / "cache.jsonl")
    backend = make_backend()
    req = CompletionRequest(prompt="extract key technical entities")
    first = cached_complete(req, cache, backend)
    second = cached_complete(req, cache, backend)
    assert first.cached is False
    assert second.cached is True
    assert second.text == first.text
    assert backend.calls == 1


def test_different_temperature_distinct_keys(tmp_path):
    cache = ResponseCache(tmp_path / "cache.jsonl")
    backend = make_backend()
    cached_complete(CompletionRequest(prompt="p", temperature=0.0), cache, backend)
    cached_complete(CompletionRequest(prompt="p", temperature=0.7), cache, backend)
    assert backend.calls == 2
    assert len(cache) == 2


def test_cache_key_fields():
    base = cache_key("b", "m", "p", 0.0, 128, None)
    assert cache_key("b", "m", "p", 0.0, 128, None) == base
    assert cache_key("b2", "m", "p", 0.0, 128, None) != base
    assert cache_key("b", "m2", "p", 0.0, 128, None) != base
    assert cache_key("b", "m", "p2", 0.0, 128, None) != base
    assert cache_key("b", "m", "p", 0.5, 128, None) != base
    assert cache_key("b", "m", "p", 0.0, 129, None) != base
    assert cache_key("b", "m", "p", 0.0, 128, 3) != base


def test_replay_after_restart_zero_backend_calls(tmp_path):
    path = tmp_path / "cache.jsonl"
    backend = make_backend()
    cache = ResponseCache(path)
    requests = [CompletionRequest(prompt=f"prompt {i}") for i in range(100)]
    complete_many(requests, backend, cache=cache)
    assert backend.calls == 100

    # Fresh process: new cache object over the same file, new backend counter.
    backend2 = make_backend()
    cache2 = ResponseCache(path)
    results = complete_many(requests, backend2, cache=cache2)
    assert backend2.calls == 0
    assert all(c.cached for c in results)
    assert [c.text for c in results] == ["fallback"] * 100


def test_cache_log_replay_reconstructs_mapping(tmp_path):
    path = tmp_path / "cache.jsonl"
    cache = ResponseCache(path)
    backend = make_backend()
    for i in range(5):
        cached_complete(CompletionRequest(prompt=f"p{i}"), cache, backend)
    replayed = ResponseCache(path)
    assert len(replayed) == len(cache) == 5
    for i in range(5):
        key = cache_key(backend.backend_id, "default", f"p{i}", 0.0, 1024, None)
        assert replayed.get(key) == cache.get(key)


def test_corrupt_cache_record_quarantined(tmp_path):
    path = tmp_path / "cache.jsonl"
    cache = ResponseCache(path)
    backend = make_backend()
    cached_complete(CompletionRequest(prompt="good"), cache, backend)
    with path.open("a") as handle:
        handle.write("{broken json\n")
    reloaded = ResponseCache(path)
    assert len(reloaded) == 1
    assert path.with_suffix(".quarantine").exists()
    # The bad record is recomputed on demand.
    completion = cached_complete(CompletionRequest(prompt="other"), reloaded, backend)
    assert completion.text == "fallback"


def test_single_flight_one_backend_call(tmp_path):
    class SlowBackend(ScriptedBackend):
        def complete(self, request):
            time.sleep(0.05)
            return super().complete(request)

    backend = SlowBackend([], default_response="slow")
    cache = ResponseCache(tmp_path / "cache.jsonl")
    req = CompletionRequest(prompt="same key")
    results = []

    def work():
        results.append(cached_complete(req, cache, backend))

    threads = [threading.Thread(target=work) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert backend.calls == 1
    assert len(results) == 8
    assert all(r.text == "slow" for r in results)


def test_complete_many_preserves_order(tmp_path):
    backend = ScriptedBackend(
        [ScriptRule(f"prompt {i};", f"answer {i}") for i in range(20)]
    )
    requests = [CompletionRequest(prompt=f"prompt {i};") for i in range(20)]
    results = complete_many(requests, backend, max_in_flight=5)
    assert [c.text for c in results] == [f"answer {i}" for i in range(20)]


def test_scripted_from_file(tmp_path):
    path = tmp_path / "rules.jsonl"
    lines = [
        {"contains": "alpha", "response": "one"},
        {"regex": "^beta", "response": "two"},
        {"default": "dflt"},
        {"score_contains": "gamma", "logprobs": [["G", -0.5]]},
    ]
    path.write_text("\n".join(json.dumps(l) for l in lines))
    backend = ScriptedBackend.from_file(path)
    assert backend.complete(CompletionRequest(prompt="has alpha inside")).text == "one"
    assert backend.complete(CompletionRequest(prompt="beta starts")).text == "two"
    assert backend.complete(CompletionRequest(prompt="nothing")).text == "dflt"
    assert backend.score_continuation("gamma prompt", "G") == (("G", -0.5),)
    assert backend.score_continuation("other", "G") is None
