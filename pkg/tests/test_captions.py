import json
import threading
import time
from pathlib import Path

import httpx
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mycoclip.captions import (
    DEFAULT_POOLS,
    CaptionConstraints,
    CaptionSet,
    EndpointConfig,
    PromptTemplate,
    ReplayTransport,
    caption_stats,
    clean_completion,
    fetch_remote_captions,
    generate_batch,
    generate_set,
    tokenize,
)
from mycoclip.errors import ConfigError, ParseError, ProviderError
from mycoclip.morphology import StageClass

FIXTURES = Path(__file__).parent / "fixtures" / "remote"


def completion(*contents, model="m1"):
    return {
        "model": model,
        "choices": [{"index": i, "message": {"role": "assistant", "content": c}} for i, c in enumerate(contents)],
    }


def endpoint(**kw):
    return EndpointConfig(url="http://llm.test/v1/chat/completions", model="m1", backoff_base=0.0, **kw)


def test_tokenize():
    assert tokenize("Spore, characterized by: round  cells!") == ["spore", "characterized", "by", "round", "cells"]
    assert tokenize(" ... ") == []
    assert tokenize("red-orange") == ["red-orange"]


def test_template_frame_contract():
    with pytest.raises(ConfigError):
        PromptTemplate(frame="no slots here")
    with pytest.raises(ConfigError):
        PromptTemplate(frame="{cls} and {cls} {characteristics}")


def test_constraints_contract():
    with pytest.raises(ConfigError):
        CaptionConstraints(min_len=10, max_len=5)
    with pytest.raises(ConfigError):
        CaptionConstraints(batch_size=20, total=10)
    with pytest.raises(ConfigError):
        CaptionConstraints(sampling_temperature=0)


def test_single_spore_caption():
    pools = {StageClass.SPORE: DEFAULT_POOLS[StageClass.SPORE][:8]}
    [text] = generate_batch(StageClass.SPORE, PromptTemplate(pools=pools), CaptionConstraints(batch_size=1), 0, 1)
    assert "spore" in text.lower() and "characterized by" in text


def test_hyphae_batch_lengths():
    c = CaptionConstraints(batch_size=4)
    batch = generate_batch(StageClass.HYPHAE, PromptTemplate(), c, 0, 3)
    assert len(batch) == 4
    assert all(c.min_len <= len(tokenize(t)) <= c.max_len for t in batch)


def test_pool_too_small():
    pools = {StageClass.SPORE: DEFAULT_POOLS[StageClass.SPORE][:3]}
    with pytest.raises(ConfigError):
        generate_batch(StageClass.SPORE, PromptTemplate(pools=pools), CaptionConstraints(), 0, 0)


def test_unreachable_length_bounds():
    with pytest.raises(ConfigError):
        generate_batch(StageClass.SPORE, PromptTemplate(), CaptionConstraints(min_len=39, max_len=40), 0, 0)


@pytest.mark.parametrize("n, b, batches", [(10, 4, 3), (10, 10, 1), (25, 8, 4), (0, 10, 0)])
def test_set_batch_counts(n, b, batches):
    cs = generate_set(StageClass.MYCELIUM, PromptTemplate(), CaptionConstraints(total=n, batch_size=b), 5)
    assert len(cs) == n
    assert len(set(cs.batch_index)) == batches == CaptionConstraints(total=n, batch_size=b).n_batches


def test_set_is_deterministic_and_deduplicated():
    c = CaptionConstraints()
    a = generate_set(StageClass.SPORE, PromptTemplate(), c, 42)
    b = generate_set(StageClass.SPORE, PromptTemplate(), c, 42)
    assert a.captions == b.captions
    assert a.deduplicated and len(set(a.captions)) == len(a.captions)
    assert generate_set(StageClass.SPORE, PromptTemplate(), c, 43).captions != a.captions


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 80), b=st.integers(1, 80), seed=st.integers(0, 2**32), stage=st.sampled_from(list(StageClass)))
def test_union_over_batches(n, b, seed, stage):
    b = min(b, n)
    c = CaptionConstraints(total=n, batch_size=b)
    cs = generate_set(stage, PromptTemplate(), c, seed)
    assert len(cs) == n
    assert max(cs.batch_index) + 1 == -(-n // b)
    for text in cs.captions:
        assert c.min_len <= len(tokenize(text)) <= c.max_len
        assert stage.label in tokenize(text)


def test_duplicates_flagged_when_unavoidable():
    pools = {StageClass.SPORE: [("a b c d", 1.0), ("e f g h", 1.0), ("i j k l", 1.0), ("m n o p", 1.0)]}
    t = PromptTemplate(pools=pools, min_characteristics=4, max_characteristics=4)
    cs = generate_set(StageClass.SPORE, t, CaptionConstraints(total=200, batch_size=100), 0, retry_budget=3)
    assert len(cs) == 200
    assert not cs.deduplicated


def test_caption_stats():
    assert caption_stats(CaptionSet(StageClass.SPORE, [], [])) == (0, 0.0, 0) or caption_stats([]).count == 0
    s = caption_stats(CaptionSet(StageClass.SPORE, ["one two three four five"] * 3, [0] * 3))
    assert (s.count, s.mean_length, s.vocabulary_size) == (3, 5.0, 5)


def test_template_vocabulary_closed():
    t = PromptTemplate()
    for stage in StageClass:
        cs = generate_set(stage, t, CaptionConstraints(total=50), 9)
        vocab = {w for c in cs.captions for w in tokenize(c)}
        assert vocab <= t.vocabulary(stage)


def test_caption_set_file_round_trip(tmp_path):
    cs = generate_set(StageClass.HYPHAE, PromptTemplate(), CaptionConstraints(total=12, batch_size=4), 1)
    cs.write(tmp_path / "h.txt")
    back = CaptionSet.read(tmp_path / "h.txt", StageClass.HYPHAE)
    assert back.captions == cs.captions
    assert len((tmp_path / "h.txt").read_text().splitlines()) == 12


# --- remote client ----------------------------------------------------------


def test_remote_pass_through():
    seen = []

    def handler(request):
        seen.append(json.loads(request.content))
        return httpx.Response(200, json=completion("spore characterized by round yellow cells"))

    c = CaptionConstraints(min_len=3, max_len=40, total=1, batch_size=1)
    cs = fetch_remote_captions(StageClass.SPORE, endpoint(), c, httpx.MockTransport(handler))
    assert cs.captions == ["spore characterized by round yellow cells"]
    assert cs.provider == "remote:m1"
    body = seen[0]
    assert body["temperature"] == 0.9
    assert body["n"] == 1
    assert "Describe the fungal growth stage spore" in body["messages"][-1]["content"]


def test_remote_retries_then_fails():
    calls = []
    sleeps = []

    def handler(request):
        calls.append(1)
        return httpx.Response(500, text="boom")

    c = CaptionConstraints(total=2, batch_size=2)
    ep = EndpointConfig(url="http://llm.test/v1", model="m1", backoff_base=0.25)
    with pytest.raises(ProviderError, match="after 3 attempts"):
        fetch_remote_captions(StageClass.SPORE, ep, c, httpx.MockTransport(handler), sleep=sleeps.append)
    assert len(calls) == 3
    assert sleeps == [0.25, 0.5]


def test_remote_recovers_after_transient_error():
    calls = []

    def handler(request):
        calls.append(1)
        if len(calls) == 1:
            return httpx.Response(429, text="slow down")
        return httpx.Response(200, json=completion("Hyphae characterized by thin orange filaments and forks"))

    c = CaptionConstraints(min_len=3, total=1, batch_size=1)
    cs = fetch_remote_captions(StageClass.HYPHAE, endpoint(), c, httpx.MockTransport(handler), sleep=lambda s: None)
    assert len(cs) == 1 and len(calls) == 2


def test_remote_malformed_body_keeps_raw():
    def handler(request):
        return httpx.Response(200, text="<html>not json</html>")

    with pytest.raises(ParseError) as err:
        fetch_remote_captions(StageClass.SPORE, endpoint(), CaptionConstraints(total=1, batch_size=1),
                              httpx.MockTransport(handler))
    assert err.value.raw_body == "<html>not json</html>"


def test_remote_sends_key_from_environment(monkeypatch):
    monkeypatch.setenv("MYCOCLIP_API_KEY", "sk-test")
    auth = []

    def handler(request):
        auth.append(request.headers.get("authorization"))
        return httpx.Response(200, json=completion("Spore characterized by round cells with yellow walls"))

    fetch_remote_captions(StageClass.SPORE, endpoint(), CaptionConstraints(min_len=3, total=1, batch_size=1),
                          httpx.MockTransport(handler))
    assert auth == ["Bearer sk-test"]


def test_remote_length_enforcement():
    c = CaptionConstraints(min_len=4, max_len=10, total=2, batch_size=2)
    long = "Mycelium characterized by a dense network. It also has many, many fine branches everywhere in sight."
    assert clean_completion(long, c) == "Mycelium characterized by a dense network."
    assert clean_completion("too short", c) is None
    replies = iter([completion(long, "too short"), completion("Mycelium characterized by deep red mats", "x")])

    def handler(request):
        return httpx.Response(200, json=next(replies))

    cs = fetch_remote_captions(StageClass.MYCELIUM, endpoint(), c, httpx.MockTransport(handler))
    assert cs.captions == ["Mycelium characterized by a dense network.", "Mycelium characterized by deep red mats"]


def test_remote_respects_max_inflight():
    active = 0
    peak = 0
    lock = threading.Lock()

    def handler(request):
        nonlocal active, peak
        with lock:
            active += 1
            peak = max(peak, active)
        time.sleep(0.02)
        with lock:
            active -= 1
        return httpx.Response(200, json=completion("Spore characterized by round yellow cells here"))

    c = CaptionConstraints(min_len=3, total=12, batch_size=1)
    fetch_remote_captions(StageClass.SPORE, endpoint(max_inflight=2), c, httpx.MockTransport(handler))
    assert 1 <= peak <= 2


def test_replay_fixture_twelve_completions():
    c = CaptionConstraints(total=12, batch_size=4)
    cs = fetch_remote_captions(StageClass.SPORE, endpoint(), c, ReplayTransport(FIXTURES))
    assert len(cs) == 12
    assert cs.provider == "remote:recorded-model-1"
    assert cs.batch_index == [0] * 4 + [1] * 4 + [2] * 4
    expected = [ch["message"]["content"] for b in range(3)
                for ch in json.loads((FIXTURES / f"spore_{b:03}.json").read_text())["choices"]]
    assert cs.captions == expected
    again = fetch_remote_captions(StageClass.SPORE, endpoint(), c, ReplayTransport(FIXTURES))
    assert again.captions == cs.captions


def test_record_dir_saves_raw_bodies(tmp_path):
    body = completion("Spore characterized by small round yellow cells")

    def handler(request):
        return httpx.Response(200, json=body)

    c = CaptionConstraints(min_len=3, total=1, batch_size=1)
    fetch_remote_captions(StageClass.SPORE, endpoint(record_dir=str(tmp_path)), c, httpx.MockTransport(handler))
    assert json.loads((tmp_path / "spore_000.json").read_text()) == body
