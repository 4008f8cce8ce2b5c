import json
import threading
import time

import httpx
import numpy as np
import pytest

from posbias.probe import (EndpointConfig, EndpointRejected, MalformedResponse, RetriesExhausted,
                           Strategy, backoff_delay, chat_complete, parse_prediction, run_probe)
from posbias.prompts import PromptInstance, Shot

CFG = EndpointConfig(base_url="http://mock/v1", model="toy-chat", max_retries=3)


def reply(text, status=200):
    return httpx.Response(status, json={"choices": [{"message": {"role": "assistant",
                                                                 "content": text}}]})


def scripted(*responses):
    """Transport returning the given responses in order; records requests."""
    queue = list(responses)
    log = []

    def handler(request):
        log.append(request)
        item = queue.pop(0)
        if isinstance(item, Exception):
            raise item
        return item

    return httpx.Client(transport=httpx.MockTransport(handler)), log


def no_sleep(_):
    pass


def test_passthrough_and_wire_format(monkeypatch):
    monkeypatch.setenv("OPENAI_API_KEY", "sk-test")
    client, log = scripted(reply("Potential Product [3]"))
    assert chat_complete(CFG, "hello", client=client, sleep=no_sleep) == "Potential Product [3]"
    (req,) = log
    assert str(req.url) == "http://mock/v1/chat/completions"
    body = json.loads(req.content)
    assert body == {"model": "toy-chat", "messages": [{"role": "user", "content": "hello"}],
                    "temperature": 0.0}
    assert req.headers["authorization"] == "Bearer sk-test"


def test_no_auth_header_without_token(monkeypatch):
    monkeypatch.delenv("OPENAI_API_KEY", raising=False)
    client, log = scripted(reply("x"))
    chat_complete(CFG, "p", client=client, sleep=no_sleep)
    assert "authorization" not in log[0].headers


def test_429_then_200_retries_once():
    client, log = scripted(httpx.Response(429), reply("ok"))
    delays = []
    assert chat_complete(CFG, "p", client=client, sleep=delays.append) == "ok"
    assert len(log) == 2 and len(delays) == 1


def test_500_five_times_gives_up_after_four_attempts():
    client, log = scripted(*[httpx.Response(500)] * 5)
    with pytest.raises(RetriesExhausted) as info:
        chat_complete(CFG, "p", client=client, sleep=no_sleep)
    assert len(log) == 4 and info.value.attempts == 4


def test_timeout_is_retried():
    client, log = scripted(httpx.ReadTimeout("slow"), reply("fine"))
    assert chat_complete(CFG, "p", client=client, sleep=no_sleep) == "fine"
    assert len(log) == 2


def test_non_retryable_4xx():
    client, log = scripted(httpx.Response(401, text="bad key"), reply("never"))
    with pytest.raises(EndpointRejected) as info:
        chat_complete(CFG, "p", client=client, sleep=no_sleep)
    assert info.value.status == 401 and len(log) == 1


def test_malformed_body():
    client, _ = scripted(httpx.Response(200, json={"nope": 1}))
    with pytest.raises(MalformedResponse):
        chat_complete(CFG, "p", client=client, sleep=no_sleep)


def test_backoff_grows_and_is_capped():
    import random
    cfg = EndpointConfig(backoff_base=1.0, backoff_max=5.0, jitter=0.0)
    r = random.Random(0)
    assert [backoff_delay(a, cfg, r) for a in range(5)] == [1.0, 2.0, 4.0, 5.0, 5.0]
    jittered = EndpointConfig(backoff_base=1.0, jitter=0.5)
    assert 2.0 <= backoff_delay(1, jittered, r) <= 3.0


def test_config_validation():
    with pytest.raises(ValueError):
        EndpointConfig(timeout=0)
    with pytest.raises(ValueError):
        EndpointConfig(max_in_flight=0)


@pytest.mark.parametrize("text,K,expected,reason", [
    ("I predict Potential Product [7] because it matches", 20, 7, "ok"),
    ("None of these seem right.", 20, None, "no match"),
    ("Potential Paper [25]", 20, None, "out of range"),
    ("[2] or maybe [5]", 6, 2, "ok"),
])
def test_parse_examples(text, K, expected, reason):
    p = parse_prediction(text, K)
    assert (p.slot, p.reason) == (expected, reason)


def test_parse_strict_rejects_conflicts():
    assert parse_prediction("[2] or maybe [5]", 6, strict=True).reason == "multiple conflicting labels"
    assert parse_prediction("[2], yes [2]", 6, strict=True).slot == 2


def test_parse_custom_pattern_and_purity():
    assert parse_prediction("answer: #4", 5, pattern=r"#(\d+)").slot == 4
    assert parse_prediction("x [3]", 4) == parse_prediction("x [3]", 4)


# ---------------------------------------------------------------- run_probe


def instances(K, n):
    return {c: [PromptInstance(tuple(f"slot{c}-inst{i}-cand{j}" for j in range(1, K + 1)),
                               answer=c) for i in range(n)]
            for c in range(1, K + 1)}


def answer_client(fn, delay=0.0):
    """Mock endpoint answering fn(prompt) and tracking peak concurrency."""
    state = {"now": 0, "peak": 0, "calls": 0}
    lock = threading.Lock()

    def handler(request):
        with lock:
            state["now"] += 1
            state["calls"] += 1
            state["peak"] = max(state["peak"], state["now"])
        try:
            if delay:
                time.sleep(delay)
            prompt = json.loads(request.content)["messages"][0]["content"]
            return fn(prompt)
        finally:
            with lock:
                state["now"] -= 1

    return httpx.Client(transport=httpx.MockTransport(handler)), state


def truth_of(prompt):
    return int(prompt.split("slot", 1)[1].split("-", 1)[0])


def index_of(prompt):
    return int(prompt.split("-inst", 1)[1].split("-", 1)[0])


def test_oracle_mock_identity(tmp_path):
    client, _ = answer_client(lambda p: reply(f"Potential Product [{truth_of(p)}]"))
    rep = run_probe(CFG, Strategy("zero-shot"), instances(4, 3), 4, client=client,
                    transcript_path=tmp_path / "t.jsonl", sleep=no_sleep)
    assert np.array_equal(rep.matrix, np.hstack([np.eye(4), np.zeros((4, 1))]))
    assert rep.fluctuation == 0.0


def test_constant_mock_k6():
    client, _ = answer_client(lambda p: reply("[1]"))
    rep = run_probe(CFG, Strategy("zero-shot"), instances(6, 5), 6, client=client, sleep=no_sleep)
    assert rep.fluctuation == pytest.approx(244.95, abs=0.01)


def planted_table(K, n, seed=0):
    """answers[c][i]: planted label (0 means an unparsable reply)."""
    rng = np.random.default_rng(seed)
    return {c: [int(v) for v in rng.integers(0, K + 1, size=n)] for c in range(1, K + 1)}


def test_planted_table_reproduced_exactly(tmp_path):
    K, n = 5, 8
    table = planted_table(K, n)

    def fn(prompt):
        label = table[truth_of(prompt)][index_of(prompt)]
        return reply("no idea" if label == 0 else f"I pick [{label}]")

    client, state = answer_client(fn)
    rep = run_probe(CFG, Strategy("zero-shot"), instances(K, n), K, client=client,
                    transcript_path=tmp_path / "t.jsonl", sleep=no_sleep)
    expected = np.zeros((K, K + 1))
    for c, labels in table.items():
        for lab in labels:
            expected[c - 1, K if lab == 0 else lab - 1] += 1
    assert np.array_equal(rep.matrix, expected / n)
    records = [json.loads(line) for line in (tmp_path / "t.jsonl").read_text().splitlines()]
    assert len(records) == K * n == state["calls"]
    assert sorted((r["truth_slot"], r["index"]) for r in records) == \
        [(c, i) for c in range(1, K + 1) for i in range(n)]


def test_in_flight_bound():
    cfg = EndpointConfig(base_url="http://mock/v1", max_in_flight=3)
    client, state = answer_client(lambda p: reply("[1]"), delay=0.01)
    run_probe(cfg, Strategy("zero-shot"), instances(4, 6), 4, client=client, sleep=no_sleep)
    assert 1 <= state["peak"] <= 3
    assert state["calls"] == 24


def test_failures_marked_invalid_and_run_continues(tmp_path):
    def fn(prompt):
        return httpx.Response(503) if truth_of(prompt) == 2 else reply("[1]")

    client, _ = answer_client(fn)
    rep = run_probe(CFG, Strategy("zero-shot"), instances(3, 2), 3, client=client,
                    transcript_path=tmp_path / "t.jsonl", sleep=no_sleep)
    assert rep.matrix[1, 3] == 1.0 and rep.failed_slots == [2]
    recs = [json.loads(x) for x in (tmp_path / "t.jsonl").read_text().splitlines()]
    assert sum(r["reason"] == "endpoint failure" for r in recs) == 2


def test_strategies_render():
    shots = (Shot(PromptInstance(("a", "b")), 2),)
    seen = []

    def fn(prompt):
        seen.append(prompt)
        return reply("[1]")

    client, _ = answer_client(fn)
    for strat in (Strategy("few-shot", shots), Strategy("hierarchical", groups=2)):
        run_probe(CFG, strat, instances(4, 1), 4, client=client, sleep=no_sleep)
    assert any("Example [1]" in p for p in seen)
    assert any("([1]-[2])" in p for p in seen)
    with pytest.raises(ValueError):
        Strategy("chain").render(PromptInstance(("a",)))
