"""Chat-completion endpoint probing: request, parse the chosen label, tabulate."""

from __future__ import annotations

import json
import logging
import os
import random
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import httpx
import numpy as np

from .bias_eval import BiasReport, report_from_counts
from .prompts import PromptInstance, Shot, build_few_shot, build_hierarchical, build_zero_shot

log = logging.getLogger(__name__)

RETRYABLE = frozenset({429, 500, 502, 503, 504})
DEFAULT_LABEL_PATTERN = r"\[(\d+)\]"


class ProbeError(RuntimeError):
    pass


class RetriesExhausted(ProbeError):
    def __init__(self, attempts: int, last: str):
        super().__init__(f"gave up after {attempts} attempts: {last}")
        self.attempts = attempts


class EndpointRejected(ProbeError):
    """Non-retryable HTTP status."""

    def __init__(self, status: int, body: str):
        super().__init__(f"endpoint returned {status}: {body[:200]}")
        self.status = status


class MalformedResponse(ProbeError):
    pass


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str = "http://localhost:8000/v1"
    model: str = "gpt-3.5-turbo-16k"
    auth_env: str = "OPENAI_API_KEY"
    timeout: float = 60.0
    max_retries: int = 3
    max_in_flight: int = 4
    temperature: float = 0.0
    backoff_base: float = 0.5
    backoff_max: float = 30.0
    jitter: float = 0.25

    def __post_init__(self):
        if not self.timeout > 0:
            raise ValueError("timeout must be > 0")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")

    @property
    def url(self) -> str:
        return self.base_url.rstrip("/") + "/chat/completions"

    def headers(self) -> dict[str, str]:
        h = {"Content-Type": "application/json"}
        token = os.environ.get(self.auth_env) if self.auth_env else None
        if token:
            h["Authorization"] = f"Bearer {token}"
        return h


def request_body(cfg: EndpointConfig, prompt: str) -> dict:
    return {
        "model": cfg.model,
        "messages": [{"role": "user", "content": prompt}],
        "temperature": cfg.temperature,
    }


def _extract_text(resp: httpx.Response) -> str:
    try:
        payload = resp.json()
        content = payload["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as e:
        raise MalformedResponse(f"unexpected response body: {resp.text[:200]!r}") from e
    if not isinstance(content, str):
        raise MalformedResponse(f"message content is {type(content).__name__}, not text")
    return content


def backoff_delay(attempt: int, cfg: EndpointConfig, rng: random.Random) -> float:
    """Exponential backoff for retry ``attempt`` (0-based) with multiplicative jitter."""
    base = min(cfg.backoff_max, cfg.backoff_base * (2 ** attempt))
    return base * (1.0 + cfg.jitter * rng.random())


def chat_complete(cfg: EndpointConfig, prompt: str, client: httpx.Client | None = None,
                  sleep: Callable[[float], None] = time.sleep,
                  rng: random.Random | None = None) -> str:
    """Send one user message and return the assistant's text.

    Retries 429/5xx responses and transport timeouts up to ``cfg.max_retries``
    times (so at most ``max_retries + 1`` attempts).
    """
    own = client is None
    if own:
        client = httpx.Client(timeout=cfg.timeout)
    rng = rng or random.Random()
    body = request_body(cfg, prompt)
    last = ""
    try:
        for attempt in range(cfg.max_retries + 1):
            try:
                resp = client.post(cfg.url, json=body, headers=cfg.headers(), timeout=cfg.timeout)
            except httpx.TimeoutException as e:
                last = f"timeout: {e}"
            except httpx.TransportError as e:
                last = f"transport error: {e}"
            else:
                if resp.status_code == 200:
                    return _extract_text(resp)
                if resp.status_code not in RETRYABLE:
                    raise EndpointRejected(resp.status_code, resp.text)
                last = f"HTTP {resp.status_code}"
            if attempt < cfg.max_retries:
                delay = backoff_delay(attempt, cfg, rng)
                log.debug("attempt %d failed (%s); retrying in %.2fs", attempt + 1, last, delay)
                sleep(delay)
        raise RetriesExhausted(cfg.max_retries + 1, last)
    finally:
        if own:
            client.close()


@dataclass(frozen=True)
class Prediction:
    slot: int | None
    reason: str = "ok"

    @property
    def valid(self) -> bool:
        return self.slot is not None


def parse_prediction(text: str, K: int, pattern: str = DEFAULT_LABEL_PATTERN,
                     strict: bool = False) -> Prediction:
    """First bracketed label in ``text`` if it lies in 1..K.

    In strict mode an answer naming two different labels is rejected.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    found = [int(m.group(1)) for m in re.finditer(pattern, text)]
    if not found:
        return Prediction(None, "no match")
    if strict and len(set(found)) > 1:
        return Prediction(None, "multiple conflicting labels")
    first = found[0]
    if not 1 <= first <= K:
        return Prediction(None, "out of range")
    return Prediction(first)


@dataclass(frozen=True)
class Strategy:
    kind: str = "zero-shot"
    shots: tuple[Shot, ...] = ()
    groups: int = 5

    def render(self, meta: PromptInstance) -> str:
        if self.kind == "zero-shot":
            return build_zero_shot(meta)
        if self.kind == "few-shot":
            return build_few_shot(meta, self.shots)
        if self.kind == "hierarchical":
            return build_hierarchical(meta, self.groups)
        raise ValueError(f"unknown strategy {self.kind!r}")


def run_probe(cfg: EndpointConfig, strategy: Strategy,
              instances_by_slot: Mapping[int, Sequence[PromptInstance]], K: int, *,
              client: httpx.Client | None = None, transcript_path: str | Path | None = None,
              pattern: str = DEFAULT_LABEL_PATTERN, strict: bool = False,
              sleep: Callable[[float], None] = time.sleep, seed: int = 0) -> BiasReport:
    """Query the endpoint for every instance and tabulate predicted positions.

    Requests run on at most ``cfg.max_in_flight`` worker threads. Failures
    past the retry budget are recorded as invalid answers.
    """
    slots = sorted(int(s) for s in instances_by_slot)
    jobs = [(s, i, meta) for s in slots for i, meta in enumerate(instances_by_slot[s])]
    own = client is None
    if own:
        client = httpx.Client(timeout=cfg.timeout)
    results: list[dict] = [None] * len(jobs)  # type: ignore[list-item]

    def work(j: int) -> None:
        slot, i, meta = jobs[j]
        prompt = strategy.render(meta)
        rng = random.Random(f"{seed}:{slot}:{i}")
        rec = {"truth_slot": slot, "index": i, "strategy": strategy.kind, "model": cfg.model,
               "prompt": prompt}
        try:
            text = chat_complete(cfg, prompt, client=client, sleep=sleep, rng=rng)
        except ProbeError as e:
            rec.update(response=None, error=str(e), predicted=None, reason="endpoint failure")
        else:
            pred = parse_prediction(text, K, pattern, strict)
            rec.update(response=text, error=None, predicted=pred.slot, reason=pred.reason)
        results[j] = rec

    try:
        with ThreadPoolExecutor(max_workers=cfg.max_in_flight) as pool:
            list(pool.map(work, range(len(jobs))))
    finally:
        if own:
            client.close()

    counts = np.zeros((len(slots), K + 1), dtype=np.int64)
    row = {s: r for r, s in enumerate(slots)}
    for rec in results:
        p = rec["predicted"]
        counts[row[rec["truth_slot"]], K if p is None else p - 1] += 1

    if transcript_path is not None:
        with open(transcript_path, "w", encoding="utf-8") as fh:
            for rec in results:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return report_from_counts(K, slots, counts, provenance=f"endpoint:{cfg.model}@{cfg.base_url}")
