"""Chat-completion client that asks an external language model for candidate sids."""
from __future__ import annotations

import hashlib
import json
import logging
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import httpx

from ..codebook import Sid, find_sids
from .counterfactual import CounterfactualQuery, UserContext
from .mock import DEFAULT_BEAM, ReasonerOutput
from .records import Task, template

log = logging.getLogger(__name__)


class ReasonerError(RuntimeError):
    pass


class TransientReasonerError(ReasonerError):
    """Timeouts, connection failures, 429 and 5xx replies. Safe to retry."""


@dataclass
class RemoteConfig:
    url: str
    model: str = "reasoner"
    api_key: str | None = None
    auth_header: str = "Authorization"
    temperature: float = 0.95
    timeout_s: float = 30.0
    max_retries: int = 2
    backoff_s: float = 0.5
    max_concurrency: int = 4
    extra_headers: dict[str, str] = field(default_factory=dict)


class RemoteReasoner:
    def __init__(
        self,
        cfg: RemoteConfig,
        is_valid: Callable[[Sid], bool] = lambda s: True,
        client: httpx.Client | None = None,
    ):
        self.cfg = cfg
        self.is_valid = is_valid
        self._client = client or httpx.Client(timeout=cfg.timeout_s)
        self.parse_failures = 0

    def close(self) -> None:
        self._client.close()

    def _headers(self, key: str) -> dict[str, str]:
        h = {"Content-Type": "application/json", "Idempotency-Key": key, **self.cfg.extra_headers}
        if self.cfg.api_key:
            h[self.cfg.auth_header] = f"Bearer {self.cfg.api_key}"
        return h

    def request_body(self, instruction: str, prompt: str, beam: int) -> bytes:
        body = {
            "model": self.cfg.model,
            "messages": [{"role": "system", "content": instruction}, {"role": "user", "content": prompt}],
            "temperature": self.cfg.temperature,
            "n": beam,
        }
        return json.dumps(body, sort_keys=True, ensure_ascii=False).encode()

    def _post(self, body: bytes, key: str) -> dict:
        attempt = 0
        while True:
            try:
                resp = self._client.post(self.cfg.url, content=body, headers=self._headers(key))
                if resp.status_code == 429 or resp.status_code >= 500:
                    raise TransientReasonerError(f"endpoint returned {resp.status_code}")
                if resp.status_code >= 400:
                    raise ReasonerError(f"endpoint returned {resp.status_code}: {resp.text[:200]}")
                return resp.json()
            except (httpx.TimeoutException, httpx.TransportError) as exc:
                err: ReasonerError = TransientReasonerError(f"{type(exc).__name__}: {exc}")
            except TransientReasonerError as exc:
                err = exc
            if attempt >= self.cfg.max_retries:
                raise err
            attempt += 1
            time.sleep(self.cfg.backoff_s * attempt)

    def parse_completions(self, payload: dict, beam: int) -> ReasonerOutput:
        """Rank sids by how many completions propose them, then by first appearance."""
        votes: Counter = Counter()
        first: dict[Sid, int] = {}
        failures = 0
        choices = payload.get("choices") or []
        for choice in choices:
            text = (choice.get("message") or {}).get("content") or choice.get("text") or ""
            sids, bad = find_sids(text.rpartition("</think>")[2] if "</think>" in text else text)
            valid = [s for s in sids if self.is_valid(s)]
            failures += bad + (len(sids) - len(valid))
            if not valid:
                failures += bad == 0 and len(sids) == 0
                continue
            sid = valid[-1]  # the answer follows the reasoning
            votes[sid] += 1
            first.setdefault(sid, len(first))
        self.parse_failures += failures
        n = max(len(choices), 1)
        ranked = sorted(votes, key=lambda s: (-votes[s], first[s]))[:beam]
        return ReasonerOutput(tuple((s, votes[s] / n) for s in ranked), failures)

    def reason(self, query: CounterfactualQuery, beam: int = DEFAULT_BEAM) -> ReasonerOutput:
        rec = query.to_record()
        payload = self._post(self.request_body(rec.instruction, rec.prompt, beam), query.key())
        return self.parse_completions(payload, beam)

    def reason_factual(self, context: UserContext, beam: int = DEFAULT_BEAM) -> ReasonerOutput:
        t = template(Task.FR_COT)
        prompt = t.prompt.format(profile=context.profile_text, history=context.history_text)
        instruction = t.instruction.format(target_behavior="purchase")
        key = hashlib.sha256(f"factual\n{context.user_id}\n{context.history_text}".encode()).hexdigest()
        payload = self._post(self.request_body(instruction, prompt, beam), key)
        return self.parse_completions(payload, beam)

    def reason_many(self, queries: Sequence[CounterfactualQuery], beam: int = DEFAULT_BEAM) -> list[ReasonerOutput]:
        """Run queries with at most ``max_concurrency`` requests in flight; results keep query order."""
        with ThreadPoolExecutor(max_workers=max(1, self.cfg.max_concurrency)) as pool:
            futures = [pool.submit(self.reason, q, beam) for q in queries]
            try:
                return [f.result() for f in futures]
            except BaseException:
                for f in futures:
                    f.cancel()
                raise
