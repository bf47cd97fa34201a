"""Language-model scoring backends: length-normalized log-likelihoods,
sampled completions, and cost accounting.

Two backends are provided. ``SyntheticBackend`` is a pure function of
(seed, inputs) driven by lookup tables, used for tests and deterministic
pipelines. ``HTTPBackend`` talks to an OpenAI-compatible completions API and
scores answers by teacher-forced echo (one forward pass per context/answer
pair).
"""

import hashlib
import logging
import os
import random
import time
from dataclasses import dataclass, field
from typing import Optional

import httpx

from .core import extract_final_answer, read_jsonl

log = logging.getLogger(__name__)

API_KEY_ENV_VAR = "PRM_FORGE_API_KEY"


class BackendError(Exception):
    """Backend unreachable or returned an unusable response (retryable)."""


class TokenizationEmptyError(ValueError):
    """The answer reduced to zero tokens under the backend tokenizer."""


class DecodingRejectedError(ValueError):
    """Invalid decoding parameters."""


@dataclass(frozen=True)
class LengthNormalizedLogProb:
    """Mean per-token log-probability (nats) of an answer given a context."""

    value: float
    token_count: int

    def __post_init__(self):
        if self.token_count < 1:
            raise ValueError("token_count must be >= 1")


@dataclass
class RolloutResult:
    completion: str
    extracted_answer: Optional[str]
    generated_token_count: int


@dataclass(frozen=True)
class DecodingParams:
    temperature: float = 0.8
    top_p: float = 1.0
    max_tokens: int = 512

    def __post_init__(self):
        if self.temperature < 0 or not (0 < self.top_p <= 1) or self.max_tokens < 1:
            raise DecodingRejectedError(f"invalid decoding params: {self}")


@dataclass
class CostLedger:
    """Monotone counters for a labeling/eval run. Workers keep private
    ledgers and merge at the end, so totals are independent of scheduling."""

    wall_time_seconds: float = 0.0
    generated_tokens: int = 0
    scored_tokens: int = 0
    api_calls: int = 0

    def merge(self, other: "CostLedger") -> "CostLedger":
        self.wall_time_seconds += other.wall_time_seconds
        self.generated_tokens += other.generated_tokens
        self.scored_tokens += other.scored_tokens
        self.api_calls += other.api_calls
        return self

    def report(self) -> dict:
        return {
            "wall_time_seconds": self.wall_time_seconds,
            "generated_tokens": self.generated_tokens,
            "scored_tokens": self.scored_tokens,
            "api_calls": self.api_calls,
        }


def ledger_report(ledger: CostLedger) -> dict:
    return ledger.report()


def merge_ledgers(ledgers) -> CostLedger:
    total = CostLedger()
    for ledger in ledgers:
        total.merge(ledger)
    return total


def _digest_rng(*parts) -> random.Random:
    payload = "\x1f".join(str(p) for p in parts).encode("utf-8")
    seed = int.from_bytes(hashlib.sha256(payload).digest()[:8], "big")
    return random.Random(seed)


def derive_seed(*parts) -> int:
    """Stable 64-bit sub-seed from arbitrary parts (e.g. run seed + problem id)."""
    payload = "\x1f".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.sha256(payload).digest()[:8], "big")


class SyntheticBackend:
    """Deterministic table-driven backend.

    Scoring entries: {context_pattern, answer, logprob_per_token, token_count?}.
    A pattern matches when it occurs in the context (exact match preferred,
    then the longest matching substring pattern); ``answer: null`` matches any
    answer. Unmatched queries fall back to a hash-derived log-probability so
    every (seed, context, answer) still has a fixed value.

    Sampling entries: {prompt_pattern, completion, weight}. Completions are
    drawn by weight with an RNG keyed on (seed, prompt, sample index), so
    results do not depend on call order or concurrency.
    """

    kind = "synthetic"

    def __init__(self, seed: int = 0, score_table=None, sample_table=None,
                 fallback_logprob_range=(-3.0, -0.1)):
        self.seed = seed
        self.score_table = list(score_table or [])
        self.sample_table = list(sample_table or [])
        self.fallback_logprob_range = fallback_logprob_range

    @classmethod
    def from_spec_file(cls, path, seed: int = 0) -> "SyntheticBackend":
        """Load score/sample tables from a JSONL spec file. Lines with a
        ``context_pattern`` key go to the scoring table, lines with a
        ``prompt_pattern`` key to the sampling table."""
        score_table, sample_table = [], []
        for obj in read_jsonl(path):
            if "context_pattern" in obj:
                score_table.append(obj)
            elif "prompt_pattern" in obj:
                sample_table.append(obj)
            else:
                raise ValueError(f"unrecognized synthetic spec line: {obj}")
        return cls(seed=seed, score_table=score_table, sample_table=sample_table)

    def _token_count(self, text: str) -> int:
        return max(1, len(text.split()))

    def score(self, context: str, answer: str) -> LengthNormalizedLogProb:
        if not answer.strip():
            raise TokenizationEmptyError("answer has no tokens")
        best = None
        for entry in self.score_table:
            pattern = entry["context_pattern"]
            entry_answer = entry.get("answer")
            if entry_answer is not None and entry_answer != answer:
                continue
            if pattern == context:
                best = entry
                break
            if pattern in context:
                if best is None or len(pattern) > len(best["context_pattern"]):
                    best = entry
        token_count = self._token_count(answer)
        if best is not None:
            token_count = int(best.get("token_count", token_count))
            return LengthNormalizedLogProb(float(best["logprob_per_token"]), token_count)
        lo, hi = self.fallback_logprob_range
        value = _digest_rng(self.seed, "score", context, answer).uniform(lo, hi)
        return LengthNormalizedLogProb(value, token_count)

    def sample(self, prompt: str, n: int, decoding: DecodingParams) -> list:
        candidates = [e for e in self.sample_table if e.get("prompt_pattern", "") in prompt]
        results = []
        for i in range(n):
            rng = _digest_rng(self.seed, "sample", prompt, i)
            if candidates:
                weights = [float(e.get("weight", 1.0)) for e in candidates]
                entry = rng.choices(candidates, weights=weights, k=1)[0]
                completion = entry["completion"]
            else:
                completion = "no conclusion reached"
            results.append(RolloutResult(
                completion=completion,
                extracted_answer=extract_final_answer(completion),
                generated_token_count=self._token_count(completion),
            ))
        return results


class HTTPBackend:
    """OpenAI-compatible completions backend.

    Scoring submits prompt+answer with ``max_tokens=0, echo=true, logprobs=1``
    and averages the answer-span token log-probabilities (located via the
    returned text offsets). Transient failures are retried 3 times with
    exponential backoff. The API key is read from PRM_FORGE_API_KEY and never
    logged.
    """

    kind = "http_openai_compatible"

    def __init__(self, endpoint: str, model: str, api_key: Optional[str] = None,
                 timeout: float = 60.0, max_retries: int = 3, backoff: float = 0.5,
                 client: Optional[httpx.Client] = None):
        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self._api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV_VAR)
        self.max_retries = max_retries
        self.backoff = backoff
        self._client = client or httpx.Client(timeout=timeout)

    def _post(self, body: dict) -> dict:
        headers = {}
        if self._api_key:
            headers["Authorization"] = f"Bearer {self._api_key}"
        url = self.endpoint + "/v1/completions"
        last_error = None
        for attempt in range(self.max_retries + 1):
            try:
                resp = self._client.post(url, json=body, headers=headers)
                if resp.status_code >= 500:
                    raise BackendError(f"server error {resp.status_code}")
                resp.raise_for_status()
                return resp.json()
            except (httpx.HTTPError, BackendError) as exc:
                last_error = exc
                if attempt < self.max_retries:
                    time.sleep(self.backoff * (2 ** attempt))
        raise BackendError(f"backend unreachable after {self.max_retries} retries: {last_error}")

    def score(self, context: str, answer: str) -> LengthNormalizedLogProb:
        if not answer.strip():
            raise TokenizationEmptyError("answer has no tokens")
        body = {
            "model": self.model,
            "prompt": context + answer,
            "max_tokens": 0,
            "echo": True,
            "logprobs": 1,
        }
        data = self._post(body)
        logprobs = data["choices"][0]["logprobs"]
        token_logprobs = logprobs["token_logprobs"]
        offsets = logprobs.get("text_offset")
        if offsets is not None:
            span = [lp for off, lp in zip(offsets, token_logprobs)
                    if off >= len(context) and lp is not None]
        else:
            span = [lp for lp in token_logprobs if lp is not None]
        if not span:
            raise TokenizationEmptyError("no answer-span tokens returned")
        return LengthNormalizedLogProb(sum(span) / len(span), len(span))

    def sample(self, prompt: str, n: int, decoding: DecodingParams) -> list:
        if n == 0:
            return []
        body = {
            "model": self.model,
            "prompt": prompt,
            "max_tokens": decoding.max_tokens,
            "temperature": decoding.temperature,
            "top_p": decoding.top_p,
            "n": n,
            "logprobs": 0,
        }
        data = self._post(body)
        results = []
        for choice in data["choices"]:
            text = choice["text"]
            lp = choice.get("logprobs") or {}
            tokens = lp.get("tokens")
            count = len(tokens) if tokens else max(1, len(text.split()))
            results.append(RolloutResult(
                completion=text,
                extracted_answer=extract_final_answer(text),
                generated_token_count=count,
            ))
        return results


def score_answer(backend, context: str, answer: str,
                 ledger: Optional[CostLedger] = None) -> LengthNormalizedLogProb:
    """Length-normalized log-probability of ``answer`` continuing ``context``.

    Scoring is teacher-forced: it adds to scored_tokens and api_calls but
    never to generated_tokens.
    """
    start = time.monotonic()
    result = backend.score(context, answer)
    if ledger is not None:
        ledger.wall_time_seconds += time.monotonic() - start
        ledger.scored_tokens += result.token_count
        ledger.api_calls += 1
    return result


def sample_completions(backend, prompt: str, n: int, decoding: DecodingParams,
                       ledger: Optional[CostLedger] = None) -> list:
    """Draw ``n`` completions of ``prompt``; accounts generated tokens."""
    if n < 0:
        raise ValueError("n must be >= 0")
    if n == 0:
        return []
    start = time.monotonic()
    results = backend.sample(prompt, n, decoding)
    if len(results) != n:
        raise BackendError(f"backend returned {len(results)} completions, expected {n}")
    if ledger is not None:
        ledger.wall_time_seconds += time.monotonic() - start
        ledger.generated_tokens += sum(r.generated_token_count for r in results)
        ledger.api_calls += 1
    return results
