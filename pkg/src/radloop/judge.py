"""Hallucination/NLI judge client: prompt assembly, endpoint calls, verdict
validation, and per-anatomy aggregation.

The judge itself is an external LLM endpoint reached over HTTP. This module
only builds the prompt, ships the bytes, and checks what comes back; any
endpoint that accepts ``POST {"model": ..., "prompt": ...}`` and answers
with text works, and tests can inject a transport function instead.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

from .errors import (
    EmptyInput,
    IllegalValue,
    JudgeTimeout,
    MalformedJson,
    MissingField,
    RetriesExhausted,
    TransportError,
)

log = logging.getLogger(__name__)

#: Instruction block sent to the judge endpoint ahead of the two reports.
#: Byte-stable: downstream caching keys on the exact prompt content.
JUDGE_PROMPT = """You are an expert radiologist. Your task is to compare a short anatomy-specific mini-report [GEN] against a full image ground-truth report [GT], where [GT] was generated by a radiologist over the entire image, whereas [GEN] was generated by a model over a specific anatomical location. You will assess the degree of hallucination and contradiction in [GEN] compared to [GT].

First, independently assess each report:
- If [GT] explicitly affirms the presence of any abnormality, set "gt_has_abnormalities" to "yes". Otherwise, set it to "no".
- If [GT] explicitly affirms the presence of any medical device (e.g., pacemaker, catheter, wires), set "gt_has_devices" to "yes". Otherwise, set it to "no".
- If [GEN] explicitly affirms the presence of any abnormality, set "gen_has_abnormalities" to "yes". Otherwise, set it to "no".
- If [GEN] explicitly affirms the presence of any medical device (e.g., pacemaker, catheter, wires), set "gen_has_devices" to "yes". Otherwise, set it to "no".

Next, perform the comparison based on [GT]:
- If [GEN] affirms the presence of an abnormality and this is clearly supported or reasonably suggested by [GT], set "gen_has_correct_abnormalities" to "yes". Otherwise, set it to "no".
- If [GEN] affirms the presence of an abnormality that is NOT affirmed nor supported by [GT], set "gen_has_hallucinated_abnormalities" to "yes". Otherwise, set it to "no".
- If [GEN] affirms the presence of a device that is clearly supported or reasonably suggested by [GT], set "gen_has_correct_devices" to "yes". Otherwise, set it to "no".
- If [GEN] affirms the presence of a device that is NOT affirmed nor supported by [GT], set "gen_has_hallucinated_devices" to "yes". Otherwise, set it to "no".
- Natural Language Inference:
    - If [GEN] makes at least one explicit statement that is clearly contradicted by [GT], set "nli_status" to "contradiction".
    - If all of [GEN]'s explicit statements are reasonably supported by [GT], set "nli_status" to "entailment".
    - Otherwise, set "nli_status" to "neutral".

You must respond ONLY with a single, valid JSON object in the following format. Do not add any text before or after the JSON object.

{
    "reason": "A detailed explanation of your reasoning for the comparison. Include a brief explanation of why you made your choices for each field. Focus on what is explicitly stated in [GEN] and [GT]. Do not make any assumptions about what is not explicitly stated.",
    "gt_has_abnormalities": "yes" | "no",
    "gt_has_devices": "yes" | "no",
    "gen_has_abnormalities": "yes" | "no",
    "gen_has_devices": "yes" | "no",
    "gen_has_correct_abnormalities": "yes" | "no",
    "gen_has_hallucinated_abnormalities": "yes" | "no",
    "gen_has_correct_devices": "yes" | "no",
    "gen_has_hallucinated_devices": "yes" | "no",
    "nli_status": "contradiction" | "entailment" | "neutral"
}"""

_YES_NO = ("yes", "no")
_NLI_VALUES = ("contradiction", "entailment", "neutral")

_YES_NO_FIELDS = (
    "gt_has_abnormalities",
    "gt_has_devices",
    "gen_has_abnormalities",
    "gen_has_devices",
    "gen_has_correct_abnormalities",
    "gen_has_hallucinated_abnormalities",
    "gen_has_correct_devices",
    "gen_has_hallucinated_devices",
)


def build_judge_prompt(gen: str, gt_report: str) -> str:
    """Assemble the full judge prompt for one (generation, ground truth) pair."""
    if not gen:
        raise EmptyInput("gen must be a non-empty string")
    if not gt_report:
        raise EmptyInput("gt_report must be a non-empty string")
    return f"{JUDGE_PROMPT}\n\n[GEN]:\n{gen}\n\n[GT]:\n{gt_report}\n"


@dataclass(frozen=True)
class JudgeVerdict:
    """One validated judge response."""

    reason: str
    gt_has_abnormalities: str
    gt_has_devices: str
    gen_has_abnormalities: str
    gen_has_devices: str
    gen_has_correct_abnormalities: str
    gen_has_hallucinated_abnormalities: str
    gen_has_correct_devices: str
    gen_has_hallucinated_devices: str
    nli_status: str

    def to_json(self) -> dict[str, str]:
        return {
            "reason": self.reason,
            **{name: getattr(self, name) for name in _YES_NO_FIELDS},
            "nli_status": self.nli_status,
        }

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "JudgeVerdict":
        return _verdict_from_mapping(obj, lenient=False)


def _verdict_from_mapping(obj: Mapping[str, Any], lenient: bool) -> JudgeVerdict:
    reason = obj.get("reason")
    if reason is None:
        raise MissingField("reason")
    values: dict[str, str] = {"reason": str(reason)}
    for name in _YES_NO_FIELDS:
        raw = obj.get(name)
        if raw is None:
            raise MissingField(name)
        value = raw.strip().lower() if lenient and isinstance(raw, str) else raw
        if value not in _YES_NO:
            raise IllegalValue(name, raw)
        values[name] = value
    raw = obj.get("nli_status")
    if raw is None:
        raise MissingField("nli_status")
    value = raw.strip().lower() if lenient and isinstance(raw, str) else raw
    if value not in _NLI_VALUES:
        raise IllegalValue("nli_status", raw)
    values["nli_status"] = value
    return JudgeVerdict(**values)


def validate_verdict(raw: str, lenient: bool = False) -> JudgeVerdict:
    """Parse and type-check the first JSON object found in a judge response.

    Strict mode requires the exact lowercase enum strings; ``lenient``
    tolerates casing and surrounding whitespace in enum values (real LLM
    output drifts in casing) but never invents missing fields.
    """
    start = raw.find("{")
    if start < 0:
        raise MalformedJson("no JSON object found in response")
    try:
        obj, _ = json.JSONDecoder().raw_decode(raw, start)
    except json.JSONDecodeError as exc:
        raise MalformedJson(f"invalid JSON in response: {exc}") from exc
    if not isinstance(obj, dict):
        raise MalformedJson("top-level JSON value is not an object")
    return _verdict_from_mapping(obj, lenient=lenient)


# ---------------------------------------------------------------------------
# Endpoint client

#: A transport takes (url, payload, timeout, headers) and returns the
#: response body as text. The default transport uses ``requests``.
Transport = Callable[[str, Mapping[str, Any], float, Mapping[str, str]], str]


@dataclass(frozen=True)
class EndpointConfig:
    url: str
    model: str
    timeout: float = 60.0
    max_retries: int = 2
    backoff: float = 0.5
    api_key_env: str | None = None
    cache_dir: str | None = None
    parallelism: int = 4

    def __post_init__(self) -> None:
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")
        if self.parallelism < 1:
            raise ValueError("parallelism must be >= 1")

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "EndpointConfig":
        known = {f: obj[f] for f in (
            "url", "model", "timeout", "max_retries", "backoff",
            "api_key_env", "cache_dir", "parallelism",
        ) if f in obj}
        return cls(**known)


def request_hash(prompt: str, model: str) -> str:
    """Content hash identifying one judge request (prompt bytes + model)."""
    h = hashlib.sha256()
    h.update(model.encode("utf-8"))
    h.update(b"\x00")
    h.update(prompt.encode("utf-8"))
    return h.hexdigest()


def _default_transport(
    url: str, payload: Mapping[str, Any], timeout: float, headers: Mapping[str, str]
) -> str:
    import requests

    response = requests.post(url, json=dict(payload), timeout=timeout, headers=dict(headers))
    response.raise_for_status()
    return response.text


def _classify_failure(exc: Exception, req_hash: str) -> TransportError:
    try:
        import requests

        if isinstance(exc, requests.exceptions.Timeout):
            return JudgeTimeout(str(exc), req_hash)
    except ImportError:  # pragma: no cover - requests is a hard dependency
        pass
    if isinstance(exc, TimeoutError):
        return JudgeTimeout(str(exc), req_hash)
    return TransportError(str(exc), req_hash)


def call_judge(
    prompt: str,
    config: EndpointConfig,
    transport: Transport | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> str:
    """Send one prompt to the judge endpoint and return the raw response text.

    Transport failures are retried with exponential backoff
    (``backoff * 2**attempt`` seconds) up to ``max_retries`` extra attempts;
    when they run out, :class:`RetriesExhausted` is raised carrying the
    request hash. With ``cache_dir`` set, responses are stored under their
    request hash and replayed without touching the network.
    """
    req_hash = request_hash(prompt, config.model)
    cache_path = None
    if config.cache_dir is not None:
        cache_path = Path(config.cache_dir) / f"{req_hash}.txt"
        if cache_path.exists():
            return cache_path.read_text(encoding="utf-8")

    if transport is None:
        transport = _default_transport
    headers = {"Content-Type": "application/json"}
    if config.api_key_env:
        key = os.environ.get(config.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
    payload = {"model": config.model, "prompt": prompt}

    attempts = config.max_retries + 1
    last_error: TransportError | None = None
    for attempt in range(attempts):
        try:
            text = transport(config.url, payload, config.timeout, headers)
        except Exception as exc:  # noqa: BLE001 - transport is caller-supplied
            last_error = _classify_failure(exc, req_hash)
            log.debug("judge attempt %d/%d failed: %s", attempt + 1, attempts, last_error)
            if attempt + 1 < attempts:
                sleep(config.backoff * (2**attempt))
            continue
        if cache_path is not None:
            cache_path.parent.mkdir(parents=True, exist_ok=True)
            tmp = cache_path.with_suffix(".tmp")
            tmp.write_text(text, encoding="utf-8")
            os.replace(tmp, cache_path)
        return text
    assert last_error is not None
    if config.max_retries == 0:
        raise last_error
    raise RetriesExhausted(attempts, req_hash) from last_error


def judge_pairs(
    pairs: Sequence[tuple[str, str]],
    config: EndpointConfig,
    transport: Transport | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> list[str]:
    """Call the judge on (gen, gt) pairs, preserving order.

    Requests run on a thread pool capped at ``config.parallelism``.
    """
    prompts = [build_judge_prompt(gen, gt) for gen, gt in pairs]
    if not prompts:
        return []
    with ThreadPoolExecutor(max_workers=config.parallelism) as pool:
        futures = [pool.submit(call_judge, p, config, transport, sleep) for p in prompts]
        return [f.result() for f in futures]


# ---------------------------------------------------------------------------
# Aggregation


@dataclass(frozen=True)
class AnatomyStats:
    """Percentage rates for one anatomy (or for the mean row)."""

    anatomy: str
    n: int
    abn_halluc_rate: float
    abn_correct_rate: float
    dev_halluc_rate: float
    dev_correct_rate: float
    contradiction_rate: float
    entailment_rate: float
    neutral_rate: float

    def to_json(self) -> dict[str, Any]:
        return {
            "anatomy": self.anatomy,
            "n": self.n,
            "abn_halluc_rate": round(self.abn_halluc_rate, 4),
            "abn_correct_rate": round(self.abn_correct_rate, 4),
            "dev_halluc_rate": round(self.dev_halluc_rate, 4),
            "dev_correct_rate": round(self.dev_correct_rate, 4),
            "contradiction_rate": round(self.contradiction_rate, 4),
            "entailment_rate": round(self.entailment_rate, 4),
            "neutral_rate": round(self.neutral_rate, 4),
        }


_RATE_FIELDS = (
    "abn_halluc_rate",
    "abn_correct_rate",
    "dev_halluc_rate",
    "dev_correct_rate",
    "contradiction_rate",
    "entailment_rate",
    "neutral_rate",
)


def aggregate_verdicts(
    rows: Iterable[tuple[str, JudgeVerdict]],
) -> tuple[list[AnatomyStats], AnatomyStats]:
    """Reduce (anatomy, verdict) rows to per-anatomy rates plus a mean row.

    Rates are percentages of each anatomy's row count; the mean row is the
    unweighted arithmetic mean of the per-anatomy rates, so it is invariant
    to per-anatomy sample counts. Anatomies appear in first-seen order.
    """
    counts: dict[str, dict[str, int]] = {}
    for anatomy, verdict in rows:
        c = counts.setdefault(
            anatomy,
            {"n": 0, "abn_h": 0, "abn_c": 0, "dev_h": 0, "dev_c": 0,
             "contradiction": 0, "entailment": 0, "neutral": 0},
        )
        c["n"] += 1
        c["abn_h"] += verdict.gen_has_hallucinated_abnormalities == "yes"
        c["abn_c"] += verdict.gen_has_correct_abnormalities == "yes"
        c["dev_h"] += verdict.gen_has_hallucinated_devices == "yes"
        c["dev_c"] += verdict.gen_has_correct_devices == "yes"
        c[verdict.nli_status] += 1
    if not counts:
        raise EmptyInput("no verdicts to aggregate")

    stats = [
        AnatomyStats(
            anatomy=anatomy,
            n=c["n"],
            abn_halluc_rate=100.0 * c["abn_h"] / c["n"],
            abn_correct_rate=100.0 * c["abn_c"] / c["n"],
            dev_halluc_rate=100.0 * c["dev_h"] / c["n"],
            dev_correct_rate=100.0 * c["dev_c"] / c["n"],
            contradiction_rate=100.0 * c["contradiction"] / c["n"],
            entailment_rate=100.0 * c["entailment"] / c["n"],
            neutral_rate=100.0 * c["neutral"] / c["n"],
        )
        for anatomy, c in counts.items()
    ]
    k = len(stats)
    mean = AnatomyStats(
        anatomy="mean",
        n=sum(s.n for s in stats),
        **{f: sum(getattr(s, f) for s in stats) / k for f in _RATE_FIELDS},
    )
    return stats, mean


def aggregation_table(
    stats: Sequence[AnatomyStats], mean: AnatomyStats, verdict_failures: int = 0
) -> dict[str, Any]:
    """JSON-serializable table of per-anatomy rows plus the mean row.

    ``verdict_failures`` counts responses that failed validation; they are
    excluded from every rate denominator and reported separately.
    """
    return {
        "schema_version": 1,
        "rows": [s.to_json() for s in stats],
        "mean": mean.to_json(),
        "verdict_failures": verdict_failures,
    }
