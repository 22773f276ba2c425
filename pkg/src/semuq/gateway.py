"""Sampling, probe generation and probe answering against a completion backend."""
from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Optional

from .backends import ANSWER, PROBE_GENERATION, SAMPLE, Backend, CompletionRequest
from .errors import BackendUnavailable, EmptySentence, InvalidConfig, LogprobsMissing
from .types import FinishReason, GenerationSample, ProbeContext, SampleSet, SamplingConfig, VQAProbe

logger = logging.getLogger(__name__)

DEFAULT_PARALLELISM = 8

TEMPLATE_QUESTION = "According to the image, is the following statement true: {sentence}?"

_PROBE_PROMPT = (
    "Sentence: {sentence}\n"
    "Write {m} distinct yes/no questions that check the facts stated in the sentence "
    "against the image. Give the answer implied by the sentence for each."
)


def _check_config(config: SamplingConfig) -> None:
    if not isinstance(config, SamplingConfig):
        raise InvalidConfig("expected a SamplingConfig")


def _run_requests(
    backend: Backend,
    requests: list[CompletionRequest],
    require_logprobs: bool,
    parallelism: int,
) -> list[GenerationSample]:
    if parallelism < 1:
        raise InvalidConfig(f"parallelism must be >= 1, got {parallelism}")

    def one(req: CompletionRequest) -> GenerationSample:
        sample = backend.complete(req)
        if sample.finish_reason is FinishReason.ERROR:
            raise BackendUnavailable(f"backend returned an empty generation for {req.context_id!r}")
        if require_logprobs and not sample.has_logprobs:
            raise LogprobsMissing(
                f"backend returned no token log-probabilities for {req.context_id!r} sample {req.sample_index}"
            )
        return sample

    if parallelism == 1 or len(requests) == 1:
        return [one(r) for r in requests]
    with ThreadPoolExecutor(max_workers=min(parallelism, len(requests))) as pool:
        # map() yields in submission order, which is the request index
        return list(pool.map(one, requests))


def _sample(
    context: ProbeContext,
    key: str,
    prompt: str,
    kind: str,
    config: SamplingConfig,
    backend: Backend,
    require_logprobs: bool,
    parallelism: int,
) -> SampleSet:
    _check_config(config)
    requests = [
        CompletionRequest(
            kind=kind,
            context_id=context.id,
            key=key,
            prompt=prompt,
            sample_index=i,
            image_ref=context.image_ref,
            temperature=config.temperature,
            top_p=config.top_p,
            max_tokens=config.max_tokens,
        )
        for i in range(config.m)
    ]
    samples = _run_requests(backend, requests, require_logprobs, parallelism)
    return SampleSet(context=context, samples=tuple(samples), sampling_config=config)


def sample_generations(
    context: ProbeContext,
    config: SamplingConfig,
    backend: Backend,
    require_logprobs: bool = True,
    parallelism: int = DEFAULT_PARALLELISM,
) -> SampleSet:
    """Draw ``config.m`` generations for ``context``, one request per sample."""
    return _sample(context, context.query, context.query, SAMPLE, config, backend, require_logprobs, parallelism)


def answer_probe(
    probe: VQAProbe,
    context: ProbeContext,
    config: SamplingConfig,
    backend: Backend,
    require_logprobs: bool = True,
    parallelism: int = DEFAULT_PARALLELISM,
) -> SampleSet:
    """Sample ``config.m`` answers to a probe question about the context's image."""
    probe_context = ProbeContext(
        id=context.id,
        query=probe.question,
        image_ref=context.image_ref,
        metadata=context.metadata,
    )
    return _sample(
        probe_context, probe.question, probe.question, ANSWER, config, backend, require_logprobs, parallelism
    )


def template_probe(sentence: str, index: int = 0) -> VQAProbe:
    text = sentence.strip().rstrip(".;!?").strip()
    return VQAProbe(TEMPLATE_QUESTION.format(sentence=text), "yes", index)


def _coerce_answer(value: Any) -> Optional[str]:
    if isinstance(value, bool):
        return "yes" if value else "no"
    if isinstance(value, str):
        v = value.strip().lower().rstrip(".")
        if v in ("yes", "no"):
            return v
    return None


_LINE_PROBE = re.compile(r"^\s*(?:\d+[.)]\s*)?(?:q:\s*)?(?P<q>.+\?)\s*(?:[-|:]|a:)?\s*(?P<a>yes|no)\.?\s*$", re.I)


def parse_probes(raw: str, sentence_index: int = 0) -> list[VQAProbe]:
    """Extract yes/no probes from a backend reply; malformed entries are dropped."""
    raw = raw.strip()
    if not raw:
        return []
    items: Any = None
    start, end = raw.find("["), raw.rfind("]")
    for candidate in (raw, raw[start : end + 1] if 0 <= start < end else None):
        if candidate is None:
            continue
        try:
            items = json.loads(candidate)
            break
        except ValueError:
            continue
    if isinstance(items, dict):
        items = items.get("probes") or items.get("questions")
    probes: list[VQAProbe] = []
    if isinstance(items, list):
        for item in items:
            if not isinstance(item, dict):
                continue
            question = str(item.get("question", "")).strip()
            answer = _coerce_answer(item.get("answer", item.get("expected_answer")))
            if question and answer:
                probes.append(VQAProbe(question, answer, sentence_index))
        return probes
    for line in raw.splitlines():
        m = _LINE_PROBE.match(line)
        if m:
            probes.append(VQAProbe(m.group("q").strip(), m.group("a").lower(), sentence_index))
    return probes


def generate_probes(
    sentence: str,
    m: int,
    backend: Backend,
    sentence_index: int = 0,
    max_tokens: int = 512,
) -> list[VQAProbe]:
    """Ask the backend for ``m`` yes/no probes about ``sentence``.

    Missing or malformed probes are filled with the template probe, so exactly
    ``m`` probes come back whenever the backend answers at all.
    """
    if not sentence or not sentence.strip():
        raise EmptySentence("cannot generate probes for an empty sentence")
    if int(m) != m or m < 1:
        raise InvalidConfig(f"m must be a positive integer, got {m}")
    request = CompletionRequest(
        kind=PROBE_GENERATION,
        context_id="",
        key=sentence,
        prompt=_PROBE_PROMPT.format(sentence=sentence, m=m),
        temperature=1.0,
        top_p=1.0,
        max_tokens=max_tokens,
        logprobs=False,
    )
    reply = backend.complete(request)
    probes = parse_probes(reply.text, sentence_index)[:m]
    if len(probes) < m:
        logger.debug("probe generation returned %d/%d usable probes; padding with template", len(probes), m)
        probes.extend(template_probe(sentence, sentence_index) for _ in range(m - len(probes)))
    return probes
