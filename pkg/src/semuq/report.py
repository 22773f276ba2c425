"""Sentence-level uncertainty for generated reports via yes/no probe consistency."""
from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Optional, Sequence

import numpy as np

from .answers import UNKNOWN, normalize_answer, normalize_text
from .backends import Backend
from .clustering import DedupMember, dedup_members
from .entropy import EstimatorKind
from .errors import (
    BackendUnavailable,
    EmptyReport,
    InvalidConfig,
    InvalidThresholds,
    LogprobsMissing,
    MissingLikelihoods,
    NoParseableAnswers,
)
from .gateway import DEFAULT_PARALLELISM, answer_probe, generate_probes, template_probe
from .mathutil import entropy_from_counts, entropy_from_logprobs, logsumexp
from .types import SCHEMA, ProbeContext, SampleSet, SamplingConfig, VQAProbe

logger = logging.getLogger(__name__)

DEFAULT_ANSWERS_PER_PROBE = 3


class Reliability(str, Enum):
    HIGH = "high"
    MEDIUM = "medium"
    LOW = "low"


_ORDER = {Reliability.HIGH: 0, Reliability.MEDIUM: 1, Reliability.LOW: 2}


@dataclass(frozen=True)
class ReliabilityThresholds:
    theta_high: float = 0.25
    theta_low: float = 0.55

    def __post_init__(self) -> None:
        if not (0 <= self.theta_high < self.theta_low) or not math.isfinite(self.theta_low):
            raise InvalidThresholds(
                f"need 0 <= theta_high < theta_low, got {self.theta_high}, {self.theta_low}"
            )


# --- segmentation -----------------------------------------------------------

ABBREVIATIONS = frozenset(
    {
        "dr", "mr", "mrs", "ms", "prof", "e.g", "i.e", "vs", "approx", "fig", "cf",
        "al", "st", "jr", "sr", "incl", "resp", "ca", "max", "min", "hx", "pt",
    }
)

_BOUNDARY = re.compile(r"[.;](?=\s|$)|\n")
_WORD_BEFORE = re.compile(r"([A-Za-z][A-Za-z.]*)$")
_DIGIT_AFTER = re.compile(r"\s*\d")


@dataclass(frozen=True)
class SentenceSpan:
    text: str
    start: int
    end: int


@dataclass(frozen=True)
class ReportDecomposition:
    report_id: str
    sentences: tuple[SentenceSpan, ...]


def _guarded(report: str, pos: int) -> bool:
    """True when the period at ``pos`` belongs to an abbreviation or a number."""
    before = report[:pos]
    if pos > 0 and report[pos - 1].isdigit() and pos + 1 < len(report) and report[pos + 1].isdigit():
        return True
    m = _WORD_BEFORE.search(before)
    if not m:
        return False
    word = m.group(1).lower()
    if word == "no":
        return bool(_DIGIT_AFTER.match(report, pos + 1))
    return word in ABBREVIATIONS or word.rstrip(".") in ABBREVIATIONS


def segment_report(report: str, report_id: str = "") -> ReportDecomposition:
    """Split a report on '.', ';' and newlines, keeping character offsets."""
    if not report or not report.strip():
        raise EmptyReport("report is empty")
    spans: list[SentenceSpan] = []
    start = 0

    def emit(end: int) -> None:
        chunk = report[start:end]
        lead = len(chunk) - len(chunk.lstrip())
        s, e = start + lead, start + len(chunk.rstrip())
        if e > s and any(ch.isalnum() for ch in report[s:e]):
            spans.append(SentenceSpan(report[s:e], s, e))

    for m in _BOUNDARY.finditer(report):
        pos = m.start()
        if report[pos] == "." and _guarded(report, pos):
            continue
        end = pos if report[pos] == "\n" else pos + 1
        emit(end)
        start = pos + 1
    emit(len(report))
    if not spans:
        raise EmptyReport("report contains no sentences")
    return ReportDecomposition(report_id, tuple(spans))


# --- binary clustering and the sentence entropy -----------------------------


@dataclass(frozen=True)
class BinaryClustering:
    c0_log_mass: Optional[float]
    c1_log_mass: Optional[float]
    c0_dedup: tuple[DedupMember, ...]
    c1_dedup: tuple[DedupMember, ...]
    # per probe, per answer: 1 when the answer agrees with the expected answer
    assignments: tuple[tuple[int, ...], ...]

    def within_entropies(self) -> tuple[float, float]:
        return (
            entropy_from_logprobs([d.log_prob for d in self.c0_dedup]) if self.c0_dedup else 0.0,  # type: ignore[misc]
            entropy_from_logprobs([d.log_prob for d in self.c1_dedup]) if self.c1_dedup else 0.0,  # type: ignore[misc]
        )


def _dedup_key(text: str) -> str:
    label = normalize_answer(text)
    if label == UNKNOWN:
        return f"unknown:{normalize_text(text)}"
    return label


def binary_cluster(
    probe_answers: Sequence[tuple[VQAProbe, SampleSet]],
    length_normalized: bool = False,
) -> BinaryClustering:
    """Split all sampled answers into agreeing (C1) and non-agreeing (C0) groups.

    Unknown answers land in C0.  Within each group, answers with the same
    normalized label are merged, so unanimous agreement is a single member.
    """
    texts: list[str] = []
    logprobs: list[float] = []
    groups: dict[int, list[int]] = {0: [], 1: []}
    assignments = []
    for probe, answers in probe_answers:
        row = []
        for sample in answers.samples:
            lp = sample.sequence_logprob(length_normalized)
            if lp is None:
                raise MissingLikelihoods(f"answer to {probe.question!r} has no token log-probabilities")
            c = 1 if normalize_answer(sample.text) == probe.expected_answer else 0
            groups[c].append(len(texts))
            texts.append(sample.text)
            logprobs.append(lp)
            row.append(c)
        assignments.append(tuple(row))
    if not texts:
        raise NoParseableAnswers("no sampled answers to cluster")

    def mass(idx: list[int]) -> Optional[float]:
        return logsumexp([logprobs[i] for i in idx]) if idx else None

    return BinaryClustering(
        c0_log_mass=mass(groups[0]),
        c1_log_mass=mass(groups[1]),
        c0_dedup=dedup_members(groups[0], texts, logprobs, key=_dedup_key),
        c1_dedup=dedup_members(groups[1], texts, logprobs, key=_dedup_key),
        assignments=tuple(assignments),
    )


def sentence_entropy(
    c0_log_mass: Optional[float],
    c1_log_mass: Optional[float],
    within_entropies: tuple[float, float],
    kind: EstimatorKind = EstimatorKind.COMBINED,
) -> float:
    """Mass-weighted within-group entropy, plus the binary cross term for ``combined``.

    An empty group is passed as None (or -inf) and gets zero weight.
    """
    kind = EstimatorKind(kind)
    if kind not in (EstimatorKind.WITHIN_ONLY, EstimatorKind.COMBINED):
        raise InvalidConfig(f"sentence entropy needs within_only or combined, got {kind.value}")
    masses = [-math.inf if m is None else m for m in (c0_log_mass, c1_log_mass)]
    if all(m == -math.inf for m in masses):
        raise NoParseableAnswers("both answer groups are empty")
    z = logsumexp(masses)
    weights = [math.exp(m - z) for m in masses]
    value = math.fsum(w * h for w, h in zip(weights, within_entropies) if w > 0)
    if kind is EstimatorKind.COMBINED:
        value += entropy_from_logprobs([m for m in masses if m != -math.inf])
    return max(0.0, value)


def binary_estimate(bc: BinaryClustering, kind: EstimatorKind) -> float:
    """Any estimator over the two answer groups; discrete uses answer counts."""
    kind = EstimatorKind(kind)
    if kind is EstimatorKind.DISCRETE:
        counts = [sum(row.count(c) for row in bc.assignments) for c in (0, 1)]
        return entropy_from_counts(counts)
    if kind is EstimatorKind.RAO_BLACKWELL:
        return entropy_from_logprobs([m for m in (bc.c0_log_mass, bc.c1_log_mass) if m is not None])
    return sentence_entropy(bc.c0_log_mass, bc.c1_log_mass, bc.within_entropies(), kind)


def reliability_index(entropy: float, thresholds: ReliabilityThresholds = ReliabilityThresholds()) -> Reliability:
    if not isinstance(thresholds, ReliabilityThresholds):
        raise InvalidThresholds("expected ReliabilityThresholds")
    if entropy < 0 or math.isnan(entropy):
        raise InvalidConfig(f"entropy must be >= 0, got {entropy}")
    if entropy < thresholds.theta_high:
        return Reliability.HIGH
    if entropy < thresholds.theta_low:
        return Reliability.MEDIUM
    return Reliability.LOW


# --- full pipeline ----------------------------------------------------------


@dataclass(frozen=True)
class SentenceAssessment:
    sentence_index: int
    text: str
    start: int
    end: int
    probes: tuple[VQAProbe, ...]
    answers: tuple[SampleSet, ...]
    c0_log_mass: Optional[float]
    c1_log_mass: Optional[float]
    entropy: Optional[float]
    reliability: Reliability
    assignments: tuple[tuple[int, ...], ...] = ()
    failed_probes: int = 0

    def to_dict(self) -> dict[str, Any]:
        probes = []
        for probe, answers, labels in zip(self.probes, self.answers, self.assignments):
            probes.append(
                {
                    "question": probe.question,
                    "expected": probe.expected_answer,
                    "answers": [s.text for s in answers.samples],
                    "sequence_logprobs": [s.sequence_logprob() for s in answers.samples],
                    "c": list(labels),
                }
            )
        return {
            "index": self.sentence_index,
            "text": self.text,
            "start": self.start,
            "end": self.end,
            "entropy_nats": self.entropy,
            "reliability": self.reliability.value,
            "c0_log_mass": self.c0_log_mass,
            "c1_log_mass": self.c1_log_mass,
            "failed_probes": self.failed_probes,
            "probes": probes,
        }


@dataclass
class ReportAssessment:
    report_id: str
    probes_per_sentence: int
    sentences: list[SentenceAssessment] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema": SCHEMA,
            "report_id": self.report_id,
            "probes_per_sentence": self.probes_per_sentence,
            "sentences": [s.to_dict() for s in self.sentences],
        }


def _assess_sentence(
    index: int,
    span: SentenceSpan,
    context: ProbeContext,
    probes_per_sentence: int,
    config: SamplingConfig,
    backend: Backend,
    thresholds: ReliabilityThresholds,
    kind: EstimatorKind,
    parallelism: int,
) -> SentenceAssessment:
    try:
        probes = generate_probes(span.text, probes_per_sentence, backend, sentence_index=index)
    except BackendUnavailable as e:
        logger.warning("probe generation failed for sentence %d (%s); using template probes", index, e)
        probes = [template_probe(span.text, index) for _ in range(probes_per_sentence)]

    answered: list[tuple[VQAProbe, SampleSet]] = []
    failed = 0
    for probe in probes:
        try:
            answered.append((probe, answer_probe(probe, context, config, backend, parallelism=parallelism)))
        except (BackendUnavailable, LogprobsMissing) as e:
            logger.warning("probe %r failed for sentence %d: %s", probe.question, index, e)
            failed += 1

    if not answered:
        return SentenceAssessment(
            index, span.text, span.start, span.end, (), (), None, None, None, Reliability.LOW, (), failed
        )
    bc = binary_cluster(answered)
    h = sentence_entropy(bc.c0_log_mass, bc.c1_log_mass, bc.within_entropies(), kind)
    return SentenceAssessment(
        sentence_index=index,
        text=span.text,
        start=span.start,
        end=span.end,
        probes=tuple(p for p, _ in answered),
        answers=tuple(a for _, a in answered),
        c0_log_mass=bc.c0_log_mass,
        c1_log_mass=bc.c1_log_mass,
        entropy=h,
        reliability=reliability_index(h, thresholds),
        assignments=bc.assignments,
        failed_probes=failed,
    )


def assess_report(
    report: str,
    context: ProbeContext,
    probes_per_sentence: int,
    config: SamplingConfig,
    backend: Backend,
    thresholds: ReliabilityThresholds = ReliabilityThresholds(),
    kind: EstimatorKind = EstimatorKind.COMBINED,
    report_id: str = "",
    parallelism: int = DEFAULT_PARALLELISM,
) -> ReportAssessment:
    """Segment, probe, answer and score every sentence of ``report``.

    ``config.m`` is the number of sampled answers per probe.  Failed probes
    reduce that sentence's probe count; a sentence with no surviving probe is
    rated low with no entropy.
    """
    if int(probes_per_sentence) != probes_per_sentence or probes_per_sentence < 1:
        raise InvalidConfig(f"probes_per_sentence must be >= 1, got {probes_per_sentence}")
    decomposition = segment_report(report, report_id or context.id)
    out = ReportAssessment(decomposition.report_id, probes_per_sentence)
    for i, span in enumerate(decomposition.sentences):
        out.sentences.append(
            _assess_sentence(i, span, context, probes_per_sentence, config, backend, thresholds, kind, parallelism)
        )
    if all(s.entropy is None for s in out.sentences):
        raise BackendUnavailable("no probe succeeded for any sentence")
    return out


# --- threshold calibration --------------------------------------------------


def calibrate_thresholds(
    entropies: Sequence[float], levels: Sequence[str]
) -> tuple[ReliabilityThresholds, float]:
    """Pick the threshold pair maximizing three-way balanced accuracy.

    Candidate cuts are the smallest entropy and the midpoints between
    consecutive distinct entropies, plus one cut above the maximum.
    """
    if len(entropies) != len(levels) or not entropies:
        raise InvalidConfig("need matching, non-empty entropies and levels")
    e = np.asarray(entropies, dtype=float)
    if np.any(e < 0) or not np.all(np.isfinite(e)):
        raise InvalidConfig("entropies must be finite and >= 0")
    lv = np.array([_ORDER[Reliability(x)] for x in levels])
    u = np.unique(e)
    cuts = np.concatenate([[u[0]], (u[:-1] + u[1:]) / 2, [u[-1] + 1.0]])
    # below[k, c] = number of class-k records with entropy < cuts[c]
    below = np.stack([(e[lv == k][:, None] < cuts[None, :]).sum(axis=0) for k in range(3)])
    totals = np.array([(lv == k).sum() for k in range(3)])
    present = totals > 0
    rec_high = below[0][:, None] / max(totals[0], 1)
    rec_med = (below[1][None, :] - below[1][:, None]) / max(totals[1], 1)
    rec_low = (totals[2] - below[2][None, :]) / max(totals[2], 1)
    score = (rec_high * present[0] + rec_med * present[1] + rec_low * present[2]) / present.sum()
    i_idx, j_idx = np.triu_indices(len(cuts), k=1)
    flat = score[i_idx, j_idx]
    best = int(np.argmax(flat))
    th = ReliabilityThresholds(float(max(cuts[i_idx[best]], 0.0)), float(cuts[j_idx[best]]))
    return th, float(flat[best])
