"""Semantic-equivalence judges and greedy clustering of sampled generations."""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Any, Callable, Optional, Protocol, Sequence

import httpx

from .answers import UNKNOWN, normalize_answer, normalize_text
from .backends import JSONClient
from .errors import BackendUnavailable, EmptySampleSet, InvalidConfig, RemoteJudgeUnavailable
from .mathutil import logsumexp
from .types import SampleSet


class EquivalenceJudge(Protocol):
    variant: str

    def __call__(self, a: str, b: str) -> bool: ...


class BinaryRuleJudge:
    """Equivalent when both texts normalize to the same yes/no label.

    Answers that normalize to ``unknown`` are only equivalent to answers with
    the same normalized text, which keeps the relation reflexive and transitive.
    """

    variant = "binary_rule"

    def __call__(self, a: str, b: str) -> bool:
        la, lb = normalize_answer(a), normalize_answer(b)
        if la != UNKNOWN and la == lb:
            return True
        return normalize_text(a) == normalize_text(b)


class NormalizedExactJudge:
    variant = "normalized_exact"

    def __call__(self, a: str, b: str) -> bool:
        return normalize_text(a) == normalize_text(b)


class RemoteNLIJudge:
    """Bidirectional entailment through an NLI endpoint.

    The endpoint receives ``{"premise", "hypothesis"}`` and returns scores for
    ``entailment``, ``neutral`` and ``contradiction``; a direction entails when
    ``entailment`` is the argmax.  Directional verdicts are cached.
    """

    variant = "remote_nli"

    def __init__(
        self,
        base_url: Optional[str] = None,
        path: str = "/nli",
        api_key: Optional[str] = None,
        transport: Optional[httpx.BaseTransport] = None,
        client: Optional[JSONClient] = None,
    ) -> None:
        try:
            self._http = client or JSONClient(base_url, api_key, transport=transport)
        except BackendUnavailable as e:
            raise RemoteJudgeUnavailable(str(e)) from e
        self.path = path
        self._cache: dict[tuple[str, str], bool] = {}
        self._lock = threading.Lock()

    def entails(self, premise: str, hypothesis: str) -> bool:
        key = (premise, hypothesis)
        with self._lock:
            if key in self._cache:
                return self._cache[key]
        try:
            scores = self._http.post(self.path, {"premise": premise, "hypothesis": hypothesis})
        except BackendUnavailable as e:
            raise RemoteJudgeUnavailable(str(e)) from e
        try:
            labels = ("entailment", "neutral", "contradiction")
            vals = [float(scores[k]) for k in labels]
        except (KeyError, TypeError, ValueError):
            raise RemoteJudgeUnavailable(f"malformed NLI response: {scores!r}") from None
        verdict = max(range(3), key=vals.__getitem__) == 0
        with self._lock:
            self._cache[key] = verdict
        return verdict

    def __call__(self, a: str, b: str) -> bool:
        if a == b:
            return True
        return self.entails(a, b) and self.entails(b, a)


JUDGES: dict[str, Callable[..., Any]] = {
    "binary_rule": BinaryRuleJudge,
    "normalized_exact": NormalizedExactJudge,
    "remote_nli": RemoteNLIJudge,
}


def make_judge(variant: str, **kwargs: Any) -> EquivalenceJudge:
    try:
        return JUDGES[variant](**kwargs)
    except KeyError:
        raise InvalidConfig(f"unknown judge {variant!r}; choose from {sorted(JUDGES)}") from None


def judge_equivalent(a: str, b: str, judge: EquivalenceJudge) -> bool:
    if not a or not b:
        raise InvalidConfig("judge inputs must be non-empty")
    return judge(a, b)


@dataclass(frozen=True)
class DedupMember:
    text: str
    log_prob: Optional[float]
    member_indices: tuple[int, ...]


@dataclass(frozen=True)
class SemanticCluster:
    member_indices: tuple[int, ...]
    representative_index: int
    log_mass: Optional[float]
    dedup_members: tuple[DedupMember, ...]


@dataclass(frozen=True)
class Clustering:
    clusters: tuple[SemanticCluster, ...]
    sample_count: int
    sample_logprobs: tuple[Optional[float], ...] = ()

    @property
    def has_likelihoods(self) -> bool:
        return all(c.log_mass is not None for c in self.clusters)

    def labels(self) -> list[int]:
        out = [-1] * self.sample_count
        for ci, c in enumerate(self.clusters):
            for i in c.member_indices:
                out[i] = ci
        return out


def dedup_members(
    indices: Sequence[int],
    texts: Sequence[str],
    logprobs: Sequence[Optional[float]],
    merge: bool = True,
    key: Callable[[str], str] = normalize_text,
) -> tuple[DedupMember, ...]:
    """Group members by normalized text, merging probabilities by log-sum-exp."""
    groups: dict[str, list[int]] = {}
    for i in indices:
        k = key(texts[i]) if merge else f"{i}"
        groups.setdefault(k, []).append(i)
    out = []
    for k, idx in groups.items():
        lps = [logprobs[i] for i in idx]
        lp = None if any(x is None for x in lps) else logsumexp(lps)  # type: ignore[arg-type]
        out.append(DedupMember(text=key(texts[idx[0]]) if merge else texts[idx[0]], log_prob=lp, member_indices=tuple(idx)))
    return tuple(out)


def build_clustering(
    assignment: Sequence[Sequence[int]],
    texts: Sequence[str],
    logprobs: Sequence[Optional[float]],
    merge_duplicates: bool = True,
) -> Clustering:
    clusters = []
    for members in assignment:
        members = tuple(members)
        lps = [logprobs[i] for i in members]
        mass = None if any(x is None for x in lps) else logsumexp(lps)  # type: ignore[arg-type]
        clusters.append(
            SemanticCluster(
                member_indices=members,
                representative_index=members[0],
                log_mass=mass,
                dedup_members=dedup_members(members, texts, logprobs, merge_duplicates),
            )
        )
    return Clustering(tuple(clusters), len(texts), tuple(logprobs))


def greedy_assignment(texts: Sequence[str], judge: EquivalenceJudge) -> list[list[int]]:
    """Each text joins the first cluster whose representative it matches."""
    clusters: list[list[int]] = []
    for i, t in enumerate(texts):
        for members in clusters:
            if judge(texts[members[0]], t):
                members.append(i)
                break
        else:
            clusters.append([i])
    return clusters


def cluster(
    samples: SampleSet,
    judge: EquivalenceJudge,
    length_normalized: bool = False,
    merge_duplicates: bool = True,
) -> Clustering:
    """Partition a sample set into semantic clusters with log-mass bookkeeping."""
    if samples is None or not samples.samples:
        raise EmptySampleSet("cannot cluster an empty sample set")
    texts = [s.text for s in samples.samples]
    logprobs = [s.sequence_logprob(length_normalized) for s in samples.samples]
    return build_clustering(greedy_assignment(texts, judge), texts, logprobs, merge_duplicates)
