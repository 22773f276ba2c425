"""Preference-pair curation and the DPO loss as a pure function of sequence log-probs."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Any, Mapping, Optional, Protocol, Sequence

import httpx

from .answers import normalize_text
from .backends import JSONClient
from .errors import BackendUnavailable, EmptyBatch, InvalidConfig, ScorerUnavailable, TooFewCandidates
from .mathutil import log_sigmoid, sigmoid

DEFAULT_BETA = 0.1


@dataclass(frozen=True)
class ScoredGeneration:
    text: str
    policy_logprob: float
    reference_logprob: float
    score: float = 0.0

    def __post_init__(self) -> None:
        if not (math.isfinite(self.policy_logprob) and math.isfinite(self.reference_logprob)):
            raise InvalidConfig("log-probabilities must be finite")
        if not 0.0 <= self.score <= 1.0:
            raise InvalidConfig(f"score must be in [0, 1], got {self.score}")

    @property
    def log_ratio(self) -> float:
        return self.policy_logprob - self.reference_logprob

    def to_dict(self) -> dict[str, Any]:
        return {
            "text": self.text,
            "policy_logprob": self.policy_logprob,
            "reference_logprob": self.reference_logprob,
            "score": self.score,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ScoredGeneration":
        try:
            return cls(
                text=str(d.get("text", "")),
                policy_logprob=float(d["policy_logprob"]),
                reference_logprob=float(d["reference_logprob"]),
                score=float(d.get("score", 0.0)),
            )
        except KeyError as e:
            raise InvalidConfig(f"generation is missing field {e.args[0]!r}") from None


@dataclass(frozen=True)
class PreferencePair:
    prompt_id: str
    winner: ScoredGeneration
    loser: ScoredGeneration

    def __post_init__(self) -> None:
        if not self.winner.score > self.loser.score:
            raise InvalidConfig("winner must score strictly higher than loser")

    @property
    def score_gap(self) -> float:
        return self.winner.score - self.loser.score

    def to_dict(self) -> dict[str, Any]:
        return {
            "prompt_id": self.prompt_id,
            "winner": self.winner.to_dict(),
            "loser": self.loser.to_dict(),
            "score_gap": self.score_gap,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "PreferencePair":
        return cls(
            prompt_id=str(d.get("prompt_id", "")),
            winner=ScoredGeneration.from_dict(d["winner"]),
            loser=ScoredGeneration.from_dict(d["loser"]),
        )


@dataclass(frozen=True)
class DpoConfig:
    beta: float = DEFAULT_BETA

    def __post_init__(self) -> None:
        if not (self.beta > 0 and math.isfinite(self.beta)):
            raise InvalidConfig(f"beta must be a positive finite number, got {self.beta}")


# --- scorers ----------------------------------------------------------------


class ReportScorer(Protocol):
    variant: str

    def __call__(self, candidate: str, reference: str) -> float: ...


def _f1(cand: Counter, ref: Counter) -> float:
    if not cand and not ref:
        return 1.0
    overlap = sum((cand & ref).values())
    if overlap == 0:
        return 0.0
    precision = overlap / sum(cand.values())
    recall = overlap / sum(ref.values())
    return 2 * precision * recall / (precision + recall)


class TokenF1Scorer:
    """Bag-of-tokens F1 after lowercasing and punctuation stripping."""

    variant = "token_f1_reference"

    def __call__(self, candidate: str, reference: str) -> float:
        return _f1(Counter(normalize_text(candidate).split()), Counter(normalize_text(reference).split()))


class ExternalLabelerScorer:
    """Label-set F1 from an external report labeler.

    POSTs ``{"text": ...}`` to the labeler endpoint and expects
    ``{"labels": [...]}``; the positive findings of both reports are compared.
    """

    variant = "external_labeler_client"

    def __init__(
        self,
        base_url: Optional[str] = None,
        path: str = "/label",
        api_key: Optional[str] = None,
        transport: Optional[httpx.BaseTransport] = None,
    ) -> None:
        try:
            self._http = JSONClient(base_url, api_key, transport=transport)
        except BackendUnavailable as e:
            raise ScorerUnavailable(str(e)) from e
        self.path = path

    def labels(self, text: str) -> frozenset[str]:
        try:
            payload = self._http.post(self.path, {"text": text})
        except BackendUnavailable as e:
            raise ScorerUnavailable(str(e)) from e
        if not isinstance(payload, Mapping) or not isinstance(payload.get("labels"), list):
            raise ScorerUnavailable(f"malformed labeler response: {payload!r}")
        return frozenset(str(x) for x in payload["labels"])

    def __call__(self, candidate: str, reference: str) -> float:
        return _f1(Counter(self.labels(candidate)), Counter(self.labels(reference)))


def score_generation(candidate: str, reference: str, scorer: ReportScorer) -> float:
    if not reference or not reference.strip():
        raise InvalidConfig("reference must be non-empty")
    return float(scorer(candidate, reference))


# --- pairs and loss ---------------------------------------------------------


def build_pairs(
    prompt_id: str, candidates: Sequence[ScoredGeneration], min_gap: float = 0.0
) -> Optional[PreferencePair]:
    """First max-scoring candidate vs first min-scoring one, if the gap exceeds ``min_gap``."""
    if len(candidates) < 2:
        raise TooFewCandidates(f"need at least 2 candidates, got {len(candidates)}")
    if min_gap < 0:
        raise InvalidConfig("min_gap must be >= 0")
    scores = [c.score for c in candidates]
    winner = candidates[scores.index(max(scores))]
    loser = candidates[scores.index(min(scores))]
    if winner.score - loser.score > min_gap:
        return PreferencePair(prompt_id, winner, loser)
    return None


def preference_margin(pair: PreferencePair, config: DpoConfig) -> float:
    """β times the winner's log-ratio minus the loser's."""
    return config.beta * (pair.winner.log_ratio - pair.loser.log_ratio)


def dpo_loss(pair: PreferencePair, config: DpoConfig = DpoConfig()) -> float:
    """−ln σ(Δ), evaluated as ln(1 + e^{−Δ}) without overflow."""
    return -log_sigmoid(preference_margin(pair, config))


@dataclass(frozen=True)
class BatchLoss:
    mean: float
    per_pair: tuple[float, ...]
    # d mean / d policy_logprob, per pair
    grad_winner: tuple[float, ...]
    grad_loser: tuple[float, ...]


def dpo_batch_loss(pairs: Sequence[PreferencePair], config: DpoConfig = DpoConfig()) -> BatchLoss:
    if not pairs:
        raise EmptyBatch("no preference pairs")
    n = len(pairs)
    losses, gw, gl = [], [], []
    for pair in pairs:
        delta = preference_margin(pair, config)
        losses.append(-log_sigmoid(delta))
        g = config.beta * sigmoid(-delta) / n
        gw.append(-g)
        gl.append(g)
    return BatchLoss(math.fsum(losses) / n, tuple(losses), tuple(gw), tuple(gl))
