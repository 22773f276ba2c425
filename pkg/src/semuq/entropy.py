"""Semantic-entropy estimators over a clustering, all computed in log space (nats)."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Mapping, Optional

from .clustering import Clustering, SemanticCluster
from .errors import InvalidConfig, MissingLikelihoods
from .mathutil import entropy_from_counts, entropy_from_logprobs, log_normalize
from .types import SCHEMA


class EstimatorKind(str, Enum):
    DISCRETE = "discrete"
    RAO_BLACKWELL = "rao_blackwell"
    WITHIN_ONLY = "within_only"
    COMBINED = "combined"


DEFAULT_ESTIMATOR = EstimatorKind.COMBINED
LIKELIHOOD_KINDS = (EstimatorKind.RAO_BLACKWELL, EstimatorKind.WITHIN_ONLY, EstimatorKind.COMBINED)


def _check(clustering: Clustering) -> None:
    if not clustering.clusters:
        raise InvalidConfig("clustering has no clusters")


def _masses(clustering: Clustering) -> list[float]:
    masses = [c.log_mass for c in clustering.clusters]
    if any(m is None for m in masses):
        raise MissingLikelihoods("some samples carry no token log-probabilities")
    return masses  # type: ignore[return-value]


def discrete_entropy(clustering: Clustering) -> float:
    """Entropy of the cluster-size histogram."""
    _check(clustering)
    return entropy_from_counts([len(c.member_indices) for c in clustering.clusters])


def cluster_log_masses(clustering: Clustering) -> list[float]:
    _check(clustering)
    return _masses(clustering)


def cluster_probabilities(clustering: Clustering) -> list[float]:
    """Normalized cluster masses p̄_i."""
    return [math.exp(lp) for lp in log_normalize(cluster_log_masses(clustering))]


def rao_blackwell_entropy(clustering: Clustering) -> float:
    """Entropy of the normalized cluster likelihood masses."""
    return entropy_from_logprobs(cluster_log_masses(clustering))


def within_cluster_entropy(cluster: SemanticCluster) -> float:
    """Entropy of the normalized dedup-member probabilities inside one cluster."""
    if not cluster.dedup_members:
        raise InvalidConfig("cluster has no members")
    lps = [d.log_prob for d in cluster.dedup_members]
    if any(lp is None for lp in lps):
        raise MissingLikelihoods("cluster members carry no token log-probabilities")
    return entropy_from_logprobs(lps)  # type: ignore[arg-type]


def corrected_entropy(clustering: Clustering, kind: EstimatorKind = DEFAULT_ESTIMATOR) -> float:
    """Mass-weighted within-cluster entropy, optionally plus the cross-cluster term.

    ``within_only`` returns Σ p̄_i H_i; ``combined`` adds the Rao-Blackwell
    entropy so that disagreement across clusters still counts.
    """
    kind = EstimatorKind(kind)
    if kind not in (EstimatorKind.WITHIN_ONLY, EstimatorKind.COMBINED):
        raise InvalidConfig(f"corrected_entropy needs within_only or combined, got {kind.value}")
    weights = cluster_probabilities(clustering)
    within = math.fsum(w * within_cluster_entropy(c) for w, c in zip(weights, clustering.clusters))
    if kind is EstimatorKind.WITHIN_ONLY:
        return within
    return rao_blackwell_entropy(clustering) + within


def estimate(clustering: Clustering, kind: EstimatorKind) -> float:
    kind = EstimatorKind(kind)
    if kind is EstimatorKind.DISCRETE:
        return discrete_entropy(clustering)
    if kind is EstimatorKind.RAO_BLACKWELL:
        return rao_blackwell_entropy(clustering)
    return corrected_entropy(clustering, kind)


def nats_to_bits(x: float) -> float:
    return x / math.log(2)


@dataclass(frozen=True)
class EntropyReport:
    context_id: str
    m: int
    cluster_count: int
    # None marks an estimator that could not be computed (no log-probs)
    values: Mapping[EstimatorKind, Optional[float]]
    per_cluster_within: tuple[tuple[int, float], ...] = field(default_factory=tuple)

    def to_dict(self, bits: bool = False, kinds: Optional[list[EstimatorKind]] = None) -> dict[str, Any]:
        conv = nats_to_bits if bits else (lambda v: v)
        kinds = kinds or list(EstimatorKind)
        return {
            "schema": SCHEMA,
            "context_id": self.context_id,
            "m": self.m,
            "cluster_count": self.cluster_count,
            "unit": "bits" if bits else "nats",
            "values": {
                k.value: (None if self.values.get(k) is None else conv(self.values[k]))  # type: ignore[arg-type]
                for k in kinds
            },
            "per_cluster_within": [[i, conv(h)] for i, h in self.per_cluster_within],
        }


def entropy_report(clustering: Clustering, context_id: str = "") -> EntropyReport:
    """Every estimator for one clustering; likelihood-based ones are None without log-probs."""
    _check(clustering)
    values: dict[EstimatorKind, Optional[float]] = {EstimatorKind.DISCRETE: discrete_entropy(clustering)}
    per_cluster: tuple[tuple[int, float], ...] = ()
    if clustering.has_likelihoods:
        for kind in LIKELIHOOD_KINDS:
            values[kind] = estimate(clustering, kind)
        per_cluster = tuple((i, within_cluster_entropy(c)) for i, c in enumerate(clustering.clusters))
    else:
        for kind in LIKELIHOOD_KINDS:
            values[kind] = None
    return EntropyReport(
        context_id=context_id,
        m=clustering.sample_count,
        cluster_count=len(clustering.clusters),
        values=values,
        per_cluster_within=per_cluster,
    )
