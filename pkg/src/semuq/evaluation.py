"""Error-prediction evaluation: correctness labels, AUROC, bootstrap CIs and ablations."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Any, Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from .backends import Backend
from .clustering import Clustering, EquivalenceJudge, cluster, judge_equivalent
from .entropy import EstimatorKind, entropy_report
from .errors import BackendUnavailable, DegenerateLabels, InvalidConfig, LogprobsMissing
from .gateway import DEFAULT_PARALLELISM, sample_generations
from .report import DEFAULT_ANSWERS_PER_PROBE, assess_report, binary_cluster, binary_estimate
from .types import ProbeContext, SamplingConfig

logger = logging.getLogger(__name__)

DEFAULT_N_BOOT = 1000


@dataclass(frozen=True)
class EvalRecord:
    id: str
    uncertainty: float
    correct: bool
    estimator: EstimatorKind = EstimatorKind.COMBINED

    def __post_init__(self) -> None:
        if not np.isfinite(self.uncertainty):
            raise InvalidConfig(f"record {self.id!r}: uncertainty must be finite")
        object.__setattr__(self, "estimator", EstimatorKind(self.estimator))

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "uncertainty": self.uncertainty,
            "correct": self.correct,
            "estimator": self.estimator.value,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "EvalRecord":
        try:
            return cls(
                id=str(d["id"]),
                uncertainty=float(d["uncertainty"]),
                correct=bool(d["correct"]),
                estimator=EstimatorKind(d.get("estimator", EstimatorKind.COMBINED.value)),
            )
        except KeyError as e:
            raise InvalidConfig(f"record is missing field {e.args[0]!r}") from None


def judge_correct(generated: str, reference: str, judge: EquivalenceJudge) -> bool:
    if not reference:
        raise InvalidConfig("reference must be non-empty")
    if not generated:
        return False
    return judge_equivalent(generated, reference, judge)


def auroc_scores(scores: np.ndarray, errors: np.ndarray) -> float:
    """Mann-Whitney AUROC with errors as the positive class; ties count 1/2."""
    scores = np.asarray(scores, dtype=float)
    errors = np.asarray(errors, dtype=bool)
    n_err = int(errors.sum())
    n_ok = errors.size - n_err
    if n_err == 0 or n_ok == 0:
        raise DegenerateLabels("AUROC needs at least one error and one correct record")
    _, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    # average 1-based rank of each tie group; always a multiple of 1/2
    avg_rank = np.cumsum(counts) - (counts - 1) / 2.0
    rank_sum = float(avg_rank[inverse][errors].sum())
    u = rank_sum - n_err * (n_err + 1) / 2.0
    return u / (n_err * n_ok)


def auroc(records: Sequence[EvalRecord]) -> float:
    scores = np.array([r.uncertainty for r in records], dtype=float)
    errors = np.array([not r.correct for r in records], dtype=bool)
    return auroc_scores(scores, errors)


@dataclass(frozen=True)
class ConfidenceInterval:
    point: float
    lo: float
    hi: float


def bootstrap_ci(
    records: Sequence[EvalRecord],
    metric: Callable[[np.ndarray, np.ndarray], float] = auroc_scores,
    n_boot: int = DEFAULT_N_BOOT,
    seed: int = 0,
    alpha: float = 0.05,
) -> ConfidenceInterval:
    """Percentile bootstrap; single-class resamples are redrawn."""
    if n_boot < 100:
        raise InvalidConfig(f"n_boot must be >= 100, got {n_boot}")
    scores = np.array([r.uncertainty for r in records], dtype=float)
    errors = np.array([not r.correct for r in records], dtype=bool)
    point = metric(scores, errors)
    rng = np.random.default_rng(seed)
    n = len(records)
    stats = np.empty(n_boot)
    b = 0
    while b < n_boot:
        idx = rng.integers(0, n, size=n)
        e = errors[idx]
        if e.all() or not e.any():
            continue
        stats[b] = metric(scores[idx], e)
        b += 1
    lo, hi = np.percentile(stats, [100 * alpha / 2, 100 * (1 - alpha / 2)])
    return ConfidenceInterval(point, float(lo), float(hi))


# --- ablations --------------------------------------------------------------


@dataclass(frozen=True)
class AblationGrid:
    m_values: tuple[int, ...] = (5, 10, 15, 20, 30)
    probes_values: tuple[int, ...] = (1, 2, 3, 4, 5)

    def __post_init__(self) -> None:
        for name in ("m_values", "probes_values"):
            vals = tuple(int(v) for v in getattr(self, name))
            object.__setattr__(self, name, vals)
            if any(v < 1 for v in vals) or any(b <= a for a, b in zip(vals, vals[1:])):
                raise InvalidConfig(f"{name} must be positive and strictly increasing, got {vals}")


@dataclass(frozen=True)
class VQAItem:
    context: ProbeContext
    reference: str
    # the model's committed answer; when absent the heaviest cluster's representative is used
    answer: Optional[str] = None


@dataclass(frozen=True)
class ReportItem:
    context: ProbeContext
    report: str
    sentence_errors: tuple[bool, ...]


@dataclass(frozen=True)
class AblationRow:
    knob: str
    value: int
    estimator: EstimatorKind
    auroc: Optional[float]
    lo: Optional[float]
    hi: Optional[float]
    n: int
    n_failed: int = 0
    failure: Optional[str] = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "knob": self.knob,
            "value": self.value,
            "estimator": self.estimator.value,
            "auroc": self.auroc,
            "ci_lo": self.lo,
            "ci_hi": self.hi,
            "n": self.n,
            "n_failed": self.n_failed,
            "failure": self.failure,
        }


def _committed_answer(samples_text: Sequence[str], clustering: Clustering) -> str:
    if clustering.has_likelihoods:
        best = max(clustering.clusters, key=lambda c: c.log_mass)  # type: ignore[arg-type,return-value]
    else:
        best = max(clustering.clusters, key=lambda c: len(c.member_indices))
    return samples_text[best.representative_index]


def vqa_records(
    items: Iterable[VQAItem],
    m: int,
    estimators: Sequence[EstimatorKind],
    backend: Backend,
    judge: EquivalenceJudge,
    base_config: SamplingConfig = SamplingConfig(),
    parallelism: int = DEFAULT_PARALLELISM,
) -> tuple[list[EvalRecord], int]:
    """Sample, cluster and score each item; returns records and the number of failed items."""
    config = replace(base_config, m=m)
    records: list[EvalRecord] = []
    failed = 0
    for item in items:
        try:
            ss = sample_generations(item.context, config, backend, parallelism=parallelism)
        except (BackendUnavailable, LogprobsMissing) as e:
            logger.warning("item %s failed: %s", item.context.id, e)
            failed += 1
            continue
        cl = cluster(ss, judge)
        rep = entropy_report(cl, item.context.id)
        answer = item.answer if item.answer is not None else _committed_answer([s.text for s in ss.samples], cl)
        correct = judge_correct(answer, item.reference, judge)
        for kind in estimators:
            value = rep.values.get(EstimatorKind(kind))
            if value is not None:
                records.append(EvalRecord(item.context.id, value, correct, kind))
    return records, failed


def report_records(
    items: Iterable[ReportItem],
    probes_per_sentence: int,
    estimators: Sequence[EstimatorKind],
    backend: Backend,
    answers_per_probe: int = DEFAULT_ANSWERS_PER_PROBE,
    base_config: SamplingConfig = SamplingConfig(),
    parallelism: int = DEFAULT_PARALLELISM,
) -> tuple[list[EvalRecord], int]:
    """One record per assessed sentence; a sentence error label marks the record incorrect."""
    config = replace(base_config, m=answers_per_probe)
    records: list[EvalRecord] = []
    failed = 0
    for item in items:
        try:
            assessment = assess_report(
                item.report, item.context, probes_per_sentence, config, backend,
                report_id=item.context.id, parallelism=parallelism,
            )
        except BackendUnavailable as e:
            logger.warning("report %s failed: %s", item.context.id, e)
            failed += 1
            continue
        if len(assessment.sentences) != len(item.sentence_errors):
            raise InvalidConfig(
                f"report {item.context.id!r}: {len(item.sentence_errors)} labels for "
                f"{len(assessment.sentences)} sentences"
            )
        for s, is_error in zip(assessment.sentences, item.sentence_errors):
            if s.entropy is None:
                failed += 1
                continue
            bc = binary_cluster(list(zip(s.probes, s.answers)))
            for kind in estimators:
                h = binary_estimate(bc, kind)
                records.append(EvalRecord(f"{item.context.id}#{s.sentence_index}", h, not is_error, kind))
    return records, failed


def _rows(
    knob: str, value: int, records: list[EvalRecord], estimators: Sequence[EstimatorKind],
    failed: int, n_boot: int, seed: int,
) -> list[AblationRow]:
    rows = []
    for kind in estimators:
        kind = EstimatorKind(kind)
        subset = [r for r in records if r.estimator is kind]
        if not subset:
            rows.append(AblationRow(knob, value, kind, None, None, None, 0, failed, "no_records"))
            continue
        try:
            ci = bootstrap_ci(subset, n_boot=n_boot, seed=seed)
        except DegenerateLabels:
            rows.append(AblationRow(knob, value, kind, None, None, None, len(subset), failed, "degenerate_labels"))
            continue
        rows.append(AblationRow(knob, value, kind, ci.point, ci.lo, ci.hi, len(subset), failed))
    return rows


def run_ablation(
    dataset: Sequence[Any],
    grid: AblationGrid,
    estimators: Sequence[EstimatorKind],
    backend: Backend,
    knob: str = "m",
    judge: Optional[EquivalenceJudge] = None,
    base_config: SamplingConfig = SamplingConfig(),
    answers_per_probe: int = DEFAULT_ANSWERS_PER_PROBE,
    n_boot: int = DEFAULT_N_BOOT,
    seed: int = 0,
    parallelism: int = DEFAULT_PARALLELISM,
) -> list[AblationRow]:
    """Re-run the pipeline at every grid point and emit one row per estimator.

    ``knob="m"`` sweeps samples per VQA item (dataset of :class:`VQAItem`);
    ``knob="probes"`` sweeps probes per sentence (dataset of :class:`ReportItem`).
    """
    if not dataset:
        raise InvalidConfig("dataset is empty")
    if not estimators:
        raise InvalidConfig("no estimators requested")
    rows: list[AblationRow] = []
    if knob == "m":
        if judge is None:
            raise InvalidConfig("the m ablation needs an equivalence judge")
        for m in grid.m_values:
            records, failed = vqa_records(dataset, m, estimators, backend, judge, base_config, parallelism)
            rows.extend(_rows("m", m, records, estimators, failed, n_boot, seed))
    elif knob == "probes":
        for k in grid.probes_values:
            records, failed = report_records(
                dataset, k, estimators, backend, answers_per_probe, base_config, parallelism
            )
            rows.extend(_rows("probes", k, records, estimators, failed, n_boot, seed))
    else:
        raise InvalidConfig(f"unknown ablation knob {knob!r}; use 'm' or 'probes'")
    if rows and all(r.failure is not None and r.n == 0 for r in rows) and all(r.n_failed > 0 for r in rows):
        raise BackendUnavailable("every grid point failed")
    return rows
