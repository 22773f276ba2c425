"""Semantic uncertainty for generative-model outputs.

Cluster sampled generations by meaning, estimate semantic entropy (with a
within-cluster correction for the single-cluster case), grade report sentences
by yes/no probe consistency, evaluate error prediction by AUROC, and compute
the DPO preference loss.
"""

__version__ = "0.1.0"

from .clustering import Clustering, SemanticCluster, cluster, judge_equivalent, make_judge
from .entropy import EntropyReport, EstimatorKind, corrected_entropy, discrete_entropy, entropy_report, rao_blackwell_entropy
from .types import GenerationSample, ProbeContext, SampleSet, SamplingConfig, VQAProbe

__all__ = [
    "Clustering",
    "EntropyReport",
    "EstimatorKind",
    "GenerationSample",
    "ProbeContext",
    "SampleSet",
    "SamplingConfig",
    "SemanticCluster",
    "VQAProbe",
    "cluster",
    "corrected_entropy",
    "discrete_entropy",
    "entropy_report",
    "judge_equivalent",
    "make_judge",
    "rao_blackwell_entropy",
]
