"""Immutable records passed between the sampling, clustering and scoring stages."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Mapping, Optional

from .errors import InvalidConfig, LogprobsMissing

SCHEMA = "uq/v1"


class FinishReason(str, Enum):
    STOP = "stop"
    LENGTH = "length"
    ERROR = "error"


@dataclass(frozen=True)
class ProbeContext:
    id: str
    query: str
    image_ref: Optional[str] = None
    metadata: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.id:
            raise InvalidConfig("context id must be non-empty")
        if not self.query:
            raise InvalidConfig(f"context {self.id!r}: query must be non-empty")

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"id": self.id, "query": self.query}
        if self.image_ref is not None:
            out["image_ref"] = self.image_ref
        if self.metadata:
            out["metadata"] = dict(sorted(self.metadata.items()))
        return out

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ProbeContext":
        try:
            return cls(
                id=str(d["id"]),
                query=str(d["query"]),
                image_ref=d.get("image_ref"),
                metadata={str(k): str(v) for k, v in (d.get("metadata") or {}).items()},
            )
        except KeyError as e:
            raise InvalidConfig(f"context is missing field {e.args[0]!r}") from None


@dataclass(frozen=True)
class GenerationSample:
    text: str
    token_logprobs: tuple[float, ...] = ()
    finish_reason: FinishReason = FinishReason.STOP

    def __post_init__(self) -> None:
        object.__setattr__(self, "token_logprobs", tuple(float(x) for x in self.token_logprobs))
        object.__setattr__(self, "finish_reason", FinishReason(self.finish_reason))
        for lp in self.token_logprobs:
            if not math.isfinite(lp) or lp > 0:
                raise LogprobsMissing(f"invalid token log-probability {lp!r}")
        if not self.text and self.finish_reason is not FinishReason.ERROR:
            raise InvalidConfig("sample text is empty but finish_reason is not 'error'")

    @property
    def has_logprobs(self) -> bool:
        return bool(self.token_logprobs)

    def sequence_logprob(self, length_normalized: bool = False) -> Optional[float]:
        """Log-probability of the whole sequence, or None without token log-probs."""
        if not self.token_logprobs:
            return None
        total = math.fsum(self.token_logprobs)
        if length_normalized:
            return total / len(self.token_logprobs)
        return total

    def to_dict(self) -> dict[str, Any]:
        return {
            "text": self.text,
            "token_logprobs": list(self.token_logprobs),
            "finish_reason": self.finish_reason.value,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "GenerationSample":
        return cls(
            text=str(d.get("text", "")),
            token_logprobs=tuple(d.get("token_logprobs") or ()),
            finish_reason=FinishReason(d.get("finish_reason", "stop")),
        )


@dataclass(frozen=True)
class SamplingConfig:
    temperature: float = 1.0
    top_p: float = 0.9
    max_tokens: int = 256
    m: int = 10

    def __post_init__(self) -> None:
        if not self.temperature > 0:
            raise InvalidConfig(f"temperature must be > 0, got {self.temperature}")
        if not 0 < self.top_p <= 1:
            raise InvalidConfig(f"top_p must be in (0, 1], got {self.top_p}")
        if int(self.max_tokens) != self.max_tokens or self.max_tokens < 1:
            raise InvalidConfig(f"max_tokens must be a positive integer, got {self.max_tokens}")
        if int(self.m) != self.m or self.m < 1:
            raise InvalidConfig(f"m must be a positive integer, got {self.m}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "temperature": self.temperature,
            "top_p": self.top_p,
            "max_tokens": self.max_tokens,
            "m": self.m,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "SamplingConfig":
        default = cls()
        return cls(
            temperature=float(d.get("temperature", default.temperature)),
            top_p=float(d.get("top_p", default.top_p)),
            max_tokens=int(d.get("max_tokens", default.max_tokens)),
            m=int(d.get("m", default.m)),
        )


@dataclass(frozen=True)
class SampleSet:
    context: ProbeContext
    samples: tuple[GenerationSample, ...]
    sampling_config: SamplingConfig

    def __post_init__(self) -> None:
        object.__setattr__(self, "samples", tuple(self.samples))
        if len(self.samples) < 1:
            raise InvalidConfig("a SampleSet needs at least one sample")

    @property
    def m(self) -> int:
        return len(self.samples)

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema": SCHEMA,
            "context": self.context.to_dict(),
            "sampling_config": self.sampling_config.to_dict(),
            "samples": [s.to_dict() for s in self.samples],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "SampleSet":
        samples = tuple(GenerationSample.from_dict(s) for s in d.get("samples") or ())
        cfg = dict(d.get("sampling_config") or {})
        cfg.setdefault("m", max(len(samples), 1))
        return cls(
            context=ProbeContext.from_dict(d.get("context") or {}),
            samples=samples,
            sampling_config=SamplingConfig.from_dict(cfg),
        )


@dataclass(frozen=True)
class VQAProbe:
    question: str
    expected_answer: str
    source_sentence_index: int = 0

    def __post_init__(self) -> None:
        if not self.question:
            raise InvalidConfig("probe question must be non-empty")
        if self.expected_answer not in ("yes", "no"):
            raise InvalidConfig(f"expected answer must be 'yes' or 'no', got {self.expected_answer!r}")
