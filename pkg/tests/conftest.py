import math

import pytest

from semuq.types import GenerationSample, ProbeContext, SampleSet, SamplingConfig


def make_sampleset(texts, seq_logprobs=None, context_id="c1"):
    """Sample set whose i-th sample has sequence log-prob ``seq_logprobs[i]``.

    Each sequence log-prob is split over two tokens so the summation path is exercised.
    """
    samples = []
    for i, t in enumerate(texts):
        if seq_logprobs is None:
            samples.append(GenerationSample(t))
        else:
            lp = seq_logprobs[i]
            samples.append(GenerationSample(t, (lp / 2, lp / 2)))
    return SampleSet(
        ProbeContext(context_id, "q"), tuple(samples), SamplingConfig(m=len(texts))
    )


@pytest.fixture
def ln():
    return math.log


# one line per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
