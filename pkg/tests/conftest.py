import numpy as np
import pytest

from modbal.modality import ModalityTag, StepAttention, TokenLayout


def random_step(rng, layers=8, heads=8, layout=None, extra_keys=0, audio_boost=8.0):
    """Softmax rows with a random per-head logit offset on audio keys.

    Offsets vary across heads, so gated layers usually hold both biased and
    unbiased heads.
    """
    layout = layout or TokenLayout.from_counts(64, 2, 16)
    keys = layout.total + extra_keys
    logits = rng.normal(0.0, 1.0, (layers, heads, keys))
    boost = rng.uniform(0.0, audio_boost, (layers, heads, 1))
    audio = np.zeros(keys, dtype=bool)
    audio[: layout.total] = layout.mask(ModalityTag.AUDIO)
    logits = logits + boost * audio
    w = np.exp(logits - logits.max(axis=-1, keepdims=True))
    w /= w.sum(axis=-1, keepdims=True)
    return StepAttention(w)


@pytest.fixture
def layout():
    return TokenLayout.from_counts(64, 2, 16)


@pytest.fixture
def small_layout():
    return TokenLayout.from_counts(3, 2, 2)


class _Criterion:
    """Records one pass/fail line per acceptance criterion for the terminal summary."""

    def __init__(self, lines, number, title):
        self.lines, self.number, self.title = lines, number, title
        self.detail = ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        extra = self.detail if exc_type is None else f"{exc_type.__name__}: {exc}".splitlines()[0]
        line = f"criterion {self.number:>2} {status}  {self.title}"
        self.lines.append(line + (f"  ({extra})" if extra else ""))
        return False


@pytest.fixture
def criterion(request):
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, [])
    return lambda number, title: _Criterion(lines, number, title)


ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
