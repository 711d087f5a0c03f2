import numpy as np
import pytest
import torch

from softvad.dataset import Utterance


def make_utterances(n_speakers=4, per_speaker=10, T=40, seed=0, spread=1.0, lengths=None):
    """Gaussian toy utterances: each speaker has its own mean spectrum and the
    first and last quarter of every utterance is low-energy 'silence'."""
    rng = np.random.default_rng(seed)
    means = rng.normal(0, spread, size=(n_speakers, 40))
    out = []
    for s in range(n_speakers):
        for j in range(per_speaker):
            t = T if lengths is None else int(lengths[(s * per_speaker + j) % len(lengths)])
            feats = means[s] + rng.normal(0, 1, size=(t, 40))
            labels = np.ones(t, dtype=np.uint8)
            edge = max(1, t // 4)
            feats[:edge] = rng.normal(-3, 0.3, size=(edge, 40))
            feats[-edge:] = rng.normal(-3, 0.3, size=(edge, 40))
            labels[:edge] = labels[-edge:] = 0
            out.append(Utterance(f"u{s}-{j}", f"spk{s}", feats, labels))
    return out


@pytest.fixture
def toy_utts():
    return make_utterances()


@pytest.fixture(autouse=True)
def _quiet_torch():
    torch.set_num_threads(1)
    yield


ACCEPTANCE_LINES = []


def record_criterion(number, title, passed, detail):
    """Print one acceptance line and keep it for the end-of-run summary."""
    line = f"CRITERION {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
