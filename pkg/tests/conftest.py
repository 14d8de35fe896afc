import numpy as np
import pytest

from cari.data import split
from cari.model import PriorConfig, init_model
from cari.synthgen import ScmConfig, generate


@pytest.fixture(scope="session")
def synth500():
    return generate(ScmConfig(n=500, beta=0.3, seed=0))


@pytest.fixture(scope="session")
def synth_splits(synth500):
    return split(synth500, (0.6, 0.2, 0.2), seed=0)


@pytest.fixture
def tiny_model():
    return init_model(6, seed=3, z_dim=4, hidden=5, prior=PriorConfig("conditional"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def trained_base(synth_splits):
    """Plain cross-entropy model on the 500-sample split, shared by the slower tests."""
    from cari.trainer import TrainConfig, train

    tr, va, _ = synth_splits
    cfg = TrainConfig(epochs=30, lam=float("inf"), w_club=0.0, w_t=0.0, seed=0)
    return train(cfg, tr, init_model(tr.d_in, seed=0), va).model


_ACCEPTANCE_LINES: list = []


@pytest.fixture
def report():
    """Record one PASS/FAIL line per acceptance criterion; echoed in the terminal summary."""
    def _report(name: str, ok: bool, detail: str = "") -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return _report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
