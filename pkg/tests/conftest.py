import time

import numpy as np
import pytest

from spem import data, embed as emb, flow
from spem.evaluation import NO_HUB

ACCEPTANCE_LINES = []


def record(criterion: str, passed: bool, detail: str) -> bool:
    line = f"{'PASS' if passed else 'FAIL'}  criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


class Fitted:
    """A flow trained on one synthetic pair, with its bank and timing."""

    def __init__(self, spec):
        t0 = time.perf_counter()
        self.spec = spec
        self.ds = data.generate(spec)
        self.model, self.trace = flow.train(self.ds.train, flow.TrainConfig(seed=spec.seed))
        self.train_seconds = time.perf_counter() - t0
        self.embedder = emb.fit_embedder(self.ds.train, "identity")
        self.bank = emb.build_memory_bank(self.ds.train, self.embedder)
        self.id_mix, self.ood_mix = data.distributions(spec)


@pytest.fixture(scope="session")
def inversion():
    return Fitted(data.SyntheticDatasetSpec(kind="inversion_pair"))


@pytest.fixture(scope="session")
def non_inversion():
    return Fitted(data.SyntheticDatasetSpec(kind="non_inversion_pair", geometry=NO_HUB))


@pytest.fixture
def small_model():
    return flow.init_model(4, n_layers=4, hidden=8, seed=3, zero_output=False)


@pytest.fixture
def gaussian_batch():
    return np.random.default_rng(0).normal(size=(64, 4))
