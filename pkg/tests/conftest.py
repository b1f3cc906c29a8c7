import numpy as np
import pytest

from adapted_retrieval import synthetic, trainer
from adapted_retrieval.provider import Embedder, ProviderSpec

_ACCEPTANCE = []


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def acceptance_record():
    """Collects one line per acceptance criterion for the terminal summary."""

    def record(number, name, passed, detail=""):
        _ACCEPTANCE.append((number, name, passed, detail))

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, passed, detail in sorted(_ACCEPTANCE, key=lambda r: r[0]):
        status = {True: "PASS", False: "FAIL", None: "SKIP"}[passed]
        terminalreporter.write_line(f"[{status}] {number}. {name} {detail}".rstrip())


@pytest.fixture(scope="session")
def offset_fixture():
    """Synthetic offset dataset, its stub embedder and all embeddings (seed 0, d=64)."""
    ds, stub = synthetic.make_offset_fixture(seed=0)
    embedder = Embedder(ProviderSpec(kind="stub", dimension=64), stub=stub)
    qv, cv = trainer.embed_dataset(ds, embedder)
    return ds, embedder, qv, cv
