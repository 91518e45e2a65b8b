import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cgvrg.corpus import build_vocabularies, load_corpus  # noqa: E402

FIXTURE = Path(__file__).parent / "fixtures" / "toy20.jsonl"


@pytest.fixture(scope="session")
def toy_corpus():
    return load_corpus(FIXTURE)


@pytest.fixture(scope="session")
def toy_vocab(toy_corpus):
    return build_vocabularies(toy_corpus)


@pytest.fixture(scope="session")
def toy_mil(toy_corpus, toy_vocab):
    from cgvrg.mil import train_mil

    return train_mil(toy_corpus, toy_vocab, epochs=30)


@pytest.fixture(scope="session")
def toy_graphs(toy_corpus, toy_vocab, toy_mil):
    from cgvrg.graph import build_graph

    return {rec.image_id: build_graph(rec, toy_mil.model, toy_vocab) for rec in toy_corpus}


ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
