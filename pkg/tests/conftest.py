from pathlib import Path

import numpy as np
import pytest
from hypothesis import strategies as st

from fedmoldiff.molgraph import MolGraph, parse_smiles, read_smiles_file

ROOT = Path(__file__).resolve().parents[1]
FIXTURES = ROOT / "fixtures"
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def fixtures_dir():
    return FIXTURES


@pytest.fixture(scope="session")
def corpus():
    return read_smiles_file(FIXTURES / "smiles_corpus.txt")


@pytest.fixture(scope="session")
def corpus_graphs(corpus):
    return [parse_smiles(s) for s in corpus]


@st.composite
def molgraphs(draw, min_n=1, max_n=9, max_order=3):
    """Arbitrary symmetric graphs over the atom/bond alphabets (validity not enforced)."""
    n = draw(st.integers(min_n, max_n))
    nodes = draw(st.lists(st.integers(0, 3), min_size=n, max_size=n))
    upper = draw(st.lists(st.integers(0, max_order), min_size=n * (n - 1) // 2, max_size=n * (n - 1) // 2))
    edges = np.zeros((n, n), dtype=np.int8)
    edges[np.triu_indices(n, 1)] = upper
    edges = edges + edges.T
    return MolGraph(np.array(nodes), edges)


def random_permutation(rng, n):
    return rng.permutation(n)


@pytest.fixture(scope="session")
def tiny_records():
    from fedmoldiff.data import load_dataset

    return load_dataset(FIXTURES / "qm9_tiny.csv")
