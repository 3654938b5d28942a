import numpy as np
import pytest
import torch
from hypothesis import settings, strategies as st

from oodaug.graph import DenseGraph, GraphDataset

settings.register_profile("default", deadline=None, max_examples=30)
settings.load_profile("default")

torch.set_num_threads(1)


def random_graph(rng, n_max=8, a=3, b=1, n=None, label=0, binary=True):
    n = int(rng.integers(1, n_max + 1)) if n is None else n
    x = np.zeros((n_max, a), np.float32)
    adj = np.zeros((n_max, n_max, b), np.float32)
    upper = np.triu(np.ones((n, n), bool), k=1)[..., None]
    if binary:
        x[np.arange(n), rng.integers(0, a, n)] = 1.0
        up = ((rng.random((n, n, b)) < 0.4) & upper).astype(np.float32)
    else:
        x[:n] = rng.normal(size=(n, a))
        up = rng.normal(size=(n, n, b)) * upper
    adj[:n, :n] = up + up.transpose(1, 0, 2)
    mask = np.zeros(n_max, bool)
    mask[:n] = True
    return DenseGraph(x, adj, mask, label)


@st.composite
def datasets(draw, max_graphs=5):
    seed = draw(st.integers(0, 2**31 - 1))
    count = draw(st.integers(0, max_graphs))
    n_max = draw(st.integers(1, 7))
    a = draw(st.integers(1, 4))
    b = draw(st.integers(1, 2))
    binary = draw(st.booleans())
    rng = np.random.default_rng(seed)
    graphs = [random_graph(rng, n_max, a, b, label=int(rng.integers(0, 3)), binary=binary)
              for _ in range(count)]
    return GraphDataset(graphs, 3, "train", n_max, a, b)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE: dict = {}


def record_criterion(number: int, name: str, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = f"criterion {number} ({name}): {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
