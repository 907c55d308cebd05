import numpy as np
import pytest
from hypothesis import settings

from latenttree.trees import Tree, parse_newick

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

QUINTET = "((1,2),5,(3,4));"


def random_binary_tree(m: int, rng: np.random.Generator, labels=None) -> Tree:
    """Uniform stepwise-addition binary tree on ``m`` leaves."""
    labels = [str(i + 1) for i in range(m)] if labels is None else list(labels)
    if m == 2:
        return Tree([(0, 1)], {0: labels[0], 1: labels[1]})
    edges = [(0, m), (1, m), (2, m)]
    for leaf in range(3, m):
        u, v = edges.pop(int(rng.integers(len(edges))))
        inner = m + leaf - 2
        edges += [(u, inner), (inner, v), (inner, leaf)]
    return Tree(edges, dict(enumerate(labels)))


def random_tree(m: int, rng: np.random.Generator, contract: float = 0.3) -> Tree:
    """Binary tree with each internal edge contracted with probability ``contract``."""
    t = random_binary_tree(m, rng)
    edges = list(t.edges)
    parent = list(range(t.n_nodes))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for u, v in t.internal_edges:
        if rng.random() < contract:
            parent[find(u)] = find(v)
    new = {(find(u), find(v)) for u, v in edges if find(u) != find(v)}
    return Tree(sorted(new), {i: t.label(i) for i in range(t.n_leaves)})


@pytest.fixture
def quintet():
    return parse_newick(QUINTET)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
