from __future__ import annotations

import numpy as np
import pytest

from mixcurv.graph import HeteroGraph, NodeRecord
from mixcurv.sampling import TrainingSample
from mixcurv.types import EdgeType as E
from mixcurv.types import NodeType as T
from mixcurv.types import Relation


def toy_nodes() -> dict[str, NodeRecord]:
    return {
        "q1": NodeRecord("q1", T.QUERY, "c1", {"terms": ("red", "shoe")}),
        "q2": NodeRecord("q2", T.QUERY, "c1", {"terms": ("shoe",)}),
        "i1": NodeRecord("i1", T.ITEM, "c1", {"title": ("shoe",), "brand": ("b1",), "shop": ("s1",)}),
        "i2": NodeRecord("i2", T.ITEM, "c2", {"title": ("hat",), "brand": ("b2",), "shop": ("s1",)}),
        "a1": NodeRecord("a1", T.AD, "c1", {"title": ("shoe",), "bid_words": ("shoe",), "brand": ("b1",),
                                            "shop": ("s1",)}),
    }


TOY_EDGES = [
    (E.CLICK, "q1", "i1"), (E.CLICK, "q1", "a1"), (E.SEMANTIC, "q1", "q2"),
    (E.COCLICK, "i1", "a1"), (E.CLICK, "q2", "i2"),
]


@pytest.fixture
def toy_graph() -> HeteroGraph:
    """Five nodes, two categories, every node type present."""
    return HeteroGraph(toy_nodes(), TOY_EDGES)


@pytest.fixture
def toy_batch() -> list[TrainingSample]:
    return [
        TrainingSample("q1", "i1", ("i2",), Relation.QI),
        TrainingSample("q1", "q2", ("q1",), Relation.Q2Q),
        TrainingSample("i1", "a1", ("a1",), Relation.I2A),
        TrainingSample("q2", "a1", ("a1",), Relation.Q2A),
    ]


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        terminalreporter.write_line(RESULTS[n])
