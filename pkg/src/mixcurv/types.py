"""Node, edge and relation enumerations shared across the package."""

from __future__ import annotations

import enum


class NodeType(str, enum.Enum):
    QUERY = "query"
    ITEM = "item"
    AD = "ad"

    @property
    def letter(self) -> str:
        return {"query": "Q", "item": "I", "ad": "A"}[self.value]


NODE_TYPES = (NodeType.QUERY, NodeType.ITEM, NodeType.AD)


class EdgeType(str, enum.Enum):
    CLICK = "click"
    COCLICK = "coclick"
    SEMANTIC = "semantic"
    COBID = "cobid"


EDGE_TYPES = (EdgeType.CLICK, EdgeType.COCLICK, EdgeType.SEMANTIC, EdgeType.COBID)

# unordered endpoint pairs allowed for each edge type
EDGE_ENDPOINTS: dict[EdgeType, frozenset[frozenset[NodeType]]] = {
    EdgeType.CLICK: frozenset(
        {frozenset({NodeType.QUERY, NodeType.ITEM}), frozenset({NodeType.QUERY, NodeType.AD})}
    ),
    EdgeType.COCLICK: frozenset(
        {frozenset({NodeType.ITEM}), frozenset({NodeType.AD}), frozenset({NodeType.ITEM, NodeType.AD})}
    ),
    EdgeType.SEMANTIC: frozenset({frozenset({NodeType.QUERY})}),
    EdgeType.COBID: frozenset({frozenset({NodeType.AD})}),
}


def edge_allowed(etype: EdgeType, a: NodeType, b: NodeType) -> bool:
    return frozenset({a, b}) in EDGE_ENDPOINTS[etype]


class Relation(str, enum.Enum):
    """Edge-level scoring spaces; the query-item space serves both directions."""

    Q2Q = "Q2Q"
    QI = "QI"
    I2I = "I2I"
    Q2A = "Q2A"
    I2A = "I2A"
    A2A = "A2A"


RELATIONS = tuple(Relation)

_REL_BY_TYPES = {
    frozenset({NodeType.QUERY}): Relation.Q2Q,
    frozenset({NodeType.QUERY, NodeType.ITEM}): Relation.QI,
    frozenset({NodeType.ITEM}): Relation.I2I,
    frozenset({NodeType.QUERY, NodeType.AD}): Relation.Q2A,
    frozenset({NodeType.ITEM, NodeType.AD}): Relation.I2A,
    frozenset({NodeType.AD}): Relation.A2A,
}


def relation_for(a: NodeType, b: NodeType) -> Relation:
    return _REL_BY_TYPES[frozenset({a, b})]


def relations_of(t: NodeType) -> tuple[Relation, ...]:
    """Relations in which a node of type ``t`` takes part."""
    return tuple(r for key, r in _REL_BY_TYPES.items() if t in key)


class IndexType(str, enum.Enum):
    Q2Q = "Q2Q"
    Q2I = "Q2I"
    I2Q = "I2Q"
    I2I = "I2I"
    Q2A = "Q2A"
    I2A = "I2A"

    @property
    def key_type(self) -> NodeType:
        return _LETTER[self.value[0]]

    @property
    def candidate_type(self) -> NodeType:
        return _LETTER[self.value[2]]

    @property
    def relation(self) -> Relation:
        return relation_for(self.key_type, self.candidate_type)


_LETTER = {"Q": NodeType.QUERY, "I": NodeType.ITEM, "A": NodeType.AD}

INDEX_TYPES = tuple(IndexType)
LAYER1_INDEXES = (IndexType.Q2Q, IndexType.Q2I, IndexType.I2Q, IndexType.I2I)
LAYER2_INDEXES = (IndexType.Q2A, IndexType.I2A)

# feature fields per node type; "id" and "category" come from the record itself
FEATURE_FIELDS: dict[NodeType, tuple[str, ...]] = {
    NodeType.QUERY: ("id", "category", "terms"),
    NodeType.ITEM: ("id", "category", "title", "brand", "shop"),
    NodeType.AD: ("id", "category", "title", "bid_words", "brand", "shop"),
}
