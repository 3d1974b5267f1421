import json
import socket

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mixcurv.index import InvertedIndex
from mixcurv.retrieval import (
    Key,
    Request,
    RequestError,
    RetrievalConfig,
    expand_layer1,
    handle_line,
    known_ids,
    retrieve,
    retrieve_layer2,
    serve,
)
from mixcurv.types import IndexType as IT
from mixcurv.types import NodeType as T


def make(**entries):
    return {IT(name): InvertedIndex(IT(name), 50, dict(e)) for name, e in entries.items()}


def fixture_indices():
    return make(
        Q2Q={"q": [("q2", 0.9), ("q3", 0.4)]},
        Q2I={"q": [("i1", 0.7)]},
        I2Q={"p": [("q2", 0.6)]},
        I2I={"p": [("i1", 0.8)]},
        Q2A={"q": [("a1", 0.8)], "q2": [("a2", 0.5), ("a1", 0.3)]},
        I2A={"i1": [("a2", 0.75)], "p": [("a3", 0.2)]},
    )


class TestLayer1:
    def test_identity_key_only(self):
        assert expand_layer1(Request("q"), {}) == {"q": Key("q", T.QUERY, 1.0)}

    def test_one_hop(self):
        keys = expand_layer1(Request("q"), make(Q2Q={"q": [("q2", 0.9)]}))
        assert keys == {"q": Key("q", T.QUERY, 1.0), "q2": Key("q2", T.QUERY, 0.9)}

    def test_max_merge(self):
        idx = make(Q2Q={"q": [("q2", 0.7)]}, I2Q={"p": [("q2", 0.9)]})
        keys = expand_layer1(Request("q", ("p",)), idx)
        assert keys["q2"].score == 0.9

    def test_budget_truncates(self):
        cfg = RetrievalConfig(layer1_budget={IT.Q2Q: 1, IT.Q2I: 1, IT.I2Q: 1, IT.I2I: 1})
        keys = expand_layer1(Request("q"), fixture_indices(), cfg)
        assert set(keys) == {"q", "q2", "i1"}


class TestLayer2:
    def test_single_hop(self):
        out = retrieve_layer2({"q": Key("q", T.QUERY, 1.0)}, make(Q2A={"q": [("a1", 0.8)]}))
        assert [(c.ad_id, c.score) for c in out] == [("a1", 0.8)]

    def test_same_ad_two_keys(self):
        idx = make(Q2A={"q": [("a", 0.5)]}, I2A={"i": [("a", 0.6)]})
        out = retrieve_layer2({"q": Key("q", T.QUERY, 1.0), "i": Key("i", T.ITEM, 1.0)}, idx)
        assert len(out) == 1 and out[0].score == 0.6 and len(out[0].provenance) == 2

    def test_no_entries(self):
        assert retrieve_layer2({"q": Key("q", T.QUERY, 1.0)}, make(Q2A={})) == []

    def test_product_of_path_and_hop(self):
        out = retrieve_layer2({"q2": Key("q2", T.QUERY, 0.9)}, make(Q2A={"q2": [("a", 0.5)]}))
        assert out[0].score == pytest.approx(0.45)

    def test_sum_switch(self):
        cfg = RetrievalConfig(combine="sum")
        out = retrieve_layer2({"q2": Key("q2", T.QUERY, 0.9)}, make(Q2A={"q2": [("a", 0.5)]}), cfg)
        assert out[0].score == pytest.approx(1.4)


class TestRetrieve:
    def test_hand_trace(self):
        out = retrieve(Request("q", ("p",)), fixture_indices())
        # a1: q->a1 0.8 ; a2: q->i1 (0.8 via p) ->a2 0.75 = 0.6 ; a3: p->a3 0.2
        assert [(c.ad_id, round(c.score, 12)) for c in out] == [("a1", 0.8), ("a2", 0.6), ("a3", 0.2)]

    def test_obvious_path_first(self):
        idx = make(Q2A={"q": [("a1", 0.99)], "q2": [("a2", 0.4)]}, Q2Q={"q": [("q2", 0.5)]})
        assert retrieve(Request("q"), idx)[0].ad_id == "a1"

    def test_truncates_to_k_with_ties_by_id(self):
        idx = make(Q2A={"q": [("b", 0.5), ("a", 0.5), ("c", 0.5)]})
        assert [c.ad_id for c in retrieve(Request("q", k=2), idx)] == ["a", "b"]

    def test_provenance_chains(self):
        out = {c.ad_id: c for c in retrieve(Request("q", ("p",)), fixture_indices())}
        chains = [chain for chain, _ in out["a2"].provenance]
        assert ((("request", "q"), ("Q2I", "i1"), ("I2A", "a2"))) in chains
        assert ((("request", "p"), ("I2I", "i1"), ("I2A", "a2"))) in chains
        assert all(c.provenance for c in out.values())

    def test_deterministic(self):
        a = [c.to_json(True) for c in retrieve(Request("q", ("p",)), fixture_indices())]
        b = [c.to_json(True) for c in retrieve(Request("q", ("p",)), fixture_indices())]
        assert a == b

    def test_raw_query_top_ad_survives(self):
        out = retrieve(Request("q", k=100), fixture_indices())
        assert "a1" in [c.ad_id for c in out]

    @given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 3))
    @settings(max_examples=40)
    def test_bigger_budget_never_drops_an_ad(self, b1, extra, b2):
        layer1 = (IT.Q2Q, IT.Q2I, IT.I2Q, IT.I2I)
        small = RetrievalConfig(layer1_budget={t: b1 for t in layer1}, layer2_budget=b2)
        big = RetrievalConfig(layer1_budget={t: b1 + extra for t in layer1}, layer2_budget=b2 + extra)
        req = Request("q", ("p",), k=100)
        before = retrieve(req, fixture_indices(), small)
        after = {c.ad_id: c.score for c in retrieve(req, fixture_indices(), big)}
        for c in before:
            assert after[c.ad_id] >= c.score


class TestRequests:
    @pytest.mark.parametrize("k", [0, -1, 1.5, True])
    def test_bad_k(self, k):
        with pytest.raises(RequestError):
            Request("q", (), k)

    def test_from_json(self):
        assert Request.from_json({"query_id": "q", "preclick": ["i"], "k": 3}) == Request("q", ("i",), 3)
        with pytest.raises(RequestError):
            Request.from_json({"preclick": []})
        with pytest.raises(RequestError):
            Request.from_json({"query_id": "q", "preclick": "i"})

    def test_known_ids(self):
        assert {"q", "q2", "a1", "p", "i1"} <= known_ids(fixture_indices())

    def test_handle_line_shapes(self):
        idx = fixture_indices()
        known = known_ids(idx)
        ok = handle_line('{"query_id": "q", "preclick": ["zz"], "k": 2}', idx, RetrievalConfig(), known)
        assert set(ok) == {"ads", "warnings", "latency_us"}
        assert [a["id"] for a in ok["ads"]] == ["a1", "a2"]
        assert ok["warnings"] and "zz" in ok["warnings"][0]
        assert handle_line("{nope", idx, RetrievalConfig(), known)["error"] == "parse"
        assert handle_line('{"query_id": "q", "k": 0}', idx, RetrievalConfig(), known)["error"] == "request"
        assert handle_line("[1, 2]", idx, RetrievalConfig(), known)["error"] == "request"


def test_server_protocol():
    srv = serve(fixture_indices(), port=0, background=True)
    try:
        with socket.create_connection(srv.server_address[:2], timeout=5) as sock:
            fh = sock.makefile("rwb")
            lines = ['{"query_id": "q", "preclick": ["p"], "k": 5}', "{broken", '{"query_id": "q", "k": 0}',
                     '{"query_id": "q"}']
            for ln in lines:
                fh.write((ln + "\n").encode())
            fh.flush()
            replies = [json.loads(fh.readline()) for _ in lines]
        assert [a["id"] for a in replies[0]["ads"]] == ["a1", "a2", "a3"]
        assert replies[1]["error"] == "parse"
        assert replies[2]["error"] == "request"
        strip = lambda r: {k: v for k, v in r.items() if k != "latency_us"}
        assert strip(replies[3]) == strip(handle_line('{"query_id": "q"}', srv.indices, srv.cfg, srv.known))
        assert len(srv.latencies) == 2
    finally:
        srv.shutdown()
        srv.server_close()


def test_bind_failure():
    srv = serve({}, port=0, background=True)
    try:
        with pytest.raises(RuntimeError):
            serve({}, port=srv.server_address[1], background=True)
    finally:
        srv.shutdown()
        srv.server_close()
