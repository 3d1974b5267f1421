import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from fixtures import random_store
from mixcurv.graph import HeteroGraph, NodeRecord
from mixcurv.index import (
    DEFAULT_K,
    EmbeddingStore,
    IndexFormatError,
    InvertedIndex,
    build_all_indices,
    build_index,
    index_lines,
    knn_exact,
    load_index,
    load_indices,
    precompute_store,
    save_index,
    save_indices,
)
from mixcurv.model import MixedCurvatureModel, ModelConfig
from mixcurv.types import INDEX_TYPES, IndexType, NodeType, Relation


def oracle_top(store, key, itype, K):
    r = itype.relation
    kp, kw = store.vectors(key, r)
    ct = itype.candidate_type
    exclude = store.row[ct][key] if itype.key_type is ct else None
    rows, total = oracles.brute_force_knn(kp, kw, store.proj[(ct, r)], store.weights[(ct, r)],
                                          store.edge_kappas[r], K, exclude)
    return [store.ids[ct][j] for j in rows], total


@pytest.fixture(scope="module")
def store():
    return random_store(counts=(120, 100, 60), seed=5)


@pytest.mark.parametrize("itype", INDEX_TYPES, ids=[t.value for t in INDEX_TYPES])
def test_matches_brute_force(store, itype):
    idx = build_index(store, itype, K=15)
    for key in store.ids[itype.key_type]:
        expect, total = oracle_top(store, key, itype, 15)
        got = [n for n, _ in idx.entries[key]]
        assert set(got) == set(expect), key
        # order must agree wherever neighbouring distances are separable
        ct = itype.candidate_type
        d = [float(total[store.row[ct][n]]) for n in expect]
        for i in range(len(d) - 1):
            if d[i + 1] - d[i] > 1e-12:
                assert got.index(expect[i]) < got.index(expect[i + 1])


def test_entry_invariants(store):
    for itype, idx in build_all_indices(store, {t: 20 for t in INDEX_TYPES}).items():
        assert len(idx) == len(store.ids[itype.key_type])
        for key, nbrs in idx.entries.items():
            ids = [n for n, _ in nbrs]
            scores = [s for _, s in nbrs]
            assert len(ids) == len(set(ids)) <= 20
            assert all(a >= b for a, b in zip(scores, scores[1:]))
            assert all(0 < s < 1 for s in scores)
            assert key not in ids


def test_distance_order_equals_similarity_order(store):
    for key in store.ids[NodeType.QUERY][:20]:
        res = knn_exact(store, key, IndexType.Q2A, 30, with_distance=True)
        dists = [d for _, _, d in res]
        assert dists == sorted(dists)


def test_k_beyond_pool_returns_everything_sorted(store):
    res = knn_exact(store, "q00000", IndexType.Q2A, 10_000, with_distance=True)
    assert len(res) == len(store.ids[NodeType.AD])
    assert [d for *_, d in res] == sorted(d for *_, d in res)


def test_unknown_key(store):
    with pytest.raises(KeyError):
        knn_exact(store, "nope", IndexType.Q2I, 5)
    with pytest.raises(KeyError):
        knn_exact(store, "i00000", IndexType.Q2I, 5)


def test_flat_single_space_is_euclidean_ranking():
    zero = {r: [0.0] for r in Relation}
    st_ = random_store(counts=(30, 40, 0), M=1, d=4, seed=2, kappas=zero)
    q = st_.proj[(NodeType.QUERY, Relation.QI)][0, 0]
    items = st_.proj[(NodeType.ITEM, Relation.QI)][:, 0]
    order = sorted(range(len(items)), key=lambda j: (np.linalg.norm(items[j] - q), j))
    got = [n for n, _ in knn_exact(st_, "q00000", IndexType.Q2I, 40)]
    assert got == [st_.ids[NodeType.ITEM][j] for j in order]


def test_ties_break_by_candidate_id():
    zero = {r: [0.0] for r in Relation}
    st_ = random_store(counts=(2, 5, 0), M=1, d=2, seed=0, kappas=zero)
    st_.proj[(NodeType.ITEM, Relation.QI)][:] = 0.1
    got = [n for n, _ in knn_exact(st_, "q00000", IndexType.Q2I, 3)]
    assert got == ["i00000", "i00001", "i00002"]


def test_same_category_filter(store):
    idx = build_index(store, IndexType.I2I, K=10, same_category=True)
    for key, nbrs in idx.entries.items():
        assert all(store.categories[n] == store.categories[key] for n, _ in nbrs)


def test_single_key():
    st_ = random_store(counts=(1, 4, 3), seed=1)
    idx = build_index(st_, IndexType.Q2A)
    assert list(idx.entries) == ["q00000"] and len(idx.entries["q00000"]) == 3
    assert build_index(st_, IndexType.Q2Q).entries == {"q00000": []}


def test_worker_count_does_not_change_output():
    st_ = random_store(counts=(200, 200, 100), seed=9)
    for itype in INDEX_TYPES:
        one = index_lines(build_index(st_, itype, K=10, workers=1))
        eight = index_lines(build_index(st_, itype, K=10, workers=8))
        assert one == eight


def test_default_k():
    assert DEFAULT_K[IndexType.Q2Q] == 50 and DEFAULT_K[IndexType.I2A] == 200


class TestStore:
    def test_empty_graph(self):
        model = MixedCurvatureModel(ModelConfig(M=2, d=4, buckets=16))
        store = precompute_store(model, HeteroGraph({}, []))
        assert len(store) == 0
        assert all(len(idx) == 0 for idx in build_all_indices(store).values())

    def test_single_query(self):
        g = HeteroGraph({"q": NodeRecord("q", NodeType.QUERY, "c", {"terms": ("x",)})}, [])
        store = precompute_store(MixedCurvatureModel(ModelConfig(M=2, d=4, buckets=16)), g)
        assert {r for (t, r) in store.proj if t is NodeType.QUERY} == {Relation.Q2Q, Relation.QI, Relation.Q2A}
        for r in (Relation.Q2Q, Relation.QI, Relation.Q2A):
            _, w = store.vectors("q", r)
            assert w.sum() == pytest.approx(1.0, abs=1e-12)

    def test_single_subspace_weights_are_one(self, toy_graph):
        store = precompute_store(MixedCurvatureModel(ModelConfig(M=1, d=4, buckets=64)), toy_graph)
        for w in store.weights.values():
            assert np.all(w == 1.0)

    def test_deterministic(self, toy_graph):
        model = MixedCurvatureModel(ModelConfig(M=2, d=4, buckets=64))
        a, b = precompute_store(model, toy_graph), precompute_store(model, toy_graph)
        for k in a.proj:
            assert np.array_equal(a.proj[k], b.proj[k]) and np.array_equal(a.weights[k], b.weights[k])

    def test_save_load(self, store, tmp_path):
        store.save(tmp_path / "s")
        back = EmbeddingStore.load(tmp_path / "s")
        assert back.ids == store.ids and back.categories == store.categories
        assert back.edge_kappas == store.edge_kappas
        assert back.proj.keys() == store.proj.keys()
        for k in store.proj:
            assert np.array_equal(back.proj[k], store.proj[k])
            assert np.array_equal(back.weights[k], store.weights[k])

    def test_truncated_block(self, store, tmp_path):
        store.save(tmp_path / "s")
        victim = next((tmp_path / "s").glob("*.proj.f64"))
        victim.write_bytes(victim.read_bytes()[:-8])
        with pytest.raises(IndexFormatError):
            EmbeddingStore.load(tmp_path / "s")


class TestFiles:
    def test_round_trip(self, store, tmp_path):
        indices = build_all_indices(store, {t: 7 for t in INDEX_TYPES})
        save_indices(indices, tmp_path)
        back = load_indices(tmp_path)
        assert back.keys() == indices.keys()
        for t in indices:
            assert back[t].entries == indices[t].entries and back[t].K == 7

    def test_empty_index_is_header_only(self, tmp_path):
        save_index(InvertedIndex(IndexType.Q2A, 5), tmp_path / "e.ndjson")
        lines = (tmp_path / "e.ndjson").read_text().splitlines()
        assert lines == [json.dumps({"type": "Q2A", "K": 5, "count": 0})]
        assert load_index(tmp_path / "e.ndjson").entries == {}

    def test_line_count(self, tmp_path):
        idx = InvertedIndex(IndexType.I2I, 3, {f"i{j}": [("x", 0.5)] for j in range(100)})
        save_index(idx, tmp_path / "h.ndjson")
        assert len((tmp_path / "h.ndjson").read_text().splitlines()) == 101

    def test_bad_line_number(self, tmp_path):
        idx = InvertedIndex(IndexType.I2I, 3, {f"i{j}": [("x", 0.5)] for j in range(5)})
        save_index(idx, tmp_path / "h.ndjson")
        lines = (tmp_path / "h.ndjson").read_text().splitlines()
        lines[3] = '{"key": "i2", "nbrs": [[oops'
        (tmp_path / "h.ndjson").write_text("\n".join(lines) + "\n")
        with pytest.raises(IndexFormatError) as exc:
            load_index(tmp_path / "h.ndjson")
        assert exc.value.line == 4

    def test_count_mismatch(self, tmp_path):
        (tmp_path / "h.ndjson").write_text('{"type": "Q2Q", "K": 2, "count": 3}\n{"key": "q", "nbrs": []}\n')
        with pytest.raises(IndexFormatError):
            load_index(tmp_path / "h.ndjson")

    @given(st.lists(st.floats(0, 1, allow_subnormal=True), min_size=1, max_size=10))
    @settings(max_examples=50)
    def test_scores_survive_text_exactly(self, scores):
        idx = InvertedIndex(IndexType.Q2I, 10, {"q": [(f"i{j}", s) for j, s in enumerate(scores)]})
        lines = index_lines(idx)
        back = {json.loads(ln)["key"]: json.loads(ln)["nbrs"] for ln in lines[1:]}
        assert [s for _, s in back["q"]] == scores
