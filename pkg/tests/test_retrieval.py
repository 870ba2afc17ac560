import numpy as np
import pytest

from conftest import random_tensor, tiny_config
from regat import counters
from regat.errors import BadMagicError, ChecksumError, TruncatedFileError
from regat.model import embed_video, init_params
from regat.retrieval import (
    EmbeddingIndex,
    Qrels,
    RankedList,
    average_precision,
    average_query_expansion,
    chamfer,
    mean_average_precision,
    rank,
    read_rankings,
    read_tasks,
    shot_rank,
    shot_similarity_matrix,
    symmetric_chamfer,
    write_rankings,
)
from regat.shots import ShotSet
from regat.training import cosine_similarity


def make_index(vectors: dict[str, np.ndarray]) -> EmbeddingIndex:
    index = EmbeddingIndex("video")
    for vid, vec in vectors.items():
        index.add_video(vid, vec)
    return index


def make_shot_set(video_id, rows) -> ShotSet:
    rows = [np.asarray(r, dtype=np.float64) for r in rows]
    boundaries = list(range(1, len(rows) + 1))
    shots = [(i, i) for i in boundaries]
    return ShotSet(video_id, boundaries, shots, rows)


# ---------------------------------------------------------------- rank


def test_rank_self_query_first():
    rng = np.random.default_rng(0)
    vecs = {f"v{i}": rng.standard_normal(4) for i in range(5)}
    index = make_index(vecs)
    ranked = rank(vecs["v3"], index, query_id="v3")
    assert ranked.items[0][0] == "v3"
    assert ranked.items[0][1] == pytest.approx(1.0)


def test_rank_orthogonal_ties_resolved_by_id():
    index = make_index({
        "b": np.array([0.0, 1.0, 0.0]),
        "a": np.array([0.0, 0.0, 1.0]),
        "c": np.array([0.0, -1.0, 0.0]),
    })
    ranked = rank(np.array([1.0, 0.0, 0.0]), index)
    assert [vid for vid, _ in ranked.items] == ["a", "b", "c"]
    assert all(score == 0.0 for _, score in ranked.items)


def test_rank_matches_brute_force():
    rng = np.random.default_rng(1)
    vecs = {f"v{i}": rng.standard_normal(6) for i in range(5)}
    query = rng.standard_normal(6)
    index = make_index(vecs)
    ranked = rank(query, index)
    brute = sorted(
        ((vid, cosine_similarity(query, vec)) for vid, vec in vecs.items()),
        key=lambda kv: (-kv[1], kv[0]),
    )
    assert [vid for vid, _ in ranked.items] == [vid for vid, _ in brute]
    for (_, a), (_, b) in zip(ranked.items, brute):
        assert a == pytest.approx(b, abs=1e-12)


def test_rank_counts_similarity_evals():
    rng = np.random.default_rng(2)
    index = make_index({f"v{i}": rng.standard_normal(3) for i in range(7)})
    counters.reset_all()
    rank(rng.standard_normal(3), index)
    assert counters.similarity_evals.value == 7
    assert counters.encoder_passes.value == 0


def test_rank_empty_index_errors():
    with pytest.raises(ValueError):
        rank(np.ones(3), EmbeddingIndex("video"))


def test_rank_order_invariant_under_positive_scaling():
    rng = np.random.default_rng(3)
    vecs = {f"v{i}": rng.standard_normal(5) for i in range(8)}
    query = rng.standard_normal(5)
    base = rank(query, make_index(vecs))
    scaled = rank(query * 7.3, make_index({k: v * 0.011 for k, v in vecs.items()}))
    assert base.video_ids == scaled.video_ids


# ---------------------------------------------------------------- chamfer


def test_shot_similarity_matrix_examples():
    u = np.array([1.0, 0.0])
    s = shot_similarity_matrix(make_shot_set("q", [u]), make_shot_set("d", [u]))
    assert s == pytest.approx(np.array([[1.0]]))
    rng = np.random.default_rng(4)
    q = make_shot_set("q", rng.standard_normal((3, 4)))
    d = make_shot_set("d", rng.standard_normal((2, 4)))
    s = shot_similarity_matrix(q, d)
    assert s.shape == (3, 2)
    for i in range(3):
        for j in range(2):
            assert s[i, j] == pytest.approx(
                cosine_similarity(q.embeddings[i], d.embeddings[j]), abs=1e-12
            )


def test_chamfer_examples():
    assert chamfer(np.array([[1.0, 0.0], [0.0, 1.0]])) == pytest.approx(1.0)
    assert chamfer(np.array([[0.5, 0.2], [0.1, 0.8]])) == pytest.approx(0.65)
    assert chamfer(np.array([[0.3, 0.9, -0.2]])) == pytest.approx(0.9)
    with pytest.raises(ValueError):
        chamfer(np.zeros((0, 2)))


def test_symmetric_chamfer_examples():
    s = np.array([[0.5, 0.2], [0.1, 0.8]])
    assert symmetric_chamfer(s) == pytest.approx(0.65)
    sym = np.array([[1.0, 0.3], [0.3, 0.7]])
    assert symmetric_chamfer(sym) == pytest.approx(chamfer(sym))
    rng = np.random.default_rng(5)
    a = rng.uniform(-1, 1, (3, 5))
    assert symmetric_chamfer(a) == symmetric_chamfer(a.T)


def test_chamfer_bounds_property():
    rng = np.random.default_rng(6)
    for _ in range(20):
        s = rng.uniform(-1, 1, (int(rng.integers(1, 6)), int(rng.integers(1, 6))))
        value = chamfer(s)
        assert s.min() - 1e-12 <= value <= s.max() + 1e-12


# ---------------------------------------------------------------- shot rank


def shot_index(sets: list[ShotSet]) -> EmbeddingIndex:
    index = EmbeddingIndex("shot")
    for ss in sets:
        index.add_shots(ss)
    return index


def test_shot_rank_self_is_first():
    rng = np.random.default_rng(7)
    sets = [make_shot_set(f"v{i}", rng.standard_normal((2, 4))) for i in range(4)]
    index = shot_index(sets)
    ranked = shot_rank(sets[1], index, "cs")
    assert ranked.items[0][0] == "v1"
    assert ranked.items[0][1] == pytest.approx(1.0)


def test_shot_rank_single_shot_reduces_to_video_rank():
    rng = np.random.default_rng(8)
    vecs = {f"v{i}": rng.standard_normal(5) for i in range(6)}
    qvec = rng.standard_normal(5)
    video_ranked = rank(qvec, make_index(vecs), query_id="q")
    sets = [make_shot_set(vid, [vec]) for vid, vec in vecs.items()]
    for agg in ("cs", "scs"):
        shot_ranked = shot_rank(make_shot_set("q", [qvec]), shot_index(sets), agg)
        assert shot_ranked.video_ids == video_ranked.video_ids


def test_shot_rank_matches_brute_force_aggregation():
    rng = np.random.default_rng(9)
    queries = [make_shot_set(f"q{i}", rng.standard_normal((int(rng.integers(1, 4)), 4)))
               for i in range(3)]
    db = [make_shot_set(f"v{i}", rng.standard_normal((int(rng.integers(1, 4)), 4)))
          for i in range(4)]
    index = shot_index(db)
    for agg in ("cs", "scs"):
        for q in queries:
            ranked = shot_rank(q, index, agg)
            brute = []
            for d in db:
                s = np.array([
                    [cosine_similarity(a, b) for b in d.embeddings]
                    for a in q.embeddings
                ])
                cs_fwd = np.mean([max(row) for row in s])
                cs_bwd = np.mean([max(col) for col in s.T])
                brute.append((d.video_id, cs_fwd if agg == "cs" else (cs_fwd + cs_bwd) / 2))
            brute.sort(key=lambda kv: (-kv[1], kv[0]))
            assert ranked.video_ids == [vid for vid, _ in brute]
            for (_, a), (_, b) in zip(ranked.items, brute):
                assert a == pytest.approx(b, abs=1e-12)


def test_shot_rank_counts_one_aggregation_per_pair():
    rng = np.random.default_rng(10)
    db = [make_shot_set(f"v{i}", rng.standard_normal((3, 4))) for i in range(5)]
    index = shot_index(db)
    counters.reset_all()
    shot_rank(make_shot_set("q", rng.standard_normal((2, 4))), index, "cs")
    assert counters.similarity_evals.value == 5


def test_shot_rank_validation():
    rng = np.random.default_rng(11)
    index = shot_index([make_shot_set("v0", rng.standard_normal((2, 3)))])
    q = make_shot_set("q", rng.standard_normal((1, 3)))
    with pytest.raises(ValueError):
        shot_rank(q, index, "median")
    with pytest.raises(ValueError):
        shot_rank(q, make_index({"a": np.ones(3)}), "cs")
    with pytest.raises(ValueError):
        shot_rank(rng.standard_normal((1, 3)), index, "cs")  # bare array needs query_id


# ---------------------------------------------------------------- QE


def test_qe_identical_neighbors_preserve_direction():
    q = np.array([1.0, 2.0, 3.0])
    index = make_index({f"v{i}": q.copy() for i in range(3)})
    expanded = average_query_expansion(q, index, k=3)
    assert np.allclose(expanded, q)


def test_qe_two_vector_mean():
    q = np.array([1.0, 0.0])
    n = np.array([0.8, 0.1])
    index = make_index({"n": n})
    expanded = average_query_expansion(q, index, k=1)
    assert np.allclose(expanded, (q + n) / 2)


def test_qe_clamps_with_warning():
    rng = np.random.default_rng(12)
    index = make_index({f"v{i}": rng.standard_normal(3) for i in range(2)})
    with pytest.warns(UserWarning):
        average_query_expansion(rng.standard_normal(3), index, k=10)
    with pytest.raises(ValueError):
        average_query_expansion(rng.standard_normal(3), index, k=0)


def test_qe_improves_clustered_retrieval():
    # On corpora whose groups cluster, expansion must not hurt the mean
    # rank of own-group members (checked across seeds).
    for seed in range(3):
        rng = np.random.default_rng(100 + seed)
        centers = rng.standard_normal((4, 8)) * 3
        vecs = {}
        owners = {}
        for g in range(4):
            for v in range(5):
                vid = f"g{g}v{v}"
                vecs[vid] = centers[g] + rng.standard_normal(8)
                owners[vid] = g
        index = make_index(vecs)

        def mean_own_group_rank(query_vec, group):
            ranked = rank(query_vec, index)
            pos = {vid: i for i, vid in enumerate(ranked.video_ids)}
            return np.mean([pos[v] for v, g in owners.items() if g == group])

        plain, expanded = [], []
        for g in range(4):
            q = centers[g] + rng.standard_normal(8)
            plain.append(mean_own_group_rank(q, g))
            expanded.append(mean_own_group_rank(average_query_expansion(q, index, k=5), g))
        assert np.mean(expanded) <= np.mean(plain) + 1e-9


# ---------------------------------------------------------------- mAP


def _qrels_single(query, labeled: dict[str, str], group=None) -> Qrels:
    labels = {query: {vid: {lab} for vid, lab in labeled.items()}}
    groups = {query: group} if group else {}
    return Qrels(labels, groups)


def test_map_all_positives_first():
    ranking = RankedList("q", [("a", 0.9), ("b", 0.8), ("c", 0.1)])
    qrels = _qrels_single("q", {"a": "pos", "b": "pos", "c": "neg"})
    result = mean_average_precision([ranking], qrels, {"pos"})
    assert result.value == pytest.approx(1.0)


def test_map_analytic_positions_1_and_3():
    ranking = RankedList("q", [("a", 0.9), ("b", 0.8), ("c", 0.7), ("d", 0.1)])
    qrels = _qrels_single("q", {"a": "pos", "c": "pos", "b": "neg", "d": "neg"})
    result = mean_average_precision([ranking], qrels, {"pos"})
    assert result.value == pytest.approx((1.0 + 2.0 / 3.0) / 2.0)


def test_map_matches_quadratic_oracle():
    rng = np.random.default_rng(13)
    for _ in range(25):
        n = int(rng.integers(2, 12))
        ids = [f"v{i}" for i in range(n)]
        scores = sorted(rng.uniform(size=n).tolist(), reverse=True)
        ranking = RankedList("q", list(zip(ids, scores)))
        labs = {vid: ("pos" if rng.random() < 0.4 else "neg") for vid in ids}
        if "pos" not in labs.values():
            labs[ids[0]] = "pos"
        relevant = {vid for vid, lab in labs.items() if lab == "pos"}

        naive = 0.0
        for p in range(1, n + 1):
            if ids[p - 1] in relevant:
                naive += sum(1 for v in ids[:p] if v in relevant) / p
        naive /= len(relevant)

        result = mean_average_precision([ranking], _qrels_single("q", labs), {"pos"})
        assert result.value == pytest.approx(naive, abs=1e-12)


def test_map_excludes_queries_without_positives():
    r1 = RankedList("q1", [("a", 0.9), ("b", 0.2)])
    r2 = RankedList("q2", [("a", 0.9), ("b", 0.2)])
    qrels = Qrels({
        "q1": {"a": {"pos"}, "b": {"neg"}},
        "q2": {"a": {"neg"}, "b": {"neg"}},
    })
    result = mean_average_precision([r1, r2], qrels, {"pos"})
    assert result.excluded == ["q2"]
    assert set(result.per_query) == {"q1"}


def test_map_unknown_ranked_id_rejected():
    ranking = RankedList("q", [("mystery", 0.5)])
    qrels = _qrels_single("q", {"a": "pos"})
    with pytest.raises(ValueError):
        mean_average_precision([ranking], qrels, {"pos"})


def test_map_removing_trailing_nonrelevant_keeps_ap():
    qrels = _qrels_single("q", {"a": "pos", "b": "pos", "c": "neg"})
    longer = RankedList("q", [("a", 0.9), ("b", 0.8), ("c", 0.1)])
    shorter = RankedList("q", [("a", 0.9), ("b", 0.8)])
    v1 = mean_average_precision([longer], qrels, {"pos"}).value
    v2 = mean_average_precision([shorter], qrels, {"pos"}).value
    assert v1 == pytest.approx(v2)


def test_map_per_group_macro():
    r1 = RankedList("q1", [("a", 0.9), ("b", 0.8)])
    r2 = RankedList("q2", [("a", 0.9), ("b", 0.8)])
    qrels = Qrels(
        {
            "q1": {"a": {"pos"}, "b": {"neg"}},
            "q2": {"a": {"neg"}, "b": {"pos"}},
        },
        query_groups={"q1": "eventA", "q2": "eventB"},
    )
    result = mean_average_precision([r1, r2], qrels, {"pos"})
    assert result.per_group == {"eventA": 1.0, "eventB": 0.5}
    assert result.value == pytest.approx(0.75)


def test_average_precision_needs_positives():
    with pytest.raises(ValueError):
        average_precision(RankedList("q", [("a", 1.0)]), set())


def test_map_in_unit_interval_property():
    rng = np.random.default_rng(14)
    for _ in range(10):
        n = int(rng.integers(2, 10))
        ids = [f"v{i}" for i in range(n)]
        scores = sorted(rng.uniform(size=n).tolist(), reverse=True)
        ranking = RankedList("q", list(zip(ids, scores)))
        labs = {vid: ("pos" if rng.random() < 0.5 else "neg") for vid in ids}
        labs[ids[-1]] = "pos"
        result = mean_average_precision([ranking], _qrels_single("q", labs), {"pos"})
        assert 0.0 <= result.value <= 1.0


# ---------------------------------------------------------------- files


def test_ranked_list_validation():
    with pytest.raises(ValueError):
        RankedList("q", [("a", 0.1), ("b", 0.5)])
    with pytest.raises(ValueError):
        RankedList("q", [("b", 0.5), ("a", 0.5)])  # tie must order by id
    RankedList("q", [("a", 0.5), ("b", 0.5), ("c", 0.1)])


def test_emb_round_trip_video_and_shot(tmp_path):
    rng = np.random.default_rng(15)
    video = make_index({f"v{i}": rng.standard_normal(4) for i in range(3)})
    vp = tmp_path / "v.emb"
    video.save(vp)
    back = EmbeddingIndex.load(vp)
    assert back.mode == "video"
    assert len(back) == len(video)
    for a, b in zip(back.entries(), video.entries()):
        assert a[0] == b[0]
        assert np.array_equal(a[1], b[1])

    shots = shot_index([
        make_shot_set("v0", rng.standard_normal((2, 4))),
        make_shot_set("v1", rng.standard_normal((3, 4))),
    ])
    sp = tmp_path / "s.emb"
    shots.save(sp)
    back = EmbeddingIndex.load(sp)
    assert back.mode == "shot"
    for a, b in zip(back.entries(), shots.entries()):
        assert a[0] == b[0] and a[1] == b[1]
        assert np.array_equal(a[2], b[2])


def test_emb_corruption_errors(tmp_path):
    rng = np.random.default_rng(16)
    index = make_index({"a": rng.standard_normal(3)})
    path = tmp_path / "e.emb"
    index.save(path)
    raw = bytearray(path.read_bytes())
    raw[-2] ^= 0x01
    path.write_bytes(bytes(raw))
    with pytest.raises(ChecksumError):
        EmbeddingIndex.load(path)
    path.write_bytes(b"NOPE" + bytes(raw)[4:])
    with pytest.raises(BadMagicError):
        EmbeddingIndex.load(path)
    index.save(path)
    path.write_bytes(path.read_bytes()[:10])
    with pytest.raises(TruncatedFileError):
        EmbeddingIndex.load(path)


def test_index_validation():
    index = EmbeddingIndex("video")
    index.add_video("a", np.ones(3))
    with pytest.raises(ValueError):
        index.add_video("a", np.ones(3))
    with pytest.raises(Exception):
        index.add_video("b", np.ones(4))
    with pytest.raises(ValueError):
        EmbeddingIndex("frame")


def test_rankings_tsv_round_trip(tmp_path):
    rankings = [
        RankedList("q1", [("a", 0.75), ("b", 0.25)]),
        RankedList("q2", [("b", 1.0), ("a", -0.5)]),
    ]
    path = tmp_path / "r.tsv"
    write_rankings(rankings, path)
    back = read_rankings(path)
    assert [r.query_id for r in back] == ["q1", "q2"]
    assert back[0].items == [("a", 0.75), ("b", 0.25)]
    assert back[1].items[1] == ("a", -0.5)


def test_qrels_and_tasks_round_trip(tmp_path):
    qrels = Qrels(
        {"q": {"a": {"nd", "ds"}, "b": {"is"}}},
        query_groups={"q": "flood"},
    )
    qp = tmp_path / "q.tsv"
    qrels.save(qp)
    back = Qrels.read(qp)
    assert back.labels == qrels.labels
    assert back.query_groups == qrels.query_groups
    assert back.universe == {"a", "b"}

    (tmp_path / "tasks.tsv").write_text("dsvr\tnd,ds\nisvr\tnd,ds,cs,is\n")
    tasks = read_tasks(tmp_path / "tasks.tsv")
    assert tasks == {"dsvr": {"nd", "ds"}, "isvr": {"nd", "ds", "cs", "is"}}
    assert back.positives("q", tasks["dsvr"]) == {"a"}
    assert back.positives("q", {"is"}) == {"b"}


def test_embedding_scale_invariance_end_to_end():
    # ranking order is unchanged when all encoder outputs are scaled by c > 0
    rng = np.random.default_rng(17)
    params = init_params(tiny_config(in_dim=3), seed=18)
    tensors = [random_tensor(rng, 4, 2, 3, f"v{i}") for i in range(5)]
    embs = {t.video_id: embed_video(params, t) for t in tensors}
    query = embs["v0"]
    base = rank(query, make_index(embs))
    scaled = rank(query * 3.7, make_index({k: v * 11.0 for k, v in embs.items()}))
    assert base.video_ids == scaled.video_ids
