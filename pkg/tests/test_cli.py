import subprocess
import sys

import numpy as np
import pytest

from regat.cli import build_parser, main
from regat.features import CorpusManifest, RegionFeatureTensor, write_features
from regat.model import load_params
from regat.retrieval import EmbeddingIndex


def run_cli(args):
    return main(list(args))


def make_corpus(path, groups=2, per_group=2, seed=3):
    code = run_cli([
        "synth", "--out", str(path), "--groups", str(groups),
        "--per-group", str(per_group), "--frames-min", "4", "--frames-max", "6",
        "--regions", "2", "--channels", "3", "--seed", str(seed),
    ])
    assert code == 0
    return path / "manifest.tsv"


def train_fast(corpus, out, extra=()):
    code = run_cli([
        "train", "--corpus", str(corpus), "--out", str(out),
        "--epochs", "1", "--mid-dim", "2", "--layers", "1", "--embed-dim", "4",
        "--triplets-per-pool", "2", "--pools", "1", "--lr", "1e-3", "--seed", "0",
        *extra,
    ])
    assert code == 0
    return out


def test_synth_count_contract(tmp_path):
    run_cli(["synth", "--out", str(tmp_path / "c"), "--groups", "8",
             "--per-group", "4", "--seed", "7", "--frames-min", "3",
             "--frames-max", "4", "--regions", "1", "--channels", "2"])
    files = sorted((tmp_path / "c").glob("*.rmf"))
    assert len(files) == 32
    manifest = CorpusManifest.read(tmp_path / "c" / "manifest.tsv")
    assert len(manifest.entries) == 32


def test_synth_deterministic_bytes(tmp_path):
    args = ["--groups", "2", "--per-group", "2", "--seed", "5",
            "--frames-min", "3", "--frames-max", "5", "--regions", "2",
            "--channels", "3"]
    run_cli(["synth", "--out", str(tmp_path / "a"), *args])
    run_cli(["synth", "--out", str(tmp_path / "b"), *args])
    for fa in sorted((tmp_path / "a").iterdir()):
        assert fa.read_bytes() == (tmp_path / "b" / fa.name).read_bytes()


def test_synth_usage_errors(tmp_path):
    with pytest.raises(SystemExit) as exc:
        run_cli(["synth", "--out", str(tmp_path), "--groups", "0"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        run_cli(["synth", "--out", str(tmp_path), "--frames-min", "9", "--frames-max", "3"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        run_cli(["synth", "--out", str(tmp_path), "--bogus-flag", "1"])
    assert exc.value.code == 2


def test_train_produces_loadable_model(tmp_path):
    manifest = make_corpus(tmp_path / "c")
    model = train_fast(manifest, tmp_path / "model.bin")
    params = load_params(model)
    assert params.config.mid_dim == 2
    assert (tmp_path / "model.loss.csv").exists()


def test_train_validation(tmp_path):
    manifest = make_corpus(tmp_path / "c")
    with pytest.raises(SystemExit) as exc:
        run_cli(["train", "--corpus", str(manifest), "--out", str(tmp_path / "m"),
                 "--margin", "-1"])
    assert exc.value.code == 2


def test_training_defaults_match_reference_settings():
    parser, _ = build_parser()
    args = parser.parse_args(["train", "--corpus", "x", "--out", "y"])
    assert args.margin == 0.2
    assert args.lr == 3e-7
    assert args.layers == 3
    assert args.mid_dim == 512
    assert args.embed_dim == 4096
    assert args.max_clip == 64
    assert args.epochs == 120
    assert args.pools == 2
    assert args.triplets_per_pool == 1000
    seg = parser.parse_args(["segment", "--model", "m", "--corpus", "c", "--out", "o"])
    assert seg.tau == 0.75


def test_embed_round_trip_bits(tmp_path):
    manifest = make_corpus(tmp_path / "c")
    model = train_fast(manifest, tmp_path / "model.bin")
    emb_path = tmp_path / "v.emb"
    assert run_cli(["embed", "--model", str(model), "--corpus", str(manifest),
                    "--out", str(emb_path), "--threads", "2"]) == 0
    index = EmbeddingIndex.load(emb_path)
    assert len(index) == 4

    from regat.model import embed_video

    params = load_params(model)
    corpus = CorpusManifest.read(manifest)
    for vid, vec in [(e[0], e[1]) for e in index.entries()]:
        assert np.array_equal(vec, embed_video(params, corpus.load(vid)))


def test_segment_degenerate_tau_matches_video_level(tmp_path):
    manifest = make_corpus(tmp_path / "c")
    model = train_fast(manifest, tmp_path / "model.bin")
    video_emb = tmp_path / "v.emb"
    shot_emb = tmp_path / "s.emb"
    run_cli(["embed", "--model", str(model), "--corpus", str(manifest), "--out", str(video_emb)])
    run_cli(["segment", "--model", str(model), "--corpus", str(manifest),
             "--out", str(shot_emb), "--tau=-1", "--shot-manifest",
             str(tmp_path / "shots.tsv")])
    video = EmbeddingIndex.load(video_emb)
    shots = EmbeddingIndex.load(shot_emb)
    assert len(shots) == len(video) == 4  # exactly one shot per video
    video_vecs = {e[0]: e[1] for e in video.entries()}
    for vid, shot_idx, vec in shots.entries():
        assert shot_idx == 0
        assert np.array_equal(vec, video_vecs[vid])
    lines = (tmp_path / "shots.tsv").read_text().splitlines()
    assert len(lines) == 4


def test_segment_two_scene_video_two_records(tmp_path):
    corpus_dir = tmp_path / "c"
    corpus_dir.mkdir()
    u = np.zeros((2, 1, 3), dtype=np.float32)
    w = np.zeros((2, 1, 3), dtype=np.float32)
    u[:, 0, 0] = 1.0
    w[:, 0, 1] = 1.0
    write_features(RegionFeatureTensor("two", np.concatenate([u, w])), corpus_dir / "two.rmf")
    (corpus_dir / "manifest.tsv").write_text("two\ttwo.rmf\tg0\n")
    # model trained elsewhere: reuse a fast model with 3 channels
    other = make_corpus(tmp_path / "train")
    model = train_fast(other, tmp_path / "model.bin")
    shot_emb = tmp_path / "s.emb"
    run_cli(["segment", "--model", str(model), "--corpus", str(corpus_dir / "manifest.tsv"),
             "--out", str(shot_emb), "--tau", "0.75"])
    assert len(EmbeddingIndex.load(shot_emb)) == 2


def test_query_self_retrieval_and_eval(tmp_path, capsys):
    manifest = make_corpus(tmp_path / "c", groups=2, per_group=2)
    model = train_fast(manifest, tmp_path / "model.bin")
    emb = tmp_path / "v.emb"
    run_cli(["embed", "--model", str(model), "--corpus", str(manifest), "--out", str(emb)])
    rankings = tmp_path / "r.tsv"
    run_cli(["query", "--index", str(emb), "--queries", str(emb), "--out", str(rankings)])
    for line in rankings.read_text().splitlines():
        qid, pos, vid, score = line.split("\t")
        if pos == "1":
            assert vid == qid
            assert float(score) == pytest.approx(1.0)
    # results are independent of thread count
    threaded = tmp_path / "r2.tsv"
    run_cli(["query", "--index", str(emb), "--queries", str(emb),
             "--out", str(threaded), "--threads", "4"])
    assert threaded.read_bytes() == rankings.read_bytes()


def test_query_stdout_and_granularity_mismatch(tmp_path, capsys):
    manifest = make_corpus(tmp_path / "c")
    model = train_fast(manifest, tmp_path / "model.bin")
    vemb, semb = tmp_path / "v.emb", tmp_path / "s.emb"
    run_cli(["embed", "--model", str(model), "--corpus", str(manifest), "--out", str(vemb)])
    run_cli(["segment", "--model", str(model), "--corpus", str(manifest),
             "--out", str(semb), "--tau", "0.75"])
    assert run_cli(["query", "--index", str(vemb), "--queries", str(semb)]) == 1
    capsys.readouterr()
    assert run_cli(["query", "--index", str(vemb), "--queries", str(vemb)]) == 0
    out = capsys.readouterr().out
    assert len(out.splitlines()) == 16  # 4 queries x 4 candidates
    with pytest.raises(SystemExit) as exc:
        run_cli(["query", "--index", str(semb), "--queries", str(semb), "--qe", "2"])
    assert exc.value.code == 2


def test_eval_analytic_map(tmp_path, capsys):
    rankings = tmp_path / "r.tsv"
    rankings.write_text(
        "q\t1\ta\t0.9\nq\t2\tb\t0.8\nq\t3\tc\t0.7\nq\t4\td\t0.1\n"
    )
    qrels = tmp_path / "q.tsv"
    qrels.write_text("q\ta\tpos\nq\tb\tneg\nq\tc\tpos\nq\td\tneg\n")
    tasks = tmp_path / "t.tsv"
    tasks.write_text("all\tpos\n")
    assert run_cli(["eval", "--rankings", str(rankings), "--qrels", str(qrels),
                    "--tasks", str(tasks), "--task", "all"]) == 0
    out = capsys.readouterr().out
    assert "mAP\t0.8333" in out
    assert "AP\tq\t0.8333" in out
    # commands never mutate their inputs
    assert qrels.read_text() == "q\ta\tpos\nq\tb\tneg\nq\tc\tpos\nq\td\tneg\n"
    assert len(rankings.read_text().splitlines()) == 4
    assert run_cli(["eval", "--rankings", str(rankings), "--qrels", str(qrels),
                    "--tasks", str(tasks), "--task", "nope"]) == 1


def test_scs_scores_symmetric_between_roles(tmp_path):
    # two corpora of scene-structured videos; swapping query/db roles under
    # SCS must yield identical pairwise scores
    rng = np.random.default_rng(9)

    def scene_video(vid, seed):
        r = np.random.default_rng(seed)
        scenes = [r.standard_normal((1, 2, 3)) + 0.02 * r.standard_normal((4, 2, 3))
                  for _ in range(2)]
        return RegionFeatureTensor(vid, np.concatenate(scenes).astype(np.float32))

    for name, seeds in (("A", (1, 2)), ("B", (3, 4))):
        d = tmp_path / name
        d.mkdir()
        lines = []
        for i, s in enumerate(seeds):
            vid = f"{name.lower()}{i}"
            write_features(scene_video(vid, s), d / f"{vid}.rmf")
            lines.append(f"{vid}\t{vid}.rmf\tg{i}")
        (d / "manifest.tsv").write_text("\n".join(lines) + "\n")

    other = make_corpus(tmp_path / "train")
    model = train_fast(other, tmp_path / "model.bin")
    embA, embB = tmp_path / "A.emb", tmp_path / "B.emb"
    run_cli(["segment", "--model", str(model), "--corpus", str(tmp_path / "A"),
             "--out", str(embA), "--tau", "0.75"])
    run_cli(["segment", "--model", str(model), "--corpus", str(tmp_path / "B"),
             "--out", str(embB), "--tau", "0.75"])

    r_ab, r_ba = tmp_path / "ab.tsv", tmp_path / "ba.tsv"
    run_cli(["query", "--index", str(embB), "--queries", str(embA),
             "--aggregation", "scs", "--out", str(r_ab)])
    run_cli(["query", "--index", str(embA), "--queries", str(embB),
             "--aggregation", "scs", "--out", str(r_ba)])

    def scores(path):
        out = {}
        for line in path.read_text().splitlines():
            q, _, v, s = line.split("\t")
            out[(q, v)] = float(s)
        return out

    ab, ba = scores(r_ab), scores(r_ba)
    for (q, v), s in ab.items():
        assert s == pytest.approx(ba[(v, q)], abs=1e-12)


def test_config_file_defaults_and_precedence(tmp_path):
    corpus = make_corpus(tmp_path / "c")
    cfg = tmp_path / "train.cfg"
    cfg.write_text("epochs=1\nmid-dim=2\nlayers=1\nembed-dim=4\n"
                   "triplets-per-pool=2\npools=1\nlr=1e-3\n")
    out = tmp_path / "m1.bin"
    assert run_cli(["train", "--config", str(cfg), "--corpus", str(corpus),
                    "--out", str(out)]) == 0
    assert load_params(out).config.mid_dim == 2
    # explicit flag beats the config file
    out2 = tmp_path / "m2.bin"
    assert run_cli(["train", "--config", str(cfg), "--corpus", str(corpus),
                    "--out", str(out2), "--mid-dim", "3"]) == 0
    assert load_params(out2).config.mid_dim == 3
    bad = tmp_path / "bad.cfg"
    bad.write_text("not-a-key=1\n")
    with pytest.raises(SystemExit) as exc:
        run_cli(["train", "--config", str(bad), "--corpus", str(corpus),
                 "--out", str(tmp_path / "m3.bin")])
    assert exc.value.code == 2


def test_missing_model_is_runtime_error(tmp_path):
    manifest = make_corpus(tmp_path / "c")
    assert run_cli(["embed", "--model", str(tmp_path / "nope.bin"),
                    "--corpus", str(manifest), "--out", str(tmp_path / "x.emb")]) == 1


def test_selfcheck_passes_and_corrupt_hook_fails(tmp_path, capsys, monkeypatch):
    import time

    monkeypatch.delenv("REGAT_SELFCHECK_CORRUPT", raising=False)
    started = time.perf_counter()
    assert run_cli(["selfcheck"]) == 0
    assert time.perf_counter() - started < 60.0
    out = capsys.readouterr().out
    assert out.count("ok ") >= 4
    monkeypatch.setenv("REGAT_SELFCHECK_CORRUPT", "1")
    assert run_cli(["selfcheck"]) == 1


def test_console_script_help():
    result = subprocess.run(
        [sys.executable, "-m", "regat.cli", "--help"],
        capture_output=True, text=True,
    )
    assert result.returncode == 0
    assert "synth" in result.stdout and "selfcheck" in result.stdout


def test_pooling_dump_via_cli(tmp_path):
    manifest = make_corpus(tmp_path / "c")
    model = train_fast(manifest, tmp_path / "model.bin")
    dump = tmp_path / "beta.tsv"
    run_cli(["embed", "--model", str(model), "--corpus", str(manifest),
             "--out", str(tmp_path / "v.emb"), "--dump-pooling", str(dump)])
    lines = dump.read_text().splitlines()
    assert lines
    by_video = {}
    for line in lines:
        vid, node, frame, beta = line.split("\t")
        by_video.setdefault(vid, 0.0)
        by_video[vid] += float(beta)
    for vid, total in by_video.items():
        assert total == pytest.approx(1.0, abs=1e-9)
