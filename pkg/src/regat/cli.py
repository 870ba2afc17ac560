"""Command-line pipeline: synthesize, train, embed, segment, query, evaluate.

Layout rules: logs go to stderr, data to files or stdout, so commands
compose in shell pipelines. Exit codes: 0 success, 2 usage error, 1
runtime failure. Every command is deterministic given --seed. A config
file of ``key=value`` lines (--config) supplies defaults; explicit flags
win.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from .errors import FileFormatError
from .features import CorpusManifest, synth_corpus, synth_scene_corpus
from .model import (
    ModelConfig,
    embed_video,
    load_params,
    save_params,
    write_pooling_diagnostics,
)
from .retrieval import (
    EmbeddingIndex,
    Qrels,
    average_query_expansion,
    mean_average_precision,
    rank,
    read_rankings,
    read_tasks,
    shot_rank,
    write_rankings,
)
from .selfcheck import run_selfcheck
from .shots import DEFAULT_TAU, embed_shots, write_shot_manifest
from .training import TrainConfig, train, write_loss_history


def _log(message: str) -> None:
    print(message, file=sys.stderr)


def _load_manifest(path_arg: str) -> CorpusManifest:
    path = Path(path_arg)
    if path.is_dir():
        path = path / "manifest.tsv"
    return CorpusManifest.read(path)


def _positive(parser, value, flag):
    if value < 1:
        parser.error(f"{flag} must be >= 1")
    return value


def _thread_map(fn, items, threads: int):
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def cmd_synth(args, parser) -> int:
    _positive(parser, args.groups, "--groups")
    _positive(parser, args.per_group, "--per-group")
    if args.noise < 0:
        parser.error("--noise must be >= 0")
    if args.scene_composite:
        db, queries, qrels = synth_scene_corpus(
            args.out,
            n_groups=args.groups,
            videos_per_group=args.per_group,
            scene_len=args.scene_len,
            n_regions=args.regions,
            n_channels=args.channels,
            jitter=args.noise if args.noise > 0 else 0.1,
            seed=args.seed,
        )
        _log(
            f"wrote {len(db.entries)} database and {len(queries.entries)} query videos "
            f"to {args.out} (qrels: {qrels})"
        )
    else:
        if args.frames_min > args.frames_max or args.frames_min < 1:
            parser.error("--frames-min/--frames-max must satisfy 1 <= min <= max")
        manifest = synth_corpus(
            args.out,
            n_groups=args.groups,
            videos_per_group=args.per_group,
            frames_range=(args.frames_min, args.frames_max),
            n_regions=args.regions,
            n_channels=args.channels,
            noise_scale=args.noise,
            seed=args.seed,
            subsample_prob=args.subsample_prob,
        )
        _log(f"wrote {len(manifest.entries)} videos to {args.out}")
    return 0


def cmd_train(args, parser) -> int:
    if args.margin < 0:
        parser.error("--margin must be >= 0")
    if args.lr <= 0:
        parser.error("--lr must be > 0")
    manifest = _load_manifest(args.corpus)
    sample = manifest.load(manifest.video_ids[0])
    model_config = ModelConfig(
        in_dim=sample.n_channels,
        mid_dim=args.mid_dim,
        n_layers=args.layers,
        embed_dim=args.embed_dim,
        tied_attention=args.tied_attention,
        region_agg=args.region_agg,
        pooling=args.pooling,
        concat_mode=args.concat_mode,
    )
    train_config = TrainConfig(
        margin=args.margin,
        learning_rate=args.lr,
        epochs=args.epochs,
        triplets_per_pool=args.triplets_per_pool,
        pools_per_epoch=args.pools,
        max_clip_len=args.max_clip,
        seed=args.seed,
    )
    params, history = train(
        manifest,
        train_config,
        model_config=model_config,
        checkpoint_dir=args.checkpoint_dir,
        progress=lambda epoch, loss: _log(f"epoch {epoch}: mean loss {loss:.6f}"),
    )
    save_params(params, args.out)
    loss_csv = args.loss_csv or str(Path(args.out).with_suffix(".loss.csv"))
    write_loss_history(history, loss_csv)
    _log(f"model written to {args.out}, loss history to {loss_csv}")
    return 0


def cmd_embed(args, parser) -> int:
    params = load_params(args.model)
    manifest = _load_manifest(args.corpus)
    tensors = manifest.load_all()
    embeddings = _thread_map(lambda t: embed_video(params, t), tensors, args.threads)
    index = EmbeddingIndex("video")
    for tensor, emb in zip(tensors, embeddings):
        index.add_video(tensor.video_id, emb)
    index.save(args.out)
    if args.dump_pooling:
        with open(args.dump_pooling, "w", encoding="utf-8") as fh:
            for tensor in tensors:
                _, trace = embed_video(params, tensor, want_trace=True)
                write_pooling_diagnostics(tensor.video_id, trace, fh)
    _log(f"embedded {len(tensors)} videos to {args.out}")
    return 0


def cmd_segment(args, parser) -> int:
    if not (-1.0 <= args.tau <= 1.0):
        parser.error("--tau must be in [-1, 1]")
    params = load_params(args.model)
    manifest = _load_manifest(args.corpus)
    tensors = manifest.load_all()
    shot_sets = _thread_map(lambda t: embed_shots(params, t, args.tau), tensors, args.threads)
    index = EmbeddingIndex("shot")
    for ss in shot_sets:
        index.add_shots(ss)
    index.save(args.out)
    if args.shot_manifest:
        write_shot_manifest(shot_sets, args.shot_manifest)
    _log(
        f"segmented {len(tensors)} videos into {len(index)} shots "
        f"(tau={args.tau}) to {args.out}"
    )
    return 0


def cmd_query(args, parser) -> int:
    index = EmbeddingIndex.load(args.index)
    queries = EmbeddingIndex.load(args.queries)
    if index.mode != queries.mode:
        raise ValueError(
            f"granularity mismatch: index is {index.mode}-level, "
            f"queries are {queries.mode}-level"
        )
    if args.qe is not None and index.mode != "video":
        parser.error("--qe applies to video-level indexes only")

    if index.mode == "video":
        ids, matrix = queries.video_matrix()

        def run_query(pair):
            qid, emb = pair
            if args.qe is not None:
                emb = average_query_expansion(emb, index, args.qe)
            return rank(emb, index, query_id=qid)

        rankings = _thread_map(run_query, list(zip(ids, matrix)), args.threads)
    else:
        rankings = _thread_map(
            lambda qid: shot_rank(queries.shots_of(qid), index, args.aggregation, query_id=qid),
            queries.video_ids,
            args.threads,
        )

    if args.out:
        write_rankings(rankings, args.out)
        _log(f"wrote rankings for {len(rankings)} queries to {args.out}")
    else:
        for ranking in rankings:
            for position, (vid, score) in enumerate(ranking.items, 1):
                print(f"{ranking.query_id}\t{position}\t{vid}\t{score:.17g}")
    return 0


def cmd_eval(args, parser) -> int:
    rankings = read_rankings(args.rankings)
    qrels = Qrels.read(args.qrels)
    tasks = read_tasks(args.tasks)
    if args.task not in tasks:
        raise ValueError(f"task {args.task!r} not in {sorted(tasks)}")
    result = mean_average_precision(rankings, qrels, tasks[args.task])
    print(f"mAP\t{result.value:.4f}")
    for qid in sorted(result.per_query):
        print(f"AP\t{qid}\t{result.per_query[qid]:.4f}")
    if args.per_group and result.per_group:
        for group, value in result.per_group.items():
            print(f"groupAP\t{group}\t{value:.4f}")
    for qid in result.excluded:
        _log(f"excluded (no positives): {qid}")
    return 0


def cmd_selfcheck(args, parser) -> int:
    return 0 if run_selfcheck(sys.stdout) else 1


def build_parser():
    parser = argparse.ArgumentParser(
        prog="regat",
        description="Region-graph attention video retrieval engine.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {}

    def add(name, helptext, fn):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", help="key=value file supplying flag defaults")
        p.set_defaults(fn=fn)
        commands[name] = p
        return p

    p = add("synth", "generate a synthetic labeled corpus", cmd_synth)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--groups", type=int, default=8, help="number of groups (default 8)")
    p.add_argument("--per-group", type=int, default=4, help="videos per group (default 4)")
    p.add_argument("--frames-min", type=int, default=20, help="min video length (default 20)")
    p.add_argument("--frames-max", type=int, default=60, help="max video length (default 60)")
    p.add_argument("--regions", type=int, default=4, help="regions per frame (default 4)")
    p.add_argument("--channels", type=int, default=32, help="descriptor channels (default 32)")
    p.add_argument("--noise", type=float, default=0.1, help="gaussian noise scale (default 0.1)")
    p.add_argument("--subsample-prob", type=float, default=0.0,
                   help="probability of frame subsampling (default 0)")
    p.add_argument("--scene-composite", action="store_true",
                   help="emit 3-scene composite videos with single-scene queries and qrels")
    p.add_argument("--scene-len", type=int, default=12,
                   help="frames per scene in composite mode (default 12)")
    p.add_argument("--seed", type=int, default=0, help="RNG seed (default 0)")

    p = add("train", "train the encoder on a corpus", cmd_train)
    p.add_argument("--corpus", required=True, help="manifest file or corpus directory")
    p.add_argument("--out", required=True, help="output model file")
    p.add_argument("--epochs", type=int, default=120, help="training epochs (default 120)")
    p.add_argument("--lr", type=float, default=3e-7, help="fixed learning rate (default 3e-7)")
    p.add_argument("--margin", type=float, default=0.2, help="triplet margin (default 0.2)")
    p.add_argument("--mid-dim", type=int, default=512,
                   help="intermediate channel width (default 512)")
    p.add_argument("--layers", type=int, default=3, help="graph attention layers (default 3)")
    p.add_argument("--embed-dim", type=int, default=4096, help="embedding width (default 4096)")
    p.add_argument("--triplets-per-pool", type=int, default=1000,
                   help="triplets sampled per pool (default 1000)")
    p.add_argument("--pools", type=int, default=2, help="pools per epoch (default 2)")
    p.add_argument("--max-clip", type=int, default=64,
                   help="max clip length in frames for training triplets (default 64)")
    p.add_argument("--region-agg", choices=["attention", "max", "average"],
                   default="attention", help="neighbor aggregation (default attention)")
    p.add_argument("--pooling", choices=["attention", "max", "average"],
                   default="attention", help="region pooling (default attention)")
    p.add_argument("--concat-mode", choices=["all", "gat_plus_reduce", "gat_only", "final"],
                   default="all", help="which stages feed the concatenation (default all)")
    p.add_argument("--tied-attention", action="store_true",
                   help="share query and key transforms")
    p.add_argument("--checkpoint-dir", help="write per-epoch checkpoints here")
    p.add_argument("--loss-csv", help="loss history CSV path (default: beside --out)")
    p.add_argument("--seed", type=int, default=0, help="RNG seed (default 0)")

    p = add("embed", "embed corpus videos (one vector per video)", cmd_embed)
    p.add_argument("--model", required=True, help="trained model file")
    p.add_argument("--corpus", required=True, help="manifest file or corpus directory")
    p.add_argument("--out", required=True, help="output embedding file")
    p.add_argument("--dump-pooling", help="write pooling weights (video, node, frame, weight)")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                   help="parallel videos (default: cores)")

    p = add("segment", "segment into shots and embed each shot", cmd_segment)
    p.add_argument("--model", required=True, help="trained model file")
    p.add_argument("--corpus", required=True, help="manifest file or corpus directory")
    p.add_argument("--out", required=True, help="output embedding file (shot mode)")
    p.add_argument("--tau", type=float, default=DEFAULT_TAU,
                   help="min consecutive-frame cosine within a shot (default 0.75)")
    p.add_argument("--shot-manifest", help="also write video/shot/start/end lines here")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                   help="parallel videos (default: cores)")

    p = add("query", "rank an index for every query embedding", cmd_query)
    p.add_argument("--index", required=True, help="database embedding file")
    p.add_argument("--queries", required=True, help="query embedding file")
    p.add_argument("--out", help="rankings TSV (default: stdout)")
    p.add_argument("--aggregation", choices=["cs", "scs"], default="cs",
                   help="shot aggregation (default cs)")
    p.add_argument("--qe", type=int, help="average query expansion depth (video mode)")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                   help="parallel queries (default: cores)")

    p = add("eval", "score rankings against relevance judgments", cmd_eval)
    p.add_argument("--rankings", required=True, help="rankings TSV from `regat query`")
    p.add_argument("--qrels", required=True, help="qrels file (query, video, label[, group])")
    p.add_argument("--tasks", required=True, help="task file (name, positive labels)")
    p.add_argument("--task", required=True, help="task name to evaluate")
    p.add_argument("--per-group", action="store_true", help="also print per-group macro mAP")

    add("selfcheck", "run the embedded invariant suite", cmd_selfcheck)

    return parser, commands


def _apply_config_file(args, parser, commands, argv):
    config_path = getattr(args, "config", None)
    if not config_path:
        return args
    subparser = commands[args.command]
    valid = {
        action.dest for action in subparser._actions if action.dest != "help"
    }
    defaults = {}
    for lineno, line in enumerate(Path(config_path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            subparser.error(f"{config_path}:{lineno}: expected key=value")
        key, _, value = line.partition("=")
        dest = key.strip().replace("-", "_")
        if dest not in valid:
            subparser.error(f"{config_path}:{lineno}: unknown key {key.strip()!r}")
        defaults[dest] = value.strip()
    for dest, raw in defaults.items():
        action = next(a for a in subparser._actions if a.dest == dest)
        if action.type is not None:
            raw = action.type(raw)
        elif isinstance(action.const, bool) or isinstance(action.default, bool):
            raw = raw.lower() in ("1", "true", "yes")
        subparser.set_defaults(**{dest: raw})
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser, commands = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(argv)
    args = _apply_config_file(args, parser, commands, argv)
    try:
        return args.fn(args, commands[args.command])
    except (FileFormatError, OSError, ValueError, KeyError) as exc:
        _log(f"error: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
