"""Embedded invariant suite behind `regat selfcheck`.

Each check re-derives its expected values through an independent route
(brute force enumeration, finite differences, naive loops) and compares
against the engine. Setting REGAT_SELFCHECK_CORRUPT=1 deliberately breaks
the gradient tolerance so failure reporting itself can be exercised.
"""

from __future__ import annotations

import os

import numpy as np

from . import autodiff as ad
from .features import RegionFeatureTensor
from .graph import build_region_graph
from .model import ModelConfig, embed_video, forward_trace, init_params
from .retrieval import RankedList, chamfer, symmetric_chamfer
from .training import backward, triplet_loss

GRAD_REL_TOL = 1e-4
GRAD_ABS_TOL = 1e-8


def _tiny_instance(seed: int):
    rng = np.random.default_rng(seed)
    config = ModelConfig(in_dim=3, mid_dim=2, n_layers=2, embed_dim=3)
    params = init_params(config, seed=seed + 1)
    videos = [
        RegionFeatureTensor(f"v{i}", rng.standard_normal((int(rng.integers(1, 4)), 2, 3)))
        for i in range(3)
    ]
    return params, videos


def check_gradients(n_cases: int = 3) -> tuple[bool, str]:
    """Backward vs central finite differences on tiny random models."""
    rel_tol = GRAD_REL_TOL
    if os.environ.get("REGAT_SELFCHECK_CORRUPT"):
        rel_tol = 1e-18
    h = 1e-5
    worst = 0.0
    for case in range(n_cases):
        params, (va, vp, vn) = _tiny_instance(case)
        base = [embed_video(params, v) for v in (va, vp, vn)]
        from .training import cosine_similarity

        margin = cosine_similarity(base[0], base[1]) - cosine_similarity(base[0], base[2]) + 0.25
        tape = ad.Tape()
        traces = [forward_trace(params, v, tape) for v in (va, vp, vn)]
        grads = backward(*traces, margin)
        for name in params.names():
            arr = params.arrays[name]
            for idx in np.ndindex(arr.shape) if arr.ndim else [()]:
                def loss_at(delta):
                    q = params.copy()
                    if arr.ndim:
                        q.arrays[name][idx] += delta
                    else:
                        q.arrays[name] = q.arrays[name] + delta
                    embs = [embed_video(q, v) for v in (va, vp, vn)]
                    return triplet_loss(*embs, margin)

                fd = (loss_at(h) - loss_at(-h)) / (2 * h)
                got = grads[name][idx] if arr.ndim else float(grads[name])
                allowed = max(GRAD_ABS_TOL, rel_tol * max(abs(fd), abs(got)))
                excess = abs(fd - got) / allowed
                worst = max(worst, excess)
                if excess > 1.0:
                    return False, f"{name}{idx}: fd={fd:.3e} grad={got:.3e} off by {excess:.1f}x"
    return True, f"worst error at {worst:.3f} of tolerance over {n_cases} models"


def check_graph_adjacency(n_cases: int = 20) -> tuple[bool, str]:
    """Neighborhoods vs brute-force pair enumeration."""
    rng = np.random.default_rng(7)
    for _ in range(n_cases):
        t = int(rng.integers(1, 7))
        r = int(rng.integers(1, 5))
        graph = build_region_graph(t, r)
        expected = {
            (i, j)
            for i in range(t * r)
            for j in range(t * r)
            if abs(i // r - j // r) <= 1
        }
        actual = {(i, int(j)) for i in range(t * r) for j in graph.neighbors(i)}
        if actual != expected:
            return False, f"adjacency mismatch at T={t}, R={r}"
    return True, f"{n_cases} random shapes match brute force"


def check_chamfer(n_cases: int = 20) -> tuple[bool, str]:
    """Chamfer aggregations vs naive loops."""
    rng = np.random.default_rng(11)
    for _ in range(n_cases):
        s = rng.uniform(-1, 1, size=(int(rng.integers(1, 6)), int(rng.integers(1, 6))))
        naive_cs = sum(max(row) for row in s) / s.shape[0]
        naive_cs_t = sum(max(col) for col in s.T) / s.shape[1]
        if abs(chamfer(s) - naive_cs) > 1e-12:
            return False, "chamfer mismatch"
        if abs(symmetric_chamfer(s) - (naive_cs + naive_cs_t) / 2) > 1e-12:
            return False, "symmetric chamfer mismatch"
    return True, f"{n_cases} random matrices match naive loops"


def check_map(n_cases: int = 20) -> tuple[bool, str]:
    """Average precision vs a quadratic-time re-computation."""
    from .retrieval import average_precision

    rng = np.random.default_rng(13)
    for _ in range(n_cases):
        n = int(rng.integers(2, 12))
        ids = [f"v{i}" for i in range(n)]
        scores = np.sort(rng.uniform(size=n))[::-1]
        ranking = RankedList("q", list(zip(ids, scores.tolist())))
        relevant = {vid for vid in ids if rng.random() < 0.4} or {ids[0]}

        naive = 0.0
        for pos in range(1, n + 1):
            if ids[pos - 1] in relevant:
                hits = sum(1 for v in ids[:pos] if v in relevant)
                naive += hits / pos
        naive /= len(relevant)
        if abs(average_precision(ranking, relevant) - naive) > 1e-12:
            return False, f"AP mismatch on {n} items"
    return True, f"{n_cases} random rankings match quadratic oracle"


def check_attention_sums() -> tuple[bool, str]:
    """Attention rows and pooling weights sum to one."""
    params, videos = _tiny_instance(3)
    _, trace = embed_video(params, videos[0], want_trace=True)
    for k in range(params.config.n_layers):
        if np.max(np.abs(trace.attention_row_sums(k) - 1.0)) > 1e-9:
            return False, f"layer {k} rows do not sum to 1"
    if abs(trace.beta.sum() - 1.0) > 1e-9:
        return False, "pooling weights do not sum to 1"
    return True, "attention rows and pooling weights sum to 1"


CHECKS = [
    ("gradient-vs-finite-differences", check_gradients),
    ("graph-adjacency-brute-force", check_graph_adjacency),
    ("chamfer-naive-loops", check_chamfer),
    ("average-precision-quadratic", check_map),
    ("attention-normalization", check_attention_sums),
]


def run_selfcheck(report) -> bool:
    """Run every check, writing one line each to `report`. True iff all pass."""
    all_ok = True
    for name, fn in CHECKS:
        ok, detail = fn()
        all_ok &= ok
        report.write(f"{'ok' if ok else 'FAIL'} {name}: {detail}\n")
    return all_ok
