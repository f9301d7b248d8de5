"""Kernel fusion: merge candidate kernels so each object and each stuff category
keeps a single kernel."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

warnings = Counter()


@dataclass
class InstanceKernel:
    vector: np.ndarray
    score: float
    category: int
    kind: str  # "thing" | "stuff"
    member_count: int = 1
    members: list[int] = field(default_factory=list)


@dataclass(frozen=True)
class JoinEvent:
    """One greedy decision: ``candidate`` joined ``cluster`` (or founded it when ``similarity`` is None)."""

    candidate: int
    cluster: int
    similarity: float | None
    reference: np.ndarray = field(compare=False, repr=False)


def cosine_similarity(a, b) -> float:
    """Inner product over norms; 0.0 (and a counted warning) when either vector is zero."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        warnings["zero_norm"] += 1
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _cosine_rows(mat: np.ndarray, v: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(mat, axis=1)
    nv = np.linalg.norm(v)
    out = np.zeros(len(mat))
    ok = (norms > 0) & (nv > 0)
    if (~ok).any():
        warnings["zero_norm"] += int((~ok).sum())
    out[ok] = (mat[ok] @ v) / (norms[ok] * nv)
    return np.clip(out, -1.0, 1.0)


def fuse_thing_kernels(
    vectors,
    scores: Sequence[float],
    categories: Sequence[int],
    thres: float = 0.90,
    class_aware: bool = True,
    *,
    reference: str = "mean",
    return_log: bool = False,
):
    """Greedy score-ordered average clustering of thing kernels.

    Candidates are visited by descending score (ties by input index). Each one
    joins the first existing cluster whose current reference vector (the
    running mean, or the founder with ``reference="founder"``) has cosine
    similarity ``>= thres`` and, when ``class_aware``, the same category;
    otherwise it founds a new cluster. A cluster's kernel is the mean of its
    members, its score the best member score and its category the founder's.
    """
    if reference not in ("mean", "founder"):
        raise ValueError(f"reference must be 'mean' or 'founder', got {reference!r}")
    vecs = np.asarray(vectors, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    cats = np.asarray(categories, dtype=np.int64)
    events: list[JoinEvent] = []
    if len(vecs) == 0:
        return ([], events) if return_log else []
    order = np.argsort(-scores, kind="stable")
    sums = np.zeros((len(vecs), vecs.shape[1]))
    refs = np.zeros_like(sums)
    counts = np.zeros(len(vecs), dtype=np.int64)
    founders: list[int] = []
    members: list[list[int]] = []
    n = 0
    for i in order:
        v = vecs[i]
        joined = -1
        sim = None
        if n:
            sims = _cosine_rows(refs[:n], v)
            ok = sims >= thres
            if class_aware:
                ok &= cats[founders] == cats[i]
            hits = np.flatnonzero(ok)
            if len(hits):
                joined = int(hits[0])
                sim = float(sims[joined])
        if joined < 0:
            joined = n
            founders.append(int(i))
            members.append([])
            refs[n] = v
            n += 1
        if return_log:
            events.append(JoinEvent(int(i), joined, sim, refs[joined].copy()))
        sums[joined] += v
        counts[joined] += 1
        members[joined].append(int(i))
        if reference == "mean":
            refs[joined] = sums[joined] / counts[joined]
    kernels = [
        InstanceKernel(
            vector=sums[j] / counts[j],
            score=float(scores[members[j]].max()),
            category=int(cats[founders[j]]),
            kind="thing",
            member_count=int(counts[j]),
            members=members[j],
        )
        for j in range(n)
    ]
    return (kernels, events) if return_log else kernels


def fuse_stuff_kernels(vectors, categories: Sequence[int], scores: Sequence[float] | None = None) -> list[InstanceKernel]:
    """One kernel per distinct category: the mean of all its candidates across stages.

    The score is the mean candidate score (1.0 when no scores are given).
    """
    vecs = np.asarray(vectors, dtype=np.float64)
    cats = np.asarray(categories, dtype=np.int64)
    if len(vecs) == 0:
        return []
    sc = np.ones(len(vecs)) if scores is None else np.asarray(scores, dtype=np.float64)
    out = []
    for c in np.unique(cats):
        idx = np.flatnonzero(cats == c)
        out.append(InstanceKernel(
            vector=vecs[idx].mean(axis=0),
            score=float(sc[idx].mean()),
            category=int(c),
            kind="stuff",
            member_count=len(idx),
            members=idx.tolist(),
        ))
    return out
