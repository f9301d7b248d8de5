"""Panoptic quality (PQ / SQ / RQ) and mean IoU."""
from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ValidationError
from .panoptic import STUFF, THING, CategorySet, PanopticSegmentation

MATCH_IOU = 0.5


@dataclass
class CategoryStats:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    iou_sum: float = 0.0

    def pq(self) -> float:
        denom = self.tp + 0.5 * self.fp + 0.5 * self.fn
        return self.iou_sum / denom if denom else 0.0

    def sq(self) -> float:
        return self.iou_sum / self.tp if self.tp else 0.0

    def rq(self) -> float:
        denom = self.tp + 0.5 * self.fp + 0.5 * self.fn
        return self.tp / denom if denom else 0.0


@dataclass
class MetricReport:
    """PQ/SQ/RQ in percent, overall and split into things / stuff."""

    pq: float
    sq: float
    rq: float
    pq_th: float
    sq_th: float
    rq_th: float
    pq_st: float
    sq_st: float
    rq_st: float
    per_category: dict[int, CategoryStats] = field(default_factory=dict)
    num_images: int = 0

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("pq", "sq", "rq", "pq_th", "sq_th", "rq_th", "pq_st", "sq_st", "rq_st")}
        d["num_images"] = self.num_images
        d["per_category"] = {
            str(c): {"tp": s.tp, "fp": s.fp, "fn": s.fn, "iou_sum": s.iou_sum,
                     "pq": 100 * s.pq(), "sq": 100 * s.sq(), "rq": 100 * s.rq()}
            for c, s in sorted(self.per_category.items())
        }
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def table(self) -> str:
        rows = [("All", self.pq, self.sq, self.rq), ("Things", self.pq_th, self.sq_th, self.rq_th),
                ("Stuff", self.pq_st, self.sq_st, self.rq_st)]
        lines = [f"{'':8s}{'PQ':>8s}{'SQ':>8s}{'RQ':>8s}"]
        lines += [f"{name:8s}{a:8.1f}{b:8.1f}{c:8.1f}" for name, a, b, c in rows]
        lines.append(f"PQ {self.pq:.1f} | PQ_th {self.pq_th:.1f} | PQ_st {self.pq_st:.1f}")
        return "\n".join(lines)


def segment_ious(pred: PanopticSegmentation, gt: PanopticSegmentation) -> dict[tuple[int, int], float]:
    """IoU of every overlapping (gt id, pred id) pair of the same category.

    Pixels that are void in the ground truth are removed from the prediction's area.
    """
    if pred.id_map.shape != gt.id_map.shape:
        raise ValidationError(f"shape mismatch {pred.id_map.shape} vs {gt.id_map.shape}")
    g = gt.id_map.astype(np.int64).ravel()
    p = pred.id_map.astype(np.int64).ravel()
    offset = int(max(p.max(initial=0), g.max(initial=0))) + 1
    pairs, counts = np.unique(g * offset + p, return_counts=True)
    inter = {(int(k // offset), int(k % offset)): int(c) for k, c in zip(pairs, counts)}
    g_area = defaultdict(int)
    p_area = defaultdict(int)
    p_void = defaultdict(int)
    for (gi, pi), c in inter.items():
        g_area[gi] += c
        p_area[pi] += c
        if gi == 0:
            p_void[pi] += c
    gcat = {s.id: s.category for s in gt.segments}
    pcat = {s.id: s.category for s in pred.segments}
    out = {}
    for (gi, pi), c in inter.items():
        if gi == 0 or pi == 0 or gcat[gi] != pcat[pi]:
            continue
        union = g_area[gi] + p_area[pi] - c - p_void[pi]
        out[(gi, pi)] = c / union
    return out


def match_segments(pred: PanopticSegmentation, gt: PanopticSegmentation) -> list[tuple[int, int, float]]:
    """Pairs with IoU strictly above 0.5; such matches are necessarily unique."""
    return [(g, p, iou) for (g, p), iou in segment_ious(pred, gt).items() if iou > MATCH_IOU]


def accumulate(stats: dict[int, CategoryStats], pred: PanopticSegmentation, gt: PanopticSegmentation) -> None:
    pred.validate()
    gt.validate()
    matches = match_segments(pred, gt)
    matched_g = {g for g, _, _ in matches}
    matched_p = {p for _, p, _ in matches}
    gcat = {s.id: s.category for s in gt.segments}
    for g, _, iou in matches:
        st = stats.setdefault(gcat[g], CategoryStats())
        st.tp += 1
        st.iou_sum += iou
    for s in gt.segments:
        if s.id not in matched_g:
            stats.setdefault(s.category, CategoryStats()).fn += 1
    void = gt.id_map == 0
    for s in pred.segments:
        if s.id in matched_p:
            continue
        mask = pred.id_map == s.id
        area = int(mask.sum())
        if area and (mask & void).sum() / area > 0.5:
            continue
        stats.setdefault(s.category, CategoryStats()).fp += 1


def _mean(values: list[float]) -> float:
    return 100.0 * float(np.mean(values)) if values else 0.0


def summarize(stats: dict[int, CategoryStats], categories: CategorySet, gt_categories: set[int],
              num_images: int = 0) -> MetricReport:
    def split(kind: str | None):
        cats = [c for c in sorted(gt_categories) if kind is None or categories.kind(c) == kind]
        return (_mean([stats[c].pq() for c in cats]), _mean([stats[c].sq() for c in cats]),
                _mean([stats[c].rq() for c in cats]))

    a, th, st = split(None), split(THING), split(STUFF)
    return MetricReport(*a, *th, *st, per_category=dict(stats), num_images=num_images)


def compute_pq(preds: PanopticSegmentation | Sequence[PanopticSegmentation],
               gts: PanopticSegmentation | Sequence[PanopticSegmentation],
               categories: CategorySet | None = None) -> MetricReport:
    """Dataset-level PQ; per-category sums accumulate across images and are averaged
    over the categories that occur in the ground truth."""
    from .panoptic import DEFAULT_CATEGORIES

    categories = categories or DEFAULT_CATEGORIES
    if isinstance(preds, PanopticSegmentation):
        preds, gts = [preds], [gts]
    if len(preds) != len(gts):
        raise ValidationError(f"{len(preds)} predictions for {len(gts)} ground-truth images")
    stats: dict[int, CategoryStats] = {}
    present: set[int] = set()
    for p, g in zip(preds, gts):
        accumulate(stats, p, g)
        present |= {s.category for s in g.segments}
    return summarize(stats, categories, present, len(gts))


def compute_miou(pred: np.ndarray | Iterable[np.ndarray], gt: np.ndarray | Iterable[np.ndarray],
                 ignore_label: int | None = None) -> float:
    """Mean over categories of TP / (TP + FP + FN), in percent.

    Categories absent from both prediction and ground truth are left out.
    """
    if isinstance(pred, np.ndarray):
        pred, gt = [pred], [gt]
    tp, fp, fn = defaultdict(int), defaultdict(int), defaultdict(int)
    for p, g in zip(pred, gt):
        p = np.asarray(p).ravel()
        g = np.asarray(g).ravel()
        if p.shape != g.shape:
            raise ValidationError("label maps differ in size")
        if ignore_label is not None:
            keep = g != ignore_label
            p, g = p[keep], g[keep]
        for c in np.union1d(np.unique(p), np.unique(g)):
            pc, gc = p == c, g == c
            tp[c] += int((pc & gc).sum())
            fp[c] += int((pc & ~gc).sum())
            fn[c] += int((~pc & gc).sum())
    ious = [tp[c] / (tp[c] + fp[c] + fn[c]) for c in tp if tp[c] + fp[c] + fn[c] > 0]
    return _mean(ious)
