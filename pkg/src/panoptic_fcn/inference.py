"""Generate kernels, then segment: from an image to a non-overlapping panoptic map."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import Tensor

from .feature_encoder import instance_logits
from .fusion import fuse_stuff_kernels, fuse_thing_kernels
from .kernel_generator import extract_stuff_positions, extract_thing_positions, select_kernels
from .model import PanopticFCN
from .nn_core import bilinear_resize
from .panoptic import DEFAULT_CATEGORIES, STUFF, THING, CategorySet, PanopticSegmentation, Segment
from .synth import Scene, write_dataset, to_tensor_image


@dataclass
class InferenceConfig:
    thres: float = 0.90
    class_aware: bool = True
    fusion_reference: str = "mean"
    score_floor: float = 0.05
    max_things: int = 100
    mask_threshold: float = 0.4
    thing_score_threshold: float = 0.2
    stitch: str = "heuristic"  # heuristic | argmax
    keep_fraction: float = 0.5
    min_thing_area: int = 16
    min_stuff_area: int = 64

    def __post_init__(self):
        if self.stitch not in ("heuristic", "argmax"):
            raise ValueError(f"stitch must be 'heuristic' or 'argmax', got {self.stitch!r}")


@dataclass
class Instances:
    """Full-resolution soft masks with tags; things first, then stuff."""

    probs: np.ndarray  # (K, H, W)
    scores: np.ndarray  # (K,) adjusted scores
    categories: np.ndarray  # (K,) dataset category ids
    kinds: list[str] = field(default_factory=list)

    def subset(self, kind: str) -> "Instances":
        sel = np.array([k == kind for k in self.kinds], dtype=bool)
        return Instances(self.probs[sel], self.scores[sel], self.categories[sel], [kind] * int(sel.sum()))


def rescore(score: float, soft_mask: np.ndarray, threshold: float = 0.4) -> float:
    """Score times the mean probability over pixels at or above ``threshold`` (unchanged if none)."""
    above = soft_mask >= threshold
    if not above.any():
        return float(score)
    return float(score) * float(soft_mask[above].mean())


def _kernels_for_image(kernel_maps: Sequence[Tensor], thing_maps: Sequence[Tensor],
                       stuff_maps: Sequence[Tensor], cfg: InferenceConfig):
    pos = extract_thing_positions(thing_maps, cfg.score_floor)
    pos = extract_stuff_positions(stuff_maps, pos)
    things, stuff = select_kernels(kernel_maps, pos)
    fused = fuse_thing_kernels(things.vectors.detach().double().numpy(), things.score, things.category,
                               cfg.thres, cfg.class_aware, reference=cfg.fusion_reference)
    fused.sort(key=lambda k: -k.score)  # stable: ties keep fusion order
    fused = fused[: cfg.max_things]
    stuff_k = fuse_stuff_kernels(stuff.vectors.detach().double().numpy(), stuff.category, stuff.score)
    return fused, stuff_k


@torch.no_grad()
def predict_instances(images: np.ndarray | Sequence[np.ndarray], model: PanopticFCN,
                      config: InferenceConfig | None = None,
                      categories: CategorySet = DEFAULT_CATEGORIES) -> list[Instances]:
    """Soft masks and adjusted scores for a batch of ``(H, W, 3)`` uint8 images."""
    cfg = config or InferenceConfig()
    if isinstance(images, np.ndarray) and images.ndim == 3:
        images = [images]
    model.eval()
    dtype = next(model.parameters()).dtype
    x = to_tensor_image(list(images)).to(dtype)
    h, w = x.shape[-2:]
    out = model(x)
    th_maps, st_maps = out.thing_maps, out.stuff_maps
    results = []
    for b in range(x.shape[0]):
        things, stuff = _kernels_for_image([g[b] for g in out.kernel_maps], [m[b] for m in th_maps],
                                           [m[b] for m in st_maps], cfg)
        kernels = things + stuff
        if not kernels:
            results.append(Instances(np.zeros((0, h, w)), np.zeros(0), np.zeros(0, dtype=np.int64), []))
            continue
        vecs = torch.from_numpy(np.stack([k.vector for k in kernels])).to(dtype)
        low = torch.sigmoid(instance_logits(vecs, out.encoded[b]))
        probs = bilinear_resize(low, (h, w)).clamp(0, 1).double().numpy()
        scores = np.array([rescore(k.score, p, cfg.mask_threshold) for k, p in zip(kernels, probs)])
        cats = np.array([categories.thing_ids[k.category] if k.kind == THING else categories.stuff_ids[k.category]
                         for k in kernels], dtype=np.int64)
        results.append(Instances(probs, scores, cats, [k.kind for k in kernels]))
    return results


def stitch_heuristic(instances: Instances, stuff: Instances | None = None,
                     config: InferenceConfig | None = None) -> PanopticSegmentation:
    """Occlusion-aware painting: things by descending score, then stuff on what remains.

    When ``stuff`` is None the stuff entries of ``instances`` are used.
    """
    cfg = config or InferenceConfig()
    if stuff is None:
        things, stuff = instances.subset(THING), instances.subset(STUFF)
    else:
        things = instances
    shape = things.probs.shape[1:] if len(things.probs) else stuff.probs.shape[1:]
    id_map = np.zeros(shape, dtype=np.int32)
    segments: list[Segment] = []
    next_id = 1
    for j in np.argsort(-things.scores, kind="stable"):
        if things.scores[j] < cfg.thing_score_threshold:
            continue
        mask = things.probs[j] >= cfg.mask_threshold
        area = int(mask.sum())
        if area == 0:
            continue
        free = mask & (id_map == 0)
        claimed = int(free.sum())
        if claimed / area < cfg.keep_fraction or claimed < cfg.min_thing_area:
            continue
        id_map[free] = next_id
        segments.append(Segment(next_id, int(things.categories[j]), THING, float(things.scores[j]), claimed))
        next_id += 1
    for j in np.argsort(-stuff.scores, kind="stable"):
        free = (stuff.probs[j] >= cfg.mask_threshold) & (id_map == 0)
        claimed = int(free.sum())
        if claimed < cfg.min_stuff_area:
            continue
        id_map[free] = next_id
        segments.append(Segment(next_id, int(stuff.categories[j]), STUFF, float(stuff.scores[j]), claimed))
        next_id += 1
    return _merge_stuff(PanopticSegmentation(id_map, segments))


def stitch_argmax(instances: Instances, stuff: Instances | None = None,
                  config: InferenceConfig | None = None) -> PanopticSegmentation:
    """Per-pixel arg-max over every mask; weak winners and small segments become void."""
    cfg = config or InferenceConfig()
    if stuff is not None:
        instances = Instances(np.concatenate([instances.probs, stuff.probs]),
                              np.concatenate([instances.scores, stuff.scores]),
                              np.concatenate([instances.categories, stuff.categories]),
                              list(instances.kinds) + list(stuff.kinds))
    probs = instances.probs
    if len(probs) == 0:
        return PanopticSegmentation(np.zeros(probs.shape[1:], dtype=np.int32), [])
    keep = np.array([k == STUFF or s >= cfg.thing_score_threshold
                     for k, s in zip(instances.kinds, instances.scores)], dtype=bool)
    masked = np.where(keep[:, None, None], probs, -1.0)
    winner = np.argmax(masked, axis=0)  # first index wins ties
    best = np.take_along_axis(masked, winner[None], 0)[0]
    winner = np.where(best >= cfg.mask_threshold, winner, -1)
    id_map = np.zeros(winner.shape, dtype=np.int32)
    segments: list[Segment] = []
    next_id = 1
    for j in range(len(probs)):
        mask = winner == j
        area = int(mask.sum())
        kind = instances.kinds[j]
        if area == 0 or area < (cfg.min_thing_area if kind == THING else cfg.min_stuff_area):
            continue
        id_map[mask] = next_id
        segments.append(Segment(next_id, int(instances.categories[j]), kind, float(instances.scores[j]), area))
        next_id += 1
    return _merge_stuff(PanopticSegmentation(id_map, segments))


def _merge_stuff(pan: PanopticSegmentation) -> PanopticSegmentation:
    """Fold stuff segments of one category into a single segment (the first one's id)."""
    first: dict[int, Segment] = {}
    keep = []
    for s in pan.segments:
        if s.kind != STUFF:
            keep.append(s)
        elif s.category not in first:
            first[s.category] = s
            keep.append(s)
        else:
            pan.id_map[pan.id_map == s.id] = first[s.category].id
            first[s.category].area += s.area
    return PanopticSegmentation(pan.id_map, keep)


def stitch(instances: Instances, config: InferenceConfig) -> PanopticSegmentation:
    if config.stitch == "argmax":
        return stitch_argmax(instances, config=config)
    return stitch_heuristic(instances, config=config)


def run_panoptic_inference(image: np.ndarray, model: PanopticFCN, config: InferenceConfig | None = None,
                           categories: CategorySet = DEFAULT_CATEGORIES) -> PanopticSegmentation:
    cfg = config or InferenceConfig()
    inst = predict_instances([image], model, cfg, categories)[0]
    return stitch(inst, cfg)


def run_inference_batch(images: Sequence[np.ndarray], model: PanopticFCN, config: InferenceConfig | None = None,
                        categories: CategorySet = DEFAULT_CATEGORIES, batch_size: int = 16,
                        configs: Sequence[InferenceConfig] | None = None) -> list[PanopticSegmentation] | list[list[PanopticSegmentation]]:
    """Segment many images. With ``configs`` the stitching/fusion variants share one forward pass
    per batch and a list of prediction lists (one per config) is returned."""
    cfg = config or InferenceConfig()
    variants = list(configs) if configs else [cfg]
    outs: list[list[PanopticSegmentation]] = [[] for _ in variants]
    for start in range(0, len(images), batch_size):
        chunk = list(images[start:start + batch_size])
        cache: dict = {}
        for v, vc in enumerate(variants):
            key = (vc.thres, vc.class_aware, vc.fusion_reference, vc.score_floor, vc.max_things, vc.mask_threshold)
            if key not in cache:
                cache[key] = predict_instances(chunk, model, vc, categories)
            outs[v].extend(stitch(inst, vc) for inst in cache[key])
    return outs if configs else outs[0]


def colorize(pan: PanopticSegmentation, seed: int = 0) -> np.ndarray:
    """RGB visualization with one random color per segment id (void black)."""
    rng = np.random.default_rng(seed)
    lut = rng.integers(40, 256, size=(int(pan.id_map.max()) + 1, 3)).astype(np.uint8)
    lut[0] = 0
    return lut[pan.id_map]


def write_predictions(preds: Sequence[PanopticSegmentation], names: Sequence[str], directory: str | Path,
                      categories: CategorySet = DEFAULT_CATEGORIES, visualize: bool = False) -> Path:
    """Write predictions in the dataset layout; optional ``NNNNNN_vis.png`` color maps."""
    root = write_dataset([Scene(None, p, n) for p, n in zip(preds, names)], directory, categories)
    if visualize:
        from PIL import Image

        for p, n in zip(preds, names):
            Image.fromarray(colorize(p)).save(root / f"{n}_vis.png")
    return root


__all__ = [
    "InferenceConfig", "Instances", "colorize", "predict_instances", "rescore", "run_inference_batch",
    "run_panoptic_inference", "stitch", "stitch_argmax", "stitch_heuristic", "write_predictions",
]
