"""Training loop: target construction, top-k kernel sampling, losses and SGD updates."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import Tensor

from .errors import ConfigurationError, TrainingError
from .feature_encoder import instance_logits
from .kernel_generator import (
    DEFAULT_SCALE_RANGES, ThingObject, block_fraction, make_stuff_targets, make_thing_targets,
    position_loss, topk_cells,
)
from .losses import dice_loss, total_objective
from .model import ModelConfig, PanopticFCN
from .nn_core import save_checkpoint
from .panoptic import STUFF, THING, CategorySet, PanopticSegmentation
from .points import PointAnnotation, build_training_targets, simulate_center
from .synth import Dataset, to_tensor_image

log = logging.getLogger(__name__)

SEG_STRIDE = 4


@dataclass
class TrainConfig:
    iterations: int = 1000
    lr: float = 0.02
    poly_power: float = 0.9
    weight_decay: float = 1e-4
    momentum: float = 0.9
    batch_size: int = 8
    seed: int = 0
    lambda_pos: float = 1.0
    lambda_seg: float = 3.0
    k: int = 7
    thres: float = 0.90
    class_aware: bool = True
    center_mode: str = "mass"
    thing_norm: str = "categories"
    supervision: str = "full"  # full | points
    points_n: int = 20
    boundary_ratio: float = 0.0
    shape_mode: str = "concave"
    augment: bool = False
    grad_clip: float = 10.0
    dtype: str = "float32"
    eval_every: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            m = dict(self.model)
            if "widths" in m:
                m["widths"] = tuple(m["widths"])
            self.model = ModelConfig(**m)
        self.validate()

    def validate(self) -> None:
        positive = ("batch_size", "k", "points_n")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("iterations", "lr", "weight_decay", "momentum", "lambda_pos", "lambda_seg", "grad_clip"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.supervision not in ("full", "points"):
            raise ConfigurationError(f"supervision must be 'full' or 'points', got {self.supervision!r}")
        if self.shape_mode not in ("convex", "concave"):
            raise ConfigurationError(f"shape_mode must be 'convex' or 'concave', got {self.shape_mode!r}")
        if self.center_mode not in ("mass", "box"):
            raise ConfigurationError(f"center_mode must be 'mass' or 'box', got {self.center_mode!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError(f"dtype must be 'float32' or 'float64', got {self.dtype!r}")
        if not 0.0 <= self.boundary_ratio <= 1.0:
            raise ConfigurationError("boundary_ratio must be in [0, 1]")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "model"}
        d["model"] = self.model.to_dict()
        return d

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32


def poly_lr(base: float, iteration: int, total: int, power: float = 0.9) -> float:
    """``base * (1 - t / T) ** power``; constant ``base`` when ``T`` is 0."""
    if total <= 0:
        return base
    return base * (1.0 - min(iteration, total) / total) ** power


# --------------------------------------------------------------------------- targets


@dataclass
class InstanceTarget:
    kind: str
    index: int  # thing or stuff head index
    target: np.ndarray  # (H/4, W/4) bool
    ignore: np.ndarray  # (H/4, W/4) bool
    stage: int = -1  # assigned stage (things)
    region: np.ndarray | None = None  # stage-resolution sampling region (things)
    stuff_cells: list[np.ndarray] = field(default_factory=list)  # per stage (stuff)
    source: int = -1


@dataclass
class ImageTargets:
    thing_heatmaps: list[np.ndarray]
    stuff_planes: list[np.ndarray]
    stuff_valid: list[np.ndarray]
    instances: list[InstanceTarget]
    num_things: int


def _cells_with_points(points: np.ndarray, shape: tuple[int, int], stride: int) -> np.ndarray:
    out = np.zeros(shape, bool)
    ys = np.clip(points[:, 1] // stride, 0, shape[0] - 1)
    xs = np.clip(points[:, 0] // stride, 0, shape[1] - 1)
    out[ys, xs] = True
    return out


def image_targets_full(pan: PanopticSegmentation, categories: CategorySet,
                       stage_shapes: Sequence[tuple[int, int]], strides: Sequence[int],
                       center_mode: str = "mass",
                       scale_ranges: Sequence[float] = DEFAULT_SCALE_RANGES) -> ImageTargets:
    """Targets from complete masks."""
    id_map = pan.id_map
    things = [s for s in pan.segments if s.kind == THING]
    stuffs = [s for s in pan.segments if s.kind == STUFF]
    objects = [ThingObject(categories.thing_index(s.category), id_map == s.id) for s in things]
    tt = make_thing_targets(objects, stage_shapes, strides, categories.num_things,
                            center_mode=center_mode, scale_ranges=scale_ranges)
    stuff_labels = np.full(id_map.shape, -1, dtype=np.int64)
    for s in stuffs:
        stuff_labels[id_map == s.id] = categories.stuff_index(s.category)
    st = make_stuff_targets(stuff_labels, stage_shapes, categories.num_stuff, ignore=id_map == 0)
    seg_shape = (id_map.shape[0] // SEG_STRIDE, id_map.shape[1] // SEG_STRIDE)
    void = block_fraction(id_map == 0, SEG_STRIDE) >= 0.5
    instances = []
    for rec in tt.records:
        mask = objects[rec.source].region
        tgt = block_fraction(mask, SEG_STRIDE) >= 0.5
        instances.append(InstanceTarget(THING, rec.category, tgt, void & ~tgt, rec.stage, rec.region,
                                        source=things[rec.source].id))
    for s in stuffs:
        idx = categories.stuff_index(s.category)
        tgt = block_fraction(id_map == s.id, SEG_STRIDE) >= 0.5
        cells = [(p[idx] >= 0.5) & v for p, v in zip(st.planes, st.valid)]
        if not any(c.any() for c in cells):
            continue
        instances.append(InstanceTarget(STUFF, idx, tgt, void & ~tgt, stuff_cells=cells, source=s.id))
    assert all(t.target.shape == seg_shape for t in instances)
    return ImageTargets(tt.heatmaps, st.planes, st.valid, instances, len(tt.records))


def image_targets_points(annotations: Sequence[PointAnnotation], shape: tuple[int, int],
                         categories: CategorySet, stage_shapes: Sequence[tuple[int, int]],
                         strides: Sequence[int], shape_mode: str = "concave", augment: bool = False,
                         scale_ranges: Sequence[float] = DEFAULT_SCALE_RANGES) -> ImageTargets:
    """Targets from point annotations: hull regions, simulated centers, ignore elsewhere."""
    pt, _ = build_training_targets(annotations, shape, shape_mode, augment)
    owner = pt.owner
    thing_idx = [j for j, a in enumerate(annotations) if a.kind == THING]
    stuff_idx = [j for j, a in enumerate(annotations) if a.kind == STUFF]
    objects = [ThingObject(categories.thing_index(annotations[j].category), owner == j,
                           simulate_center(annotations[j].points)) for j in thing_idx]
    tt = make_thing_targets(objects, stage_shapes, strides, categories.num_things, scale_ranges=scale_ranges)
    stuff_labels = np.full(shape, -1, dtype=np.int64)
    for j in stuff_idx:
        stuff_labels[owner == j] = categories.stuff_index(annotations[j].category)
    st = make_stuff_targets(stuff_labels, stage_shapes, categories.num_stuff, ignore=owner < 0)
    ign = block_fraction(owner < 0, SEG_STRIDE) >= 0.5
    seg_shape = ign.shape

    def seg_target(j: int) -> np.ndarray:
        tgt = block_fraction(owner == j, SEG_STRIDE) >= 0.5
        return tgt | _cells_with_points(annotations[j].points, seg_shape, SEG_STRIDE)

    instances = []
    for rec in tt.records:
        j = thing_idx[rec.source]
        tgt = seg_target(j)
        instances.append(InstanceTarget(THING, rec.category, tgt, ign & ~tgt, rec.stage, rec.region,
                                        source=annotations[j].instance_id))
    for j in stuff_idx:
        idx = categories.stuff_index(annotations[j].category)
        tgt = seg_target(j)
        cells = [(p[idx] >= 0.5) & v for p, v in zip(st.planes, st.valid)]
        if not any(c.any() for c in cells):
            continue
        instances.append(InstanceTarget(STUFF, idx, tgt, ign & ~tgt, stuff_cells=cells,
                                        source=annotations[j].instance_id))
    return ImageTargets(tt.heatmaps, st.planes, st.valid, instances, len(tt.records))


def stage_geometry(model: PanopticFCN, image_size: tuple[int, int]) -> tuple[list[tuple[int, int]], list[int]]:
    strides = list(model.strides)
    return [(image_size[0] // s, image_size[1] // s) for s in strides], strides


def prepare_targets(dataset: Dataset, model: PanopticFCN, config: TrainConfig,
                    point_annotations: Sequence[Sequence[PointAnnotation]] | None = None) -> list[ImageTargets]:
    out = []
    for i, scene in enumerate(dataset):
        shape = scene.panoptic.id_map.shape
        shapes, strides = stage_geometry(model, shape)
        if config.supervision == "full":
            out.append(image_targets_full(scene.panoptic, dataset.categories, shapes, strides, config.center_mode))
        else:
            if point_annotations is None:
                raise ConfigurationError("point supervision needs point annotations")
            out.append(image_targets_points(point_annotations[i], shape, dataset.categories, shapes, strides,
                                            config.shape_mode, config.augment))
    return out


# --------------------------------------------------------------------------- one step


@dataclass
class LossComponents:
    L: float
    L_pos_th: float
    L_pos_st: float
    L_seg: float
    lr: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def _image_seg_loss(out_fe: Tensor, kernel_maps: Sequence[Tensor], thing_maps: Sequence[Tensor],
                    stuff_maps: Sequence[Tensor], tg: ImageTargets, k: int) -> tuple[Tensor, int]:
    """Sum over instances of score-weighted dice, and the instance count."""
    vecs, scores, group = [], [], []
    targets, ignores = [], []
    for j, inst in enumerate(tg.instances):
        if inst.kind == THING:
            hm = thing_maps[inst.stage][inst.index]
            ys, xs = topk_cells(hm, inst.region, k)
            if len(ys) == 0:
                continue
            yt, xt = torch.from_numpy(ys), torch.from_numpy(xs)
            vecs.append(kernel_maps[inst.stage][:, yt, xt].T)
            scores.append(hm[yt, xt].detach())
            group += [j] * len(ys)
        else:
            for s, cells in enumerate(inst.stuff_cells):
                if not cells.any():
                    continue
                m = torch.from_numpy(cells)
                vecs.append(kernel_maps[s][:, m].mean(dim=1, keepdim=True).T)
                scores.append(stuff_maps[s][inst.index][m].detach().mean().reshape(1))
                group.append(j)
        targets.append(inst.target)
        ignores.append(inst.ignore)
    if not vecs:
        return out_fe.new_zeros(()), 0
    kernels = torch.cat(vecs)
    preds = torch.sigmoid(instance_logits(kernels, out_fe))
    gid = torch.as_tensor(group)
    uniq, local = torch.unique(gid, return_inverse=True)
    tgt_stack = torch.from_numpy(np.stack([tg.instances[int(j)].target for j in uniq]))
    ign_stack = torch.from_numpy(np.stack([tg.instances[int(j)].ignore for j in uniq]))
    losses, _ = dice_loss(preds, tgt_stack[local].to(preds.dtype), ign_stack[local])
    sc = torch.cat(scores).to(preds.dtype)
    totals = torch.zeros(len(uniq), dtype=preds.dtype).index_add(0, local, sc)
    w = torch.where(totals[local] > 0, sc / totals[local].clamp_min(1e-30),
                    1.0 / torch.bincount(local).to(preds.dtype)[local])
    return (w * losses).sum(), len(uniq)


def compute_losses(model: PanopticFCN, images: Tensor, targets: Sequence[ImageTargets],
                   config: TrainConfig, indices: Sequence[int] | None = None) -> tuple[Tensor, dict]:
    """Forward pass and the batch-averaged objective with its components."""
    out = model(images)
    dtype = images.dtype
    th_maps, st_maps = out.thing_maps, out.stuff_maps
    l_th = images.new_zeros(())
    l_st = images.new_zeros(())
    l_seg = images.new_zeros(())
    b = images.shape[0]
    for i in range(b):
        tg = targets[i]
        th_i = [m[i] for m in th_maps]
        st_i = [m[i] for m in st_maps]
        which = indices[i] if indices is not None else i
        try:
            th, st, _ = position_loss(
                th_i, st_i,
                [torch.from_numpy(h).to(dtype) for h in tg.thing_heatmaps],
                [torch.from_numpy(p).to(dtype) for p in tg.stuff_planes],
                [torch.from_numpy(v) for v in tg.stuff_valid],
                thing_norm=config.thing_norm, num_instances=tg.num_things,
            )
        except TrainingError as exc:
            raise TrainingError(f"image {which}: {exc}") from exc
        seg_sum, n = _image_seg_loss(out.encoded[i], [g[i] for g in out.kernel_maps], th_i, st_i, tg, config.k)
        seg = seg_sum / n if n else seg_sum
        if not (torch.isfinite(th) and torch.isfinite(st) and torch.isfinite(seg)):
            raise TrainingError(
                f"non-finite loss on image {which}: L_pos_th={float(th)} L_pos_st={float(st)} "
                f"L_seg={float(seg)}; instances={[(t.kind, t.index, int(t.target.sum())) for t in tg.instances]}"
            )
        l_th, l_st, l_seg = l_th + th, l_st + st, l_seg + seg
    l_th, l_st, l_seg = l_th / b, l_st / b, l_seg / b
    total = total_objective(l_th + l_st, l_seg, config.lambda_pos, config.lambda_seg)
    return total, {"L_pos_th": float(l_th.detach()), "L_pos_st": float(l_st.detach()), "L_seg": float(l_seg.detach())}


def make_optimizer(model: PanopticFCN, config: TrainConfig) -> torch.optim.SGD:
    return torch.optim.SGD(model.parameters(), lr=config.lr, momentum=config.momentum,
                           weight_decay=config.weight_decay)


def train_step(batch: tuple[Tensor, Sequence[ImageTargets]], model: PanopticFCN, config: TrainConfig,
               optimizer: torch.optim.Optimizer, lr: float, indices: Sequence[int] | None = None) -> LossComponents:
    """One SGD update at learning rate ``lr``; returns the pre-update losses."""
    images, targets = batch
    model.train()
    for g in optimizer.param_groups:
        g["lr"] = lr
    optimizer.zero_grad(set_to_none=True)
    total, parts = compute_losses(model, images, targets, config, indices)
    total.backward()
    if config.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
    optimizer.step()
    return LossComponents(float(total.detach()), parts["L_pos_th"], parts["L_pos_st"], parts["L_seg"], lr)


# --------------------------------------------------------------------------- loop


def batch_order(num_images: int, batch_size: int, iterations: int, seed: int) -> list[np.ndarray]:
    """Index batches for every iteration: reshuffled epochs drawn from one seeded stream."""
    rng = np.random.default_rng(seed)
    batches: list[np.ndarray] = []
    pool = np.zeros(0, dtype=np.int64)
    while len(batches) < iterations:
        if len(pool) < batch_size:
            pool = np.concatenate([pool, rng.permutation(num_images)])
        batches.append(pool[:batch_size])
        pool = pool[batch_size:]
    return batches


@dataclass
class TrainResult:
    model: PanopticFCN
    history: list[dict]
    checkpoint: Path | None = None
    seconds: float = 0.0
    evaluations: list[dict] = field(default_factory=list)


def build_model(config: TrainConfig, categories: CategorySet | None = None) -> PanopticFCN:
    mc = config.model
    if categories is not None:
        mc = ModelConfig(**{**mc.to_dict(), "widths": tuple(mc.widths),
                            "num_things": categories.num_things, "num_stuff": categories.num_stuff})
    model = PanopticFCN(mc, seed=config.seed)
    return model.to(config.torch_dtype)


def run_training(
    dataset: Dataset,
    config: TrainConfig,
    out_dir: str | Path | None = None,
    *,
    point_annotations: Sequence[Sequence[PointAnnotation]] | None = None,
    eval_hook: Callable[[PanopticFCN, int], dict] | None = None,
    model: PanopticFCN | None = None,
) -> TrainResult:
    """Train for ``config.iterations`` steps and optionally write a checkpoint and loss log."""
    if len(dataset) == 0:
        raise ConfigurationError("training dataset is empty")
    torch.manual_seed(config.seed)
    model = model or build_model(config, dataset.categories)
    targets = prepare_targets(dataset, model, config, point_annotations)
    images = to_tensor_image([s.image for s in dataset]).to(config.torch_dtype)
    optimizer = make_optimizer(model, config)
    log_file = None
    if out_dir is not None:
        out = Path(out_dir)
        try:
            out.mkdir(parents=True, exist_ok=True)
            log_file = open(out / "loss_log.jsonl", "w")
        except OSError as exc:
            raise OSError(f"{out}: cannot write training outputs ({exc.strerror})") from exc
    history, evals = [], []
    start = time.perf_counter()
    try:
        for t, idx in enumerate(batch_order(len(dataset), config.batch_size, config.iterations, config.seed)):
            lr = poly_lr(config.lr, t, config.iterations, config.poly_power)
            comp = train_step((images[idx], [targets[i] for i in idx]), model, config, optimizer, lr, idx.tolist())
            rec = {"iteration": t, **comp.to_dict()}
            history.append(rec)
            if log_file:
                log_file.write(json.dumps(rec) + "\n")
            if t % 50 == 0:
                log.info("iter %d  L %.4f  th %.4f  st %.4f  seg %.4f  lr %.5f",
                         t, comp.L, comp.L_pos_th, comp.L_pos_st, comp.L_seg, lr)
            if eval_hook and config.eval_every and (t + 1) % config.eval_every == 0:
                metrics = {"iteration": t + 1, **eval_hook(model, t + 1)}
                evals.append(metrics)
                if log_file:
                    log_file.write(json.dumps({"eval": metrics}) + "\n")
    finally:
        if log_file:
            log_file.close()
    seconds = time.perf_counter() - start
    ckpt = None
    if out_dir is not None:
        ckpt = Path(out_dir) / "model.pfcn"
        save_checkpoint(model, ckpt)
        (Path(out_dir) / "config.json").write_text(json.dumps(config.to_dict(), indent=1))
    model.eval()
    return TrainResult(model, history, ckpt, seconds, evals)


__all__ = [
    "ImageTargets", "InstanceTarget", "LossComponents", "TrainConfig", "TrainResult", "batch_order",
    "build_model", "compute_losses", "image_targets_full", "image_targets_points", "make_optimizer",
    "poly_lr", "prepare_targets", "run_training", "train_step",
]
