"""Position head, kernel head, position targets and the position loss."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import TrainingError
from .nn_core import ConvBlock, bilinear_resize, coord_channels

log = logging.getLogger(__name__)

FOCAL_ALPHA = 2.0
FOCAL_BETA = 4.0
PROB_CLAMP = 1e-4
DEFAULT_SCALE_RANGES = (32.0, 64.0)


class PositionHead(nn.Module):
    """Shared conv stack followed by one 3x3 conv emitting thing + stuff logits.

    The same instance is applied to every pyramid stage.
    """

    def __init__(self, in_channels: int, num_things: int, num_stuff: int,
                 channels: int = 128, num_convs: int = 3, prior: float = 0.01):
        super().__init__()
        self.num_things = num_things
        self.num_stuff = num_stuff
        self.encode = ConvBlock(in_channels, channels, num_convs)
        self.out = nn.Conv2d(channels, num_things + num_stuff, 3, padding=1)
        self.prior = prior

    def reset_output_bias(self) -> None:
        # low initial heatmap response keeps the summed focal loss small at step 0
        with torch.no_grad():
            self.out.bias[: self.num_things].fill_(-math.log((1 - self.prior) / self.prior))

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Return ``(X', thing_logits, stuff_logits)`` for a ``(B, C, H, W)`` stage."""
        shared = self.encode(x)
        logits = self.out(shared)
        return shared, logits[:, : self.num_things], logits[:, self.num_things:]


class KernelHead(nn.Module):
    """Coordinate-augmented conv stack producing the kernel weight map ``G_i``."""

    def __init__(self, in_channels: int, kernel_dim: int = 64, channels: int = 128,
                 num_convs: int = 3, use_coords: bool = True):
        super().__init__()
        self.use_coords = use_coords
        self.kernel_dim = kernel_dim
        self.encode = ConvBlock(in_channels + (2 if use_coords else 0), channels, num_convs)
        self.out = nn.Conv2d(channels, kernel_dim, 3, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        if self.use_coords:
            b, _, h, w = x.shape
            x = torch.cat([x, coord_channels(h, w, batch=b, dtype=x.dtype, device=x.device)], 1)
        return self.out(self.encode(x))


def position_head_forward(stage: Tensor, head: PositionHead) -> tuple[Tensor, Tensor, Tensor]:
    """Per-stage position maps after the logistic activation.

    Returns ``(X', L_th, L_st)`` with the maps in ``[0, 1]``.
    """
    squeeze = stage.dim() == 3
    x = stage.unsqueeze(0) if squeeze else stage
    shared, th, st = head(x)
    th, st = torch.sigmoid(th), torch.sigmoid(st)
    if squeeze:
        return shared[0], th[0], st[0]
    return shared, th, st


def kernel_head_forward(stage: Tensor, head: KernelHead) -> Tensor:
    squeeze = stage.dim() == 3
    g = head(stage.unsqueeze(0) if squeeze else stage)
    return g[0] if squeeze else g


# --------------------------------------------------------------------------- targets


def gaussian_radius(extent_h: float, extent_w: float) -> int:
    """Radius of the largest circle inside an ``extent_h x extent_w`` box (grid cells), at least 1."""
    return max(1, int(math.floor(min(extent_h, extent_w) / 2.0)))


def gaussian_sigma(radius: int) -> float:
    return (2 * radius + 1) / 3.0


def gaussian_plane(shape: tuple[int, int], center: tuple[int, int], sigma: float) -> np.ndarray:
    """``exp(-((x - cx)^2 + (y - cy)^2) / (2 sigma^2))`` over a ``(H, W)`` grid."""
    h, w = shape
    cx, cy = center
    ys = np.arange(h, dtype=np.float64)[:, None]
    xs = np.arange(w, dtype=np.float64)[None, :]
    return np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * sigma * sigma))


def assign_stage(area: float, num_stages: int,
                 scale_ranges: Sequence[float] = DEFAULT_SCALE_RANGES) -> int:
    """Stage index from ``sqrt(area)`` in input pixels against ascending bounds."""
    scale = math.sqrt(max(area, 0.0))
    stage = int(np.searchsorted(np.asarray(scale_ranges), scale, side="right"))
    return min(stage, num_stages - 1)


def mass_center(mask: np.ndarray) -> tuple[float, float]:
    ys, xs = np.nonzero(mask)
    return float(xs.mean()), float(ys.mean())


def box_center(mask: np.ndarray) -> tuple[float, float]:
    ys, xs = np.nonzero(mask)
    return (xs.min() + xs.max()) / 2.0, (ys.min() + ys.max()) / 2.0


def to_stage_coords(value: float, stride: int) -> float:
    """Image pixel coordinate -> stage grid coordinate (cell centers at integers)."""
    return (value - (stride - 1) / 2.0) / stride


def downsample_mask(mask: np.ndarray, stride: int, thresh: float = 0.5) -> np.ndarray:
    """Cells whose ``stride x stride`` block is covered by at least ``thresh`` of the mask."""
    frac = block_fraction(mask, stride)
    return frac >= thresh


def block_fraction(mask: np.ndarray, stride: int) -> np.ndarray:
    h, w = mask.shape
    hh, ww = h // stride, w // stride
    return mask[: hh * stride, : ww * stride].reshape(hh, stride, ww, stride).mean(axis=(1, 3))


@dataclass
class ThingObject:
    """One annotated object as seen by target construction.

    ``region`` is the binary region in image pixels (a GT mask, or a generated
    target for point supervision). ``center`` overrides the center derived from
    ``region`` (used for simulated centers).
    """

    category: int
    region: np.ndarray
    center: tuple[float, float] | None = None


@dataclass
class ThingRecord:
    category: int
    stage: int
    center: tuple[int, int]
    radius: int
    sigma: float
    region: np.ndarray  # bool, stage resolution
    source: int  # index into the object list


@dataclass
class ThingTargets:
    heatmaps: list[np.ndarray]  # per stage (N_th, H_i, W_i)
    records: list[ThingRecord] = field(default_factory=list)


def make_thing_targets(
    objects: Sequence[ThingObject],
    stage_shapes: Sequence[tuple[int, int]],
    strides: Sequence[int],
    num_things: int,
    *,
    center_mode: str = "mass",
    scale_ranges: Sequence[float] = DEFAULT_SCALE_RANGES,
) -> ThingTargets:
    """Gaussian center heatmaps, one plane per thing category per stage.

    Each object is assigned one stage by its size, centered at its mass (or box)
    center rounded to the stage grid, and written with the size-adaptive
    ``sigma = (2r + 1) / 3``. Overlapping Gaussians combine by maximum.
    """
    if center_mode not in ("mass", "box"):
        raise ValueError(f"center_mode must be 'mass' or 'box', got {center_mode!r}")
    heatmaps = [np.zeros((num_things, h, w), dtype=np.float64) for h, w in stage_shapes]
    records: list[ThingRecord] = []
    for idx, obj in enumerate(objects):
        region = np.asarray(obj.region, dtype=bool)
        if not region.any():
            log.warning("object %d has an empty region; skipped", idx)
            continue
        stage = assign_stage(region.sum(), len(stage_shapes), scale_ranges)
        stride = strides[stage]
        h, w = stage_shapes[stage]
        if obj.center is not None:
            cx, cy = obj.center
        else:
            cx, cy = mass_center(region) if center_mode == "mass" else box_center(region)
        gx = int(np.clip(round(to_stage_coords(cx, stride)), 0, w - 1))
        gy = int(np.clip(round(to_stage_coords(cy, stride)), 0, h - 1))
        ys, xs = np.nonzero(region)
        radius = gaussian_radius((ys.max() - ys.min() + 1) / stride, (xs.max() - xs.min() + 1) / stride)
        sigma = gaussian_sigma(radius)
        plane = gaussian_plane((h, w), (gx, gy), sigma)
        np.maximum(heatmaps[stage][obj.category], plane, out=heatmaps[stage][obj.category])
        stage_region = downsample_mask(region, stride)
        stage_region[gy, gx] = True
        records.append(ThingRecord(obj.category, stage, (gx, gy), radius, sigma, stage_region, idx))
    return ThingTargets(heatmaps, records)


@dataclass
class StuffTargets:
    planes: list[np.ndarray]  # per stage (N_st, H_i, W_i)
    valid: list[np.ndarray]  # per stage (H_i, W_i) bool, False where ignored


def make_stuff_targets(
    stuff_labels: np.ndarray,
    stage_shapes: Sequence[tuple[int, int]],
    num_stuff: int,
    ignore: np.ndarray | None = None,
) -> StuffTargets:
    """Bilinearly resized one-hot stuff planes per stage.

    ``stuff_labels`` holds a stuff index per pixel, or -1 for pixels that are
    not stuff (things). Pixels flagged in ``ignore`` are left out: the resized
    planes are renormalized by the labeled fraction, and stage cells that are
    mostly ignored are excluded from the loss.
    """
    labels = np.asarray(stuff_labels)
    ign = np.zeros(labels.shape, bool) if ignore is None else np.asarray(ignore, bool)
    onehot = np.zeros((num_stuff, *labels.shape), dtype=np.float64)
    for c in range(num_stuff):
        onehot[c] = (labels == c) & ~ign
    labeled = torch.from_numpy((~ign).astype(np.float64))
    onehot_t = torch.from_numpy(onehot)
    planes, valid = [], []
    for h, w in stage_shapes:
        frac = bilinear_resize(labeled, (h, w)).numpy()
        p = bilinear_resize(onehot_t, (h, w)).numpy()
        ok = frac >= 0.5
        p = np.where(ok[None], p / np.maximum(frac, 1e-12)[None], 0.0)
        planes.append(np.clip(p, 0.0, 1.0))
        valid.append(ok)
    return StuffTargets(planes, valid)


# --------------------------------------------------------------------------- loss


def focal_loss(pred: Tensor, target: Tensor, mask: Tensor | None = None,
               alpha: float = FOCAL_ALPHA, beta: float = FOCAL_BETA) -> Tensor:
    """Penalty-reduced pixel-wise focal loss, summed over all entries.

    Positives (``target == 1``) cost ``(1 - p)^alpha * -log p``; everything else
    costs ``(1 - y)^beta * p^alpha * -log(1 - p)``.
    """
    if torch.isnan(pred).any() or torch.isnan(target).any():
        raise TrainingError("NaN in focal loss inputs")
    p = pred.clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    pos = target.eq(1).to(p.dtype)
    pos_term = (1 - p) ** alpha * -torch.log(p) * pos
    neg_term = (1 - target) ** beta * p ** alpha * -torch.log(1 - p) * (1 - pos)
    terms = pos_term + neg_term
    if mask is not None:
        terms = terms * mask.to(terms.dtype)
    return terms.sum()


def position_loss(
    thing_maps: Sequence[Tensor],
    stuff_maps: Sequence[Tensor],
    thing_targets: Sequence[Tensor],
    stuff_targets: Sequence[Tensor],
    stuff_valid: Sequence[Tensor] | None = None,
    *,
    thing_norm: str = "categories",
    num_instances: int = 0,
) -> tuple[Tensor, Tensor, Tensor]:
    """``(L_pos_th, L_pos_st, L_pos)`` for one image.

    The thing term sums the focal loss over stages and divides by the number of
    thing categories (``thing_norm="categories"``) or by the instance count
    (``"instances"``); each stage's stuff term is divided by that stage's area.
    """
    if thing_norm not in ("categories", "instances"):
        raise ValueError(f"unknown thing_norm {thing_norm!r}")
    th = thing_maps[0].new_zeros(())
    st = thing_maps[0].new_zeros(())
    for i, (p, y) in enumerate(zip(thing_maps, thing_targets)):
        if p.shape != y.shape:
            raise ValueError(f"stage {i}: thing map {tuple(p.shape)} vs target {tuple(y.shape)}")
        th = th + focal_loss(p, y)
    n_th = thing_maps[0].shape[-3]
    th = th / (n_th if thing_norm == "categories" else max(num_instances, 1))
    for i, (p, y) in enumerate(zip(stuff_maps, stuff_targets)):
        if p.shape != y.shape:
            raise ValueError(f"stage {i}: stuff map {tuple(p.shape)} vs target {tuple(y.shape)}")
        mask = None if stuff_valid is None else stuff_valid[i].unsqueeze(0).expand_as(p)
        st = st + focal_loss(p, y, mask) / (p.shape[-1] * p.shape[-2])
    return th, st, th + st


# --------------------------------------------------------------------------- inference positions


@dataclass
class PositionSet:
    """Thing peaks (parallel arrays) and per-stage arg-max stuff assignments."""

    thing_stage: np.ndarray
    thing_category: np.ndarray
    thing_x: np.ndarray
    thing_y: np.ndarray
    thing_score: np.ndarray
    stuff_assignment: list[np.ndarray] = field(default_factory=list)  # per stage (H_i, W_i)
    stuff_score: list[np.ndarray] = field(default_factory=list)  # per stage (H_i, W_i)

    @property
    def num_things(self) -> int:
        return len(self.thing_score)

    @property
    def categories(self) -> set[tuple[str, int]]:
        out = {("thing", int(c)) for c in self.thing_category}
        for a in self.stuff_assignment:
            out |= {("stuff", int(c)) for c in np.unique(a)}
        return out

    def stuff_cells(self) -> list[tuple[int, int, int, int]]:
        """D_st as ``(stage, category, x, y)`` tuples grouped by category within each stage."""
        cells = []
        for s, a in enumerate(self.stuff_assignment):
            for c in np.unique(a):
                ys, xs = np.nonzero(a == c)
                cells.extend((s, int(c), int(x), int(y)) for x, y in zip(xs, ys))
        return cells


def _empty_int() -> np.ndarray:
    return np.zeros(0, dtype=np.int64)


def extract_thing_positions(thing_maps: Sequence[Tensor], score_floor: float = 0.05) -> PositionSet:
    """Peaks of each stage's thing heatmap: cells equal to their 3x3 max-pool above the floor."""
    stages, cats, xs, ys, scores = [], [], [], [], []
    for s, m in enumerate(thing_maps):
        m = m.detach()
        pooled = F.max_pool2d(m.unsqueeze(0), 3, stride=1, padding=1)[0]
        peak = (m == pooled) & (m > score_floor)
        c, y, x = torch.nonzero(peak, as_tuple=True)
        stages.append(np.full(len(c), s, dtype=np.int64))
        cats.append(c.numpy())
        xs.append(x.numpy())
        ys.append(y.numpy())
        scores.append(m[c, y, x].double().numpy())
    if not stages:
        return PositionSet(_empty_int(), _empty_int(), _empty_int(), _empty_int(), np.zeros(0))
    return PositionSet(np.concatenate(stages), np.concatenate(cats), np.concatenate(xs),
                       np.concatenate(ys), np.concatenate(scores))


def extract_stuff_positions(stuff_maps: Sequence[Tensor], positions: PositionSet | None = None) -> PositionSet:
    """Assign every cell its arg-max stuff category (lowest index wins ties)."""
    if positions is None:
        positions = PositionSet(_empty_int(), _empty_int(), _empty_int(), _empty_int(), np.zeros(0))
    positions.stuff_assignment = []
    positions.stuff_score = []
    for m in stuff_maps:
        arr = m.detach().double().numpy()
        # np.argmax returns the first maximal index, i.e. the lowest category on ties
        a = np.argmax(arr, axis=0)
        positions.stuff_assignment.append(a)
        positions.stuff_score.append(np.take_along_axis(arr, a[None], 0)[0])
    return positions


@dataclass
class KernelCandidates:
    """Selected kernel vectors with their tags (one row per position)."""

    vectors: Tensor  # (M, C_e)
    category: np.ndarray
    score: np.ndarray
    stage: np.ndarray

    def __len__(self) -> int:
        return len(self.category)


def select_kernels(kernel_maps: Sequence[Tensor], positions: PositionSet) -> tuple[KernelCandidates, KernelCandidates]:
    """Gather ``G_i[:, y, x]`` at every thing peak and every stuff cell."""
    c_e = kernel_maps[0].shape[0]
    dtype = kernel_maps[0].dtype
    th_vecs = []
    for s, g in enumerate(kernel_maps):
        sel = positions.thing_stage == s
        if not sel.any():
            continue
        xs, ys = positions.thing_x[sel], positions.thing_y[sel]
        h, w = g.shape[-2:]
        if (xs < 0).any() or (xs >= w).any() or (ys < 0).any() or (ys >= h).any():
            raise IndexError(f"thing position out of bounds for stage {s}")
        th_vecs.append(g[:, torch.from_numpy(ys), torch.from_numpy(xs)].T)
    order = np.argsort(positions.thing_stage, kind="stable")
    things = KernelCandidates(
        torch.cat(th_vecs) if th_vecs else kernel_maps[0].new_zeros((0, c_e), dtype=dtype),
        positions.thing_category[order], positions.thing_score[order], positions.thing_stage[order],
    )
    st_vecs, st_cat, st_score, st_stage = [], [], [], []
    for s, (g, a) in enumerate(zip(kernel_maps, positions.stuff_assignment)):
        flat = g.reshape(c_e, -1).T
        st_vecs.append(flat)
        st_cat.append(a.reshape(-1))
        st_score.append(positions.stuff_score[s].reshape(-1))
        st_stage.append(np.full(a.size, s, dtype=np.int64))
    stuff = KernelCandidates(
        torch.cat(st_vecs) if st_vecs else kernel_maps[0].new_zeros((0, c_e)),
        np.concatenate(st_cat) if st_cat else _empty_int(),
        np.concatenate(st_score) if st_score else np.zeros(0),
        np.concatenate(st_stage) if st_stage else _empty_int(),
    )
    return things, stuff


def topk_cells(score_map: np.ndarray | Tensor, region: np.ndarray, k: int = 7) -> tuple[np.ndarray, np.ndarray]:
    """Coordinates ``(ys, xs)`` of the ``k`` highest-scoring cells inside ``region``.

    ``k`` is clipped to the region size; ties resolve to the lower flat index.
    """
    if isinstance(score_map, Tensor):
        score_map = score_map.detach().double().numpy()
    ys, xs = np.nonzero(region)
    if len(ys) == 0:
        return ys, xs
    vals = score_map[ys, xs]
    kk = min(k, len(vals))
    order = np.argsort(-vals, kind="stable")[:kk]
    return ys[order], xs[order]
