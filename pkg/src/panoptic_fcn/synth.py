"""Deterministic synthetic panoptic scenes and the PNG + JSON dataset format.

A scene has two stuff regions (a wavy upper band and a textured lower area)
and up to six non-overlapping shapes (circle, square, triangle). Every pixel
belongs to exactly one segment, so ground truth has no void.

On disk a dataset directory holds, per image, ``NNNNNN.png`` (8-bit RGB) and
``NNNNNN_pan.png`` (16-bit grayscale segment ids) plus one ``annotations.json``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .errors import InputError
from .panoptic import DEFAULT_CATEGORIES, STUFF, THING, CategorySet, PanopticSegmentation, Segment

THING_COLORS = {1: (220, 60, 50), 2: (235, 200, 40), 3: (170, 60, 210)}
STUFF_COLORS = {4: (90, 150, 220), 5: (70, 140, 70)}


@dataclass
class SceneSpec:
    image_size: int = 128
    min_objects: int = 1
    max_objects: int = 6
    min_radius: float = 7.0
    max_radius: float = 22.0
    color_jitter: int = 25
    noise_std: float = 8.0
    gap: int = 2
    seed: int = 0
    max_retries: int = 60


@dataclass
class Scene:
    image: np.ndarray  # (H, W, 3) uint8
    panoptic: PanopticSegmentation
    name: str = ""


def _shape_mask(kind: int, cx: float, cy: float, r: float, size: int) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    if kind == 1:
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
    if kind == 2:
        return (np.abs(xs - cx) <= r * 0.85) & (np.abs(ys - cy) <= r * 0.85)
    # upward triangle inscribed in the circle of radius r
    top = (cx, cy - r)
    left = (cx - r * 0.87, cy + r * 0.5)
    right = (cx + r * 0.87, cy + r * 0.5)
    return _inside_triangle(xs, ys, top, left, right)


def _inside_triangle(xs, ys, a, b, c) -> np.ndarray:
    def edge(p, q):
        return (q[0] - p[0]) * (ys - p[1]) - (q[1] - p[1]) * (xs - p[0])

    e1, e2, e3 = edge(a, b), edge(b, c), edge(c, a)
    return ((e1 >= 0) & (e2 >= 0) & (e3 >= 0)) | ((e1 <= 0) & (e2 <= 0) & (e3 <= 0))


def _dilate(mask: np.ndarray, r: int) -> np.ndarray:
    if r <= 0:
        return mask
    from scipy.ndimage import binary_dilation

    return binary_dilation(mask, iterations=r)


def generate_scene(spec: SceneSpec, index: int, categories: CategorySet = DEFAULT_CATEGORIES) -> Scene:
    """Scene ``index`` of the stream defined by ``spec`` (same inputs, same bytes)."""
    rng = np.random.default_rng([spec.seed, index])
    n = spec.image_size
    ys, xs = np.mgrid[0:n, 0:n].astype(np.float64)

    upper_id, lower_id = categories.stuff_ids[:2]
    base = rng.uniform(0.3, 0.6) * n
    amp = rng.uniform(2.0, 8.0)
    freq = rng.uniform(0.5, 2.0) * 2 * np.pi / n
    phase = rng.uniform(0, 2 * np.pi)
    upper = ys < base + amp * np.sin(freq * xs + phase)

    img = np.zeros((n, n, 3), dtype=np.float64)
    up_col = np.asarray(STUFF_COLORS.get(upper_id, (90, 150, 220))) + rng.integers(-spec.color_jitter, spec.color_jitter + 1, 3)
    lo_col = np.asarray(STUFF_COLORS.get(lower_id, (70, 140, 70))) + rng.integers(-spec.color_jitter, spec.color_jitter + 1, 3)
    shade = (ys / n)[..., None] * 30.0
    img[upper] = (up_col + shade)[upper]
    stripes = 18.0 * np.sign(np.sin(xs * rng.uniform(0.4, 0.9) + ys * rng.uniform(0.2, 0.6)))[..., None]
    img[~upper] = (lo_col + stripes)[~upper]

    id_map = np.where(upper, 1, 2).astype(np.int32)
    segments = [Segment(1, upper_id, STUFF), Segment(2, lower_id, STUFF)]
    occupied = np.zeros((n, n), dtype=bool)
    count = int(rng.integers(spec.min_objects, spec.max_objects + 1)) if spec.max_objects > 0 else 0
    next_id = 3
    for _ in range(count):
        for _attempt in range(spec.max_retries):
            cat = int(rng.choice(categories.thing_ids))
            r = rng.uniform(spec.min_radius, spec.max_radius)
            cx = rng.uniform(r, n - 1 - r)
            cy = rng.uniform(r, n - 1 - r)
            shape = categories.thing_ids.index(cat) + 1
            mask = _shape_mask(shape, cx, cy, r, n)
            if mask.sum() < 16 or (_dilate(mask, spec.gap) & occupied).any():
                continue
            col = np.asarray(THING_COLORS.get(cat, (200, 200, 200))) + rng.integers(-spec.color_jitter, spec.color_jitter + 1, 3)
            img[mask] = col
            occupied |= mask
            id_map[mask] = next_id
            segments.append(Segment(next_id, cat, THING))
            next_id += 1
            break
    img += rng.normal(0.0, spec.noise_std, img.shape)
    image = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    # a stuff region can vanish entirely under objects
    present = set(np.unique(id_map).tolist())
    segments = [s for s in segments if s.id in present]
    pan = PanopticSegmentation(id_map, segments).with_areas()
    pan.validate()
    return Scene(image, pan, f"{index:06d}")


def generate_scenes(spec: SceneSpec, count: int, start: int = 0) -> list[Scene]:
    return [generate_scene(spec, i) for i in range(start, start + count)]


# --------------------------------------------------------------------------- IO


@dataclass
class Dataset:
    scenes: list[Scene]
    categories: CategorySet = field(default_factory=lambda: DEFAULT_CATEGORIES)
    root: Path | None = None

    def __len__(self) -> int:
        return len(self.scenes)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return Dataset(self.scenes[i], self.categories, self.root)
        return self.scenes[i]

    def __iter__(self):
        return iter(self.scenes)


def _segment_json(s: Segment) -> dict:
    d = {"category": s.category, "kind": s.kind, "area": s.area}
    if s.score != 1.0:
        d["score"] = s.score
    return d


def write_panoptic_png(id_map: np.ndarray, path: Path) -> None:
    if id_map.max(initial=0) > 65535 or id_map.min(initial=0) < 0:
        raise InputError(f"{path}: segment ids must fit in 16 bits")
    Image.fromarray(id_map.astype(np.uint16)).save(path)


def read_panoptic_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.array(im)
    return arr.astype(np.int32)


def write_dataset(scenes: Iterable[Scene], directory: str | Path,
                  categories: CategorySet = DEFAULT_CATEGORIES) -> Path:
    """Write images, 16-bit id maps and ``annotations.json`` into ``directory``."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    images = []
    for i, sc in enumerate(scenes):
        name = sc.name or f"{i:06d}"
        if sc.image is not None:
            Image.fromarray(sc.image).save(root / f"{name}.png")
        write_panoptic_png(sc.panoptic.id_map, root / f"{name}_pan.png")
        h, w = sc.panoptic.id_map.shape
        images.append({
            "file_name": f"{name}.png",
            "pan_file_name": f"{name}_pan.png",
            "height": h,
            "width": w,
            "segments": {str(s.id): _segment_json(s) for s in sc.panoptic.segments},
        })
    doc = {"images": images, "categories": categories.to_json()}
    (root / "annotations.json").write_text(json.dumps(doc, indent=1))
    return root


def read_dataset(directory: str | Path, *, load_images: bool = True) -> Dataset:
    """Inverse of :func:`write_dataset`."""
    root = Path(directory)
    ann_path = root / "annotations.json"
    try:
        doc = json.loads(ann_path.read_text())
    except FileNotFoundError:
        raise InputError(f"{ann_path}: not found") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{ann_path}: invalid JSON ({exc})") from None
    for key in ("images", "categories"):
        if key not in doc:
            raise InputError(f"{ann_path}: missing field {key!r}")
    categories = CategorySet.from_json(doc["categories"])
    scenes = []
    for k, rec in enumerate(doc["images"]):
        try:
            pan_path = root / rec["pan_file_name"]
            segs = [
                Segment(int(sid), int(s["category"]), s["kind"], float(s.get("score", 1.0)), int(s["area"]))
                for sid, s in rec["segments"].items()
            ]
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"{ann_path}: images[{k}] malformed field {exc}") from None
        if not pan_path.exists():
            raise InputError(f"{pan_path}: missing id map for images[{k}]")
        id_map = read_panoptic_png(pan_path)
        image = None
        if load_images:
            img_path = root / rec["file_name"]
            if img_path.exists():
                with Image.open(img_path) as im:
                    image = np.array(im.convert("RGB"))
        name = Path(rec["pan_file_name"]).name.removesuffix("_pan.png")
        scenes.append(Scene(image, PanopticSegmentation(id_map, segs), name))
    return Dataset(scenes, categories, root)


def spec_to_json(spec: SceneSpec) -> dict:
    return asdict(spec)


def make_synth_dataset(directory: str | Path, count: int, spec: SceneSpec | None = None, start: int = 0) -> Path:
    spec = spec or SceneSpec()
    return write_dataset(generate_scenes(spec, count, start), directory)


def to_tensor_image(images: Sequence[np.ndarray]):
    """Stack uint8 ``(H, W, 3)`` images into a normalized float ``(B, 3, H, W)`` tensor."""
    import torch

    arr = np.stack(images).astype(np.float32)
    arr = (arr / 255.0 - 0.5) / 0.25
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()
