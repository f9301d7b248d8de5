"""Panoptic segmentation records and the category table shared by every module."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

THING = "thing"
STUFF = "stuff"


@dataclass(frozen=True)
class Category:
    id: int
    name: str
    kind: str


@dataclass
class CategorySet:
    """Dataset categories; things and stuff each get a contiguous head index."""

    categories: list[Category]

    def __post_init__(self):
        self.by_id = {c.id: c for c in self.categories}
        self.thing_ids = [c.id for c in self.categories if c.kind == THING]
        self.stuff_ids = [c.id for c in self.categories if c.kind == STUFF]
        if len(self.by_id) != len(self.categories):
            raise ValidationError("duplicate category ids")

    @property
    def num_things(self) -> int:
        return len(self.thing_ids)

    @property
    def num_stuff(self) -> int:
        return len(self.stuff_ids)

    def thing_index(self, cat_id: int) -> int:
        return self.thing_ids.index(cat_id)

    def stuff_index(self, cat_id: int) -> int:
        return self.stuff_ids.index(cat_id)

    def kind(self, cat_id: int) -> str:
        return self.by_id[cat_id].kind

    def to_json(self) -> dict:
        return {str(c.id): {"name": c.name, "kind": c.kind} for c in self.categories}

    @classmethod
    def from_json(cls, data: dict) -> "CategorySet":
        return cls([Category(int(k), v["name"], v["kind"]) for k, v in sorted(data.items(), key=lambda kv: int(kv[0]))])


DEFAULT_CATEGORIES = CategorySet([
    Category(1, "circle", THING),
    Category(2, "square", THING),
    Category(3, "triangle", THING),
    Category(4, "upper-band", STUFF),
    Category(5, "lower-texture", STUFF),
])


@dataclass
class Segment:
    id: int
    category: int
    kind: str
    score: float = 1.0
    area: int = 0


@dataclass
class PanopticSegmentation:
    """Per-pixel segment ids (0 = void) plus one record per nonzero id."""

    id_map: np.ndarray
    segments: list[Segment] = field(default_factory=list)

    def by_id(self) -> dict[int, Segment]:
        return {s.id: s for s in self.segments}

    def validate(self) -> None:
        ids_in_map = set(np.unique(self.id_map).tolist()) - {0}
        ids = [s.id for s in self.segments]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate segment ids")
        if 0 in ids:
            raise ValidationError("segment id 0 is reserved for void")
        if ids_in_map != set(ids):
            missing = sorted(ids_in_map ^ set(ids))
            raise ValidationError(f"id_map and segment records disagree on ids {missing}")
        stuff_cats = [s.category for s in self.segments if s.kind == STUFF]
        if len(stuff_cats) != len(set(stuff_cats)):
            raise ValidationError("more than one stuff segment for a category")
        for s in self.segments:
            if s.kind not in (THING, STUFF):
                raise ValidationError(f"segment {s.id}: bad kind {s.kind!r}")

    def with_areas(self) -> "PanopticSegmentation":
        ids, counts = np.unique(self.id_map, return_counts=True)
        area = dict(zip(ids.tolist(), counts.tolist()))
        for s in self.segments:
            s.area = int(area.get(s.id, 0))
        return self

    def semantic(self, void: int = 0) -> np.ndarray:
        """Category id per pixel (``void`` where the id map is 0)."""
        lut = np.full(int(self.id_map.max()) + 1, void, dtype=np.int64)
        for s in self.segments:
            lut[s.id] = s.category
        return lut[self.id_map]

    def __eq__(self, other) -> bool:
        if not isinstance(other, PanopticSegmentation):
            return NotImplemented
        return np.array_equal(self.id_map, other.id_map) and self.segments == other.segments


def empty_segmentation(height: int, width: int) -> PanopticSegmentation:
    return PanopticSegmentation(np.zeros((height, width), dtype=np.int32), [])
