"""Panoptic ground-truth / prediction I/O and vocabulary handling.

Panoptic maps travel as an 8-bit RGB PNG whose pixel encodes the segment id
as ``id = R + 256*G + 65536*B`` (id 0 = void), plus a JSON side file listing
every nonzero segment id with its category, thing/stuff flag and score.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

ID_ENCODING_LIMIT = 1 << 24  # ids must fit in 3 PNG channels


class PanopticFormatError(ValueError):
    """Raised when a panoptic PNG/JSON pair violates the interchange format."""


@dataclass(frozen=True)
class Category:
    id: int
    name: str
    is_thing: bool


def normalize_name(name: str) -> str:
    return name.strip().lower()


@dataclass
class Vocabulary:
    """Ordered category list for one dataset plus an optional seen-name list.

    The row order of ``categories`` is the class-index order used by text
    embeddings and class distributions everywhere else in the pipeline.
    """

    categories: list[Category]
    seen_names: list[str] | None = None

    def __post_init__(self) -> None:
        ids = [c.id for c in self.categories]
        if len(set(ids)) != len(ids):
            raise ValueError("vocabulary category ids must be unique")
        names = [normalize_name(c.name) for c in self.categories]
        if len(set(names)) != len(names):
            raise ValueError("vocabulary category names must be unique after normalization")

    @property
    def size(self) -> int:
        return len(self.categories)

    def index_of_id(self, cat_id: int) -> int:
        for i, c in enumerate(self.categories):
            if c.id == cat_id:
                return i
        raise KeyError(f"unknown category id {cat_id}")

    def id_of_index(self, index: int) -> int:
        return self.categories[index].id

    def is_thing_id(self, cat_id: int) -> bool:
        return self.categories[self.index_of_id(cat_id)].is_thing

    def to_json_obj(self) -> dict:
        obj = {
            "categories": [
                {"id": c.id, "name": c.name, "isthing": bool(c.is_thing)}
                for c in self.categories
            ]
        }
        if self.seen_names is not None:
            obj["seen_names"] = list(self.seen_names)
        return obj

    @classmethod
    def from_json_obj(cls, obj: dict) -> "Vocabulary":
        cats = [
            Category(id=int(c["id"]), name=str(c["name"]), is_thing=bool(c["isthing"]))
            for c in obj["categories"]
        ]
        seen = obj.get("seen_names")
        return cls(categories=cats, seen_names=list(seen) if seen is not None else None)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json_obj(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls.from_json_obj(json.loads(Path(path).read_text()))


@dataclass
class SegmentInfo:
    id: int
    category: int  # vocabulary category id
    is_thing: bool
    score: float


@dataclass
class PanopticMap:
    """Per-pixel segment ids (0 = void) plus the segment table."""

    segment_ids: np.ndarray  # (H, W) int32
    segments: list[SegmentInfo] = field(default_factory=list)

    @property
    def shape(self) -> tuple[int, int]:
        return self.segment_ids.shape  # type: ignore[return-value]

    def segment_by_id(self, seg_id: int) -> SegmentInfo:
        for s in self.segments:
            if s.id == seg_id:
                return s
        raise KeyError(f"segment id {seg_id} not in table")


@dataclass
class GroundTruth:
    """Binary masks with class labels; thing masks are pairwise disjoint."""

    y_mask: np.ndarray  # (N_mask, H, W) bool
    y_class: np.ndarray  # (N_mask,) int, vocabulary indices
    is_thing: np.ndarray  # (N_mask,) bool

    @property
    def n_masks(self) -> int:
        return int(self.y_mask.shape[0])


def encode_ids(ids: np.ndarray) -> np.ndarray:
    """Segment-id grid -> (H, W, 3) uint8 RGB, id = R + 256*G + 65536*B."""
    if np.any(ids < 0) or np.any(ids >= ID_ENCODING_LIMIT):
        raise PanopticFormatError("segment ids must be in [0, 2^24)")
    ids = ids.astype(np.uint32)
    rgb = np.empty(ids.shape + (3,), dtype=np.uint8)
    rgb[..., 0] = ids % 256
    rgb[..., 1] = (ids // 256) % 256
    rgb[..., 2] = ids // 65536
    return rgb


def decode_ids(rgb: np.ndarray) -> np.ndarray:
    r = rgb[..., 0].astype(np.int32)
    g = rgb[..., 1].astype(np.int32)
    b = rgb[..., 2].astype(np.int32)
    return r + 256 * g + 65536 * b


def write_panoptic(pan: PanopticMap, png_path: str | Path, segments_json: str | Path) -> None:
    ids_present = set(np.unique(pan.segment_ids).tolist()) - {0}
    table_ids = [s.id for s in pan.segments]
    if len(set(table_ids)) != len(table_ids):
        raise PanopticFormatError("duplicate segment id in table")
    if ids_present != set(table_ids):
        raise PanopticFormatError(
            f"segment table ids {sorted(table_ids)} do not match PNG ids {sorted(ids_present)}"
        )
    rgb = encode_ids(pan.segment_ids)
    Image.fromarray(rgb, mode="RGB").save(str(png_path), format="PNG")
    obj = {
        "segments_info": [
            {
                "id": int(s.id),
                "category_id": int(s.category),
                "isthing": bool(s.is_thing),
                "score": float(s.score),
            }
            for s in sorted(pan.segments, key=lambda s: s.id)
        ]
    }
    Path(segments_json).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_panoptic(png_path: str | Path, segments_json: str | Path) -> PanopticMap:
    with Image.open(str(png_path)) as im:
        if im.mode != "RGB":
            raise PanopticFormatError(f"panoptic PNG must be 8-bit RGB, got mode {im.mode}")
        rgb = np.asarray(im, dtype=np.uint8)
    ids = decode_ids(rgb)
    obj = json.loads(Path(segments_json).read_text())
    segments = [
        SegmentInfo(
            id=int(s["id"]),
            category=int(s["category_id"]),
            is_thing=bool(s["isthing"]),
            score=float(s.get("score", 1.0)),
        )
        for s in obj["segments_info"]
    ]
    ids_present = set(np.unique(ids).tolist()) - {0}
    table_ids = {s.id for s in segments}
    missing = ids_present - table_ids
    if missing:
        raise PanopticFormatError(f"PNG ids missing from JSON table: {sorted(missing)}")
    extra = table_ids - ids_present
    if extra:
        raise PanopticFormatError(f"JSON table ids absent from PNG: {sorted(extra)}")
    return PanopticMap(segment_ids=ids.astype(np.int32), segments=segments)


def gt_from_panoptic(pan: PanopticMap, vocab: Vocabulary) -> GroundTruth:
    """One binary mask per segment; stuff segments of one category are merged."""
    masks: list[np.ndarray] = []
    classes: list[int] = []
    things: list[bool] = []
    stuff_rows: dict[int, int] = {}  # category id -> row index
    for seg in sorted(pan.segments, key=lambda s: s.id):
        m = pan.segment_ids == seg.id
        if not m.any():
            raise ValueError(f"segment {seg.id} has no pixels")
        if seg.is_thing:
            masks.append(m)
            classes.append(vocab.index_of_id(seg.category))
            things.append(True)
        elif seg.category in stuff_rows:
            masks[stuff_rows[seg.category]] |= m
        else:
            stuff_rows[seg.category] = len(masks)
            masks.append(m)
            classes.append(vocab.index_of_id(seg.category))
            things.append(False)
    return GroundTruth(
        y_mask=np.stack(masks) if masks else np.zeros((0,) + pan.shape, dtype=bool),
        y_class=np.asarray(classes, dtype=np.int64),
        is_thing=np.asarray(things, dtype=bool),
    )


def overlap_mask(
    test_vocab: Vocabulary,
    train_names: list[str],
    synonyms: dict[str, str] | None = None,
) -> np.ndarray:
    """Boolean vector over test categories: True where the category belongs
    to the training vocabulary, by exact match after normalization or via an
    explicit synonym table mapping test names to train names."""
    train = {normalize_name(n) for n in train_names}
    syn = {normalize_name(k): normalize_name(v) for k, v in (synonyms or {}).items()}
    out = np.zeros(test_vocab.size, dtype=bool)
    for i, cat in enumerate(test_vocab.categories):
        name = normalize_name(cat.name)
        out[i] = name in train or syn.get(name) in train
    return out
