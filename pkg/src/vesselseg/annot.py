"""Polygon annotation parsing, filtering, and dataset indexing.

The annotation source is line-delimited JSON: one object per line with an
``id`` string and an ``annotations`` array. Each annotation has a ``type``
(one of ``blood_vessel``, ``glomerulus``, ``unsure``) and ``coordinates``,
an array of rings where each ring is an array of ``[x, y]`` pairs. Rings of
one annotation are flattened into separate polygons (union semantics, no
holes).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import AnnotationError, DataError

DEFAULT_TILE_SIZE = 512.0


class ClassLabel(Enum):
    BLOOD_VESSEL = "blood_vessel"
    GLOMERULUS = "glomerulus"
    UNSURE = "unsure"

    @classmethod
    def from_string(cls, s: str) -> "ClassLabel":
        for label in cls:
            if label.value == s:
                return label
        raise ValueError(f"unknown class label {s!r}")


@dataclass(frozen=True)
class Polygon:
    """A closed ring of vertices; the last vertex need not repeat the first."""

    label: ClassLabel
    ring: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if len(self.ring) < 3:
            raise ValueError(f"polygon needs >= 3 vertices, got {len(self.ring)}")


@dataclass(frozen=True)
class AnnotationRecord:
    tile_id: str
    polygons: tuple[Polygon, ...]

    def __post_init__(self):
        if not self.tile_id:
            raise ValueError("tile_id must be non-empty")


class Split(Enum):
    TRAIN = "train"
    VAL = "val"


@dataclass(frozen=True)
class IndexEntry:
    tile_id: str
    image_path: str
    record: AnnotationRecord
    split: Split = Split.TRAIN


@dataclass
class DatasetIndex:
    entries: list[IndexEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def tile_ids(self) -> list[str]:
        return [e.tile_id for e in self.entries]

    def split_entries(self, split: Split) -> list[IndexEntry]:
        return [e for e in self.entries if e.split is split]


def _parse_ring(raw, line: int, tile_size: float) -> tuple[tuple[float, float], ...]:
    if not isinstance(raw, list) or len(raw) < 3:
        n = len(raw) if isinstance(raw, list) else 0
        raise AnnotationError(f"polygon ring has {n} vertices, need >= 3", line=line)
    ring = []
    for vertex in raw:
        if not isinstance(vertex, list) or len(vertex) != 2:
            raise AnnotationError(f"vertex {vertex!r} is not an [x, y] pair", line=line)
        x, y = float(vertex[0]), float(vertex[1])
        if not (0.0 <= x <= tile_size) or not (0.0 <= y <= tile_size):
            raise AnnotationError(
                f"vertex ({x}, {y}) outside [0, {tile_size:g}]", line=line
            )
        ring.append((x, y))
    return tuple(ring)


def parse_annotations(
    stream: Iterable[str], tile_size: float = DEFAULT_TILE_SIZE
) -> list[AnnotationRecord]:
    """Parse line-delimited annotation JSON into records, in file order.

    Raises AnnotationError (with the 1-based line number) on malformed JSON,
    unknown class strings, rings with fewer than 3 vertices, or coordinates
    outside [0, tile_size]. Out-of-bounds vertices are rejected rather than
    clamped so downstream area statistics stay trustworthy.
    """
    records = []
    for lineno, raw_line in enumerate(stream, start=1):
        line = raw_line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise AnnotationError(f"malformed JSON: {exc.msg}", line=lineno) from exc
        if not isinstance(obj, dict) or "id" not in obj or "annotations" not in obj:
            raise AnnotationError(
                "object must have 'id' and 'annotations' fields", line=lineno
            )
        tile_id = obj["id"]
        if not isinstance(tile_id, str) or not tile_id:
            raise AnnotationError("'id' must be a non-empty string", line=lineno)
        if not isinstance(obj["annotations"], list):
            raise AnnotationError("'annotations' must be an array", line=lineno)
        polygons = []
        for ann in obj["annotations"]:
            if not isinstance(ann, dict) or "type" not in ann or "coordinates" not in ann:
                raise AnnotationError(
                    "annotation must have 'type' and 'coordinates'", line=lineno
                )
            try:
                label = ClassLabel.from_string(ann["type"])
            except ValueError as exc:
                raise AnnotationError(str(exc), line=lineno) from exc
            if not isinstance(ann["coordinates"], list):
                raise AnnotationError("'coordinates' must be an array of rings", line=lineno)
            for raw_ring in ann["coordinates"]:
                polygons.append(Polygon(label, _parse_ring(raw_ring, lineno, tile_size)))
        records.append(AnnotationRecord(tile_id, tuple(polygons)))
    return records


def serialize_annotations(records: Sequence[AnnotationRecord]) -> str:
    """Inverse of parse_annotations; groups each record's polygons per class
    back into one annotation entry per polygon (one ring each)."""
    lines = []
    for rec in records:
        anns = [
            {"type": p.label.value, "coordinates": [[[x, y] for x, y in p.ring]]}
            for p in rec.polygons
        ]
        lines.append(json.dumps({"id": rec.tile_id, "annotations": anns}))
    return "\n".join(lines) + ("\n" if lines else "")


def filter_labeled(
    all_tile_ids: Sequence[str],
    records: Sequence[AnnotationRecord],
    image_paths: Mapping[str, str] | None = None,
) -> DatasetIndex:
    """Index exactly the tiles whose record contains >= 1 blood-vessel polygon.

    ``all_tile_ids`` enumerates the tiles with an image file present; a
    retained tile missing from it is an error. Entries are ordered
    lexicographically by tile_id so later seeded shuffles are independent of
    filesystem enumeration order.
    """
    available = set(all_tile_ids)
    entries = []
    for rec in sorted(records, key=lambda r: r.tile_id):
        if not any(p.label is ClassLabel.BLOOD_VESSEL for p in rec.polygons):
            continue
        if rec.tile_id not in available:
            raise DataError(f"tile {rec.tile_id!r} has annotations but no image file")
        path = image_paths[rec.tile_id] if image_paths is not None else rec.tile_id
        entries.append(IndexEntry(rec.tile_id, path, rec))
    return DatasetIndex(entries)


def split_train_val(index: DatasetIndex, val_fraction: float, seed: int) -> DatasetIndex:
    """Tag entries Train/Val via a seeded shuffle; |Val| = round(val_fraction * N)."""
    if not (0.0 < val_fraction < 1.0):
        raise ValueError(f"val_fraction must be in (0, 1), got {val_fraction}")
    n = len(index)
    n_val = int(val_fraction * n + 0.5)
    rng = np.random.Generator(np.random.PCG64(seed))
    perm = rng.permutation(n)
    val_positions = set(int(i) for i in perm[:n_val])
    entries = [
        IndexEntry(
            e.tile_id,
            e.image_path,
            e.record,
            Split.VAL if i in val_positions else Split.TRAIN,
        )
        for i, e in enumerate(index.entries)
    ]
    return DatasetIndex(entries)


def class_histogram(records: Sequence[AnnotationRecord]) -> dict[ClassLabel, int]:
    """Count polygons per class over all records; absent classes count 0."""
    counts = {label: 0 for label in ClassLabel}
    for rec in records:
        for poly in rec.polygons:
            counts[poly.label] += 1
    return counts
