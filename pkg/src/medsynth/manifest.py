"""Dataset manifests.

A manifest is a JSON-Lines file with one record per sample.  Records carry
the sample id, the path of the stored volume, its orientation class and
acquisition descriptors, the train/val/test split, voxel spacing, and the
slice policy used when 2D samples are cut from 3D volumes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .volume import Volume, load_volume

SPLITS = ("train", "val", "test", "mapping")
SLICE_POLICIES = ("all", "central3")


@dataclass
class ManifestRecord:
    id: str
    path: str
    orientation_class: str
    field_strength: float
    sequence: str
    split: str
    spacing_mm: tuple[float, ...]
    slice_policy: str | None = None
    slice_index: int | None = None
    extra_keywords: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValidationError(f"unknown split {self.split!r}, expected one of {SPLITS}")
        if self.slice_policy is not None and self.slice_policy not in SLICE_POLICIES:
            raise ValidationError(f"unknown slice policy {self.slice_policy!r}")
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)

    def to_json(self) -> str:
        d = asdict(self)
        d["spacing_mm"] = list(self.spacing_mm)
        return json.dumps(d, sort_keys=True)

    @staticmethod
    def from_json(line: str) -> "ManifestRecord":
        return ManifestRecord(**json.loads(line))


class Manifest:
    """An ordered collection of `ManifestRecord`s with split helpers."""

    def __init__(self, records: list[ManifestRecord], root: str | Path | None = None):
        self.records = list(records)
        self.root = Path(root) if root is not None else None
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate sample ids in manifest")

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def split(self, name: str) -> "Manifest":
        if name not in SPLITS:
            raise ValidationError(f"unknown split {name!r}")
        return Manifest([r for r in self.records if r.split == name], root=self.root)

    def classes(self) -> list[str]:
        return sorted({r.orientation_class for r in self.records})

    def labels(self, class_order: list[str] | None = None) -> np.ndarray:
        order = class_order if class_order is not None else self.classes()
        index = {c: i for i, c in enumerate(order)}
        return np.array([index[r.orientation_class] for r in self.records], dtype=np.int64)

    def resolve(self, record: ManifestRecord) -> Path:
        p = Path(record.path)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    def load_array(self, record: ManifestRecord) -> np.ndarray:
        """Load one record as an array, honouring a slice index if present."""
        vol = load_volume(self.resolve(record))
        data = vol.data
        if record.slice_index is not None:
            data = data[..., record.slice_index]
        return np.asarray(data, dtype=np.float32)

    def load_stack(self) -> np.ndarray:
        """Load every record into one (n, ...) float32 array (equal shapes)."""
        arrays = [self.load_array(r) for r in self.records]
        shapes = {a.shape for a in arrays}
        if len(shapes) > 1:
            raise ValidationError(f"records have mixed shapes: {sorted(shapes)}")
        return np.stack(arrays)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(rec.to_json() + "\n")
        return path

    @staticmethod
    def load(path: str | Path, root: str | Path | None = None) -> "Manifest":
        path = Path(path)
        records = [
            ManifestRecord.from_json(line)
            for line in path.read_text().splitlines()
            if line.strip()
        ]
        return Manifest(records, root=root if root is not None else path.parent)


def expand_slices(records: list[ManifestRecord], n_slices: int, policy: str) -> list[ManifestRecord]:
    """Expand 3D volume records into per-slice 2D records.

    `policy` is "all" (every slice) or "central3" (the middle three).  The
    slice axis is the last one.
    """
    if policy not in SLICE_POLICIES:
        raise ValidationError(f"unknown slice policy {policy!r}")
    if policy == "central3":
        mid = n_slices // 2
        chosen = [s for s in (mid - 1, mid, mid + 1) if 0 <= s < n_slices]
    else:
        chosen = list(range(n_slices))
    out = []
    for rec in records:
        for s in chosen:
            d = asdict(rec)
            d["id"] = f"{rec.id}_s{s:03d}"
            d["slice_policy"] = policy
            d["slice_index"] = s
            d["spacing_mm"] = list(rec.spacing_mm[:-1])
            out.append(ManifestRecord(**d))
    return out
