"""KITTI-style scan and label files.

A ``.bin`` scan is a flat run of little-endian float32 values, four per point
(x, y, z, intensity). A ``.label`` file holds one little-endian uint32 per
point: low 16 bits semantic class, high 16 bits instance id.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import CorruptValueError, DataError, MalformedScanError, UnknownClassError

SCAN_DTYPE = np.dtype("<f4")
LABEL_DTYPE = np.dtype("<u4")


def _frozen(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class PointCloudScan:
    """Points as an (N, 4) float32 array of x, y, z, intensity; optional per-point labels."""

    points: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float32, copy=True).reshape(-1, 4)
        if not np.isfinite(pts).all():
            bad = int(np.flatnonzero(~np.isfinite(pts).all(axis=1))[0])
            raise CorruptValueError(bad)
        object.__setattr__(self, "points", _frozen(pts))
        if self.labels is not None:
            lab = np.array(self.labels, dtype=np.int32, copy=True).reshape(-1)
            if lab.shape[0] != pts.shape[0]:
                raise DataError(f"{lab.shape[0]} labels for {pts.shape[0]} points")
            object.__setattr__(self, "labels", _frozen(lab))

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def intensity(self) -> np.ndarray:
        return self.points[:, 3]

    def with_labels(self, labels) -> PointCloudScan:
        return PointCloudScan(self.points, labels)

    def __eq__(self, other):
        if not isinstance(other, PointCloudScan):
            return NotImplemented
        same_pts = self.points.tobytes() == other.points.tobytes()
        if self.labels is None or other.labels is None:
            return same_pts and self.labels is None and other.labels is None
        return same_pts and np.array_equal(self.labels, other.labels)


@dataclass(frozen=True)
class LabelRecord:
    raw: int

    @property
    def semantic(self) -> int:
        return self.raw & 0xFFFF

    @property
    def instance(self) -> int:
        return self.raw >> 16


@dataclass(frozen=True)
class ClassMap:
    """Raw semantic id -> train id (0 = unlabeled / ignored) plus train class names."""

    raw_to_train: dict[int, int]
    class_names: list[str] = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        """Number of train ids including the ignore id 0 (C + 1)."""
        return len(self.class_names)

    def lookup_table(self) -> np.ndarray:
        lut = np.full(0x10000, -1, dtype=np.int32)
        for raw, train in self.raw_to_train.items():
            lut[raw] = train
        return lut

    def train_to_raw(self) -> dict[int, int]:
        inv: dict[int, int] = {}
        for raw in sorted(self.raw_to_train):
            inv.setdefault(self.raw_to_train[raw], raw)
        return inv

    @classmethod
    def identity(cls, names: list[str]) -> ClassMap:
        return cls({i: i for i in range(len(names))}, list(names))


def parse_class_map(text: str) -> ClassMap:
    """Parse ``raw_id train_id name`` lines; ``#`` starts a comment.

    The name column names the train class; the first name seen for a train id wins.
    """
    mapping: dict[int, int] = {}
    names: dict[int, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split(None, 2)
        if len(parts) < 2:
            raise DataError(f"class map line {lineno}: expected 'raw_id train_id name'")
        raw, train = int(parts[0]), int(parts[1])
        if not 0 <= raw <= 0xFFFF:
            raise DataError(f"class map line {lineno}: raw id {raw} out of 16-bit range")
        if raw in mapping and mapping[raw] != train:
            raise DataError(f"class map line {lineno}: raw id {raw} mapped twice")
        if train < 0:
            raise DataError(f"class map line {lineno}: negative train id")
        mapping[raw] = train
        names.setdefault(train, parts[2].strip() if len(parts) > 2 else f"class{train}")
    if not mapping:
        raise DataError("class map is empty")
    n = max(names) + 1
    return ClassMap(mapping, [names.get(i, f"class{i}") for i in range(n)])


def load_class_map(path) -> ClassMap:
    return parse_class_map(Path(path).read_text())


def format_class_map(cmap: ClassMap) -> str:
    lines = [f"{raw} {train} {cmap.class_names[train]}"
             for raw, train in sorted(cmap.raw_to_train.items())]
    return "\n".join(lines) + "\n"


def builtin_class_map(name: str) -> ClassMap:
    """Bundled maps: ``synthetic`` (desk-scale scenes) and ``semantickitti`` (19 classes)."""
    text = resources.files("rangeseg.data").joinpath(f"{name}_classes.txt").read_text()
    return parse_class_map(text)


def parse_scan(data: bytes) -> PointCloudScan:
    if len(data) % 16:
        raise MalformedScanError(f"scan length {len(data)} is not a multiple of 16 bytes")
    pts = np.frombuffer(data, dtype=SCAN_DTYPE).reshape(-1, 4)
    return PointCloudScan(pts)


def write_scan(scan: PointCloudScan) -> bytes:
    return scan.points.astype(SCAN_DTYPE, copy=False).tobytes()


def split_labels(data: bytes) -> tuple[np.ndarray, np.ndarray]:
    """Raw uint32 words -> (semantic, instance) arrays."""
    if len(data) % 4:
        raise MalformedScanError(f"label length {len(data)} is not a multiple of 4 bytes")
    raw = np.frombuffer(data, dtype=LABEL_DTYPE)
    return (raw & 0xFFFF).astype(np.int32), (raw >> 16).astype(np.int32)


def parse_labels(data: bytes, cmap: ClassMap) -> np.ndarray:
    semantic, _ = split_labels(data)
    train = cmap.lookup_table()[semantic]
    if (train < 0).any():
        raise UnknownClassError(int(semantic[np.flatnonzero(train < 0)[0]]))
    return train


def write_labels(train_ids, cmap: ClassMap | None = None) -> bytes:
    """Encode train ids as label words with zero instance bits.

    With a class map, each train id is written as the smallest raw id mapping to it.
    """
    ids = np.asarray(train_ids, dtype=np.int64).reshape(-1)
    if cmap is not None:
        inv = cmap.train_to_raw()
        missing = set(np.unique(ids).tolist()) - set(inv)
        if missing:
            raise UnknownClassError(min(missing))
        table = np.zeros(max(inv) + 1, dtype=np.int64)
        for t, r in inv.items():
            table[t] = r
        ids = table[ids]
    if ids.size and (ids.min() < 0 or ids.max() > 0xFFFF):
        raise DataError("label ids must fit in 16 bits")
    return ids.astype(LABEL_DTYPE).tobytes()


def read_scan(path, label_path=None, cmap: ClassMap | None = None) -> PointCloudScan:
    scan = parse_scan(Path(path).read_bytes())
    if label_path is not None:
        if cmap is None:
            raise ValueError("a class map is needed to read labels")
        labels = parse_labels(Path(label_path).read_bytes(), cmap)
        if labels.shape[0] != len(scan):
            raise DataError(f"{path}: {labels.shape[0]} labels for {len(scan)} points")
        scan = scan.with_labels(labels)
    return scan


def save_scan(scan: PointCloudScan, path, label_path=None, cmap: ClassMap | None = None) -> None:
    Path(path).write_bytes(write_scan(scan))
    if label_path is not None and scan.labels is not None:
        Path(label_path).write_bytes(write_labels(scan.labels, cmap))
