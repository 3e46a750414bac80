"""Spherical projection of scans into coordinate / depth / intensity images."""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import DataError, DegenerateChannelError, EmptyDatasetError, UndefinedDirectionError
from .scanio import PointCloudScan

CHANNELS = ("x", "y", "z", "depth", "intensity")


@dataclass(frozen=True)
class ProjectionConfig:
    H: int = 64
    W: int = 2048
    fov_up: float = 3.0  # degrees above the horizon
    fov_down: float = 25.0  # degrees below the horizon (positive magnitude)

    def __post_init__(self):
        if self.H < 1 or self.W < 1:
            raise ValueError(f"image size must be positive, got {self.H}x{self.W}")
        if not self.fov_up + self.fov_down > 0:
            raise ValueError("fov_up + fov_down must be positive")

    @property
    def fov(self) -> float:
        return self.fov_up + self.fov_down


def compute_depth(point) -> float:
    x, y, z = (float(c) for c in point[:3])
    return math.sqrt(x * x + y * y + z * z)


def _uv(x, y, z, r, cfg: ProjectionConfig):
    """Continuous (u, v) before discretization."""
    up = math.radians(cfg.fov_up)
    f = math.radians(cfg.fov)
    u = 0.5 * (1.0 - np.arctan2(y, x) / math.pi) * cfg.W
    v = (1.0 - (np.arcsin(np.clip(z / r, -1.0, 1.0)) + up) / f) * cfg.H
    return u, v


def pixel_coords(point, cfg: ProjectionConfig) -> tuple[int, int, bool]:
    """(u column, v row, in_fov) of one point; floor then clamp to the image."""
    x, y, z = (float(c) for c in point[:3])
    r = math.sqrt(x * x + y * y + z * z)
    if r == 0.0:
        raise UndefinedDirectionError(f"point {tuple(point[:3])} has zero depth")
    u, v = _uv(x, y, z, r, cfg)
    u, v = math.floor(u), math.floor(v)
    vc = min(max(v, 0), cfg.H - 1)
    return min(max(u, 0), cfg.W - 1), vc, vc == v


def pixel_coords_array(xyz: np.ndarray, cfg: ProjectionConfig):
    """Vectorised :func:`pixel_coords`: returns u, v, in_fov, depth, defined."""
    xyz = np.asarray(xyz, dtype=np.float64)
    x, y, z = xyz[:, 0], xyz[:, 1], xyz[:, 2]
    r = np.sqrt(x * x + y * y + z * z)
    defined = r > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        u, v = _uv(x, y, z, np.where(defined, r, 1.0), cfg)
    u = np.floor(u).astype(np.int64)
    v = np.floor(v).astype(np.int64)
    vc = np.clip(v, 0, cfg.H - 1)
    in_fov = (vc == v) & defined
    u = np.where(defined, np.clip(u, 0, cfg.W - 1), 0)
    vc = np.where(defined, vc, 0)
    return u, vc, in_fov, r, defined


@dataclass(eq=False)
class RangeImageSet:
    """Projected modality images and the pixel <-> point index maps.

    Images are (H, W) or (H, W, 3) for ``coord``. ``pixel_point`` holds the
    index of the point stored at each pixel or -1. Per-point arrays give the
    clamped pixel of every point, whether it won its pixel (``kept``) and
    whether its row was inside the vertical field of view.
    """

    cfg: ProjectionConfig
    coord: np.ndarray
    depth: np.ndarray
    intensity: np.ndarray
    valid_mask: np.ndarray
    pixel_point: np.ndarray
    point_u: np.ndarray
    point_v: np.ndarray
    kept: np.ndarray
    in_fov: np.ndarray
    label_image: np.ndarray | None = None
    n_dropped: int = 0
    normalized: bool = False

    @property
    def shape(self) -> tuple[int, int]:
        return self.cfg.H, self.cfg.W

    @property
    def n_points(self) -> int:
        return self.point_u.shape[0]

    def channel(self, name: str) -> np.ndarray:
        if name in ("x", "y", "z"):
            return self.coord[..., "xyz".index(name)]
        return getattr(self, name)

    def modality_arrays(self) -> dict[str, np.ndarray]:
        """Channel-first arrays: coord (3, H, W), depth (1, H, W), intensity (1, H, W)."""
        return {
            "coord": np.ascontiguousarray(self.coord.transpose(2, 0, 1)),
            "depth": self.depth[None],
            "intensity": self.intensity[None],
        }


def stack_inputs(images) -> dict[str, np.ndarray]:
    """Batch one or more :class:`RangeImageSet` into (N, C, H, W) network inputs."""
    if isinstance(images, RangeImageSet):
        images = [images]
    per = [im.modality_arrays() for im in images]
    return {k: np.stack([p[k] for p in per]).astype(np.float32) for k in per[0]}


def project_scan(scan: PointCloudScan, cfg: ProjectionConfig) -> RangeImageSet:
    """Rasterize a scan; where points collide the smallest depth wins (ties: lower index)."""
    n = len(scan)
    if n == 0:
        raise EmptyDatasetError("cannot project an empty scan")
    pts = scan.points
    u, v, in_fov, r, defined = pixel_coords_array(pts[:, :3], cfg)
    H, W = cfg.H, cfg.W
    pix = v * W + u

    cand = np.flatnonzero(defined)
    order = cand[np.lexsort((cand, r[cand], pix[cand]))]
    spix = pix[order]
    first = np.ones(order.shape[0], dtype=bool)
    first[1:] = spix[1:] != spix[:-1]
    winners = order[first]
    wpix = spix[first]

    pixel_point = np.full(H * W, -1, dtype=np.int64)
    pixel_point[wpix] = winners
    valid = pixel_point >= 0
    kept = np.zeros(n, dtype=bool)
    kept[winners] = True

    coord = np.zeros((H * W, 3), dtype=np.float32)
    coord[wpix] = pts[winners, :3]
    depth = np.zeros(H * W, dtype=np.float32)
    depth[wpix] = r[winners]
    inten = np.zeros(H * W, dtype=np.float32)
    inten[wpix] = pts[winners, 3]
    label_image = None
    if scan.labels is not None:
        label_image = np.zeros(H * W, dtype=np.int32)
        label_image[wpix] = scan.labels[winners]
        label_image = label_image.reshape(H, W)

    return RangeImageSet(
        cfg=cfg,
        coord=coord.reshape(H, W, 3),
        depth=depth.reshape(H, W),
        intensity=inten.reshape(H, W),
        valid_mask=valid.reshape(H, W),
        pixel_point=pixel_point.reshape(H, W),
        point_u=u,
        point_v=v,
        kept=kept,
        in_fov=in_fov,
        label_image=label_image,
        n_dropped=int(n - defined.sum()),
    )


# ---------------------------------------------------------------------------
# dataset statistics

DEFAULT_RANGES = {"x": (-100.0, 100.0), "y": (-100.0, 100.0), "z": (-10.0, 10.0),
                  "depth": (0.0, 120.0), "intensity": (0.0, 1.0)}


@dataclass
class ChannelStats:
    mean: float
    std: float
    edges: np.ndarray
    counts: np.ndarray


@dataclass
class ModalityStats:
    channels: dict[str, ChannelStats] = field(default_factory=dict)

    def __getitem__(self, name: str) -> ChannelStats:
        return self.channels[name]

    def to_text(self) -> str:
        lines = []
        for name, c in self.channels.items():
            lines += [
                f"{name}.mean = {c.mean!r}",
                f"{name}.std = {c.std!r}",
                f"{name}.hist_lo = {float(c.edges[0])!r}",
                f"{name}.hist_hi = {float(c.edges[-1])!r}",
                f"{name}.bins = {c.counts.shape[0]}",
                f"{name}.counts = " + " ".join(str(int(k)) for k in c.counts),
            ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> ModalityStats:
        raw: dict[str, dict[str, str]] = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            name, _, attr = key.strip().partition(".")
            raw.setdefault(name, {})[attr] = value.strip()
        out = cls()
        for name, d in raw.items():
            try:
                bins = int(d["bins"])
                edges = np.linspace(float(d["hist_lo"]), float(d["hist_hi"]), bins + 1)
                counts = np.array([int(k) for k in d["counts"].split()], dtype=np.int64)
                out.channels[name] = ChannelStats(float(d["mean"]), float(d["std"]), edges, counts)
            except KeyError as exc:
                raise DataError(f"stats sidecar: channel {name} lacks {exc}") from None
        return out

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> ModalityStats:
        return cls.from_text(Path(path).read_text())


def compute_stats(images: Iterable[RangeImageSet], bins: int = 100,
                  ranges: dict[str, tuple[float, float]] | None = None) -> ModalityStats:
    """Per-channel mean, population std and fixed-bin histogram over valid pixels.

    Means and variances are merged image by image with Chan's pairwise update in
    float64. Values outside the histogram range are counted in the edge bins.
    """
    ranges = {**DEFAULT_RANGES, **(ranges or {})}
    n = 0
    mean = np.zeros(len(CHANNELS))
    m2 = np.zeros(len(CHANNELS))
    counts = np.zeros((len(CHANNELS), bins), dtype=np.int64)
    edges = [np.linspace(*ranges[c], bins + 1) for c in CHANNELS]
    for im in images:
        vals = np.stack([im.channel(c)[im.valid_mask] for c in CHANNELS]).astype(np.float64)
        k = vals.shape[1]
        if k == 0:
            continue
        bmean = vals.mean(axis=1)
        bm2 = ((vals - bmean[:, None]) ** 2).sum(axis=1)
        delta = bmean - mean
        tot = n + k
        mean = mean + delta * (k / tot)
        m2 = m2 + bm2 + delta * delta * (n * k / tot)
        n = tot
        for i, c in enumerate(CHANNELS):
            lo, hi = ranges[c]
            idx = np.floor((vals[i] - lo) / (hi - lo) * bins).astype(np.int64)
            counts[i] += np.bincount(np.clip(idx, 0, bins - 1), minlength=bins)
    if n == 0:
        raise EmptyDatasetError("no valid pixels to compute statistics from")
    std = np.sqrt(m2 / n)
    return ModalityStats({c: ChannelStats(float(mean[i]), float(std[i]), edges[i], counts[i])
                          for i, c in enumerate(CHANNELS)})


def normalize(images: RangeImageSet, stats: ModalityStats) -> RangeImageSet:
    """Per-channel z-score at valid pixels; invalid pixels become exactly 0."""
    for c in CHANNELS:
        if not stats[c].std > 0:
            raise DegenerateChannelError(f"channel {c} has zero standard deviation")
    mask = images.valid_mask

    def z(values, c):
        out = np.zeros(values.shape, dtype=np.float32)
        out[mask] = (values[mask].astype(np.float64) - stats[c].mean) / stats[c].std
        return out

    coord = np.stack([z(images.coord[..., i], c) for i, c in enumerate("xyz")], axis=-1)
    return replace(images, coord=coord, depth=z(images.depth, "depth"),
                   intensity=z(images.intensity, "intensity"), normalized=True)


# ---------------------------------------------------------------------------
# augmentation


def augment_scan(scan: PointCloudScan, seed=None, max_angle: float = 1.0,
                 angle: float | None = None, flip: bool | None = None) -> PointCloudScan:
    """Rotate about z by U[-max_angle, max_angle] degrees, then mirror y with probability 0.5.

    ``angle`` (degrees) and ``flip`` override the random draws.
    """
    rng = np.random.default_rng(seed)
    a = rng.uniform(-max_angle, max_angle)
    f = rng.random() < 0.5
    if angle is not None:
        a = angle
    if flip is not None:
        f = flip
    if a == 0 and not f:
        return scan
    pts = scan.points.astype(np.float64)
    t = math.radians(a)
    c, s = math.cos(t), math.sin(t)
    x, y = pts[:, 0].copy(), pts[:, 1].copy()
    pts[:, 0] = c * x - s * y
    pts[:, 1] = s * x + c * y
    if f:
        pts[:, 1] = -pts[:, 1]
    return PointCloudScan(pts.astype(np.float32), scan.labels)


# ---------------------------------------------------------------------------
# RIMG archive

RIMG_MAGIC = b"RIMG"
RIMG_VERSION = 1
_HEADER = struct.Struct("<4sHIIHBBIddI")


def write_rimg(images: RangeImageSet, dtype=np.float32) -> bytes:
    """Serialize a projection: header, 5 channel planes, mask, pixel_point, point table, labels."""
    dtype = np.dtype(dtype).newbyteorder("<")
    H, W = images.shape
    has_labels = images.label_image is not None
    buf = io.BytesIO()
    buf.write(_HEADER.pack(RIMG_MAGIC, RIMG_VERSION, H, W, len(CHANNELS), dtype.itemsize,
                           int(has_labels) | (int(images.normalized) << 1), images.n_points,
                           images.cfg.fov_up, images.cfg.fov_down, images.n_dropped))
    for c in CHANNELS:
        buf.write(images.channel(c).astype(dtype).tobytes())
    buf.write(images.valid_mask.astype(np.uint8).tobytes())
    buf.write(images.pixel_point.astype("<i8").tobytes())
    buf.write(images.point_u.astype("<i4").tobytes())
    buf.write(images.point_v.astype("<i4").tobytes())
    flags = images.kept.astype(np.uint8) | (images.in_fov.astype(np.uint8) << 1)
    buf.write(flags.tobytes())
    if has_labels:
        buf.write(images.label_image.astype("<i4").tobytes())
    return buf.getvalue()


def read_rimg(data: bytes) -> RangeImageSet:
    if len(data) < _HEADER.size:
        raise DataError("RIMG archive truncated")
    magic, version, H, W, nch, width, flags, npts, fov_up, fov_down, ndrop = _HEADER.unpack_from(data)
    if magic != RIMG_MAGIC:
        raise DataError("not a RIMG archive")
    if version != RIMG_VERSION:
        raise DataError(f"unsupported RIMG version {version}")
    if nch != len(CHANNELS) or width not in (4, 8):
        raise DataError("unsupported RIMG channel layout")
    dtype = np.dtype("<f4" if width == 4 else "<f8")
    off = _HEADER.size

    def take(dt, count):
        nonlocal off
        dt = np.dtype(dt)
        end = off + dt.itemsize * count
        if end > len(data):
            raise DataError("RIMG archive truncated")
        arr = np.frombuffer(data, dtype=dt, count=count, offset=off)
        off = end
        return arr

    planes = [take(dtype, H * W).reshape(H, W) for _ in CHANNELS]
    valid = take(np.uint8, H * W).reshape(H, W).astype(bool)
    pixel_point = take("<i8", H * W).reshape(H, W).astype(np.int64)
    pu = take("<i4", npts).astype(np.int64)
    pv = take("<i4", npts).astype(np.int64)
    pf = take(np.uint8, npts)
    labels = take("<i4", H * W).reshape(H, W).astype(np.int32) if flags & 1 else None
    return RangeImageSet(
        cfg=ProjectionConfig(H, W, fov_up, fov_down),
        coord=np.stack(planes[:3], axis=-1).astype(np.float32),
        depth=planes[3].astype(np.float32),
        intensity=planes[4].astype(np.float32),
        valid_mask=valid,
        pixel_point=pixel_point,
        point_u=pu,
        point_v=pv,
        kept=(pf & 1).astype(bool),
        in_fov=(pf & 2).astype(bool),
        label_image=labels,
        n_dropped=ndrop,
        normalized=bool(flags & 2),
    )
