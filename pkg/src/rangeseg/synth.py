"""Deterministic ray-cast LiDAR scenes with exact per-point labels.

One ray is cast per (beam, azimuth step). Beam elevations and azimuths sit at
pixel centres of an ``beams x azimuth_steps`` range image with the same field
of view, so re-projecting a generated scan at matching settings puts every
point in its own pixel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import InvalidSpecError
from .scanio import PointCloudScan

INTENSITY_NOISE = 0.02
SHAPES = ("ground", "box", "cylinder")

# size keys per shape; pose keys are x, y, z, yaw
_SIZE_KEYS = {"ground": ("extent",), "box": ("lx", "ly", "lz"), "cylinder": ("radius", "height")}


@dataclass(frozen=True)
class Primitive:
    """A scene object.

    ground: horizontal plane at height ``z`` out to horizontal radius ``extent``.
    box: centre (x, y, z), yaw about z, edge lengths (lx, ly, lz).
    cylinder: vertical axis at (x, y), base height ``z``, ``radius``, ``height``.
    """

    shape: str
    pose: tuple[float, float, float, float]
    size: tuple[float, ...]
    class_id: int
    intensity: float

    def validate(self) -> None:
        if self.shape not in SHAPES:
            raise InvalidSpecError(f"unknown primitive shape {self.shape!r}")
        if len(self.size) != len(_SIZE_KEYS[self.shape]):
            raise InvalidSpecError(f"{self.shape} needs size {_SIZE_KEYS[self.shape]}")
        if any(not (s > 0 and math.isfinite(s)) for s in self.size):
            raise InvalidSpecError(f"degenerate {self.shape}: size {self.size}")
        if not 0.0 <= self.intensity <= 1.0:
            raise InvalidSpecError(f"base intensity {self.intensity} outside [0, 1]")
        if self.class_id < 0:
            raise InvalidSpecError("class id must be non-negative")


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    beams: int = 64
    azimuth_steps: int = 2048
    fov_up: float = 3.0
    fov_down: float = 25.0
    primitives: tuple[Primitive, ...] = ()
    max_range: float = 120.0
    random_objects: int = 0

    def validate(self) -> None:
        if self.beams < 1 or self.azimuth_steps < 1:
            raise InvalidSpecError("beams and azimuth_steps must be >= 1")
        if not self.fov_up + self.fov_down > 0:
            raise InvalidSpecError("fov_up + fov_down must be positive")
        if not self.primitives:
            raise InvalidSpecError("scene needs at least one primitive")
        for p in self.primitives:
            p.validate()

    def beam_elevations(self) -> np.ndarray:
        """Radians, top beam first; beam b sits at the centre of image row b.

        Rows are placed where the range-image projection expects them, so row
        b has elevation f * (1 - (b + 0.5) / beams) - fov_up.
        """
        f = math.radians(self.fov_up + self.fov_down)
        rows = np.arange(self.beams, dtype=np.float64) + 0.5
        return f * (1.0 - rows / self.beams) - math.radians(self.fov_up)

    def azimuths(self) -> np.ndarray:
        """Radians in (-pi, pi); step k sits at the centre of image column k."""
        cols = np.arange(self.azimuth_steps, dtype=np.float64) + 0.5
        return math.pi - cols * 2.0 * math.pi / self.azimuth_steps


def _hit_ground(o, d, p: Primitive):
    z = p.pose[2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (z - o[2]) / d[:, 2]
    hx = o[0] + t * d[:, 0]
    hy = o[1] + t * d[:, 1]
    ok = (t > 0) & (np.hypot(hx - p.pose[0], hy - p.pose[1]) <= p.size[0])
    return np.where(ok, t, np.inf)


def _to_local(o, d, p: Primitive):
    c, s = math.cos(-p.pose[3]), math.sin(-p.pose[3])
    ox, oy = o[0] - p.pose[0], o[1] - p.pose[1]
    lo = np.array([c * ox - s * oy, s * ox + c * oy, o[2] - p.pose[2]])
    ld = np.stack([c * d[:, 0] - s * d[:, 1], s * d[:, 0] + c * d[:, 1], d[:, 2]], axis=1)
    return lo, ld


def _hit_box(o, d, p: Primitive):
    lo, ld = _to_local(o, d, p)
    half = np.array(p.size) / 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - lo) / ld
        t2 = (half - lo) / ld
    tmin = np.nanmax(np.minimum(t1, t2), axis=1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=1)
    t = np.where(tmin > 0, tmin, tmax)  # origin inside the box hits the far wall
    ok = (tmax >= tmin) & (t > 0)
    return np.where(ok, t, np.inf)


def _hit_cylinder(o, d, p: Primitive):
    lo, ld = _to_local(o, d, p)
    r, h = p.size
    a = ld[:, 0] ** 2 + ld[:, 1] ** 2
    b = 2 * (lo[0] * ld[:, 0] + lo[1] * ld[:, 1])
    c = lo[0] ** 2 + lo[1] ** 2 - r * r
    disc = b * b - 4 * a * c
    best = np.full(d.shape[0], np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        sq = np.sqrt(np.maximum(disc, 0))
        for t in ((-b - sq) / (2 * a), (-b + sq) / (2 * a)):
            z = lo[2] + t * ld[:, 2]
            ok = (disc >= 0) & (a > 0) & (t > 0) & (z >= 0) & (z <= h)
            best = np.where(ok & (t < best), t, best)
        for zc in (0.0, h):
            t = (zc - lo[2]) / ld[:, 2]
            hx, hy = lo[0] + t * ld[:, 0], lo[1] + t * ld[:, 1]
            ok = (t > 0) & (hx * hx + hy * hy <= r * r)
            best = np.where(ok & (t < best), t, best)
    return best


_HIT = {"ground": _hit_ground, "box": _hit_box, "cylinder": _hit_cylinder}


def generate_scan(spec: SceneSpec) -> PointCloudScan:
    """Cast every ray and keep the nearest hit per ray, with its primitive's class."""
    spec = with_random_objects(spec)
    spec.validate()
    elev = spec.beam_elevations()
    az = spec.azimuths()
    el, a = np.meshgrid(elev, az, indexing="ij")
    d = np.stack([np.cos(el) * np.cos(a), np.cos(el) * np.sin(a), np.sin(el)], axis=-1).reshape(-1, 3)
    o = np.zeros(3)

    t_best = np.full(d.shape[0], np.inf)
    owner = np.full(d.shape[0], -1, dtype=np.int64)
    for i, prim in enumerate(spec.primitives):
        t = _HIT[prim.shape](o, d, prim)
        closer = t < t_best
        t_best[closer] = t[closer]
        owner[closer] = i
    hit = np.isfinite(t_best) & (t_best <= spec.max_range)

    xyz = d[hit] * t_best[hit, None]
    idx = owner[hit]
    base = np.array([p.intensity for p in spec.primitives])[idx]
    cls = np.array([p.class_id for p in spec.primitives], dtype=np.int32)[idx]
    rng = np.random.default_rng(spec.seed)
    inten = np.clip(base + rng.normal(0.0, INTENSITY_NOISE, size=base.shape), 0.0, 1.0)
    pts = np.concatenate([xyz, inten[:, None]], axis=1)
    return PointCloudScan(pts, cls)


# ---------------------------------------------------------------------------
# random scene content

SENSOR_HEIGHT = 1.73

# class ids follow the bundled ``synthetic`` class map
GROUND, CAR, POLE, BUILDING, TRUNK = 1, 2, 3, 4, 5


def ground_plane(extent: float = 100.0) -> Primitive:
    return Primitive("ground", (0.0, 0.0, -SENSOR_HEIGHT, 0.0), (extent,), GROUND, 0.30)


def random_objects(rng: np.random.Generator, count: int) -> list[Primitive]:
    """Cars, poles, buildings and trunks standing on the ground plane."""
    out = []
    kinds = rng.choice(4, size=count, p=[0.4, 0.25, 0.15, 0.2])
    for k in kinds:
        yaw = float(rng.uniform(-math.pi, math.pi))
        if k == 0:
            dist, ang = rng.uniform(5, 25), rng.uniform(-math.pi, math.pi)
            lx, ly, lz = rng.uniform(3.8, 4.6), rng.uniform(1.6, 2.0), rng.uniform(1.3, 1.7)
            z = -SENSOR_HEIGHT + lz / 2
            out.append(Primitive("box", (dist * math.cos(ang), dist * math.sin(ang), z, yaw),
                                 (lx, ly, lz), CAR, 0.65))
        elif k == 1:
            dist, ang = rng.uniform(4, 20), rng.uniform(-math.pi, math.pi)
            out.append(Primitive("cylinder", (dist * math.cos(ang), dist * math.sin(ang), -SENSOR_HEIGHT, 0.0),
                                 (rng.uniform(0.12, 0.25), rng.uniform(4, 7)), POLE, 0.45))
        elif k == 2:
            dist, ang = rng.uniform(25, 45), rng.uniform(-math.pi, math.pi)
            lx, ly, lz = rng.uniform(8, 20), rng.uniform(6, 14), rng.uniform(6, 15)
            out.append(Primitive("box", (dist * math.cos(ang), dist * math.sin(ang), -SENSOR_HEIGHT + lz / 2, yaw),
                                 (lx, ly, lz), BUILDING, 0.15))
        else:
            dist, ang = rng.uniform(4, 20), rng.uniform(-math.pi, math.pi)
            out.append(Primitive("cylinder", (dist * math.cos(ang), dist * math.sin(ang), -SENSOR_HEIGHT, 0.0),
                                 (rng.uniform(0.3, 0.5), rng.uniform(2, 4)), TRUNK, 0.85))
    return out


def with_random_objects(spec: SceneSpec) -> SceneSpec:
    """Expand ``random_objects`` into concrete primitives drawn from the spec seed."""
    if spec.random_objects <= 0:
        return spec
    rng = np.random.default_rng([spec.seed, 0x5CE7E])
    extra = random_objects(rng, spec.random_objects)
    return replace(spec, primitives=tuple(spec.primitives) + tuple(extra), random_objects=0)


def random_scene(seed: int, beams: int = 64, azimuth_steps: int = 2048, objects: int = 24,
                 fov_up: float = 3.0, fov_down: float = 25.0) -> SceneSpec:
    return SceneSpec(seed=seed, beams=beams, azimuth_steps=azimuth_steps, fov_up=fov_up,
                     fov_down=fov_down, primitives=(ground_plane(),), random_objects=objects)


def vary(spec: SceneSpec, index: int) -> SceneSpec:
    """The ``index``-th seeded variation: new seed, scene yawed, objects jittered by <= 0.5 m."""
    seed = spec.seed + index
    rng = np.random.default_rng([seed, 0x7A41])
    rot = float(rng.uniform(-math.pi, math.pi))
    c, s = math.cos(rot), math.sin(rot)
    prims = []
    for p in with_random_objects(spec).primitives:
        x, y, z, yaw = p.pose
        if p.shape != "ground":
            x, y = x + rng.uniform(-0.5, 0.5), y + rng.uniform(-0.5, 0.5)
            x, y, yaw = c * x - s * y, s * x + c * y, yaw + rot
        prims.append(replace(p, pose=(x, y, z, yaw)))
    return replace(spec, seed=seed, primitives=tuple(prims), random_objects=0)


# ---------------------------------------------------------------------------
# scene spec text files

_SCALAR_KEYS = {"seed": int, "beams": int, "azimuth_steps": int, "fov_up": float,
                "fov_down": float, "max_range": float, "random_objects": int}


def parse_scene_spec(text: str) -> SceneSpec:
    """Parse ``key = value`` lines.

    Scalar keys: seed, beams, azimuth_steps, fov_up, fov_down (degrees), max_range,
    random_objects. Each ``primitive = <shape> k=v ...`` line adds one object with
    keys x, y, z, yaw (radians), class, intensity and the shape's size keys.
    """
    vals: dict = {}
    prims = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidSpecError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            if key == "primitive":
                prims.append(_parse_primitive(value))
            elif key in _SCALAR_KEYS:
                vals[key] = _SCALAR_KEYS[key](value)
            else:
                raise InvalidSpecError(f"line {lineno}: unknown key {key!r}")
        except ValueError as exc:
            raise InvalidSpecError(f"line {lineno}: {exc}") from None
    spec = SceneSpec(primitives=tuple(prims), **vals)
    with_random_objects(spec).validate()
    return spec


def _parse_primitive(value: str) -> Primitive:
    shape, *pairs = value.split()
    if shape not in SHAPES:
        raise InvalidSpecError(f"unknown primitive shape {shape!r}")
    kv = {}
    for pair in pairs:
        k, _, v = pair.partition("=")
        kv[k] = float(v)
    missing = [k for k in _SIZE_KEYS[shape] + ("class",) if k not in kv]
    if missing:
        raise InvalidSpecError(f"{shape} missing keys {missing}")
    pose = (kv.get("x", 0.0), kv.get("y", 0.0), kv.get("z", 0.0), kv.get("yaw", 0.0))
    size = tuple(kv[k] for k in _SIZE_KEYS[shape])
    return Primitive(shape, pose, size, int(kv["class"]), kv.get("intensity", 0.5))


def format_scene_spec(spec: SceneSpec) -> str:
    lines = [f"{k} = {getattr(spec, k)}" for k in _SCALAR_KEYS]
    for p in spec.primitives:
        pose = " ".join(f"{k}={v!r}" for k, v in zip(("x", "y", "z", "yaw"), p.pose))
        size = " ".join(f"{k}={v!r}" for k, v in zip(_SIZE_KEYS[p.shape], p.size))
        lines.append(f"primitive = {p.shape} {pose} {size} class={p.class_id} intensity={p.intensity!r}")
    return "\n".join(lines) + "\n"


def load_scene_spec(path) -> SceneSpec:
    return parse_scene_spec(Path(path).read_text())
