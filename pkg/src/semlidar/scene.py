"""Procedural target scenes: per-pixel depth and reflectivity maps.

Scenes are orthographic height fields over a square field of view.  Each
family is a small function mapping pixel coordinates (meters, centred on
the optical axis) and a parameter dict to a depth grid, with 0 marking
background.  Every family has a ``depth`` parameter (its nearest surface);
other depth-like parameters are offsets from it.  Class identity comes from the family plus its parameter
ranges; individual samples draw parameters uniformly within those ranges.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .io_util import atomic_write_bytes

SPEED_OF_LIGHT = 299_792_458.0
# c * T_rep / 2 for the default 20 MHz repetition rate
DEFAULT_MAX_RANGE = SPEED_OF_LIGHT * 50e-9 / 2

MAP_MAGIC = b"TSPM"
MAP_VERSION = 1
_MAP_HEADER = struct.Struct("<4sHII")


@dataclass(eq=False)
class DepthReflMap:
    depth: np.ndarray
    reflectivity: np.ndarray

    def __post_init__(self):
        self.depth = np.ascontiguousarray(self.depth, dtype=np.float32)
        self.reflectivity = np.ascontiguousarray(self.reflectivity, dtype=np.float32)
        if self.depth.ndim != 2 or self.depth.shape != self.reflectivity.shape:
            raise ConfigError(
                f"depth {self.depth.shape} and reflectivity {self.reflectivity.shape} "
                "must be 2-D grids of identical shape"
            )

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @property
    def target_mask(self) -> np.ndarray:
        return self.depth > 0

    def __eq__(self, other):
        if not isinstance(other, DepthReflMap):
            return NotImplemented
        return np.array_equal(self.depth, other.depth) and np.array_equal(
            self.reflectivity, other.reflectivity
        )


# ---------------------------------------------------------------------------
# Families.  Each takes pixel-centre coordinates x (columns) and y (rows) in
# meters plus drawn parameters, and returns (depth, mask).
# ---------------------------------------------------------------------------


def _square(x, y, half):
    return (np.abs(x) <= half) & (np.abs(y) <= half)


def _plane(x, y, p, extent):
    mask = _square(x, y, p["size"] * extent / 2)
    return np.full_like(x, p["depth"]), mask


def _tilted_plane(x, y, p, extent):
    # linear in column index so the first and last columns hit depth and depth + span
    w = x.shape[1]
    frac = np.broadcast_to(np.arange(w) / max(w - 1, 1), x.shape)
    depth = p["depth"] + p["span"] * frac
    mask = _square(x, y, p["size"] * extent / 2)
    return depth, mask


def _sphere(x, y, p, extent):
    r2 = x**2 + y**2
    R = p["radius"]
    mask = r2 < R**2
    depth = p["depth"] + R - np.sqrt(np.clip(R**2 - r2, 0.0, None))
    return depth, mask


def _cylinder(x, y, p, extent):
    a = np.deg2rad(p["angle"])
    along = x * np.cos(a) + y * np.sin(a)
    across = -x * np.sin(a) + y * np.cos(a)
    R = p["radius"]
    mask = (np.abs(across) < R) & (np.abs(along) <= p["length"] / 2)
    depth = p["depth"] + R - np.sqrt(np.clip(R**2 - across**2, 0.0, None))
    return depth, mask


def _cone(x, y, p, extent):
    r = np.hypot(x, y)
    mask = r < p["radius"]
    depth = p["depth"] + p["height"] * r / p["radius"]
    return depth, mask


def _pyramid(x, y, p, extent):
    m = np.maximum(np.abs(x), np.abs(y))
    mask = m <= p["half_width"]
    depth = p["depth"] + p["height"] * m / p["half_width"]
    return depth, mask


def _cross(x, y, p, extent):
    a = np.deg2rad(p["angle"])
    u = x * np.cos(a) + y * np.sin(a)
    v = -x * np.sin(a) + y * np.cos(a)
    L, W = p["arm_length"] / 2, p["arm_width"] / 2
    mask = ((np.abs(u) <= L) & (np.abs(v) <= W)) | ((np.abs(v) <= L) & (np.abs(u) <= W))
    return np.full_like(x, p["depth"]), mask


def _staircase(x, y, p, extent):
    steps = max(int(round(p["steps"])), 1)
    half = p["size"] * extent / 2
    mask = _square(x, y, half)
    k = np.clip(np.floor((x + half) / (2 * half) * steps), 0, steps - 1)
    return p["depth"] + k * p["step_depth"], mask


def _ring(x, y, p, extent):
    r = np.hypot(x, y)
    mask = (r < p["r_outer"]) & (r >= p["r_inner"])
    return np.full_like(x, p["depth"]), mask


def _two_planes(x, y, p, extent):
    a = np.deg2rad(p["angle"])
    u = x * np.cos(a) + y * np.sin(a)
    cut = (p["split"] - 0.5) * extent
    depth = np.where(u < cut, p["depth"], p["depth"] + p["gap"])
    mask = _square(x, y, p["size"] * extent / 2)
    return depth, mask


def _vgroove(x, y, p, extent):
    half = p["size"] * extent / 2
    mask = _square(x, y, half)
    depth = p["depth"] + p["delta"] * (1.0 - np.abs(x) / half)
    return depth, mask


def _sphere_on_plane(x, y, p, extent):
    back = np.full_like(x, p["depth"] + p["gap"])
    sd, smask = _sphere(x, y, p, extent)
    depth = np.where(smask, np.minimum(sd, back), back)
    mask = _square(x, y, p["size"] * extent / 2) | smask
    return depth, mask


def _box_on_plane(x, y, p, extent):
    front = _square(x, y, p["size_front"] * extent / 2)
    depth = np.where(front, p["depth"], p["depth"] + p["gap"])
    mask = _square(x, y, p["size_back"] * extent / 2) | front
    return depth, mask


FAMILIES = {
    "plane": (_plane, ("depth", "size")),
    "tilted_plane": (_tilted_plane, ("depth", "span", "size")),
    "sphere": (_sphere, ("depth", "radius")),
    "cylinder": (_cylinder, ("depth", "radius", "length", "angle")),
    "cone": (_cone, ("depth", "radius", "height")),
    "pyramid": (_pyramid, ("depth", "half_width", "height")),
    "cross": (_cross, ("depth", "arm_length", "arm_width", "angle")),
    "staircase": (_staircase, ("depth", "steps", "step_depth", "size")),
    "ring": (_ring, ("depth", "r_outer", "r_inner")),
    "two_planes": (_two_planes, ("depth", "gap", "split", "angle", "size")),
    "vgroove": (_vgroove, ("depth", "delta", "size")),
    "sphere_on_plane": (_sphere_on_plane, ("depth", "gap", "radius", "size")),
    "box_on_plane": (_box_on_plane, ("depth", "gap", "size_back", "size_front")),
}


@dataclass
class SceneClassSpec:
    """One target class: a shape family and uniform ranges for its parameters.

    ``params`` maps every parameter of the family to a ``(lo, hi)`` pair;
    ``lo == hi`` pins the parameter.  Lengths are meters, angles degrees.
    """

    class_id: int
    family: str
    params: dict[str, tuple[float, float]]
    extent: float = 0.3
    reflectivity: str = "binary"
    max_range: float = DEFAULT_MAX_RANGE

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise ConfigError(f"class {self.class_id}: unknown family {self.family!r}")
        _, names = FAMILIES[self.family]
        missing = [n for n in names if n not in self.params]
        extra = [n for n in self.params if n not in names]
        if missing or extra:
            raise ConfigError(
                f"class {self.class_id} ({self.family}): missing {missing}, unexpected {extra}"
            )
        for name, rng in self.params.items():
            lo, hi = rng
            if not (np.isfinite(lo) and np.isfinite(hi)) or lo > hi:
                raise ConfigError(
                    f"class {self.class_id}: empty parameter range {name}=[{lo}, {hi}]"
                )
        if self.extent <= 0:
            raise ConfigError(f"class {self.class_id}: extent must be positive")
        if self.reflectivity not in ("binary", "continuous"):
            raise ConfigError(f"class {self.class_id}: reflectivity mode {self.reflectivity!r}")

    @property
    def degenerate(self) -> bool:
        return all(lo == hi for lo, hi in self.params.values())

    def to_dict(self) -> dict:
        return {
            "class_id": self.class_id,
            "family": self.family,
            "params": {k: [float(v[0]), float(v[1])] for k, v in self.params.items()},
            "extent": self.extent,
            "reflectivity": self.reflectivity,
            "max_range": self.max_range,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneClassSpec":
        params = {}
        for k, v in d["params"].items():
            if isinstance(v, (int, float)):
                v = (v, v)
            params[k] = (float(v[0]), float(v[1]))
        return cls(
            class_id=int(d["class_id"]),
            family=d["family"],
            params=params,
            extent=float(d.get("extent", 0.3)),
            reflectivity=d.get("reflectivity", "binary"),
            max_range=float(d.get("max_range", DEFAULT_MAX_RANGE)),
        )


def pixel_grid(width: int, height: int, extent: float):
    """Pixel-centre coordinates in meters, shape (height, width)."""
    xs = ((np.arange(width) + 0.5) / width - 0.5) * extent
    ys = ((np.arange(height) + 0.5) / height - 0.5) * extent
    return np.meshgrid(xs, ys)


def draw_params(spec: SceneClassSpec, rng: np.random.Generator) -> dict[str, float]:
    _, names = FAMILIES[spec.family]
    out = {}
    for name in names:
        lo, hi = spec.params[name]
        out[name] = lo + (hi - lo) * rng.random()
    return out


def gen_scene(spec: SceneClassSpec, variant_seed: int, width: int = 32, height: int = 32) -> DepthReflMap:
    """Render one variant of a class.

    The result depends only on ``(spec, variant_seed, width, height)``.
    """
    spec.validate()
    if width < 8 or height < 8:
        raise ConfigError(f"scene grid must be at least 8x8, got {width}x{height}")
    rng = np.random.default_rng([int(variant_seed), int(spec.class_id)])
    params = draw_params(spec, rng)
    x, y = pixel_grid(width, height, spec.extent)
    fn, _ = FAMILIES[spec.family]
    depth, mask = fn(x, y, params, spec.extent)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ConfigError(f"class {spec.class_id} ({spec.family}): parameters {params} give no target pixel")
    depth = np.where(mask, depth, 0.0)
    tgt = depth[mask]
    if np.any(tgt <= 0) or np.any(tgt >= spec.max_range) or not np.all(np.isfinite(tgt)):
        raise ConfigError(
            f"class {spec.class_id}: depths [{tgt.min():.4g}, {tgt.max():.4g}] m "
            f"outside (0, {spec.max_range:.4g})"
        )
    if spec.reflectivity == "binary":
        refl = mask.astype(np.float32)
    else:
        refl = np.where(mask, rng.uniform(0.2, 1.0, size=mask.shape), 0.0)
    return DepthReflMap(depth=depth.astype(np.float32), reflectivity=refl)


# ---------------------------------------------------------------------------
# Map file IO
# ---------------------------------------------------------------------------


def map_to_bytes(m: DepthReflMap) -> bytes:
    header = _MAP_HEADER.pack(MAP_MAGIC, MAP_VERSION, m.width, m.height)
    return header + m.depth.astype("<f4").tobytes() + m.reflectivity.astype("<f4").tobytes()


def map_from_bytes(buf: bytes, path=None) -> DepthReflMap:
    if len(buf) < _MAP_HEADER.size:
        raise FormatError("truncated map header", offset=len(buf), path=path)
    magic, version, w, h = _MAP_HEADER.unpack_from(buf, 0)
    if magic != MAP_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAP_MAGIC!r}", offset=0, path=path)
    if version != MAP_VERSION:
        raise FormatError(f"unsupported map version {version}", offset=4, path=path)
    n = w * h
    need = _MAP_HEADER.size + 2 * 4 * n
    if len(buf) < need:
        raise FormatError(
            f"truncated payload: {len(buf)} bytes, expected {need}", offset=len(buf), path=path
        )
    if len(buf) > need:
        raise FormatError(f"{len(buf) - need} trailing bytes", offset=need, path=path)
    off = _MAP_HEADER.size
    depth = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(h, w)
    refl = np.frombuffer(buf, dtype="<f4", count=n, offset=off + 4 * n).reshape(h, w)
    return DepthReflMap(depth=depth.astype(np.float32), reflectivity=refl.astype(np.float32))


def save_map(m: DepthReflMap, path) -> None:
    atomic_write_bytes(path, map_to_bytes(m))


def load_map(path) -> DepthReflMap:
    path = Path(path)
    return map_from_bytes(path.read_bytes(), path=path)


def map_file_size(width: int, height: int) -> int:
    return _MAP_HEADER.size + 2 * 4 * width * height
