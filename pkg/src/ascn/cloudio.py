"""Point-cloud containers, CSV/PLY serialization, synthetic shapes and density shift.

Coordinates are float64 everywhere. Serialization writes ``repr(float)``, which
is the shortest string that parses back to the identical double, so
``load_cloud(save_cloud(c))`` is bitwise exact.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import DegenerateCloud, InvalidParam, ParseError

SHAPE_KINDS = ("plane", "sphere", "line", "box", "cylinder")
RING_BINS = 32
FORMATS = ("csv", "ply-ascii")

Point3 = tuple[float, float, float]


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Ordered (N, 3) float64 points with an optional per-point scan-ring index."""

    points: np.ndarray
    ring: np.ndarray | None = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64, copy=True)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise InvalidParam(f"points must have shape (N, 3), got {pts.shape}")
        if pts.shape[0] < 1:
            raise InvalidParam("a point cloud needs at least one point")
        if not np.all(np.isfinite(pts)):
            raise InvalidParam("point coordinates must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.ring is not None:
            ring = np.array(self.ring, dtype=np.int64, copy=True)
            if ring.shape != (pts.shape[0],):
                raise InvalidParam("ring must have one entry per point")
            if np.any(ring < 0):
                raise InvalidParam("ring indices must be >= 0")
            ring.setflags(write=False)
            object.__setattr__(self, "ring", ring)

    def __len__(self):
        return self.points.shape[0]

    def __eq__(self, other):
        if not isinstance(other, PointCloud):
            return NotImplemented
        if self.points.shape != other.points.shape:
            return False
        if (self.ring is None) != (other.ring is None):
            return False
        same_ring = self.ring is None or np.array_equal(self.ring, other.ring)
        return same_ring and np.array_equal(self.points, other.points)

    __hash__ = None

    def subset(self, indices) -> "PointCloud":
        idx = np.asarray(indices, dtype=np.int64)
        ring = None if self.ring is None else self.ring[idx]
        return PointCloud(self.points[idx], ring)

    def translated(self, offset) -> "PointCloud":
        return PointCloud(self.points + np.asarray(offset, dtype=np.float64), self.ring)


@dataclass(frozen=True)
class LabeledCloud:
    cloud: PointCloud
    label: int


@dataclass
class Dataset:
    items: list[LabeledCloud]
    class_names: list[str]
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.class_names) < 2:
            raise InvalidParam("a dataset needs at least two classes")
        for item in self.items:
            if not 0 <= item.label < len(self.class_names):
                raise InvalidParam(f"label {item.label} outside [0, {len(self.class_names)})")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def __len__(self):
        return len(self.items)

    def labels(self) -> np.ndarray:
        return np.array([it.label for it in self.items], dtype=np.int64)


# ---------------------------------------------------------------------------
# CSV / PLY


def _parse_float(token: str, line: int) -> float:
    try:
        value = float(token)
    except ValueError:
        raise ParseError(f"non-numeric field {token!r}", line) from None
    if not math.isfinite(value):
        raise ParseError(f"non-finite coordinate {token!r}", line)
    return value


def _parse_ring(token: str, line: int) -> int:
    try:
        value = int(token)
    except ValueError:
        raise ParseError(f"ring index {token!r} is not an integer", line) from None
    if value < 0:
        raise ParseError(f"negative ring index {value}", line)
    return value


def _is_number(token: str) -> bool:
    try:
        float(token)
    except ValueError:
        return False
    return True


def _read_csv(text: str) -> PointCloud:
    lines = text.splitlines()
    coords: list[list[float]] = []
    rings: list[int] = []
    arity = None
    for lineno, raw in enumerate(lines, start=1):
        row = raw.strip()
        if not row:
            continue
        tokens = [t.strip() for t in row.split(",")]
        if arity is None and not coords and not _is_number(tokens[0]):
            # header row
            continue
        if len(tokens) not in (3, 4):
            raise ParseError(f"expected 3 or 4 columns, got {len(tokens)}", lineno)
        if arity is None:
            arity = len(tokens)
        elif len(tokens) != arity:
            raise ParseError(f"expected {arity} columns, got {len(tokens)}", lineno)
        coords.append([_parse_float(t, lineno) for t in tokens[:3]])
        if arity == 4:
            rings.append(_parse_ring(tokens[3], lineno))
    if not coords:
        raise ParseError("no points in file", 0)
    return PointCloud(np.array(coords), np.array(rings) if arity == 4 else None)


_PLY_FLOAT = {"float", "double", "float32", "float64"}
_PLY_INT = {"char", "uchar", "short", "ushort", "int", "uint", "int8", "uint8",
            "int16", "uint16", "int32", "uint32"}


def _read_ply(text: str) -> PointCloud:
    lines = text.splitlines()
    if not lines:
        raise ParseError("empty file", 0)
    if lines[0].strip() != "ply":
        raise ParseError("missing 'ply' magic", 1)
    n_vertex = None
    props: list[str] = []
    header_end = None
    for lineno, raw in enumerate(lines[1:], start=2):
        words = raw.split()
        if not words:
            continue
        key = words[0]
        if key == "format":
            if words[1:] != ["ascii", "1.0"]:
                raise ParseError(f"unsupported format {' '.join(words[1:])!r}", lineno)
        elif key in ("comment", "obj_info"):
            continue
        elif key == "element":
            if len(words) != 3 or words[1] != "vertex" or n_vertex is not None:
                raise ParseError(f"unsupported element {' '.join(words[1:])!r}", lineno)
            try:
                n_vertex = int(words[2])
            except ValueError:
                raise ParseError("bad vertex count", lineno) from None
        elif key == "property":
            if n_vertex is None or len(words) != 3:
                raise ParseError("malformed property line", lineno)
            ptype, name = words[1], words[2]
            if name in ("x", "y", "z") and ptype in _PLY_FLOAT:
                pass
            elif name == "ring" and ptype in _PLY_INT:
                pass
            else:
                raise ParseError(f"unsupported property {ptype} {name}", lineno)
            if name in props:
                raise ParseError(f"duplicate property {name}", lineno)
            props.append(name)
        elif key == "end_header":
            header_end = lineno
            break
        else:
            raise ParseError(f"unexpected header line {raw.strip()!r}", lineno)
    if header_end is None:
        raise ParseError("missing end_header", len(lines))
    if n_vertex is None or sorted(props) not in (["x", "y", "z"], ["ring", "x", "y", "z"]):
        raise ParseError("vertex element must declare x, y, z (and optionally ring)", header_end)
    if n_vertex < 1:
        raise ParseError("no points in file", header_end)
    col = {name: i for i, name in enumerate(props)}
    coords = np.empty((n_vertex, 3))
    rings = np.empty(n_vertex, dtype=np.int64) if "ring" in col else None
    body = [(i, ln) for i, ln in enumerate(lines[header_end:], start=header_end + 1) if ln.strip()]
    if len(body) < n_vertex:
        raise ParseError(f"expected {n_vertex} vertices, found {len(body)}", len(lines))
    if len(body) > n_vertex:
        raise ParseError("trailing data after vertex list", body[n_vertex][0])
    for row, (lineno, raw) in enumerate(body):
        tokens = raw.split()
        if len(tokens) != len(props):
            raise ParseError(f"expected {len(props)} values, got {len(tokens)}", lineno)
        for j, axis in enumerate("xyz"):
            coords[row, j] = _parse_float(tokens[col[axis]], lineno)
        if rings is not None:
            rings[row] = _parse_ring(tokens[col["ring"]], lineno)
    return PointCloud(coords, rings)


def _infer_format(path, fmt):
    if fmt is not None:
        if fmt not in FORMATS:
            raise InvalidParam(f"unknown format {fmt!r}; expected one of {FORMATS}")
        return fmt
    return "ply-ascii" if str(path).lower().endswith(".ply") else "csv"


def load_cloud(path, format: str | None = None) -> PointCloud:
    """Read a cloud from ``path``; ``format`` defaults to the file extension."""
    fmt = _infer_format(path, format)
    with open(path, encoding="utf-8", newline="") as fh:
        text = fh.read()
    if not text.strip():
        raise ParseError("empty file", 0)
    return _read_ply(text) if fmt == "ply-ascii" else _read_csv(text)


def _format_rows(cloud: PointCloud, sep: str) -> list[str]:
    rows = []
    ring = cloud.ring
    for i, (x, y, z) in enumerate(cloud.points.tolist()):
        fields = [repr(x), repr(y), repr(z)]
        if ring is not None:
            fields.append(str(int(ring[i])))
        rows.append(sep.join(fields))
    return rows


def save_cloud(cloud: PointCloud, path, format: str | None = None) -> None:
    fmt = _infer_format(path, format)
    if fmt == "csv":
        lines = _format_rows(cloud, ",")
    else:
        lines = ["ply", "format ascii 1.0", f"element vertex {len(cloud)}",
                 "property double x", "property double y", "property double z"]
        if cloud.ring is not None:
            lines.append("property int ring")
        lines.append("end_header")
        lines.extend(_format_rows(cloud, " "))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# synthetic data


def elevation_rings(points: np.ndarray, bins: int = RING_BINS) -> np.ndarray:
    """Quantize each point's elevation angle, seen from the centroid, into ``bins`` rings."""
    rel = points - points.mean(axis=0)
    elev = np.arctan2(rel[:, 2], np.hypot(rel[:, 0], rel[:, 1]))
    ring = np.floor((elev + np.pi / 2) / np.pi * bins).astype(np.int64)
    return np.clip(ring, 0, bins - 1)


def _sample_surface(kind: str, n: int, scale: float, rng: np.random.Generator) -> np.ndarray:
    half = scale / 2.0
    if kind == "plane":
        xy = rng.uniform(-half, half, size=(n, 2))
        return np.column_stack([xy, np.zeros(n)])
    if kind == "line":
        x = rng.uniform(-half, half, size=n)
        return np.column_stack([x, np.zeros(n), np.zeros(n)])
    if kind == "sphere":
        v = rng.standard_normal((n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return scale * v
    if kind == "box":
        face = rng.integers(0, 6, size=n)
        uv = rng.uniform(-half, half, size=(n, 2))
        pts = np.empty((n, 3))
        axis = face // 2
        sign = np.where(face % 2 == 0, -half, half)
        for a in range(3):
            sel = axis == a
            others = [b for b in range(3) if b != a]
            pts[sel, a] = sign[sel]
            pts[sel, others[0]] = uv[sel, 0]
            pts[sel, others[1]] = uv[sel, 1]
        return pts
    if kind == "cylinder":
        theta = rng.uniform(0.0, 2 * np.pi, size=n)
        z = rng.uniform(-half, half, size=n)
        return np.column_stack([half * np.cos(theta), half * np.sin(theta), z])
    raise InvalidParam(f"unknown shape kind {kind!r}; expected one of {SHAPE_KINDS}")


def generate_shape(kind: str, n_points: int, noise_sigma: float, scale: float, seed: int) -> PointCloud:
    """Sample ``n_points`` uniformly on an origin-centred ideal surface, plus Gaussian noise.

    ``scale`` is the side length (plane, line, box), the radius (sphere) or the
    height and diameter (cylinder, lateral surface only).
    """
    if kind not in SHAPE_KINDS:
        raise InvalidParam(f"unknown shape kind {kind!r}; expected one of {SHAPE_KINDS}")
    if n_points < 8:
        raise InvalidParam("n_points must be >= 8")
    if not noise_sigma >= 0:
        raise InvalidParam("noise_sigma must be >= 0")
    if not scale > 0:
        raise InvalidParam("scale must be > 0")
    rng = np.random.default_rng(seed)
    pts = _sample_surface(kind, int(n_points), float(scale), rng)
    if noise_sigma > 0:
        pts = pts + rng.normal(0.0, noise_sigma, size=pts.shape)
    return PointCloud(pts, elevation_rings(pts))


def yaw_rotation(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class ClassSpec:
    """Generator recipe for one class. Ranges are inclusive ``(lo, hi)`` pairs."""

    name: str
    kind: str
    count: int
    n_points: tuple[int, int] = (300, 300)
    noise: tuple[float, float] = (0.0, 0.0)
    scale: tuple[float, float] = (1.0, 1.0)
    random_yaw: bool = True

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind, "count": self.count,
                "n_points": list(self.n_points), "noise": list(self.noise),
                "scale": list(self.scale), "random_yaw": self.random_yaw}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ClassSpec":
        return cls(name=d["name"], kind=d["kind"], count=int(d["count"]),
                   n_points=tuple(int(v) for v in d.get("n_points", (300, 300))),
                   noise=tuple(float(v) for v in d.get("noise", (0.0, 0.0))),
                   scale=tuple(float(v) for v in d.get("scale", (1.0, 1.0))),
                   random_yaw=bool(d.get("random_yaw", True)))


def default_class_specs(count: int = 50, n_points: int = 300) -> list[ClassSpec]:
    """The line / plane / sphere desk-scale stand-in for a three-class LiDAR task."""
    common = dict(count=count, n_points=(n_points, n_points), noise=(0.005, 0.02))
    return [ClassSpec("line", "line", scale=(1.0, 3.0), **common),
            ClassSpec("plane", "plane", scale=(0.8, 2.0), **common),
            ClassSpec("sphere", "sphere", scale=(0.4, 1.0), **common)]


def generate_dataset(spec: Sequence[ClassSpec], seed: int) -> Dataset:
    """Generate ``count`` clouds per class, each with its own child seed of ``seed``."""
    spec = list(spec)
    if len(spec) < 2:
        raise InvalidParam("need at least two classes")
    for cs in spec:
        if cs.count < 1:
            raise InvalidParam(f"class {cs.name!r}: count must be >= 1")
        if cs.kind not in SHAPE_KINDS:
            raise InvalidParam(f"class {cs.name!r}: unknown kind {cs.kind!r}")
    root = np.random.SeedSequence(seed)
    class_seeds = root.spawn(len(spec))
    items = []
    for label, (cs, ss) in enumerate(zip(spec, class_seeds)):
        for child in ss.spawn(cs.count):
            rng = np.random.default_rng(child)
            n = int(rng.integers(cs.n_points[0], cs.n_points[1] + 1))
            noise = float(rng.uniform(*cs.noise))
            scale = float(rng.uniform(*cs.scale))
            shape_seed = int(rng.integers(0, 2**63 - 1))
            cloud = generate_shape(cs.kind, n, noise, scale, shape_seed)
            if cs.random_yaw:
                pts = cloud.points @ yaw_rotation(rng.uniform(0, 2 * np.pi)).T
                cloud = PointCloud(pts, elevation_rings(pts))
            items.append(LabeledCloud(cloud, label))
    meta = {"source": "synthetic", "seed": str(seed), "density": "dense",
            "spec": json.dumps([cs.to_dict() for cs in spec], sort_keys=True)}
    return Dataset(items, [cs.name for cs in spec], meta)


def decimate_density(cloud: PointCloud, keep_every: int, seed: int = 0) -> PointCloud:
    """Thin a cloud to simulate a sensor with fewer scan channels.

    With ring indices, keeps whole scanlines whose ring is a multiple of
    ``keep_every``. Without them, keeps a seeded uniform random subset of
    ``ceil(N / keep_every)`` points, in original order.
    """
    if keep_every < 1:
        raise InvalidParam("keep_every must be >= 1")
    if keep_every == 1:
        return cloud
    if cloud.ring is not None:
        keep = np.flatnonzero(cloud.ring % keep_every == 0)
    else:
        n = len(cloud)
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.choice(n, size=-(-n // keep_every), replace=False))
    if keep.size == 0:
        raise DegenerateCloud(f"no points survive keep_every={keep_every}")
    return cloud.subset(keep)


def strip_rings(cloud: PointCloud) -> PointCloud:
    return PointCloud(cloud.points)


def decimate_dataset(ds: Dataset, keep_every: int, seed: int = 0, use_rings: bool = True) -> Dataset:
    """Apply ``decimate_density`` to every item; ``use_rings=False`` forces random thinning."""
    seeds = np.random.SeedSequence(seed).generate_state(max(len(ds), 1), dtype=np.uint64)
    items = []
    for item, s in zip(ds.items, seeds):
        cloud = item.cloud if use_rings else strip_rings(item.cloud)
        items.append(LabeledCloud(decimate_density(cloud, keep_every, int(s)), item.label))
    meta = dict(ds.metadata)
    meta["density"] = f"decimated_x{keep_every}" if keep_every > 1 else meta.get("density", "dense")
    meta["decimation"] = "scanline" if use_rings else "random"
    return Dataset(items, list(ds.class_names), meta)


def center_cloud(cloud: PointCloud) -> PointCloud:
    """Translate so the centroid is the origin. No rescaling."""
    return PointCloud(cloud.points - cloud.points.mean(axis=0), cloud.ring)


# ---------------------------------------------------------------------------
# dataset directories

MANIFEST = "manifest.json"


def save_dataset(ds: Dataset, directory, format: str = "csv") -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ext = "ply" if format == "ply-ascii" else "csv"
    entries = []
    for i, item in enumerate(ds.items):
        rel = f"cloud_{i:05d}.{ext}"
        save_cloud(item.cloud, directory / rel, format)
        entries.append({"path": rel, "label": item.label})
    manifest = {"class_names": list(ds.class_names), "metadata": dict(ds.metadata), "items": entries}
    with open(directory / MANIFEST, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    path = directory / MANIFEST
    if not path.is_file():
        raise FileNotFoundError(f"{path}: no such dataset manifest")
    with open(path, encoding="utf-8") as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"manifest: {exc.msg}", exc.lineno) from None
    items = []
    for entry in manifest["items"]:
        rel = entry["path"]
        if os.path.isabs(rel) or ".." in Path(rel).parts:
            raise ParseError(f"manifest path {rel!r} escapes the dataset directory")
        items.append(LabeledCloud(load_cloud(directory / rel), int(entry["label"])))
    meta = {str(k): str(v) for k, v in manifest.get("metadata", {}).items()}
    return Dataset(items, list(manifest["class_names"]), meta)
