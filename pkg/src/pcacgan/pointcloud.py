"""Point cloud container, PLY I/O, colour conversion and synthetic data."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import MalformedPly, UnknownShapeKind

# Full-range BT.709 luma coefficients.
KR = 0.2126
KB = 0.0722
KG = 1.0 - KR - KB
U_DIV = 2.0 * (1.0 - KB)
V_DIV = 2.0 * (1.0 - KR)

MAX_BIT_DEPTH = 16


def rgb_to_yuv(rgb, clamp=True):
    """Convert RGB in [0, 255] to full-range BT.709 YUV with chroma offset 128.

    Accepts a single triple or an (N, 3) array.
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    if clamp:
        rgb = np.clip(rgb, 0.0, 255.0)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    y = KR * r + KG * g + KB * b
    u = (b - y) / U_DIV + 128.0
    v = (r - y) / V_DIV + 128.0
    out = np.stack([y, u, v], axis=-1)
    if clamp:
        out = np.clip(out, 0.0, 255.0)
    return out


def yuv_to_rgb(yuv, clamp=True):
    """Inverse of :func:`rgb_to_yuv`."""
    yuv = np.asarray(yuv, dtype=np.float64)
    y = yuv[..., 0]
    u = yuv[..., 1] - 128.0
    v = yuv[..., 2] - 128.0
    r = y + V_DIV * v
    b = y + U_DIV * u
    g = (y - KR * r - KB * b) / KG
    out = np.stack([r, g, b], axis=-1)
    if clamp:
        out = np.clip(out, 0.0, 255.0)
    return out


def merge_duplicates(positions, colors):
    """Collapse repeated positions, averaging their colours channel-wise.

    Output is sorted lexicographically by (x, y, z), which makes the merge
    independent of input order.
    """
    positions = np.asarray(positions, dtype=np.int64).reshape(-1, 3)
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    if len(positions) == 0:
        return positions, colors
    uniq, inverse, counts = np.unique(positions, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((len(uniq), 3))
    np.add.at(sums, inverse, colors)
    return uniq, sums / counts[:, None]


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Integer voxel positions with one YUV triple per point."""

    positions: np.ndarray
    colors: np.ndarray
    bit_depth: int = 8

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.int64).reshape(-1, 3)
        col = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if len(pos) != len(col):
            raise ValueError(f"{len(pos)} positions but {len(col)} colours")
        if not 1 <= self.bit_depth <= MAX_BIT_DEPTH:
            raise ValueError(f"bit_depth must be in [1, {MAX_BIT_DEPTH}], got {self.bit_depth}")
        if len(pos) and (pos.min() < 0 or pos.max() >= (1 << self.bit_depth)):
            raise ValueError(f"coordinates outside [0, 2^{self.bit_depth})")
        pos.setflags(write=False)
        col.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "colors", col)

    @classmethod
    def from_points(cls, positions, colors, bit_depth=8):
        """Build a cloud, merging duplicate positions by colour mean."""
        pos, col = merge_duplicates(positions, colors)
        return cls(pos, col, bit_depth)

    def __len__(self):
        return len(self.positions)

    def sorted(self):
        order = np.lexsort(self.positions.T[::-1])
        return PointCloud(self.positions[order], self.colors[order], self.bit_depth)

    def with_colors(self, colors):
        return PointCloud(self.positions, colors, self.bit_depth)


# --------------------------------------------------------------------------- PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


@dataclass
class _Element:
    name: str
    count: int
    props: list = field(default_factory=list)  # (name, dtype) or (name, (count_t, item_t))


def _parse_header(fh):
    magic = fh.readline()
    if magic.strip() != b"ply":
        raise MalformedPly("missing 'ply' magic line")
    fmt = None
    elements = []
    while True:
        raw = fh.readline()
        if not raw:
            raise MalformedPly("header ended before end_header")
        line = raw.decode("ascii", errors="replace").strip()
        if not line or line.startswith(("comment", "obj_info")):
            continue
        words = line.split()
        if words[0] == "end_header":
            break
        if words[0] == "format":
            if len(words) < 2 or words[1] not in ("ascii", "binary_little_endian", "binary_big_endian"):
                raise MalformedPly(f"unsupported format line: {line!r}")
            fmt = words[1]
        elif words[0] == "element":
            if len(words) != 3 or not re.fullmatch(r"\d+", words[2]):
                raise MalformedPly(f"bad element line: {line!r}")
            elements.append(_Element(words[1], int(words[2])))
        elif words[0] == "property":
            if not elements:
                raise MalformedPly("property before any element")
            if words[1] == "list":
                if len(words) != 5 or words[2] not in _PLY_TYPES or words[3] not in _PLY_TYPES:
                    raise MalformedPly(f"bad list property: {line!r}")
                elements[-1].props.append((words[4], (_PLY_TYPES[words[2]], _PLY_TYPES[words[3]])))
            else:
                if len(words) != 3 or words[1] not in _PLY_TYPES:
                    raise MalformedPly(f"bad property line: {line!r}")
                elements[-1].props.append((words[2], _PLY_TYPES[words[1]]))
        else:
            raise MalformedPly(f"unexpected header line: {line!r}")
    if fmt is None:
        raise MalformedPly("no format line")
    return fmt, elements


def _read_vertices(fh, fmt, elements):
    for el in elements:
        if el.name == "vertex":
            break
        if el.count:
            # Skipping a preceding element would need a full list-aware reader.
            raise MalformedPly(f"element {el.name!r} precedes vertex data")
    else:
        raise MalformedPly("no vertex element")
    if any(isinstance(t, tuple) for _, t in el.props):
        raise MalformedPly("list properties on vertex element are not supported")
    names = [n for n, _ in el.props]
    for req in ("x", "y", "z", "red", "green", "blue"):
        if req not in names:
            raise MalformedPly(f"vertex element lacks property {req!r}")
    if fmt == "ascii":
        rows = []
        for _ in range(el.count):
            line = fh.readline()
            if not line:
                raise MalformedPly("truncated ASCII vertex data")
            vals = line.split()
            if len(vals) < len(names):
                raise MalformedPly(f"vertex row has {len(vals)} values, expected {len(names)}")
            rows.append([float(v) for v in vals[: len(names)]])
        data = np.array(rows, dtype=np.float64).reshape(-1, len(names))
        cols = {n: data[:, i] for i, n in enumerate(names)}
    else:
        endian = "<" if fmt == "binary_little_endian" else ">"
        dtype = np.dtype([(n, endian + t) for n, t in el.props])
        buf = fh.read(dtype.itemsize * el.count)
        if len(buf) != dtype.itemsize * el.count:
            raise MalformedPly("truncated binary vertex data")
        arr = np.frombuffer(buf, dtype=dtype)
        cols = {n: arr[n].astype(np.float64) for n in names}
    xyz = np.stack([cols["x"], cols["y"], cols["z"]], axis=1)
    rgb = np.stack([cols["red"], cols["green"], cols["blue"]], axis=1)
    return xyz, rgb


def load_ply(path, bit_depth=None):
    """Read a PLY point cloud with x,y,z and red,green,blue vertex properties.

    Colours are converted to YUV and duplicate positions merged. The bit depth
    defaults to the smallest value >= 8 that holds every coordinate.
    """
    with open(path, "rb") as fh:
        fmt, elements = _parse_header(fh)
        xyz, rgb = _read_vertices(fh, fmt, elements)
    pos = np.rint(xyz).astype(np.int64)
    if len(pos) and pos.min() < 0:
        raise MalformedPly("negative coordinates; expected voxelized geometry")
    needed = int(pos.max()).bit_length() if len(pos) else 1
    if needed > MAX_BIT_DEPTH:
        raise MalformedPly(f"coordinates need {needed} bits, limit is {MAX_BIT_DEPTH}")
    if bit_depth is None:
        bit_depth = max(8, needed)
    elif needed > bit_depth:
        raise MalformedPly(f"coordinates need {needed} bits but bit_depth={bit_depth}")
    return PointCloud.from_points(pos, rgb_to_yuv(rgb), bit_depth)


def save_ply(pc, path):
    """Write a binary little-endian PLY with integer coordinates and uchar RGB."""
    rgb = np.clip(np.rint(yuv_to_rgb(pc.colors)), 0, 255).astype(np.uint8)
    dtype = np.dtype([("x", "<i4"), ("y", "<i4"), ("z", "<i4"),
                      ("red", "u1"), ("green", "u1"), ("blue", "u1")])
    rec = np.empty(len(pc), dtype=dtype)
    if len(pc):
        rec["x"], rec["y"], rec["z"] = pc.positions.T
        rec["red"], rec["green"], rec["blue"] = rgb.T
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(pc)}\n"
        "property int x\nproperty int y\nproperty int z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(rec.tobytes())


# ---------------------------------------------------------------- synthetic data

SHAPES = ("sphere", "cube", "plane")
TEXTURES = ("gradient", "checker", "noise")


@dataclass(frozen=True)
class SynthSpec:
    shape: str = "sphere"
    n_points: int = 1000
    texture: str = "gradient"
    seed: int = 0
    extent: float = 32.0  # sphere radius / cube and plane half-width, in voxels
    bit_depth: int = 8
    checker_size: int = 8


def _sample_surface(spec, rng):
    n = spec.n_points
    r = spec.extent
    if spec.shape == "sphere":
        v = rng.normal(size=(n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return v * r
    if spec.shape == "cube":
        face = rng.integers(0, 6, size=n)
        uv = rng.uniform(-r, r, size=(n, 2))
        pts = np.empty((n, 3))
        axis = face // 2
        sign = np.where(face % 2 == 0, -1.0, 1.0)
        for a in range(3):
            m = axis == a
            others = [k for k in range(3) if k != a]
            pts[m, a] = sign[m] * r
            pts[m, others[0]] = uv[m, 0]
            pts[m, others[1]] = uv[m, 1]
        return pts
    if spec.shape == "plane":
        uv = rng.uniform(-r, r, size=(n, 2))
        # Gentle tilt so the plane spans several z layers.
        z = 0.25 * uv[:, 0]
        return np.column_stack([uv[:, 0], uv[:, 1], z])
    raise UnknownShapeKind(f"unknown shape kind {spec.shape!r}; expected one of {SHAPES}")


def _value_noise(pos, rng, cell=12.0):
    """Smooth trilinear value noise over a random lattice, values in [0, 1]."""
    g = pos / cell
    base = np.floor(g).astype(np.int64)
    frac = g - base
    lo = base.min(axis=0)
    span = base.max(axis=0) - lo + 2
    lattice = rng.uniform(size=tuple(span) + (3,))
    idx = base - lo
    out = np.zeros((len(pos), 3))
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                w = (np.where(dx, frac[:, 0], 1 - frac[:, 0])
                     * np.where(dy, frac[:, 1], 1 - frac[:, 1])
                     * np.where(dz, frac[:, 2], 1 - frac[:, 2]))
                out += w[:, None] * lattice[idx[:, 0] + dx, idx[:, 1] + dy, idx[:, 2] + dz]
    return out


def _texture(spec, pos, rng):
    if spec.texture == "gradient":
        lo, hi = pos.min(axis=0), pos.max(axis=0)
        t = (pos - lo) / np.maximum(hi - lo, 1)
        rgb = np.column_stack([255 * t[:, 0], 255 * t[:, 1], 255 * (1 - t[:, 2])])
        return rgb
    if spec.texture == "checker":
        parity = (pos // spec.checker_size).sum(axis=1) % 2
        a = np.array([230.0, 200.0, 40.0])
        b = np.array([30.0, 60.0, 180.0])
        return np.where(parity[:, None] == 0, a, b)
    if spec.texture == "noise":
        return 255.0 * _value_noise(pos.astype(np.float64), rng)
    raise UnknownShapeKind(f"unknown texture kind {spec.texture!r}; expected one of {TEXTURES}")


def synth_generate(spec):
    """Deterministic coloured surface cloud described by ``spec``.

    Colours are evaluated on the quantized positions, so points that collide
    after quantization share a colour and the merge never blends textures.
    """
    if spec.n_points < 1:
        raise ValueError("n_points must be >= 1")
    if spec.shape not in SHAPES:
        raise UnknownShapeKind(f"unknown shape kind {spec.shape!r}; expected one of {SHAPES}")
    if spec.texture not in TEXTURES:
        raise UnknownShapeKind(f"unknown texture kind {spec.texture!r}; expected one of {TEXTURES}")
    rng = np.random.default_rng(spec.seed)
    pts = _sample_surface(spec, rng)
    center = (1 << spec.bit_depth) / 2.0
    limit = (1 << spec.bit_depth) - 1
    pos = np.clip(np.rint(pts + center), 0, limit).astype(np.int64)
    pos = np.unique(pos, axis=0)
    rgb = _texture(spec, pos, rng)
    return PointCloud(pos, rgb_to_yuv(rgb), spec.bit_depth)


def synth_dataset(n_clouds, n_points=800, seed=0, extent=32.0):
    """Cycle through shape/texture combinations to build a small training set."""
    combos = [(s, t) for t in TEXTURES for s in SHAPES]
    out = []
    for k in range(n_clouds):
        shape, texture = combos[k % len(combos)]
        out.append(synth_generate(SynthSpec(shape, n_points, texture, seed + k, extent)))
    return out


def sphere_radius_bound(spec):
    """Max distance from the lattice centre any quantized sphere point can have."""
    return spec.extent + math.sqrt(3) / 2
