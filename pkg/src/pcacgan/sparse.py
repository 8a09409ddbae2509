"""Coordinate-indexed sparse tensors and sparse convolution.

Coordinates live on the unit lattice; a tensor of stride ``s`` only holds
coordinates divisible by ``s``. Rows are kept in canonical lexicographic
(x, y, z) order so equal tensors compare bit-for-bit.

Kernel-map geometry, with ``t`` the finer of the two strides involved:

* convolution:            input ``i`` feeds output ``o`` through offset ``d`` iff ``i = o + d*t``
* transposed convolution: input ``c`` feeds output ``f`` through offset ``d`` iff ``f = c + d*t``

so a convolution and the transposed convolution built on the same two
coordinate sets contain the same (fine, coarse, offset) triples.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sps

from .errors import EmptyCloud, ShapeMismatch, StrideMismatch

_BITS = 21
_BIAS = 1 << 20
_MASK = (1 << _BITS) - 1
ALLOWED_KERNELS = (1, 3, 5, 9)


def coord_keys(coords):
    """Pack integer triples into int64 keys whose order is lexicographic (x, y, z)."""
    c = np.asarray(coords, dtype=np.int64).reshape(-1, 3) + _BIAS
    return (c[:, 0] << (2 * _BITS)) | (c[:, 1] << _BITS) | c[:, 2]


def keys_to_coords(keys):
    keys = np.asarray(keys, dtype=np.int64)
    x = (keys >> (2 * _BITS)) & _MASK
    y = (keys >> _BITS) & _MASK
    z = keys & _MASK
    return np.stack([x, y, z], axis=1) - _BIAS


def _key_delta(delta):
    delta = np.asarray(delta, dtype=np.int64).reshape(-1, 3)
    return (delta[:, 0] << (2 * _BITS)) + (delta[:, 1] << _BITS) + delta[:, 2]


def kernel_offsets(kernel_size):
    """All offsets of a cubic kernel, shape (K^3, 3) in (dx, dy, dz) columns.

    Row order is lexicographic in (dz, dy, dx), which fixes the weight layout.
    """
    r = kernel_size // 2
    rng = np.arange(-r, r + 1)
    dz, dy, dx = np.meshgrid(rng, rng, rng, indexing="ij")
    return np.stack([dx.ravel(), dy.ravel(), dz.ravel()], axis=1)


def canonical_coords(coords):
    """Sorted unique coordinates."""
    keys = np.unique(coord_keys(coords))
    return keys_to_coords(keys)


def downsample_coords(coords, stride):
    """Unique ``floor(c / stride) * stride`` projections, canonically ordered."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    return canonical_coords((coords // stride) * stride)


def child_coords(coords, stride):
    """The 2x2x2 children (at ``stride // 2``) of every coordinate at ``stride``."""
    half = stride // 2
    corners = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)]) * half
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    return canonical_coords((coords[:, None, :] + corners[None]).reshape(-1, 3))


class SparseTensor:
    """COO coordinates plus one feature row per coordinate."""


    def __init__(self, coords, feats, stride=1, canonical=False):
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim == 1:
            feats = feats.reshape(len(coords), -1) if len(coords) else feats.reshape(0, max(1, feats.size))
        if feats.shape[0] != coords.shape[0]:
            raise ShapeMismatch(f"{coords.shape[0]} coords but {feats.shape[0]} feature rows")
        if stride < 1 or stride & (stride - 1):
            raise StrideMismatch(f"stride must be a positive power of two, got {stride}")
        if len(coords) and np.any(coords % stride):
            raise StrideMismatch(f"coordinates not divisible by stride {stride}")
        keys = coord_keys(coords)
        if not canonical:
            order = np.argsort(keys, kind="stable")
            keys, coords, feats = keys[order], coords[order], feats[order]
        if len(keys) > 1 and np.any(np.diff(keys) <= 0):
            raise ValueError("duplicate coordinates in sparse tensor")
        self.coords = coords
        self.feats = feats
        self.stride = int(stride)
        self._keys = keys

    @property
    def keys(self):
        return self._keys

    @property
    def channels(self):
        return self.feats.shape[1]

    def __len__(self):
        return len(self.coords)

    def lookup(self, coords):
        """Row index of each query coordinate, or -1 when absent."""
        return lookup_keys(self._keys, coord_keys(coords))

    def with_feats(self, feats):
        return SparseTensor(self.coords, feats, self.stride, canonical=True)

    def dense(self, shape=None, origin=(0, 0, 0)):
        """Scatter features into a dense (X, Y, Z, C) grid of stride-spaced cells."""
        origin = np.asarray(origin, dtype=np.int64)
        idx = (self.coords - origin) // self.stride
        if shape is None:
            shape = tuple(idx.max(axis=0) + 1) if len(idx) else (0, 0, 0)
        grid = np.zeros(tuple(shape) + (self.channels,))
        grid[idx[:, 0], idx[:, 1], idx[:, 2]] = self.feats
        return grid

    def __repr__(self):
        return f"SparseTensor(n={len(self)}, channels={self.channels}, stride={self.stride})"


def lookup_keys(sorted_keys, query):
    if len(sorted_keys) == 0:
        return np.full(np.shape(query), -1, dtype=np.int64)
    pos = np.searchsorted(sorted_keys, query)
    pos = np.minimum(pos, len(sorted_keys) - 1)
    return np.where(sorted_keys[pos] == query, pos, -1)


@dataclass(frozen=True)
class ConvSpec:
    kernel_size: int
    stride: int = 1
    in_channels: int = 1
    out_channels: int = 1
    transposed: bool = False

    def __post_init__(self):
        if self.kernel_size not in ALLOWED_KERNELS:
            raise ValueError(f"kernel_size must be one of {ALLOWED_KERNELS}, got {self.kernel_size}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")

    @property
    def volume(self):
        return self.kernel_size ** 3

    @property
    def weight_shape(self):
        return (self.volume, self.in_channels, self.out_channels)


class KernelMap:
    """(offset, input row, output row) triples, sorted by output row then offset."""

    def __init__(self, in_idx, out_idx, offsets, n_in, n_out, volume):
        self.in_idx = np.asarray(in_idx, dtype=np.int64)
        self.out_idx = np.asarray(out_idx, dtype=np.int64)
        self.offsets = np.asarray(offsets, dtype=np.int64)
        self.n_in = int(n_in)
        self.n_out = int(n_out)
        self.volume = int(volume)
        self._csr = {}

    def __len__(self):
        return len(self.in_idx)

    def by_offset(self):
        """Mapping offset index -> (input rows, output rows)."""
        out = {}
        for k in np.unique(self.offsets):
            m = self.offsets == k
            out[int(k)] = (self.in_idx[m], self.out_idx[m])
        return out

    def triples(self):
        return set(zip(self.offsets.tolist(), self.in_idx.tolist(), self.out_idx.tolist()))

    @cached_property
    def swapped(self):
        """Same triples with input and output roles exchanged."""
        order = np.lexsort((self.offsets, self.in_idx))
        return KernelMap(self.out_idx[order], self.in_idx[order], self.offsets[order],
                         self.n_out, self.n_in, self.volume)

    def _structure(self, channels):
        """CSR row pointers and column indices of the im2col matrix."""
        hit = self._csr.get(channels)
        if hit is None:
            counts = np.bincount(self.out_idx, minlength=self.n_out)
            indptr = np.concatenate([[0], np.cumsum(counts) * channels]).astype(np.int64)
            indices = (self.offsets[:, None] * channels + np.arange(channels)[None]).ravel()
            hit = (indptr, indices)
            self._csr[channels] = hit
        return hit

    def im2col(self, feats):
        """Sparse (n_out, volume*C) matrix whose product with flattened weights is the conv."""
        channels = feats.shape[1]
        indptr, indices = self._structure(channels)
        data = feats[self.in_idx].ravel()
        return sps.csr_matrix((data, indices, indptr), shape=(self.n_out, self.volume * channels))


def build_kernel_map(inp, out_coords, spec, out_stride=None):
    """Kernel map from ``inp`` (a SparseTensor) to the output coordinate set.

    ``out_coords`` must be canonically ordered (see :func:`canonical_coords`).
    """
    if spec.transposed:
        expected = inp.stride // spec.stride
        if inp.stride % spec.stride:
            raise StrideMismatch(f"cannot upsample stride {inp.stride} by {spec.stride}")
    else:
        expected = inp.stride * spec.stride
    if out_stride is None:
        out_stride = expected
    if out_stride != expected:
        raise StrideMismatch(f"output stride {out_stride} inconsistent with input stride "
                             f"{inp.stride} and conv stride {spec.stride}")
    out_coords = np.asarray(out_coords, dtype=np.int64).reshape(-1, 3)
    if len(out_coords) and np.any(out_coords % out_stride):
        raise StrideMismatch(f"output coordinates not divisible by stride {out_stride}")
    volume = spec.volume
    if len(out_coords) == 0 or len(inp) == 0:
        empty = np.zeros(0, dtype=np.int64)
        return KernelMap(empty, empty, empty, len(inp), len(out_coords), volume)
    fine = min(inp.stride, out_stride)
    deltas = kernel_offsets(spec.kernel_size) * fine
    if spec.transposed:
        deltas = -deltas
    query = coord_keys(out_coords)[:, None] + _key_delta(deltas)[None, :]
    rows = lookup_keys(inp.keys, query)
    out_idx, off = np.nonzero(rows >= 0)
    in_idx = rows[out_idx, off]
    return KernelMap(in_idx, out_idx, off, len(inp), len(out_coords), volume)


def brute_force_kernel_map(inp, out_coords, spec, out_stride):
    """Reference triples from an all-pairs scan; for tests only."""
    fine = min(inp.stride, out_stride)
    r = spec.kernel_size // 2
    k = spec.kernel_size
    triples = set()
    for oi, o in enumerate(np.asarray(out_coords).tolist()):
        for ii, c in enumerate(inp.coords.tolist()):
            diff = [c[a] - o[a] for a in range(3)]
            if spec.transposed:
                diff = [-v for v in diff]
            if any(v % fine for v in diff):
                continue
            d = [v // fine for v in diff]
            if all(-r <= v <= r for v in d):
                idx = ((d[2] + r) * k + (d[1] + r)) * k + (d[0] + r)
                triples.add((idx, ii, oi))
    return triples


def apply_kernel_map(feats, weights, kmap):
    """``out[o] = sum over (d, i, o) of feats[i] @ weights[d]`` without bias."""
    volume, c_in, c_out = weights.shape
    if feats.shape[1] != c_in or volume != kmap.volume:
        raise ShapeMismatch(f"weights {weights.shape} do not match features with "
                            f"{feats.shape[1]} channels / kernel volume {kmap.volume}")
    if len(kmap) == 0:
        return np.zeros((kmap.n_out, c_out))
    a = kmap.im2col(feats)
    return np.asarray(a @ weights.reshape(volume * c_in, c_out))


def kernel_map_weight_grad(feats, grad_out, kmap):
    """Gradient of ``apply_kernel_map`` with respect to its weights."""
    c_in = feats.shape[1]
    c_out = grad_out.shape[1]
    if len(kmap) == 0:
        return np.zeros((kmap.volume, c_in, c_out))
    a = kmap.im2col(feats)
    return np.asarray(a.T @ grad_out).reshape(kmap.volume, c_in, c_out)


def kernel_map_input_grad(grad_out, weights, kmap):
    """Gradient of ``apply_kernel_map`` with respect to its input features."""
    return apply_kernel_map(grad_out, weights.transpose(0, 2, 1), kmap.swapped)


def _check_weights(spec, weights, bias, in_channels):
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != spec.weight_shape:
        raise ShapeMismatch(f"weights shape {weights.shape}, expected {spec.weight_shape}")
    if in_channels != spec.in_channels:
        raise ShapeMismatch(f"input has {in_channels} channels, spec expects {spec.in_channels}")
    bias = np.zeros(spec.out_channels) if bias is None else np.asarray(bias, dtype=np.float64)
    if bias.shape != (spec.out_channels,):
        raise ShapeMismatch(f"bias shape {bias.shape}, expected ({spec.out_channels},)")
    return weights, bias


def conv_output_coords(inp, spec):
    if spec.stride == 1:
        return inp.coords, inp.stride
    out_stride = inp.stride * 2
    return downsample_coords(inp.coords, out_stride), out_stride


def sparse_conv(inp, weights, bias, spec, kmap=None):
    """Sparse convolution; stride 2 halves the lattice resolution."""
    if spec.transposed:
        raise ValueError("use sparse_conv_transpose for transposed specs")
    weights, bias = _check_weights(spec, weights, bias, inp.channels)
    out_coords, out_stride = conv_output_coords(inp, spec)
    if kmap is None:
        kmap = build_kernel_map(inp, out_coords, spec, out_stride)
    feats = apply_kernel_map(inp.feats, weights, kmap) + bias
    return SparseTensor(out_coords, feats, out_stride, canonical=True)


def sparse_conv_transpose(inp, weights, bias, spec, target_coords, kmap=None):
    """Transposed sparse convolution evaluated exactly on ``target_coords``."""
    if not spec.transposed:
        raise ValueError("sparse_conv_transpose needs a transposed spec")
    weights, bias = _check_weights(spec, weights, bias, inp.channels)
    if inp.stride % spec.stride:
        raise StrideMismatch(f"cannot upsample stride {inp.stride} by {spec.stride}")
    out_stride = inp.stride // spec.stride
    target = canonical_coords(target_coords)
    if kmap is None:
        kmap = build_kernel_map(inp, target, spec, out_stride)
    feats = apply_kernel_map(inp.feats, weights, kmap) + bias
    return SparseTensor(target, feats, out_stride, canonical=True)


def dense_conv_oracle(grid, weights, bias, spec):
    """Plain dense 3D convolution with zero padding; a test oracle.

    ``grid`` is (X, Y, Z, C_in) on the fine lattice. For stride 2 the result
    is sampled at even positions, so ``out[q]`` corresponds to fine ``2*q``.
    Transposed specs take the coarse grid and return the fine one.
    """
    grid = np.asarray(grid, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    bias = np.zeros(spec.out_channels) if bias is None else np.asarray(bias, dtype=np.float64)
    k = spec.kernel_size
    r = k // 2
    offs = kernel_offsets(k)
    if spec.transposed:
        # Zero-stuff the coarse grid onto the fine lattice, then apply the
        # mirrored kernel: out[f] = sum_d x[f - d] W[d].
        s = spec.stride
        fine = np.zeros((grid.shape[0] * s, grid.shape[1] * s, grid.shape[2] * s, grid.shape[3]))
        fine[::s, ::s, ::s] = grid
        src, sign = fine, -1
    else:
        src, sign = grid, 1
    nx, ny, nz, _ = src.shape
    padded = np.pad(src, ((r, r), (r, r), (r, r), (0, 0)))
    out = np.zeros((nx, ny, nz, spec.out_channels))
    for n, (dx, dy, dz) in enumerate(offs):
        sx, sy, sz = r + sign * dx, r + sign * dy, r + sign * dz
        window = padded[sx:sx + nx, sy:sy + ny, sz:sz + nz]
        out += window @ weights[n]
    out += bias
    if not spec.transposed and spec.stride == 2:
        out = out[::2, ::2, ::2]
    return out


def prune(inp, keep):
    """Rows of ``inp`` whose coordinate is in ``keep``."""
    keep_keys = np.unique(coord_keys(keep)) if len(np.asarray(keep).reshape(-1, 3)) else np.zeros(0, np.int64)
    mask = lookup_keys(keep_keys, inp.keys) >= 0
    return SparseTensor(inp.coords[mask], inp.feats[mask], inp.stride, canonical=True)


def from_point_cloud(pc):
    """Stride-1 tensor of YUV colours scaled to [0, 1]."""
    if len(pc) == 0:
        raise EmptyCloud("cannot build a sparse tensor from an empty cloud")
    return SparseTensor(pc.positions, pc.colors / 255.0, 1)


def to_point_cloud(t, bit_depth=8):
    from .pointcloud import PointCloud

    if t.stride != 1:
        raise StrideMismatch("only stride-1 tensors map back to point clouds")
    return PointCloud(t.coords, np.clip(t.feats[:, :3], 0.0, 1.0) * 255.0, bit_depth)
