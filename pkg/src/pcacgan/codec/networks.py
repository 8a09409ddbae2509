"""Encoder, generator and discriminator built on the sparse engine.

All three networks read their kernel maps from a :class:`Geometry`, which
holds the occupied coordinate set of a voxelized cloud at strides 1, 2, 4
and 8. Geometry is lossless, so the decoder can rebuild exactly the same
object from positions alone and kernel maps are computed once per cloud.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import nn, sparse
from ..errors import MissingGeometry, ShapeMismatch, StrideMismatch

STRIDES = (1, 2, 4, 8)
LATENT_STRIDE = 8


@dataclass(frozen=True)
class CodecConfig:
    channels: int = 128
    latent_channels: int = 8
    kernels: tuple = (9, 5, 5)
    dropout: float = 0.3

    def __post_init__(self):
        if len(self.kernels) != 3:
            raise ValueError("three encoder kernel sizes are required")
        if self.channels < 1 or self.latent_channels < 1:
            raise ValueError("channel counts must be positive")

    @property
    def generator_kernels(self):
        return tuple(reversed(self.kernels))


def _skeleton(coords, stride):
    return sparse.SparseTensor(coords, np.zeros((len(coords), 1)), stride, canonical=True)


class Geometry:
    """Coordinate pyramid of one voxelized cloud with memoized kernel maps."""

    def __init__(self, coords):
        coords = sparse.canonical_coords(coords)
        if len(coords) == 0:
            raise MissingGeometry("geometry has no occupied voxels")
        self.coords = {1: coords}
        for s in STRIDES[1:]:
            self.coords[s] = sparse.downsample_coords(self.coords[s // 2], s)
        self.skeletons = {s: _skeleton(c, s) for s, c in self.coords.items()}
        self._maps = {}
        self._candidates = {}

    def __len__(self):
        return len(self.coords[1])

    def down_map(self, stride, kernel):
        """Map for a stride-2 conv from ``stride`` to ``2 * stride``."""
        key = ("down", stride, kernel)
        kmap = self._maps.get(key)
        if kmap is None:
            spec = sparse.ConvSpec(kernel, 2)
            kmap = sparse.build_kernel_map(self.skeletons[stride], self.coords[2 * stride], spec)
            self._maps[key] = kmap
        return kmap

    def candidates(self, stride):
        """Children at ``stride // 2`` of the occupied set at ``stride``, with labels.

        Returns (candidate coords, occupied mask, candidate row of every true coord).
        """
        hit = self._candidates.get(stride)
        if hit is None:
            fine = stride // 2
            cand = sparse.child_coords(self.coords[stride], stride)
            rows = sparse.lookup_keys(sparse.coord_keys(cand), sparse.coord_keys(self.coords[fine]))
            if np.any(rows < 0):
                raise MissingGeometry("true coordinates missing from the candidate set")
            occupied = np.zeros(len(cand), dtype=bool)
            occupied[rows] = True
            hit = (cand, occupied, rows)
            self._candidates[stride] = hit
        return hit

    def up_map(self, stride, kernel, targets="true"):
        """Map for a transposed stride-2 conv from ``stride`` to ``stride // 2``."""
        if stride not in STRIDES[1:]:
            raise StrideMismatch(f"cannot upsample from stride {stride}")
        key = ("up", stride, kernel, targets)
        kmap = self._maps.get(key)
        if kmap is None:
            fine = stride // 2
            out = self.coords[fine] if targets == "true" else self.candidates(stride)[0]
            spec = sparse.ConvSpec(kernel, 2, transposed=True)
            kmap = sparse.build_kernel_map(self.skeletons[stride], out, spec, out_stride=fine)
            self._maps[key] = kmap
        return kmap


def _conv(tape, params, name, x, kmap, spec, coords_in, coords_out, fine_stride, dense):
    w = tape.param(params[f"{name}.weight"])
    b = tape.param(params[f"{name}.bias"])
    if dense:
        return nn.dense_grid_conv(x, w, b, kmap, coords_in, coords_out, spec, fine_stride)
    return nn.sparse_conv(x, w, b, kmap)


# ------------------------------------------------------------ initialization


def _add_conv(store, rng, name, kernel, cin, cout):
    vol = kernel ** 3
    store.add(f"{name}.weight", nn.kaiming_uniform(rng, (vol, cin, cout), vol * cin))
    store.add(f"{name}.bias", np.zeros(cout))


def init_generator_store(cfg, seed=0, store=None):
    """Encoder, generator and entropy-model parameters (the "G" store)."""
    rng = np.random.default_rng(seed)
    store = nn.ParamStore() if store is None else store
    c, lat = cfg.channels, cfg.latent_channels
    for i, (k, cin, cout) in enumerate(zip(cfg.kernels, (3, c, c), (c, c, lat)), 1):
        _add_conv(store, rng, f"encoder.conv{i}", k, cin, cout)
    outs = (c + 1, c + 1, 3 + 1)
    for i, (k, cin, cout) in enumerate(zip(cfg.generator_kernels, (lat, c, c), outs), 1):
        _add_conv(store, rng, f"generator.deconv{i}", k, cin, cout)
    # start colours at mid grey so the output clamp passes gradients from step 0
    store["generator.deconv3.bias"].value[:3] = 0.5
    store.add("entropy.log_scale", np.zeros(lat))
    return store


def init_discriminator_store(cfg, seed=0, store=None):
    rng = np.random.default_rng(seed + 7919)
    store = nn.ParamStore() if store is None else store
    c = cfg.channels
    for i, (k, cin) in enumerate(zip(cfg.kernels, (3, c, c)), 1):
        _add_conv(store, rng, f"discriminator.conv{i}", k, cin, c)
    store.add("discriminator.dense.weight", nn.kaiming_uniform(rng, (c, 1), c))
    store.add("discriminator.dense.bias", np.zeros(1))
    return store


def config_from_store(store):
    """Recover the architecture from parameter shapes."""
    try:
        kernels = tuple(round(store[f"encoder.conv{i}.weight"].shape[0] ** (1 / 3)) for i in (1, 2, 3))
        w3 = store["encoder.conv3.weight"].shape
        channels = store["encoder.conv1.weight"].shape[2]
    except KeyError as exc:
        raise ShapeMismatch(f"checkpoint lacks encoder parameter {exc}") from None
    return CodecConfig(channels=channels, latent_channels=w3[2], kernels=kernels)


# ---------------------------------------------------------------- networks


def _trunk(tape, params, prefix, x, geom, cfg, dense, names):
    h = x
    for i, k in enumerate(cfg.kernels):
        s = STRIDES[i]
        w_shape = params[f"{prefix}.{names[i]}.weight"].shape
        spec = sparse.ConvSpec(k, 2, w_shape[1], w_shape[2])
        h = _conv(tape, params, f"{prefix}.{names[i]}", h, geom.down_map(s, k), spec,
                  geom.coords[s], geom.coords[2 * s], s, dense)
        if i < len(cfg.kernels) - 1:
            h = nn.relu(h)
    return h


def _check_input(x, geom):
    if x.value.ndim != 2 or x.value.shape[1] != 3:
        raise ShapeMismatch(f"expected (N, 3) colour features, got {x.value.shape}")
    if x.value.shape[0] != len(geom):
        raise ShapeMismatch(f"{x.value.shape[0]} feature rows for {len(geom)} voxels")


def encoder_forward(tape, params, x, geom, cfg, dense=False):
    """Three stride-2 convs with ReLU between; rows follow ``geom.coords[8]``."""
    _check_input(x, geom)
    return _trunk(tape, params, "encoder", x, geom, cfg, dense, ("conv1", "conv2", "conv3"))


@dataclass
class GeneratorOutput:
    raw: nn.Node  # unclamped colour rows on geom.coords[1]
    recon: nn.Node  # raw clamped to [0, 1]
    logits: list  # occupancy logits per scale (coarse to fine)
    occupied: list  # boolean ground truth aligned with ``logits``


def generator_forward(tape, params, latent, geom, cfg, candidates=True, dense=False):
    """Three transposed convs, each pruned to the true coordinates of its scale.

    With ``candidates`` every stage is evaluated on all children of the
    coarser occupied set so the extra channel can be trained as an occupancy
    classifier; otherwise only true coordinates are computed. Both settings
    give identical reconstructions.
    """
    if latent.value.shape[0] != len(geom.coords[LATENT_STRIDE]):
        raise ShapeMismatch(f"{latent.value.shape[0]} latent rows for "
                            f"{len(geom.coords[LATENT_STRIDE])} latent coordinates")
    h = latent
    logits, labels = [], []
    for j, k in enumerate(cfg.generator_kernels):
        s = LATENT_STRIDE >> j
        fine = s // 2
        name = f"generator.deconv{j + 1}"
        w_shape = params[f"{name}.weight"].shape
        spec = sparse.ConvSpec(k, 2, w_shape[1], w_shape[2], transposed=True)
        if candidates:
            cand, occupied, rows = geom.candidates(s)
            out = _conv(tape, params, name, h, geom.up_map(s, k, "candidates"), spec,
                        geom.coords[s], cand, fine, dense)
        else:
            occupied, rows = np.ones(len(geom.coords[fine]), dtype=bool), None
            out = _conv(tape, params, name, h, geom.up_map(s, k, "true"), spec,
                        geom.coords[s], geom.coords[fine], fine, dense)
        width = w_shape[2] - 1
        logits.append(nn.slice_cols(out, width, width + 1))
        labels.append(occupied)
        h = nn.slice_cols(out, 0, width)
        if rows is not None:
            h = nn.index_rows(h, rows)
        if j < 2:
            h = nn.relu(h)
    return GeneratorOutput(h, nn.clamp(h, 0.0, 1.0), logits, labels)


def discriminator_forward(tape, params, x, geom, cfg, dense=False):
    """Probability that ``x`` is a real cloud; dropout only on a training tape."""
    _check_input(x, geom)
    h = _trunk(tape, params, "discriminator", x, geom, cfg, dense, ("conv1", "conv2", "conv3"))
    h = nn.dropout(nn.relu(h), cfg.dropout)
    pooled = nn.segment_mean(h, np.zeros(h.value.shape[0], dtype=np.int64), 1)
    w = tape.param(params["discriminator.dense.weight"])
    b = tape.param(params["discriminator.dense.bias"])
    return nn.sigmoid(nn.add_bias(nn.matmul(pooled, w), b))


def entropy_scales(tape, params):
    return nn.exp(tape.param(params["entropy.log_scale"]))


def scales_f32(params):
    """Per-channel Laplace scales as shipped in the bitstream header."""
    return np.maximum(np.exp(params["entropy.log_scale"].value.astype(np.float64)), 1e-6).astype(np.float32)
