"""Adaptive voxel-resolution partitioning.

The cloud is cut into axis-aligned cubes. A small convolutional network looks
at a 4x4x4 point-count summary of each cube and emits two sigmoid masks
(sparse, dense). Dense blocks keep unit voxels; sparse blocks merge 2x2x2
cells, averaging the colours of the points they absorb.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import nn, sparse
from .errors import EmptyDataset, MissingVoxel, UnsetClasses

log = logging.getLogger(__name__)

SPARSE, DENSE = 0, 1
SUMMARY = 4  # summary grid edge
_GRID_GAP = 2 * SUMMARY  # spacing between batched block grids along x


@dataclass
class Block:
    origin: tuple
    point_indices: np.ndarray
    density_class: str | None
    resolution: int | None


@dataclass
class Partition:
    """Disjoint cover of a cloud by cubes of ``block_edge``.

    ``origins`` is sorted in block-origin (lexicographic) order; ``block_of``
    gives each point's block; ``classes`` holds SPARSE/DENSE per block once set.
    """

    block_edge: int
    origins: np.ndarray
    block_of: np.ndarray
    classes: np.ndarray | None = None

    @property
    def counts(self):
        return np.bincount(self.block_of, minlength=len(self.origins))

    def __len__(self):
        return len(self.origins)

    def with_classes(self, classes):
        classes = np.asarray(classes, dtype=np.int64)
        if classes.shape != (len(self.origins),):
            raise ValueError(f"expected {len(self.origins)} classes, got {classes.shape}")
        return Partition(self.block_edge, self.origins, self.block_of, classes)

    def resolution(self, cls):
        return self.block_edge if cls == DENSE else self.block_edge // 2

    @property
    def blocks(self):
        order = np.argsort(self.block_of, kind="stable")
        splits = np.cumsum(self.counts)[:-1]
        members = np.split(order, splits)
        out = []
        for b, origin in enumerate(self.origins):
            cls = None if self.classes is None else int(self.classes[b])
            out.append(Block(
                tuple(int(v) for v in origin), members[b],
                None if cls is None else ("dense" if cls == DENSE else "sparse"),
                None if cls is None else self.resolution(cls),
            ))
        return out


def partition_blocks(pc, block_edge=16):
    """Assign every point to the cube of edge ``block_edge`` containing it."""
    if block_edge < SUMMARY or block_edge % SUMMARY:
        raise ValueError(f"block_edge must be a positive multiple of {SUMMARY}, got {block_edge}")
    origins = (pc.positions // block_edge) * block_edge
    keys = sparse.coord_keys(origins)
    uniq, inverse = np.unique(keys, return_inverse=True)
    return Partition(block_edge, sparse.keys_to_coords(uniq), inverse.reshape(-1).astype(np.int64))


def label_density(part, threshold_quantile=0.5):
    """Ground-truth classes: dense iff the block's point count reaches the quantile."""
    counts = part.counts
    if len(counts) == 0:
        raise EmptyDataset("partition has no blocks")
    thresh = np.quantile(counts, threshold_quantile)
    return part.with_classes(np.where(counts >= thresh, DENSE, SPARSE))


def all_dense(part):
    return part.with_classes(np.full(len(part), DENSE))


# ------------------------------------------------------------- mask network

LAYERS = ((1, 8), (8, 16), (16, 2))


def init_params(seed=0, store=None, prefix="avrpm"):
    rng = np.random.default_rng(seed)
    store = nn.ParamStore() if store is None else store
    for n, (cin, cout) in enumerate(LAYERS, 1):
        store.add(f"{prefix}.conv{n}.weight", nn.kaiming_uniform(rng, (27, cin, cout), 27 * cin))
        store.add(f"{prefix}.conv{n}.bias", np.zeros(cout))
    return store


def block_summaries(pc, part):
    """(B, 4, 4, 4) per-block occupancy fractions on a coarse 4x4x4 grid."""
    cell = part.block_edge // SUMMARY
    local = (pc.positions - part.origins[part.block_of]) // cell
    grid = np.zeros((len(part), SUMMARY, SUMMARY, SUMMARY))
    np.add.at(grid, (part.block_of, local[:, 0], local[:, 1], local[:, 2]), 1.0)
    return grid / float(cell ** 3)


_grid_cache = {}


def _batched_grid(n_blocks):
    """Coordinates and 3x3x3 kernel map for ``n_blocks`` side-by-side 4^3 grids."""
    hit = _grid_cache.get(n_blocks)
    if hit is None:
        r = np.arange(SUMMARY)
        gx, gy, gz = np.meshgrid(r, r, r, indexing="ij")
        local = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
        shift = np.zeros((n_blocks, 1, 3), dtype=np.int64)
        shift[:, 0, 0] = np.arange(n_blocks) * _GRID_GAP
        coords = (local[None] + shift).reshape(-1, 3)
        t = sparse.SparseTensor(coords, np.zeros((len(coords), 1)))
        kmap = sparse.build_kernel_map(t, t.coords, sparse.ConvSpec(3, 1))
        segments = t.coords[:, 0] // _GRID_GAP
        hit = (t, kmap, segments)
        if len(_grid_cache) > 64:
            _grid_cache.clear()
        _grid_cache[n_blocks] = hit
    return hit


def mask_logits(tape, summaries, params, prefix="avrpm"):
    """Tape node of (B, 2) pre-sigmoid scores for (sparse, dense)."""
    n_blocks = len(summaries)
    t, kmap, segments = _batched_grid(n_blocks)
    # Grid rows are in canonical order: block-major, then x, y, z within a block.
    local = t.coords.copy()
    local[:, 0] -= segments * _GRID_GAP
    x = tape.constant(summaries[segments, local[:, 0], local[:, 1], local[:, 2]][:, None])
    for n in range(1, len(LAYERS) + 1):
        w = tape.param(params[f"{prefix}.conv{n}.weight"])
        b = tape.param(params[f"{prefix}.conv{n}.bias"])
        x = nn.sparse_conv(x, w, b, kmap)
        if n < len(LAYERS):
            x = nn.relu(x)
    return nn.segment_mean(x, segments, n_blocks)


@dataclass
class MaskPrediction:
    p_sparse: np.ndarray
    p_dense: np.ndarray
    y_sparse: np.ndarray | None = None
    y_dense: np.ndarray | None = None

    def classes(self):
        """Argmax of the two masks; ties go to dense."""
        return np.where(self.p_dense >= self.p_sparse, DENSE, SPARSE)


def mask_network_forward(pc, part, params, threads=1, chunk=256):
    """Per-block mask probabilities. Block chunks may run on worker threads;
    every block is computed independently so results do not depend on ``threads``."""
    summaries = block_summaries(pc, part)
    starts = list(range(0, len(summaries), chunk)) or [0]

    def run(s):
        tape = nn.Tape()
        return nn._sigmoid(mask_logits(tape, summaries[s:s + chunk], params).value)

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(threads) as ex:
            parts = list(ex.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    probs = np.concatenate(parts) if len(summaries) else np.zeros((0, 2))
    pred = MaskPrediction(probs[:, 0], probs[:, 1])
    if part.classes is not None:
        pred.y_dense = (part.classes == DENSE).astype(np.float64)
        pred.y_sparse = 1.0 - pred.y_dense
    return pred


@dataclass(frozen=True)
class AvrpmLossWeights:
    alpha: float = 0.3

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")


def avrpm_loss_node(probs, y_dense, weights=AvrpmLossWeights()):
    """alpha * BCE(sparse mask) + (1 - alpha) * BCE(dense mask) on a (B, 2) node."""
    y_dense = np.asarray(y_dense, dtype=np.float64)
    loss_sparse = nn.bce(nn.slice_cols(probs, 0, 1), (1.0 - y_dense)[:, None])
    loss_dense = nn.bce(nn.slice_cols(probs, 1, 2), y_dense[:, None])
    return nn.add(nn.scale(loss_sparse, weights.alpha), nn.scale(loss_dense, 1.0 - weights.alpha))


def bce_value(y, p, eps=1e-7):
    p = np.clip(np.asarray(p, dtype=np.float64), eps, 1.0 - eps)
    y = np.asarray(y, dtype=np.float64)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def avrpm_loss(pred, weights=AvrpmLossWeights()):
    if pred.y_dense is None:
        raise UnsetClasses("prediction carries no ground-truth labels")
    return (weights.alpha * bce_value(pred.y_sparse, pred.p_sparse)
            + (1.0 - weights.alpha) * bce_value(pred.y_dense, pred.p_dense))


@dataclass
class AvrpmConfig:
    block_edge: int = 16
    threshold_quantile: float = 0.5
    alpha: float = 0.3
    lr: float = 1e-2
    iterations: int = 300
    batch_blocks: int = 256
    seed: int = 0
    losses: list = field(default_factory=list)


def training_blocks(dataset, cfg):
    summaries, labels = [], []
    for pc in dataset:
        part = label_density(partition_blocks(pc, cfg.block_edge), cfg.threshold_quantile)
        summaries.append(block_summaries(pc, part))
        labels.append(part.classes == DENSE)
    return np.concatenate(summaries), np.concatenate(labels).astype(np.float64)


def train_avrpm(dataset, cfg=None, params=None, summaries=None, labels=None):
    """Fit the mask network to quantile labels with Adam; deterministic in ``cfg.seed``.

    Pass ``summaries``/``labels`` directly to train on prepared blocks.
    """
    cfg = AvrpmConfig() if cfg is None else cfg
    if summaries is None:
        if not dataset:
            raise EmptyDataset("train_avrpm needs at least one cloud")
        summaries, labels = training_blocks(dataset, cfg)
    if len(summaries) == 0:
        raise EmptyDataset("no blocks to train on")
    params = init_params(cfg.seed) if params is None else params
    opt = nn.OptimizerState(lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    weights = AvrpmLossWeights(cfg.alpha)
    cfg.losses.clear()
    for it in range(cfg.iterations):
        if len(summaries) > cfg.batch_blocks:
            idx = np.sort(rng.choice(len(summaries), cfg.batch_blocks, replace=False))
        else:
            idx = np.arange(len(summaries))
        tape = nn.Tape(training=True)
        probs = nn.sigmoid(mask_logits(tape, summaries[idx], params))
        loss = avrpm_loss_node(probs, labels[idx], weights)
        tape.backward(loss)
        nn.adam_step(params, opt)
        cfg.losses.append(float(loss.value))
        if it % 100 == 0:
            log.debug("avrpm iter %d loss %.5f", it, float(loss.value))
    return params


def mask_accuracy(params, summaries, labels):
    tape = nn.Tape()
    probs = nn._sigmoid(mask_logits(tape, summaries, params).value)
    pred = MaskPrediction(probs[:, 0], probs[:, 1])
    return float(np.mean(pred.classes() == np.asarray(labels).astype(np.int64)))


def classify(pc, part, params, threads=1):
    """Partition with classes predicted by the mask network."""
    return part.with_classes(mask_network_forward(pc, part, params, threads).classes())


# -------------------------------------------------------------- voxelization


@dataclass
class DevoxMap:
    """Carrier voxel of every original point (in the cloud's row order)."""

    carriers: np.ndarray
    positions: np.ndarray
    bit_depth: int


def carrier_coords(positions, part):
    """Voxel carrying each point: itself in dense blocks, its 2-cell in sparse ones."""
    if part.classes is None:
        raise UnsetClasses("partition classes must be set before voxelization")
    cls = part.classes[part.block_of]
    cell = np.where(cls == DENSE, part.block_edge // part.resolution(DENSE),
                    part.block_edge // part.resolution(SPARSE))
    return (positions // cell[:, None]) * cell[:, None]


def voxelize_adaptive(pc, part):
    """Stride-1 tensor over dense unit voxels and merged sparse-block cells."""
    carriers = carrier_coords(pc.positions, part)
    keys = sparse.coord_keys(carriers)
    uniq, inverse, counts = np.unique(keys, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((len(uniq), 3))
    np.add.at(sums, inverse, pc.colors)
    feats = sums / counts[:, None] / 255.0
    t = sparse.SparseTensor(sparse.keys_to_coords(uniq), feats, 1, canonical=True)
    return t, DevoxMap(carriers, pc.positions, pc.bit_depth)


def voxel_coords(positions, part):
    """Voxel lattice that :func:`voxelize_adaptive` would produce, from geometry alone."""
    return sparse.canonical_coords(carrier_coords(positions, part))


def devoxelize(recon, vmap):
    """Give each original point its carrier voxel's colour."""
    from .pointcloud import PointCloud

    rows = recon.lookup(vmap.carriers)
    missing = rows < 0
    if np.any(missing):
        c = tuple(int(v) for v in vmap.carriers[np.argmax(missing)])
        raise MissingVoxel(f"reconstruction lacks carrier voxel {c}")
    colors = np.clip(recon.feats[rows, :3], 0.0, 1.0) * 255.0
    return PointCloud(vmap.positions, colors, vmap.bit_depth)
