"""Fixtures shared by several test modules."""

import numpy as np

from pcacgan.pointcloud import PointCloud, rgb_to_yuv


def density_blocks_cloud(n_blocks, seed, block_edge=16, dense_range=(300, 700), sparse_range=(8, 60)):
    """Cloud made of blocks that are either densely or sparsely filled.

    Exactly half of the blocks (rounded down) are dense, so a median split of
    the per-block counts recovers the truth. Returns the cloud and the
    per-block truth (True = dense) in block-origin order.
    """
    rng = np.random.default_rng(seed)
    per_axis = 256 // block_edge
    slots = rng.choice(per_axis ** 3, size=n_blocks, replace=False)
    origins = np.stack(np.unravel_index(slots, (per_axis,) * 3), axis=1) * block_edge
    truth = rng.permutation(n_blocks) < n_blocks // 2
    pts = []
    for origin, dense in zip(origins, truth):
        lo, hi = dense_range if dense else sparse_range
        n = int(rng.integers(lo, hi))
        flat = rng.choice(block_edge ** 3, size=n, replace=False)
        local = np.stack(np.unravel_index(flat, (block_edge,) * 3), axis=1)
        pts.append(origin + local)
    pos = np.concatenate(pts)
    colors = rgb_to_yuv(rng.uniform(0, 255, size=(len(pos), 3)))
    order = np.lexsort(origins.T[::-1])
    return PointCloud(pos, colors, 8), truth[order]
