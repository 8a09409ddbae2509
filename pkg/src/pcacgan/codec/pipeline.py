"""End-to-end encode and decode of colour attributes given lossless geometry."""

from __future__ import annotations

import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .. import avrpm, nn, sparse
from ..errors import CorruptStream, DigestMismatch, Overflow
from ..pointcloud import PointCloud
from . import networks
from .bitstream import FLAG_NO_AVRPM, Bitstream, geometry_digest
from .entropy import LaplaceModel, decode_latents, encode_latents

log = logging.getLogger(__name__)

QUANT_LIMIT = 1 << 15


@dataclass
class CodecModel:
    """Trained weights for one rate point."""

    config: networks.CodecConfig
    gen: nn.ParamStore
    disc: nn.ParamStore | None = None
    lambda_index: int = 0
    lam: float = 0.0

    @classmethod
    def initialize(cls, config=None, seed=0, lambda_index=0, lam=0.0):
        config = config or networks.CodecConfig()
        return cls(config, networks.init_generator_store(config, seed),
                   networks.init_discriminator_store(config, seed), lambda_index, lam)

    def copy(self):
        return CodecModel(self.config, self.gen.copy(),
                          None if self.disc is None else self.disc.copy(), self.lambda_index, self.lam)

    def save(self, path):
        store = nn.ParamStore()
        for p in self.gen:
            store.add(p.id, p.value)
        for p in self.disc or ():
            store.add(p.id, p.value)
        store.add("meta.lambda_index", [self.lambda_index])
        store.add("meta.lambda", [self.lam])
        nn.save_checkpoint(store, path)

    @classmethod
    def load(cls, path):
        store = nn.load_checkpoint(path)
        config = networks.config_from_store(store)
        gen, disc = nn.ParamStore(), nn.ParamStore()
        for p in store:
            if p.id.startswith("discriminator."):
                disc.add(p.id, p.value)
            elif not p.id.startswith("meta."):
                gen.add(p.id, p.value)
        networks.init_generator_store(config).load_values(gen)  # shape audit
        index = int(store["meta.lambda_index"].value[0]) if "meta.lambda_index" in store else 0
        lam = float(store["meta.lambda"].value[0]) if "meta.lambda" in store else 0.0
        return cls(config, gen, disc if len(disc) else None, index, lam)

    def digest(self):
        return self.gen.digest()


def quantize(values, mode="infer", rng=None):
    """Round latents to integers.

    ``values`` is an array for ``infer`` and a tape node for ``train``
    (straight-through rounding) or ``noise`` (additive uniform noise).
    """
    raw = values.value if isinstance(values, nn.Node) else np.asarray(values, dtype=np.float64)
    if raw.size and np.max(np.abs(np.round(raw))) >= QUANT_LIMIT:
        raise Overflow(f"latent magnitude reaches {QUANT_LIMIT}")
    if mode == "infer":
        return np.round(raw).astype(np.int64)
    if mode == "train":
        return nn.ste_round(values)
    if mode == "noise":
        rng = rng if rng is not None else values.tape.rng
        return nn.add(values, values.tape.constant(rng.uniform(-0.5, 0.5, raw.shape)))
    raise ValueError(f"unknown quantization mode {mode!r}")


def rate_estimate(latent, scales):
    """Estimated bits of integer latents under per-channel Laplace scales."""
    return LaplaceModel(scales).estimate_bits(latent)


@contextmanager
def _timed(timings, stage):
    t0 = time.perf_counter()
    yield
    dt = time.perf_counter() - t0
    log.debug("%s: %.4f s", stage, dt)
    if timings is not None:
        timings[stage] = timings.get(stage, 0.0) + dt


def partition_for(pc, block_edge=16, avrpm_params=None, use_avrpm=True, threads=1):
    """Block partition with classes from the mask network, the count heuristic, or all dense."""
    part = avrpm.partition_blocks(pc, block_edge)
    if not use_avrpm:
        return avrpm.all_dense(part)
    if avrpm_params is not None:
        return avrpm.classify(pc, part, avrpm_params, threads)
    return avrpm.label_density(part)


def encode(pc, model, avrpm_params=None, use_avrpm=True, block_edge=16, threads=1, timings=None):
    """Compress the colours of ``pc`` into a :class:`Bitstream`.

    ``threads`` only parallelises block classification; the output bytes do
    not depend on it.
    """
    with _timed(timings, "partition"):
        part = partition_for(pc, block_edge, avrpm_params, use_avrpm, threads)
    with _timed(timings, "voxelize"):
        vox, _ = avrpm.voxelize_adaptive(pc, part)
        geom = networks.Geometry(vox.coords)
    with _timed(timings, "analysis"):
        tape = nn.Tape()
        y = networks.encoder_forward(tape, model.gen, tape.constant(vox.feats), geom, model.config)
        q = quantize(y.value, "infer")
    scales = networks.scales_f32(model.gen)
    with _timed(timings, "entropy_coding"):
        body = encode_latents(q, LaplaceModel(scales))
    bs = Bitstream(
        lambda_index=model.lambda_index,
        flags=0 if use_avrpm else FLAG_NO_AVRPM,
        digest=geometry_digest(pc.positions),
        bit_depth=pc.bit_depth,
        block_edge=block_edge,
        origins=part.origins,
        classes=part.classes,
        latent_count=len(q),
        scales=scales,
        body=body,
    )
    log.info("encoded %d points into %d bytes", len(pc), len(bs.to_bytes()))
    return bs


def _select_model(models, index):
    if isinstance(models, CodecModel):
        if models.lambda_index != index:
            raise ValueError(f"stream uses lambda index {index}, model has {models.lambda_index}")
        return models
    try:
        return models[index]
    except (KeyError, IndexError):
        raise ValueError(f"no model for lambda index {index}") from None


def decode(stream, positions, models, timings=None):
    """Reconstruct colours for ``positions`` (array or PointCloud) from a stream."""
    bs = stream if isinstance(stream, Bitstream) else Bitstream.from_bytes(stream)
    if isinstance(positions, PointCloud):
        positions = positions.positions
    positions = np.asarray(positions, dtype=np.int64).reshape(-1, 3)
    if geometry_digest(positions) != bs.digest:
        raise DigestMismatch("geometry does not match the stream's digest")
    model = _select_model(models, bs.lambda_index)
    with _timed(timings, "partition"):
        shell = PointCloud(positions, np.zeros(positions.shape), bs.bit_depth)
        part = avrpm.partition_blocks(shell, bs.block_edge)
        if not np.array_equal(part.origins, bs.origins):
            raise CorruptStream("block table disagrees with the geometry")
        part = part.with_classes(bs.classes)
        carriers = avrpm.carrier_coords(positions, part)
        geom = networks.Geometry(carriers)
    n_latent = len(geom.coords[networks.LATENT_STRIDE])
    if n_latent != bs.latent_count:
        raise CorruptStream(f"stream has {bs.latent_count} latents, geometry implies {n_latent}")
    if bs.latent_channels != model.config.latent_channels:
        raise CorruptStream("latent channel count differs from the model")
    with _timed(timings, "entropy_decoding"):
        q = decode_latents(bs.body, bs.latent_count, LaplaceModel(bs.scales))
    with _timed(timings, "synthesis"):
        tape = nn.Tape()
        out = networks.generator_forward(tape, model.gen, tape.constant(q.astype(np.float64)),
                                         geom, model.config, candidates=False)
        recon = sparse.SparseTensor(geom.coords[1], out.recon.value, 1, canonical=True)
        pc = avrpm.devoxelize(recon, avrpm.DevoxMap(carriers, positions, bs.bit_depth))
    return pc
