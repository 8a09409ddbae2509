"""Alternating GAN training, the lambda sweep and RD evaluation."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import avrpm, metrics, nn
from .codec import losses, networks
from .codec.pipeline import CodecModel, decode, encode, partition_for, quantize
from .errors import EmptyBatch, EmptyDataset

log = logging.getLogger(__name__)

DESK_LAMBDAS = (0.0125, 0.004, 0.00125)
LOG_COLUMNS = ("iteration", "L", "D", "R", "L_adv", "L_dec", "attr_mse", "d_acc", "seconds")


@dataclass
class TrainConfig:
    lambda_values: tuple = DESK_LAMBDAS
    lr: float = 1e-4
    batch_size: int = 4
    iterations: int = 2000
    phi_adv: float = 0.4
    phi_dec: float = 0.6
    mu_attr: float = 1.0
    seed: int = 0
    codec: networks.CodecConfig = field(default_factory=networks.CodecConfig)
    focal: losses.FocalLossConfig = field(default_factory=losses.FocalLossConfig)
    use_discriminator: bool = True
    dense_conv: bool = False
    use_avrpm: bool = True
    block_edge: int = 16
    quantizer: str = "train"

    def __post_init__(self):
        lams = tuple(float(v) for v in self.lambda_values)
        if not lams or any(v <= 0 for v in lams):
            raise ValueError("lambda values must be strictly positive")
        if any(b >= a for a, b in zip(lams, lams[1:])):
            raise ValueError("lambda values must be strictly descending")
        self.lambda_values = lams
        if self.batch_size < 1 or self.iterations < 0:
            raise ValueError("batch_size must be positive and iterations non-negative")
        if self.quantizer not in ("train", "noise"):
            raise ValueError(f"unknown quantizer {self.quantizer!r}")
        if not self.use_discriminator:
            self.phi_adv = 0.0

    def weights(self, lam):
        return losses.LossWeights(lam, self.phi_adv, self.phi_dec, self.mu_attr)


FULL_PRESET = dict(lr=1e-5, batch_size=100, iterations=200_000)

_CODEC_KEYS = {"channels", "latent_channels", "dropout"}
_FOCAL_KEYS = {"xi", "sigma_occupied", "sigma_empty"}


def apply_overrides(cfg, overrides):
    """Return ``cfg`` updated from ``key=value`` strings or a dict of strings."""
    if isinstance(overrides, dict):
        items = list(overrides.items())
    else:
        items = []
        for line in overrides:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"expected key=value, got {line!r}")
            k, v = line.split("=", 1)
            items.append((k.strip(), v.strip()))
    top = {f.name: f for f in fields(TrainConfig)}
    changes, codec_changes, focal_changes = {}, {}, {}
    for key, raw in items:
        if key == "preset":
            if raw != "full":
                raise ValueError(f"unknown preset {raw!r}")
            changes.update(FULL_PRESET)
        elif key == "lambda_values":
            changes[key] = tuple(float(v) for v in str(raw).replace(",", " ").split())
        elif key in _CODEC_KEYS:
            codec_changes[key] = (float if key == "dropout" else int)(raw)
        elif key in _FOCAL_KEYS:
            focal_changes[key] = float(raw)
        elif key in top and key not in ("codec", "focal"):
            default = getattr(cfg, key)
            if isinstance(default, bool):
                changes[key] = str(raw).lower() in ("1", "true", "yes", "on")
            else:
                changes[key] = type(default)(raw)
        else:
            raise ValueError(f"unknown configuration key {key!r}")
    if codec_changes:
        changes["codec"] = replace(cfg.codec, **codec_changes)
    if focal_changes:
        changes["focal"] = replace(cfg.focal, **focal_changes)
    return replace(cfg, **changes)


def load_config(path, cfg=None):
    return apply_overrides(cfg or TrainConfig(), Path(path).read_text().splitlines())


# ------------------------------------------------------------------- samples


@dataclass
class Sample:
    """A voxelized training cloud with its cached coordinate pyramid."""

    cloud: object
    target: np.ndarray
    geom: networks.Geometry

    @property
    def n_points(self):
        return len(self.cloud)


def prepare_sample(pc, cfg, avrpm_params=None):
    part = partition_for(pc, cfg.block_edge, avrpm_params, cfg.use_avrpm)
    vox, _ = avrpm.voxelize_adaptive(pc, part)
    return Sample(pc, vox.feats, networks.Geometry(vox.coords))


def prepare_dataset(dataset, cfg, avrpm_params=None):
    samples = [s if isinstance(s, Sample) else prepare_sample(s, cfg, avrpm_params) for s in dataset]
    if not samples:
        raise EmptyDataset("training set is empty")
    return samples


# --------------------------------------------------------------------- steps


@dataclass
class TrainState:
    model: CodecModel
    opt_g: nn.OptimizerState
    opt_d: nn.OptimizerState
    rng: np.random.Generator  # batch sampling and quantization noise
    dropout_rng: np.random.Generator

    @classmethod
    def create(cls, model, cfg):
        return cls(model, nn.OptimizerState(lr=cfg.lr), nn.OptimizerState(lr=cfg.lr),
                   np.random.default_rng(cfg.seed), np.random.default_rng(cfg.seed + 1))


@dataclass
class StepResult:
    loss: losses.LossBreakdown
    d_acc: float
    d_loss: float


def _generate(tape, gen, sample, cfg, candidates, rng):
    x = tape.constant(sample.target)
    y = networks.encoder_forward(tape, gen, x, sample.geom, cfg.codec, cfg.dense_conv)
    q = quantize(y, cfg.quantizer if tape.training else "train", rng)
    out = networks.generator_forward(tape, gen, q, sample.geom, cfg.codec, candidates, cfg.dense_conv)
    return q, out


def discriminator_phase(state, batch, cfg):
    """One step on the discriminator objective with the generator frozen."""
    model = state.model
    fakes = []
    for s in batch:
        frozen = nn.Tape(training=False)
        _, out = _generate(frozen, model.gen, s, cfg, False, state.rng)
        fakes.append(out.recon.value)
    tape = nn.Tape(training=True, rng=state.dropout_rng)
    d_real = nn.concat_rows([networks.discriminator_forward(tape, model.disc, tape.constant(s.target),
                                                            s.geom, cfg.codec, cfg.dense_conv) for s in batch])
    d_fake = nn.concat_rows([networks.discriminator_forward(tape, model.disc, tape.constant(f),
                                                            s.geom, cfg.codec, cfg.dense_conv)
                             for s, f in zip(batch, fakes)])
    l_adv, _ = losses.adversarial_loss(d_real, d_fake)
    tape.backward(l_adv)
    nn.adam_step(model.disc, state.opt_d)
    model.gen.zero_grad()
    acc = 0.5 * (np.mean(d_real.value > 0.5) + np.mean(d_fake.value < 0.5))
    return float(l_adv.value), float(acc)


def _generator_backward(state, batch, cfg, lam):
    """Accumulate gradients of lam*D + R into the G store; returns the breakdown."""
    model = state.model
    tape = nn.Tape(training=True, rng=state.dropout_rng)
    scales = networks.entropy_scales(tape, model.gen)
    rates, mses, decs, fakes = [], [], [], []
    for s in batch:
        q, out = _generate(tape, model.gen, s, cfg, True, state.rng)
        rates.append(nn.scale(nn.sum_all(nn.laplace_bits(q, scales)), 1.0 / s.n_points))
        mses.append(losses.attribute_mse(out.raw, tape.constant(s.target)))
        decs.append(losses.focal_loss(out.logits, out.occupied, cfg.focal))
        if cfg.use_discriminator:
            fakes.append(networks.discriminator_forward(tape, model.disc, out.recon, s.geom,
                                                        cfg.codec, cfg.dense_conv))
    if cfg.use_discriminator:
        adv_gen = losses.adversarial_loss(nn.concat_rows(fakes), nn.concat_rows(fakes))[1]
    else:
        adv_gen = tape.constant(0.0)
    breakdown = losses.total_loss(nn.mean_of(rates), adv_gen, nn.mean_of(decs), nn.mean_of(mses),
                                  cfg.weights(lam))
    tape.backward(breakdown.node)
    if model.disc is not None:
        model.disc.zero_grad()
    breakdown.node = None
    return breakdown


def generator_phase(state, batch, cfg, lam):
    """One step on lam*D + R for encoder, generator and entropy model, D frozen."""
    breakdown = _generator_backward(state, batch, cfg, lam)
    nn.adam_step(state.model.gen, state.opt_g)
    return breakdown


def generator_gradients(state, batch, cfg, lam):
    """G-store gradients of one generator step without applying it (for audits)."""
    _generator_backward(state, batch, cfg, lam)
    grads = {p.id: p.grad.copy() for p in state.model.gen}
    state.model.gen.zero_grad()
    return grads


def discriminator_accuracy(model, samples, cfg):
    """Eval-mode accuracy of D on real clouds versus the current generator's output."""
    correct = []
    for s in prepare_dataset(samples, cfg):
        tape = nn.Tape(training=False)
        _, out = _generate(tape, model.gen, s, cfg, False, None)
        for feats, real in ((s.target, True), (out.recon.value, False)):
            d = networks.discriminator_forward(tape, model.disc, tape.constant(feats), s.geom,
                                               cfg.codec, cfg.dense_conv)
            correct.append((d.value[0, 0] > 0.5) == real)
    return float(np.mean(correct))


def train_step(batch, state, cfg, lam):
    """Discriminator phase, then generator phase."""
    if not batch:
        raise EmptyBatch("training batch is empty")
    d_loss, d_acc = float("nan"), float("nan")
    if cfg.use_discriminator:
        d_loss, d_acc = discriminator_phase(state, batch, cfg)
    return StepResult(generator_phase(state, batch, cfg, lam), d_acc, d_loss)


# ----------------------------------------------------------------------- log


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)

    def append(self, iteration, result, seconds):
        row = {"iteration": iteration, **result.loss.row(), "d_acc": result.d_acc, "seconds": seconds}
        self.rows.append(row)

    def __len__(self):
        return len(self.rows)

    def column(self, name):
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: r[k] for k in LOG_COLUMNS})

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            rows = [{k: (int(v) if k == "iteration" else float(v)) for k, v in r.items()}
                    for r in csv.DictReader(fh)]
        return cls(rows)


# --------------------------------------------------------------------- loops


def train(samples, model, cfg, lam, iterations=None, state=None, log_every=100):
    """Run ``iterations`` train steps at one lambda. Returns (state, TrainLog)."""
    samples = prepare_dataset(samples, cfg)
    state = state or TrainState.create(model, cfg)
    if model.disc is None and cfg.use_discriminator:
        model.disc = networks.init_discriminator_store(cfg.codec, cfg.seed)
    iterations = cfg.iterations if iterations is None else iterations
    tlog = TrainLog()
    t0 = time.perf_counter()
    k = min(cfg.batch_size, len(samples))
    for it in range(iterations):
        pick = state.rng.choice(len(samples), size=k, replace=False)
        result = train_step([samples[i] for i in sorted(pick)], state, cfg, lam)
        tlog.append(it, result, time.perf_counter() - t0)
        if log_every and (it % log_every == 0 or it == iterations - 1):
            b = result.loss
            log.info("lambda %.4g it %d: L %.4f R %.4f mse %.2f dec %.4f adv %.4f d_acc %.2f",
                     lam, it, b.L, b.R, b.attr_mse, b.L_dec, b.L_adv, result.d_acc)
    return state, tlog


def train_rate_sweep(dataset, cfg, avrpm_params=None, out_dir=None, model=None):
    """Train the first lambda from scratch and warm-start each following one.

    Returns a list of (lambda, CodecModel, TrainLog); checkpoints are written
    to ``out_dir/lambda{index}.ckpt`` when a directory is given.
    """
    samples = prepare_dataset(dataset, cfg, avrpm_params)
    model = model or CodecModel.initialize(cfg.codec, cfg.seed)
    results = []
    for index, lam in enumerate(cfg.lambda_values):
        model = model.copy()
        model.lambda_index, model.lam = index, lam
        state = TrainState.create(model, replace(cfg, seed=cfg.seed + index))
        _, tlog = train(samples, model, cfg, lam, state=state)
        results.append((lam, model, tlog))
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            model.save(out / f"lambda{index}.ckpt")
            tlog.to_csv(out / f"lambda{index}_log.csv")
    return results


def evaluate_cloud(model, pc, avrpm_params=None, use_avrpm=True, block_edge=16):
    bs = encode(pc, model, avrpm_params, use_avrpm, block_edge)
    recon = decode(bs.to_bytes(), pc.positions, model)
    return metrics.rd_point(pc, recon, bs, model.lambda_index)


def evaluate(model, dataset, avrpm_params=None, use_avrpm=True, block_edge=16):
    """Mean RD point of ``model`` over ``dataset``."""
    if not dataset:
        raise EmptyDataset("evaluation set is empty")
    points = [evaluate_cloud(model, pc, avrpm_params, use_avrpm, block_edge) for pc in dataset]
    return metrics.mean_point(points)
