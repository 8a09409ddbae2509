"""Acceptance criteria 1-10. Each test prints one PASS/FAIL line."""

import math
import time

import numpy as np
from helpers import density_blocks_cloud
from oracles import bjontegaard as ref_bd

from pcacgan import avrpm, metrics, nn, selftest, sparse
from pcacgan.codec import CodecConfig, CodecModel, FocalLossConfig, LossWeights, decode, encode
from pcacgan.codec import focal_loss, total_loss
from pcacgan.pointcloud import SynthSpec, synth_dataset, synth_generate
from pcacgan.training import (
    TrainConfig,
    TrainState,
    discriminator_accuracy,
    discriminator_phase,
    evaluate,
    generator_gradients,
    prepare_dataset,
    train,
    train_rate_sweep,
)


def report(capsys, number, title, ok, detail):
    with capsys.disabled():
        print(f"\nCRITERION {number:2d} {'PASS' if ok else 'FAIL'} {title}: {detail}")
    assert ok, detail


def test_01_sparse_dense_oracle(capsys):
    res = selftest.conv_oracle_suite(200)
    ok = res.passed and res.seconds < 120
    report(capsys, 1, "sparse/dense oracle", ok, f"{res.detail}; {res.seconds:.1f}s")


def test_02_adjointness(capsys):
    res = selftest.adjoint_suite(100)
    report(capsys, 2, "adjointness", res.passed, res.detail)


def test_03_gradient_suite(capsys):
    res = selftest.gradient_suite()
    report(capsys, 3, "gradient suite", res.passed, res.detail)


def test_04_loss_identities(capsys):
    rng = np.random.default_rng(0)
    errs = {}
    # focal with xi=0 and unit weights is binary cross-entropy
    z = rng.standard_normal(500)
    y = rng.random(500) > 0.4
    t = nn.Tape()
    focal = float(focal_loss([t.variable(z)], [y], FocalLossConfig(0.0, 1.0, 1.0)).value)
    p = 1.0 / (1.0 + np.exp(-z))
    errs["focal_bce"] = abs(focal - float(-np.mean(np.where(y, np.log(p), np.log1p(-p)))))
    # mask loss with alpha in {0, 1} is a single-mask BCE
    probs = rng.uniform(0.01, 0.99, (200, 2))
    yd = (rng.random(200) > 0.5).astype(float)
    for alpha, col, target in ((1.0, 0, 1 - yd), (0.0, 1, yd)):
        t = nn.Tape()
        v = float(avrpm.avrpm_loss_node(t.variable(probs), yd, avrpm.AvrpmLossWeights(alpha)).value)
        errs[f"mask_alpha{int(alpha)}"] = abs(v - avrpm.bce_value(target, probs[:, col]))
    # rate-distortion breakdown
    worst = 0.0
    for _ in range(200):
        t = nn.Tape()
        br = total_loss(*[t.variable(v) for v in rng.uniform(0, 50, 4)], weights=LossWeights(*rng.uniform(0, 1, 4)))
        worst = max(worst, br.identity_error())
    errs["breakdown"] = worst
    t = nn.Tape()
    bce_half = float(nn.bce(t.variable([0.5]), [1.0]).value)
    ok = all(e <= 1e-9 for e in errs.values()) and bce_half == math.log(2.0)
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items()) + f", BCE(1,0.5)==ln2 {bce_half == math.log(2.0)}"
    report(capsys, 4, "loss identities", ok, detail)


def test_05_entropy_coder(capsys):
    res = selftest.entropy_suite(10 ** 6)
    ok = res.passed and res.seconds < 60
    report(capsys, 5, "entropy coder", ok, f"{res.detail}; {res.seconds:.1f}s")


def test_06_codec_round_trip(capsys):
    pc = synth_generate(SynthSpec(n_points=2000, texture="noise", seed=11, extent=20.0))
    cfg = TrainConfig(codec=CodecConfig(channels=8), lr=1e-3, iterations=10, batch_size=1)
    model = CodecModel.initialize(cfg.codec, seed=3)
    train([pc], model, cfg, 0.0125, log_every=0)
    mask = avrpm.train_avrpm([pc], avrpm.AvrpmConfig(iterations=20))
    streams = [encode(pc, model, mask, threads=n).to_bytes() for n in (1, 1, 2, 4)]
    same_bytes = all(s == streams[0] for s in streams)
    recons = [decode(s, pc.positions, model) for s in streams[:2]]
    exact_pos = all(np.array_equal(r.positions, pc.positions) for r in recons)
    same_attr = np.array_equal(recons[0].colors, recons[1].colors)
    ok = same_bytes and exact_pos and same_attr
    report(capsys, 6, "codec round trip", ok,
           f"{len(pc)} points, {len(streams[0])} bytes, identical streams {same_bytes}, "
           f"exact positions {exact_pos}, deterministic attributes {same_attr}")


def _monotone_ok(seq):
    """Non-increasing, allowing one adjacent-pair violation of at most 10%."""
    violations = [(a, b) for a, b in zip(seq, seq[1:]) if b > a]
    return violations, all(b <= a * 1.10 for a, b in violations)


def test_07_desk_rd_sanity(capsys):
    ds = synth_dataset(5, n_points=800, seed=0, extent=16.0)
    cfg = TrainConfig(codec=CodecConfig(channels=16), lr=1e-3, iterations=400)
    t0 = time.perf_counter()
    results = train_rate_sweep(ds, cfg)
    train_seconds = time.perf_counter() - t0
    points = [evaluate(m, ds) for _, m, _ in results]
    baseline = float(np.mean([metrics.psnr(pc, metrics.mean_color_baseline(pc)[0]) for pc in ds]))
    low_rate = min(points, key=lambda p: p.bpip)
    gain = low_rate.psnr_y - baseline
    rates = [p.bpip for p in points]
    psnrs = [p.psnr_y for p in points]
    v_rate, rate_ok = _monotone_ok(rates)
    v_psnr, psnr_ok = _monotone_ok(psnrs)
    ok = (gain >= 5.0 and len(v_rate) + len(v_psnr) <= 1 and rate_ok and psnr_ok
          and train_seconds < 1800 and 3 * cfg.iterations <= 2000)
    report(capsys, 7, "desk RD sanity", ok,
           f"lambdas {cfg.lambda_values}, bpip {[round(r, 3) for r in rates]}, "
           f"Y {[round(p, 2) for p in psnrs]} dB, baseline {baseline:.2f} dB, "
           f"lowest-rate gain {gain:.2f} dB, training {train_seconds:.0f}s")


def test_08_avrpm(capsys):
    train_clouds = [density_blocks_cloud(100, seed=s)[0] for s in (10, 11)]
    held_out, truth = density_blocks_cloud(150, seed=99)
    cfg = avrpm.AvrpmConfig(iterations=150)
    params = avrpm.train_avrpm(train_clouds, cfg)
    summaries, labels = avrpm.training_blocks([held_out], cfg)
    acc = avrpm.mask_accuracy(params, summaries, labels)
    # all-dense ablation runs end to end
    pc = synth_generate(SynthSpec(n_points=1500, texture="noise", seed=5))
    model = CodecModel.initialize(CodecConfig(channels=8))
    bs = encode(pc, model, use_avrpm=False)
    recon = decode(bs.to_bytes(), pc.positions, model)
    ablation_ok = len(recon) == len(pc) and bool((bs.classes == avrpm.DENSE).all())
    vox, _ = avrpm.voxelize_adaptive(pc, avrpm.all_dense(avrpm.partition_blocks(pc)))
    plain = sparse.from_point_cloud(pc)
    bit_exact = np.array_equal(vox.coords, plain.coords) and np.array_equal(vox.feats, plain.feats)
    ok = acc >= 0.95 and ablation_ok and bit_exact
    report(capsys, 8, "AVRPM", ok, f"held-out accuracy {acc:.4f} on {len(labels)} blocks, "
           f"no-avrpm round trip {ablation_ok}, all-dense voxelization bit-exact {bit_exact}")


def test_09_bd_metrics(capsys):
    res = selftest.bd_suite()
    r1, p1, r2, p2 = selftest.BD_FIXTURE
    ref_psnr = ref_bd.bd_psnr(r1, p1, r2, p2)
    ref_rate = ref_bd.bd_rate(r1, p1, r2, p2)
    ok = (res.passed and abs(ref_psnr - selftest.BD_FIXTURE_PSNR) <= 1e-6
          and abs(ref_rate - selftest.BD_FIXTURE_RATE) <= 1e-6)
    report(capsys, 9, "BD metrics", ok, f"{res.detail}; reference {ref_psnr:.6f} dB, {ref_rate:.6f} %")


def test_10_gan_mechanics(capsys):
    ds = synth_dataset(4, n_points=500, seed=1, extent=12.0)
    cfg = TrainConfig(codec=CodecConfig(channels=16), lr=1e-4, batch_size=4)
    samples = prepare_dataset(ds, cfg)
    model = CodecModel.initialize(cfg.codec)
    state = TrainState.create(model, cfg)
    g0 = model.gen.digest()
    for _ in range(200):
        discriminator_phase(state, samples, cfg)
    acc = discriminator_accuracy(model, samples, cfg)
    frozen = model.gen.digest() == g0
    # step-0 audit of the generator path: parameter hashes with phi_adv=0 match a
    # run without D; the adversarial term itself is visible in the step-0 gradients
    digests, grads = {}, {}
    samples = prepare_dataset(ds[:2], cfg)
    for name, kw in {"zero_adv": dict(phi_adv=0.0), "no_d": dict(use_discriminator=False),
                     "adv": dict(phi_adv=0.4)}.items():
        c = TrainConfig(codec=CodecConfig(channels=8), lr=1e-3, batch_size=2, **kw)
        m = CodecModel.initialize(c.codec, seed=2)
        grads[name] = generator_gradients(TrainState.create(m.copy(), c), samples, c, 0.0125)
        state, per_step = None, []
        for _ in range(3):
            state, _ = train(ds, m, c, 0.0125, iterations=1, state=state, log_every=0)
            per_step.append(m.gen.digest())
        digests[name] = per_step
    same = digests["zero_adv"] == digests["no_d"] and all(
        np.array_equal(grads["zero_adv"][k], grads["no_d"][k]) for k in grads["no_d"])
    differs = any(not np.array_equal(grads["adv"][k], grads["no_d"][k]) for k in grads["no_d"])
    ok = acc > 0.9 and frozen and same and differs
    report(capsys, 10, "GAN mechanics", ok,
           f"D accuracy after 200 steps {acc:.3f}, G unchanged {frozen}, "
           f"phi_adv=0 matches no-D (hashes, 3 steps; gradients) {same}, "
           f"phi_adv=0.4 changes step-0 G gradients {differs}")

