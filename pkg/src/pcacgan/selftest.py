"""Oracle suites shared by the ``selftest`` command and the test-suite.

Each suite returns a :class:`SuiteResult`; nothing here trains a model.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import avrpm, metrics, nn, sparse
from .codec import entropy, losses, networks


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0
    values: dict = field(default_factory=dict)


def _result(name, passed, detail, t0, **values):
    return SuiteResult(name, bool(passed), detail, time.perf_counter() - t0, values)


# -------------------------------------------------------------- conv oracle


def random_tensor(rng, extent=16, stride=1, channels=2, density=None):
    """Random stride-aligned occupancy inside an ``extent``^3 region."""
    cells = extent // stride
    density = rng.uniform(0.05, 0.4) if density is None else density
    n = max(1, int(density * cells ** 3))
    flat = rng.choice(cells ** 3, size=n, replace=False)
    coords = np.stack(np.unravel_index(flat, (cells,) * 3), axis=1) * stride
    return sparse.SparseTensor(coords, rng.standard_normal((n, channels)), stride)


def conv_oracle_case(rng, extent=16):
    """Relative error of sparse_conv against the dense oracle on one random case."""
    k = int(rng.choice((3, 5, 9)))
    stride = int(rng.choice((1, 2)))
    c_in, c_out = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    spec = sparse.ConvSpec(k, stride, c_in, c_out)
    x = random_tensor(rng, extent, 1, c_in)
    w = rng.standard_normal(spec.weight_shape)
    b = rng.standard_normal(c_out)
    out = sparse.sparse_conv(x, w, b, spec)
    dense = sparse.dense_conv_oracle(x.dense((extent,) * 3), w, b, spec)
    idx = out.coords // out.stride
    ref = dense[idx[:, 0], idx[:, 1], idx[:, 2]]
    scale = max(1.0, float(np.abs(ref).max()))
    return float(np.abs(out.feats - ref).max()) / scale, (k, stride)


def transposed_oracle_case(rng, extent=16):
    """Relative error of a transposed conv against the zero-stuffed dense oracle."""
    k = int(rng.choice((3, 5, 9)))
    c_in, c_out = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    spec = sparse.ConvSpec(k, 2, c_in, c_out, transposed=True)
    coarse = random_tensor(rng, extent, 2, c_in)
    fine = random_tensor(rng, extent, 1, 1).coords
    w = rng.standard_normal(spec.weight_shape)
    out = sparse.sparse_conv_transpose(coarse, w, None, spec, fine)
    dense = sparse.dense_conv_oracle(coarse.dense((extent // 2,) * 3), w, None, spec)
    ref = dense[out.coords[:, 0], out.coords[:, 1], out.coords[:, 2]]
    scale = max(1.0, float(np.abs(ref).max()))
    return float(np.abs(out.feats - ref).max()) / scale, (k, 2)


def conv_oracle_suite(n_cases=200, seed=0, tol=1e-5):
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    errors = [conv_oracle_case(rng)[0] for _ in range(n_cases)]
    errors += [transposed_oracle_case(rng)[0] for _ in range(max(1, n_cases // 10))]
    worst = max(errors)
    return _result("conv-oracle", worst <= tol, f"{len(errors)} cases, max rel err {worst:.2e}", t0,
                   max_error=worst)


def adjoint_case(rng, extent=16):
    """|<Conv x, y> - <x, ConvT y>| relative to the magnitudes involved."""
    k = int(rng.choice((3, 5, 9)))
    c_in, c_out = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    spec = sparse.ConvSpec(k, 2, c_in, c_out)
    x = random_tensor(rng, extent, 1, c_in)
    w = rng.standard_normal(spec.weight_shape)
    cx = sparse.sparse_conv(x, w, None, spec)
    y = rng.standard_normal(cx.feats.shape)
    t_spec = sparse.ConvSpec(k, 2, c_out, c_in, transposed=True)
    cty = sparse.sparse_conv_transpose(cx.with_feats(y), w.transpose(0, 2, 1), None, t_spec, x.coords)
    lhs = float(np.sum(cx.feats * y))
    rhs = float(np.sum(x.feats * cty.feats))
    scale = max(1e-12, float(np.sum(np.abs(cx.feats * y))))
    return abs(lhs - rhs) / scale


def adjoint_suite(n_cases=100, seed=1, tol=1e-6):
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = max(adjoint_case(rng) for _ in range(n_cases))
    return _result("adjoint", worst <= tol, f"{n_cases} cases, max rel gap {worst:.2e}", t0, max_error=worst)


# ---------------------------------------------------------------- gradients


def _away_from_zero(rng, shape, margin=0.05):
    v = rng.standard_normal(shape)
    return np.sign(v) * (margin + np.abs(v))


def _conv_fixture(rng, transposed=False):
    """Small random kernel map with matching weight shape."""
    if transposed:
        coarse = random_tensor(rng, 8, 2, 2, density=0.5)
        fine = random_tensor(rng, 8, 1, 1, density=0.2).coords
        spec = sparse.ConvSpec(3, 2, 2, 3, transposed=True)
        return sparse.build_kernel_map(coarse, fine, spec, 1), coarse, fine, spec, 1
    x = random_tensor(rng, 8, 1, 2, density=0.2)
    spec = sparse.ConvSpec(3, 2, 2, 3)
    out = sparse.downsample_coords(x.coords, 2)
    return sparse.build_kernel_map(x, out, spec, 2), x, out, spec, 1


def gradient_cases(rng):
    """(name, fn, values) triples covering every differentiable primitive and loss."""
    a = _away_from_zero(rng, (10, 12))
    b = _away_from_zero(rng, (10, 12))
    m = rng.standard_normal((12, 9))
    pos = rng.uniform(0.2, 3.0, (10, 12))
    prob = rng.uniform(0.05, 0.95, (120, 1))
    cases = [
        ("add", lambda t, n: nn.sum_all(nn.mul(nn.add(n[0], n[1]), n[1])), [a, b]),
        ("sub", lambda t, n: nn.sum_all(nn.square(nn.sub(n[0], n[1]))), [a, b]),
        ("mul", lambda t, n: nn.sum_all(nn.mul(n[0], n[1])), [a, b]),
        ("scale", lambda t, n: nn.sum_all(nn.square(nn.scale(n[0], -2.5))), [a]),
        ("add_scalar", lambda t, n: nn.sum_all(nn.square(nn.add_scalar(n[0], 0.7))), [a]),
        ("matmul", lambda t, n: nn.sum_all(nn.square(nn.matmul(n[0], n[1]))), [a, m]),
        ("add_bias", lambda t, n: nn.sum_all(nn.square(nn.add_bias(n[0], n[1]))), [a, rng.standard_normal(12)]),
        ("relu", lambda t, n: nn.sum_all(nn.square(nn.relu(n[0]))), [a]),
        ("sigmoid", lambda t, n: nn.sum_all(nn.sigmoid(nn.scale(n[0], 2.0))), [a]),
        ("exp", lambda t, n: nn.sum_all(nn.exp(nn.scale(n[0], 0.5))), [a]),
        ("log", lambda t, n: nn.sum_all(nn.log(n[0])), [pos]),
        ("clamp", lambda t, n: nn.sum_all(nn.square(nn.clamp(n[0], -0.8, 0.9))), [_clamp_safe(rng, (10, 12))]),
        ("square", lambda t, n: nn.sum_all(nn.square(n[0])), [a]),
        ("mean_all", lambda t, n: nn.mean_all(nn.square(n[0])), [a]),
        ("index_rows", lambda t, n: nn.sum_all(nn.square(nn.index_rows(n[0], [3, 1, 1, 7, 0]))), [a]),
        ("slice_cols", lambda t, n: nn.sum_all(nn.square(nn.slice_cols(n[0], 2, 9))), [a]),
        ("concat_rows", lambda t, n: nn.sum_all(nn.square(nn.concat_rows([n[0], n[1]]))), [a, b]),
        ("segment_mean", lambda t, n: nn.sum_all(nn.square(nn.segment_mean(n[0], [0, 0, 1, 2, 2, 2, 1, 0, 3, 3], 5))), [a]),
        ("dropout", _dropout_fn, [a]),
        ("bce", lambda t, n: nn.bce(n[0], (prob > 0.5).astype(float)), [prob]),
        ("focal", lambda t, n: nn.sum_all(nn.focal_terms(n[0], a > 0, 0.75, 0.25, 2.0)), [a]),
        ("laplace_bits", lambda t, n: nn.sum_all(nn.laplace_bits(n[0], n[1])),
         [rng.uniform(-4, 4, (15, 8)), rng.uniform(0.3, 3.0, 8)]),
        ("mse", lambda t, n: nn.mse(n[0], n[1]), [a, b]),
    ]
    kmap, x, out, spec, fine = _conv_fixture(rng)
    w = rng.standard_normal(spec.weight_shape)
    cases.append(("sparse_conv", lambda t, n: nn.sum_all(nn.square(nn.sparse_conv(n[0], n[1], n[2], kmap))),
                  [x.feats, w, rng.standard_normal(3)]))
    cases.append(("dense_grid_conv", lambda t, n: nn.sum_all(nn.square(
        nn.dense_grid_conv(n[0], n[1], n[2], kmap, x.coords, out, spec, fine))),
        [x.feats, w, rng.standard_normal(3)]))
    tkmap, coarse, tfine, tspec, _ = _conv_fixture(rng, transposed=True)
    tw = rng.standard_normal(tspec.weight_shape)
    cases.append(("transposed_conv", lambda t, n: nn.sum_all(nn.square(nn.sparse_conv(n[0], n[1], None, tkmap))),
                  [coarse.feats, tw]))
    cases.extend(_loss_cases(rng))
    return cases


def _clamp_safe(rng, shape):
    v = rng.uniform(-1.5, 1.5, shape)
    for edge in (-0.8, 0.9):
        near = np.abs(v - edge) < 0.02
        v[near] += 0.05
    return v


def _dropout_fn(tape, nodes):
    tape.training = True
    tape.rng = np.random.default_rng(123)
    return nn.sum_all(nn.square(nn.dropout(nodes[0], 0.3)))


def _loss_cases(rng):
    """The composite objectives used in training."""
    probs = rng.uniform(0.05, 0.95, (40, 2))
    y_dense = (rng.random(40) > 0.5).astype(float)
    d_real = rng.uniform(0.05, 0.95, (60, 1))
    d_fake = rng.uniform(0.05, 0.95, (60, 1))
    logits = [_away_from_zero(rng, (40, 1)), _away_from_zero(rng, (70, 1))]
    occ = [rng.random(40) > 0.4, rng.random(70) > 0.6]
    recon = rng.uniform(0.05, 0.95, (40, 3))
    target = rng.uniform(0, 1, (40, 3))
    weights = losses.LossWeights(0.7, 0.4, 0.6, 1.0)

    def total(t, n):
        rate = nn.sum_all(nn.laplace_bits(n[0], n[1]))
        l_adv, gen = losses.adversarial_loss(n[2], n[2])
        dec = losses.focal_loss([n[3]], [occ[0]])
        mse = losses.attribute_mse(n[4], t.constant(target))
        return losses.total_loss(rate, gen, dec, mse, weights).node

    return [
        ("avrpm_loss", lambda t, n: avrpm.avrpm_loss_node(n[0], y_dense), [probs]),
        ("adversarial_loss", lambda t, n: losses.adversarial_loss(n[0], n[1])[0], [d_real, d_fake]),
        ("generator_term", lambda t, n: losses.adversarial_loss(n[0], n[1])[1], [d_real, d_fake]),
        ("focal_loss", lambda t, n: losses.focal_loss(n, occ), logits),
        ("attribute_mse", lambda t, n: losses.attribute_mse(n[0], t.constant(target)), [recon]),
        ("rate", lambda t, n: nn.sum_all(nn.laplace_bits(n[0], nn.exp(n[1]))),
         [rng.uniform(-5, 5, (20, 6)), rng.uniform(-0.5, 1.0, 6)]),
        ("total_loss", total, [rng.uniform(-3, 3, (10, 4)), rng.uniform(0.5, 2, 4), d_fake[:20],
                               logits[0], recon]),
        ("discriminator", _discriminator_fn(rng), [rng.uniform(0, 1, (40, 3))]),
    ]


def _discriminator_fn(rng):
    cfg = networks.CodecConfig(channels=4, latent_channels=2, kernels=(3, 3, 3), dropout=0.0)
    coords = random_tensor(rng, 16, 1, 1, density=0.02).coords[:40]
    geom = networks.Geometry(coords)
    store = networks.init_discriminator_store(cfg, seed=int(rng.integers(1 << 30)))
    n = len(geom)

    def fn(tape, nodes):
        x = nodes[0] if nodes[0].value.shape[0] == n else nn.index_rows(nodes[0], np.arange(n))
        return nn.sum_all(networks.discriminator_forward(tape, store, x, geom, cfg))

    return fn


def gradient_suite(seed=2, n_samples=100, rtol=1e-3, atol=1e-6):
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    failed = {}
    cases = gradient_cases(rng)
    for name, fn, values in cases:
        bad = nn.gradient_check(fn, values, rng, n_samples=n_samples, rtol=rtol, atol=atol)
        if bad:
            failed[name] = bad
    detail = f"{len(cases)} primitives/losses x {n_samples} entries"
    if failed:
        detail += f"; failing: {sorted(failed)}"
    return _result("gradients", not failed, detail, t0, failed=failed, names=[c[0] for c in cases])


# ------------------------------------------------------------ entropy coder


def entropy_suite(n_symbols=10 ** 6, seed=3, rel=0.02, slack=64.0):
    """Lossless round trip and coded length vs. ideal for Laplace and uniform sources."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    checks = {}
    model = entropy.LaplaceModel(rng.uniform(0.5, 6.0, 8).astype(np.float32))
    vals = np.round(rng.laplace(0.0, model.scales.astype(np.float64), (n_symbols // 8, 8))).astype(np.int64)
    data = entropy.encode_latents(vals, model)
    back = entropy.decode_latents(data, len(vals), model)
    tables, symbols = model.expand(vals)
    ideal = sum(-math.log2(t.probability(s)) for t, s in zip(tables, symbols))
    checks["laplace"] = (bool(np.array_equal(back, vals)), 8 * len(data), ideal)
    table = entropy.FrequencyTable.uniform(8)
    sym = rng.integers(0, 8, n_symbols // 10).tolist()
    data = entropy.range_encode(sym, table)
    ok = entropy.range_decode(data, len(sym), table) == sym
    checks["uniform8"] = (ok, 8 * len(data), entropy.ideal_bits(sym, table))
    passed = all(ok and bits <= ideal * (1 + rel) + slack for ok, bits, ideal in checks.values())
    detail = ", ".join(f"{k}: {bits} bits vs ideal {ideal:.0f}" for k, (_, bits, ideal) in checks.items())
    return _result("entropy-coder", passed, detail, t0, checks=checks)


# -------------------------------------------------------------- BD metrics

BD_FIXTURE = (
    [0.1, 0.2, 0.4, 0.8], [28.0, 31.0, 33.5, 35.2],
    [0.12, 0.22, 0.41, 0.9], [28.6, 31.5, 34.4, 36.0],
)
# Reference values from a least-squares cubic with adaptive quadrature.
BD_FIXTURE_PSNR = 0.44815553813610687
BD_FIXTURE_RATE = -9.012037417623597


def _curve(rates, psnrs):
    return metrics.RDCurve([metrics.RDPoint(r, p, p, p, p) for r, p in zip(rates, psnrs)])


def bd_suite(tol=1e-6):
    t0 = time.perf_counter()
    r1, p1, r2, p2 = BD_FIXTURE
    ref, test = _curve(r1, p1), _curve(r2, p2)
    checks = {
        "identical": abs(metrics.bd_psnr(ref, ref)) <= 1e-9 and abs(metrics.bd_rate(ref, ref)) <= 1e-9,
        "shift_1db": abs(metrics.bd_psnr(ref, _curve(r1, [p + 1 for p in p1])) - 1.0) <= tol,
        "double_rate": abs(metrics.bd_rate(ref, _curve([2 * r for r in r1], p1)) - 100.0) <= 0.1,
        "fixture_psnr": abs(metrics.bd_psnr(ref, test) - BD_FIXTURE_PSNR) <= tol,
        "fixture_rate": abs(metrics.bd_rate(ref, test) - BD_FIXTURE_RATE) <= tol,
    }
    bad = [k for k, ok in checks.items() if not ok]
    return _result("bd-metrics", not bad, "all fixtures match" if not bad else f"failing: {bad}", t0)


SUITES = {
    "conv-oracle": conv_oracle_suite,
    "adjoint": adjoint_suite,
    "gradients": gradient_suite,
    "entropy-coder": entropy_suite,
    "bd-metrics": bd_suite,
}


def run_all(names=None):
    return [SUITES[n]() for n in (names or SUITES)]
