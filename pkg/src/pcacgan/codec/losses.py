"""Adversarial, occupancy and rate-distortion losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import nn
from ..errors import AlignmentError

PROB_EPS = 1e-7


@dataclass(frozen=True)
class FocalLossConfig:
    xi: float = 2.0
    sigma_occupied: float = 0.75
    sigma_empty: float = 0.25

    def __post_init__(self):
        if self.xi < 0:
            raise ValueError("focusing exponent must be non-negative")
        if self.sigma_occupied <= 0 or self.sigma_empty <= 0:
            raise ValueError("class weights must be positive")


@dataclass(frozen=True)
class LossWeights:
    lam: float = 0.0125
    phi_adv: float = 0.4
    phi_dec: float = 0.6
    mu_attr: float = 1.0


def _clamped_log(p):
    return nn.log(nn.clamp(p, PROB_EPS, 1.0 - PROB_EPS))


def adversarial_loss(d_real, d_fake):
    """Discriminator objective and the non-saturating generator term.

    Both inputs are probability nodes of shape (B, 1). Returns
    ``(L_adv, generator_term)`` where L_adv = -mean log D(real) - mean log(1 - D(fake))
    and generator_term = -mean log D(fake).
    """
    real_term = nn.scale(nn.mean_all(_clamped_log(d_real)), -1.0)
    one_minus = nn.add_scalar(nn.scale(d_fake, -1.0), 1.0)
    fake_term = nn.scale(nn.mean_all(_clamped_log(one_minus)), -1.0)
    gen_term = nn.scale(nn.mean_all(_clamped_log(d_fake)), -1.0)
    return nn.add(real_term, fake_term), gen_term


def focal_loss(logits, occupied, cfg=FocalLossConfig(), weight_hook=None):
    """Balanced focal loss averaged over voxels, then over scales.

    ``weight_hook(scale_index, occupied) -> (sigma_occupied, sigma_empty)``
    may replace the constant class weights per scale (arrays allowed).
    """
    if len(logits) != len(occupied) or not logits:
        raise AlignmentError(f"{len(logits)} logit sets for {len(occupied)} label sets")
    per_scale = []
    for k, (z, occ) in enumerate(zip(logits, occupied)):
        occ = np.asarray(occ, dtype=bool).reshape(-1)
        if z.value.size != occ.size:
            raise AlignmentError(f"scale {k}: {z.value.size} logits for {occ.size} labels")
        s_occ, s_emp = (cfg.sigma_occupied, cfg.sigma_empty) if weight_hook is None else weight_hook(k, occ)
        terms = nn.focal_terms(z, occ.reshape(z.value.shape), s_occ, s_emp, cfg.xi)
        per_scale.append(nn.mean_all(terms))
    return nn.mean_of(per_scale)


def focal_value(p_true, xi=2.0, sigma=1.0):
    """Scalar reference: -sigma (1 - p)^xi log p for the true-class probability."""
    p_true = np.asarray(p_true, dtype=np.float64)
    return -sigma * (1.0 - p_true) ** xi * np.log(p_true)


def attribute_mse(raw, target):
    """Mean squared colour error on the 8-bit scale (inputs are in [0, 1])."""
    diff = nn.sub(raw, target)
    return nn.scale(nn.mean_all(nn.square(diff)), 255.0 ** 2)


@dataclass
class LossBreakdown:
    L: float
    D: float
    R: float
    L_adv: float
    L_dec: float
    attr_mse: float
    lam: float
    phi_adv: float
    phi_dec: float
    mu_attr: float = 1.0
    node: object = None

    def identity_error(self):
        """Largest deviation from L = lam*D + R and the distortion decomposition."""
        d = self.phi_adv * self.L_adv + self.phi_dec * (self.L_dec + self.mu_attr * self.attr_mse)
        return max(abs(self.L - (self.lam * self.D + self.R)), abs(self.D - d))

    def row(self):
        return {k: getattr(self, k) for k in ("L", "D", "R", "L_adv", "L_dec", "attr_mse")}


def total_loss(rate, adv_gen, l_dec, attr_mse, weights=LossWeights()):
    """Combine scalar nodes into L = lam*D + R with D = phi_adv*adv + phi_dec*(dec + mu*mse)."""
    dec_branch = nn.add(l_dec, nn.scale(attr_mse, weights.mu_attr))
    d = nn.add(nn.scale(adv_gen, weights.phi_adv), nn.scale(dec_branch, weights.phi_dec))
    total = nn.add(nn.scale(d, weights.lam), rate)
    return LossBreakdown(
        L=float(total.value), D=float(d.value), R=float(rate.value),
        L_adv=float(adv_gen.value), L_dec=float(l_dec.value), attr_mse=float(attr_mse.value),
        lam=weights.lam, phi_adv=weights.phi_adv, phi_dec=weights.phi_dec,
        mu_attr=weights.mu_attr, node=total,
    )
