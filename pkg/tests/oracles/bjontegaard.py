"""Independent Bjontegaard reference: least-squares cubic plus numerical quadrature."""

import numpy as np
from scipy.integrate import quad


def _cubic(x, y):
    a = np.vander(np.asarray(x, float), 4)
    coef, *_ = np.linalg.lstsq(a, np.asarray(y, float), rcond=None)
    return lambda t: float(coef[0] * t ** 3 + coef[1] * t ** 2 + coef[2] * t + coef[3])


def _avg_gap(x1, y1, x2, y2):
    f1, f2 = _cubic(x1, y1), _cubic(x2, y2)
    lo = max(min(x1), min(x2))
    hi = min(max(x1), max(x2))
    i1 = quad(f1, lo, hi, epsabs=1e-13, epsrel=1e-13)[0]
    i2 = quad(f2, lo, hi, epsabs=1e-13, epsrel=1e-13)[0]
    return (i2 - i1) / (hi - lo)


def bd_psnr(rate1, psnr1, rate2, psnr2):
    return _avg_gap(np.log10(rate1), psnr1, np.log10(rate2), psnr2)


def bd_rate(rate1, psnr1, rate2, psnr2):
    gap = _avg_gap(psnr1, np.log10(rate1), psnr2, np.log10(rate2))
    return 100.0 * (10.0 ** gap - 1.0)
