"""Attribute PSNR, bits per input point and Bjontegaard deltas."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import GeometryMismatch, InsufficientPoints, NoOverlap

PEAK = 255.0
PSNR_CAP = 100.0
CHANNELS = {"y": 0, "u": 1, "v": 2}
YUV_WEIGHTS = (6.0, 1.0, 1.0)
CSV_COLUMNS = ("lambda_index", "bpip", "psnr_y", "psnr_u", "psnr_v", "psnr_yuv")


def _matched(ref, test):
    """Colours of both clouds aligned by position (geometry must be identical)."""
    if len(ref) != len(test):
        raise GeometryMismatch(f"{len(ref)} reference points vs {len(test)} test points")
    o1 = np.lexsort(ref.positions.T[::-1])
    o2 = np.lexsort(test.positions.T[::-1])
    if not np.array_equal(ref.positions[o1], test.positions[o2]):
        raise GeometryMismatch("position sets differ")
    return ref.colors[o1], test.colors[o2]


def channel_mse(ref, test):
    a, b = _matched(ref, test)
    if len(a) == 0:
        raise GeometryMismatch("cannot compare empty clouds")
    return ((a - b) ** 2).mean(axis=0)


def mse_to_psnr(mse):
    if mse <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(PEAK ** 2 / mse))


def psnr(ref, test, channel="y"):
    """PSNR in dB of one channel ('y', 'u', 'v') or the 6:1:1 'yuv' combination."""
    mse = channel_mse(ref, test)
    if channel == "yuv":
        per = [mse_to_psnr(m) for m in mse]
        return sum(w * p for w, p in zip(YUV_WEIGHTS, per)) / sum(YUV_WEIGHTS)
    idx = CHANNELS[channel] if isinstance(channel, str) else int(channel)
    return mse_to_psnr(float(mse[idx]))


def bpip(stream, point_count):
    """Bits per input point of a Bitstream or raw byte string."""
    if point_count <= 0:
        raise ValueError("point_count must be positive")
    n_bytes = len(stream) if isinstance(stream, (bytes, bytearray)) else len(stream.to_bytes())
    return 8.0 * n_bytes / point_count


@dataclass(frozen=True)
class RDPoint:
    bpip: float
    psnr_y: float
    psnr_u: float
    psnr_v: float
    psnr_yuv: float
    lambda_index: int = 0


def rd_point(ref, test, stream, lambda_index=0):
    return RDPoint(bpip(stream, len(ref)), psnr(ref, test, "y"), psnr(ref, test, "u"),
                   psnr(ref, test, "v"), psnr(ref, test, "yuv"), lambda_index)


def mean_point(points):
    points = list(points)
    vals = {k: float(np.mean([getattr(p, k) for p in points]))
            for k in ("bpip", "psnr_y", "psnr_u", "psnr_v", "psnr_yuv")}
    return RDPoint(**vals, lambda_index=points[0].lambda_index)


def mean_color_baseline(pc):
    """Every point gets the cloud's mean colour; costs three bytes."""
    recon = pc.with_colors(np.broadcast_to(pc.colors.mean(axis=0), pc.colors.shape))
    return recon, 24.0 / len(pc)


def write_points_csv(points, path):
    """RD points as CSV rows, in the given order and without curve validation."""
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        w.writeheader()
        for p in points:
            row = asdict(p)
            w.writerow({k: row[k] for k in CSV_COLUMNS})


class RDCurve:
    """RD points ordered by strictly increasing rate."""

    def __init__(self, points):
        pts = sorted(points, key=lambda p: p.bpip)
        rates = [p.bpip for p in pts]
        if any(r <= 0 for r in rates):
            raise ValueError("bpip must be positive")
        if any(b <= a for a, b in zip(rates, rates[1:])):
            raise ValueError("RD curve needs strictly increasing bpip")
        self.points = pts

    def __len__(self):
        return len(self.points)

    def rates(self):
        return np.array([p.bpip for p in self.points])

    def psnrs(self, channel="y"):
        return np.array([getattr(p, f"psnr_{channel}") for p in self.points])

    def to_csv(self, path):
        write_points_csv(self.points, path)

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls([RDPoint(float(r["bpip"]), float(r["psnr_y"]), float(r["psnr_u"]),
                            float(r["psnr_v"]), float(r["psnr_yuv"]), int(r["lambda_index"]))
                    for r in rows])


def _average_gap(x1, y1, x2, y2):
    """Mean of (fit2 - fit1) over the shared x interval, using cubic fits."""
    if len(x1) < 4 or len(x2) < 4:
        raise InsufficientPoints(f"need at least 4 points per curve, got {len(x1)} and {len(x2)}")
    lo = max(np.min(x1), np.min(x2))
    hi = min(np.max(x1), np.max(x2))
    if not hi > lo:
        raise NoOverlap(f"curves do not overlap (interval [{lo}, {hi}])")
    p1 = np.polyint(np.polyfit(x1, y1, 3))
    p2 = np.polyint(np.polyfit(x2, y2, 3))
    area1 = np.polyval(p1, hi) - np.polyval(p1, lo)
    area2 = np.polyval(p2, hi) - np.polyval(p2, lo)
    return float((area2 - area1) / (hi - lo))


def bd_psnr(ref, test, channel="y"):
    """Average PSNR gain in dB of ``test`` over ``ref`` at equal rate."""
    return _average_gap(np.log10(ref.rates()), ref.psnrs(channel),
                        np.log10(test.rates()), test.psnrs(channel))


def bd_rate(ref, test, channel="y"):
    """Average rate change in percent of ``test`` against ``ref`` at equal PSNR."""
    gap = _average_gap(ref.psnrs(channel), np.log10(ref.rates()),
                       test.psnrs(channel), np.log10(test.rates()))
    return 100.0 * (10.0 ** gap - 1.0)


def bd_report(ref, test, names=("ref", "test")):
    """Plain-text table of BD-BR (%) and BD-PSNR (dB) per colour component."""
    lines = [f"{names[1]} vs {names[0]}",
             f"{'component':<10}{'BD-BR (%)':>12}{'BD-PSNR (dB)':>14}"]
    for ch in ("y", "u", "v", "yuv"):
        lines.append(f"{ch.upper():<10}{bd_rate(ref, test, ch):>12.4f}{bd_psnr(ref, test, ch):>14.4f}")
    return "\n".join(lines) + "\n"
