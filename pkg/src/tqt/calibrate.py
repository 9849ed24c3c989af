"""Threshold calibration: MAX, n-standard-deviations, and symmetric-KL.

Activations are summarized into a 1024-bin uniform magnitude histogram that
grows by integer rebinning when a new batch extends the range.  The KL
method scans every bin upper edge as a candidate threshold and picks the
one minimizing the symmetrized divergence between the full histogram and
its quantization-simulated counterpart (clipped mass folded into the last
retained bin, retained range rebinned to the quantization levels and
re-expanded, clipped bins left empty).  Ties go to the smallest threshold.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError

NBINS = 1024
EPS = 1e-12
T_FLOOR = 2.0 ** -10  # fallback threshold for all-zero tensors


class Histogram:
    """Uniform magnitude histogram over [0, max_abs] with running moments."""

    def __init__(self, nbins: int = NBINS):
        if nbins < 2:
            raise ContractError("need at least 2 bins")
        self.nbins = nbins
        self.counts = np.zeros(nbins, dtype=np.int64)
        self.hi = 0.0       # top edge, equals the running max magnitude
        self.total = 0
        self.count = 0      # Welford over raw (signed) values
        self.mean = 0.0
        self.m2 = 0.0

    def add(self, x):
        x = np.asarray(x, dtype=np.float64).ravel()
        if x.size == 0:
            return
        # moment merge (parallel Welford)
        bn = x.size
        bm = float(x.mean())
        bm2 = float(((x - bm) ** 2).sum())
        if self.count == 0:
            self.count, self.mean, self.m2 = bn, bm, bm2
        else:
            delta = bm - self.mean
            tot = self.count + bn
            self.mean += delta * bn / tot
            self.m2 += bm2 + delta * delta * self.count * bn / tot
            self.count = tot
        a = np.abs(x)
        amax = float(a.max())
        if amax > self.hi:
            if self.hi > 0.0:
                factor = int(math.ceil(amax / self.hi))
                merged = np.zeros(self.nbins, dtype=np.int64)
                np.add.at(merged, np.arange(self.nbins) // factor, self.counts)
                self.counts = merged
                self.hi *= factor
            else:
                self.hi = amax
        if self.hi > 0.0:
            idx = np.minimum((a * (self.nbins / self.hi)).astype(np.int64),
                             self.nbins - 1)
            self.counts += np.bincount(idx, minlength=self.nbins)
        self.total += bn

    @property
    def stddev(self):
        return math.sqrt(self.m2 / self.count) if self.count else 0.0

    def edges(self):
        return self.hi * np.arange(1, self.nbins + 1) / self.nbins


def _nonempty(x):
    if np.size(x) == 0:
        raise ContractError("cannot calibrate an empty tensor")
    return np.asarray(x, dtype=np.float64)


def calib_max(x) -> float:
    """Threshold at the largest magnitude; floor for all-zero input."""
    t = float(np.max(np.abs(_nonempty(x))))
    return t if t > 0.0 else T_FLOOR


def calib_nsd(x, nsd: float = 3.0) -> float:
    """Threshold at nsd population standard deviations about the mean."""
    t = nsd * float(np.std(_nonempty(x)))
    return t if t > 0.0 else T_FLOOR


def calib_percentile(x, pct: float = 99.99) -> float:
    """Threshold at a magnitude percentile; same floor as the others."""
    if not 0.0 < pct <= 100.0:
        raise ContractError("percentile must be in (0, 100], got %r" % (pct,))
    t = float(np.percentile(np.abs(_nonempty(x)), pct))
    return t if t > 0.0 else T_FLOOR


def _divergence(p, q):
    p = p / p.sum()
    q = q / q.sum()
    return float(np.sum(p * np.log((p + EPS) / (q + EPS)))
                 + np.sum(q * np.log((q + EPS) / (p + EPS))))


def klj_curve(hist: Histogram, bits: int, signed: bool):
    """Symmetrized divergence at every candidate threshold (bin upper edge).

    Candidate i retains bins [0, i).  The reference P is the full
    normalized histogram.  The simulated Q folds the clipped mass into
    the last retained bin, rebins the retained range to the quantization
    level count, spreads each level's mass uniformly over its nonzero
    source bins, and leaves the clipped bins empty.  Comparing against
    the full P makes clipping carry its real cost: mass stranded in
    clipped bins meets only the smoothing epsilon in Q.
    """
    levels = 2 ** (bits - 1) if signed else 2 ** bits
    counts = hist.counts.astype(np.float64)
    tail = counts.sum() - np.cumsum(counts)
    js = np.empty(hist.nbins)
    q = np.zeros(hist.nbins)
    for i in range(1, hist.nbins + 1):
        folded = counts[:i].copy()
        folded[-1] += tail[i - 1]
        if folded.sum() == 0.0:
            js[i - 1] = np.inf
            continue
        if levels >= i:
            # one level per bin: the simulation changes nothing beyond folding
            sim = folded
        else:
            chunk = np.arange(i) * levels // i
            sums = np.bincount(chunk, weights=folded, minlength=levels)
            nz = np.bincount(chunk, weights=(folded > 0).astype(np.float64),
                             minlength=levels)
            sim = np.where(folded > 0, sums[chunk] / np.maximum(nz[chunk], 1.0), 0.0)
        q[:i] = sim
        q[i:] = 0.0
        js[i - 1] = _divergence(counts, q)
    return hist.edges(), js


def calib_klj(hist: Histogram, bits: int, signed: bool) -> float:
    """Threshold minimizing the symmetrized divergence; ties take the
    smallest candidate.  All-zero data falls back to the floor."""
    if hist.total == 0:
        raise ContractError("cannot calibrate an empty histogram")
    if hist.hi == 0.0:
        return T_FLOOR
    edges, js = klj_curve(hist, bits, signed)
    best = int(np.argmin(js))  # argmin returns the first (smallest) minimum
    return float(edges[best])


@dataclass
class ThresholdPolicy:
    weights: str     # "max" or "3sd"
    activations: str  # "klj"


def threshold_policy(mode: str) -> ThresholdPolicy:
    """Initialization policy per run mode.

    Weight thresholds use MAX when they stay fixed and 3SD when they will
    be trained; activation thresholds always start from the KL calibration.
    """
    if mode in ("static", "retrain-wt"):
        return ThresholdPolicy("max", "klj")
    if mode == "retrain-wt-th":
        return ThresholdPolicy("3sd", "klj")
    raise ContractError("unknown mode %r" % (mode,))
