"""One-dimensional threshold-training studies.

A single quantizer is trained to minimize the L2 reconstruction loss of
Gaussian data.  These runs expose the optimizer dynamics in isolation:
raw-domain SGD is scale-sensitive, log-domain SGD still couples to the
gradient magnitude, Adam and tanh-normalized SGD are scale-free.  The
converged threshold oscillates around an integer log2 boundary; the
oscillation period matches the gradient asymmetry ratio across that
boundary, which is what `measure_oscillation` extracts.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .optim import AdamState, NormedGradState, adam_step, normed_grad, sgd_step
from .quantize import LN2, QuantizerParams, fakequant_clipped, quantize_backward, quantize_forward
from .tensor import Rng

DIVERGENCE_LIMIT = 64.0

OPTIMIZERS = ("raw-sgd", "log-sgd", "log-adam", "normed-log-sgd")


@dataclass
class ToyConfig:
    bits: int = 8
    signed: bool = True
    sigma: float = 1.0
    optimizer: str = "log-adam"
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    steps: int = 5000
    batch: int = 4096
    init_log2t: float = None  # default: log2(3 sigma)
    seed: int = 0


@dataclass
class Trajectory:
    cfg: ToyConfig
    log2_t: np.ndarray
    loss: np.ndarray
    grad: np.ndarray
    diverged: bool = False

    def __len__(self):
        return len(self.log2_t)


def _l2_grad(x, params):
    """Loss 0.5*mean((q-x)^2) and its gradient wrt log2_t."""
    q = quantize_forward(x, params)
    d = q - x
    loss = 0.5 * float(np.mean(d * d))
    _, g = quantize_backward(x, params, d / x.size)
    return loss, g


def toy_l2_run(cfg: ToyConfig) -> Trajectory:
    """Train one threshold on fresh Gaussian batches.

    A trajectory wandering past |log2_t| > 64 is recorded as diverged
    and truncated rather than raised: divergence is a result here.
    """
    if cfg.optimizer not in OPTIMIZERS:
        raise ContractError("unknown optimizer %r" % (cfg.optimizer,))
    gen = Rng(cfg.seed).stream("toy-batch")
    log2_t = float(np.log2(3.0 * cfg.sigma) if cfg.init_log2t is None
                   else cfg.init_log2t)
    adam = AdamState(beta1=cfg.beta1, beta2=cfg.beta2)
    norm = NormedGradState()
    hist_t, hist_loss, hist_g = [], [], []
    diverged = False
    for _ in range(cfg.steps):
        x = gen.normal(0.0, cfg.sigma, size=cfg.batch)
        params = QuantizerParams(cfg.bits, cfg.signed, log2_t)
        loss, g = _l2_grad(x, params)
        hist_t.append(log2_t)
        hist_loss.append(loss)
        hist_g.append(g)
        if cfg.optimizer == "log-sgd":
            log2_t = sgd_step(log2_t, g, cfg.lr)
        elif cfg.optimizer == "log-adam":
            log2_t = log2_t + adam_step(adam, g, cfg.lr)
        elif cfg.optimizer == "normed-log-sgd":
            log2_t = sgd_step(log2_t, normed_grad(norm, g), cfg.lr)
        else:  # raw-sgd: chain rule back to the raw threshold
            t = 2.0 ** log2_t
            t = t - cfg.lr * g / (t * LN2)
            if not np.isfinite(t) or t <= 2.0 ** (-DIVERGENCE_LIMIT):
                diverged = True
                break
            log2_t = float(np.log2(t))
        if not np.isfinite(log2_t) or abs(log2_t) > DIVERGENCE_LIMIT:
            diverged = True
            break
    return Trajectory(cfg, np.asarray(hist_t), np.asarray(hist_loss),
                      np.asarray(hist_g), diverged)


@dataclass
class OscillationReport:
    boundary: float
    period: float
    r_g: float
    max_deviation: float
    crossings: int
    reliable: bool


def measure_oscillation(traj: Trajectory, tail_frac: float = 0.3) -> OscillationReport:
    """Characterize the converged sawtooth of a threshold trajectory.

    Looks at the last `tail_frac` of the run: the critical boundary is
    the integer nearest the tail median, the period is the mean gap
    between upward crossings of that boundary, and r_g is the ratio of
    mean gradient magnitude below the boundary to above it.  The report
    is flagged unreliable if the tail has not settled to within one
    integer bin or crosses the boundary too rarely to average.
    """
    if traj.diverged or len(traj) < 10:
        return OscillationReport(0.0, 0.0, 0.0, float("inf"), 0, False)
    k = max(1, int(len(traj) * tail_frac))
    tail = traj.log2_t[-k:]
    grads = traj.grad[-k:]
    med = float(np.median(tail))
    boundary = float(np.round(med))
    reliable = bool(np.all(np.abs(tail - med) <= 1.0))
    below = tail < boundary
    above = ~below
    up = np.flatnonzero(below[:-1] & above[1:])
    crossings = len(up)
    period = float(np.mean(np.diff(up))) if crossings >= 3 else 0.0
    g_low = float(np.mean(grads[below])) if below.any() else 0.0
    g_high = float(np.mean(grads[above])) if above.any() else 0.0
    r_g = abs(g_low) / abs(g_high) if g_high != 0.0 else 0.0
    if crossings < 3 or not below.any() or not above.any():
        reliable = False
    dev = float(np.max(np.abs(tail - boundary)))
    return OscillationReport(boundary, period, r_g, dev, crossings, reliable)


def convergence_step(traj: Trajectory, tol: float = 0.75) -> int:
    """First step after which log2_t stays within tol of its tail median."""
    if traj.diverged:
        return len(traj)
    k = max(1, int(len(traj) * 0.3))
    med = float(np.median(traj.log2_t[-k:]))
    bad = np.flatnonzero(np.abs(traj.log2_t - med) > tol)
    return int(bad[-1]) + 1 if len(bad) else 0


# ---------------------------------------------------------------------------
# Heavy-tail comparison: trained power-of-2 threshold vs per-side min/max

@dataclass
class ClipCompareReport:
    loss_tqt: float
    loss_clipped: float
    t_tqt: float
    clip_lo: float
    clip_hi: float
    data_max_abs: float
    data_max_pos: float
    tqt_log2_t: np.ndarray = field(repr=False, default=None)
    clip_hi_trace: np.ndarray = field(repr=False, default=None)
    tqt_loss_trace: np.ndarray = field(repr=False, default=None)
    clip_loss_trace: np.ndarray = field(repr=False, default=None)


def compare_clipped_vs_tqt(sigma: float = 1.0, bits: int = 8,
                           n: int = 200000, outlier_frac: float = 1e-3,
                           outlier_scale: float = 100.0, steps: int = 3000,
                           lr: float = 0.01, seed: int = 4) -> ClipCompareReport:
    """Train both threshold styles on the same heavy-tailed sample.

    The sample is Gaussian with a fraction of entries redrawn at
    `outlier_scale` times the bulk scale.  The power-of-2 threshold
    settles below the extremes and clips them; the clipped-gradient
    min/max pair only ever receives outward pushes and ends at the
    sample extremes, paying for the tail with a coarse (and zero-free)
    grid over the bulk.  Reported losses are tail medians of the
    full-batch L2 loss, so the boundary sawtooth does not pick the
    lucky side.
    """
    gen = Rng(seed).stream("heavy-tail")
    x = gen.normal(0.0, sigma, size=n)
    k = int(round(outlier_frac * n))
    if k:
        idx = gen.choice(n, size=k, replace=False)
        x[idx] = gen.normal(0.0, outlier_scale * sigma, size=k)

    # power-of-2 threshold, Adam in the log domain
    log2_t = float(np.log2(3.0 * np.std(x)))
    adam = AdamState()
    t_trace, t_loss = [], []
    for _ in range(steps):
        params = QuantizerParams(bits, True, log2_t)
        loss, g = _l2_grad(x, params)
        t_trace.append(log2_t)
        t_loss.append(loss)
        log2_t = log2_t + adam_step(adam, g, lr)

    # min/max pair, Adam in the raw domain; rate sized to traverse the
    # full data range within the step budget, second moment kept fresh
    # so the late small gradients still move the limits
    lo, hi = -3.0 * np.std(x), 3.0 * np.std(x)
    adam_lo, adam_hi = AdamState(beta2=0.99), AdamState(beta2=0.99)
    lr_raw = 0.25 * sigma
    c_trace, c_loss = [], []
    for _ in range(steps):
        y, g_lo, g_hi, _ = fakequant_clipped(x, lo, hi, bits)
        d = y - x
        c_loss.append(0.5 * float(np.mean(d * d)))
        c_trace.append(hi)
        up = d / x.size
        lo = lo + adam_step(adam_lo, float(np.sum(up * g_lo)), lr_raw)
        hi = hi + adam_step(adam_hi, float(np.sum(up * g_hi)), lr_raw)

    tail = max(1, steps // 10)
    med_log2t = float(np.median(t_trace[-tail:]))
    return ClipCompareReport(
        loss_tqt=float(np.median(t_loss[-tail:])),
        loss_clipped=float(np.median(c_loss[-tail:])),
        t_tqt=2.0 ** med_log2t,
        clip_lo=float(lo), clip_hi=float(hi),
        data_max_abs=float(np.max(np.abs(x))),
        data_max_pos=float(np.max(x)),
        tqt_log2_t=np.asarray(t_trace),
        clip_hi_trace=np.asarray(c_trace),
        tqt_loss_trace=np.asarray(t_loss),
        clip_loss_trace=np.asarray(c_loss))
