"""Uniform symmetric quantizer with power-of-2 scaling and trained thresholds.

The quantizer maps x to clip(round(x/s), n, p) * s where the scale s is
derived from a log-domain threshold:

    signed:   n = -2^(b-1), p = 2^(b-1) - 1, s = 2^ceil(log2_t) / 2^(b-1)
    unsigned: n = 0,        p = 2^b - 1,     s = 2^ceil(log2_t) / 2^b

round() is round-half-to-even.  s is always an exact power of two, so the
fraction length f = -log2(s) is an integer and the grid lowers to integers
plus a bit shift.

Gradients treat round and ceil as straight-through (derivative 1) but keep
the rounded value in the expression, which yields a nonzero scale gradient:

    d(quantized)/d(log2_t) = s*ln2 * (round(x/s) - x/s)   when round(x/s) in [n, p]
                             s*ln2 * n                    when round(x/s) < n
                             s*ln2 * p                    when round(x/s) > p

The fused backward below is written to be arithmetically identical (same
operation order) to backprop through the unfused composition, so the two
paths agree to the last bit.  All floating point scalings here are by powers
of two and therefore exact.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError

LN2 = math.log(2.0)


def bankers_round(x):
    """Round half to even, elementwise."""
    return np.rint(x)


def int_range(bits: int, signed: bool):
    """Smallest and largest representable integer level (n, p)."""
    if bits < 2:
        raise ContractError("need at least 2 bits, got %d" % bits)
    if signed:
        return -(2 ** (bits - 1)), 2 ** (bits - 1) - 1
    return 0, 2 ** bits - 1


def scale_from_log_threshold(log2_t, bits: int, signed: bool):
    """Power-of-2 scale and integer fraction length for a log2 threshold."""
    if not np.isfinite(log2_t):
        raise ContractError("log2_t must be finite, got %r" % (log2_t,))
    int_range(bits, signed)  # validates bits
    e = int(math.ceil(float(log2_t)))
    denom = bits - 1 if signed else bits
    f = denom - e
    return 2.0 ** (e - denom), f


@dataclass
class QuantizerParams:
    """One quantizer's state; log2_t is the trained parameter."""
    bits: int
    signed: bool
    log2_t: float = 0.0

    def __post_init__(self):
        int_range(self.bits, self.signed)

    @property
    def n(self):
        return int_range(self.bits, self.signed)[0]

    @property
    def p(self):
        return int_range(self.bits, self.signed)[1]

    def scale(self):
        return scale_from_log_threshold(self.log2_t, self.bits, self.signed)[0]

    def fraction_length(self):
        return scale_from_log_threshold(self.log2_t, self.bits, self.signed)[1]


def quantize_forward(x, params: QuantizerParams):
    s = params.scale()
    n, p = params.n, params.p
    return np.clip(np.rint(np.asarray(x, dtype=np.float64) / s), n, p) * s


def quantize_int(x, params: QuantizerParams):
    """Integer levels clip(round(x/s), n, p) as int64."""
    s = params.scale()
    n, p = params.n, params.p
    return np.clip(np.rint(np.asarray(x, dtype=np.float64) / s), n, p).astype(np.int64)


def quantize_backward(x, params: QuantizerParams, upstream):
    """Gradients of sum(upstream * quantize(x)) wrt x and log2_t.

    The log2_t gradient is the per-tensor sum of elementwise contributions.
    Operation order mirrors tape backprop through the unfused composition.
    """
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    s = params.scale()
    n, p = params.n, params.p
    denom = params.bits - 1 if params.signed else params.bits
    u = x / s
    r = np.rint(u)
    c = np.clip(r, n, p)
    mask = (r >= n) & (r <= p)
    # contribution of the output product y = c * s
    gs1 = np.sum(upstream * c)
    # contribution through u = x / s
    gu = (upstream * s) * mask
    gs2 = np.negative(np.sum(gu * u)) / s
    grad_x = gu / s
    exp2v = s * 2.0 ** denom
    grad_log2_t = ((gs1 + gs2) * 2.0 ** -denom) * (LN2 * exp2v)
    return grad_x, float(grad_log2_t)


def real_clip_limits(params: QuantizerParams):
    """Real-domain limits (x_n, x_p) separating inner and clipped regions.

    Inputs strictly inside (x_n, x_p) round into [n, p]; the elementwise
    threshold gradient of the L2 objective is >= 0 there and <= 0 outside.
    """
    s = params.scale()
    return s * (params.n - 0.5), s * (params.p + 0.5)


# ---------------------------------------------------------------------------
# Tape integration

def t_quantize(tape, x_id, log2t_id, bits, signed):
    """Fused quantizer node with the custom backward above."""
    n, p = int_range(bits, signed)
    denom = bits - 1 if signed else bits

    def fwd(xv, lv):
        s = 2.0 ** (math.ceil(float(lv)) - denom)
        return np.clip(np.rint(xv / s), n, p) * s

    def bwd(up, out, xv, lv):
        params = QuantizerParams(bits, signed, float(lv))
        grad_x, grad_l = quantize_backward(xv, params, up)
        return grad_x, np.reshape(grad_l, np.shape(lv))

    return tape.record("quantize", fwd, bwd, x_id, log2t_id)


def t_quantize_unfused(tape, x_id, log2t_id, bits, signed):
    """Same quantizer assembled from primitive ops with straight-through
    round/ceil.  Exists to cross-check the fused node; gradients must match
    it to the last bit."""
    n, p = int_range(bits, signed)
    denom = bits - 1 if signed else bits
    e = T.t_ceil_ste(tape, log2t_id)
    s = T.t_exp2(tape, T.t_add_const(tape, e, -float(denom)))
    u = T.t_div_scalar(tape, x_id, s)
    r = T.t_round_ste(tape, u)
    c = T.t_clip(tape, r, n, p)
    return T.t_mul(tape, c, s)


# ---------------------------------------------------------------------------
# Clipped-threshold baseline (per-side trained min/max, affine grid)

def fakequant_clipped(x, n_th, p_th, bits):
    """Rounded clip to an affine 2^bits grid over [n_th, p_th].

    Returns (y, grad_n, grad_p, grad_x) where the gradients are the local
    partials obtained by treating round as the identity: the threshold
    gradients are those of the clip function, zero strictly inside
    (n_th, p_th) and one on the saturated side.
    """
    if bits < 2:
        raise ContractError("need at least 2 bits, got %d" % bits)
    if not p_th > n_th:
        raise ContractError("need p_th > n_th, got %r >= %r" % (n_th, p_th))
    x = np.asarray(x, dtype=np.float64)
    step = (p_th - n_th) / (2 ** bits - 1)
    y = np.rint((np.clip(x, n_th, p_th) - n_th) / step) * step + n_th
    grad_n = (x <= n_th).astype(np.float64)
    grad_p = (x >= p_th).astype(np.float64)
    grad_x = ((x > n_th) & (x < p_th)).astype(np.float64)
    return y, grad_n, grad_p, grad_x


# ---------------------------------------------------------------------------
# Requantization algebra for affine quantizers

def affine_product_demo(q1, z1, s1, q2, z2, s2, z3, s3):
    """Integer-domain product of two affine-quantized values.

    Given r_i = s_i * (q_i - z_i), returns the output level q3 such that
    s3 * (q3 - z3) equals r1 * r2, in the full zero-point form and in the
    symmetric (all zero-points 0) form.  Works for any exact numeric type;
    with Fraction inputs the reconstruction is exact.
    """
    ratio = (s1 * s2) / s3
    q3_full = z3 + ratio * ((q1 * q2 - q1 * z2 - q2 * z1) + z1 * z2)
    q3_symmetric = ratio * (q1 * q2)
    return q3_full, q3_symmetric


# ---------------------------------------------------------------------------
# Finite-difference diagnostics

@dataclass
class GradCheckReport:
    bits: int
    signed: bool
    points: int
    skipped: int          # landed on a clip border, excluded
    max_rel_x: float
    max_rel_t: float
    ok: bool

    def __str__(self):
        return ("gradcheck b=%d %s: %d points (%d skipped) max rel err "
                "x=%.3g log2_t=%.3g -> %s"
                % (self.bits, "signed" if self.signed else "unsigned",
                   self.points, self.skipped, self.max_rel_x,
                   self.max_rel_t, "ok" if self.ok else "FAIL"))


def gradient_check(bits: int = 8, signed: bool = True, points: int = 1000,
                   step: float = 1e-4, seed: int = 0,
                   tol: float = 1e-4) -> GradCheckReport:
    """Check the custom backward against central differences.

    The straight-through pieces (the round and the power-of-2 ceiling)
    define their own derivative, so the difference target freezes the
    integer level offset and the ceiling at the evaluation point and
    keeps unit slope through both.  Points whose level sits exactly on
    the clip border are skipped: the gradient is one-sided there.
    """
    gen = np.random.default_rng(seed)
    n, p = int_range(bits, signed)
    max_x, max_t = 0.0, 0.0
    kept = skipped = 0
    while kept < points:
        log2_t = float(gen.uniform(-3.0, 4.0))
        params = QuantizerParams(bits, signed, log2_t)
        s = params.scale()
        span = (abs(n) + abs(p) + 2) * s
        x = float(gen.uniform(-span if signed else 0.0, span))
        up = float(gen.uniform(0.5, 2.0)) * (1 if gen.uniform() < 0.5 else -1)
        r = float(np.rint(x / s))
        if r == n or r == p:
            skipped += 1
            continue
        kept += 1
        gx, gt = quantize_backward(np.array([x]), params, np.array([up]))

        d0 = r - x / s
        def surrogate(theta, xv):
            sv = s * 2.0 ** (theta - log2_t)
            return sv * float(np.clip(xv / sv + d0, n, p)) * up

        fd_t = (surrogate(log2_t + step, x)
                - surrogate(log2_t - step, x)) / (2 * step)
        fd_x = (surrogate(log2_t, x + step * s)
                - surrogate(log2_t, x - step * s)) / (2 * step * s)
        rel_t = abs(float(gt) - fd_t) / max(abs(fd_t), 1e-9)
        rel_x = abs(float(gx[0]) - fd_x) / max(abs(fd_x), 1e-9)
        max_t = max(max_t, rel_t)
        max_x = max(max_x, rel_x)
    return GradCheckReport(bits, signed, points, skipped, max_x, max_t,
                           max_x < tol and max_t < tol)
