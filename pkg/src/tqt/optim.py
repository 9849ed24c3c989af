"""Optimizers and schedules for threshold and weight training.

Log-domain thresholds oscillate around their optimum under Adam with a
period set by the gradient asymmetry ratio r_g across the nearest integer
ceiling boundary; `adam_guidelines` returns hyperparameters sized so the
oscillation amplitude stays within the quantizer's resolution.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, TrainingError


def _require_finite(name, value):
    if not np.all(np.isfinite(value)):
        raise TrainingError("non-finite %s" % name)


def sgd_step(param, grad, lr):
    """Plain descent step; returns the updated parameter."""
    _require_finite("gradient", grad)
    return param - lr * grad


@dataclass
class AdamState:
    """Per-parameter Adam accumulator state."""
    alpha: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: float = 0.0
    v: float = 0.0
    i: int = 0


def adam_step(state: AdamState, grad, lr=None):
    """One Adam update; returns the delta to add to the parameter.

    `lr` overrides state.alpha for externally scheduled rates.  The epsilon
    sits outside the bias-corrected root, so for any constant gradient the
    step magnitude approaches alpha regardless of gradient scale.
    """
    _require_finite("gradient", grad)
    alpha = state.alpha if lr is None else lr
    state.i += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1 ** state.i)
    v_hat = state.v / (1.0 - state.beta2 ** state.i)
    return -alpha * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class NormedGradState:
    """Second-moment state for tanh-normalized gradients."""
    beta: float = 0.999
    eps: float = 1e-8
    v: float = 0.0
    i: int = 0


def normed_grad(state: NormedGradState, grad):
    """tanh(g / (sqrt(v_hat) + eps)): bounded in (-1, 1), scale-free.

    Feeding this to SGD caps the per-step parameter move at the learning
    rate, which is what makes plain SGD usable for log thresholds.
    """
    _require_finite("gradient", grad)
    state.i += 1
    state.v = state.beta * state.v + (1.0 - state.beta) * grad * grad
    v_hat = state.v / (1.0 - state.beta ** state.i)
    return np.tanh(grad / (np.sqrt(v_hat) + state.eps))


@dataclass
class Guidelines:
    bits: int
    alpha_max: float
    beta1_min: float
    beta2_min: float
    steps_estimate: float


def adam_guidelines(bits: int) -> Guidelines:
    """Hyperparameter bounds for log-threshold training at a bit width.

    Derived from the sawtooth analysis of Adam on an asymmetric-gradient
    1-D objective: with r_g of the order of the largest level p, keeping
    max deviation below the quantizer's log-domain resolution needs
    alpha <= 0.1/sqrt(2^(b-1)), beta1 >= 1/e, beta2 >= 1 - 0.1/(2^(b-1)-1).
    Expect convergence in roughly 1/alpha + 1/(1-beta2) steps.
    """
    if bits < 2:
        raise ContractError("need at least 2 bits, got %d" % bits)
    p = 2 ** (bits - 1) - 1
    alpha_max = 0.1 / math.sqrt(2 ** (bits - 1))
    beta2_min = 1.0 - 0.1 / p
    beta1_min = 1.0 / math.e
    steps = 1.0 / alpha_max + 1.0 / (1.0 - beta2_min)
    return Guidelines(bits, alpha_max, beta1_min, beta2_min, steps)


def lr_schedule(kind: str, step: int, batch_size: int) -> float:
    """Staircase decay schedules, intervals scaled by 24/batch_size.

    weights:    1e-6 * 0.94^floor(step / (3000 * 24/N))
    thresholds: 1e-2 * 0.5^floor(step / (1000 * 24/N))
    """
    if batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    scale = 24.0 / batch_size
    if kind == "weights":
        interval = max(1, int(round(3000 * scale)))
        return 1e-6 * 0.94 ** (step // interval)
    if kind == "thresholds":
        interval = max(1, int(round(1000 * scale)))
        return 1e-2 * 0.5 ** (step // interval)
    raise ContractError("unknown schedule kind %r" % (kind,))


def freeze_start_step(batch_size: int) -> int:
    return int(round(1000 * 24.0 / batch_size))


class FreezeController:
    """Incremental threshold freezing during retraining.

    From `start` steps on, once every `every` steps, freezes the eligible
    unfrozen threshold with the smallest gradient magnitude.  A threshold is
    eligible when its value and its EMA sit on the same side of the nearest
    integer boundary, i.e. it has settled inside one ceiling bin.  Frozen
    thresholds stay frozen.
    """

    def __init__(self, batch_size: int, decay: float = 0.9, every: int = 50):
        self.start = freeze_start_step(batch_size)
        self.decay = decay
        self.every = every
        self.ema = {}
        self.frozen = set()

    def _eligible(self, name, value):
        boundary = float(np.round(value))
        return (value - boundary) * (self.ema[name] - boundary) > 0.0

    def freeze_step(self, step, log2_ts, grads):
        """Update EMAs and maybe freeze one threshold; returns its name.

        `log2_ts` and `grads` map threshold names to current values and
        current gradients.  Call exactly once per training step.
        """
        for name, value in log2_ts.items():
            if name in self.ema:
                self.ema[name] = self.decay * self.ema[name] + (1.0 - self.decay) * value
            else:
                self.ema[name] = value
        if step < self.start or (step - self.start) % self.every != 0:
            return None
        candidates = [
            name for name in log2_ts
            if name not in self.frozen and self._eligible(name, log2_ts[name])
        ]
        if not candidates:
            return None
        pick = min(candidates, key=lambda nm: (abs(grads.get(nm, 0.0)), nm))
        self.frozen.add(pick)
        return pick
