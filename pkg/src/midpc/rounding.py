"""Differentiable integrality enforcement for neural policies.

Three strategies turn a relaxed network output into an exact integer while
keeping a usable gradient:

* sigmoid STE   -- round to the nearest integer; the backward pass borrows the
                   derivative of a steep sigmoid step centered on the rounding
                   threshold.
* softmax STE   -- treat the choice as a categorical over the feasible set;
                   forward takes the argmax one-hot, backward flows through
                   the (optionally Gumbel-perturbed) soft probabilities.
* learnable threshold -- a second network proposes a correction to the relaxed
                   value and a per-decision rounding threshold t = sigmoid(.);
                   the fractional part is compared against t, with a
                   sigmoid-STE surrogate for the comparison.

All forwards produce members of the feasible integer set exactly; only the
backward passes are approximate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .errors import ConfigError


@dataclass
class SigmoidSteConfig:
    eta: float = 10.0          # surrogate slope, > 1
    threshold: float = 0.5     # rounding threshold
    clip_lo: float = -0.5
    clip_hi: float = 3.5

    def __post_init__(self):
        if self.eta <= 1.0:
            raise ConfigError(f"sigmoid STE slope must be > 1, got {self.eta}")
        if self.clip_lo >= self.clip_hi:
            raise ConfigError("clip_lo must be below clip_hi")


@dataclass
class GumbelSoftmaxConfig:
    tau: float = 0.5           # temperature, > 0
    noise_enabled: bool = True  # Gumbel noise during training

    def __post_init__(self):
        if self.tau <= 0.0:
            raise ConfigError(f"softmax STE temperature must be > 0, got {self.tau}")


@dataclass
class LearnableThresholdConfig:
    eta: float = 10.0          # slope of the comparison surrogate, > 1

    def __post_init__(self):
        if self.eta <= 1.0:
            raise ConfigError(f"threshold STE slope must be > 1, got {self.eta}")


@dataclass
class ScoreVector:
    """Raw scores, soft probabilities, and the chosen one-hot vector."""

    scores: np.ndarray
    probs: np.ndarray
    onehot: np.ndarray


def require_consecutive(feasible: np.ndarray, strategy: str) -> None:
    """Rounding-based strategies only cover consecutive (evenly spaced) sets."""
    if np.any(np.diff(np.asarray(feasible)) != 1):
        raise ConfigError(
            f"{strategy} requires consecutive (evenly spaced) feasible integers, "
            f"got {list(np.asarray(feasible))}")


def round_half_away(y: np.ndarray) -> np.ndarray:
    """Nearest integer, ties away from zero (np.round would pick evens)."""
    return np.where(y >= 0.0, np.floor(y + 0.5), np.ceil(y - 0.5))


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def sigmoid_ste(tape: Tape, y: Var, feasible: np.ndarray,
                config: SigmoidSteConfig) -> tuple[Var, Var]:
    """Clip, round to the nearest feasible integer, attach the sigmoid surrogate.

    Returns (integer output, clipped relaxed value).  The backward multiplier
    is the sigmoid-step derivative evaluated at the clipped value, and the
    clip node zeroes gradients for saturated inputs.
    """
    feasible = np.asarray(feasible, dtype=float)
    require_consecutive(feasible, "sigmoid STE")
    y_clip = ad.clip(tape, y, config.clip_lo, config.clip_hi)
    yc = y_clip.value
    # ties round away from zero; the final clamp keeps clip-boundary values
    # (e.g. exactly clip_lo) inside the feasible set
    delta = np.clip(round_half_away(yc), feasible[0], feasible[-1])
    w = config.eta * (yc - delta - config.threshold)
    s = _sigmoid(w)
    mult = s * (1.0 - s) * config.eta

    out = ad.custom_grad(tape, (y_clip,), delta,
                         lambda g: [g * mult], op="sigmoid_ste")
    return out, y_clip


def gumbel_sample(rng: np.random.Generator, shape) -> np.ndarray:
    """Gumbel(0,1) draws via -log(-log(U)), with U clamped away from {0,1}."""
    u = np.clip(rng.random(shape), 1e-12, 1.0 - 1e-12)
    return -np.log(-np.log(u))


def gumbel_softmax_ste(tape: Tape, logits: Var, feasible: np.ndarray,
                       config: GumbelSoftmaxConfig,
                       rng: np.random.Generator | None,
                       mode: str) -> tuple[Var, Var, ScoreVector]:
    """Categorical choice over the feasible set with a soft backward path.

    Raw network outputs are used directly as log-scores.  In train mode (and
    with noise enabled) they are perturbed by Gumbel(0,1) draws before the
    temperature-scaled softmax.  Forward output is one-hot argmax dotted with
    the feasible values; gradients flow through the soft dot product instead.

    Returns (integer output, soft output, score diagnostics).
    """
    feasible = np.asarray(feasible, dtype=float)
    L = feasible.shape[0]
    if logits.value.shape[-1] != L:
        raise ConfigError(f"softmax STE: got {logits.value.shape[-1]} scores "
                          f"for {L} feasible integers")
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got '{mode}'")

    z = logits
    if mode == "train" and config.noise_enabled:
        if rng is None:
            raise ConfigError("softmax STE with noise needs an rng")
        z = ad.add(tape, z, gumbel_sample(rng, logits.value.shape))
    z = ad.scale(tape, z, 1.0 / config.tau)
    probs = ad.softmax(tape, z)

    onehot = np.zeros_like(probs.value)
    # argmax ties: lowest index wins (np.argmax convention)
    idx = np.argmax(probs.value, axis=-1)
    np.put_along_axis(onehot.reshape(-1, L),
                      idx.reshape(-1, 1), 1.0, axis=-1)

    soft = ad.matmul(tape, probs, feasible)
    hard_value = onehot.reshape(probs.value.shape) @ feasible
    out = ad.ste(tape, hard_value, soft, op="softmax_ste")
    scores = ScoreVector(scores=np.array(logits.value), probs=np.array(probs.value),
                         onehot=onehot.reshape(probs.value.shape))
    return out, soft, scores


def learnable_threshold(tape: Tape, y: Var, correction: Var, threshold_logit: Var,
                        feasible: np.ndarray,
                        config: LearnableThresholdConfig) -> tuple[Var, Var, Var]:
    """Round a corrected relaxed value against a learned threshold.

    The corrected value is clipped to [min, max] of the feasible set; the
    threshold is sigmoid(threshold_logit).  Fractional parts below the
    threshold round down, others round up.  The comparison's backward pass
    uses the sigmoid-STE rule, sending gradient to both the corrected value
    and (negated) the threshold.

    Returns (integer output, clipped corrected value, threshold).
    """
    feasible = np.asarray(feasible, dtype=float)
    require_consecutive(feasible, "learnable threshold")
    y_corr = ad.clip(tape, ad.add(tape, y, correction), feasible[0], feasible[-1])
    t = ad.sigmoid(tape, threshold_logit)

    yv, tv = y_corr.value, t.value
    floor = np.floor(yv)
    frac = yv - floor
    delta = np.clip(np.where(frac < tv, floor, floor + 1.0),
                    feasible[0], feasible[-1])
    w = config.eta * (frac - tv)
    s = _sigmoid(w)
    mult = s * (1.0 - s) * config.eta

    out = ad.custom_grad(tape, (y_corr, t), delta,
                         lambda g: [g * mult, -g * mult], op="learnable_threshold")
    return out, y_corr, t


def smooth_staircase(tape: Tape, y: Var, feasible: np.ndarray,
                     config: SigmoidSteConfig) -> Var:
    """Fully differentiable stand-in for sigmoid-STE rounding.

    Sum of sigmoid steps between consecutive feasible integers; used by the
    surrogate-forward gradient checks, never in production rollouts.
    """
    feasible = np.asarray(feasible, dtype=float)
    y_clip = ad.clip(tape, y, config.clip_lo, config.clip_hi)
    out = None
    for j in feasible[:-1]:
        stp = ad.sigmoid(tape, ad.scale(
            tape, ad.add(tape, y_clip, -(j + config.threshold)), config.eta))
        out = stp if out is None else ad.add(tape, out, stp)
    return ad.add(tape, out, float(feasible[0]))


def smooth_threshold_round(tape: Tape, y: Var, correction: Var, threshold_logit: Var,
                           feasible: np.ndarray,
                           config: LearnableThresholdConfig) -> Var:
    """Differentiable stand-in for the learnable-threshold comparison."""
    feasible = np.asarray(feasible, dtype=float)
    y_corr = ad.clip(tape, ad.add(tape, y, correction), feasible[0], feasible[-1])
    t = ad.sigmoid(tape, threshold_logit)
    floor = np.floor(y_corr.value)       # locally constant, zero-gradient
    frac = ad.add(tape, y_corr, -floor)
    stp = ad.sigmoid(tape, ad.scale(tape, ad.sub(tape, frac, t), config.eta))
    return ad.add(tape, stp, floor)
