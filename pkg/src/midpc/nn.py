"""Neural building blocks: dense layers, layer norm, dropout, Adam.

Parameters live in flat ``dict[str, np.ndarray]`` containers so the trainer
can move gradients between the tape and the optimizer by name.  Checkpoints
are numpy ``.npz`` archives with a JSON metadata entry (see ``save_checkpoint``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .errors import ConfigError, ShapeError

CHECKPOINT_FORMAT_VERSION = 1

ACTIVATIONS = ("tanh", "selu", "linear")


@dataclass
class DenseLayer:
    """Fully connected layer y = activation(W x + b)."""

    W: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)
    activation: str = "linear"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation '{self.activation}'")
        if self.W.ndim != 2 or self.b.ndim != 1 or self.W.shape[0] != self.b.shape[0]:
            raise ShapeError(f"dense layer: W {self.W.shape} vs b {self.b.shape}")


@dataclass
class LayerNormParams:
    gain: np.ndarray
    offset: np.ndarray
    eps: float = 1e-5


@dataclass
class AdamState:
    """First/second moment estimates plus the step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def _apply_activation(tape: Tape, z: Var, activation: str) -> Var:
    if activation == "tanh":
        return ad.tanh(tape, z)
    if activation == "selu":
        return ad.selu(tape, z)
    return z


def dense_forward(tape: Tape, layer: DenseLayer, x,
                  W: Var | None = None, b: Var | None = None,
                  norm: LayerNormParams | None = None,
                  norm_vars: tuple[Var, Var] | None = None) -> Var:
    """activation(W x + b), optionally with layer norm before the activation.

    `W`/`b` (and `norm_vars`) are tape handles for the layer's parameters
    when gradients are wanted; plain arrays from `layer` are used otherwise.
    """
    z = ad.affine(tape, x, W if W is not None else layer.W,
                  b if b is not None else layer.b)
    if norm is not None:
        gain, offset = norm_vars if norm_vars is not None else (norm.gain, norm.offset)
        z = ad.layer_norm(tape, z, gain, offset, norm.eps)
    return _apply_activation(tape, z, layer.activation)


def layer_norm(tape: Tape, params: LayerNormParams, x) -> Var:
    return ad.layer_norm(tape, x, params.gain, params.offset, params.eps)


def dropout_mask(rng: np.random.Generator, shape, p: float) -> np.ndarray:
    """Inverted-dropout mask: zeros with probability p, survivors scaled."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return np.ones(shape)
    return (rng.random(shape) >= p) / (1.0 - p)


def dropout(tape: Tape, x, p: float, mode: str, rng: np.random.Generator | None) -> Var:
    """Train mode: apply a fresh inverted-dropout mask. Eval mode: identity."""
    if mode not in ("train", "eval"):
        raise ConfigError(f"dropout mode must be 'train' or 'eval', got '{mode}'")
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    if mode == "eval" or p == 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in train mode needs an rng")
    x_shape = x.value.shape if isinstance(x, Var) else np.shape(x)
    return ad.apply_mask(tape, x, dropout_mask(rng, x_shape, p))


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float,
              context: str = "") -> None:
    """One Adam update with bias correction; mutates params in place."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(
                f"non-finite gradient for parameter '{name}'"
                + (f" ({context})" if context else ""))
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def xavier_uniform(rng: np.random.Generator, n_out: int, n_in: int) -> np.ndarray:
    """Standard pairing for tanh layers."""
    bound = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-bound, bound, size=(n_out, n_in))


def lecun_normal(rng: np.random.Generator, n_out: int, n_in: int) -> np.ndarray:
    """Standard pairing for SELU layers."""
    return rng.normal(0.0, np.sqrt(1.0 / n_in), size=(n_out, n_in))


def init_dense(rng: np.random.Generator, n_out: int, n_in: int,
               activation: str) -> tuple[np.ndarray, np.ndarray]:
    if activation == "selu":
        W = lecun_normal(rng, n_out, n_in)
    else:
        W = xavier_uniform(rng, n_out, n_in)
    return W, np.zeros(n_out)


def save_checkpoint(path, params: dict[str, np.ndarray], meta: dict) -> None:
    """Write named parameter tensors plus a JSON metadata record.

    Layout: one npz entry ``param/<name>`` per tensor and one ``meta`` entry
    holding a JSON object (strategy kind, architecture, seed, version).
    """
    meta = dict(meta)
    meta["format_version"] = CHECKPOINT_FORMAT_VERSION
    payload = {f"param/{k}": v for k, v in params.items()}
    payload["meta"] = np.array(json.dumps(meta, sort_keys=True))
    np.savez(path, **payload)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ConfigError(
                f"unsupported checkpoint format {meta.get('format_version')!r}")
        params = {k[len("param/"):]: np.array(data[k])
                  for k in data.files if k.startswith("param/")}
    return params, meta
