"""Three-component neural control policy.

A shared lifting layer projects the control parameters (initial state plus
disturbance preview) to a latent vector; a tanh head emits the continuous
inputs and a SELU head emits the relaxed integer quantities, which one of the
rounding strategies turns into exact integers.  The learnable-threshold
variant uses a second network that sees the first network's relaxed outputs
and emits a correction plus threshold logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn, rounding
from .autodiff import Tape, Var
from .errors import ConfigError, ShapeError

STRATEGIES = ("sigmoid_ste", "softmax_ste", "learnable_threshold")


@dataclass
class PolicyArchitecture:
    n_xi: int
    strategy: str
    n_u: int = 2
    feasible_integers: list[np.ndarray] = field(
        default_factory=lambda: [np.array([0, 1, 2, 3])])
    width: int = 120
    dropout_p: float = 0.1
    ln_affine: bool = True   # layer norm with trainable gain/offset
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy '{self.strategy}'")
        if self.n_xi < 1 or self.width < 1:
            raise ConfigError("n_xi and width must be positive")

    @property
    def n_delta(self) -> int:
        return len(self.feasible_integers)

    @property
    def int_head_width(self) -> int:
        if self.strategy == "softmax_ste":
            return int(sum(len(a) for a in self.feasible_integers))
        return self.n_delta


def make_architecture(strategy: str, n_xi: int, width: int | None = None,
                      **kwargs) -> PolicyArchitecture:
    """Architecture with the benchmark defaults (width 120, or 95 for the
    learnable-threshold variant)."""
    if width is None:
        width = 95 if strategy == "learnable_threshold" else 120
    return PolicyArchitecture(n_xi=n_xi, strategy=strategy, width=width, **kwargs)


@dataclass
class PolicyOutput:
    u: Var
    delta: Var
    aux: dict


def _layer_names(arch: PolicyArchitecture) -> list[tuple[str, int, int, str, bool]]:
    """(name, n_out, n_in, activation, has_layer_norm) for one network."""
    w, nxi = arch.width, arch.n_xi
    return [
        ("lift", w, nxi, "tanh", True),
        ("u1", w, w, "tanh", True),
        ("u2", w, w, "tanh", True),
        ("u_out", arch.n_u, w, "linear", False),
        ("int1", w, w, "selu", True),
        ("int2", w, w, "selu", True),
        ("int_out", arch.int_head_width, w, "linear", False),
    ]


def _phi2_layer_names(arch: PolicyArchitecture) -> list[tuple[str, int, int, str, bool]]:
    """Correction network: sees (xi, relaxed u, relaxed integer values)."""
    w = arch.width
    n_in = arch.n_xi + arch.n_u + arch.n_delta
    return [
        ("phi2.lift", w, n_in, "tanh", True),
        ("phi2.q1", w, w, "selu", True),
        ("phi2.q2", w, w, "selu", True),
        ("phi2.q_out", arch.n_delta, w, "linear", False),
        ("phi2.t1", w, w, "selu", True),
        ("phi2.t2", w, w, "selu", True),
        ("phi2.t_out", arch.n_delta, w, "linear", False),
    ]


def _all_layer_names(arch: PolicyArchitecture) -> list[tuple[str, int, int, str, bool]]:
    layers = _layer_names(arch)
    if arch.strategy == "learnable_threshold":
        layers = [(f"phi1.{n}", o, i, a, ln) for n, o, i, a, ln in layers]
        layers += _phi2_layer_names(arch)
    return layers


def init_policy(arch: PolicyArchitecture, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Xavier-uniform for tanh layers, LeCun-normal for SELU, zero biases."""
    params: dict[str, np.ndarray] = {}
    for name, n_out, n_in, activation, has_ln in _all_layer_names(arch):
        W, b = nn.init_dense(rng, n_out, n_in, activation)
        params[f"{name}.W"] = W
        params[f"{name}.b"] = b
        if has_ln and arch.ln_affine:
            params[f"{name}.ln_gain"] = np.ones(n_out)
            params[f"{name}.ln_offset"] = np.zeros(n_out)
    return params


def count_parameters(arch: PolicyArchitecture) -> tuple[int, dict[str, int]]:
    """Exact trainable-scalar count with a per-layer breakdown."""
    breakdown: dict[str, int] = {}
    for name, n_out, n_in, _act, has_ln in _all_layer_names(arch):
        count = n_out * n_in + n_out
        if has_ln and arch.ln_affine:
            count += 2 * n_out
        breakdown[name] = count
    return sum(breakdown.values()), breakdown


def register_params(tape: Tape, params: dict[str, np.ndarray]) -> dict[str, Var]:
    return {name: tape.leaf(value) for name, value in params.items()}


def _dense_block(tape: Tape, pv: dict, arch: PolicyArchitecture, name: str,
                 x, activation: str, has_ln: bool) -> Var:
    z = ad.affine(tape, x, pv[f"{name}.W"], pv[f"{name}.b"])
    if has_ln:
        if arch.ln_affine:
            gain, offset = pv[f"{name}.ln_gain"], pv[f"{name}.ln_offset"]
        else:
            width = (pv[f"{name}.W"].value if isinstance(pv[f"{name}.W"], Var)
                     else pv[f"{name}.W"]).shape[0]
            gain, offset = np.ones(width), np.zeros(width)
        z = ad.layer_norm(tape, z, gain, offset, arch.ln_eps)
    if activation == "tanh":
        return ad.tanh(tape, z)
    if activation == "selu":
        return ad.selu(tape, z)
    return z


def _trunk_forward(tape: Tape, pv: dict, arch: PolicyArchitecture, xi, mode: str,
                   rng, prefix: str = "") -> tuple[Var, Var]:
    """Shared lift plus both heads; returns (relaxed u, relaxed integer out)."""
    p = (lambda n: f"{prefix}{n}")
    h = _dense_block(tape, pv, arch, p("lift"), xi, "tanh", True)
    a = _dense_block(tape, pv, arch, p("u1"), h, "tanh", True)
    a = nn.dropout(tape, a, arch.dropout_p, mode, rng)
    a = _dense_block(tape, pv, arch, p("u2"), a, "tanh", True)
    y_u = _dense_block(tape, pv, arch, p("u_out"), a, "linear", False)
    b = _dense_block(tape, pv, arch, p("int1"), h, "selu", True)
    b = _dense_block(tape, pv, arch, p("int2"), b, "selu", True)
    y_int = _dense_block(tape, pv, arch, p("int_out"), b, "linear", False)
    return y_u, y_int


def _slice_cols(tape: Tape, x: Var, lo: int, hi: int) -> Var:
    """Column slice as a recorded op (gradient scatters back)."""
    value = x.value[..., lo:hi]
    if x.tape is None or x.nid < 0:
        return Var(None, -1, value)

    def backward(g):
        full = np.zeros_like(x.value)
        full[..., lo:hi] = g
        return [full]

    return tape.record("slice", (x,), value, backward)


def _check_xi(arch: PolicyArchitecture, xi) -> np.ndarray:
    xi_val = xi.value if isinstance(xi, Var) else np.asarray(xi, dtype=float)
    if xi_val.shape[-1] != arch.n_xi:
        raise ShapeError(f"policy input width {xi_val.shape[-1]}, expected {arch.n_xi}")
    return xi_val


def _keepdim_last(tape: Tape, v: Var, want_ndim: int) -> Var:
    """Re-append the feature axis a dot product contracted away."""
    if v.value.ndim >= want_ndim:
        return v
    value = v.value[..., None]
    if v.tape is None or v.nid < 0:
        return Var(None, -1, value)
    return tape.record("keepdim", (v,), value, lambda g: [g[..., 0]])


def _apply_strategy(tape: Tape, arch: PolicyArchitecture, strategy_cfg, y_int: Var,
                    mode: str, rng, surrogate_forward: bool) -> tuple[Var, dict]:
    """Map the relaxed integer head output to integer decisions per input."""
    aux: dict = {"y_int": y_int}
    deltas = []
    col = 0
    for j, feasible in enumerate(arch.feasible_integers):
        if arch.strategy == "sigmoid_ste":
            y_j = _slice_cols(tape, y_int, col, col + 1)
            col += 1
            if surrogate_forward:
                d_j = rounding.smooth_staircase(tape, y_j, feasible, strategy_cfg)
            else:
                d_j, y_clip = rounding.sigmoid_ste(tape, y_j, feasible, strategy_cfg)
                aux[f"y_clip_{j}"] = y_clip
        else:  # softmax_ste
            L = len(feasible)
            logits = _slice_cols(tape, y_int, col, col + L)
            col += L
            if surrogate_forward:
                probs = ad.softmax(tape, ad.scale(tape, logits, 1.0 / strategy_cfg.tau))
                d_j = ad.matmul(tape, probs, np.asarray(feasible, dtype=float))
            else:
                d_j, soft, scores = rounding.gumbel_softmax_ste(
                    tape, logits, feasible, strategy_cfg, rng, mode)
                aux[f"scores_{j}"] = scores
                aux[f"soft_{j}"] = soft
        deltas.append(_keepdim_last(tape, d_j, y_int.value.ndim))
    delta = deltas[0]
    for d_j in deltas[1:]:
        delta = _concat_cols(tape, delta, d_j)
    return delta, aux


def _concat_cols(tape: Tape, a: Var, b: Var) -> Var:
    value = np.concatenate([a.value, b.value], axis=-1)
    na = a.value.shape[-1]

    def backward(g):
        return [g[..., :na], g[..., na:]]

    return tape.record("concat", (a, b), value, backward)


def policy_forward(pv: dict, arch: PolicyArchitecture, strategy_cfg, xi,
                   tape: Tape, mode: str, rng: np.random.Generator | None = None,
                   surrogate_forward: bool = False) -> PolicyOutput:
    """Evaluate the policy on a batch (or single row) of control parameters.

    ``pv`` maps parameter names to tape Vars (training) or plain arrays
    (evaluation).  Dropout and Gumbel noise are active only in train mode.
    """
    if arch.strategy == "learnable_threshold":
        raise ConfigError("use policy_forward_lt for the learnable-threshold strategy")
    _check_xi(arch, xi)
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got '{mode}'")
    y_u, y_int = _trunk_forward(tape, pv, arch, xi, mode, rng)
    delta, aux = _apply_strategy(tape, arch, strategy_cfg, y_int, mode, rng,
                                 surrogate_forward)
    return PolicyOutput(u=y_u, delta=delta, aux=aux)


def policy_forward_lt(pv: dict, arch: PolicyArchitecture,
                      strategy_cfg: rounding.LearnableThresholdConfig, xi,
                      tape: Tape, mode: str, rng: np.random.Generator | None = None,
                      surrogate_forward: bool = False) -> PolicyOutput:
    """Learnable-threshold policy: relaxed solve, then correct and round."""
    if arch.strategy != "learnable_threshold":
        raise ConfigError("policy_forward_lt needs a learnable_threshold architecture")
    _check_xi(arch, xi)
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got '{mode}'")
    y_u, y_int = _trunk_forward(tape, pv, arch, xi, mode, rng, prefix="phi1.")

    xi_var = xi if isinstance(xi, Var) else Var(None, -1, np.asarray(xi, dtype=float))
    phi2_in = _concat_cols(tape, _concat_cols(tape, xi_var, y_u), y_int)
    h2 = _dense_block(tape, pv, arch, "phi2.lift", phi2_in, "tanh", True)
    q = _dense_block(tape, pv, arch, "phi2.q1", h2, "selu", True)
    q = _dense_block(tape, pv, arch, "phi2.q2", q, "selu", True)
    q = _dense_block(tape, pv, arch, "phi2.q_out", q, "linear", False)
    t = _dense_block(tape, pv, arch, "phi2.t1", h2, "selu", True)
    t = _dense_block(tape, pv, arch, "phi2.t2", t, "selu", True)
    t_logit = _dense_block(tape, pv, arch, "phi2.t_out", t, "linear", False)

    aux: dict = {"y_int": y_int, "correction": q, "t_logit": t_logit}
    deltas = []
    for j, feasible in enumerate(arch.feasible_integers):
        y_j = _slice_cols(tape, y_int, j, j + 1)
        q_j = _slice_cols(tape, q, j, j + 1)
        tl_j = _slice_cols(tape, t_logit, j, j + 1)
        if surrogate_forward:
            d_j = rounding.smooth_threshold_round(tape, y_j, q_j, tl_j, feasible,
                                                  strategy_cfg)
        else:
            d_j, y_corr, thr = rounding.learnable_threshold(
                tape, y_j, q_j, tl_j, feasible, strategy_cfg)
            aux[f"y_corr_{j}"] = y_corr
            aux[f"threshold_{j}"] = thr
        deltas.append(d_j)
    delta = deltas[0]
    for d_j in deltas[1:]:
        delta = _concat_cols(tape, delta, d_j)
    return PolicyOutput(u=y_u, delta=delta, aux=aux)


def forward(pv: dict, arch: PolicyArchitecture, strategy_cfg, xi, tape: Tape,
            mode: str, rng=None, surrogate_forward: bool = False) -> PolicyOutput:
    """Strategy-dispatching wrapper around the two forward variants."""
    if arch.strategy == "learnable_threshold":
        return policy_forward_lt(pv, arch, strategy_cfg, xi, tape, mode, rng,
                                 surrogate_forward)
    return policy_forward(pv, arch, strategy_cfg, xi, tape, mode, rng,
                          surrogate_forward)


def eval_policy(params: dict[str, np.ndarray], arch: PolicyArchitecture,
                strategy_cfg, xi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic evaluation-mode forward returning plain arrays."""
    tape = Tape(grad_enabled=False)
    out = forward(params, arch, strategy_cfg, xi, tape, "eval")
    return out.u.value, out.delta.value
