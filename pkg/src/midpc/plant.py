"""Discrete-time LTI plant, the two-tank thermal benchmark, and scenario data.

The benchmark is a second-order thermal storage system: two tanks with slow
energy dissipation, two heat pumps (continuous inputs), a bank of heating
rods in the second tank (integer input, 0-3 rods active), and two known
consumption disturbances.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .errors import ConfigError, ShapeError


@dataclass
class SystemModel:
    """x+ = A x + B_u u + B_delta delta + E d."""

    A: np.ndarray
    B_u: np.ndarray
    B_delta: np.ndarray
    E: np.ndarray
    sampling_period: float

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    @property
    def n_u(self) -> int:
        return self.B_u.shape[1]

    @property
    def n_delta(self) -> int:
        return self.B_delta.shape[1]

    @property
    def n_d(self) -> int:
        return self.E.shape[1]


@dataclass
class ConstraintSpec:
    """State box, continuous-input polytope, and feasible integer sets."""

    x_min: np.ndarray
    x_max: np.ndarray
    u_min: np.ndarray            # per-input lower bounds (u >= u_min)
    u_sum_max: float             # u_1 + u_2 <= u_sum_max
    feasible_integers: list[np.ndarray]  # one sorted int array per integer input

    def __post_init__(self):
        if np.any(self.x_min >= self.x_max):
            raise ConfigError("x_min must be elementwise below x_max")
        for A_j in self.feasible_integers:
            if len(A_j) < 2 or np.any(np.diff(A_j) <= 0):
                raise ConfigError("each feasible integer set needs >= 2 "
                                  "strictly increasing entries")


@dataclass
class CostWeights:
    """Quadratic tracking/input weights and constraint penalty coefficients."""

    Q: np.ndarray
    R: np.ndarray
    rho: np.ndarray
    P: np.ndarray
    c_x: float
    c_u: float
    r: np.ndarray


@dataclass
class ScenarioSample:
    """One control-parameter draw: initial state plus a disturbance window."""

    x0: np.ndarray        # (n_x,)
    d_window: np.ndarray  # (N, n_d)

    def xi(self) -> np.ndarray:
        return np.concatenate([self.x0, self.d_window.ravel()])


@dataclass
class Dataset:
    """Stacked scenario samples (row i = sample i)."""

    x0: np.ndarray   # (n, n_x)
    d: np.ndarray    # (n, N, n_d)
    seed: int
    kind: str = "train"

    def __len__(self):
        return self.x0.shape[0]

    def __getitem__(self, i) -> ScenarioSample:
        return ScenarioSample(self.x0[i], self.d[i])

    @property
    def horizon(self) -> int:
        return self.d.shape[1]

    def xi_matrix(self) -> np.ndarray:
        """(n, n_x + N*n_d) matrix of flattened control-parameter vectors."""
        n = len(self)
        return np.concatenate([self.x0, self.d.reshape(n, -1)], axis=1)


def step(model: SystemModel, x, u, delta, d, tape: Tape | None = None):
    """One plant step. With a tape, x/u/delta may be tracked Vars.

    Accepts single vectors or batched rows; returns the same layout.
    """
    if tape is None:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        delta = np.asarray(delta, dtype=float)
        d = np.asarray(d, dtype=float)
        for name, val, want in (("x", x, model.n_x), ("u", u, model.n_u),
                                ("delta", delta, model.n_delta), ("d", d, model.n_d)):
            if val.shape[-1] != want:
                raise ShapeError(f"step: {name} has width {val.shape[-1]}, expected {want}")
        return (x @ model.A.T + u @ model.B_u.T
                + delta @ model.B_delta.T + d @ model.E.T)
    xa = ad.matmul(tape, x, model.A.T)
    ua = ad.matmul(tape, u, model.B_u.T)
    da_ = ad.matmul(tape, delta, model.B_delta.T)
    ea = ad.matmul(tape, d, model.E.T)
    return ad.add(tape, ad.add(tape, xa, ua), ad.add(tape, da_, ea))


def make_thermal_benchmark() -> tuple[SystemModel, ConstraintSpec, CostWeights]:
    """The two-tank thermal storage benchmark (300 s sampling period)."""
    alpha1, alpha2, nu = 0.9983, 0.9966, 0.001
    b1 = b2 = 0.075          # heat pump efficiencies
    b3 = 0.0825              # heating rod efficiency (1 kW per rod)
    b4 = b5 = 0.0833         # consumption coupling

    model = SystemModel(
        A=np.array([[alpha1, nu], [0.0, alpha2 - nu]]),
        B_u=np.array([[b1, 0.0], [0.0, b2]]),
        B_delta=np.array([[0.0], [b3]]),
        E=np.array([[-b4, 0.0], [0.0, -b5]]),
        sampling_period=300.0,
    )
    constraints = ConstraintSpec(
        x_min=np.array([0.0, 0.0]),
        x_max=np.array([8.4, 3.6]),
        u_min=np.array([0.0, 0.0]),
        u_sum_max=8.0,
        feasible_integers=[np.array([0, 1, 2, 3])],
    )
    weights = CostWeights(
        Q=np.diag([1.0, 1.0]),
        R=np.diag([0.5, 0.5]),
        rho=np.array([[0.1]]),
        P=np.diag([1.0, 1.0]),
        c_x=25.0,
        c_u=25.0,
        r=np.array([4.2, 1.8]),
    )
    return model, constraints, weights


def sample_initial_state(rng: np.random.Generator, constraints: ConstraintSpec,
                         n: int = 1) -> np.ndarray:
    """x0 ~ uniform over the state box; shape (n, n_x)."""
    return rng.uniform(constraints.x_min, constraints.x_max,
                       size=(n, constraints.x_min.shape[0]))


D1_BETA_A = 0.6
D1_BETA_B = 1.4
D1_SCALE = 7.0


def sample_disturbance_d1(rng: np.random.Generator, length: int) -> np.ndarray:
    """i.i.d. scaled Beta draws; support [0, 7]."""
    if length < 1:
        raise ConfigError("length must be >= 1")
    return D1_SCALE * rng.beta(D1_BETA_A, D1_BETA_B, size=length)


D2_AMP_RANGE = (1.0, 16.0)
D2_DURATION_RANGE = (2, 5)
D2_GAP_RANGE = (6, 60)


def sample_disturbance_d2(rng: np.random.Generator, length: int,
                          gap_range: tuple[int, int] = D2_GAP_RANGE) -> np.ndarray:
    """Zero baseline with rectangular peaks.

    Peak amplitude ~ U(1, 16), duration ~ U{2..5} steps; quiet gaps between
    peaks ~ U{gap_range} steps.  The signal starts at a random phase of the
    gap/peak cycle so fixed-length windows see peaks at arbitrary offsets.
    """
    if length < 1:
        raise ConfigError("length must be >= 1")
    lo, hi = gap_range
    if not (0 <= lo <= hi):
        raise ConfigError(f"invalid gap range {gap_range}")
    out = np.zeros(length)
    # random initial phase: start mid-cycle so short windows are unbiased
    pos = -int(rng.integers(0, hi + D2_DURATION_RANGE[1] + 1))
    while pos < length:
        pos += int(rng.integers(lo, hi + 1))
        dur = int(rng.integers(D2_DURATION_RANGE[0], D2_DURATION_RANGE[1] + 1))
        amp = rng.uniform(*D2_AMP_RANGE)
        if pos >= length:
            break
        out[max(pos, 0):min(pos + dur, length)] = amp
        pos += dur
    return out


def _sample_rng(master_seed: int, stream: int, index: int) -> np.random.Generator:
    """Deterministic per-sample stream; independent of worker layout."""
    return np.random.default_rng(np.random.SeedSequence((master_seed, stream, index)))


_STREAMS = {"train": 0, "dev": 1, "test": 2}


def _draw_samples(master_seed: int, kind: str, n: int, N: int,
                  constraints: ConstraintSpec,
                  gap_range: tuple[int, int] = D2_GAP_RANGE) -> Dataset:
    stream = _STREAMS[kind]
    x0 = np.empty((n, 2))
    d = np.empty((n, N, 2))
    for i in range(n):
        rng = _sample_rng(master_seed, stream, i)
        x0[i] = sample_initial_state(rng, constraints, 1)[0]
        d[i, :, 0] = sample_disturbance_d1(rng, N)
        d[i, :, 1] = sample_disturbance_d2(rng, N, gap_range)
    return Dataset(x0=x0, d=d, seed=master_seed, kind=kind)


def build_dataset(master_seed: int, n_train: int = 24000, n_dev: int = 4000,
                  N: int = 10, constraints: ConstraintSpec | None = None,
                  gap_range: tuple[int, int] = D2_GAP_RANGE) -> tuple[Dataset, Dataset]:
    """Independent train/dev scenario sets from disjoint seed streams."""
    if n_train < 1 or n_dev < 1:
        raise ConfigError("dataset sizes must be >= 1")
    if N < 1:
        raise ConfigError("horizon must be >= 1")
    if constraints is None:
        constraints = make_thermal_benchmark()[1]
    train = _draw_samples(master_seed, "train", n_train, N, constraints, gap_range)
    dev = _draw_samples(master_seed, "dev", n_dev, N, constraints, gap_range)
    return train, dev


def save_dataset(path, ds: Dataset) -> None:
    """Columnar CSV: x0 then the row-major N x n_d disturbance window."""
    N = ds.horizon
    cols = ["x0_1", "x0_2"] + [f"d{j + 1}_{k}" for k in range(N) for j in range(2)]
    header = (f"midpc-dataset v1\nkind={ds.kind} n={len(ds)} N={N} seed={ds.seed}\n"
              + ",".join(cols))
    np.savetxt(path, ds.xi_matrix(), fmt="%.17g", delimiter=",", header=header)


def load_dataset(path) -> Dataset:
    with open(path) as fh:
        first = fh.readline()
        if "midpc-dataset" not in first:
            raise ConfigError(f"{path} is not a midpc dataset file")
        meta = dict(kv.split("=") for kv in fh.readline().lstrip("# ").split())
    N, seed = int(meta["N"]), int(meta["seed"])
    raw = np.loadtxt(path, delimiter=",", skiprows=3, ndmin=2)
    if raw.shape[1] != 2 + 2 * N:
        raise ConfigError(f"dataset width {raw.shape[1]} does not match N={N}")
    return Dataset(x0=raw[:, :2], d=raw[:, 2:].reshape(len(raw), N, 2),
                   seed=seed, kind=meta.get("kind", "train"))
