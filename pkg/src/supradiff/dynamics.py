"""Diffusion dynamics on a supra-Laplacian.

Closed system:  dX/dt = -L X.
Open system:    dX = -L X dt + Sigma dB  (Ornstein-Uhlenbeck).

``X`` is an ``(N, T)`` state matrix whose rows are node topic-states.
Point prediction keeps only the conditional mean ``exp(-L dt) X``; the
stochastic integral has zero mean.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Sequence, Union

import numpy as np
import scipy.linalg

from .errors import NumericalError, ValidationError
from .network import ConstantKey, MultilayerNetwork, SupraLaplacian, assemble_supra

logger = logging.getLogger(__name__)

SeedLike = Union[None, int, np.random.SeedSequence, np.random.Generator]

_GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


def _operator(L: Union[SupraLaplacian, np.ndarray]) -> np.ndarray:
    return L.matrix if isinstance(L, SupraLaplacian) else np.asarray(L, dtype=float)


def check_state(X: Any, n: Optional[int] = None, name: str = "state") -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2 or X.shape[0] == 0 or X.shape[1] == 0:
        raise ValidationError(f"{name} must be a non-empty (N, T) matrix, got shape {X.shape}")
    if n is not None and X.shape[0] != n:
        raise ValidationError(f"{name} has {X.shape[0]} rows but the operator has {n} nodes")
    if not np.all(np.isfinite(X)):
        raise ValidationError(f"{name} has non-finite entries")
    return X


def _is_symmetric(A: np.ndarray) -> bool:
    return np.array_equal(A, A.T)


def matrix_exp(A: np.ndarray, t: float = 1.0) -> np.ndarray:
    """Return ``exp(t * A)``.

    Exactly symmetric inputs go through an eigendecomposition; anything
    else uses scaling-and-squaring with a Pade core.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] == 0:
        raise ValidationError(f"matrix_exp needs a non-empty square matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)) or not np.isfinite(t):
        raise ValidationError("matrix_exp input has non-finite entries")
    if _is_symmetric(A):
        w, V = np.linalg.eigh(A)
        return (V * np.exp(t * w)) @ V.T
    return scipy.linalg.expm(t * A)


def predict_drift(L: Union[SupraLaplacian, np.ndarray], X0: Any, dt: float) -> np.ndarray:
    """Drift prediction ``exp(-L dt) X0``; ``dt == 0`` returns a copy of ``X0``."""
    A = _operator(L)
    X0 = check_state(X0, A.shape[0], "X0")
    if dt < 0:
        raise ValidationError(f"dt must be >= 0, got {dt}")
    if dt == 0:
        return X0.copy()
    return matrix_exp(-A, dt) @ X0


@dataclass
class Trajectory:
    """States ``(K, N, T)`` observed at strictly increasing timestamps."""

    timestamps: np.ndarray
    states: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        if self.states.ndim != 3:
            raise ValidationError(f"trajectory states must be (K, N, T), got {self.states.shape}")
        if self.timestamps.shape != (self.states.shape[0],):
            raise ValidationError("one timestamp per state required")
        if self.timestamps.size > 1 and np.any(np.diff(self.timestamps) <= 0):
            raise ValidationError("timestamps must be strictly increasing")
        if not np.all(np.isfinite(self.states)):
            raise ValidationError("trajectory has non-finite states")

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.states.shape[1]

    @property
    def t_dim(self) -> int:
        return self.states.shape[2]

    def slice(self, start: int, stop: Optional[int] = None) -> "Trajectory":
        return Trajectory(self.timestamps[start:stop], self.states[start:stop], dict(self.metadata))


def simulate_ou(
    L: Union[SupraLaplacian, np.ndarray],
    X0: Any,
    sigma: Any,
    dt: float,
    steps: int,
    seed: SeedLike = None,
    exact_drift: bool = False,
    t0: float = 0.0,
) -> Trajectory:
    """Simulate ``dX = -L X dt + Sigma dB`` on a fixed step.

    Parameters
    ----------
    L : SupraLaplacian or ndarray
        Drift operator, ``(N, N)``.
    X0 : array_like
        Initial state ``(N, T)``.
    sigma : array_like or float
        Per-entry noise scale, broadcastable to ``(N, T)``.
    dt : float
        Step size, > 0.
    steps : int
        Number of steps; the trajectory has ``steps + 1`` states.
    seed : int, SeedSequence or Generator
        Source of the Gaussian increments.
    exact_drift : bool
        Propagate the drift with ``exp(-L dt)`` instead of the Euler step
        ``I - dt L``.

    Returns
    -------
    Trajectory
        ``metadata["warnings"]`` lists stability problems of the Euler step.
    """
    A = _operator(L)
    n = A.shape[0]
    X = check_state(X0, n, "X0")
    if not dt > 0:
        raise ValidationError(f"dt must be > 0, got {dt}")
    if int(steps) != steps or steps < 1:
        raise ValidationError(f"steps must be a positive integer, got {steps}")
    sig = np.broadcast_to(np.asarray(sigma, dtype=float), X.shape)
    if not np.all(np.isfinite(sig)) or np.any(sig < 0):
        raise ValidationError("noise scales must be finite and >= 0")
    rng = np.random.default_rng(seed)

    warnings: list[str] = []
    if exact_drift:
        P = matrix_exp(-A, dt)
    else:
        P = np.eye(n) - dt * A
        if _is_symmetric(A):
            radius = float(np.max(np.abs(np.linalg.eigvalsh(P))))
            if radius > 1.0 + 1e-12:
                msg = f"Euler step amplifies: spectral radius of I - dt*L is {radius:.6g} > 1"
                logger.warning(msg)
                warnings.append(msg)

    scale = np.sqrt(dt) * sig
    out = np.empty((steps + 1,) + X.shape)
    out[0] = X
    for k in range(steps):
        X = P @ X + scale * rng.standard_normal(X.shape)
        out[k + 1] = X
    times = t0 + dt * np.arange(steps + 1)
    meta = {"dt": dt, "steps": steps, "exact_drift": exact_drift, "warnings": warnings}
    return Trajectory(times, out, meta)


def to_simplex(X: np.ndarray) -> np.ndarray:
    """Clamp negatives to zero and renormalize rows; for reporting only."""
    Y = np.clip(np.asarray(X, dtype=float), 0.0, None)
    s = Y.sum(axis=-1, keepdims=True)
    return np.divide(Y, s, out=np.full_like(Y, 1.0 / Y.shape[-1]), where=s > 0)


# -- fitting ---------------------------------------------------------------


@dataclass
class FitResult:
    constants: dict
    sigma: np.ndarray
    residual: float
    initial_residual: float
    improved: bool
    rounds: int

    def network(self, base: MultilayerNetwork) -> MultilayerNetwork:
        return base.with_constants(self.constants)


def _golden_section(f, a: float, b: float, xtol: float):
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    while b - a > xtol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = f(d)
    return (c, fc) if fc <= fd else (d, fd)


def fit_diffusion_constants(
    network: MultilayerNetwork,
    X_t0: Any,
    X_t1: Any,
    dt: float,
    unknown: Optional[Iterable[ConstantKey]] = None,
    d_max: float = 10.0,
    rel_tol: float = 1e-6,
    xtol: float = 1e-12,
    max_rounds: int = 200,
) -> FitResult:
    """Fit diffusion constants by minimizing ``||X_t1 - exp(-L(D) dt) X_t0||_F``.

    Each unknown is searched on ``[0, d_max]`` by golden section, one
    coordinate at a time, and the sweep over coordinates is repeated
    until the relative improvement drops below ``rel_tol``.  The noise
    scale is then read off the final residual.

    ``unknown`` holds keys as in :meth:`MultilayerNetwork.constants`
    (layer id, or ``(from, to)`` for a stored coupling); by default every
    constant is fitted.  The network's current constants are the initial
    guess.  When the search cannot beat the initial guess, the initial
    constants are returned with ``improved=False``.
    """
    if not dt > 0:
        raise ValidationError(f"dt must be > 0, got {dt}")
    n = network.n_total
    X0 = check_state(X_t0, n, "X_t0")
    X1 = check_state(X_t1, n, "X_t1")
    if X0.shape != X1.shape:
        raise ValidationError(f"X_t0 {X0.shape} and X_t1 {X1.shape} differ in shape")
    start = network.constants()
    keys = list(start) if unknown is None else list(unknown)
    if not keys:
        raise ValidationError("no unknown diffusion constants to fit")
    for k in keys:
        if k not in start:
            raise ValidationError(f"unknown diffusion constant key {k!r}")
    if not d_max > 0:
        raise ValidationError("d_max must be > 0")

    # L is linear in the constants: L(D) = L_fixed + sum_k D_k B_k
    zero = {k: 0.0 for k in start}
    basis = [assemble_supra(network.with_constants({**zero, k: 1.0})).matrix for k in keys]
    fixed = assemble_supra(network.with_constants({k: 0.0 for k in keys})).matrix

    def residual(d: Sequence[float]) -> float:
        Lm = fixed + sum(di * B for di, B in zip(d, basis))
        return float(np.linalg.norm(X1 - matrix_exp(-Lm, dt) @ X0))

    d0 = np.array([min(max(start[k], 0.0), d_max) for k in keys])
    g0 = residual(d0)
    d = d0.copy()
    g = g0
    rounds = 0
    while rounds < max_rounds and g > 0:
        rounds += 1
        g_prev = g
        for i in range(len(keys)):
            trial = d.copy()

            def along(v: float) -> float:
                trial[i] = v
                return residual(trial)

            v, gv = _golden_section(along, 0.0, d_max, xtol)
            if gv < g:
                d[i], g = v, gv
        if g_prev - g <= rel_tol * g_prev:
            break

    improved = g < g0
    if not improved:
        d, g = d0, g0
        logger.info("diffusion constant search did not improve on the initial guess")
    Lm = fixed + sum(di * B for di, B in zip(d, basis))
    if not np.all(np.isfinite(Lm)):
        raise NumericalError("fitted operator is not finite")
    sigma = np.abs(X1 - matrix_exp(-Lm, dt) @ X0) / np.sqrt(dt)
    return FitResult(
        constants={k: float(v) for k, v in zip(keys, d)},
        sigma=sigma,
        residual=g,
        initial_residual=g0,
        improved=bool(improved),
        rounds=rounds,
    )


# -- state series CSV --------------------------------------------------------


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_states(path: Union[str, Path], traj: Trajectory) -> None:
    """Write ``t,node,topic_1,...,topic_T`` rows; nodes are 1-based global indices."""
    T = traj.t_dim
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "node"] + [f"topic_{j + 1}" for j in range(T)])
        for t, X in zip(traj.timestamps, traj.states):
            ts = repr(float(t))
            for i, row in enumerate(X):
                w.writerow([ts, i + 1] + [_fmt(v) for v in row])


def read_states(path: Union[str, Path]) -> Trajectory:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValidationError(f"{path}: empty state file")
    header = rows[0]
    if len(header) < 3 or header[:2] != ["t", "node"]:
        raise ValidationError(f"{path}: header must start with t,node,topic_1")
    T = len(header) - 2
    if header[2:] != [f"topic_{j + 1}" for j in range(T)]:
        raise ValidationError(f"{path}: topic columns must be topic_1..topic_{T}")
    times: list[float] = []
    blocks: list[list[list[float]]] = []
    for ln, row in enumerate(rows[1:], start=2):
        if len(row) != T + 2:
            raise ValidationError(f"{path}:{ln}: expected {T + 2} fields")
        try:
            t = float(row[0])
            node = int(row[1])
            vals = [float(v) for v in row[2:]]
        except ValueError:
            raise ValidationError(f"{path}:{ln}: malformed number") from None
        if not times or t != times[-1]:
            times.append(t)
            blocks.append([])
        if node != len(blocks[-1]) + 1:
            raise ValidationError(f"{path}:{ln}: nodes must be listed 1..N in order")
        blocks[-1].append(vals)
    if not blocks:
        raise ValidationError(f"{path}: no data rows")
    n = len(blocks[0])
    if any(len(b) != n for b in blocks):
        raise ValidationError(f"{path}: every timestamp must list the same nodes")
    return Trajectory(np.array(times), np.array(blocks))
