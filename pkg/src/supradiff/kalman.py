"""Discrete Kalman predictor over vectorized node states.

State equation (unit step)::

    x(t+1) = F x(t) + w(t),      F = I + Lam,   E[w w^T] = Q
    y(t)   = S x(t) + v(t),                     E[v v^T] = R

``S`` selects every topic coordinate of the observed nodes, i.e. the
non-zero rows of ``I_T (x) H`` with ``H`` the diagonal node indicator.
Working with ``S`` instead of the full indicator keeps the innovation
covariance ``R + S P S^T`` invertible.  The covariance recursion
``P <- F P F^T + Q`` is the discrete counterpart of the Riccati equation.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence, Union

import numpy as np

from .errors import NumericalError, ValidationError
from .laplearn import LambdaEstimate

COND_LIMIT = 1e12


@dataclass(frozen=True, eq=False)
class ObservationMask:
    """Which nodes are observed; observing a node observes all its topics."""

    n: int
    t_dim: int
    observed: tuple[int, ...] = ()

    def __post_init__(self):
        obs = tuple(sorted(int(i) for i in self.observed))
        if len(set(obs)) != len(obs):
            raise ValidationError("observed nodes must be unique")
        if obs and (obs[0] < 0 or obs[-1] >= self.n):
            raise ValidationError(f"observed node out of range 0..{self.n - 1}")
        object.__setattr__(self, "observed", obs)

    @property
    def H(self) -> np.ndarray:
        h = np.zeros(self.n)
        h[list(self.observed)] = 1.0
        return np.diag(h)

    @cached_property
    def script_H(self) -> np.ndarray:
        return np.kron(np.eye(self.t_dim), self.H)

    @cached_property
    def coords(self) -> np.ndarray:
        """Indices of observed coordinates in the vectorized state."""
        obs = np.asarray(self.observed, dtype=int)
        return (np.arange(self.t_dim)[:, None] * self.n + obs[None, :]).ravel()

    @property
    def m(self) -> int:
        return len(self.observed) * self.t_dim

    @property
    def selector(self) -> np.ndarray:
        return np.eye(self.n * self.t_dim)[self.coords]

    def unobserved_nodes(self) -> np.ndarray:
        keep = np.ones(self.n, dtype=bool)
        keep[list(self.observed)] = False
        return np.flatnonzero(keep)

    def observe(self, x: Any) -> np.ndarray:
        """Observed coordinates of a vectorized state (or a stack of them)."""
        return np.asarray(x, dtype=float)[..., self.coords]


def _check_sym(A: np.ndarray, name: str, tol: float = 1e-12) -> None:
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValidationError(f"{name} must be square, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValidationError(f"{name} has non-finite entries")
    if A.size and np.max(np.abs(A - A.T)) > tol:
        raise ValidationError(f"{name} is not symmetric")


@dataclass(frozen=True, eq=False)
class NoiseCov:
    """Process noise ``Q`` (NT x NT) and observation noise ``R`` (m x m)."""

    Q: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        R = np.asarray(self.R, dtype=float)
        R = R.reshape(0, 0) if R.size == 0 else np.atleast_2d(R)
        _check_sym(Q, "Q")
        _check_sym(R, "R")
        if np.linalg.eigvalsh(Q).min() < -1e-9:
            raise ValidationError("Q is not positive semidefinite")
        if R.size and np.linalg.eigvalsh(R).min() < 1e-12:
            raise ValidationError("R is not positive definite")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)

    @classmethod
    def with_isotropic_r(cls, Q: Any, mask: ObservationMask, r: float = 1e-6) -> "NoiseCov":
        return cls(Q, r * np.eye(mask.m))


@dataclass(eq=False)
class KalmanState:
    x: np.ndarray
    P: np.ndarray
    F: np.ndarray

    def check(self) -> None:
        if np.max(np.abs(self.P - self.P.T)) > 1e-10:
            raise NumericalError("covariance lost symmetry")
        if np.linalg.eigvalsh(self.P).min() < -1e-8:
            raise NumericalError("covariance lost positive semidefiniteness")


def make_transition(lambda_hat: Union[LambdaEstimate, np.ndarray]) -> np.ndarray:
    """``F = I + Lam``, the unit-step discretization."""
    M = lambda_hat.matrix if isinstance(lambda_hat, LambdaEstimate) else np.asarray(lambda_hat, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValidationError(f"operator must be square, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise ValidationError("operator has non-finite entries")
    return np.eye(M.shape[0]) + M


def kalman_update(
    state: KalmanState, y: Any, mask: ObservationMask, noise: NoiseCov
) -> KalmanState:
    """Measurement update on the observed coordinates."""
    y = np.asarray(y, dtype=float).ravel()
    if y.size != mask.m:
        raise ValidationError(f"observation has length {y.size}, mask expects {mask.m}")
    if noise.R.shape != (mask.m, mask.m):
        raise ValidationError(f"R must be {mask.m}x{mask.m}, got {noise.R.shape}")
    if mask.m == 0:
        return KalmanState(state.x.copy(), state.P.copy(), state.F)
    idx = mask.coords
    SP = state.P[idx, :]
    Re = noise.R + SP[:, idx]
    Re = 0.5 * (Re + Re.T)
    cond = np.linalg.cond(Re)
    if not cond < COND_LIMIT:
        raise NumericalError(
            f"innovation covariance is numerically singular (condition {cond:.3g}); "
            "use a larger observation noise R"
        )
    gain = np.linalg.solve(Re, SP).T
    x = state.x + gain @ (y - state.x[idx])
    P = state.P - gain @ SP
    P = 0.5 * (P + P.T)
    return KalmanState(x, P, state.F)


def kalman_predict(state: KalmanState, noise: NoiseCov) -> KalmanState:
    F = state.F
    x = F @ state.x
    P = F @ state.P @ F.T + noise.Q
    P = 0.5 * (P + P.T)
    return KalmanState(x, P, F)


@dataclass
class FilterResult:
    """Per-step filter output, one row per observation time.

    ``x_post[k]`` is the estimate given observations up to step ``k``;
    ``x_pred[k]`` the prediction for step ``k + 1``.
    """

    x_post: np.ndarray
    x_pred: np.ndarray
    P_post: Optional[np.ndarray]
    P_pred: Optional[np.ndarray]
    innovations: np.ndarray


def run_filter(
    lambda_hat: Union[LambdaEstimate, np.ndarray],
    x0: Any,
    P0: Any,
    mask: ObservationMask,
    noise: NoiseCov,
    observations: Any,
    keep_covariance: bool = True,
) -> FilterResult:
    """Alternate update and predict over a unit-step observation series.

    Parameters
    ----------
    lambda_hat : LambdaEstimate or ndarray
        Learned operator; the transition is ``I + lambda_hat``.
    x0, P0 : array_like
        Prior mean and covariance for the first observation time.
        ``P0=None`` means the identity.
    observations : array_like
        ``(K, m)`` observed coordinates, ordered as ``mask.coords``.
    """
    F = make_transition(lambda_hat)
    nt = F.shape[0]
    x0 = np.asarray(x0, dtype=float).ravel()
    if x0.size != nt:
        raise ValidationError(f"x0 has length {x0.size}, expected {nt}")
    P0 = np.eye(nt) if P0 is None else np.asarray(P0, dtype=float)
    _check_sym(P0, "P0", tol=1e-10)
    if mask.n * mask.t_dim != nt:
        raise ValidationError("mask dimensions do not match the operator")
    Y = np.asarray(observations, dtype=float)
    if Y.ndim == 1:
        Y = Y.reshape(-1, mask.m) if mask.m else Y.reshape(-1, 0)
    if Y.ndim != 2 or Y.shape[1] != mask.m:
        raise ValidationError(f"observations must be (K, {mask.m}), got shape {Y.shape}")
    K = Y.shape[0]

    x_post = np.empty((K, nt))
    x_pred = np.empty((K, nt))
    P_post = np.empty((K, nt, nt)) if keep_covariance else None
    P_pred = np.empty((K, nt, nt)) if keep_covariance else None
    innov = np.empty((K, mask.m))
    state = KalmanState(x0.copy(), P0.copy(), F)
    for k in range(K):
        innov[k] = Y[k] - mask.observe(state.x)
        state = kalman_update(state, Y[k], mask, noise)
        x_post[k] = state.x
        if keep_covariance:
            P_post[k] = state.P
        state = kalman_predict(state, noise)
        x_pred[k] = state.x
        if keep_covariance:
            P_pred[k] = state.P
    return FilterResult(x_post, x_pred, P_post, P_pred, innov)


# -- files -------------------------------------------------------------------


def load_mask(path: Union[str, Path], n: int, t_dim: int) -> ObservationMask:
    """Read a JSON array of 1-based observed node indices."""
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, list):
        raise ValidationError(f"{path}: expected a JSON array of node indices")
    for k, v in enumerate(data):
        if isinstance(v, bool) or not isinstance(v, int) or not 1 <= v <= n:
            raise ValidationError(f"{path}: $[{k}] must be an integer in 1..{n}")
    return ObservationMask(n, t_dim, tuple(v - 1 for v in data))


def save_mask(path: Union[str, Path], mask: ObservationMask) -> None:
    Path(path).write_text(json.dumps([i + 1 for i in mask.observed]) + "\n")


def write_filter_csv(
    path: Union[str, Path], result: FilterResult, n: int, t_dim: int, timestamps: Sequence[float]
) -> None:
    """Rows ``t,node,topic,xhat_post,xhat_pred_next`` with 1-based node and topic."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "node", "topic", "xhat_post", "xhat_pred_next"])
        for t, post, pred in zip(timestamps, result.x_post, result.x_pred):
            ts = repr(float(t))
            for i in range(n):
                for j in range(t_dim):
                    c = j * n + i
                    w.writerow([ts, i + 1, j + 1, format(post[c], ".17g"), format(pred[c], ".17g")])
