"""Learning the vectorized diffusion operator from observed trajectories.

With ``x = vec(X)`` (column-major, so topic-major blocks of N entries),
the matrix dynamics ``dX/dt = -L X`` become ``dx/dt = Lam x`` with
``Lam = I_T (x) (-L)``.  The learner starts from that operator built on
the declared network and corrects it from unit-step transitions with the
rule ``Lam += gamma * eps x^T`` where ``eps = x(t+1) - exp(Lam) x(t)``.
The learned operator need not keep the Kronecker structure; the
``kron_constrained`` mode enforces it.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence, Union

import numpy as np

from .dynamics import Trajectory, matrix_exp
from .errors import NumericalError, ValidationError
from .network import SupraLaplacian

logger = logging.getLogger(__name__)

STRUCTURE_MODES = ("full", "kron_constrained")
RIDGE = 1e-9
_GAMMA_FLOOR = 1e-12


def vectorize(X: Any) -> np.ndarray:
    """Column-major stacking: ``[X[:, 0], X[:, 1], ...]``."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValidationError(f"vectorize expects an (N, T) matrix, got shape {X.shape}")
    return X.reshape(-1, order="F")


def devectorize(x: Any, n: int, t_dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.size != n * t_dim:
        raise ValidationError(f"vector of length {x.size} cannot be split as N*T = {n}*{t_dim}")
    return x.reshape((n, t_dim), order="F")


def project_kron(M: np.ndarray, n: int, t_dim: int) -> np.ndarray:
    """Nearest ``I_T (x) A`` form: ``A`` is the mean of the diagonal ``n x n`` blocks."""
    return np.kron(np.eye(t_dim), _mean_block(M, n, t_dim))


def _mean_block(M: np.ndarray, n: int, t_dim: int) -> np.ndarray:
    return sum(M[k * n:(k + 1) * n, k * n:(k + 1) * n] for k in range(t_dim)) / t_dim


@dataclass(eq=False)
class LambdaEstimate:
    matrix: np.ndarray
    n: int
    t_dim: int
    structure_mode: str = "full"

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=float)
        nt = self.n * self.t_dim
        if self.matrix.shape != (nt, nt):
            raise ValidationError(f"operator must be {nt}x{nt}, got {self.matrix.shape}")
        if self.structure_mode not in STRUCTURE_MODES:
            raise ValidationError(f"structure_mode must be one of {STRUCTURE_MODES}")
        if not np.all(np.isfinite(self.matrix)):
            raise ValidationError("operator has non-finite entries")
        if self.structure_mode == "kron_constrained":
            defect = np.max(np.abs(self.matrix - project_kron(self.matrix, self.n, self.t_dim)))
            if defect > 1e-12:
                raise ValidationError(f"operator is not of the form I_T (x) A (defect {defect:.3g})")

    @property
    def block(self) -> np.ndarray:
        """The shared ``n x n`` diagonal block (meaningful in kron_constrained mode)."""
        return _mean_block(self.matrix, self.n, self.t_dim)

    def propagator(self) -> np.ndarray:
        if self.structure_mode == "kron_constrained":
            return np.kron(np.eye(self.t_dim), matrix_exp(self.block))
        return matrix_exp(self.matrix)


def initial_lambda(
    L: Union[SupraLaplacian, np.ndarray], t_dim: int, structure_mode: str = "full"
) -> LambdaEstimate:
    """``I_T (x) (-L)`` from an explicit network."""
    A = L.matrix if isinstance(L, SupraLaplacian) else np.asarray(L, dtype=float)
    return LambdaEstimate(np.kron(np.eye(t_dim), -A), A.shape[0], t_dim, structure_mode)


@dataclass
class LearnConfig:
    """Step size and stopping rules for :func:`learn_lambda`.

    ``eta=None`` means ``1e-4 * sqrt(N * T)``.
    """

    gamma: float = 0.1
    eta: Optional[float] = None
    max_iters: int = 500
    divergence_patience: int = 5

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValidationError("gamma must be > 0")
        if self.eta is not None and not self.eta > 0:
            raise ValidationError("eta must be > 0")
        if self.max_iters < 1 or self.divergence_patience < 1:
            raise ValidationError("max_iters and divergence_patience must be >= 1")


@dataclass
class LearnResult:
    estimate: LambdaEstimate
    residual_series: list[float]
    residuals: np.ndarray
    sweeps: int
    gamma: float
    converged: bool
    halvings: int = 0
    log: list[str] = field(default_factory=list)

    @property
    def final_residual(self) -> float:
        return self.residual_series[-1] if self.residual_series else float("nan")


def _unit_pairs(traj: Trajectory) -> np.ndarray:
    if len(traj) < 2:
        raise ValidationError("learning needs at least 2 timestamps")
    if not np.allclose(np.diff(traj.timestamps), 1.0, rtol=0, atol=1e-9):
        raise ValidationError("learning needs unit-spaced timestamps")
    return np.stack([vectorize(X) for X in traj.states])


def one_step_errors(traj: Trajectory, estimate: LambdaEstimate) -> np.ndarray:
    """``||x(t+1) - exp(Lam) x(t)||_2`` for each consecutive pair."""
    x = _unit_pairs(traj)
    P = estimate.propagator()
    return np.linalg.norm(x[1:] - x[:-1] @ P.T, axis=1)


def learn_lambda(
    trajectory: Trajectory,
    lambda0: LambdaEstimate,
    config: Optional[LearnConfig] = None,
) -> LearnResult:
    """Correct ``lambda0`` from the unit-step transitions of ``trajectory``.

    Every sweep visits the pairs ``(t, t+1)`` in time order and applies
    the update after each one.  Sweeps stop once every pair of a sweep
    has residual norm below ``eta``, or after ``max_iters`` sweeps.  When
    the RMS residual norm of a sweep has grown for ``divergence_patience``
    consecutive sweeps (or the iterate overflows) ``gamma`` is halved;
    :class:`NumericalError` is raised once it falls below 1e-12.
    """
    cfg = config or LearnConfig()
    n, t_dim = lambda0.n, lambda0.t_dim
    if trajectory.n_nodes != n or trajectory.t_dim != t_dim:
        raise ValidationError(
            f"trajectory is {trajectory.n_nodes}x{trajectory.t_dim} but the operator expects {n}x{t_dim}"
        )
    x = _unit_pairs(trajectory)
    eta = cfg.eta if cfg.eta is not None else 1e-4 * math.sqrt(n * t_dim)
    kron = lambda0.structure_mode == "kron_constrained"
    gamma = cfg.gamma

    if kron:
        state = lambda0.block.copy()
        Xs = [X for X in trajectory.states]
    else:
        state = lambda0.matrix.copy()

    series: list[float] = []
    log: list[str] = []
    residuals = np.zeros((len(x) - 1, n * t_dim))
    converged = False
    rising = 0
    halvings = 0
    sweeps = 0

    def halve(reason: str) -> None:
        nonlocal gamma, halvings, rising
        gamma /= 2.0
        halvings += 1
        rising = 0
        msg = f"sweep {sweeps}: {reason}; gamma -> {gamma:.3g}"
        logger.info(msg)
        log.append(msg)
        if gamma < _GAMMA_FLOOR:
            raise NumericalError(
                f"operator learning diverged: gamma fell below {_GAMMA_FLOOR:g} "
                f"after {halvings} halvings (last RMS residual "
                f"{series[-1] if series else float('nan'):.3g})"
            )

    while sweeps < cfg.max_iters:
        sweeps += 1
        snapshot = state.copy()
        norms = np.empty(len(x) - 1)
        sweep_res = np.empty_like(residuals)
        blown = False
        for k in range(len(x) - 1):
            if not np.all(np.isfinite(state)) or np.max(np.abs(state)) > 1e6:
                blown = True
                break
            if kron:
                E = Xs[k + 1] - matrix_exp(state) @ Xs[k]
                eps = vectorize(E)
                state += (gamma / t_dim) * (E @ Xs[k].T)
            else:
                eps = x[k + 1] - matrix_exp(state) @ x[k]
                state += gamma * np.outer(eps, x[k])
            norms[k] = np.linalg.norm(eps)
            sweep_res[k] = eps
        if blown or not np.all(np.isfinite(norms)):
            state = snapshot
            halve("iterate overflowed")
            continue
        # RMS tracks the summed squared error that the update descends;
        # the plain mean of norms can rise while that objective falls
        mean = float(np.sqrt(np.mean(norms**2)))
        residuals = sweep_res
        if series and mean > series[-1]:
            rising += 1
        else:
            rising = 0
        series.append(mean)
        if np.all(norms < eta):
            converged = True
            break
        if rising >= cfg.divergence_patience:
            halve(f"RMS residual rose for {rising} sweeps")

    if kron:
        matrix = np.kron(np.eye(t_dim), state)
    else:
        matrix = state
    est = LambdaEstimate(matrix, n, t_dim, lambda0.structure_mode)
    return LearnResult(est, series, residuals, sweeps, gamma, converged, halvings, log)


def residual_covariance(residuals: Any) -> np.ndarray:
    """Sample covariance of residual vectors plus ``1e-9 * I``."""
    R = np.asarray(residuals, dtype=float)
    if R.ndim != 2 or R.shape[0] < 2:
        raise ValidationError("at least 2 residual vectors are needed")
    C = np.cov(R, rowvar=False, ddof=1)
    C = np.atleast_2d(C)
    C = 0.5 * (C + C.T)
    return C + RIDGE * np.eye(C.shape[0])


def pooled_residual_covariance(residuals: Any, n: int, t_dim: int) -> np.ndarray:
    """``I_T (x) C`` with ``C`` estimated from the per-topic pieces of every residual.

    Suited to the Kronecker-structured model, where all topics share one
    operator: each residual contributes ``T`` samples of an ``n``-vector.
    """
    R = np.asarray(residuals, dtype=float)
    if R.ndim != 2 or R.shape[1] != n * t_dim:
        raise ValidationError(f"residuals must be (k, {n * t_dim})")
    pieces = R.reshape(R.shape[0], t_dim, n).reshape(-1, n)
    return np.kron(np.eye(t_dim), residual_covariance(pieces))


# -- files -------------------------------------------------------------------


def save_lambda(
    path: Union[str, Path],
    estimate: LambdaEstimate,
    sweeps: int = 0,
    final_residual: float = float("nan"),
) -> Path:
    """Write the dense operator as CSV and a ``.json`` sidecar; returns the sidecar path."""
    path = Path(path)
    np.savetxt(path, estimate.matrix, delimiter=",", fmt="%.17g")
    side = path.with_suffix(".json")
    meta = {
        "n": estimate.n,
        "t_dim": estimate.t_dim,
        "structure_mode": estimate.structure_mode,
        "sweeps": int(sweeps),
        "final_residual": float(final_residual),
    }
    side.write_text(json.dumps(meta, indent=1) + "\n")
    return side


def load_lambda(path: Union[str, Path]) -> LambdaEstimate:
    path = Path(path)
    side = path.with_suffix(".json")
    try:
        meta = json.loads(side.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{side}: invalid JSON ({exc})") from None
    allowed = {"n", "t_dim", "structure_mode", "sweeps", "final_residual"}
    extra = set(meta) - allowed
    if extra:
        raise ValidationError(f"{side}: unknown key {sorted(extra)[0]!r}")
    try:
        M = np.loadtxt(path, delimiter=",", ndmin=2)
    except ValueError as exc:
        raise ValidationError(f"{path}: {exc}") from None
    return LambdaEstimate(M, int(meta["n"]), int(meta["t_dim"]), meta.get("structure_mode", "full"))
