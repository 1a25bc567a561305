"""Error metric, synthetic scenarios and the predictor comparison.

The comparison trains on the first part of a trajectory and predicts the
remainder from the last training state with four predictors:

``fixed_laplacian``
    drift on the declared network, ``exp(-L dt) X``.
``learned_lambda``
    open-loop iteration of ``F = I + Lam`` with ``Lam`` learned from the
    training transitions.
``kalman``
    the same ``F`` with measurement updates on a random subset of nodes.
``persistence``
    the last training state, carried forward unchanged.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional, Sequence, Union

import numpy as np
from scipy.sparse.csgraph import connected_components

from .dynamics import Trajectory, predict_drift, read_states, simulate_ou
from .errors import ValidationError
from .kalman import NoiseCov, ObservationMask, make_transition, run_filter
from .laplearn import (
    STRUCTURE_MODES,
    LearnConfig,
    initial_lambda,
    learn_lambda,
    load_lambda,
    pooled_residual_covariance,
    residual_covariance,
    vectorize,
)
from .network import (
    InterCoupling,
    LayerSpec,
    MultilayerNetwork,
    assemble_supra,
    load_network,
)

logger = logging.getLogger(__name__)

MODEL_PREDICTORS = ("fixed_laplacian", "learned_lambda", "kalman")
BASELINE = "persistence"


def normalized_frobenius_error(X_hat: Any, X_true: Any) -> float:
    """``||X_hat - X_true||_F / ||X_true||_F``."""
    X_hat = np.asarray(X_hat, dtype=float)
    X_true = np.asarray(X_true, dtype=float)
    if X_hat.shape != X_true.shape:
        raise ValidationError(f"shape mismatch: {X_hat.shape} vs {X_true.shape}")
    denom = np.linalg.norm(X_true)
    if denom == 0:
        raise ValidationError("ground truth has zero Frobenius norm")
    return float(np.linalg.norm(X_hat - X_true) / denom)


# -- synthetic data ----------------------------------------------------------


@dataclass
class SyntheticParams:
    """Random multiplex scenario.

    Every pair of layers is coupled.  ``identity`` links node ``i`` of one
    layer to node ``i`` of the other (up to the smaller layer size);
    ``random`` draws each cross-layer link with ``coupling_prob``.
    """

    n_layers: int = 2
    nodes_per_layer: Union[int, Sequence[int]] = 20
    edge_prob: float = 0.2
    coupling: str = "identity"
    coupling_prob: float = 0.1
    intra_diffusion: Union[float, Sequence[float]] = 0.05
    inter_diffusion: float = 0.05
    sigma_scale: float = 5e-4
    topics: int = 4
    steps: int = 60
    dt: float = 1.0
    exact_drift: bool = True

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValidationError("n_layers must be >= 1")
        sizes = self.sizes
        if any(int(s) != s or s < 1 for s in sizes):
            raise ValidationError("node counts must be positive integers")
        for name in ("edge_prob", "coupling_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1]")
        if self.coupling not in ("identity", "random"):
            raise ValidationError("coupling must be 'identity' or 'random'")
        if any(d < 0 for d in self.intra) or self.inter_diffusion < 0:
            raise ValidationError("diffusion constants must be >= 0")
        if self.sigma_scale < 0:
            raise ValidationError("sigma_scale must be >= 0")
        if self.topics < 1 or self.steps < 1 or not self.dt > 0:
            raise ValidationError("topics, steps and dt must be positive")

    @property
    def sizes(self) -> tuple[int, ...]:
        if isinstance(self.nodes_per_layer, (int, np.integer)):
            return (int(self.nodes_per_layer),) * self.n_layers
        sizes = tuple(self.nodes_per_layer)
        if len(sizes) != self.n_layers:
            raise ValidationError("nodes_per_layer needs one entry per layer")
        return sizes

    @property
    def intra(self) -> tuple[float, ...]:
        if isinstance(self.intra_diffusion, (int, float)):
            return (float(self.intra_diffusion),) * self.n_layers
        vals = tuple(float(v) for v in self.intra_diffusion)
        if len(vals) != self.n_layers:
            raise ValidationError("intra_diffusion needs one entry per layer")
        return vals


def _erdos_renyi(rng: np.random.Generator, n: int, p: float) -> np.ndarray:
    upper = np.triu(rng.random((n, n)) < p, 1).astype(float)
    return upper + upper.T


def _sample_network(params: SyntheticParams, rng: np.random.Generator) -> MultilayerNetwork:
    sizes = params.sizes
    layers = tuple(
        LayerSpec(a + 1, _erdos_renyi(rng, n, params.edge_prob), d)
        for a, (n, d) in enumerate(zip(sizes, params.intra))
    )
    couplings = []
    for a in range(params.n_layers):
        for b in range(a + 1, params.n_layers):
            if params.coupling == "identity":
                W = np.eye(sizes[a], sizes[b])
            else:
                W = (rng.random((sizes[a], sizes[b])) < params.coupling_prob).astype(float)
            couplings.append(InterCoupling(a + 1, b + 1, W, params.inter_diffusion))
    return MultilayerNetwork(layers, tuple(couplings))


def is_connected(network: MultilayerNetwork) -> bool:
    pattern = np.zeros((network.n_total, network.n_total))
    off = network.offsets
    for l in network.layers:
        s = off[l.layer_id - 1]
        pattern[s:s + l.node_count, s:s + l.node_count] = l.adjacency
    for c in network.directed_couplings():
        sa, sb = off[c.from_layer - 1], off[c.to_layer - 1]
        pattern[sa:sa + c.weights.shape[0], sb:sb + c.weights.shape[1]] = c.weights
    n_comp, _ = connected_components(pattern > 0, directed=False)
    return n_comp == 1


def generate_synthetic(
    params: SyntheticParams, seed: Any = 0
) -> tuple[MultilayerNetwork, Trajectory]:
    """Draw a connected random network and an O.U. trajectory on it.

    Initial node states are uniform draws from the topic simplex.
    Disconnected networks are rejected, up to 100 attempts.
    """
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    net_ss, x0_ss, ou_ss = ss.spawn(3)
    rng = np.random.default_rng(net_ss)
    for _ in range(100):
        net = _sample_network(params, rng)
        if is_connected(net):
            break
    else:
        raise ValidationError(
            "100 consecutive random networks were disconnected; raise edge_prob or coupling_prob"
        )
    X0 = np.random.default_rng(x0_ss).dirichlet(np.ones(params.topics), size=net.n_total)
    traj = simulate_ou(
        assemble_supra(net), X0, params.sigma_scale, params.dt, params.steps,
        seed=ou_ss, exact_drift=params.exact_drift,
    )
    return net, traj


def hide_edges(
    network: MultilayerNetwork, fraction: float, rng: np.random.Generator
) -> MultilayerNetwork:
    """Copy of ``network`` with ``round(fraction * E)`` intra-layer edges removed per layer."""
    if not 0.0 <= fraction <= 1.0:
        raise ValidationError("hidden edge fraction must lie in [0, 1]")
    layers = []
    for l in network.layers:
        W = np.array(l.adjacency)
        iu = np.argwhere(np.triu(W, 1) > 0)
        k = int(round(fraction * len(iu)))
        if k:
            drop = iu[rng.choice(len(iu), size=k, replace=False)]
            W[drop[:, 0], drop[:, 1]] = 0.0
            W[drop[:, 1], drop[:, 0]] = 0.0
        layers.append(LayerSpec(l.layer_id, W, l.diffusion_constant))
    return MultilayerNetwork(tuple(layers), network.couplings)


# -- experiment --------------------------------------------------------------


@dataclass
class ExperimentConfig:
    """One train/test comparison.

    Data come from ``synthetic`` unless ``trajectory_path`` is set, in
    which case ``network_path`` names the declared network.  A learned
    operator and process-noise covariance may be supplied through
    ``lambda_path``/``process_noise_path`` to skip the learning phase.
    """

    synthetic: Optional[SyntheticParams] = field(default_factory=SyntheticParams)
    network_path: Optional[str] = None
    trajectory_path: Optional[str] = None
    lambda_path: Optional[str] = None
    process_noise_path: Optional[str] = None
    hidden_edge_fraction: float = 0.3
    train_fraction: float = 0.5
    predictors: tuple[str, ...] = MODEL_PREDICTORS
    observation_fraction: float = 0.25
    observation_selection: str = "uniform"
    structure_mode: str = "kron_constrained"
    learn: LearnConfig = field(default_factory=lambda: LearnConfig(gamma=0.1, max_iters=30))
    observation_noise: float = 1e-6
    initial_covariance: str = "residual"
    process_noise: str = "auto"
    seed: int = 0

    def __post_init__(self):
        self.predictors = tuple(self.predictors)
        if not 0.0 < self.train_fraction < 1.0:
            raise ValidationError("train_fraction must lie in (0, 1)")
        if not 0.0 <= self.observation_fraction <= 1.0:
            raise ValidationError("observation_fraction must lie in [0, 1]")
        bad = set(self.predictors) - set(MODEL_PREDICTORS)
        if bad:
            raise ValidationError(f"unknown predictor {sorted(bad)[0]!r}")
        if self.observation_selection not in ("uniform", "hub"):
            raise ValidationError("observation_selection must be 'uniform' or 'hub'")
        if self.structure_mode not in STRUCTURE_MODES:
            raise ValidationError(f"structure_mode must be one of {STRUCTURE_MODES}")
        if self.initial_covariance not in ("residual", "identity"):
            raise ValidationError("initial_covariance must be 'residual' or 'identity'")
        if self.process_noise not in ("auto", "residual", "pooled"):
            raise ValidationError("process_noise must be 'auto', 'residual' or 'pooled'")
        if not self.observation_noise > 0:
            raise ValidationError("observation_noise must be > 0")
        if not 0.0 <= self.hidden_edge_fraction <= 1.0:
            raise ValidationError("hidden_edge_fraction must lie in [0, 1]")
        if self.synthetic is None and self.trajectory_path is None:
            raise ValidationError("either synthetic parameters or a trajectory file is required")
        if self.trajectory_path is not None and self.network_path is None:
            raise ValidationError("a trajectory file needs a declared network file")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["predictors"] = list(self.predictors)
        if self.synthetic is not None:
            s = d["synthetic"]
            for k in ("nodes_per_layer", "intra_diffusion"):
                if isinstance(s[k], tuple):
                    s[k] = list(s[k])
        return d

    @classmethod
    def from_dict(cls, data: Any) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ValidationError("$: experiment config must be an object")
        data = dict(data)
        _reject_unknown(data, {f.name for f in fields(cls)}, "$")
        if isinstance(data.get("synthetic"), dict):
            _reject_unknown(data["synthetic"], {f.name for f in fields(SyntheticParams)}, "$.synthetic")
            data["synthetic"] = SyntheticParams(**data["synthetic"])
        if isinstance(data.get("learn"), dict):
            _reject_unknown(data["learn"], {f.name for f in fields(LearnConfig)}, "$.learn")
            data["learn"] = LearnConfig(**data["learn"])
        try:
            return cls(**data)
        except TypeError as exc:
            raise ValidationError(f"$: {exc}") from None


def _reject_unknown(d: dict, allowed: set[str], path: str) -> None:
    for k in d:
        if k not in allowed:
            raise ValidationError(f"{path}: unknown key {k!r}")


@dataclass
class ExperimentResult:
    """Per-step errors of every predictor plus run details.

    ``rows`` holds ``(predictor, step, error_all, error_unobserved)``;
    ``error_unobserved`` is NaN when every node is observed.
    """

    rows: list[tuple[str, int, float, float]]
    config: ExperimentConfig
    observed_nodes: list[int] = field(default_factory=list)
    learn_info: dict = field(default_factory=dict)

    @property
    def predictors(self) -> list[str]:
        seen: dict[str, None] = {}
        for r in self.rows:
            seen.setdefault(r[0], None)
        return list(seen)

    def table(self, predictor: str, column: str = "error_all") -> np.ndarray:
        col = {"error_all": 2, "error_unobserved": 3}[column]
        return np.array([r[col] for r in self.rows if r[0] == predictor])

    def means(self) -> dict[str, dict[str, float]]:
        return {
            p: {c: float(np.mean(self.table(p, c))) for c in ("error_all", "error_unobserved")}
            for p in self.predictors
        }

    def summary(self) -> dict:
        return {
            "means": self.means(),
            "observed_nodes": [i + 1 for i in self.observed_nodes],
            "learn": self.learn_info,
            "config": self.config.to_dict(),
        }

    def write(self, output_dir: Union[str, Path]) -> tuple[Path, Path]:
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        errors = out / "errors.csv"
        write_error_rows(errors, self.rows)
        summary = out / "summary.json"
        summary.write_text(json.dumps(self.summary(), indent=1, sort_keys=True) + "\n")
        return errors, summary


def write_error_rows(path: Path, rows: Sequence[tuple[str, int, float, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["predictor", "step", "error_all", "error_unobserved"])
        for p, k, ea, eu in rows:
            w.writerow([p, k, format(ea, ".17g"), format(eu, ".17g")])


def _select_observed(
    cfg: ExperimentConfig, declared: MultilayerNetwork, n: int, rng: np.random.Generator
) -> np.ndarray:
    count = math.ceil(cfg.observation_fraction * n)
    if count == 0:
        return np.array([], dtype=int)
    if cfg.observation_selection == "hub":
        degree = declared.flattened_adjacency().sum(axis=1)
        return np.sort(np.argsort(-degree, kind="stable")[:count])
    return np.sort(rng.choice(n, size=count, replace=False))


def _process_noise(cfg: ExperimentConfig, residuals: np.ndarray, n: int, t_dim: int) -> np.ndarray:
    pooled = cfg.process_noise == "pooled" or (
        cfg.process_noise == "auto" and cfg.structure_mode == "kron_constrained"
    )
    if pooled:
        return pooled_residual_covariance(residuals, n, t_dim)
    return residual_covariance(residuals)


def run_experiment(
    config: ExperimentConfig,
    network: Optional[MultilayerNetwork] = None,
    trajectory: Optional[Trajectory] = None,
) -> ExperimentResult:
    """Train on the leading timestamps, then score every predictor on the rest.

    ``network`` (declared) and ``trajectory`` override the sources named
    in ``config``.  Learning and filtering assume unit time steps.
    """
    data_ss, hide_ss, mask_ss = np.random.SeedSequence(config.seed).spawn(3)
    if trajectory is None:
        if config.trajectory_path is not None:
            trajectory = read_states(config.trajectory_path)
        else:
            true_net, trajectory = generate_synthetic(config.synthetic, data_ss)
            if network is None:
                network = hide_edges(
                    true_net, config.hidden_edge_fraction, np.random.default_rng(hide_ss)
                )
    if network is None:
        if config.network_path is None:
            raise ValidationError("no declared network given")
        network = load_network(config.network_path)
    if trajectory.n_nodes != network.n_total:
        raise ValidationError(
            f"trajectory has {trajectory.n_nodes} nodes, declared network has {network.n_total}"
        )

    K = len(trajectory)
    n_train = int(math.floor(config.train_fraction * K))
    if n_train < 2 or K - n_train < 1:
        raise ValidationError(
            f"{K} timestamps give {n_train} training and {K - n_train} test points; "
            "need at least 2 and 1"
        )
    train = trajectory.slice(0, n_train)
    test = trajectory.slice(n_train)
    n, t_dim = trajectory.n_nodes, trajectory.t_dim
    X_last = train.states[-1]
    t_last = train.timestamps[-1]

    observed = _select_observed(config, network, n, np.random.default_rng(mask_ss))
    mask = ObservationMask(n, t_dim, tuple(int(i) for i in observed))
    unobserved = mask.unobserved_nodes()

    L = assemble_supra(network)
    preds: dict[str, np.ndarray] = {}
    if "fixed_laplacian" in config.predictors:
        preds["fixed_laplacian"] = np.stack(
            [predict_drift(L, X_last, t - t_last) for t in test.timestamps]
        )

    learn_info: dict = {}
    if "learned_lambda" in config.predictors or "kalman" in config.predictors:
        if config.lambda_path is not None:
            lam = load_lambda(config.lambda_path)
            if config.process_noise_path is not None:
                Q = np.loadtxt(config.process_noise_path, delimiter=",", ndmin=2)
            else:
                # no stored residuals: re-derive them on the training window
                x = np.stack([vectorize(X) for X in train.states])
                Q = _process_noise(config, x[1:] - x[:-1] @ lam.propagator().T, n, t_dim)
            learn_info = {"source": str(config.lambda_path)}
        else:
            lam0 = initial_lambda(L, t_dim, config.structure_mode)
            res = learn_lambda(train, lam0, config.learn)
            lam = res.estimate
            Q = _process_noise(config, res.residuals, n, t_dim)
            learn_info = {
                "sweeps": res.sweeps,
                "final_residual": res.final_residual,
                "initial_residual": res.residual_series[0] if res.residual_series else None,
                "gamma": res.gamma,
                "halvings": res.halvings,
                "converged": res.converged,
            }
        F = make_transition(lam)
        if "learned_lambda" in config.predictors:
            x = vectorize(X_last)
            out = []
            for _ in range(len(test)):
                x = F @ x
                out.append(x)
            preds["learned_lambda"] = np.stack(
                [X.reshape((n, t_dim), order="F") for X in out]
            )
        if "kalman" in config.predictors:
            noise = NoiseCov.with_isotropic_r(Q, mask, config.observation_noise)
            P0 = Q if config.initial_covariance == "residual" else None
            xs = np.concatenate([X_last[None], test.states])
            obs = mask.observe(np.stack([vectorize(X) for X in xs]))
            fr = run_filter(lam, vectorize(X_last), P0, mask, noise, obs, keep_covariance=False)
            preds["kalman"] = np.stack(
                [x.reshape((n, t_dim), order="F") for x in fr.x_post[1:]]
            )
    preds[BASELINE] = np.repeat(X_last[None], len(test), axis=0)

    rows = []
    order = [p for p in MODEL_PREDICTORS if p in preds] + [BASELINE]
    for p in order:
        for k, (Xh, Xt) in enumerate(zip(preds[p], test.states), start=1):
            ea = normalized_frobenius_error(Xh, Xt)
            if unobserved.size:
                eu = normalized_frobenius_error(Xh[unobserved], Xt[unobserved])
            else:
                eu = float("nan")
            rows.append((p, k, ea, eu))
    return ExperimentResult(rows, config, [int(i) for i in observed], learn_info)


# -- replications ------------------------------------------------------------


def replication_seeds(master: int, count: int) -> list[int]:
    """Independent per-replication seeds derived from one master seed."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(master).spawn(count)]


def _run_one(config: ExperimentConfig) -> ExperimentResult:
    return run_experiment(config)


def run_replications(
    config: ExperimentConfig, count: int, workers: int = 1
) -> list[ExperimentResult]:
    """Run ``count`` experiments with seeds derived from ``config.seed``.

    Results come back in seed order regardless of ``workers``.
    """
    if count < 1:
        raise ValidationError("count must be >= 1")
    configs = [replace(config, seed=s) for s in replication_seeds(config.seed, count)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_run_one, configs))
    return [_run_one(c) for c in configs]


def pooled_means(results: Sequence[ExperimentResult]) -> dict[str, dict[str, float]]:
    """Per-predictor means over all replications (each replication weighted equally)."""
    per = [r.means() for r in results]
    return {
        p: {c: float(np.mean([m[p][c] for m in per])) for c in ("error_all", "error_unobserved")}
        for p in per[0]
    }


def mean_rows(results: Sequence[ExperimentResult]) -> list[tuple[str, int, float, float]]:
    """Step-wise mean of the error tables of several replications."""
    base = results[0].rows
    for r in results[1:]:
        if [(p, k) for p, k, _, _ in r.rows] != [(p, k) for p, k, _, _ in base]:
            raise ValidationError("replications have different test horizons")
    stacked = np.array([[[ea, eu] for _, _, ea, eu in r.rows] for r in results])
    avg = stacked.mean(axis=0)
    return [(p, k, float(a[0]), float(a[1])) for (p, k, _, _), a in zip(base, avg)]


def ordering_holds(means: dict[str, dict[str, float]], column: str = "error_all") -> bool:
    """kalman <= learned_lambda <= fixed_laplacian, each below persistence."""
    m = {p: v[column] for p, v in means.items()}
    return (
        m["kalman"] <= m["learned_lambda"] <= m["fixed_laplacian"]
        and all(m[p] < m[BASELINE] for p in MODEL_PREDICTORS)
    )
