"""Command-line interface.

Every subcommand writes its outputs plus ``manifest.json`` into the
output directory (``--output-dir``, else ``$SUPRADIFF_OUTPUT_DIR``, else
the current directory).  Exit codes: 0 success, 1 invalid input,
2 numerical failure, 3 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from . import __version__
from .dynamics import Trajectory, predict_drift, read_states, simulate_ou, write_states
from .errors import NumericalError, ValidationError
from .evaluation import (
    ExperimentConfig,
    SyntheticParams,
    generate_synthetic,
    hide_edges,
    mean_rows,
    ordering_holds,
    pooled_means,
    replication_seeds,
    run_experiment,
    run_replications,
    write_error_rows,
)
from .kalman import NoiseCov, load_mask, run_filter, write_filter_csv
from .laplearn import (
    STRUCTURE_MODES,
    LambdaEstimate,
    LearnConfig,
    initial_lambda,
    learn_lambda,
    load_lambda,
    pooled_residual_covariance,
    residual_covariance,
    save_lambda,
    vectorize,
)
from .network import assemble_supra, load_network, save_network

logger = logging.getLogger("supradiff")

OUTPUT_DIR_ENV = "SUPRADIFF_OUTPUT_DIR"

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def _read_json(path: str) -> Any:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from None


def _strict(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise ValidationError(f"{where}: expected an object")
    names = {f.name for f in fields(cls)}
    for k in data:
        if k not in names:
            raise ValidationError(f"{where}: unknown key {k!r}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ValidationError(f"{where}: {exc}") from None


def _save_csv(path: Path, M: np.ndarray) -> None:
    np.savetxt(path, M, delimiter=",", fmt="%.17g")


# -- subcommands ---------------------------------------------------------------


def cmd_build(args, out: Path) -> dict:
    net = load_network(_required(args.input, "--input"))
    L = assemble_supra(net)
    _save_csv(out / "laplacian.csv", L.matrix)
    (out / "index_map.json").write_text(json.dumps(L.index_map(), indent=1) + "\n")
    return {"inputs": [args.input], "outputs": ["laplacian.csv", "index_map.json"], "config": {}}


def cmd_gen(args, out: Path) -> dict:
    params = _strict(SyntheticParams, _read_json(args.config), args.config) if args.config else SyntheticParams()
    data_ss, hide_ss = np.random.SeedSequence(args.seed).spawn(2)
    net, traj = generate_synthetic(params, data_ss)
    declared = hide_edges(net, args.hidden_fraction, np.random.default_rng(hide_ss))
    save_network(net, out / "network.json")
    save_network(declared, out / "declared_network.json")
    write_states(out / "states.csv", traj)
    config = asdict(params)
    config["hidden_fraction"] = args.hidden_fraction
    return {
        "inputs": [args.config] if args.config else [],
        "outputs": ["network.json", "declared_network.json", "states.csv"],
        "config": config,
        "warnings": traj.metadata.get("warnings", []),
    }


def cmd_simulate(args, out: Path) -> dict:
    net = load_network(_required(args.input, "--input"))
    init = read_states(_required(args.initial, "--initial"))
    X0 = init.states[-1]
    sigma: Any = args.sigma
    if args.sigma_file:
        sigma = np.loadtxt(args.sigma_file, delimiter=",", ndmin=2)
    traj = simulate_ou(
        assemble_supra(net), X0, sigma, args.dt, args.steps,
        seed=args.seed, exact_drift=args.exact_drift, t0=float(init.timestamps[-1]),
    )
    write_states(out / "states.csv", traj)
    return {
        "inputs": [args.input, args.initial] + ([args.sigma_file] if args.sigma_file else []),
        "outputs": ["states.csv"],
        "config": {"dt": args.dt, "steps": args.steps, "sigma": args.sigma, "exact_drift": args.exact_drift},
        "warnings": traj.metadata["warnings"],
    }


def cmd_learn(args, out: Path) -> dict:
    traj = read_states(_required(args.input, "--input"))
    if args.train_fraction < 1.0:
        k = int(np.floor(args.train_fraction * len(traj)))
        if k < 2:
            raise ValidationError("train fraction leaves fewer than 2 timestamps")
        traj = traj.slice(0, k)
    n, t_dim = traj.n_nodes, traj.t_dim
    if args.network:
        net = load_network(args.network)
        if net.n_total != n:
            raise ValidationError(f"network has {net.n_total} nodes, states have {n}")
        lam0 = initial_lambda(assemble_supra(net), t_dim, args.structure_mode)
    else:
        lam0 = LambdaEstimate(np.zeros((n * t_dim, n * t_dim)), n, t_dim, args.structure_mode)
    cfg = LearnConfig(args.gamma, args.eta, args.max_iters, args.patience)
    res = learn_lambda(traj, lam0, cfg)
    save_lambda(out / "lambda.csv", res.estimate, res.sweeps, res.final_residual)
    pooled = args.process_noise == "pooled" or (
        args.process_noise == "auto" and args.structure_mode == "kron_constrained"
    )
    Q = pooled_residual_covariance(res.residuals, n, t_dim) if pooled else residual_covariance(res.residuals)
    _save_csv(out / "process_noise.csv", Q)
    with open(out / "residual_series.csv", "w") as fh:
        fh.write("sweep,rms_residual\n")
        for i, r in enumerate(res.residual_series, start=1):
            fh.write(f"{i},{r:.17g}\n")
    return {
        "inputs": [args.input] + ([args.network] if args.network else []),
        "outputs": ["lambda.csv", "lambda.json", "process_noise.csv", "residual_series.csv"],
        "config": {**asdict(cfg), "structure_mode": args.structure_mode,
                   "train_fraction": args.train_fraction, "process_noise": args.process_noise},
        "result": {"sweeps": res.sweeps, "converged": res.converged, "gamma": res.gamma,
                   "final_residual": res.final_residual, "halvings": res.halvings},
    }


def cmd_predict(args, out: Path) -> dict:
    net = load_network(_required(args.network, "--network"))
    traj = read_states(_required(args.input, "--input"))
    X = predict_drift(assemble_supra(net), traj.states[-1], args.dt)
    t = float(traj.timestamps[-1]) + args.dt
    write_states(out / "predicted.csv", Trajectory(np.array([t]), X[None]))
    return {"inputs": [args.input, args.network], "outputs": ["predicted.csv"], "config": {"dt": args.dt}}


def cmd_kalman(args, out: Path) -> dict:
    traj = read_states(_required(args.input, "--input"))
    lam = load_lambda(_required(args.lambda_path, "--lambda"))
    n, t_dim = traj.n_nodes, traj.t_dim
    if (lam.n, lam.t_dim) != (n, t_dim):
        raise ValidationError(f"operator is for {lam.n}x{lam.t_dim} states, input is {n}x{t_dim}")
    mask = load_mask(_required(args.mask, "--mask"), n, t_dim)
    q_path = args.process_noise or str(Path(args.lambda_path).with_name("process_noise.csv"))
    Q = np.loadtxt(q_path, delimiter=",", ndmin=2)
    noise = NoiseCov.with_isotropic_r(Q, mask, args.r)
    P0 = Q if args.p0 == "process" else None
    x = np.stack([vectorize(X) for X in traj.states])
    res = run_filter(lam, x[0], P0, mask, noise, mask.observe(x), keep_covariance=False)
    write_filter_csv(out / "filter.csv", res, n, t_dim, traj.timestamps)
    return {
        "inputs": [args.input, args.lambda_path, args.mask, q_path],
        "outputs": ["filter.csv"],
        "config": {"r": args.r, "p0": args.p0},
    }


def cmd_eval(args, out: Path) -> dict:
    data = _read_json(args.config) if args.config else {}
    if not isinstance(data, dict):
        raise ValidationError(f"{args.config}: expected an object")
    overrides = {
        "network_path": args.network,
        "trajectory_path": args.input,
        "lambda_path": args.lambda_path,
        "process_noise_path": args.process_noise,
        "seed": args.seed,
    }
    for k, v in overrides.items():
        if v is not None:
            data[k] = v
    if args.input is not None:
        data["synthetic"] = None
    cfg = ExperimentConfig.from_dict(data)
    if args.replications == 1:
        results = [run_experiment(cfg)]
        seeds = [cfg.seed]
    else:
        results = run_replications(cfg, args.replications, workers=args.workers)
        seeds = replication_seeds(cfg.seed, args.replications)
    rows = mean_rows(results)
    write_error_rows(out / "errors.csv", rows)
    means = pooled_means(results)
    summary = {
        "means": means,
        "replications": [
            {"seed": s, "means": r.means(), "observed_nodes": [i + 1 for i in r.observed_nodes],
             "learn": r.learn_info}
            for s, r in zip(seeds, results)
        ],
        "ordering_holds": {c: ordering_holds(means, c) for c in ("error_all", "error_unobserved")}
        if all(p in means for p in ("kalman", "learned_lambda", "fixed_laplacian")) else None,
        "config": cfg.to_dict(),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    inputs = [p for p in (args.config, args.network, args.input, args.lambda_path, args.process_noise) if p]
    return {"inputs": inputs, "outputs": ["errors.csv", "summary.json"], "config": cfg.to_dict()}


def _required(v: Optional[str], flag: str) -> str:
    if not v:
        raise ValidationError(f"{flag} is required")
    return v


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="supradiff", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed_required=False):
        sp.add_argument("--input")
        sp.add_argument("--output-dir")
        sp.add_argument("--config")
        sp.add_argument("--seed", type=int, required=seed_required)

    sp = sub.add_parser("build", help="assemble the supra-Laplacian of a network file")
    common(sp)
    sp.set_defaults(func=cmd_build)

    sp = sub.add_parser("gen", help="generate a synthetic network and trajectory")
    common(sp, seed_required=True)
    sp.add_argument("--hidden-fraction", type=float, default=0.3)
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("simulate", help="simulate O.U. diffusion on a network")
    common(sp, seed_required=True)
    sp.add_argument("--initial", help="state CSV; its last timestamp is the start state")
    sp.add_argument("--sigma", type=float, default=0.0)
    sp.add_argument("--sigma-file", help="CSV of per-entry noise scales (N x T)")
    sp.add_argument("--dt", type=float, default=1.0)
    sp.add_argument("--steps", type=int, default=10)
    sp.add_argument("--exact-drift", action="store_true")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("learn", help="learn the vectorized diffusion operator")
    common(sp)
    sp.add_argument("--network", help="declared network for the initial operator (zero if omitted)")
    sp.add_argument("--train-fraction", type=float, default=1.0)
    sp.add_argument("--structure-mode", choices=STRUCTURE_MODES, default="full")
    sp.add_argument("--gamma", type=float, default=LearnConfig.gamma)
    sp.add_argument("--eta", type=float, default=None)
    sp.add_argument("--max-iters", type=int, default=LearnConfig.max_iters)
    sp.add_argument("--patience", type=int, default=LearnConfig.divergence_patience)
    sp.add_argument("--process-noise", choices=("auto", "residual", "pooled"), default="auto")
    sp.set_defaults(func=cmd_learn)

    sp = sub.add_parser("predict", help="drift prediction from the last state")
    common(sp)
    sp.add_argument("--network")
    sp.add_argument("--dt", type=float, required=True)
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("kalman", help="run the Kalman predictor over a state series")
    common(sp)
    sp.add_argument("--lambda", dest="lambda_path")
    sp.add_argument("--mask")
    sp.add_argument("--process-noise", help="Q as CSV (default: process_noise.csv next to --lambda)")
    sp.add_argument("--r", type=float, default=1e-6)
    sp.add_argument("--p0", choices=("identity", "process"), default="identity")
    sp.set_defaults(func=cmd_kalman)

    sp = sub.add_parser("eval", help="compare predictors on synthetic or file data")
    common(sp, seed_required=True)
    sp.add_argument("--network", help="declared network (with --input)")
    sp.add_argument("--lambda", dest="lambda_path")
    sp.add_argument("--process-noise")
    sp.add_argument("--replications", type=int, default=1)
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_eval)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    out = Path(args.output_dir or os.environ.get(OUTPUT_DIR_ENV) or ".")
    start = time.perf_counter()
    try:
        out.mkdir(parents=True, exist_ok=True)
        info = args.func(args, out)
        manifest = {
            "subcommand": args.command,
            "argv": argv,
            "seed": args.seed,
            "version": __version__,
            "duration_s": round(time.perf_counter() - start, 6),
            **info,
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=1, default=str) + "\n")
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except np.linalg.LinAlgError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
