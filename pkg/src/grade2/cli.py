"""Command-line entry points.

Every command reads one JSON configuration document, lets flags override
scalar fields (flags > file > defaults), derives all randomness from the
single master seed, and writes its artifacts plus a run manifest into
--out.  Failures print a machine-readable JSON object to stderr and exit
nonzero.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from .basis import coeffs_from_dict
from .checks import format_check_table, run_invariant_checks
from .config import Experiment, parse_config
from .errors import ConfigError, Grade2Error
from .integrators import ControlPath, NoiseDriver, solve_skeleton, solve_spde
from .montecarlo import (
    EventBall,
    condition_a_check,
    condition_b_check,
    ldp_sweep,
    moment_sweep,
)
from .operators import assemble_trilinear
from .rate import (
    ball_infimum_rate_linear,
    export_control_csv,
    import_control_csv,
    linear_model_from_config,
    rate_endpoint,
)
from .storage import (
    RunManifest,
    basis_summary,
    write_manifest,
    write_norms_csv,
    write_snapshot,
    write_sweep_csv,
)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="grade2",
        description="Simulation, rate minimization, and small-noise studies "
        "for a regularized incompressible fluid model on the torus.",
    )
    parser.add_argument("--version", action="version", version=f"grade2 {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", required=True, help="JSON configuration file")
        p.add_argument("--out", default=".", help="output directory (default: .)")
        p.add_argument("--seed", type=int, default=None, help="override master seed")

    p_sim = sub.add_parser("simulate", help="one stochastic trajectory")
    add_common(p_sim)
    p_sim.add_argument("--eps", type=float, default=None, help="noise scale override")
    p_sim.add_argument("--dt", type=float, default=None, help="time step override")
    p_sim.add_argument("--stream", type=int, default=0, help="noise stream index")
    p_sim.add_argument("--save-stride", type=int, default=1, help="save every k-th step")

    p_skel = sub.add_parser("skeleton", help="deterministic controlled trajectory")
    add_common(p_skel)
    p_skel.add_argument("--dt", type=float, default=None, help="time step override")
    p_skel.add_argument("--control", default=None, help="control CSV (t, hdot_1..)")
    p_skel.add_argument(
        "--cells", type=int, default=64, help="grid cells for the zero control"
    )
    p_skel.add_argument("--save-stride", type=int, default=1, help="save every k-th step")

    p_rate = sub.add_parser("rate", help="minimize the action to hit a target")
    add_common(p_rate)
    p_rate.add_argument(
        "--target", default=None, help="JSON file of mode->value target entries"
    )

    p_sweep = sub.add_parser("sweep", help="small-noise probability sweep")
    add_common(p_sweep)
    p_sweep.add_argument("--eps-list", default=None, help="comma-separated eps ladder")
    p_sweep.add_argument("--n", type=int, default=None, help="samples per eps")
    p_sweep.add_argument("--delta", type=float, default=None, help="event radius")
    p_sweep.add_argument("--dt", type=float, default=None, help="time step override")
    p_sweep.add_argument("--threads", type=int, default=None, help="worker threads")

    p_inv = sub.add_parser("check-invariants", help="run the invariant suite")
    add_common(p_inv)

    p_cond = sub.add_parser(
        "check-conditions", help="empirical weak-convergence condition checks"
    )
    add_common(p_cond)
    p_cond.add_argument("--n-rep", type=int, default=16, help="replicas per eps")
    p_cond.add_argument("--n-controls", type=int, default=50, help="energy-ball samples")
    p_cond.add_argument("--n-bound", type=float, default=1.0, help="control energy ball")

    return parser


def _manifest(args, experiment: Experiment, seed: int, outputs) -> RunManifest:
    return RunManifest(
        command=list(args.raw_argv),
        config_hash=experiment.config_hash,
        seed=seed,
        basis_summary=basis_summary(experiment.config.basis),
        outputs=sorted(outputs),
    )


def _finish(args, experiment, seed, out_dir, outputs, summary) -> int:
    manifest = _manifest(args, experiment, seed, outputs)
    write_manifest(manifest, os.path.join(out_dir, "manifest.json"))
    print(json.dumps(summary, sort_keys=True))
    return 0


def _load_target(args, experiment: Experiment) -> np.ndarray:
    if args.target is None:
        return experiment.target
    with open(args.target) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError("target", f"{args.target} is not valid JSON: {exc}") from exc
    return coeffs_from_dict(experiment.config.basis, doc)


def _cmd_simulate(args, experiment: Experiment, out_dir: str) -> int:
    config = experiment.config
    seed = args.seed if args.seed is not None else experiment.seed
    eps = args.eps if args.eps is not None else experiment.eps
    dt = args.dt if args.dt is not None else experiment.dt
    tensor = assemble_trilinear(config.basis) if config.include_nonlinear else None
    driver = NoiseDriver(seed, args.stream, config.m)
    traj = solve_spde(
        config,
        eps,
        None,
        driver,
        dt,
        save_stride=args.save_stride,
        tensor=tensor,
        config_hash=experiment.config_hash,
    )
    write_snapshot(traj, os.path.join(out_dir, "trajectory.snap"))
    write_norms_csv(
        traj, config.basis.w_v, config.basis.lam, os.path.join(out_dir, "norms.csv")
    )
    summary = {
        "command": "simulate",
        "eps": eps,
        "dt": dt,
        "seed": seed,
        "sup_v": traj.sup_v,
        "sup_w": traj.sup_w,
        "endpoint_v_norm": float(
            np.sqrt(np.dot(config.basis.w_v, traj.endpoint() ** 2))
        ),
    }
    return _finish(
        args, experiment, seed, out_dir, ["trajectory.snap", "norms.csv"], summary
    )


def _cmd_skeleton(args, experiment: Experiment, out_dir: str) -> int:
    config = experiment.config
    seed = args.seed if args.seed is not None else experiment.seed
    dt = args.dt if args.dt is not None else experiment.dt
    tensor = assemble_trilinear(config.basis) if config.include_nonlinear else None
    if args.control is not None:
        control = import_control_csv(args.control)
    else:
        control = ControlPath.zero(args.cells, config.m, config.horizon)
    traj = solve_skeleton(
        config,
        control,
        dt,
        save_stride=args.save_stride,
        tensor=tensor,
        config_hash=experiment.config_hash,
    )
    write_snapshot(traj, os.path.join(out_dir, "skeleton.snap"))
    write_norms_csv(
        traj, config.basis.w_v, config.basis.lam, os.path.join(out_dir, "norms.csv")
    )
    summary = {
        "command": "skeleton",
        "dt": dt,
        "control_cost": control.cost(),
        "dissipation": traj.dissipation,
        "sup_v": traj.sup_v,
    }
    return _finish(
        args, experiment, seed, out_dir, ["skeleton.snap", "norms.csv"], summary
    )


def _cmd_rate(args, experiment: Experiment, out_dir: str) -> int:
    config = experiment.config
    seed = args.seed if args.seed is not None else experiment.seed
    target = _load_target(args, experiment)
    tensor = assemble_trilinear(config.basis) if config.include_nonlinear else None
    estimate = rate_endpoint(
        target, config, tensor=tensor, options=experiment.rate_options
    )
    with open(os.path.join(out_dir, "rate.json"), "w") as fh:
        json.dump(estimate.to_json_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    export_control_csv(os.path.join(out_dir, "control.csv"), estimate.control)
    summary = {
        "command": "rate",
        "value": estimate.value,
        "endpoint_gap": estimate.endpoint_gap,
        "converged": estimate.converged,
        "message": estimate.message,
    }
    return _finish(args, experiment, seed, out_dir, ["rate.json", "control.csv"], summary)


def _reference_rate(experiment: Experiment, target, delta, tensor):
    """Ball-infimum oracle on linear instances; otherwise the optimizer
    value at the ball center, labeled as a caveat."""
    config = experiment.config
    try:
        spec = linear_model_from_config(config, tensor)
    except ConfigError:
        est = rate_endpoint(target, config, tensor=tensor, options=experiment.rate_options)
        return est.value, "rate-endpoint-at-center (upper-bound caveat)"
    return (
        ball_infimum_rate_linear(spec, target, delta, config.basis.w_v),
        "ball-infimum-oracle",
    )


def _cmd_sweep(args, experiment: Experiment, out_dir: str) -> int:
    config = experiment.config
    seed = args.seed if args.seed is not None else experiment.seed
    n = args.n if args.n is not None else experiment.n
    delta = args.delta if args.delta is not None else experiment.delta
    dt = args.dt if args.dt is not None else experiment.dt
    threads = args.threads if args.threads is not None else experiment.threads
    if args.eps_list is not None:
        eps_list = [float(tok) for tok in args.eps_list.split(",") if tok.strip()]
    else:
        eps_list = list(experiment.eps_list)
    target = experiment.target
    tensor = assemble_trilinear(config.basis) if config.include_nonlinear else None
    event = EventBall(center=target, radius=delta)
    i_ref, i_ref_source = _reference_rate(experiment, target, delta, tensor)
    report = ldp_sweep(
        config,
        eps_list,
        n,
        event,
        i_ref,
        seed,
        dt=dt,
        tensor=tensor,
        threads=threads,
        chunk=experiment.chunk,
    )
    write_sweep_csv(report, os.path.join(out_dir, "sweep.csv"))
    doc = report.to_json_dict()
    doc["i_ref_source"] = i_ref_source
    with open(os.path.join(out_dir, "sweep.json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    summary = {
        "command": "sweep",
        "n_per_eps": n,
        "monotone_ok": report.monotone_ok,
        "final_gap": report.final_gap,
        "i_ref": i_ref,
        "i_ref_source": i_ref_source,
    }
    return _finish(args, experiment, seed, out_dir, ["sweep.csv", "sweep.json"], summary)


def _cmd_check_invariants(args, experiment: Experiment, out_dir: str) -> int:
    config = experiment.config
    seed = args.seed if args.seed is not None else experiment.seed
    tensor = assemble_trilinear(config.basis)
    results = run_invariant_checks(config, tensor, seed=seed)
    print(format_check_table(results))
    return 0 if all(r.passed for r in results) else 1


def _cmd_check_conditions(args, experiment: Experiment, out_dir: str) -> int:
    config = experiment.config
    seed = args.seed if args.seed is not None else experiment.seed
    tensor = assemble_trilinear(config.basis) if config.include_nonlinear else None
    eps_list = list(experiment.eps_list)
    report = {"eps_list": eps_list, "seed": seed}
    if config.m > 0:
        h = ControlPath.zero(8, config.m, config.horizon)
        report["condition_a"] = condition_a_check(
            config, h, eps_list, n_rep=args.n_rep, master_seed=seed, tensor=tensor
        )
        report["condition_b"] = condition_b_check(
            config, args.n_bound, args.n_controls, master_seed=seed, tensor=tensor
        )
    else:
        report["condition_a"] = None
        report["condition_b"] = None
        report["note"] = "config has no noise columns; condition checks skipped"
    report["moments"] = moment_sweep(
        config,
        eps_list,
        max(args.n_rep * 8, 64),
        master_seed=seed,
        dt=experiment.dt,
        tensor=tensor,
        threads=experiment.threads,
        chunk=experiment.chunk,
    )
    with open(os.path.join(out_dir, "conditions.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    summary = {
        "command": "check-conditions",
        "r_squared": None if report["condition_a"] is None else report["condition_a"]["r_squared"],
        "lipschitz_max": None
        if report["condition_b"] is None
        else report["condition_b"]["lipschitz_max"],
        "moment_ratio": report["moments"]["ratio"],
    }
    return _finish(args, experiment, seed, out_dir, ["conditions.json"], summary)


_COMMANDS = {
    "simulate": _cmd_simulate,
    "skeleton": _cmd_skeleton,
    "rate": _cmd_rate,
    "sweep": _cmd_sweep,
    "check-invariants": _cmd_check_invariants,
    "check-conditions": _cmd_check_conditions,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _build_parser()
    args = parser.parse_args(argv)
    args.raw_argv = ["grade2"] + argv
    try:
        experiment = parse_config(args.config)
        out_dir = args.out
        os.makedirs(out_dir, exist_ok=True)
        return _COMMANDS[args.command](args, experiment, out_dir)
    except Grade2Error as exc:
        payload = {"error": type(exc).__name__, "message": str(exc)}
        field = getattr(exc, "field", None)
        if field is not None:
            payload["field"] = field
        print(json.dumps(payload, sort_keys=True), file=sys.stderr)
        return 2
    except OSError as exc:
        print(
            json.dumps({"error": "OSError", "message": str(exc)}, sort_keys=True),
            file=sys.stderr,
        )
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
