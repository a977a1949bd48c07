"""Fast self-checks of the core operator and solver identities, runnable
against any configuration from the command line.

Each check returns a named result; the CLI prints them as a table and
fails the process if any check fails.  These are smoke-level versions of
the full test suite, sized to finish in seconds at any desk-scale cutoff.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .basis import apply_inv_stokes, l2_inner, v_inner
from .integrators import ControlPath, NoiseDriver, solve_skeleton, solve_spde
from .operators import ModelConfig, TrilinearTensor, assemble_trilinear
from .rate import controllability_gramian, linear_model_from_config
from .errors import ConfigError


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


def _random_fields(basis, rng, count):
    fields = rng.standard_normal((count, basis.size))
    norms = np.sqrt((fields * fields) @ basis.w_v)
    return fields / norms[:, None]


def run_invariant_checks(
    config: ModelConfig, tensor: Optional[TrilinearTensor] = None, seed: int = 0
) -> list:
    """Run the named invariant suite; returns one result per check."""
    basis = config.basis
    rng = np.random.default_rng(seed)
    if tensor is None:
        tensor = assemble_trilinear(basis)
    results = []

    # quadratic term: vanishing diagonal pairing and antisymmetry
    worst = 0.0
    for u, v in zip(_random_fields(basis, rng, 100), _random_fields(basis, rng, 100)):
        worst = max(worst, abs(tensor.pairing(u, v, v)))
        worst = max(worst, abs(tensor.pairing(u, v, u) + tensor.pairing(u, u, v)))
    results.append(
        CheckResult(
            "quadratic-antisymmetry",
            worst <= 1e-10,
            f"max |pairing violation| = {worst:.3e} (bound 1e-10)",
        )
    )

    # resolvent duality: (v, g)_V = (f, g) for v = resolvent of f
    worst = 0.0
    for _ in range(50):
        f = rng.standard_normal(basis.size)
        g = rng.standard_normal(basis.size)
        v = apply_inv_stokes(f, basis)
        lhs, rhs = v_inner(v, g, basis), l2_inner(f, g, basis)
        worst = max(worst, abs(lhs - rhs) / max(abs(rhs), 1e-30))
    results.append(
        CheckResult(
            "resolvent-duality",
            worst <= 1e-10,
            f"max relative mismatch = {worst:.3e} (bound 1e-10)",
        )
    )

    # norm sandwich: V-norm controls the L2 norm from both sides
    ok = True
    for u in rng.standard_normal((100, basis.size)):
        l2_sq = float(np.dot(basis.w_l2, u * u))
        v_sq = float(np.dot(basis.w_v, u * u))
        lo = v_sq / (1.0 + basis.alpha)
        hi = v_sq / basis.alpha
        if not (lo <= l2_sq * (1 + 1e-12) and l2_sq <= hi * (1 + 1e-12)):
            ok = False
    results.append(
        CheckResult("norm-sandwich", ok, "P^2=1 two-sided bound over 100 fields")
    )

    # unforced energy identity under the 4-stage scheme
    u0 = _random_fields(basis, rng, 1)[0]
    free = ModelConfig(
        nu=config.nu,
        basis=basis,
        forcing=type(config.forcing)(),
        u0=u0,
        horizon=min(config.horizon, 1.0),
        include_nonlinear=config.include_nonlinear,
    )
    z = ControlPath.zero(1, 0, free.horizon)
    traj = solve_skeleton(free, z, free.horizon / 100, tensor=tensor)
    v_start = float(np.dot(basis.w_v, u0 * u0))
    v_end = float(np.dot(basis.w_v, traj.endpoint() ** 2))
    drift = abs(v_end + 2.0 * free.nu * traj.dissipation - v_start) / v_start
    results.append(
        CheckResult(
            "energy-identity",
            drift <= 1e-6,
            f"relative energy drift = {drift:.3e} at dt={free.horizon / 100:.3g}",
        )
    )

    # bitwise determinism of the stochastic solver
    if config.m > 0:
        t1 = solve_spde(config, 0.1, None, NoiseDriver(seed, 0, config.m), 0.02, tensor=tensor)
        t2 = solve_spde(config, 0.1, None, NoiseDriver(seed, 0, config.m), 0.02, tensor=tensor)
        same = bool(np.array_equal(t1.states, t2.states))
        detail = "two same-seed runs bit-identical"
    else:
        same, detail = True, "no noise columns; trivially deterministic"
    results.append(CheckResult("solver-determinism", same, detail))

    # zero preservation when the forcing vanishes at the origin
    if config.forcing.satisfies_zero_condition:
        zero_cfg = ModelConfig(
            nu=config.nu,
            basis=basis,
            forcing=config.forcing,
            u0=np.zeros(basis.size),
            horizon=min(config.horizon, 1.0),
            include_nonlinear=config.include_nonlinear,
        )
        zt = solve_skeleton(zero_cfg, ControlPath.zero(1, 0, zero_cfg.horizon), 0.01, tensor=tensor)
        ok = float(np.abs(zt.states).max()) == 0.0
        results.append(
            CheckResult("zero-preservation", ok, "origin is a fixed point of the skeleton")
        )
    else:
        results.append(
            CheckResult(
                "zero-preservation",
                True,
                "additive noise moves the origin; check skipped",
            )
        )

    # Gramian quadrature self-consistency on linear instances
    try:
        spec = linear_model_from_config(config, tensor)
    except ConfigError:
        results.append(
            CheckResult(
                "gramian-quadrature", True, "not a linear instance; check skipped"
            )
        )
    else:
        g_coarse = controllability_gramian(spec, n_nodes=32)
        g_fine = controllability_gramian(spec, n_nodes=96)
        err = float(np.max(np.abs(g_coarse - g_fine)))
        scale = max(float(np.max(np.abs(g_fine))), 1e-30)
        results.append(
            CheckResult(
                "gramian-quadrature",
                err <= 1e-10 * scale,
                f"node-refinement change = {err:.3e}",
            )
        )

    return results


def format_check_table(results) -> str:
    width = max(len(r.name) for r in results)
    lines = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{r.name:<{width}}  {status}  {r.detail}")
    return "\n".join(lines)
