"""Action functional machinery: skeleton map, adjoint gradients, rate minimization.

The action of a control is half its squared energy; the rate of hitting
an endpoint target is the infimum of that action over controls whose
skeleton path ends at the target.  The minimization here follows the
classical penalty-continuation recipe: minimize

    cost(h) + (mu/2) ||Gamma0(h)(T) - x||_V^2

for an increasing ladder of mu with warm starts, using exact gradients
from a reverse sweep of the 4-stage scheme (the discrete adjoint, not a
discretized continuous adjoint, so gradients match the forward map to
rounding).  For linear instances the controllability Gramian gives a
closed-form oracle, and a secular-equation solve gives the exact
infimum over a V-norm ball of targets.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg
import scipy.optimize
import scipy.special

from .basis import BasisSpec
from .errors import ConfigError, DimensionMismatchError, FormatError
from .integrators import ControlPath, Trajectory, _step_grid, solve_skeleton
from .operators import (
    ModelConfig,
    TrilinearTensor,
    drift,
    drift_control_jacobian,
    drift_jtvp,
)

DEFAULT_MU_SCHEDULE = (1e1, 1e2, 1e3, 1e4, 1e5, 1e6, 1e7, 1e8)


def control_cost(control: ControlPath) -> float:
    """Half the integrated squared control derivative."""
    return control.cost()


def gamma0(
    control: ControlPath,
    config: ModelConfig,
    tensor: Optional[TrilinearTensor] = None,
    dt: Optional[float] = None,
    save_stride: int = 1,
) -> Trajectory:
    """The skeleton map: deterministic controlled path for a control."""
    if dt is None:
        dt = control.dt_cell / 2.0
    return solve_skeleton(config, control, dt, save_stride=save_stride, tensor=tensor)


# -- discrete adjoint ------------------------------------------------------


def _forward_stages(config, control, dt, tensor):
    n_steps, spc = _step_grid(config.horizon, dt, control)
    u = config.u0.copy()
    stages = []
    for i in range(n_steps):
        hd = control.hdot[i // spc]
        t = i * dt
        x1 = u
        k1 = drift(x1, t, hd, config, tensor)
        x2 = u + 0.5 * dt * k1
        k2 = drift(x2, t + 0.5 * dt, hd, config, tensor)
        x3 = u + 0.5 * dt * k2
        k3 = drift(x3, t + 0.5 * dt, hd, config, tensor)
        x4 = u + dt * k3
        k4 = drift(x4, t + dt, hd, config, tensor)
        u = u + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        stages.append((t, x1, x2, x3, x4))
    return u, stages


def _penalty_value_grad(control, x_target, mu, config, tensor, dt):
    """Objective cost + (mu/2) gap^2, its exact gradient in control space,
    and diagnostics (endpoint gap, bare cost)."""
    basis = config.basis
    forcing = config.forcing
    n_steps, spc = _step_grid(config.horizon, dt, control)
    u_end, stages = _forward_stages(config, control, dt, tensor)
    diff = u_end - x_target
    gap_sq = float(np.dot(basis.w_v, diff * diff))
    cost = control.cost()
    value = cost + 0.5 * mu * gap_sq

    lam = mu * basis.w_v * diff
    grad = np.zeros_like(control.hdot)
    for i in reversed(range(n_steps)):
        t, x1, x2, x3, x4 = stages[i]
        hd = control.hdot[i // spc]
        t_mid = t + 0.5 * dt
        t_end = t + dt
        b4 = (dt / 6.0) * lam
        b3 = (dt / 3.0) * lam + dt * drift_jtvp(x4, t_end, hd, b4, config, tensor)
        b2 = (dt / 3.0) * lam + 0.5 * dt * drift_jtvp(x3, t_mid, hd, b3, config, tensor)
        b1 = (dt / 6.0) * lam + 0.5 * dt * drift_jtvp(x2, t_mid, hd, b2, config, tensor)
        cell = i // spc
        grad[cell] += (
            drift_control_jacobian(x1, t, forcing, basis).T @ b1
            + drift_control_jacobian(x2, t_mid, forcing, basis).T @ b2
            + drift_control_jacobian(x3, t_mid, forcing, basis).T @ b3
            + drift_control_jacobian(x4, t_end, forcing, basis).T @ b4
        )
        lam = (
            lam
            + drift_jtvp(x1, t, hd, b1, config, tensor)
            + drift_jtvp(x2, t_mid, hd, b2, config, tensor)
            + drift_jtvp(x3, t_mid, hd, b3, config, tensor)
            + drift_jtvp(x4, t_end, hd, b4, config, tensor)
        )
    grad += control.dt_cell * control.hdot
    return value, grad, float(np.sqrt(gap_sq)), cost


def adjoint_gradient(
    control: ControlPath,
    x_target: np.ndarray,
    mu: float,
    config: ModelConfig,
    tensor: Optional[TrilinearTensor] = None,
    dt: Optional[float] = None,
) -> np.ndarray:
    """Exact gradient of cost(h) + (mu/2)||Gamma0(h)(T) - x||_V^2.

    Shape (K, m), matching the control's derivative grid.
    """
    if dt is None:
        dt = control.dt_cell / 2.0
    x_target = config.basis.check_field(x_target, "target")
    _, grad, _, _ = _penalty_value_grad(control, x_target, mu, config, tensor, dt)
    return grad


# -- rate minimization -----------------------------------------------------


@dataclass(frozen=True)
class RateOptions:
    """Optimizer knobs for ``rate_endpoint``; defaults fit desk scale."""

    cells: int = 64
    steps_per_cell: int = 2
    mu_schedule: tuple = DEFAULT_MU_SCHEDULE
    gap_tol: float = 1e-3
    inner_maxiter: int = 400
    n_bound: Optional[float] = None
    stall_factor: float = 0.5


@dataclass(frozen=True, eq=False)
class RateEstimate:
    """Result of a rate minimization (an upper bound on the infimum)."""

    value: float
    control: ControlPath
    endpoint_gap: float
    iterations: int
    converged: bool
    message: str = ""

    def to_json_dict(self) -> dict:
        return {
            "value": self.value,
            "endpoint_gap": self.endpoint_gap,
            "iterations": self.iterations,
            "converged": self.converged,
            "message": self.message,
            "control": {
                "horizon": self.control.horizon,
                "cells": self.control.cells,
                "m": self.control.m,
                "cost": self.control.cost(),
                "hdot": self.control.hdot.tolist(),
            },
        }


def _projected_descent(fun_grad, x0, project, maxiter):
    """Spectral projected gradient with backtracking; for ball-constrained
    runs where a box-constrained quasi-Newton method does not apply."""
    x = project(x0)
    f, g = fun_grad(x)
    step = 1.0 / max(np.linalg.norm(g), 1e-12)
    evals = 1
    for _ in range(maxiter):
        trial_step = step
        for _ in range(30):
            x_new = project(x - trial_step * g)
            f_new, g_new = fun_grad(x_new)
            evals += 1
            if f_new <= f - 1e-4 * float(np.dot(g, x - x_new)):
                break
            trial_step *= 0.5
        dx = x_new - x
        dg = g_new - g
        denom = float(np.dot(dx, dg))
        step = float(np.dot(dx, dx)) / denom if denom > 1e-16 else trial_step * 2.0
        step = min(max(step, 1e-8), 1e4)
        if np.linalg.norm(dx) <= 1e-12 * max(1.0, np.linalg.norm(x)):
            x, f, g = x_new, f_new, g_new
            break
        x, f, g = x_new, f_new, g_new
    return x, evals


def rate_endpoint(
    x_target: np.ndarray,
    config: ModelConfig,
    tensor: Optional[TrilinearTensor] = None,
    options: RateOptions = RateOptions(),
    initial: Optional[ControlPath] = None,
) -> RateEstimate:
    """Minimize the action over controls steering the skeleton to a target.

    Penalty continuation over ``options.mu_schedule`` with warm starts;
    each stage runs a quasi-second-order line-search method (or projected
    spectral descent when an energy-ball bound is set).  Returns the best
    control found; ``converged`` means the endpoint gap met ``gap_tol``.
    A target the noise directions cannot reach leaves the gap stalled,
    reported as "no finite rate found".
    """
    basis = config.basis
    x_target = basis.check_field(x_target, "target")
    m = config.m
    if m == 0:
        raise ConfigError("noise", "rate minimization needs at least one noise column")
    K = options.cells
    dt = config.horizon / (K * options.steps_per_cell)

    if initial is not None:
        if initial.cells != K or initial.m != m:
            raise DimensionMismatchError(K, initial.cells, "initial control grid")
        hdot = initial.hdot.copy()
    else:
        hdot = np.zeros((K, m))

    total_iters = 0
    gap = np.inf
    prev_gap = np.inf
    stalled = False

    def make_fun(mu):
        def fun(flat):
            path = ControlPath(config.horizon, flat.reshape(K, m))
            value, grad, g, c = _penalty_value_grad(path, x_target, mu, config, tensor, dt)
            return value, grad.ravel()

        return fun

    for mu in options.mu_schedule:
        fun = make_fun(mu)
        if options.n_bound is None:
            res = scipy.optimize.minimize(
                fun,
                hdot.ravel(),
                jac=True,
                method="L-BFGS-B",
                options={"maxiter": options.inner_maxiter, "ftol": 1e-14, "gtol": 1e-12},
            )
            hdot = res.x.reshape(K, m)
            total_iters += int(res.nit)
        else:
            bound = options.n_bound

            def project(flat):
                path = ControlPath(config.horizon, flat.reshape(K, m))
                return path.clipped_to_ball(bound).hdot.ravel()

            flat, evals = _projected_descent(
                fun, hdot.ravel(), project, options.inner_maxiter
            )
            hdot = flat.reshape(K, m)
            total_iters += evals
        path = ControlPath(config.horizon, hdot)
        _, _, gap, cost = _penalty_value_grad(path, x_target, mu, config, tensor, dt)
        if gap <= options.gap_tol:
            break
        if np.isfinite(prev_gap) and gap > options.stall_factor * prev_gap:
            stalled = True
            break
        prev_gap = gap

    final = ControlPath(config.horizon, hdot, options.n_bound)
    converged = gap <= options.gap_tol
    message = ""
    if not converged:
        message = (
            "no finite rate found: endpoint gap stalled at "
            f"{gap:.3g} (target may be unreachable)"
            if stalled
            else f"did not reach gap tolerance (gap {gap:.3g})"
        )
    return RateEstimate(
        value=final.cost(),
        control=final,
        endpoint_gap=gap,
        iterations=total_iters,
        converged=converged,
        message=message,
    )


# -- linear oracle ---------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LinearModelSpec:
    """Dense linear-dynamics instance du/dt = A u + C hdot."""

    a_matrix: np.ndarray
    c_matrix: np.ndarray
    horizon: float
    u0: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.a_matrix, dtype=float)
        c = np.asarray(self.c_matrix, dtype=float)
        u0 = np.asarray(self.u0, dtype=float)
        n = a.shape[0]
        if a.shape != (n, n) or c.ndim != 2 or c.shape[0] != n or u0.shape != (n,):
            raise DimensionMismatchError(n, c.shape[0], "linear model matrices")
        if not np.isfinite(self.horizon) or self.horizon <= 0:
            raise ConfigError("T", "linear model horizon must be positive")
        object.__setattr__(self, "a_matrix", a)
        object.__setattr__(self, "c_matrix", c)
        object.__setattr__(self, "u0", u0)

    @property
    def size(self) -> int:
        return self.a_matrix.shape[0]


def linear_model_from_config(
    config: ModelConfig, tensor: Optional[TrilinearTensor] = None
) -> LinearModelSpec:
    """Extract the dense linear system from a config whose dynamics are
    genuinely linear (no active tensor, constant noise columns)."""
    if config.include_nonlinear and tensor is not None and tensor.nnz:
        raise ConfigError(
            "model", "config has an active quadratic term; not a linear instance"
        )
    f = config.forcing
    if f.drift_family == "modulated":
        raise ConfigError("forcing", "time-modulated drift has no constant state matrix")
    if f.noise_family == "diagonal":
        raise ConfigError("noise", "state-dependent noise admits no Gramian oracle")
    basis = config.basis
    gain = f.kappa if f.drift_family == "linear" else 0.0
    a_diag = (-config.nu * basis.w_grad + gain) / basis.w_v
    if f.noise_family == "additive":
        c = f.noise_columns / basis.w_v[:, None]
    else:
        c = np.zeros((basis.size, 0))
    return LinearModelSpec(
        a_matrix=np.diag(a_diag), c_matrix=c, horizon=config.horizon, u0=config.u0.copy()
    )


def controllability_gramian(spec: LinearModelSpec, n_nodes: int = 64) -> np.ndarray:
    """Gram(T) = int_0^T exp(A s) C C^T exp(A^T s) ds by Gauss-Legendre
    matrix quadrature (the integrand is entire, so the quadrature
    converges spectrally fast)."""
    nodes, weights = scipy.special.roots_legendre(n_nodes)
    s = 0.5 * spec.horizon * (nodes + 1.0)
    w = 0.5 * spec.horizon * weights
    q = spec.c_matrix @ spec.c_matrix.T
    out = np.zeros_like(q)
    for sk, wk in zip(s, w):
        e = scipy.linalg.expm(spec.a_matrix * sk)
        out += wk * (e @ q @ e.T)
    return out


def _gram_eig(spec: LinearModelSpec):
    gram = controllability_gramian(spec)
    vals, vecs = scipy.linalg.eigh(gram)
    tol = max(vals.max(), 0.0) * 1e-12 + 1e-300
    keep = vals > tol
    return vals[keep], vecs[:, keep]


def drift_endpoint_linear(spec: LinearModelSpec) -> np.ndarray:
    """Endpoint of the uncontrolled linear flow, exp(A T) u0."""
    return scipy.linalg.expm(spec.a_matrix * spec.horizon) @ spec.u0


def gramian_rate_linear(spec: LinearModelSpec, x_target: np.ndarray) -> float:
    """Minimum-energy cost (1/2) r^T Gram(T)^+ r of hitting the target
    exactly; infinite when the residual leaves the Gramian's range."""
    x_target = np.asarray(x_target, dtype=float)
    r = x_target - drift_endpoint_linear(spec)
    if np.allclose(r, 0.0, atol=1e-14):
        return 0.0
    vals, vecs = _gram_eig(spec)
    if vals.size == 0:
        return np.inf
    coords = vecs.T @ r
    residual = r - vecs @ coords
    if np.linalg.norm(residual) > 1e-9 * max(np.linalg.norm(r), 1.0):
        return np.inf
    return 0.5 * float(np.sum(coords**2 / vals))


def ball_infimum_rate_linear(
    spec: LinearModelSpec, x_center: np.ndarray, delta: float, w_v: np.ndarray
) -> float:
    """Exact infimum of the linear rate over the closed V-ball of radius
    ``delta`` around a center.

    The reachable endpoints form the affine space b + range(Gram); the
    infimum over the ball restricted to that space is a trust-region
    style problem, solved through its scalar secular equation.
    """
    if delta <= 0:
        raise ConfigError("delta", f"ball radius must be positive, got {delta}")
    x_center = np.asarray(x_center, dtype=float)
    w = np.asarray(w_v, dtype=float)
    b = drift_endpoint_linear(spec)
    d = b - x_center
    if float(np.dot(w, d * d)) <= delta**2:
        return 0.0
    vals, vecs = _gram_eig(spec)
    if vals.size == 0:
        return np.inf
    wu = w[:, None] * vecs  # W U
    m_mat = vecs.T @ wu  # U^T W U
    rhs = vecs.T @ (w * d)  # U^T W d
    p_diag = 1.0 / vals  # cost Hessian in reachable coordinates

    def z_of(mu):
        return np.linalg.solve(np.diag(p_diag) + 2.0 * mu * m_mat, -2.0 * mu * rhs)

    def dist_sq(z):
        y = vecs @ z + d
        return float(np.dot(w, y * y))

    # feasibility: closest reachable point to the center in the V-norm
    z_star = np.linalg.solve(m_mat, -rhs)
    if dist_sq(z_star) > delta**2 * (1.0 + 1e-12):
        return np.inf

    def phi(mu):
        return dist_sq(z_of(mu)) - delta**2

    mu_hi = 1.0
    while phi(mu_hi) > 0.0:
        mu_hi *= 4.0
        if mu_hi > 1e18:
            return np.inf
    mu_opt = scipy.optimize.brentq(phi, 0.0, mu_hi, xtol=1e-15, rtol=1e-14)
    z = z_of(mu_opt)
    return 0.5 * float(np.sum(p_diag * z * z))


# -- control path import/export --------------------------------------------


def export_control_csv(path, control: ControlPath) -> None:
    """Write a control as RFC-4180 rows (t, hdot_1..hdot_m), one row per
    grid cell, t at the cell's left edge."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t"] + [f"hdot_{j + 1}" for j in range(control.m)])
        for k in range(control.cells):
            writer.writerow(
                [repr(k * control.dt_cell)] + [repr(float(v)) for v in control.hdot[k]]
            )
        writer.writerow([repr(control.horizon)] + ["0"] * control.m)


def import_control_csv(path) -> ControlPath:
    """Read a control written by ``export_control_csv``; the trailing
    horizon row carries no derivative values."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 3 or not rows[0] or rows[0][0] != "t":
        raise FormatError(f"{path} is not a control CSV (missing 't' header)")
    try:
        data = np.array([[float(v) for v in row] for row in rows[1:]], dtype=float)
    except ValueError as exc:
        raise FormatError(f"{path} has a non-numeric control entry: {exc}") from exc
    if data.shape[1] < 2:
        raise FormatError(f"{path} has no control columns")
    horizon = data[-1, 0]
    return ControlPath(horizon=horizon, hdot=data[:-1, 1:])
