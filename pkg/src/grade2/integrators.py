"""Time integration of the stochastic and controlled dynamics.

Two schemes, one drift.  The stochastic path uses Euler-Maruyama (strong
order 1/2, all the Monte Carlo needs); the deterministic skeleton path
uses the classical 4-stage Runge-Kutta method, because rate-function
accuracy hinges on skeleton accuracy.  The skeleton solve also carries
the dissipation integral ``int_0^t ||grad u||^2 ds`` through the same
stages, so the discrete energy identity can be checked to integrator
order without post-hoc quadrature.

Noise is generated by a counter-based Philox generator keyed by
``(seed, stream)``: a trajectory's increments depend only on that key
and the step count, never on scheduling, which is what makes ensembles
bit-reproducible under any thread count.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .basis import BasisSpec
from .errors import BlowUpError, ConfigError, DimensionMismatchError
from .operators import (
    ModelConfig,
    TrilinearTensor,
    drift,
    drift_batch,
    ghat_dot,
    noise_increment_batch,
)

DEFAULT_V_CEILING = 1e6


@dataclass(frozen=True, eq=False)
class ControlPath:
    """Piecewise-constant control derivative on a uniform grid.

    ``hdot`` has shape (K, m): K cells over [0, horizon], one vector per
    cell.  The path it integrates to is continuous and piecewise linear;
    its action cost is ``0.5 * sum |hdot_k|^2 * dt_cell``.
    """

    horizon: float
    hdot: np.ndarray
    n_bound: Optional[float] = None

    def __post_init__(self):
        hd = np.asarray(self.hdot, dtype=float)
        if hd.ndim != 2 or hd.shape[0] < 1:
            raise ConfigError("control", f"hdot must be (K, m), got shape {hd.shape}")
        if not np.all(np.isfinite(hd)):
            raise ConfigError("control", "control derivative has non-finite entries")
        if not np.isfinite(self.horizon) or self.horizon <= 0:
            raise ConfigError("T", f"control horizon must be positive, got {self.horizon}")
        object.__setattr__(self, "hdot", hd)
        hd.setflags(write=False)
        if self.n_bound is not None and self.energy() > self.n_bound * (1 + 1e-9):
            raise ConfigError(
                "control",
                f"control energy {self.energy():.6g} exceeds the declared "
                f"ball radius {self.n_bound:.6g}",
            )

    @property
    def cells(self) -> int:
        return self.hdot.shape[0]

    @property
    def m(self) -> int:
        return self.hdot.shape[1]

    @property
    def dt_cell(self) -> float:
        return self.horizon / self.cells

    def energy(self) -> float:
        """Integral of |hdot|^2 over [0, horizon]."""
        return float((self.hdot**2).sum() * self.dt_cell)

    def cost(self) -> float:
        return 0.5 * self.energy()

    def h_values(self) -> np.ndarray:
        """The integrated path h at the K+1 cell boundaries, shape (K+1, m)."""
        out = np.zeros((self.cells + 1, self.m))
        np.cumsum(self.hdot * self.dt_cell, axis=0, out=out[1:])
        return out

    def scaled(self, factor: float) -> "ControlPath":
        return ControlPath(self.horizon, factor * self.hdot, None)

    def clipped_to_ball(self, n_bound: float) -> "ControlPath":
        """Radially project onto the energy ball of radius ``n_bound``."""
        e = self.energy()
        if e <= n_bound or e == 0.0:
            return ControlPath(self.horizon, self.hdot, n_bound)
        return ControlPath(self.horizon, np.sqrt(n_bound / e) * self.hdot, n_bound)

    @staticmethod
    def zero(cells: int, m: int, horizon: float) -> "ControlPath":
        return ControlPath(horizon, np.zeros((cells, m)))


@dataclass(frozen=True, eq=False)
class Trajectory:
    """A sampled path with its provenance and running norm records."""

    times: np.ndarray
    states: np.ndarray
    dt: float
    eps: float
    seed: Optional[int]
    stream: Optional[int]
    config_hash: str
    sup_v: float
    sup_w: float
    dissipation: Optional[np.ndarray] = None

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        s = np.asarray(self.states, dtype=float)
        if t.ndim != 1 or s.ndim != 2 or s.shape[0] != t.shape[0]:
            raise DimensionMismatchError(t.shape[0], s.shape[0], "trajectory states")
        if t[0] != 0.0 or np.any(np.diff(t) <= 0):
            raise ConfigError("times", "trajectory times must start at 0 and increase")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "states", s)
        t.setflags(write=False)
        s.setflags(write=False)

    def endpoint(self) -> np.ndarray:
        return self.states[-1]


@dataclass(frozen=True)
class NoiseDriver:
    """Counter-based Brownian increment source.

    ``increments(n_steps, dt)`` always regenerates from the fixed
    ``(seed, stream)`` key, so the same call is bit-identical anywhere,
    on any thread, in any order.
    """

    seed: int
    stream: int
    m: int

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=[self.seed, self.stream]))

    def increments(self, n_steps: int, dt: float) -> np.ndarray:
        gauss = self.generator().standard_normal((n_steps, self.m))
        return gauss * np.sqrt(dt)


def _step_grid(horizon: float, dt: float, control: Optional[ControlPath]):
    """Number of steps and steps-per-control-cell, with divisibility checks."""
    if not np.isfinite(dt) or dt <= 0:
        raise ConfigError("dt", f"dt must be positive, got {dt}")
    n_steps = int(round(horizon / dt))
    if n_steps < 1 or abs(n_steps * dt - horizon) > 1e-8 * max(horizon, 1.0):
        raise ConfigError("dt", f"dt={dt} does not divide the horizon {horizon}")
    steps_per_cell = 0
    if control is not None:
        if abs(control.horizon - horizon) > 1e-12 * max(horizon, 1.0):
            raise ConfigError("control", "control horizon differs from the model horizon")
        if n_steps % control.cells != 0:
            raise ConfigError(
                "dt",
                f"dt must subdivide the control grid: {n_steps} steps vs "
                f"{control.cells} cells",
            )
        steps_per_cell = n_steps // control.cells
    return n_steps, steps_per_cell


def _v_w_sq(u: np.ndarray, basis: BasisSpec):
    u2 = u * u
    v_sq = float(np.dot(basis.w_v, u2))
    w_sq = v_sq + float(np.dot(basis.w_curlx, u2))
    return v_sq, w_sq


def step_em(
    u: np.ndarray,
    t: float,
    dt: float,
    dW: Optional[np.ndarray],
    hdot: Optional[np.ndarray],
    eps: float,
    config: ModelConfig,
    tensor: Optional[TrilinearTensor],
    v_ceiling: float = DEFAULT_V_CEILING,
) -> np.ndarray:
    """One Euler-Maruyama step."""
    new = u + dt * drift(u, t, hdot, config, tensor)
    if eps > 0.0 and dW is not None and config.m:
        new = new + np.sqrt(eps) * ghat_dot(u, t, dW, config.forcing, config.basis)
    v_sq = float(np.dot(config.basis.w_v, new * new))
    if not np.isfinite(v_sq) or v_sq > v_ceiling**2:
        raise BlowUpError(t + dt, np.sqrt(v_sq), v_ceiling)
    return new


def solve_spde(
    config: ModelConfig,
    eps: float,
    control: Optional[ControlPath],
    driver: Optional[NoiseDriver],
    dt: float,
    save_stride: int = 1,
    tensor: Optional[TrilinearTensor] = None,
    noise: Optional[np.ndarray] = None,
    v_ceiling: float = DEFAULT_V_CEILING,
    config_hash: str = "",
) -> Trajectory:
    """Euler-Maruyama path of the (optionally controlled) stochastic system.

    ``noise`` may carry pregenerated increments of shape (n_steps, m),
    overriding the driver; this is how refinement studies synchronize
    increments across step sizes.  Running suprema of the V- and W-norms
    are tracked at every step, saved states only every ``save_stride``.
    """
    basis = config.basis
    if eps < 0:
        raise ConfigError("eps", f"eps must be >= 0, got {eps}")
    n_steps, steps_per_cell = _step_grid(config.horizon, dt, control)
    if control is not None and config.m and control.m != config.m:
        raise DimensionMismatchError(config.m, control.m, "control dimension")
    m = config.m
    if eps > 0.0 and m:
        if noise is None:
            if driver is None:
                raise ConfigError("seed", "eps > 0 requires a noise driver or increments")
            noise = driver.increments(n_steps, dt)
        noise = np.asarray(noise, dtype=float)
        if noise.shape != (n_steps, m):
            raise DimensionMismatchError(n_steps, noise.shape[0], "noise increments")
    if save_stride < 1:
        raise ConfigError("save_stride", "save_stride must be >= 1")

    u = basis.check_field(config.u0).copy()
    sqrt_eps = np.sqrt(eps)
    v_sq, w_sq = _v_w_sq(u, basis)
    sup_v_sq, sup_w_sq = v_sq, w_sq

    times = [0.0]
    states = [u.copy()]
    t = 0.0
    for i in range(n_steps):
        hdot_i = control.hdot[i // steps_per_cell] if control is not None else None
        new = u + dt * drift(u, t, hdot_i, config, tensor)
        if sqrt_eps > 0.0 and m:
            new += sqrt_eps * ghat_dot(u, t, noise[i], config.forcing, basis)
        u = new
        t = (i + 1) * dt
        v_sq, w_sq = _v_w_sq(u, basis)
        if not np.isfinite(v_sq) or v_sq > v_ceiling**2:
            raise BlowUpError(t, np.sqrt(v_sq), v_ceiling)
        sup_v_sq = max(sup_v_sq, v_sq)
        sup_w_sq = max(sup_w_sq, w_sq)
        if (i + 1) % save_stride == 0 or (i + 1) == n_steps:
            times.append(t)
            states.append(u.copy())

    return Trajectory(
        times=np.array(times),
        states=np.array(states),
        dt=dt,
        eps=eps,
        seed=driver.seed if driver is not None else None,
        stream=driver.stream if driver is not None else None,
        config_hash=config_hash,
        sup_v=float(np.sqrt(sup_v_sq)),
        sup_w=float(np.sqrt(sup_w_sq)),
    )


def solve_skeleton(
    config: ModelConfig,
    control: Optional[ControlPath],
    dt: float,
    save_stride: int = 1,
    tensor: Optional[TrilinearTensor] = None,
    v_ceiling: float = DEFAULT_V_CEILING,
    config_hash: str = "",
) -> Trajectory:
    """Deterministic controlled path by the classical 4-stage method.

    The returned trajectory carries ``dissipation``, the integral of
    ``||grad u||^2`` up to each saved time, advanced through the same
    Runge-Kutta stages as the state (the integrand is evaluated at the
    stage states), hence accurate to the scheme's order.
    """
    basis = config.basis
    n_steps, steps_per_cell = _step_grid(config.horizon, dt, control)
    if control is not None and config.m and control.m != config.m:
        raise DimensionMismatchError(config.m, control.m, "control dimension")
    if save_stride < 1:
        raise ConfigError("save_stride", "save_stride must be >= 1")

    def grad_sq(x):
        return float(np.dot(basis.w_grad, x * x))

    u = basis.check_field(config.u0).copy()
    z = 0.0
    v_sq, w_sq = _v_w_sq(u, basis)
    sup_v_sq, sup_w_sq = v_sq, w_sq
    times = [0.0]
    states = [u.copy()]
    diss = [0.0]

    for i in range(n_steps):
        hdot_i = control.hdot[i // steps_per_cell] if control is not None else None
        t = i * dt
        x1 = u
        k1 = drift(x1, t, hdot_i, config, tensor)
        x2 = u + 0.5 * dt * k1
        k2 = drift(x2, t + 0.5 * dt, hdot_i, config, tensor)
        x3 = u + 0.5 * dt * k2
        k3 = drift(x3, t + 0.5 * dt, hdot_i, config, tensor)
        x4 = u + dt * k3
        k4 = drift(x4, t + dt, hdot_i, config, tensor)
        u = u + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        z = z + (dt / 6.0) * (
            grad_sq(x1) + 2.0 * grad_sq(x2) + 2.0 * grad_sq(x3) + grad_sq(x4)
        )
        t_next = (i + 1) * dt
        v_sq, w_sq = _v_w_sq(u, basis)
        if not np.isfinite(v_sq) or v_sq > v_ceiling**2:
            raise BlowUpError(t_next, np.sqrt(v_sq), v_ceiling)
        sup_v_sq = max(sup_v_sq, v_sq)
        sup_w_sq = max(sup_w_sq, w_sq)
        if (i + 1) % save_stride == 0 or (i + 1) == n_steps:
            times.append(t_next)
            states.append(u.copy())
            diss.append(z)

    return Trajectory(
        times=np.array(times),
        states=np.array(states),
        dt=dt,
        eps=0.0,
        seed=None,
        stream=None,
        config_hash=config_hash,
        sup_v=float(np.sqrt(sup_v_sq)),
        sup_w=float(np.sqrt(sup_w_sq)),
        dissipation=np.array(diss),
    )


def run_em_batch(
    config: ModelConfig,
    tensor: Optional[TrilinearTensor],
    eps: float,
    dt: float,
    noise: np.ndarray,
    control: Optional[ControlPath] = None,
    ref_states: Optional[np.ndarray] = None,
    v_ceiling: float = DEFAULT_V_CEILING,
) -> dict:
    """Vectorized Euler-Maruyama over a batch of noise blocks.

    ``noise`` has shape (B, n_steps, m); every row is one trajectory's
    pregenerated increments.  Only elementwise operations, fixed-shape
    contractions, and per-row reductions run in here, so the results for
    a given noise block are bit-identical no matter how the caller chunks
    or threads the ensemble.

    ``ref_states`` (n_steps + 1, M), when given, is a reference path
    aligned with the step grid; the per-row supremum V-distance to it is
    tracked (the deviation statistic of the shifted-trajectory check).

    Returns a dict with ``endpoints`` (B, M), ``sup_v``, ``sup_w`` and,
    with a reference, ``sup_dev_v`` (all shape (B,)).
    """
    basis = config.basis
    noise = np.asarray(noise, dtype=float)
    if noise.ndim != 3:
        raise DimensionMismatchError(3, noise.ndim, "noise block rank")
    n_batch, n_steps, m = noise.shape
    if m != config.m:
        raise DimensionMismatchError(config.m, m, "noise dimension")
    expected_steps, steps_per_cell = _step_grid(config.horizon, dt, control)
    if n_steps != expected_steps:
        raise DimensionMismatchError(expected_steps, n_steps, "noise step count")
    if ref_states is not None and ref_states.shape != (n_steps + 1, basis.size):
        raise DimensionMismatchError(n_steps + 1, ref_states.shape[0], "reference path")

    U = np.broadcast_to(basis.check_field(config.u0), (n_batch, basis.size)).copy()
    sqrt_eps = np.sqrt(eps)
    w_v = basis.w_v[None, :]
    w_cx = basis.w_curlx[None, :]

    v_sq = (U * U * w_v).sum(axis=1)
    sup_v_sq = v_sq.copy()
    sup_w_sq = v_sq + (U * U * w_cx).sum(axis=1)
    if ref_states is not None:
        d = U - ref_states[0][None, :]
        sup_dev_sq = (d * d * w_v).sum(axis=1)

    for i in range(n_steps):
        t = i * dt
        hdot_i = control.hdot[i // steps_per_cell] if control is not None else None
        new = U + dt * drift_batch(U, t, hdot_i, config, tensor)
        if sqrt_eps > 0.0 and m:
            new += sqrt_eps * noise_increment_batch(U, t, noise[:, i, :], config.forcing, basis)
        U = new
        u2 = U * U
        v_sq = (u2 * w_v).sum(axis=1)
        bad = ~np.isfinite(v_sq) | (v_sq > v_ceiling**2)
        if np.any(bad):
            bad_vals = v_sq[bad]
            worst = float(np.max(np.where(np.isfinite(bad_vals), bad_vals, np.inf)))
            raise BlowUpError((i + 1) * dt, float(np.sqrt(worst)), v_ceiling)
        np.maximum(sup_v_sq, v_sq, out=sup_v_sq)
        np.maximum(sup_w_sq, v_sq + (u2 * w_cx).sum(axis=1), out=sup_w_sq)
        if ref_states is not None:
            d = U - ref_states[i + 1][None, :]
            np.maximum(sup_dev_sq, (d * d * w_v).sum(axis=1), out=sup_dev_sq)

    out = {
        "endpoints": U,
        "sup_v": np.sqrt(sup_v_sq),
        "sup_w": np.sqrt(sup_w_sq),
    }
    if ref_states is not None:
        out["sup_dev_v"] = np.sqrt(sup_dev_sq)
    return out
