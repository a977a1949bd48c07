"""Monte Carlo estimation of small-noise hitting probabilities and the
empirical scaling studies that compare them with the action machinery.

Estimation is plain Monte Carlo: no importance sampling, censored rows
where the event was never hit.  Every sample path draws its increments
from a counter-based generator keyed by (master seed, trajectory index),
and hit counting is an associative integer reduction, so estimates are
bit-identical for any thread count or chunk schedule.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .basis import BasisSpec
from .errors import ConfigError, DimensionMismatchError
from .integrators import ControlPath, NoiseDriver, _step_grid, run_em_batch, solve_skeleton, solve_spde
from .operators import ModelConfig, TrilinearTensor

Z_95 = 1.959963984540054  # two-sided 95% normal quantile


def wilson_interval(hits: int, n: int, z: float = Z_95) -> tuple:
    """Wilson score interval for a binomial proportion.

    Chosen over the normal approximation because sweep tails live at
    single-digit hit counts where the latter collapses.
    """
    if n <= 0:
        raise ConfigError("n", f"sample count must be positive, got {n}")
    if not 0 <= hits <= n:
        raise ConfigError("hits", f"hit count {hits} outside [0, {n}]")
    p = hits / n
    denom = 1.0 + z * z / n
    center = (p + z * z / (2 * n)) / denom
    half = (z / denom) * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n))
    lo = 0.0 if hits == 0 else max(0.0, center - half)  # exact root at the edge
    hi = 1.0 if hits == n else min(1.0, center + half)
    return (lo, hi)


@dataclass(frozen=True, eq=False)
class EventBall:
    """Terminal-time event: the closed V-norm ball of radius delta."""

    center: np.ndarray
    radius: float
    norm: str = "V"

    def __post_init__(self):
        if self.norm != "V":
            raise ConfigError("norm", f"only the V norm is supported, got {self.norm!r}")
        if not np.isfinite(self.radius) or self.radius <= 0:
            raise ConfigError("delta", f"event radius must be positive, got {self.radius}")
        c = np.asarray(self.center, dtype=float)
        object.__setattr__(self, "center", c)
        c.setflags(write=False)

    def hits(self, endpoints: np.ndarray, basis: BasisSpec) -> np.ndarray:
        """Boolean hit mask for a batch of endpoint coefficient rows."""
        if endpoints.shape[-1] != basis.size:
            raise DimensionMismatchError(basis.size, endpoints.shape[-1], "endpoints")
        diff = endpoints - self.center[None, :]
        dist_sq = diff * diff @ basis.w_v
        return dist_sq <= self.radius**2

    def to_json_dict(self) -> dict:
        return {
            "center": self.center.tolist(),
            "radius": self.radius,
            "norm": self.norm,
        }


@dataclass(frozen=True, eq=False)
class ProbEstimate:
    p_hat: float
    n_samples: int
    n_hits: int
    wilson_lo: float
    wilson_hi: float
    eps: float
    event: EventBall

    def __post_init__(self):
        assert 0.0 <= self.p_hat <= 1.0
        assert self.wilson_lo <= self.p_hat <= self.wilson_hi

    def to_json_dict(self) -> dict:
        return {
            "p_hat": self.p_hat,
            "n_samples": self.n_samples,
            "n_hits": self.n_hits,
            "wilson_lo": self.wilson_lo,
            "wilson_hi": self.wilson_hi,
            "eps": self.eps,
            "event": self.event.to_json_dict(),
        }


def _chunk_ranges(n: int, chunk: int):
    for start in range(0, n, chunk):
        yield start, min(start + chunk, n)


def _ensemble_counts(
    config: ModelConfig,
    tensor: Optional[TrilinearTensor],
    eps: float,
    n: int,
    event: EventBall,
    master_seed: int,
    dt: float,
    threads: int,
    chunk: int,
    stream_offset: int,
    collect_sup_w: bool = False,
):
    """Hit count plus optional per-path sup-W values, chunked over a
    thread pool.  Per-trajectory generator streams make the result a sum
    of fixed integers, independent of scheduling."""
    n_steps, _ = _step_grid(config.horizon, dt, None)
    m = config.m
    basis = config.basis

    def run_chunk(bounds):
        start, stop = bounds
        b = stop - start
        noise = np.empty((b, n_steps, m))
        for i in range(b):
            noise[i] = NoiseDriver(master_seed, stream_offset + start + i, m).increments(
                n_steps, dt
            )
        out = run_em_batch(config, tensor, eps, dt, noise)
        hits = int(np.count_nonzero(event.hits(out["endpoints"], basis)))
        return hits, (out["sup_w"] if collect_sup_w else None)

    bounds = list(_chunk_ranges(n, chunk))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_chunk, bounds))
    else:
        results = [run_chunk(b) for b in bounds]
    total_hits = sum(h for h, _ in results)
    sup_w = np.concatenate([s for _, s in results]) if collect_sup_w else None
    return total_hits, sup_w


def run_ensemble(
    config: ModelConfig,
    eps: float,
    n: int,
    event: EventBall,
    master_seed: int,
    dt: float = 0.01,
    tensor: Optional[TrilinearTensor] = None,
    threads: int = 1,
    chunk: int = 2048,
    stream_offset: int = 0,
) -> ProbEstimate:
    """Estimate P(||u^eps(T) - x||_V <= delta) over n uncontrolled paths."""
    if n < 1:
        raise ConfigError("n", f"sample count must be at least 1, got {n}")
    if eps < 0:
        raise ConfigError("eps", f"noise scale must be nonnegative, got {eps}")
    hits, _ = _ensemble_counts(
        config, tensor, eps, n, event, master_seed, dt, threads, chunk, stream_offset
    )
    lo, hi = wilson_interval(hits, n)
    return ProbEstimate(
        p_hat=hits / n,
        n_samples=n,
        n_hits=hits,
        wilson_lo=lo,
        wilson_hi=hi,
        eps=eps,
        event=event,
    )


# -- epsilon sweep ---------------------------------------------------------


@dataclass(frozen=True)
class SweepRow:
    """One epsilon's worth of sweep output.

    The transformed bounds come from pushing the Wilson interval through
    p -> -eps log p (decreasing, so the upper probability bound gives the
    lower transformed bound).  A row with zero hits is censored: the
    point value and upper transformed bound are unavailable.
    """

    eps: float
    n_samples: int
    n_hits: int
    p_hat: float
    wilson_lo: float
    wilson_hi: float
    neg_eps_log_p: float
    bound_lo: float
    bound_hi: float
    i_ref: float
    censored: bool

    def to_json_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass(frozen=True)
class SweepReport:
    rows: tuple
    i_ref: float
    monotone_ok: bool
    final_gap: float

    def to_json_dict(self) -> dict:
        return {
            "rows": [r.to_json_dict() for r in self.rows],
            "i_ref": self.i_ref,
            "monotone_ok": self.monotone_ok,
            "final_gap": self.final_gap,
        }


def _sweep_row(est: ProbEstimate, i_ref: float) -> SweepRow:
    censored = est.n_hits == 0
    neg = float("nan") if censored else -est.eps * math.log(est.p_hat)
    bound_lo = -est.eps * math.log(est.wilson_hi) if est.wilson_hi > 0 else float("inf")
    bound_hi = -est.eps * math.log(est.wilson_lo) if est.wilson_lo > 0 else float("inf")
    return SweepRow(
        eps=est.eps,
        n_samples=est.n_samples,
        n_hits=est.n_hits,
        p_hat=est.p_hat,
        wilson_lo=est.wilson_lo,
        wilson_hi=est.wilson_hi,
        neg_eps_log_p=neg,
        bound_lo=bound_lo,
        bound_hi=bound_hi,
        i_ref=i_ref,
        censored=censored,
    )


def ldp_sweep(
    config: ModelConfig,
    eps_list: Sequence[float],
    n_per_eps: int,
    event: EventBall,
    i_ref: float,
    master_seed: int,
    dt: float = 0.01,
    tensor: Optional[TrilinearTensor] = None,
    threads: int = 1,
    chunk: int = 2048,
) -> SweepReport:
    """Estimate -eps log p over a decreasing eps ladder and compare the
    decay against a reference rate.

    The monotone-trend statistic allows consecutive rows the slack of
    their combined transformed half-widths, so sampling noise alone does
    not fail the trend.  ``final_gap`` is |last value - i_ref| / i_ref
    (absolute rather than relative when i_ref is zero), nan when the
    last row is censored.
    """
    eps_list = list(eps_list)
    if len(eps_list) < 2 or any(
        e2 >= e1 for e1, e2 in zip(eps_list, eps_list[1:])
    ):
        raise ConfigError("eps", "sweep needs a strictly decreasing eps list")
    rows = []
    for j, eps in enumerate(eps_list):
        est = run_ensemble(
            config,
            eps,
            n_per_eps,
            event,
            master_seed,
            dt=dt,
            tensor=tensor,
            threads=threads,
            chunk=chunk,
            stream_offset=j * n_per_eps,
        )
        rows.append(_sweep_row(est, i_ref))

    monotone_ok = True
    prev = None
    for row in rows:
        if row.censored:
            continue
        if prev is not None:
            slack = (prev.bound_hi - prev.bound_lo) / 2 + (row.bound_hi - row.bound_lo) / 2
            if row.neg_eps_log_p > prev.neg_eps_log_p + slack:
                monotone_ok = False
        prev = row

    last = rows[-1]
    if last.censored:
        final_gap = float("nan")
    elif i_ref == 0.0:
        final_gap = abs(last.neg_eps_log_p)  # absolute gap at a zero reference
    else:
        final_gap = abs(last.neg_eps_log_p - i_ref) / abs(i_ref)
    return SweepReport(
        rows=tuple(rows), i_ref=i_ref, monotone_ok=monotone_ok, final_gap=final_gap
    )


# -- weak-convergence condition (a): controlled paths track the skeleton ---


def _sup_dev(states: np.ndarray, ref: np.ndarray, w_v: np.ndarray) -> float:
    diff = states - ref
    return float(np.sqrt(np.max((diff * diff) @ w_v)))


def condition_a_check(
    config: ModelConfig,
    control: ControlPath,
    eps_list: Sequence[float],
    n_rep: int,
    master_seed: int,
    dt: float = 1.0 / 128,
    tensor: Optional[TrilinearTensor] = None,
    perturb_scale: float = 1.0,
) -> dict:
    """Empirical version of the first weak-convergence condition.

    For each eps, perturb the control by sqrt(eps) times a unit-energy
    random direction, drive the noisy equation (noise scale eps) with the
    perturbed control, and measure sup_t distance to the unperturbed
    skeleton.  Reports the per-eps mean discrepancy, its split into a
    noise-only term and a deterministic control-difference term, and a
    least-squares fit of the means against C*sqrt(eps).
    """
    basis = config.basis
    k_cells, m = control.cells, control.m
    skel = solve_skeleton(config, control, dt, tensor=tensor)
    perturb_rng = np.random.Generator(np.random.Philox(key=[master_seed, 999983]))
    rows = []
    for j, eps in enumerate(sorted(eps_list, reverse=True)):
        devs, noise_terms, ctrl_terms = [], [], []
        for r in range(n_rep):
            xi = perturb_rng.standard_normal((k_cells, m))
            xi_path = ControlPath(config.horizon, xi)
            xi = xi / math.sqrt(max(2.0 * xi_path.cost(), 1e-300))  # unit energy
            h_eps = ControlPath(
                config.horizon, control.hdot + math.sqrt(eps) * perturb_scale * xi
            )
            stream = j * n_rep + r
            traj = solve_spde(
                config,
                eps,
                h_eps,
                NoiseDriver(master_seed, stream, m),
                dt,
                tensor=tensor,
            )
            devs.append(_sup_dev(traj.states, skel.states, basis.w_v))
            noise_only = solve_spde(
                config,
                eps,
                control,
                NoiseDriver(master_seed, 500000 + stream, m),
                dt,
                tensor=tensor,
            )
            noise_terms.append(_sup_dev(noise_only.states, skel.states, basis.w_v))
            skel_pert = solve_skeleton(config, h_eps, dt, tensor=tensor)
            ctrl_terms.append(_sup_dev(skel_pert.states, skel.states, basis.w_v))
        rows.append(
            {
                "eps": eps,
                "mean_sup_dev": float(np.mean(devs)),
                "noise_term": float(np.mean(noise_terms)),
                "control_term": float(np.mean(ctrl_terms)),
            }
        )

    e = np.array([row["eps"] for row in rows])
    y = np.array([row["mean_sup_dev"] for row in rows])
    root_e = np.sqrt(e)
    c_fit = float(np.dot(root_e, y) / np.dot(root_e, root_e))
    resid = y - c_fit * root_e
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r_squared = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return {
        "rows": rows,
        "c_fit": c_fit,
        "r_squared": r_squared,
        "n_rep": n_rep,
        "perturb_scale": perturb_scale,
    }


# -- weak-convergence condition (b): compactness proxies -------------------


def sample_energy_ball(
    n_controls: int, cells: int, m: int, horizon: float, n_bound: float, rng
) -> list:
    """Random controls with energy spread over (0, n_bound]."""
    out = []
    for _ in range(n_controls):
        hdot = rng.standard_normal((cells, m))
        path = ControlPath(horizon, hdot)
        target = n_bound * rng.uniform(0.05, 1.0)
        e = path.energy()
        if e > 0:
            path = path.scaled(math.sqrt(target / e))
        out.append(ControlPath(horizon, path.hdot, n_bound))
    return out


def _greedy_covering(dist: np.ndarray, radius: float) -> int:
    """Size of a greedy net: centers chosen first-come among uncovered points."""
    n = dist.shape[0]
    covered = np.zeros(n, dtype=bool)
    count = 0
    for i in range(n):
        if not covered[i]:
            count += 1
            covered |= dist[i] <= radius
    return count


def condition_b_check(
    config: ModelConfig,
    n_bound: float,
    n_controls: int,
    master_seed: int,
    cells: int = 16,
    dt: float = 1.0 / 64,
    tensor: Optional[TrilinearTensor] = None,
) -> dict:
    """Empirical version of the second weak-convergence condition.

    Maps random controls from the energy ball through the skeleton,
    then reports (i) an empirical modulus of continuity (image sup-V
    distance against control energy distance) and (ii) the greedy
    covering-number curve of the image set at geometrically shrinking
    radii, as a total-boundedness proxy.
    """
    basis = config.basis
    m = config.m
    rng = np.random.Generator(np.random.Philox(key=[master_seed, 424243]))
    controls = sample_energy_ball(n_controls, cells, m, config.horizon, n_bound, rng)
    paths = np.stack(
        [solve_skeleton(config, h, dt, tensor=tensor).states for h in controls]
    )

    n = n_controls
    image_dist = np.zeros((n, n))
    ctrl_dist = np.zeros((n, n))
    dt_cell = controls[0].dt_cell
    for i in range(n):
        for j in range(i + 1, n):
            diff = paths[i] - paths[j]
            dij = float(np.sqrt(np.max((diff * diff) @ basis.w_v)))
            hij = controls[i].hdot - controls[j].hdot
            cij = math.sqrt(float(np.sum(hij * hij)) * dt_cell)
            image_dist[i, j] = image_dist[j, i] = dij
            ctrl_dist[i, j] = ctrl_dist[j, i] = cij

    iu = np.triu_indices(n, k=1)
    ratios = image_dist[iu] / np.maximum(ctrl_dist[iu], 1e-12)
    lipschitz_max = float(ratios.max())
    lipschitz_lsq = float(
        np.dot(image_dist[iu], ctrl_dist[iu]) / np.dot(ctrl_dist[iu], ctrl_dist[iu])
    )
    diameter = float(image_dist.max())
    covering = []
    for level in range(6):
        radius = diameter / 2**level if diameter > 0 else 0.0
        covering.append({"radius": radius, "count": _greedy_covering(image_dist, radius)})
    return {
        "n_controls": n_controls,
        "n_bound": n_bound,
        "lipschitz_max": lipschitz_max,
        "lipschitz_lsq": lipschitz_lsq,
        "diameter": diameter,
        "covering": covering,
    }


# -- uniform-in-eps moment proxy -------------------------------------------


def moment_sweep(
    config: ModelConfig,
    eps_list: Sequence[float],
    n_rep: int,
    master_seed: int,
    dt: float = 0.01,
    tensor: Optional[TrilinearTensor] = None,
    threads: int = 1,
    chunk: int = 2048,
) -> dict:
    """Empirical E[sup_t ||u^eps||_W^4] per eps, plus the max/min ratio.

    A ratio near 1 across the ladder is the finite-sample analogue of a
    uniform-in-eps fourth-moment bound.
    """
    basis = config.basis
    dummy_event = EventBall(center=np.zeros(basis.size), radius=1.0)
    rows = []
    for j, eps in enumerate(eps_list):
        _, sup_w = _ensemble_counts(
            config,
            tensor,
            eps,
            n_rep,
            dummy_event,
            master_seed,
            dt,
            threads,
            chunk,
            stream_offset=j * n_rep,
            collect_sup_w=True,
        )
        rows.append({"eps": eps, "mean_sup_w4": float(np.mean(sup_w**4))})
    values = [row["mean_sup_w4"] for row in rows]
    ratio = max(values) / min(values) if min(values) > 0 else float("inf")
    return {"rows": rows, "ratio": ratio}
