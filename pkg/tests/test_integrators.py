"""Stepping schemes: reproducibility, convergence, and energy conservation."""

import numpy as np
import pytest

from grade2 import basis as gb
from grade2 import operators as ops
from grade2.errors import BlowUpError, ConfigError, DimensionMismatchError
from grade2.integrators import (
    ControlPath,
    NoiseDriver,
    Trajectory,
    run_em_batch,
    solve_skeleton,
    solve_spde,
    step_em,
)


@pytest.fixture(scope="module")
def spec2():
    return gb.build_torus_basis(2, 1.0)


@pytest.fixture(scope="module")
def tensor2(spec2):
    return ops.assemble_trilinear(spec2, use_cache=False)


def smooth_u0(basis, amp=1.0):
    u = np.zeros(basis.size)
    u[basis.index_of(gb.ModeKey(1, 0, "cos"))] = 0.8 * amp
    u[basis.index_of(gb.ModeKey(0, 1, "sin"))] = 0.5 * amp
    return u


def plain_config(basis, nu=1.0, horizon=1.0, forcing=None, u0=None, nonlinear=True):
    return ops.ModelConfig(
        nu=nu,
        basis=basis,
        forcing=forcing if forcing is not None else ops.ForcingSpec(),
        u0=u0 if u0 is not None else smooth_u0(basis),
        horizon=horizon,
        include_nonlinear=nonlinear,
    )


# -- control paths ---------------------------------------------------------


def test_control_path_cost_and_h():
    hdot = np.array([[1.0, 0.0], [0.0, -2.0], [1.0, 1.0], [0.0, 0.0]])
    path = ControlPath(horizon=2.0, hdot=hdot)
    assert path.cells == 4 and path.m == 2 and path.dt_cell == 0.5
    assert path.energy() == pytest.approx((1 + 4 + 2) * 0.5)
    assert path.cost() == pytest.approx(0.5 * path.energy())
    h = path.h_values()
    assert h.shape == (5, 2)
    assert np.allclose(h[0], 0.0)
    assert np.allclose(h[-1], hdot.sum(axis=0) * 0.5)


def test_control_path_validation_and_ball():
    with pytest.raises(ConfigError):
        ControlPath(horizon=1.0, hdot=np.zeros(3))  # wrong rank
    with pytest.raises(ConfigError):
        ControlPath(horizon=1.0, hdot=np.full((2, 1), np.inf))
    with pytest.raises(ConfigError):
        ControlPath(horizon=1.0, hdot=np.full((2, 1), 10.0), n_bound=1.0)
    big = ControlPath(horizon=1.0, hdot=np.full((4, 1), 3.0))
    clipped = big.clipped_to_ball(2.0)
    assert clipped.energy() == pytest.approx(2.0)
    small = ControlPath(horizon=1.0, hdot=np.full((4, 1), 0.1))
    assert small.clipped_to_ball(2.0).energy() == pytest.approx(small.energy())


def test_trajectory_invariants():
    with pytest.raises(ConfigError):
        Trajectory(
            times=np.array([0.5, 1.0]),
            states=np.zeros((2, 3)),
            dt=0.5,
            eps=0.0,
            seed=None,
            stream=None,
            config_hash="",
            sup_v=0.0,
            sup_w=0.0,
        )
    with pytest.raises(DimensionMismatchError):
        Trajectory(
            times=np.array([0.0, 0.5]),
            states=np.zeros((3, 3)),
            dt=0.5,
            eps=0.0,
            seed=None,
            stream=None,
            config_hash="",
            sup_v=0.0,
            sup_w=0.0,
        )


# -- noise driver ----------------------------------------------------------


def test_noise_driver_bit_exact():
    d = NoiseDriver(seed=1234, stream=7, m=3)
    a = d.increments(50, 0.01)
    b = d.increments(50, 0.01)
    assert np.array_equal(a, b)
    other = NoiseDriver(seed=1234, stream=8, m=3)
    assert not np.array_equal(a, other.increments(50, 0.01))


# -- single steps ----------------------------------------------------------


def test_step_em_single_mode_decay(spec2, tensor2):
    cfg = plain_config(spec2, nu=0.7)
    u = np.zeros(spec2.size)
    i = spec2.index_of(gb.ModeKey(1, 1, "cos"))
    u[i] = 2.0
    dt = 1e-3
    new = step_em(u, 0.0, dt, None, None, 0.0, cfg, tensor2)
    k2 = 2.0
    factor = 1.0 - dt * 0.7 * k2 / (1.0 + k2)
    assert new[i] == pytest.approx(2.0 * factor, rel=1e-14)
    mask = np.ones(spec2.size, bool)
    mask[i] = False
    assert np.all(new[mask] == 0.0)


def test_step_em_zero_state_stays_zero(spec2, tensor2):
    cfg = plain_config(
        spec2,
        forcing=ops.ForcingSpec(
            drift_family="linear", kappa=0.5, noise_family="diagonal", sigma=(1.0,)
        ),
        u0=np.zeros(spec2.size),
    )
    z = np.zeros(spec2.size)
    out = step_em(z, 0.2, 0.01, np.array([0.3]), np.array([1.0]), 0.5, cfg, tensor2)
    assert np.all(out == 0.0)


def test_step_em_zero_dw_is_deterministic_euler(spec2, tensor2):
    rng = np.random.default_rng(1)
    cfg = plain_config(
        spec2,
        forcing=ops.ForcingSpec(noise_family="diagonal", sigma=(0.8,)),
    )
    u = rng.standard_normal(spec2.size) * 0.1
    dt = 0.005
    with_noise = step_em(u, 0.1, dt, np.zeros(1), None, 2.0, cfg, tensor2)
    plain = u + dt * ops.drift(u, 0.1, None, cfg, tensor2)
    assert np.allclose(with_noise, plain, atol=0, rtol=0)


# -- stochastic solves -----------------------------------------------------


def test_solve_spde_same_seed_bit_identical(spec2, tensor2):
    cfg = plain_config(
        spec2, forcing=ops.ForcingSpec(noise_family="diagonal", sigma=(0.6,))
    )
    d = NoiseDriver(seed=99, stream=3, m=1)
    t1 = solve_spde(cfg, 0.3, None, d, dt=1e-2, tensor=tensor2)
    t2 = solve_spde(cfg, 0.3, None, d, dt=1e-2, tensor=tensor2)
    assert np.array_equal(t1.states, t2.states)
    assert t1.sup_v == t2.sup_v and t1.sup_w == t2.sup_w
    assert t1.seed == 99 and t1.stream == 3


def test_solve_spde_unforced_v_norm_decays(spec2, tensor2):
    cfg = plain_config(spec2, nu=1.0)
    traj = solve_spde(cfg, 0.0, None, None, dt=1e-3, tensor=tensor2)
    v_sq = (traj.states**2 * spec2.w_v[None, :]).sum(axis=1)
    assert np.all(np.diff(v_sq) <= 1e-12)
    assert traj.sup_v == pytest.approx(np.sqrt(v_sq[0]), rel=1e-12)


def test_solve_spde_strong_self_convergence(spec2, tensor2):
    # Synchronized-increment refinement: error against a fine reference
    # path driven by the same Brownian increments, slope >= 0.4.
    cfg = plain_config(
        spec2,
        nu=0.8,
        forcing=ops.ForcingSpec(noise_family="diagonal", sigma=(1.0,)),
        horizon=1.0,
    )
    j_ref = 10
    n_ref = 2**j_ref
    levels = [4, 5, 6, 7]
    errs = np.zeros(len(levels))
    n_paths = 16
    for p in range(n_paths):
        fine = NoiseDriver(seed=77, stream=p, m=1).increments(n_ref, 1.0 / n_ref)
        ref = solve_spde(
            cfg, 1.0, None, None, dt=1.0 / n_ref, tensor=tensor2,
            noise=fine, save_stride=n_ref,
        )
        for li, k in enumerate(levels):
            block = n_ref // 2**k
            coarse = fine.reshape(2**k, block, 1).sum(axis=1)
            t = solve_spde(
                cfg, 1.0, None, None, dt=1.0 / 2**k, tensor=tensor2,
                noise=coarse, save_stride=2**k,
            )
            d = t.endpoint() - ref.endpoint()
            errs[li] += gb.norms(d, spec2).v
    errs /= n_paths
    dts = np.array([1.0 / 2**k for k in levels])
    slope = np.polyfit(np.log(dts), np.log(errs), 1)[0]
    assert slope >= 0.4


def test_solve_spde_blow_up_guard(spec2, tensor2):
    cfg = plain_config(
        spec2,
        forcing=ops.ForcingSpec(drift_family="linear", kappa=60.0),
        horizon=2.0,
    )
    with pytest.raises(BlowUpError) as err:
        solve_spde(cfg, 0.0, None, None, dt=1e-2, tensor=tensor2, v_ceiling=10.0)
    assert err.value.v_norm > 10.0
    assert 0.0 < err.value.t <= 2.0


def test_solve_spde_grid_validation(spec2, tensor2):
    cfg = plain_config(spec2)
    control = ControlPath.zero(3, 1, 1.0)
    cfg_noise = plain_config(
        spec2, forcing=ops.ForcingSpec(noise_family="diagonal", sigma=(1.0,))
    )
    with pytest.raises(ConfigError) as err:
        solve_spde(cfg_noise, 0.0, control, None, dt=0.01, tensor=tensor2)
    assert err.value.field == "dt"  # 100 steps not divisible into 3 cells
    with pytest.raises(ConfigError):
        solve_spde(cfg_noise, 0.5, None, None, dt=0.01, tensor=tensor2)  # no driver
    with pytest.raises(ConfigError):
        solve_spde(cfg, 0.0, None, None, dt=-0.1, tensor=tensor2)


# -- skeleton solves -------------------------------------------------------


def test_skeleton_zero_everything_stays_zero(spec2, tensor2):
    cfg = plain_config(
        spec2,
        u0=np.zeros(spec2.size),
        forcing=ops.ForcingSpec(noise_family="diagonal", sigma=(1.0,)),
    )
    control = ControlPath.zero(4, 1, 1.0)
    traj = solve_skeleton(cfg, control, dt=0.025, tensor=tensor2)
    assert np.all(traj.states == 0.0)
    assert traj.sup_v == 0.0


def test_skeleton_linear_variation_of_constants(spec2):
    # Tensor off, F = kappa u, additive columns: per-mode closed form.
    rng = np.random.default_rng(5)
    cols = rng.standard_normal((spec2.size, 2))
    kappa = 0.4
    cfg = plain_config(
        spec2,
        nu=0.9,
        forcing=ops.ForcingSpec(
            drift_family="linear", kappa=kappa, noise_family="additive", noise_columns=cols
        ),
        u0=rng.standard_normal(spec2.size) * 0.3,
        nonlinear=False,
    )
    K = 8
    control = ControlPath(1.0, rng.standard_normal((K, 2)))
    traj = solve_skeleton(cfg, control, dt=1.0 / 512, tensor=None)

    a = (-0.9 * spec2.w_grad + kappa) / spec2.w_v  # diagonal generator
    g_cols = cols / spec2.w_v[:, None]
    T = 1.0
    expected = np.exp(a * T) * cfg.u0
    dt_cell = control.dt_cell
    for k in range(K):
        t0, t1 = k * dt_cell, (k + 1) * dt_cell
        forced = g_cols @ control.hdot[k]
        # integral of exp(a (T - s)) over the cell, elementwise in a
        quad = (np.exp(a * (T - t0)) - np.exp(a * (T - t1))) / a
        expected = expected + forced * quad
    err = gb.norms(traj.endpoint() - expected, spec2).v
    assert err <= 1e-8


def test_em_converges_to_skeleton_first_order(spec2, tensor2):
    cfg = plain_config(spec2, nu=0.6, horizon=1.0)
    ref = solve_skeleton(cfg, None, dt=1.0 / 2048, tensor=tensor2, save_stride=2048)
    errs, dts = [], []
    for k in (4, 5, 6, 7):
        n = 2**k
        t = solve_spde(cfg, 0.0, None, None, dt=1.0 / n, tensor=tensor2, save_stride=n)
        errs.append(gb.norms(t.endpoint() - ref.endpoint(), spec2).v)
        dts.append(1.0 / n)
    slope = np.polyfit(np.log(dts), np.log(errs), 1)[0]
    assert 0.8 <= slope <= 1.2


def test_skeleton_discrete_energy_identity_fourth_order(spec2, tensor2):
    # E(t) = ||u(t)||_V^2 + 2 nu int ||grad u||^2 is conserved to O(dt^4).
    cfg = plain_config(spec2, nu=1.0, horizon=1.0)
    e0 = gb.norms(cfg.u0, spec2).v ** 2

    def max_drift(dt):
        traj = solve_skeleton(cfg, None, dt=dt, tensor=tensor2)
        v_sq = (traj.states**2 * spec2.w_v[None, :]).sum(axis=1)
        energy = v_sq + 2.0 * cfg.nu * traj.dissipation
        return np.max(np.abs(energy - e0)) / e0

    d1 = max_drift(0.02)
    d2 = max_drift(0.01)
    assert d1 < 1e-6
    assert d1 / d2 > 8.0  # fourth-order scaling would give ~16


def test_galerkin_refinement_monotone():
    # The initial field must span two shells: any single-shell field is a
    # steady point of the quadratic term (its curl-cross is a gradient),
    # which would make every truncation level produce the same path.
    errs = []
    prev = None
    dt = 1.0 / 64
    for cutoff in (2, 4, 8, 16):
        spec = gb.build_torus_basis(cutoff, 1.0)
        tensor = ops.assemble_trilinear(spec, use_cache=False)
        u0 = np.zeros(spec.size)
        u0[spec.index_of(gb.ModeKey(1, 0, "cos"))] = 1.6
        u0[spec.index_of(gb.ModeKey(1, 1, "sin"))] = 1.0
        cfg = plain_config(spec, nu=0.3, horizon=0.25, u0=u0)
        traj = solve_skeleton(cfg, None, dt=dt, tensor=tensor, save_stride=4)
        if prev is not None:
            prev_spec, prev_traj = prev
            diffs = [
                gb.norms(
                    gb.embed(prev_traj.states[s], prev_spec, spec) - traj.states[s],
                    spec,
                ).v
                for s in range(len(traj.times))
            ]
            errs.append(max(diffs))
        prev = (spec, traj)
    assert errs[0] > errs[1] > errs[2]


# -- batched EM ------------------------------------------------------------


def test_run_em_batch_matches_single(spec2, tensor2):
    cfg = plain_config(
        spec2,
        nu=0.9,
        forcing=ops.ForcingSpec(noise_family="diagonal", sigma=(0.7,)),
        horizon=0.5,
    )
    dt = 1.0 / 64
    n_steps = 32
    control = ControlPath(0.5, np.linspace(-1, 1, 8)[:, None])
    noise = np.stack(
        [NoiseDriver(seed=5, stream=s, m=1).increments(n_steps, dt) for s in range(4)]
    )
    out = run_em_batch(cfg, tensor2, 0.25, dt, noise, control=control)
    for s in range(4):
        single = solve_spde(
            cfg, 0.25, control, None, dt=dt, tensor=tensor2,
            noise=noise[s], save_stride=n_steps,
        )
        assert np.array_equal(out["endpoints"][s], single.endpoint())
        assert out["sup_v"][s] == pytest.approx(single.sup_v, abs=0)
        assert out["sup_w"][s] == pytest.approx(single.sup_w, abs=0)


def test_run_em_batch_reference_deviation(spec2, tensor2):
    cfg = plain_config(
        spec2, forcing=ops.ForcingSpec(noise_family="diagonal", sigma=(0.5,)), horizon=0.5
    )
    dt = 1.0 / 64
    n_steps = 32
    skel = solve_skeleton(cfg, None, dt=dt, tensor=tensor2)  # every step saved
    noise = np.stack(
        [NoiseDriver(seed=6, stream=s, m=1).increments(n_steps, dt) for s in range(2)]
    )
    out = run_em_batch(cfg, tensor2, 0.1, dt, noise, ref_states=skel.states)
    assert out["sup_dev_v"].shape == (2,)
    assert np.all(out["sup_dev_v"] >= 0)
    # deviation of the deterministic path against itself is zero
    zero_noise = np.zeros((1, n_steps, 1))
    out0 = run_em_batch(cfg, tensor2, 0.0, dt, zero_noise, ref_states=None)
    euler_end = solve_spde(cfg, 0.0, None, None, dt=dt, tensor=tensor2, save_stride=n_steps)
    assert np.array_equal(out0["endpoints"][0], euler_end.endpoint())
