"""Basis construction, norms, resolvent, and curl-excess contracts."""

import json

import numpy as np
import pytest
import scipy.linalg

import gridquad
from grade2 import basis as gb
from grade2.errors import ConfigError, DimensionMismatchError, FormatError


def random_fields(rng, m, count):
    return rng.standard_normal((count, m))


# -- construction ----------------------------------------------------------


def test_cutoff1_has_four_equal_lambda_channels():
    spec = gb.build_torus_basis(1, 0.5)
    assert spec.size == 4
    expected = 1.0 + (1.0 + 0.5) * 1.0
    assert np.allclose(spec.lam, expected, rtol=0, atol=1e-15)
    keys = {m.as_tuple() for m in spec.modes}
    assert keys == {
        (0, 1, "cos"), (0, 1, "sin"), (1, 0, "cos"), (1, 0, "sin"),
    }


def test_lambda_closed_form_alpha_one():
    spec = gb.build_torus_basis(2, 1.0)
    i = spec.index_of(gb.ModeKey(1, 0, "cos"))
    assert spec.lam[i] == pytest.approx(3.0, abs=1e-15)


def test_lambda_alpha_to_zero_limit():
    spec = gb.build_torus_basis(3, 1e-12)
    for i, m in enumerate(spec.modes):
        assert spec.lam[i] == pytest.approx(1.0 + m.k2, rel=1e-10)


def test_mode_counts():
    assert gb.build_torus_basis(2, 1.0).size == 12
    assert gb.build_torus_basis(4, 1.0).size == 48


def test_ordering_lambda_ascending_then_lexicographic():
    spec = gb.build_torus_basis(3, 0.8)
    assert np.all(np.diff(spec.lam) >= 0)
    resorted = sorted(
        spec.modes,
        key=lambda m: (
            1.0 + m.k2 * (1.0 + 0.8 * m.k2),
            m.kx,
            m.ky,
            0 if m.parity == "cos" else 1,
        ),
    )
    assert list(spec.modes) == resorted


def test_build_validation_errors_name_fields():
    with pytest.raises(ConfigError) as err:
        gb.build_torus_basis(0, 1.0)
    assert err.value.field == "cutoff"
    with pytest.raises(ConfigError) as err:
        gb.build_torus_basis(2, -1.0)
    assert err.value.field == "alpha"
    with pytest.raises(ConfigError):
        gb.build_torus_basis(2, float("nan"))


# -- norms -----------------------------------------------------------------


def test_zero_field_all_norms_zero():
    spec = gb.build_torus_basis(2, 1.0)
    n = gb.norms(np.zeros(spec.size), spec)
    assert (n.l2, n.grad, n.v, n.curlx, n.w) == (0, 0, 0, 0, 0)


def test_unit_mode_norms_frozen_values():
    # Unit coefficient on k=(1,0), alpha=1: squared norms 1, 1, 2, 4, 6.
    spec = gb.build_torus_basis(1, 1.0)
    u = np.zeros(spec.size)
    u[spec.index_of(gb.ModeKey(1, 0, "cos"))] = 1.0
    n = gb.norms(u, spec)
    assert n.l2**2 == pytest.approx(1.0, abs=1e-14)
    assert n.grad**2 == pytest.approx(1.0, abs=1e-14)
    assert n.v**2 == pytest.approx(2.0, abs=1e-14)
    assert n.curlx**2 == pytest.approx(4.0, abs=1e-14)
    assert n.w**2 == pytest.approx(6.0, abs=1e-14)


def test_unit_mode_norms_match_quadrature():
    spec = gb.build_torus_basis(1, 1.0)
    u = np.zeros(spec.size)
    u[spec.index_of(gb.ModeKey(1, 0, "cos"))] = 1.0
    ngrid = 32
    vel = gridquad.field_velocity(spec, u, ngrid)
    l2_sq = gridquad.l2_inner_grid(vel, vel)
    grad_sq = gridquad.grad_inner(vel, vel)
    curlx = gridquad.curl_excess_grid(spec, u, ngrid)
    curlx_sq = gridquad.integrate(curlx * curlx)
    assert l2_sq == pytest.approx(1.0, rel=1e-12)
    assert grad_sq == pytest.approx(1.0, rel=1e-12)
    assert curlx_sq == pytest.approx(4.0, rel=1e-12)


def test_random_field_norms_match_quadrature():
    rng = np.random.default_rng(11)
    spec = gb.build_torus_basis(2, 0.7)
    u = rng.standard_normal(spec.size)
    got = gb.norms(u, spec)
    ngrid = 48
    vel = gridquad.field_velocity(spec, u, ngrid)
    l2_sq = gridquad.l2_inner_grid(vel, vel)
    grad_sq = gridquad.grad_inner(vel, vel)
    curlx = gridquad.curl_excess_grid(spec, u, ngrid)
    curlx_sq = gridquad.integrate(curlx * curlx)
    assert got.l2**2 == pytest.approx(l2_sq, rel=1e-10)
    assert got.grad**2 == pytest.approx(grad_sq, rel=1e-10)
    assert got.v**2 == pytest.approx(l2_sq + 0.7 * grad_sq, rel=1e-10)
    assert got.curlx**2 == pytest.approx(curlx_sq, rel=1e-10)
    assert got.w**2 == pytest.approx(l2_sq + 0.7 * grad_sq + curlx_sq, rel=1e-10)


def test_gram_eigenproblem_reproduces_lambda():
    # Assemble V- and W-Gram matrices by quadrature and solve the pencil;
    # the eigenvalues must match the catalogued lambdas to 1e-10.
    spec = gb.build_torus_basis(2, 0.7)
    ngrid = 32
    vels = [gridquad.mode_velocity(m, ngrid) for m in spec.modes]
    unit = np.eye(spec.size)
    curls = [gridquad.curl_excess_grid(spec, unit[i], ngrid) for i in range(spec.size)]
    m = spec.size
    g_v = np.empty((m, m))
    g_w = np.empty((m, m))
    for i in range(m):
        for j in range(i + 1):
            l2 = gridquad.l2_inner_grid(vels[i], vels[j])
            grad = gridquad.grad_inner(vels[i], vels[j])
            cx = gridquad.integrate(curls[i] * curls[j])
            g_v[i, j] = g_v[j, i] = l2 + spec.alpha * grad
            g_w[i, j] = g_w[j, i] = g_v[i, j] + cx
    eigs = scipy.linalg.eigh(g_w, g_v, eigvals_only=True)
    assert np.allclose(np.sort(eigs), np.sort(spec.lam), atol=1e-10, rtol=1e-10)


def test_norm_sandwich_poincare_one():
    # (1 + alpha)^{-1} ||u||_V^2 <= ||grad u||^2 <= alpha^{-1} ||u||_V^2
    rng = np.random.default_rng(7)
    total = 0
    for alpha in (0.3, 1.0, 2.5):
        spec = gb.build_torus_basis(3, alpha)
        for u in random_fields(rng, spec.size, 334):
            n = gb.norms(u, spec)
            v_sq = n.v**2
            g_sq = n.grad**2
            assert v_sq / (1.0 + alpha) <= g_sq * (1 + 1e-12)
            assert g_sq <= v_sq / alpha * (1 + 1e-12)
            total += 1
    assert total >= 1000


def test_norms_dimension_mismatch():
    spec = gb.build_torus_basis(1, 1.0)
    with pytest.raises(DimensionMismatchError):
        gb.norms(np.zeros(spec.size + 1), spec)


# -- resolvent -------------------------------------------------------------


def test_inv_stokes_zero_and_unit_shell():
    spec = gb.build_torus_basis(1, 1.0)
    assert np.all(gb.apply_inv_stokes(np.zeros(spec.size), spec) == 0.0)
    f = np.zeros(spec.size)
    f[spec.index_of(gb.ModeKey(0, 1, "sin"))] = 1.0
    v = gb.apply_inv_stokes(f, spec)
    assert np.allclose(v, 0.5 * f, atol=1e-15)


def test_inv_stokes_pairing_identity():
    # (v, g)_V = (f, g) for v = inv_stokes(f).  Pairs with a tiny angle
    # between f and g are resampled so the relative error is meaningful.
    rng = np.random.default_rng(23)
    spec = gb.build_torus_basis(4, 1.3)
    checked = 0
    while checked < 100:
        f = rng.standard_normal(spec.size)
        g = rng.standard_normal(spec.size)
        ref = gb.l2_inner(f, g)
        if abs(ref) < 0.05 * np.linalg.norm(f) * np.linalg.norm(g):
            continue
        v = gb.apply_inv_stokes(f, spec)
        assert abs(gb.v_inner(v, g, spec) - ref) <= 1e-12 * abs(ref)
        checked += 1


def test_inv_stokes_pairing_identity_quadrature_route():
    rng = np.random.default_rng(5)
    spec = gb.build_torus_basis(2, 0.9)
    ngrid = 48
    for _ in range(3):
        f = rng.standard_normal(spec.size)
        g = rng.standard_normal(spec.size)
        v = gb.apply_inv_stokes(f, spec)
        vel_v = gridquad.field_velocity(spec, v, ngrid)
        vel_g = gridquad.field_velocity(spec, g, ngrid)
        vel_f = gridquad.field_velocity(spec, f, ngrid)
        lhs = gridquad.l2_inner_grid(vel_v, vel_g) + 0.9 * gridquad.grad_inner(vel_v, vel_g)
        rhs = gridquad.l2_inner_grid(vel_f, vel_g)
        assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-12)


def test_inv_stokes_v_norm_contract():
    rng = np.random.default_rng(31)
    spec = gb.build_torus_basis(3, 0.4)
    for f in random_fields(rng, spec.size, 200):
        v = gb.apply_inv_stokes(f, spec)
        assert gb.norms(v, spec).v <= np.linalg.norm(f) * (1 + 1e-12)


# -- curl excess -----------------------------------------------------------


def test_curl_excess_zero():
    spec = gb.build_torus_basis(2, 1.0)
    out = gb.curl_excess(np.zeros(spec.size), spec)
    assert np.all(out.coeffs == 0.0)


def test_curl_excess_single_mode_scaling():
    spec = gb.build_torus_basis(3, 1.0)
    u = np.zeros(spec.size)
    i = spec.index_of(gb.ModeKey(1, 2, "cos"))
    u[i] = 1.0
    out = gb.curl_excess(u, spec)
    k2 = 5.0
    expected = -np.sqrt(k2) * (1.0 + k2)
    assert out.coeffs[i] == pytest.approx(expected, rel=1e-14)
    assert out.modes[i].as_tuple() == (1, 2, "sin")
    mask = np.ones(spec.size, bool)
    mask[i] = False
    assert np.all(out.coeffs[mask] == 0.0)


def test_curl_single_mode_against_finite_differences():
    # curl e_{k,cos} = -|k| n sin(k.x) pointwise, checked with central
    # differences on a fine periodic grid (second order in h).
    mode = gb.ModeKey(2, 1, "cos")
    ngrid = 512
    vel = gridquad.mode_velocity(mode, ngrid)
    curl_fd = gridquad.curl2d(vel, deriv=gridquad.fd_deriv)
    X, Y = gridquad.grid(ngrid)
    expected = -np.sqrt(5.0) * gridquad.NORM * np.sin(mode.kx * X + mode.ky * Y)
    assert np.max(np.abs(curl_fd - expected)) < 5e-4


def test_curl_excess_l2_equals_curlx_norm():
    rng = np.random.default_rng(41)
    spec = gb.build_torus_basis(4, 0.6)
    u = rng.standard_normal(spec.size)
    out = gb.curl_excess(u, spec)
    assert out.l2_norm() == pytest.approx(gb.norms(u, spec).curlx, rel=1e-13)


def test_plain_curl_bound_two_over_alpha():
    # ||curl u||^2 <= (2/alpha) ||u||_V^2 over 1000 random fields.
    rng = np.random.default_rng(17)
    for alpha in (0.2, 1.0, 4.0):
        spec = gb.build_torus_basis(3, alpha)
        for u in random_fields(rng, spec.size, 334):
            n = gb.norms(u, spec)
            assert n.grad**2 <= (2.0 / alpha) * n.v**2 * (1 + 1e-12)


# -- duality ---------------------------------------------------------------


def test_dual_pairing_matches_v_inner():
    rng = np.random.default_rng(3)
    spec = gb.build_torus_basis(4, 1.0)
    checked = 0
    while checked < 100:
        f = rng.standard_normal(spec.size)
        w = rng.standard_normal(spec.size)
        direct = gb.v_inner(f, w, spec)
        scale = gb.norms(f, spec).v * gb.norms(w, spec).v
        if abs(direct) < 0.05 * scale:
            continue
        assert abs(gb.dual_pairing(f, w, spec) - direct) <= 1e-12 * abs(direct)
        checked += 1


def test_w_star_norm_is_supremum_of_pairing():
    rng = np.random.default_rng(13)
    spec = gb.build_torus_basis(3, 0.8)
    f = rng.standard_normal(spec.size)
    dual = np.sqrt(gb.w_star_norm_sq(f, spec))
    w_w = spec.lam * spec.w_v
    maximizer = spec.w_v * f / w_w
    w_norm = np.sqrt(float(np.dot(w_w, maximizer**2)))
    assert gb.v_inner(f, maximizer, spec) / w_norm == pytest.approx(dual, rel=1e-12)
    for w in random_fields(rng, spec.size, 100):
        w_norm = gb.norms(w, spec).w
        assert abs(gb.v_inner(f, w, spec)) <= dual * w_norm * (1 + 1e-12)


# -- embedding, serialization, sparse construction -------------------------


def test_embed_preserves_norms_and_rejects_loss():
    rng = np.random.default_rng(29)
    coarse = gb.build_torus_basis(1, 1.0)
    fine = gb.build_torus_basis(3, 1.0)
    u = rng.standard_normal(coarse.size)
    v = gb.embed(u, coarse, fine)
    a, b = gb.norms(u, coarse), gb.norms(v, fine)
    assert (a.l2, a.v, a.w) == pytest.approx((b.l2, b.v, b.w), rel=1e-14)
    with pytest.raises(DimensionMismatchError):
        gb.embed(np.zeros(fine.size), fine, coarse)


def test_basis_json_roundtrip():
    spec = gb.build_torus_basis(2, 0.7)
    text = spec.to_json()
    back = gb.BasisSpec.from_json(text)
    assert back.alpha == spec.alpha
    assert back.cutoff == spec.cutoff
    assert back.modes == spec.modes
    assert np.array_equal(back.lam, spec.lam)


def test_basis_json_rejects_garbage():
    with pytest.raises(FormatError):
        gb.BasisSpec.from_json("{not json")
    with pytest.raises(FormatError):
        gb.BasisSpec.from_json(json.dumps({"format": "other"}))
    doc = gb.build_torus_basis(1, 1.0).to_json_dict()
    doc["modes"] = doc["modes"][:-1]
    with pytest.raises(FormatError):
        gb.BasisSpec.from_json_dict(doc)


def test_coeffs_from_dict():
    spec = gb.build_torus_basis(2, 1.0)
    u = gb.coeffs_from_dict(spec, {"1,0,cos": 2.5, "1,1,sin": -1.0})
    assert u[spec.index_of(gb.ModeKey(1, 0, "cos"))] == 2.5
    assert u[spec.index_of(gb.ModeKey(1, 1, "sin"))] == -1.0
    assert np.count_nonzero(u) == 2
    with pytest.raises(ConfigError):
        gb.coeffs_from_dict(spec, {"9,9,cos": 1.0})
    with pytest.raises(ConfigError):
        gb.coeffs_from_dict(spec, {"1,0": 1.0})
