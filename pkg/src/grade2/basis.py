"""Divergence-free trigonometric basis on the 2D torus and norm machinery.

All state downstream of this module lives in coefficient space over the
basis built here.  A mode is indexed by an integer wavevector ``k`` and a
sin/cos channel; its velocity profile is the stream-function construction

    e_{k,cos}(x) = (k_perp / |k|) * n * cos(k . x),    k_perp = (-k2, k1),

with ``n = 1/sqrt(2 pi^2)`` so that every mode has unit L2 norm on
``[0, 2pi]^2``.  Modes are exactly divergence-free and zero-mean (the
``k = 0`` channel is excluded), so the Poincare constant is 1.

Four quadratic forms are used throughout, all diagonal in this basis:

* ``l2``    -- plain L2 norm, per-mode weight 1,
* ``grad``  -- Dirichlet norm ``||grad u||``, weight ``|k|^2``,
* ``v``     -- the alpha-weighted norm ``|u|^2 + alpha ||grad u||^2``,
  weight ``1 + alpha |k|^2`` (called the V-norm here),
* ``curlx`` -- L2 norm of ``curl(u - alpha Lap u)``, weight
  ``|k|^2 (1 + alpha |k|^2)^2``,

and the W-norm is ``v + curlx`` in the squared sense.  The generalized
eigenvalue of the W-versus-V Gram pencil is then

    lambda(k) = 1 + |k|^2 (1 + alpha |k|^2),

nondecreasing in ``|k|``, which fixes the mode ordering.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .errors import ConfigError, DimensionMismatchError, FormatError

COS = "cos"
SIN = "sin"

#: L2 normalization constant of a single trig profile on [0, 2pi]^2.
MODE_NORMALIZATION = 1.0 / np.sqrt(2.0 * np.pi**2)

_PARITY_RANK = {COS: 0, SIN: 1}


@dataclass(frozen=True)
class ModeKey:
    """One real divergence-free Fourier channel.

    The wavevector is restricted to the half-plane ``kx > 0`` or
    ``kx == 0, ky > 0`` so each spatial frequency appears once; the two
    parities (cos/sin) make the basis real.
    """

    kx: int
    ky: int
    parity: str

    def __post_init__(self):
        if self.parity not in (COS, SIN):
            raise ConfigError("parity", f"parity must be 'cos' or 'sin', got {self.parity!r}")
        if (self.kx, self.ky) == (0, 0):
            raise ConfigError("wavevector", "the zero wavevector carries no divergence-free mode")

    @property
    def k2(self) -> int:
        """Squared wavenumber ``|k|^2``."""
        return self.kx * self.kx + self.ky * self.ky

    def as_tuple(self) -> tuple[int, int, str]:
        return (self.kx, self.ky, self.parity)


@dataclass(frozen=True)
class FieldNorms:
    """The five norms of a coefficient vector (not squared)."""

    l2: float
    grad: float
    v: float
    curlx: float
    w: float


@dataclass(frozen=True, eq=False)
class ScalarCoeffs:
    """A zero-mean scalar field in the orthonormal trig basis.

    ``modes[i].parity`` names the trig factor of channel ``i``; the
    profile is ``n * cos(k . x)`` or ``n * sin(k . x)`` with the same
    normalization constant as the velocity modes, so the L2 norm is the
    Euclidean norm of ``coeffs``.
    """

    modes: tuple[ModeKey, ...]
    coeffs: np.ndarray

    def l2_norm(self) -> float:
        return float(np.linalg.norm(self.coeffs))


@dataclass(frozen=True, eq=False)
class BasisSpec:
    """Immutable catalogue of modes and per-mode quadratic-form weights.

    Arrays are aligned with ``modes`` and marked read-only; instances are
    safe to share across threads.
    """

    alpha: float
    cutoff: int
    modes: tuple[ModeKey, ...]
    w_l2: np.ndarray
    w_grad: np.ndarray
    w_v: np.ndarray
    w_curlx: np.ndarray
    lam: np.ndarray

    def __post_init__(self):
        for arr in (self.w_l2, self.w_grad, self.w_v, self.w_curlx, self.lam):
            arr.setflags(write=False)
        object.__setattr__(
            self, "_index", {m.as_tuple(): i for i, m in enumerate(self.modes)}
        )

    @property
    def size(self) -> int:
        return len(self.modes)

    def index_of(self, mode: ModeKey) -> int:
        """Position of a mode, or raise ``KeyError`` if absent."""
        return self._index[mode.as_tuple()]

    def __contains__(self, mode: ModeKey) -> bool:
        return mode.as_tuple() in self._index

    def check_field(self, coeffs: np.ndarray, what: str = "coefficient vector") -> np.ndarray:
        """Validate shape, return the input as a float array."""
        arr = np.asarray(coeffs, dtype=float)
        if arr.shape != (self.size,):
            raise DimensionMismatchError(self.size, arr.shape[0] if arr.ndim == 1 else -1, what)
        return arr

    # -- serialization -------------------------------------------------

    def to_json_dict(self) -> dict:
        return {
            "format": "grade2.basis",
            "version": 1,
            "alpha": self.alpha,
            "cutoff": self.cutoff,
            "modes": [[m.kx, m.ky, m.parity] for m in self.modes],
            "weights": {
                "l2": self.w_l2.tolist(),
                "grad": self.w_grad.tolist(),
                "v": self.w_v.tolist(),
                "curlx": self.w_curlx.tolist(),
                "lambda": self.lam.tolist(),
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict())

    @staticmethod
    def from_json_dict(doc: Mapping) -> "BasisSpec":
        try:
            if doc.get("format") != "grade2.basis":
                raise FormatError(f"not a basis document: format={doc.get('format')!r}")
            spec = build_torus_basis(int(doc["cutoff"]), float(doc["alpha"]))
            stored = [tuple(m) for m in doc["modes"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed basis document: {exc}") from exc
        rebuilt = [(m.kx, m.ky, m.parity) for m in spec.modes]
        if [(a, b, str(c)) for a, b, c in stored] != rebuilt:
            raise FormatError("basis document mode list does not match its cutoff/alpha")
        return spec

    @staticmethod
    def from_json(text: str) -> "BasisSpec":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"basis document is not valid JSON: {exc}") from exc
        return BasisSpec.from_json_dict(doc)


def _half_plane_wavevectors(cutoff: int) -> Iterable[tuple[int, int]]:
    limit = cutoff * cutoff
    for kx in range(0, cutoff + 1):
        for ky in range(-cutoff, cutoff + 1):
            if kx == 0 and ky <= 0:
                continue
            if kx * kx + ky * ky <= limit:
                yield (kx, ky)


def build_torus_basis(cutoff: int, alpha: float) -> BasisSpec:
    """Enumerate all channels with ``1 <= |k|^2 <= cutoff^2``.

    Modes are sorted by eigenvalue ``lambda`` ascending, then
    lexicographically by ``(kx, ky, parity)`` inside equal-lambda shells
    (cos before sin); the ordering is part of the public contract and is
    stable across runs.
    """
    if not isinstance(cutoff, (int, np.integer)) or isinstance(cutoff, bool):
        raise ConfigError("cutoff", f"cutoff must be an integer, got {cutoff!r}")
    if cutoff < 1:
        raise ConfigError("cutoff", f"cutoff must be >= 1, got {cutoff}")
    alpha = float(alpha)
    if not np.isfinite(alpha) or alpha <= 0.0:
        raise ConfigError("alpha", f"alpha must be a positive finite number, got {alpha}")

    modes = [
        ModeKey(kx, ky, parity)
        for (kx, ky) in _half_plane_wavevectors(cutoff)
        for parity in (COS, SIN)
    ]

    def lam_of(m: ModeKey) -> float:
        return 1.0 + m.k2 * (1.0 + alpha * m.k2)

    modes.sort(key=lambda m: (lam_of(m), m.kx, m.ky, _PARITY_RANK[m.parity]))

    k2 = np.array([m.k2 for m in modes], dtype=float)
    w_l2 = np.ones_like(k2)
    w_grad = k2
    w_v = 1.0 + alpha * k2
    w_curlx = k2 * w_v**2
    lam = 1.0 + k2 * w_v

    return BasisSpec(
        alpha=alpha,
        cutoff=int(cutoff),
        modes=tuple(modes),
        w_l2=w_l2,
        w_grad=w_grad,
        w_v=w_v,
        w_curlx=w_curlx,
        lam=lam,
    )


def norms(coeffs: np.ndarray, basis: BasisSpec) -> FieldNorms:
    """All five norms of a coefficient vector.

    Squares satisfy ``v^2 = l2^2 + alpha * grad^2`` and
    ``w^2 = v^2 + curlx^2`` exactly (up to rounding).
    """
    u = basis.check_field(coeffs)
    u2 = u * u
    l2_sq = float(u2.sum())
    grad_sq = float(np.dot(basis.w_grad, u2))
    v_sq = float(np.dot(basis.w_v, u2))
    curlx_sq = float(np.dot(basis.w_curlx, u2))
    return FieldNorms(
        l2=np.sqrt(l2_sq),
        grad=np.sqrt(grad_sq),
        v=np.sqrt(v_sq),
        curlx=np.sqrt(curlx_sq),
        w=np.sqrt(v_sq + curlx_sq),
    )


def v_inner(u: np.ndarray, v: np.ndarray, basis: BasisSpec) -> float:
    """The inner product whose square norm is ``|u|^2 + alpha ||grad u||^2``."""
    return float(np.einsum("i,i,i->", basis.w_v, u, v))


def l2_inner(u: np.ndarray, v: np.ndarray) -> float:
    return float(np.dot(u, v))


def apply_inv_stokes(coeffs: np.ndarray, basis: BasisSpec) -> np.ndarray:
    """Solve ``v - alpha Lap v = f`` mode-wise.

    The result satisfies ``v_inner(v, g) == l2_inner(f, g)`` for every
    ``g`` in the span, which is the defining property used everywhere a
    raw force is pushed into the evolution space.
    """
    f = basis.check_field(coeffs)
    return f / basis.w_v


def curl_excess(coeffs: np.ndarray, basis: BasisSpec) -> ScalarCoeffs:
    """Scalar coefficients of ``curl(u - alpha Lap u)``.

    The curl of a cos channel is a sin profile and vice versa:
    ``curl e_{k,cos} = -|k| n sin(k.x)`` and
    ``curl e_{k,sin} = +|k| n cos(k.x)``, each then scaled by
    ``1 + alpha |k|^2``.  Channel ``i`` of the output is the trig profile
    with the same wavevector and flipped parity, so the output Euclidean
    norm is exactly the ``curlx`` norm of the input.
    """
    u = basis.check_field(coeffs)
    abs_k = np.sqrt(basis.w_grad)
    scale = abs_k * basis.w_v
    out_modes = []
    signs = np.empty(basis.size)
    for i, m in enumerate(basis.modes):
        if m.parity == COS:
            out_modes.append(ModeKey(m.kx, m.ky, SIN))
            signs[i] = -1.0
        else:
            out_modes.append(ModeKey(m.kx, m.ky, COS))
            signs[i] = 1.0
    return ScalarCoeffs(modes=tuple(out_modes), coeffs=signs * scale * u)


def dual_pairing(f: np.ndarray, w: np.ndarray, basis: BasisSpec) -> float:
    """Duality pairing of ``f`` (as a functional) against ``w``.

    Computed through the W-orthonormal coordinates rather than the
    V-weight shortcut: ``w`` is re-expressed in W-orthonormal modes and
    the functional's action on each such mode is accumulated.  Agrees
    with ``v_inner(f, w)`` to rounding; kept as a second route for the
    pairing-identity tests.
    """
    f = basis.check_field(f, "functional coefficients")
    w = basis.check_field(w, "argument coefficients")
    w_w = basis.lam * basis.w_v  # squared W-norm weight per mode
    sqrt_ww = np.sqrt(w_w)
    w_hat = w * sqrt_ww  # W-orthonormal coordinates of the argument
    action = f * basis.w_v / sqrt_ww  # functional applied to each W-unit mode
    return float(np.dot(action, w_hat))


def w_star_norm_sq(f: np.ndarray, basis: BasisSpec) -> float:
    """Squared dual norm of a span element acting as a functional.

    Maximizing ``v_inner(f, w)`` over the unit-W-norm ball gives the
    closed form ``sum_i (w_v_i / lambda_i) f_i^2``.
    """
    f = basis.check_field(f, "functional coefficients")
    return float(np.dot(basis.w_v / basis.lam, f * f))


def embed(coeffs: np.ndarray, src: BasisSpec, dst: BasisSpec) -> np.ndarray:
    """Re-index a coefficient vector into a finer (or equal) basis.

    Every source mode must exist in the destination; raises
    ``DimensionMismatchError`` otherwise.
    """
    u = src.check_field(coeffs)
    out = np.zeros(dst.size)
    for i, m in enumerate(src.modes):
        if m not in dst:
            raise DimensionMismatchError(
                dst.size, src.size, f"mode {m.as_tuple()} missing from destination basis"
            )
        out[dst.index_of(m)] = u[i]
    return out


def coeffs_from_dict(basis: BasisSpec, entries: Mapping) -> np.ndarray:
    """Build a coefficient vector from ``{"kx,ky,parity": value}`` entries.

    Used by config parsing for sparse initial conditions and noise
    columns.  Keys may also be 3-element lists when coming from JSON.
    """
    out = np.zeros(basis.size)
    for key, value in entries.items():
        if isinstance(key, str):
            parts = key.split(",")
            if len(parts) != 3:
                raise ConfigError("mode", f"mode key {key!r} is not 'kx,ky,parity'")
            try:
                mode = ModeKey(int(parts[0]), int(parts[1]), parts[2].strip())
            except ValueError as exc:
                raise ConfigError("mode", f"bad mode key {key!r}: {exc}") from exc
        else:
            kx, ky, parity = key
            mode = ModeKey(int(kx), int(ky), str(parity))
        if mode not in basis:
            raise ConfigError(
                "mode", f"mode {mode.as_tuple()} is outside the basis (cutoff {basis.cutoff})"
            )
        out[basis.index_of(mode)] = float(value)
    return out
