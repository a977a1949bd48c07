"""Galerkin-projected operators of the second-grade fluid system.

The evolution treated everywhere downstream is, in coefficient space,

    du/dt = -nu * Ahat u - Bhat(u, u) + Fhat(u, t) + Ghat(u, t) hdot,

with ``Ahat = (I + alpha A)^{-1} A`` (diagonal here), the quadratic term
``Bhat(u, v) = (I + alpha A)^{-1} (curl(u - alpha Lap u) x v)``, and
forcing/noise pushed through the same resolvent.  This module assembles
the trilinear coefficients of ``Bhat`` exactly (trig product integrals
are evaluated symbolically, not by quadrature), provides the small
catalogue of forcing families, and exposes the drift plus the
Jacobian-transpose products the adjoint sweep needs.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.sparse

from .basis import COS, SIN, BasisSpec, ModeKey, MODE_NORMALIZATION
from .errors import ConfigError, DimensionMismatchError, FormatError, UnknownFamilyError

TENSOR_FORMAT_VERSION = 1
_AREA = 4.0 * np.pi**2  # torus area, the only nonzero trig-product integral

DRIFT_FAMILIES = ("zero", "linear", "modulated")
NOISE_FAMILIES = ("zero", "diagonal", "additive")


# -- exact trig-product integrals ------------------------------------------


def _trig_product(kind1, f1, kind2, f2):
    """Expand a product of two trig waves into two signed trig waves.

    Frequencies are integer pairs; the expansion is the usual
    product-to-sum identity, kept symbolic so triple integrals below are
    exact.
    """
    sum_ = (f1[0] + f2[0], f1[1] + f2[1])
    dif = (f1[0] - f2[0], f1[1] - f2[1])
    if kind1 == COS and kind2 == COS:
        return ((COS, dif, 0.5), (COS, sum_, 0.5))
    if kind1 == SIN and kind2 == SIN:
        return ((COS, dif, 0.5), (COS, sum_, -0.5))
    if kind1 == SIN and kind2 == COS:
        return ((SIN, sum_, 0.5), (SIN, dif, 0.5))
    return ((SIN, sum_, 0.5), (SIN, dif, -0.5))


def _triple_integral(k1, t1, k2, t2, k3, t3):
    """Integral of three trig waves over the torus, exactly.

    Only a cosine term that lands on frequency zero integrates to a
    nonzero value (the torus area); with all three inputs nonzero at most
    one of the four expansion terms can do so, so the result is one of
    {0, +pi^2, -pi^2}.
    """
    total = 0.0
    for kind, freq, coeff in _trig_product(t1, k1, t2, k2):
        for kind2, freq2, coeff2 in _trig_product(kind, freq, t3, k3):
            if kind2 == COS and freq2 == (0, 0):
                total += coeff * coeff2 * _AREA
    return total


def _tensor_entry(mi: ModeKey, mj: ModeKey, ml: ModeKey, alpha: float) -> float:
    """One coefficient (curl(e_j - alpha Lap e_j) x e_l, e_i).

    The curl of mode j is a scalar wave with flipped parity and amplitude
    -/+ |k_j| (1 + alpha |k_j|^2); crossing it against e_l and pairing
    with e_i contributes the wedge factor cross(k_l, k_i).  The sign
    conventions here make the i <-> l antisymmetry hold exactly in
    floating point (only the integer cross product changes sign).
    """
    cross = ml.kx * mi.ky - ml.ky * mi.kx
    if cross == 0:
        return 0.0
    if mj.parity == COS:
        sgn, tilt = -1.0, SIN
    else:
        sgn, tilt = 1.0, COS
    i3 = _triple_integral(
        (mj.kx, mj.ky), tilt, (ml.kx, ml.ky), ml.parity, (mi.kx, mi.ky), mi.parity
    )
    if i3 == 0.0:
        return 0.0
    amp = sgn * np.sqrt(float(mj.k2)) * (1.0 + alpha * mj.k2) * MODE_NORMALIZATION**3
    return amp * (cross / np.sqrt(float(ml.k2 * mi.k2))) * i3


def _fold_half_plane(fx: int, fy: int):
    if fx > 0 or (fx == 0 and fy > 0):
        return (fx, fy)
    return (-fx, -fy)


# -- trilinear tensor ------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TrilinearTensor:
    """Sparse trilinear coefficients T[i][j][l] of the curl-cross form.

    ``pairing(u, v, w)`` is the raw trilinear form (the duality pairing
    of Bhat(u, v) against w); ``bhat`` applies the resolvent on top.
    Instances are immutable and shared freely across threads.
    """

    cutoff: int
    alpha: float
    size: int
    rows_i: np.ndarray
    rows_j: np.ndarray
    rows_l: np.ndarray
    values: np.ndarray
    _contract: scipy.sparse.csr_matrix = field(repr=False)
    _raw: scipy.sparse.csr_matrix = field(repr=False)
    _adjoint: scipy.sparse.csr_matrix = field(repr=False)

    def __post_init__(self):
        for arr in (self.rows_i, self.rows_j, self.rows_l, self.values):
            arr.setflags(write=False)

    @property
    def nnz(self) -> int:
        return len(self.values)

    def entry(self, i: int, j: int, l: int) -> float:
        """Look up one coefficient (zero if absent)."""
        hit = (self.rows_i == i) & (self.rows_j == j) & (self.rows_l == l)
        idx = np.nonzero(hit)[0]
        return float(self.values[idx[0]]) if len(idx) else 0.0

    def pairing(self, u: np.ndarray, v: np.ndarray, w: np.ndarray) -> float:
        """Raw trilinear form sum_ijl T[i,j,l] u_j v_l w_i."""
        x = np.multiply.outer(u, v).ravel()
        return float(np.dot(w, self._raw @ x))

    def bhat(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Coefficients of Bhat(u, v) (resolvent already applied)."""
        x = np.multiply.outer(u, v).ravel()
        return self._contract @ x

    def bhat_batch(self, U: np.ndarray, V: np.ndarray) -> np.ndarray:
        """Row-wise Bhat over batches U, V of shape (B, M)."""
        b, m = U.shape
        x = (U[:, :, None] * V[:, None, :]).reshape(b, m * m)
        return (self._contract @ x.T).T

    def jtvp(self, u: np.ndarray, lam: np.ndarray) -> np.ndarray:
        """Transpose-Jacobian product of u -> Bhat(u, u) against lam."""
        x = np.multiply.outer(lam, u).ravel()
        return self._adjoint @ x

    # -- construction and cache ---------------------------------------

    @staticmethod
    def _build_matrices(size, rows_i, rows_j, rows_l, values, w_v):
        m = size
        scaled = values / w_v[rows_i]
        contract = scipy.sparse.csr_matrix(
            (scaled, (rows_i, rows_j * m + rows_l)), shape=(m, m * m)
        )
        raw = scipy.sparse.csr_matrix(
            (values, (rows_i, rows_j * m + rows_l)), shape=(m, m * m)
        )
        # d Bhat_i / d u_p = sum_l S[i,p,l] u_l + sum_j S[i,j,p] u_j;
        # both pieces read the same kron(lam, u) layout index i*m + other.
        slot1 = scipy.sparse.csr_matrix(
            (scaled, (rows_j, rows_i * m + rows_l)), shape=(m, m * m)
        )
        slot2 = scipy.sparse.csr_matrix(
            (scaled, (rows_l, rows_i * m + rows_j)), shape=(m, m * m)
        )
        adjoint = (slot1 + slot2).tocsr()
        return contract, raw, adjoint

    @classmethod
    def _from_entries(cls, basis: BasisSpec, rows_i, rows_j, rows_l, values):
        rows_i = np.asarray(rows_i, dtype=np.int64)
        rows_j = np.asarray(rows_j, dtype=np.int64)
        rows_l = np.asarray(rows_l, dtype=np.int64)
        values = np.asarray(values, dtype=float)
        contract, raw, adjoint = cls._build_matrices(
            basis.size, rows_i, rows_j, rows_l, values, basis.w_v
        )
        return cls(
            cutoff=basis.cutoff,
            alpha=basis.alpha,
            size=basis.size,
            rows_i=rows_i,
            rows_j=rows_j,
            rows_l=rows_l,
            values=values,
            _contract=contract,
            _raw=raw,
            _adjoint=adjoint,
        )


def _assemble_entries(basis: BasisSpec):
    """O(M^2) assembly: for each (j, l) only the folded convolution
    frequencies k_j +- k_l can receive a nonzero pairing index i."""
    by_freq: dict[tuple[int, int], list[int]] = {}
    for idx, m in enumerate(basis.modes):
        by_freq.setdefault((m.kx, m.ky), []).append(idx)

    rows_i, rows_j, rows_l, values = [], [], [], []
    for j, mj in enumerate(basis.modes):
        for l, ml in enumerate(basis.modes):
            fs = set()
            for fx, fy in (
                (mj.kx + ml.kx, mj.ky + ml.ky),
                (mj.kx - ml.kx, mj.ky - ml.ky),
            ):
                if (fx, fy) != (0, 0):
                    fs.add(_fold_half_plane(fx, fy))
            for f in fs:
                for i in by_freq.get(f, ()):
                    val = _tensor_entry(basis.modes[i], mj, ml, basis.alpha)
                    if val != 0.0:
                        rows_i.append(i)
                        rows_j.append(j)
                        rows_l.append(l)
                        values.append(val)
    return rows_i, rows_j, rows_l, values


def default_cache_dir() -> Path:
    env = os.environ.get("GRADE2_CACHE_DIR")
    if env:
        return Path(env)
    return Path.home() / ".cache" / "grade2"


def _cache_path(cache_dir: Path, cutoff: int, alpha: float) -> Path:
    return cache_dir / f"trilinear_v{TENSOR_FORMAT_VERSION}_c{cutoff}_a{alpha!r}.json"


def save_tensor_cache(tensor: TrilinearTensor, path: Path) -> None:
    doc = {
        "format": "grade2.trilinear",
        "version": TENSOR_FORMAT_VERSION,
        "cutoff": tensor.cutoff,
        "alpha": tensor.alpha,
        "entries": [
            [int(i), int(j), int(l), float(v)]
            for i, j, l, v in zip(
                tensor.rows_i, tensor.rows_j, tensor.rows_l, tensor.values
            )
        ],
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(doc))
    tmp.replace(path)


def load_tensor_cache(path: Path, basis: BasisSpec) -> TrilinearTensor:
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable tensor cache {path}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != "grade2.trilinear":
        raise FormatError(f"{path} is not a trilinear tensor cache")
    if doc.get("version") != TENSOR_FORMAT_VERSION:
        raise FormatError(
            f"tensor cache version {doc.get('version')!r} unsupported "
            f"(expected {TENSOR_FORMAT_VERSION})"
        )
    if doc.get("cutoff") != basis.cutoff or doc.get("alpha") != basis.alpha:
        raise FormatError(
            f"tensor cache {path} was built for cutoff={doc.get('cutoff')} "
            f"alpha={doc.get('alpha')}, basis has cutoff={basis.cutoff} "
            f"alpha={basis.alpha}"
        )
    entries = doc.get("entries")
    if not isinstance(entries, list):
        raise FormatError(f"tensor cache {path} has no entry list")
    if entries:
        arr = np.asarray(entries, dtype=float)
        if arr.ndim != 2 or arr.shape[1] != 4:
            raise FormatError(f"tensor cache {path} entry list is malformed")
        ri, rj, rl = arr[:, 0].astype(np.int64), arr[:, 1].astype(np.int64), arr[:, 2].astype(np.int64)
        if ri.size and (ri.min() < 0 or max(ri.max(), rj.max(), rl.max()) >= basis.size):
            raise FormatError(f"tensor cache {path} indexes outside the basis")
        vals = arr[:, 3]
    else:
        ri = rj = rl = np.zeros(0, dtype=np.int64)
        vals = np.zeros(0)
    return TrilinearTensor._from_entries(basis, ri, rj, rl, vals)


def assemble_trilinear(
    basis: BasisSpec,
    cache_dir: Optional[Path] = None,
    use_cache: bool = True,
) -> TrilinearTensor:
    """Assemble (or load from cache) the trilinear tensor for a basis.

    The cache is keyed by (cutoff, alpha); a stale or corrupt cache file
    is silently rebuilt and rewritten.
    """
    cdir = Path(cache_dir) if cache_dir is not None else default_cache_dir()
    path = _cache_path(cdir, basis.cutoff, basis.alpha)
    if use_cache and path.exists():
        try:
            return load_tensor_cache(path, basis)
        except FormatError:
            pass
    tensor = TrilinearTensor._from_entries(basis, *_assemble_entries(basis))
    if use_cache:
        try:
            save_tensor_cache(tensor, path)
        except OSError:
            pass
    return tensor


# -- diagonal operators ----------------------------------------------------


def ahat_diag(basis: BasisSpec) -> np.ndarray:
    """Diagonal of Ahat: |k|^2 / (1 + alpha |k|^2) per mode."""
    return basis.w_grad / basis.w_v


def ahat(u: np.ndarray, basis: BasisSpec) -> np.ndarray:
    return ahat_diag(basis) * basis.check_field(u)


# -- forcing families ------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ForcingSpec:
    """Drift forcing F and noise operator G, by family.

    Drift families: "zero"; "linear" F(u,t) = kappa u; "modulated"
    F(u,t) = kappa sin(omega t) u.  Noise families: "zero"; "diagonal"
    with column j acting as sigma_j D_j u for fixed per-mode diagonals
    D_j; "additive" with constant (state-independent) raw columns.  The
    additive family exists for the linear oracle instances and is the
    one family that does not vanish at u = 0.
    """

    drift_family: str = "zero"
    kappa: float = 0.0
    omega: float = 1.0
    noise_family: str = "zero"
    sigma: tuple = ()
    noise_diags: Optional[np.ndarray] = None  # (m, M), rows D_j; None = ones
    noise_columns: Optional[np.ndarray] = None  # (M, m) raw additive columns

    def __post_init__(self):
        if self.drift_family not in DRIFT_FAMILIES:
            raise UnknownFamilyError("forcing", self.drift_family, DRIFT_FAMILIES)
        if self.noise_family not in NOISE_FAMILIES:
            raise UnknownFamilyError("noise", self.noise_family, NOISE_FAMILIES)
        if self.noise_family == "additive" and self.noise_columns is None:
            raise ConfigError("noise", "additive noise requires explicit columns")
        if self.noise_family == "diagonal" and len(self.sigma) == 0:
            raise ConfigError("noise", "diagonal noise requires at least one sigma")
        if self.noise_columns is not None:
            self.noise_columns.setflags(write=False)
        if self.noise_diags is not None:
            self.noise_diags.setflags(write=False)

    @property
    def m(self) -> int:
        """Brownian dimension."""
        if self.noise_family == "zero":
            return 0
        if self.noise_family == "diagonal":
            return len(self.sigma)
        return self.noise_columns.shape[1]

    @property
    def satisfies_zero_condition(self) -> bool:
        """Whether F(0,t)=0 and G(0,t)=0 both hold exactly."""
        return self.noise_family != "additive"

    def validate_against(self, basis: BasisSpec) -> None:
        if self.noise_family == "additive":
            cols = self.noise_columns
            if cols.ndim != 2 or cols.shape[0] != basis.size:
                raise DimensionMismatchError(
                    basis.size, cols.shape[0] if cols.ndim == 2 else -1, "noise columns"
                )
            if not np.all(np.isfinite(cols)):
                raise ConfigError("noise", "additive noise columns must be finite")
        if self.noise_family == "diagonal" and self.noise_diags is not None:
            d = self.noise_diags
            if d.shape != (len(self.sigma), basis.size):
                raise DimensionMismatchError(basis.size, d.shape[-1], "noise diagonals")


def _drift_gain(forcing: ForcingSpec, t: float) -> float:
    if forcing.drift_family == "zero":
        return 0.0
    if forcing.drift_family == "linear":
        return forcing.kappa
    return forcing.kappa * np.sin(forcing.omega * t)


def fhat(u: np.ndarray, t: float, forcing: ForcingSpec, basis: BasisSpec) -> np.ndarray:
    """Resolvent-composed drift forcing Fhat(u, t)."""
    gain = _drift_gain(forcing, t)
    if gain == 0.0:
        return np.zeros(basis.size)
    return gain * basis.check_field(u) / basis.w_v


def fhat_lin_diag(t: float, forcing: ForcingSpec, basis: BasisSpec) -> np.ndarray:
    """Diagonal Jacobian of Fhat at time t (all drift families are
    diagonal-linear in u)."""
    return _drift_gain(forcing, t) / basis.w_v


def _diag_matrix(forcing: ForcingSpec, basis: BasisSpec) -> np.ndarray:
    """(m, M) rows sigma_j D_j for the diagonal family."""
    sig = np.asarray(forcing.sigma, dtype=float)
    if forcing.noise_diags is None:
        return sig[:, None] * np.ones((len(sig), basis.size))
    return sig[:, None] * forcing.noise_diags


def ghat(u: np.ndarray, t: float, forcing: ForcingSpec, basis: BasisSpec) -> np.ndarray:
    """All m columns of Ghat(u, t), shape (M, m)."""
    if forcing.noise_family == "zero":
        return np.zeros((basis.size, 0))
    if forcing.noise_family == "additive":
        return forcing.noise_columns / basis.w_v[:, None]
    rows = _diag_matrix(forcing, basis)  # (m, M)
    return (rows * (basis.check_field(u) / basis.w_v)[None, :]).T


def ghat_dot(
    u: np.ndarray, t: float, hdot: np.ndarray, forcing: ForcingSpec, basis: BasisSpec
) -> np.ndarray:
    """Ghat(u, t) @ hdot without materializing all columns."""
    if forcing.noise_family == "zero" or hdot is None:
        return np.zeros(basis.size)
    if forcing.noise_family == "additive":
        return (forcing.noise_columns @ hdot) / basis.w_v
    rows = _diag_matrix(forcing, basis)
    return (hdot @ rows) * u / basis.w_v


def ghat_dot_lin_diag(
    t: float, hdot: np.ndarray, forcing: ForcingSpec, basis: BasisSpec
) -> np.ndarray:
    """Diagonal Jacobian of u -> Ghat(u, t) hdot."""
    if forcing.noise_family != "diagonal" or hdot is None:
        return np.zeros(basis.size)
    rows = _diag_matrix(forcing, basis)
    return (hdot @ rows) / basis.w_v


def noise_increment_batch(
    U: np.ndarray, t: float, dW: np.ndarray, forcing: ForcingSpec, basis: BasisSpec
) -> np.ndarray:
    """Ghat(u_b, t) @ dW_b for every batch row; shapes (B, M), (B, m)."""
    if forcing.noise_family == "zero":
        return np.zeros_like(U)
    if forcing.noise_family == "additive":
        return (dW @ forcing.noise_columns.T) / basis.w_v[None, :]
    rows = _diag_matrix(forcing, basis)
    return (dW @ rows) * U / basis.w_v[None, :]


# -- model configuration and drift -----------------------------------------


@dataclass(frozen=True, eq=False)
class ModelConfig:
    """Physical and numerical description of one model instance."""

    nu: float
    basis: BasisSpec
    forcing: ForcingSpec
    u0: np.ndarray
    horizon: float
    include_nonlinear: bool = True

    def __post_init__(self):
        if not np.isfinite(self.nu) or self.nu <= 0:
            raise ConfigError("nu", f"nu must be positive and finite, got {self.nu}")
        if not np.isfinite(self.horizon) or self.horizon <= 0:
            raise ConfigError("T", f"horizon must be positive and finite, got {self.horizon}")
        u0 = self.basis.check_field(self.u0, "initial condition")
        if not np.all(np.isfinite(u0)):
            raise ConfigError("u0", "initial condition has non-finite entries")
        object.__setattr__(self, "u0", u0)
        self.u0.setflags(write=False)
        self.forcing.validate_against(self.basis)

    @property
    def alpha(self) -> float:
        return self.basis.alpha

    @property
    def m(self) -> int:
        return self.forcing.m


def drift(
    u: np.ndarray,
    t: float,
    hdot: Optional[np.ndarray],
    config: ModelConfig,
    tensor: Optional[TrilinearTensor],
) -> np.ndarray:
    """Deterministic right-hand side -nu Ahat u - Bhat(u,u) + Fhat + Ghat hdot."""
    basis = config.basis
    out = -config.nu * ahat(u, basis)
    if config.include_nonlinear and tensor is not None and tensor.nnz:
        out -= tensor.bhat(u, u)
    out += fhat(u, t, config.forcing, basis)
    if hdot is not None:
        out += ghat_dot(u, t, hdot, config.forcing, basis)
    return out


def drift_batch(
    U: np.ndarray,
    t: float,
    hdot: Optional[np.ndarray],
    config: ModelConfig,
    tensor: Optional[TrilinearTensor],
) -> np.ndarray:
    """Row-wise drift over a batch (B, M) at a common time and control."""
    basis = config.basis
    out = -config.nu * (ahat_diag(basis)[None, :] * U)
    if config.include_nonlinear and tensor is not None and tensor.nnz:
        out -= tensor.bhat_batch(U, U)
    gain = _drift_gain(config.forcing, t)
    if gain != 0.0:
        out += gain * U / basis.w_v[None, :]
    if hdot is not None and config.forcing.m:
        if config.forcing.noise_family == "additive":
            out += ((config.forcing.noise_columns @ hdot) / basis.w_v)[None, :]
        elif config.forcing.noise_family == "diagonal":
            rows = _diag_matrix(config.forcing, basis)
            out += (hdot @ rows)[None, :] * U / basis.w_v[None, :]
    return out


def drift_jtvp(
    u: np.ndarray,
    t: float,
    hdot: Optional[np.ndarray],
    lam: np.ndarray,
    config: ModelConfig,
    tensor: Optional[TrilinearTensor],
) -> np.ndarray:
    """Transpose-Jacobian product of the drift against a costate."""
    basis = config.basis
    diag = -config.nu * ahat_diag(basis) + fhat_lin_diag(t, config.forcing, basis)
    if hdot is not None:
        diag = diag + ghat_dot_lin_diag(t, hdot, config.forcing, basis)
    out = diag * lam
    if config.include_nonlinear and tensor is not None and tensor.nnz:
        out -= tensor.jtvp(u, lam)
    return out


def drift_control_jacobian(
    u: np.ndarray, t: float, forcing: ForcingSpec, basis: BasisSpec
) -> np.ndarray:
    """d drift / d hdot = Ghat(u, t), shape (M, m)."""
    return ghat(u, t, forcing, basis)
