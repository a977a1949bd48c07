"""Experiment configuration: a single JSON document describing the model
and the run parameters, with defaults filled, strict field validation,
and a canonical content hash.

The hash is the sha256 of the defaults-filled document serialized with
sorted keys, so it is independent of field order and whitespace in the
source file and changes exactly when some field value changes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .basis import BasisSpec, build_torus_basis, coeffs_from_dict
from .errors import ConfigError, FormatError, UnknownFamilyError
from .operators import DRIFT_FAMILIES, NOISE_FAMILIES, ForcingSpec, ModelConfig
from .rate import RateOptions

_MODEL_KEYS = {
    "nu",
    "alpha",
    "cutoff",
    "T",
    "forcing",
    "kappa",
    "omega",
    "u0",
    "include_nonlinear",
}
_EXPERIMENT_KEYS = {
    "seed",
    "dt",
    "eps",
    "eps_list",
    "n",
    "delta",
    "target",
    "threads",
    "chunk",
    "rate",
}
_RATE_KEYS = {"cells", "steps_per_cell", "gap_tol", "n_bound"}

_EXPERIMENT_DEFAULTS = {
    "seed": 0,
    "dt": 0.01,
    "eps": 0.1,
    "eps_list": [0.4, 0.2, 0.1, 0.05],
    "n": 10000,
    "delta": 0.3,
    "target": {},
    "threads": 1,
    "chunk": 2048,
}
_RATE_DEFAULTS = {"cells": 64, "steps_per_cell": 2, "gap_tol": 1e-3, "n_bound": None}


@dataclass(frozen=True, eq=False)
class Experiment:
    """A parsed configuration: model, run parameters, canonical form."""

    config: ModelConfig
    doc: dict
    config_hash: str
    seed: int
    dt: float
    eps: float
    eps_list: tuple
    n: int
    delta: float
    target: np.ndarray
    threads: int
    chunk: int
    rate_options: RateOptions


def _require(doc: dict, key: str, kind, what: str):
    if key not in doc:
        raise ConfigError(key, f"missing required field ({what})")
    value = doc[key]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, kind) or isinstance(value, bool):
        raise ConfigError(key, f"expected {what}, got {value!r}")
    return value


def _sparse_field(doc_value, key: str) -> dict:
    if not isinstance(doc_value, dict):
        raise ConfigError(key, f"expected a mode->value object, got {doc_value!r}")
    out = {}
    for mode_key, value in doc_value.items():
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(key, f"value for mode {mode_key!r} must be a number")
        out[str(mode_key)] = float(value)
    return dict(sorted(out.items()))


def _forcing_from_doc(doc: dict, basis: BasisSpec):
    """Accept either the string shorthand ("zero" / "linear" / "modulated",
    with top-level kappa/omega) or the structured {drift, noise} form.
    Returns (ForcingSpec, canonical structured form)."""
    raw = doc.get("forcing", "zero")
    kappa = doc.get("kappa", 0.0)
    omega = doc.get("omega", 1.0)

    if isinstance(raw, str):
        drift = {"family": raw, "kappa": float(kappa), "omega": float(omega)}
        noise = {"family": "zero"}
    elif isinstance(raw, dict):
        extra = set(raw) - {"drift", "noise"}
        if extra:
            raise ConfigError("forcing", f"unknown forcing keys {sorted(extra)}")
        drift_doc = raw.get("drift", {"family": "zero"})
        noise_doc = raw.get("noise", {"family": "zero"})
        if not isinstance(drift_doc, dict) or not isinstance(noise_doc, dict):
            raise ConfigError("forcing", "drift and noise must be objects")
        drift = {
            "family": drift_doc.get("family", "zero"),
            "kappa": float(drift_doc.get("kappa", kappa)),
            "omega": float(drift_doc.get("omega", omega)),
        }
        noise = dict(noise_doc)
    else:
        raise ConfigError("forcing", f"expected a family name or object, got {raw!r}")

    if drift["family"] not in DRIFT_FAMILIES:
        raise UnknownFamilyError("forcing", drift["family"], DRIFT_FAMILIES)
    noise_family = noise.get("family", "zero")
    if noise_family not in NOISE_FAMILIES:
        raise UnknownFamilyError("noise", noise_family, NOISE_FAMILIES)

    sigma = ()
    noise_diags = None
    noise_columns = None
    canonical_noise = {"family": noise_family}
    if noise_family == "diagonal":
        sigma_doc = noise.get("sigma")
        if not isinstance(sigma_doc, list) or not sigma_doc:
            raise ConfigError("noise", "diagonal noise needs a nonempty sigma list")
        sigma = tuple(float(s) for s in sigma_doc)
        canonical_noise["sigma"] = list(sigma)
        diags_doc = noise.get("diags")
        if diags_doc is not None:
            if (
                not isinstance(diags_doc, list)
                or len(diags_doc) != len(sigma)
                or any(not isinstance(row, dict) for row in diags_doc)
            ):
                raise ConfigError(
                    "noise", "diags must be one mode->value object per sigma entry"
                )
            rows = [_sparse_field(row, "noise") for row in diags_doc]
            noise_diags = np.stack([coeffs_from_dict(basis, row) for row in rows])
            canonical_noise["diags"] = rows
    elif noise_family == "additive":
        cols_doc = noise.get("columns")
        if not isinstance(cols_doc, list) or not cols_doc:
            raise ConfigError(
                "noise", "additive noise needs a nonempty list of column objects"
            )
        col_dicts = [_sparse_field(col, "noise") for col in cols_doc]
        noise_columns = np.stack(
            [coeffs_from_dict(basis, col) for col in col_dicts], axis=1
        )
        canonical_noise["columns"] = col_dicts
    extra = set(noise) - {"family", "sigma", "diags", "columns"}
    if extra:
        raise ConfigError("noise", f"unknown noise keys {sorted(extra)}")

    forcing = ForcingSpec(
        drift_family=drift["family"],
        kappa=drift["kappa"],
        omega=drift["omega"],
        noise_family=noise_family,
        sigma=sigma,
        noise_diags=noise_diags,
        noise_columns=noise_columns,
    )
    forcing.validate_against(basis)
    canonical = {"drift": drift, "noise": canonical_noise}
    return forcing, canonical


def parse_config_dict(doc: dict) -> Experiment:
    """Validate a configuration document and fill defaults.

    Unknown fields are rejected rather than ignored so that typos fail
    loudly instead of silently running a different experiment.
    """
    if not isinstance(doc, dict):
        raise ConfigError("config", "configuration document must be a JSON object")
    unknown = set(doc) - _MODEL_KEYS - _EXPERIMENT_KEYS
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown configuration field")

    nu = _require(doc, "nu", float, "a number")
    alpha = _require(doc, "alpha", float, "a number")
    cutoff = _require(doc, "cutoff", int, "an integer")
    horizon = _require(doc, "T", float, "a number")
    if nu <= 0:
        raise ConfigError("nu", f"viscosity must be positive, got {nu}")

    basis = build_torus_basis(cutoff, alpha)
    forcing, canonical_forcing = _forcing_from_doc(doc, basis)

    u0_dict = _sparse_field(doc.get("u0", {}), "u0")
    u0 = coeffs_from_dict(basis, u0_dict)
    include_nonlinear = doc.get("include_nonlinear", True)
    if not isinstance(include_nonlinear, bool):
        raise ConfigError("include_nonlinear", "expected true or false")

    config = ModelConfig(
        nu=nu,
        basis=basis,
        forcing=forcing,
        u0=u0,
        horizon=horizon,
        include_nonlinear=include_nonlinear,
    )

    exp = dict(_EXPERIMENT_DEFAULTS)
    for key in _EXPERIMENT_KEYS - {"rate"}:
        if key in doc:
            exp[key] = doc[key]
    rate_doc = doc.get("rate", {})
    if not isinstance(rate_doc, dict):
        raise ConfigError("rate", "expected an object of optimizer settings")
    unknown_rate = set(rate_doc) - _RATE_KEYS
    if unknown_rate:
        raise ConfigError("rate", f"unknown rate settings {sorted(unknown_rate)}")
    rate = dict(_RATE_DEFAULTS)
    rate.update(rate_doc)

    seed = exp["seed"]
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError("seed", f"seed must be a nonnegative integer, got {seed!r}")
    dt = float(exp["dt"])
    if dt <= 0:
        raise ConfigError("dt", f"time step must be positive, got {dt}")
    eps = float(exp["eps"])
    if eps < 0:
        raise ConfigError("eps", f"noise scale must be nonnegative, got {eps}")
    eps_list = [float(e) for e in exp["eps_list"]]
    n = exp["n"]
    if not isinstance(n, int) or isinstance(n, bool) or n < 1:
        raise ConfigError("n", f"sample count must be a positive integer, got {n!r}")
    delta = float(exp["delta"])
    if delta <= 0:
        raise ConfigError("delta", f"event radius must be positive, got {delta}")
    target_dict = _sparse_field(exp["target"], "target")
    target = coeffs_from_dict(basis, target_dict)
    threads = exp["threads"]
    if not isinstance(threads, int) or isinstance(threads, bool) or threads < 1:
        raise ConfigError("threads", f"thread count must be >= 1, got {threads!r}")
    chunk = exp["chunk"]
    if not isinstance(chunk, int) or isinstance(chunk, bool) or chunk < 1:
        raise ConfigError("chunk", f"chunk size must be >= 1, got {chunk!r}")

    rate_options = RateOptions(
        cells=int(rate["cells"]),
        steps_per_cell=int(rate["steps_per_cell"]),
        gap_tol=float(rate["gap_tol"]),
        n_bound=None if rate["n_bound"] is None else float(rate["n_bound"]),
    )
    if rate_options.cells < 1 or rate_options.steps_per_cell < 1:
        raise ConfigError("rate", "cells and steps_per_cell must be >= 1")

    filled = {
        "nu": nu,
        "alpha": alpha,
        "cutoff": cutoff,
        "T": horizon,
        "forcing": canonical_forcing,
        "u0": u0_dict,
        "include_nonlinear": include_nonlinear,
        "seed": seed,
        "dt": dt,
        "eps": eps,
        "eps_list": eps_list,
        "n": n,
        "delta": delta,
        "target": target_dict,
        "threads": threads,
        "chunk": chunk,
        "rate": rate,
    }
    return Experiment(
        config=config,
        doc=filled,
        config_hash=config_hash(filled),
        seed=seed,
        dt=dt,
        eps=eps,
        eps_list=tuple(eps_list),
        n=n,
        delta=delta,
        target=target,
        threads=threads,
        chunk=chunk,
        rate_options=rate_options,
    )


def parse_config(path) -> Experiment:
    """Load and validate a JSON configuration file."""
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(
            f"{path} is not valid JSON (line {exc.lineno}, column {exc.colno}): {exc.msg}"
        ) from exc
    return parse_config_dict(doc)


def config_hash(filled_doc: dict) -> str:
    """sha256 over the canonical serialization of a defaults-filled doc."""
    canonical = json.dumps(filled_doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()
