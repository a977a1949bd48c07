"""Configuration document parsing and hashing."""

import json

import numpy as np
import pytest

from grade2.basis import COS, ModeKey
from grade2.config import config_hash, parse_config, parse_config_dict
from grade2.errors import ConfigError, FormatError, UnknownFamilyError

MINIMAL = {"nu": 1, "alpha": 1, "cutoff": 2, "forcing": "linear", "kappa": 0.1, "T": 1}


def test_minimal_document_valid():
    exp = parse_config_dict(dict(MINIMAL))
    assert exp.config.nu == 1.0
    assert exp.config.alpha == 1.0
    assert exp.config.basis.cutoff == 2
    assert exp.config.horizon == 1.0
    assert exp.config.forcing.drift_family == "linear"
    assert exp.config.forcing.kappa == 0.1
    assert exp.config.forcing.noise_family == "zero"
    assert np.all(exp.config.u0 == 0.0)
    # defaults filled
    assert exp.seed == 0
    assert exp.dt == 0.01
    assert exp.eps_list == (0.4, 0.2, 0.1, 0.05)
    assert exp.rate_options.cells == 64
    assert len(exp.config_hash) == 64


def test_negative_nu_names_field():
    doc = dict(MINIMAL)
    doc["nu"] = -1
    with pytest.raises(ConfigError) as err:
        parse_config_dict(doc)
    assert err.value.field == "nu"


def test_unknown_family_lists_supported():
    doc = dict(MINIMAL)
    doc["forcing"] = "quadratic"
    with pytest.raises(UnknownFamilyError) as err:
        parse_config_dict(doc)
    msg = str(err.value)
    for family in ("zero", "linear", "modulated"):
        assert family in msg


def test_unknown_field_rejected():
    doc = dict(MINIMAL)
    doc["viscousity"] = 2.0
    with pytest.raises(ConfigError) as err:
        parse_config_dict(doc)
    assert err.value.field == "viscousity"


def test_missing_required_field():
    doc = dict(MINIMAL)
    del doc["alpha"]
    with pytest.raises(ConfigError) as err:
        parse_config_dict(doc)
    assert err.value.field == "alpha"


def test_bool_not_accepted_as_number():
    doc = dict(MINIMAL)
    doc["nu"] = True
    with pytest.raises(ConfigError):
        parse_config_dict(doc)


def test_structured_forcing_diagonal():
    doc = dict(MINIMAL)
    doc["forcing"] = {
        "drift": {"family": "modulated", "kappa": 0.5, "omega": 3.0},
        "noise": {"family": "diagonal", "sigma": [0.4, 0.2]},
    }
    del doc["kappa"]
    exp = parse_config_dict(doc)
    f = exp.config.forcing
    assert f.drift_family == "modulated" and f.omega == 3.0
    assert f.noise_family == "diagonal" and f.sigma == (0.4, 0.2)
    assert exp.config.m == 2


def test_structured_forcing_additive_columns():
    doc = dict(MINIMAL)
    doc["forcing"] = {
        "noise": {"family": "additive", "columns": [{"1,0,cos": 2.0}, {"0,1,sin": 1.5}]}
    }
    exp = parse_config_dict(doc)
    f = exp.config.forcing
    assert f.noise_family == "additive"
    assert f.m == 2
    i = exp.config.basis.index_of(ModeKey(1, 0, COS))
    assert f.noise_columns[i, 0] == 2.0
    assert not f.satisfies_zero_condition


def test_u0_and_target_sparse_fields():
    doc = dict(MINIMAL)
    doc["u0"] = {"1,0,cos": 0.8}
    doc["target"] = {"1,1,sin": -0.25}
    exp = parse_config_dict(doc)
    basis = exp.config.basis
    assert exp.config.u0[basis.index_of(ModeKey(1, 0, COS))] == 0.8
    assert exp.target[basis.index_of(ModeKey(1, 1, "sin"))] == -0.25
    assert np.count_nonzero(exp.target) == 1


def test_bad_mode_key_in_u0():
    doc = dict(MINIMAL)
    doc["u0"] = {"5,5,cos": 1.0}  # outside cutoff 2
    with pytest.raises(ConfigError):
        parse_config_dict(doc)
    doc["u0"] = {"not-a-mode": 1.0}
    with pytest.raises(ConfigError):
        parse_config_dict(doc)


def test_rate_block_and_validation():
    doc = dict(MINIMAL)
    doc["rate"] = {"cells": 32, "gap_tol": 1e-4, "n_bound": 2.0}
    exp = parse_config_dict(doc)
    assert exp.rate_options.cells == 32
    assert exp.rate_options.gap_tol == 1e-4
    assert exp.rate_options.n_bound == 2.0
    doc["rate"] = {"cellz": 32}
    with pytest.raises(ConfigError):
        parse_config_dict(doc)


def test_experiment_scalar_validation():
    for key, bad in [
        ("seed", -1),
        ("dt", 0.0),
        ("n", 0),
        ("delta", -0.5),
        ("threads", 0),
        ("chunk", 0),
    ]:
        doc = dict(MINIMAL)
        doc[key] = bad
        with pytest.raises(ConfigError) as err:
            parse_config_dict(doc)
        assert err.value.field == key


# -- hashing ---------------------------------------------------------------


def test_hash_stable_under_reordering(tmp_path):
    a = tmp_path / "a.json"
    b = tmp_path / "b.json"
    a.write_text(json.dumps(MINIMAL, indent=4))
    reordered = dict(reversed(list(MINIMAL.items())))
    b.write_text(json.dumps(reordered))
    assert parse_config(a).config_hash == parse_config(b).config_hash


def test_hash_changes_with_semantic_fields():
    base = parse_config_dict(dict(MINIMAL)).config_hash
    for key, value in [
        ("nu", 1.5),
        ("kappa", 0.2),
        ("n", 20000),
        ("u0", {"1,0,cos": 0.1}),
        ("include_nonlinear", False),
    ]:
        doc = dict(MINIMAL)
        doc[key] = value
        assert parse_config_dict(doc).config_hash != base, key


def test_hash_ignores_shorthand_vs_structured_equivalence():
    """The same semantic forcing written both ways hashes identically
    because hashing happens after canonicalization."""
    short = parse_config_dict(dict(MINIMAL))
    structured = dict(MINIMAL)
    del structured["kappa"]
    structured["forcing"] = {
        "drift": {"family": "linear", "kappa": 0.1, "omega": 1.0},
        "noise": {"family": "zero"},
    }
    assert parse_config_dict(structured).config_hash == short.config_hash


def test_config_hash_function_is_order_insensitive():
    doc1 = {"b": 1, "a": [1, 2]}
    doc2 = {"a": [1, 2], "b": 1}
    assert config_hash(doc1) == config_hash(doc2)
    assert config_hash({"a": [2, 1], "b": 1}) != config_hash(doc1)


# -- file-level ------------------------------------------------------------


def test_parse_config_bad_json_reports_line(tmp_path):
    p = tmp_path / "broken.json"
    p.write_text('{"nu": 1,\n  "alpha": }')
    with pytest.raises(FormatError) as err:
        parse_config(p)
    assert "line 2" in str(err.value)


def test_parse_config_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        parse_config(tmp_path / "nope.json")
