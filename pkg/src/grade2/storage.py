"""Result persistence: trajectory snapshots, CSV tables, run manifests.

Snapshot layout: one JSON header line (newline-terminated), then the
time grid as raw little-endian float64, then the coefficient rows in
time-major order.  Writing floats in binary keeps roundtrips bit-exact;
the header carries a version field so old readers refuse newer files
instead of misreading them.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .errors import FormatError, SnapshotVersionError
from .integrators import Trajectory
from .montecarlo import SweepReport

SNAPSHOT_FORMAT = "grade2.trajectory"
SNAPSHOT_VERSION = 1


def write_snapshot(traj: Trajectory, path) -> None:
    header = {
        "format": SNAPSHOT_FORMAT,
        "version": SNAPSHOT_VERSION,
        "n_times": int(traj.times.shape[0]),
        "size": int(traj.states.shape[1]),
        "dt": traj.dt,
        "eps": traj.eps,
        "seed": traj.seed,
        "stream": traj.stream,
        "config_hash": traj.config_hash,
        "sup_v": traj.sup_v,
        "sup_w": traj.sup_w,
        "dissipation": traj.dissipation,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode())
        fh.write(b"\n")
        fh.write(np.ascontiguousarray(traj.times, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(traj.states, dtype="<f8").tobytes())


def read_snapshot(path) -> Trajectory:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        blob = fh.read()
    try:
        header = json.loads(header_line.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: snapshot header is not a JSON line: {exc}") from exc
    if header.get("format") != SNAPSHOT_FORMAT:
        raise FormatError(
            f"{path}: not a trajectory snapshot (format={header.get('format')!r})"
        )
    version = header.get("version")
    if version != SNAPSHOT_VERSION:
        raise SnapshotVersionError(version, SNAPSHOT_VERSION)
    try:
        n_times = int(header["n_times"])
        size = int(header["size"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed snapshot header: {exc}") from exc
    expected = 8 * n_times * (1 + size)
    if len(blob) != expected:
        raise FormatError(
            f"{path}: payload is {len(blob)} bytes, header implies {expected}"
        )
    times = np.frombuffer(blob[: 8 * n_times], dtype="<f8").copy()
    states = (
        np.frombuffer(blob[8 * n_times :], dtype="<f8").reshape(n_times, size).copy()
    )
    return Trajectory(
        times=times,
        states=states,
        dt=float(header["dt"]),
        eps=float(header["eps"]),
        seed=int(header["seed"]),
        stream=int(header["stream"]),
        config_hash=str(header.get("config_hash", "")),
        sup_v=float(header["sup_v"]),
        sup_w=float(header["sup_w"]),
        dissipation=(
            None if header.get("dissipation") is None else float(header["dissipation"])
        ),
    )


# -- CSV tables ------------------------------------------------------------


def write_norms_csv(traj: Trajectory, w_v: np.ndarray, lam: np.ndarray, path) -> None:
    """Per-saved-time V and W norms of a trajectory, for plotting."""
    v_sq = (traj.states * traj.states) @ w_v
    w_sq = (traj.states * traj.states) @ (lam * w_v)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "v_norm", "w_norm"])
        for t, v2, w2 in zip(traj.times, v_sq, w_sq):
            writer.writerow([repr(float(t)), repr(float(np.sqrt(v2))), repr(float(np.sqrt(w2)))])


SWEEP_COLUMNS = ["eps", "n", "hits", "p_hat", "lo", "hi", "neg_eps_log_p", "i_ref"]


def write_sweep_csv(report: SweepReport, path) -> None:
    """Sweep table, one row per eps; censored rows carry nan in the
    transformed column.  Floats are written with repr so equal runs
    produce byte-identical files."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SWEEP_COLUMNS)
        for row in report.rows:
            writer.writerow(
                [
                    repr(row.eps),
                    row.n_samples,
                    row.n_hits,
                    repr(row.p_hat),
                    repr(row.wilson_lo),
                    repr(row.wilson_hi),
                    repr(row.neg_eps_log_p),
                    repr(row.i_ref),
                ]
            )


# -- manifests -------------------------------------------------------------


@dataclass(frozen=True)
class RunManifest:
    """Everything needed to reproduce a command's outputs."""

    command: list
    config_hash: str
    seed: int
    basis_summary: dict
    tool_version: str = __version__
    created: str = field(default_factory=lambda: time.strftime("%Y-%m-%dT%H:%M:%S%z"))
    outputs: list = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "command": list(self.command),
            "config_hash": self.config_hash,
            "seed": self.seed,
            "basis_summary": dict(self.basis_summary),
            "tool_version": self.tool_version,
            "created": self.created,
            "outputs": list(self.outputs),
        }


def basis_summary(basis) -> dict:
    return {"size": basis.size, "alpha": basis.alpha, "cutoff": basis.cutoff}


def write_manifest(manifest: RunManifest, path) -> None:
    with open(path, "w") as fh:
        json.dump(manifest.to_json_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_manifest(path) -> RunManifest:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path} is not a valid manifest: {exc}") from exc
    try:
        return RunManifest(
            command=list(doc["command"]),
            config_hash=str(doc["config_hash"]),
            seed=int(doc["seed"]),
            basis_summary=dict(doc["basis_summary"]),
            tool_version=str(doc["tool_version"]),
            created=str(doc["created"]),
            outputs=list(doc["outputs"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path} is missing manifest fields: {exc}") from exc
