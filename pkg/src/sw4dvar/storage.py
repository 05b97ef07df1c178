"""File formats: state snapshots, observations, chain caches, traces.

Formats are deliberately boring.  States are a fixed binary header plus
raw little-endian doubles (or one value per line in CSV), observations
are a flat CSV with a JSON sidecar describing the operator, Jacobian
chains are a directory of per-factor compressed-row dumps under an
index file, and every diagnostic table is plain CSV.  Everything
round-trips bit-exactly; reload validation is strict so stale caches
fail loudly rather than silently mixing linearisations.
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .background import ImplicitBackground, WindowRecord
from .enkf import Ensemble
from .jacobians import JacobianChain, SparseJacobian
from .observations import ObservationSet, make_operator

STATE_MAGIC = b"SW4DSTAT"
STATE_VERSION = 1
CHAIN_VERSION = 1
BACKGROUND_VERSION = 1

TRACE_COLUMNS = ("outer_iter", "cost", "grad_norm", "step_norm",
                 "pcg_iters", "pcg_rel_residual")
METRIC_COLUMNS = ("time", "rel_error", "method", "seed")
TUNING_COLUMNS = ("radius", "rho", "beta", "final_rel_error")


def _infer_d(x: np.ndarray) -> int:
    d2, rem = divmod(x.size, 3)
    d = int(round(np.sqrt(d2)))
    if rem != 0 or 3 * d * d != x.size:
        raise ValueError("state length is not 3*d*d")
    return d


def save_state(path, x: np.ndarray) -> None:
    """State snapshot: u, v, h blocks row-major.  Path ending in .csv
    writes the text form, anything else the binary form."""
    path = Path(path)
    x = np.ascontiguousarray(x, dtype=np.float64).ravel()
    d = _infer_d(x)
    if path.suffix == ".csv":
        with open(path, "w", newline="") as fh:
            fh.write(f"sw-state,{STATE_VERSION},{d}\n")
            for val in x:
                fh.write(f"{float(val)!r}\n")
        return
    with open(path, "wb") as fh:
        fh.write(STATE_MAGIC)
        fh.write(struct.pack("<II", STATE_VERSION, d))
        fh.write(x.astype("<f8").tobytes())


def load_state(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".csv":
        with open(path, newline="") as fh:
            tag, version, d = fh.readline().strip().split(",")
            if tag != "sw-state" or int(version) != STATE_VERSION:
                raise ValueError(f"not a state CSV: {path}")
            d = int(d)
            x = np.array([float(line) for line in fh], dtype=np.float64)
    else:
        raw = path.read_bytes()
        if raw[:8] != STATE_MAGIC:
            raise ValueError(f"not a state snapshot: {path}")
        version, d = struct.unpack("<II", raw[8:16])
        if version != STATE_VERSION:
            raise ValueError(f"unsupported state version {version}")
        x = np.frombuffer(raw[16:], dtype="<f8").astype(np.float64)
    if x.size != 3 * d * d:
        raise ValueError(f"state payload truncated in {path}")
    return x


def save_observations(path, obs: ObservationSet) -> None:
    """CSV rows (l, time, obs_index, value); operator and seed go to a
    .json sidecar next to the CSV."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("l", "time", "obs_index", "value"))
        for l in range(obs.k):
            t = obs.times[l]
            for q, idx in enumerate(obs.op.index_list):
                writer.writerow((l, repr(float(t)), int(idx),
                                 repr(float(obs.values[l, q]))))
    sidecar = {
        "scenario": obs.op.scenario, "d": obs.op.d, "r": obs.op.r,
        "sigma": obs.op.sigma, "offset": obs.op.offset, "seed": obs.seed,
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))


def load_observations(path) -> ObservationSet:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    op = make_operator(meta["scenario"], meta["d"], r=meta["r"],
                       sigma=meta["sigma"], offset=meta["offset"])
    col_of = {int(idx): q for q, idx in enumerate(op.index_list)}
    times: dict[int, float] = {}
    values: dict[int, np.ndarray] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != ("l", "time", "obs_index", "value"):
            raise ValueError(f"not an observation CSV: {path}")
        for row in reader:
            l = int(row[0])
            times[l] = float(row[1])
            values.setdefault(l, np.full(op.n_obs, np.nan))[
                col_of[int(row[2])]] = float(row[3])
    k = len(times)
    if sorted(times) != list(range(k)):
        raise ValueError("observation rows must cover l = 0..k-1")
    vals = np.stack([values[l] for l in range(k)])
    if np.any(np.isnan(vals)):
        raise ValueError("observation CSV is missing entries")
    return ObservationSet(times=np.array([times[l] for l in range(k)]),
                          values=vals, op=op, seed=meta["seed"])


def _factor_payload(fac: SparseJacobian, prefix: str) -> dict:
    mat = fac.mat.tocsr()
    return {f"{prefix}_data": mat.data, f"{prefix}_indices": mat.indices,
            f"{prefix}_indptr": mat.indptr,
            f"{prefix}_shape": np.array(mat.shape)}


def _factor_from_payload(z, prefix: str, t_start: float, t_end: float,
                         basepoint_hash: str) -> SparseJacobian:
    mat = sp.csr_matrix((z[f"{prefix}_data"], z[f"{prefix}_indices"],
                         z[f"{prefix}_indptr"]),
                        shape=tuple(z[f"{prefix}_shape"]))
    return SparseJacobian(mat, t_start, t_end, basepoint_hash)


def save_chain(directory, chain: JacobianChain) -> None:
    """Chain cache: index.json plus factor_NNN.npz compressed-row dumps."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = {
        "version": CHAIN_VERSION,
        "k": chain.k,
        "n": chain.n,
        "times": [float(t) for t in chain.times],
        "meta": chain.meta,
        "with_inverse": chain.inverse_factors is not None,
        "factors": [{"t_start": fac.t_start, "t_end": fac.t_end,
                     "basepoint_hash": fac.basepoint_hash}
                    for fac in chain.factors],
        "inverse_hashes": ([fac.basepoint_hash
                            for fac in chain.inverse_factors]
                           if chain.inverse_factors is not None else None),
    }
    (directory / "index.json").write_text(json.dumps(index, indent=2))
    np.save(directory / "states.npy", chain.states)
    for i, fac in enumerate(chain.factors):
        payload = _factor_payload(fac, "fwd")
        if chain.inverse_factors is not None:
            payload.update(_factor_payload(chain.inverse_factors[i], "inv"))
        np.savez_compressed(directory / f"factor_{i:04d}.npz", **payload)


def load_chain(directory) -> JacobianChain:
    directory = Path(directory)
    index = json.loads((directory / "index.json").read_text())
    if index["version"] != CHAIN_VERSION:
        raise ValueError(f"unsupported chain cache version {index['version']}")
    states = np.load(directory / "states.npy")
    factors: list[SparseJacobian] = []
    inverses: list[SparseJacobian] | None = \
        [] if index["with_inverse"] else None
    for i, fmeta in enumerate(index["factors"]):
        z = np.load(directory / f"factor_{i:04d}.npz")
        factors.append(_factor_from_payload(
            z, "fwd", fmeta["t_start"], fmeta["t_end"],
            fmeta["basepoint_hash"]))
        if inverses is not None:
            inverses.append(_factor_from_payload(
                z, "inv", fmeta["t_start"], fmeta["t_end"],
                index["inverse_hashes"][i]))
    return JacobianChain(factors=factors, times=np.array(index["times"]),
                         states=states, inverse_factors=inverses,
                         meta=index["meta"])


def save_background(directory, bg: ImplicitBackground) -> None:
    """Restart dump: base arrays plus one chain cache per record."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {
        "version": BACKGROUND_VERSION,
        "memory": bg.memory,
        "alpha": bg.alpha,
        "n_records": bg.p,
        "record_ops": [{"scenario": rec.op.scenario, "d": rec.op.d,
                        "r": rec.op.r, "sigma": rec.op.sigma,
                        "offset": rec.op.offset} for rec in bg.records],
    }
    (directory / "background.json").write_text(json.dumps(meta, indent=2))
    np.savez(directory / "arrays.npz", mean=bg.mean,
             base_precision=bg.base_precision)
    for i, rec in enumerate(bg.records):
        save_chain(directory / f"record_{i:02d}", rec.chain)


def load_background(directory) -> ImplicitBackground:
    directory = Path(directory)
    meta = json.loads((directory / "background.json").read_text())
    if meta["version"] != BACKGROUND_VERSION:
        raise ValueError("unsupported background dump version")
    arrays = np.load(directory / "arrays.npz")
    records = []
    for i, opmeta in enumerate(meta["record_ops"]):
        chain = load_chain(directory / f"record_{i:02d}")
        op = make_operator(opmeta["scenario"], opmeta["d"], r=opmeta["r"],
                           sigma=opmeta["sigma"], offset=opmeta["offset"])
        records.append(WindowRecord(chain, op))
    return ImplicitBackground(mean=arrays["mean"],
                              base_precision=arrays["base_precision"],
                              memory=meta["memory"], alpha=meta["alpha"],
                              records=tuple(records))


def save_ensemble(directory, e: Ensemble) -> None:
    """One state snapshot per member plus a small metadata file."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "ensemble.json").write_text(json.dumps(
        {"n_members": e.n_members, "time": e.time, "seed": e.seed,
         "step": e.step}, indent=2))
    for m in range(e.n_members):
        save_state(directory / f"member_{m:04d}.bin", e.members[m])


def load_ensemble(directory) -> Ensemble:
    directory = Path(directory)
    meta = json.loads((directory / "ensemble.json").read_text())
    members = np.stack([load_state(directory / f"member_{m:04d}.bin")
                        for m in range(meta["n_members"])])
    return Ensemble(members=members, time=meta["time"], seed=meta["seed"],
                    step=meta["step"])


def _write_csv(path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row[col]) for col in columns])


def _fmt(val):
    if isinstance(val, float):
        return repr(float(val))
    return val


def write_trace_csv(path, trace: list[dict]) -> None:
    _write_csv(path, TRACE_COLUMNS, trace)


def write_metrics_csv(path, rows: list[dict]) -> None:
    _write_csv(path, METRIC_COLUMNS, rows)


def read_metrics_csv(path) -> list[dict]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            out.append({"time": float(row["time"]),
                        "rel_error": float(row["rel_error"]),
                        "method": row["method"], "seed": int(row["seed"])})
    return out


def write_tuning_csv(path, rows: list[dict]) -> None:
    _write_csv(path, TUNING_COLUMNS, rows)


def write_metadata_json(path, metadata: dict) -> None:
    Path(path).write_text(json.dumps(metadata, indent=2, sort_keys=True))
