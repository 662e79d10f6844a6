"""Result files: the bundle report, the binary tensor container and CSV tables.

The container layout is the 8-byte magic ``FOLROM01``, a little-endian
uint64 giving the length of a UTF-8 JSON header, the header itself and
then the raw little-endian float64 tensors in the order listed by the
header's ``tensors`` table (name, shape, byte offset into the payload).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .basis import FunctionLibrary, ShiftOperator
from .data import ParseError, read_table, write_table
from .foliation import Foliation
from .linid import BundleSet, LinearSkewModel

MAGIC = b"FOLROM01"
VERSION = 1


# ---------------------------------------------------------------- container


def write_container(path, meta: dict, tensors: dict):
    """Write named float64 tensors with a JSON metadata header."""
    table, blobs, off = [], [], 0
    for name, a in tensors.items():
        a = np.asarray(a, dtype="<f8", order="C")
        table.append({"name": name, "shape": list(a.shape), "offset": off})
        blobs.append(a.tobytes())
        off += a.nbytes
    head = json.dumps({**meta, "version": VERSION, "tensors": table}, sort_keys=True).encode()
    with Path(path).open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for b in blobs:
            fh.write(b)


def read_container(path):
    """Inverse of :func:`write_container`; returns ``(meta, tensors)``."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ParseError(f"{path}: not a container file (bad magic)")
    if len(raw) < 16:
        raise ParseError(f"{path}: truncated header")
    (n,) = struct.unpack("<Q", raw[8:16])
    try:
        meta = json.loads(raw[16:16 + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ParseError(f"{path}: corrupt metadata ({e})") from None
    if meta.get("version") != VERSION:
        raise ParseError(f"{path}: unsupported container version {meta.get('version')!r}")
    payload = raw[16 + n:]
    tensors = {}
    for t in meta.pop("tensors"):
        size = int(np.prod(t["shape"])) * 8
        if t["offset"] + size > len(payload):
            raise ParseError(f"{path}: tensor {t['name']!r} runs past the end of the file")
        buf = payload[t["offset"]:t["offset"] + size]
        tensors[t["name"]] = np.frombuffer(buf, dtype="<f8").reshape(t["shape"]).astype(float)
    return meta, tensors


def _library_meta(lib: FunctionLibrary):
    return {"kind": lib.kind, "grid_sizes": list(lib.grid_sizes), "domain": list(lib.domain),
            "basis": lib.basis}


def _library_from(meta):
    return FunctionLibrary(meta["kind"], tuple(meta["grid_sizes"]), tuple(meta["domain"]), meta["basis"])


# ---------------------------------------------------------------- foliations


def save_foliation(path, fol: Foliation):
    meta = {"type": "foliation", "kind": fol.kind, "enc_order": fol.enc_order, "coords": list(fol.coords),
            "d_X": fol.d_X, "map_order": fol.map_order, "autonomous_map": fol.autonomous_map,
            "library": _library_meta(fol.library)}
    tensors = {"frame": fol.frame, "u0": fol.u0, "u1": fol.u1, "unl": fol.unl, "R": fol.R,
               "latent_ics": fol.latent_ics}
    write_container(path, meta, tensors)


def load_foliation(path) -> Foliation:
    meta, t = read_container(path)
    if meta.get("type") != "foliation":
        raise ParseError(f"{path}: container holds {meta.get('type')!r}, not a foliation")
    fol = Foliation(meta["kind"], meta["enc_order"], meta["coords"], meta["d_X"], _library_from(meta["library"]),
                    t["frame"], meta["map_order"], meta["autonomous_map"], t["u1"], t["unl"], t["R"],
                    t["latent_ics"].reshape(-1, len(meta["coords"])))
    fol.u0 = t["u0"]
    return fol


# ---------------------------------------------------------------- linear model


def save_linear_model(path, model: LinearSkewModel, extra: dict | None = None):
    meta = {"type": "linear-model", "library": _library_meta(model.library), "shift_source": model.shift.source,
            **(extra or {})}
    write_container(path, meta, {"A": model.A, "b": model.b, "steady": model.steady, "shift": model.shift.matrix})


def load_linear_model(path):
    """Returns ``(model, meta)``; extra metadata written with the model is kept in ``meta``."""
    meta, t = read_container(path)
    if meta.get("type") != "linear-model":
        raise ParseError(f"{path}: container holds {meta.get('type')!r}, not a linear model")
    lib = _library_from(meta["library"])
    model = LinearSkewModel(t["A"], t["b"], lib, ShiftOperator(t["shift"], meta["shift_source"]), t["steady"])
    return model, meta


# ---------------------------------------------------------------- reports and tables


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if np.isfinite(x) else None
    if isinstance(x, complex):
        return [_jsonable(x.real), _jsonable(x.imag)]
    return x


def write_json(path, obj):
    Path(path).write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def write_bundle_report(path, bundles: BundleSet, index_sets=(), dt=None, order_cap=7):
    """bundles.json: eigenvalues (re, im), magnitudes, spectral quotients, resonances."""
    write_json(path, bundles.report(index_sets, dt, order_cap))


HISTORY_COLUMNS = ("step", "L_train", "L_test", "gradnorm")


def write_history(path, hist):
    write_table(path, {c: getattr(hist, c) for c in HISTORY_COLUMNS})


def read_history(path):
    return read_table(path, HISTORY_COLUMNS, allow_nan=True)


RELERR_COLUMNS = ("amplitude", "mean_train", "max_train", "count_train", "mean_test", "max_test", "count_test")


def write_relerr(path, train_bins: dict, test_bins: dict | None = None):
    """Amplitude-binned relative error curves; ``test_bins`` must share the edges."""
    n = len(train_bins["centers"])
    nan = np.full(n, np.nan)
    te = test_bins or {"mean": nan, "max": nan, "count": np.zeros(n)}
    write_table(path, {"amplitude": train_bins["centers"], "mean_train": train_bins["mean"],
                       "max_train": train_bins["max"], "count_train": train_bins["count"],
                       "mean_test": te["mean"], "max_test": te["max"], "count_test": te["count"]})


def read_relerr(path):
    return read_table(path, RELERR_COLUMNS, allow_nan=True)
