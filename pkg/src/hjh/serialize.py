"""Deterministic on-disk archives for tables, hierarchies, and references.

One format for everything: a gzip-compressed JSON document whose arrays are
embedded as base64 little-endian float64 blobs.  The gzip header timestamp
is pinned to zero so identical content produces identical bytes.
"""

from __future__ import annotations

import base64
import gzip
import json

import numpy as np

from .cell import EffectiveTable, TorusGrid
from .correctors import Hierarchy, SlowGrid
from .effective import solve_effective
from .problem import InitialData, ProblemSpec, initial_from_dict, problem_from_dict
from .reference import FineGrid1D, ReferenceSolution

FORMAT_VERSION = 1


def encode_array(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    return {
        "shape": list(arr.shape),
        "data": base64.b64encode(arr.tobytes()).decode("ascii"),
    }


def decode_array(blob: dict) -> np.ndarray:
    raw = base64.b64decode(blob["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(blob["shape"]).copy()


def _write(path, kind: str, payload: dict):
    doc = {"format_version": FORMAT_VERSION, "kind": kind, "payload": payload}
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        with gzip.GzipFile(filename="", fileobj=fh, mode="wb", mtime=0) as gz:
            gz.write(blob)


def _read(path, kind: str) -> dict:
    with gzip.open(path, "rb") as gz:
        doc = json.loads(gz.read().decode())
    if doc.get("kind") != kind:
        raise ValueError(f"archive at {path} holds {doc.get('kind')!r}, "
                         f"expected {kind!r}")
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported archive version {doc.get('format_version')}")
    return doc["payload"]


# ---------------------------------------------------------------------------
# effective table
# ---------------------------------------------------------------------------

def table_payload(table: EffectiveTable) -> dict:
    return {
        "dim": table.dim,
        "mode": table.mode,
        "grid_n": table.grid.N,
        "p_axes": [encode_array(ax) for ax in table.p_axes],
        "hbar": encode_array(table.hbar),
        "bbar": encode_array(table.bbar),
        "w_values": encode_array(table.w_values),
        "v_values": encode_array(table.v_values),
    }


def table_from_payload(data: dict) -> EffectiveTable:
    dim = int(data["dim"])
    return EffectiveTable(
        dim=dim,
        p_axes=tuple(decode_array(b) for b in data["p_axes"]),
        hbar=decode_array(data["hbar"]),
        bbar=decode_array(data["bbar"]),
        w_values=decode_array(data["w_values"]),
        v_values=decode_array(data["v_values"]),
        grid=TorusGrid(dim, int(data["grid_n"])),
        mode=data["mode"],
    )


def save_table(path, table: EffectiveTable):
    _write(path, "effective-table", table_payload(table))


def load_table(path) -> EffectiveTable:
    return table_from_payload(_read(path, "effective-table"))


# ---------------------------------------------------------------------------
# corrector hierarchy
# ---------------------------------------------------------------------------

_LEVEL_FIELDS = ("wt", "dtwt", "dxwt", "dywt", "dyywt", "dxdywt", "dxxwt", "fbar")
_UBAR_FIELDS = ("ubar", "dubar", "dtubar", "dxxubar")


def save_hierarchy(path, hier: Hierarchy):
    payload = {
        "problem": hier.spec.to_dict(),
        "initial": hier.initial.to_dict(),
        "table": table_payload(hier.table),
        "m_max": hier.m_max,
        "mode": hier.mode,
        "tol": hier.tol,
        "zeta_min": hier.fan.zeta_min,
        "ygrid_n": hier.ygrid.N,
        "x_axes": [encode_array(ax) for ax in hier.slow.x_axes],
        "t_axis": encode_array(hier.slow.t_axis),
        "window": encode_array(hier.slow.window),
        "P": encode_array(hier.P),
        "gamma": encode_array(hier.gamma),
        "bbar_node": encode_array(hier.bbar_node),
        "diagnostics": {k: v for k, v in hier.diagnostics.items()
                        if isinstance(v, (int, float, str))},
    }
    for name in _LEVEL_FIELDS:
        store = getattr(hier, name)
        payload[name] = {str(k): encode_array(v) for k, v in store.items()}
    for name in _UBAR_FIELDS:
        store = getattr(hier, name)
        payload[name] = {str(k): encode_array(v) for k, v in store.items()}
    _write(path, "corrector-hierarchy", payload)


def load_hierarchy(path) -> Hierarchy:
    data = _read(path, "corrector-hierarchy")
    spec = problem_from_dict(data["problem"])
    initial = initial_from_dict(spec.dim, data["initial"])
    table = table_from_payload(data["table"])
    slow = SlowGrid(
        x_axes=tuple(decode_array(b) for b in data["x_axes"]),
        t_axis=decode_array(data["t_axis"]),
        window=decode_array(data["window"]),
    )
    ygrid = TorusGrid(spec.dim, int(data["ygrid_n"]))
    extent = [(float(ax[0]), float(ax[-1])) for ax in slow.x_axes]
    T = float(slow.t_axis[-1])
    fan = solve_effective(table, initial, extent, T, float(data["zeta_min"]))
    hier = Hierarchy(spec, initial, table, slow, ygrid, fan,
                     int(data["m_max"]), data["mode"], data["tol"])
    hier.P = decode_array(data["P"])
    hier.gamma = decode_array(data["gamma"])
    hier.bbar_node = decode_array(data["bbar_node"])
    for name in _LEVEL_FIELDS + _UBAR_FIELDS:
        store = getattr(hier, name)
        for k, blob in data[name].items():
            store[int(k)] = decode_array(blob)
    hier.diagnostics = dict(data.get("diagnostics", {}))
    return hier


# ---------------------------------------------------------------------------
# reference snapshots
# ---------------------------------------------------------------------------

def save_reference(path, ref: ReferenceSolution):
    payload = {
        "eps": ref.grid.eps,
        "n_per": ref.grid.n_per,
        "x": encode_array(ref.grid.x),
        "times": encode_array(ref.times),
        "values": encode_array(ref.values),
        "scheme": ref.scheme,
        "diagnostics": {k: (list(v) if isinstance(v, tuple) else v)
                        for k, v in ref.diagnostics.items()},
    }
    _write(path, "reference-solution", payload)


def load_reference(path) -> ReferenceSolution:
    data = _read(path, "reference-solution")
    grid = FineGrid1D(float(data["eps"]), int(data["n_per"]), decode_array(data["x"]))
    return ReferenceSolution(
        grid=grid,
        times=decode_array(data["times"]),
        values=decode_array(data["values"]),
        scheme=data["scheme"],
        diagnostics=dict(data["diagnostics"]),
    )
