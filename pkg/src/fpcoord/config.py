"""TOML scenario files.

Schema (``schema_version = 1``)::

    schema_version = 1

    [network]                       # explicit network; omit to use [benchmark]
    n_subsystems = 2
    horizon = 5
    controlled = [0]
    edges = [ {source = 0, target = 1, dim = 1},
              {source = 1, target = 0, dim = 2} ]

    [[subsystems]]                  # one table per subsystem, any order
    index = 0
    A = {shape = [2, 2], data = [0.5, 0.1, 0.0, 0.3]}   # row-major
    B = {shape = [2, 1], data = [1.0, 0.0]}
    E = ...; C_v = ...; C_y = ...   # D_v, K_x, K_r, K_v optional
    mpc_Q = 1.0                     # scalar, diagonal list or matrix table
    mpc_R = 0.1
    x0 = [0.0, 0.0]
    [subsystems.cost]
    Wy = 1.0
    Wdu = 0.3
    y_target = [0.0]

    [benchmark]                     # synthetic four-subsystem instance
    seed = 0
    horizon = 10
    target_rho = 0.9
    disturbance = 0.5
    require_stable_plant = true     # redraw until the interconnected plant is stable

    [experiment]
    kind = "beta-sweep"             # beta-sweep | memory-sweep | race | closed-loop
    ...                             # see fpcoord.bench for the keys per kind

Subsystem indices are zero-based.
"""
from __future__ import annotations

from pathlib import Path
from typing import Any

import numpy as np
import tomli
import tomli_w

from .network import EdgeSpec, NetworkTopology
from .subsystem import LinearSubsystem, LocalCost, check_compatible

__all__ = [
    "SCHEMA_VERSION",
    "ConfigError",
    "load_config",
    "parse_network",
    "topology_to_dict",
    "subsystem_to_dict",
    "network_to_dict",
    "dump_config",
    "encode_matrix",
    "decode_matrix",
]

SCHEMA_VERSION = 1

_MATRIX_KEYS = ("A", "B", "E", "C_v", "C_y", "D_v", "K_x", "K_r", "K_v")
_WEIGHT_KEYS = ("mpc_Q", "mpc_R")
_COST_KEYS = ("Wy", "Wu", "Wv", "Wr", "Wdu", "y_target", "r_target", "u_prev")


class ConfigError(ValueError):
    def __init__(self, path, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


def encode_matrix(a) -> dict:
    a = np.atleast_2d(np.asarray(a, dtype=float))
    return {"shape": list(a.shape), "data": [float(x) for x in a.ravel()]}


def decode_matrix(value, where: str = "matrix"):
    """Matrix table, plain list (vector/diagonal) or scalar."""
    if isinstance(value, dict):
        try:
            shape = [int(n) for n in value["shape"]]
            data = np.asarray(value["data"], dtype=float)
        except KeyError as exc:
            raise ValueError(f"{where}: matrix table needs 'shape' and 'data'") from exc
        if data.size != int(np.prod(shape)):
            raise ValueError(f"{where}: {data.size} values do not fill shape {shape}")
        return data.reshape(shape)
    if isinstance(value, (int, float)):
        return float(value)
    return np.asarray(value, dtype=float)


def _encode_weight(w):
    if w is None:
        return None
    w = np.asarray(w, dtype=float)
    if w.ndim == 0:
        return float(w)
    if w.ndim == 1:
        return [float(x) for x in w]
    return encode_matrix(w)


def load_config(path) -> dict:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            cfg = tomli.load(fh)
    except FileNotFoundError:
        raise ConfigError(path, "file not found") from None
    except tomli.TOMLDecodeError as exc:
        # tomli reports "(at line L, column C)"
        raise ConfigError(path, f"invalid TOML: {exc}") from None
    version = cfg.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(path, f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
    cfg["_path"] = str(path)
    return cfg


def parse_network(cfg: dict, path="<config>"):
    """Build ``(topology, subsystems, x0)`` from a config's [network] section."""
    net = cfg.get("network")
    if net is None:
        raise ConfigError(path, "missing [network] section")
    try:
        edges = [
            EdgeSpec(int(e["source"]), int(e["target"]), int(e.get("dim", 1)))
            for e in net.get("edges", [])
        ]
        topology = NetworkTopology(
            int(net["n_subsystems"]),
            edges,
            [int(c) for c in net.get("controlled", [])],
            int(net.get("horizon", 1)),
        )
    except KeyError as exc:
        raise ConfigError(path, f"[network]: missing key {exc}") from None
    except ValueError as exc:
        raise ConfigError(path, f"[network]: {exc}") from None

    tables = {}
    for i, t in enumerate(cfg.get("subsystems", [])):
        if "index" not in t:
            raise ConfigError(path, f"subsystems[{i}]: missing 'index'")
        tables[int(t["index"])] = t
    missing = sorted(set(range(topology.n_subsystems)) - set(tables))
    if missing:
        raise ConfigError(path, f"no [[subsystems]] entry for indices {missing}")

    subs, x0 = [], []
    for s in range(topology.n_subsystems):
        t = tables[s]
        where = f"subsystems[index={s}]"
        try:
            kw = {k: decode_matrix(t[k], f"{where}.{k}") for k in _MATRIX_KEYS if k in t}
            kw.update({k: decode_matrix(t[k], f"{where}.{k}") for k in _WEIGHT_KEYS if k in t})
            cost_t = t.get("cost", {})
            cost = LocalCost(
                **{k: decode_matrix(cost_t[k], f"{where}.cost.{k}") for k in _COST_KEYS if k in cost_t}
            )
            n = np.atleast_2d(kw["A"]).shape[0]
            kw.setdefault("B", np.zeros((n, 0)))
            kw.setdefault("E", np.zeros((n, sum(topology.in_dims(s)))))
            kw.setdefault("C_v", np.zeros((sum(topology.out_dims(s)), n)))
            kw.setdefault("C_y", np.zeros((0, n)))
            sub = LinearSubsystem(
                horizon=topology.horizon,
                in_dims=topology.in_dims(s),
                out_dims=topology.out_dims(s),
                cost=cost,
                x_op=np.asarray(t["x_op"], float) if "x_op" in t else None,
                u_op=np.asarray(t["u_op"], float) if "u_op" in t else None,
                **kw,
            )
        except KeyError as exc:
            raise ConfigError(path, f"{where}: missing key {exc}") from None
        except ValueError as exc:
            raise ConfigError(path, f"{where}: {exc}") from None
        subs.append(sub)
        x0.append(np.asarray(t.get("x0", np.zeros(sub.state_dim)), dtype=float))
    try:
        check_compatible(topology, subs)
    except ValueError as exc:
        raise ConfigError(path, str(exc)) from None
    return topology, subs, x0


def topology_to_dict(topology: NetworkTopology) -> dict:
    return {
        "n_subsystems": topology.n_subsystems,
        "horizon": topology.horizon,
        "controlled": sorted(topology.controlled),
        "edges": [
            {"source": e.source, "target": e.target, "dim": e.signal_dim} for e in topology.edges
        ],
    }


def subsystem_to_dict(index: int, sub: LinearSubsystem, x0=None) -> dict:
    d: dict[str, Any] = {"index": index}
    for k in _MATRIX_KEYS:
        v = getattr(sub, k)
        if v is not None and np.size(v):
            d[k] = encode_matrix(v)
    for k in _WEIGHT_KEYS:
        w = _encode_weight(getattr(sub, k))
        if w is not None:
            d[k] = w
    if np.any(sub.x_op):
        d["x_op"] = [float(x) for x in sub.x_op]
    if np.any(sub.u_op):
        d["u_op"] = [float(x) for x in sub.u_op]
    if x0 is not None:
        d["x0"] = [float(x) for x in np.asarray(x0).ravel()]
    cost = {}
    for k in _COST_KEYS:
        w = _encode_weight(getattr(sub.cost, k))
        if w is not None:
            cost[k] = w
    d["cost"] = cost
    return d


def network_to_dict(topology, subsystems, x0=None) -> dict:
    x0 = x0 or [None] * len(subsystems)
    return {
        "schema_version": SCHEMA_VERSION,
        "network": topology_to_dict(topology),
        "subsystems": [subsystem_to_dict(s, sub, x0[s]) for s, sub in enumerate(subsystems)],
    }


def dump_config(cfg: dict, path) -> None:
    cfg = {k: v for k, v in cfg.items() if not k.startswith("_")}
    with open(path, "wb") as fh:
        tomli_w.dump(cfg, fh)
