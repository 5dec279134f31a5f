"""Coupling topology and the routing permutation between profile stackings.

Indices are zero-based. Every edge ``s -> s'`` carries a profile of length
``horizon * signal_dim`` stored time-major: ``[v(k), v(k+1), ..., v(k+N-1)]``.

Two global stackings exist:

* outgoing: edges sorted by ``(source, target)``, i.e. the concatenation of
  every subsystem's outgoing profile in subsystem order;
* incoming: edges sorted by ``(target, source)``, i.e. the concatenation of
  every subsystem's incoming profile in subsystem order.

The routing matrix maps the first onto the second.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "EdgeSpec",
    "Layout",
    "NetworkTopology",
    "RoutingMatrix",
    "CouplingProfile",
    "TopologyError",
    "build_routing_matrix",
    "scatter_incoming",
    "gather_outgoing",
]


class TopologyError(ValueError):
    pass


class Layout(str, Enum):
    INCOMING = "incoming"
    OUTGOING = "outgoing"


@dataclass(frozen=True, order=True)
class EdgeSpec:
    source: int
    target: int
    signal_dim: int = 1

    def __post_init__(self):
        if self.source == self.target:
            raise TopologyError(f"self-loop on subsystem {self.source}")
        if self.signal_dim < 1:
            raise TopologyError(
                f"edge {self.source}->{self.target}: signal_dim must be >= 1"
            )

    @property
    def key(self) -> tuple[int, int]:
        return (self.source, self.target)


@dataclass(frozen=True)
class NetworkTopology:
    """Directed coupling graph over ``n_subsystems`` nodes.

    ``controlled`` is the set of subsystems that own a manipulated input; the
    rest form the uncontrolled set.
    """

    n_subsystems: int
    edges: tuple[EdgeSpec, ...]
    controlled: frozenset[int]
    horizon: int
    _in_slices: dict = field(init=False, repr=False, compare=False)
    _out_slices: dict = field(init=False, repr=False, compare=False)
    _sub_slices: dict = field(init=False, repr=False, compare=False)

    def __init__(
        self,
        n_subsystems: int,
        edges: Iterable[EdgeSpec | tuple],
        controlled: Iterable[int] = (),
        horizon: int = 1,
    ):
        edges = tuple(e if isinstance(e, EdgeSpec) else EdgeSpec(*e) for e in edges)
        object.__setattr__(self, "n_subsystems", int(n_subsystems))
        object.__setattr__(self, "edges", tuple(sorted(edges)))
        object.__setattr__(self, "controlled", frozenset(int(c) for c in controlled))
        object.__setattr__(self, "horizon", int(horizon))
        self._validate()
        object.__setattr__(self, "_in_slices", self._slices(self.incoming_order()))
        object.__setattr__(self, "_out_slices", self._slices(self.outgoing_order()))
        object.__setattr__(self, "_sub_slices", self._subsystem_slices())

    def _validate(self):
        if self.n_subsystems < 1:
            raise TopologyError("n_subsystems must be >= 1")
        if self.horizon < 1:
            raise TopologyError("horizon must be >= 1")
        seen = set()
        for e in self.edges:
            for idx in e.key:
                if not 0 <= idx < self.n_subsystems:
                    raise TopologyError(
                        f"edge {e.source}->{e.target} references subsystem "
                        f"{idx} outside 0..{self.n_subsystems - 1}"
                    )
            if e.key in seen:
                raise TopologyError(f"duplicate edge {e.source}->{e.target}")
            seen.add(e.key)
        bad = [c for c in self.controlled if not 0 <= c < self.n_subsystems]
        if bad:
            raise TopologyError(f"controlled indices out of range: {sorted(bad)}")

    @property
    def uncontrolled(self) -> frozenset[int]:
        return frozenset(range(self.n_subsystems)) - self.controlled

    def is_controlled(self, s: int) -> bool:
        return s in self.controlled

    def outgoing_order(self) -> list[EdgeSpec]:
        return sorted(self.edges, key=lambda e: (e.source, e.target))

    def incoming_order(self) -> list[EdgeSpec]:
        return sorted(self.edges, key=lambda e: (e.target, e.source))

    def in_edges(self, s: int) -> list[EdgeSpec]:
        return [e for e in self.incoming_order() if e.target == s]

    def out_edges(self, s: int) -> list[EdgeSpec]:
        return [e for e in self.outgoing_order() if e.source == s]

    def in_dims(self, s: int) -> tuple[int, ...]:
        return tuple(e.signal_dim for e in self.in_edges(s))

    def out_dims(self, s: int) -> tuple[int, ...]:
        return tuple(e.signal_dim for e in self.out_edges(s))

    def edge_length(self, e: EdgeSpec) -> int:
        return self.horizon * e.signal_dim

    @property
    def dim(self) -> int:
        """Total stacked profile length ``D``."""
        return sum(self.edge_length(e) for e in self.edges)

    def in_dim(self, s: int) -> int:
        return self.horizon * sum(self.in_dims(s))

    def out_dim(self, s: int) -> int:
        return self.horizon * sum(self.out_dims(s))

    def _slices(self, order: Sequence[EdgeSpec]) -> dict[tuple[int, int], slice]:
        out, start = {}, 0
        for e in order:
            n = self.edge_length(e)
            out[e.key] = slice(start, start + n)
            start += n
        return out

    def edge_slice(self, edge: tuple[int, int], layout: Layout) -> slice:
        table = self._in_slices if Layout(layout) is Layout.INCOMING else self._out_slices
        return table[edge]

    def _subsystem_slices(self) -> dict:
        table = {}
        for layout in Layout:
            start = 0
            for s in range(self.n_subsystems):
                n = self.in_dim(s) if layout is Layout.INCOMING else self.out_dim(s)
                table[layout, s] = slice(start, start + n)
                start += n
        return table

    def subsystem_slice(self, s: int, layout: Layout) -> slice:
        """Contiguous range holding subsystem ``s``'s profile in ``layout``."""
        return self._sub_slices[Layout(layout), s]

    def relabel(self, perm: Sequence[int]) -> "NetworkTopology":
        """Topology with subsystem ``s`` renamed to ``perm[s]``."""
        perm = list(perm)
        if sorted(perm) != list(range(self.n_subsystems)):
            raise TopologyError("relabel needs a permutation of subsystem indices")
        return NetworkTopology(
            self.n_subsystems,
            [EdgeSpec(perm[e.source], perm[e.target], e.signal_dim) for e in self.edges],
            [perm[c] for c in self.controlled],
            self.horizon,
        )


@dataclass(frozen=True)
class RoutingMatrix:
    """Permutation ``G_in`` with ``v_in = matrix @ v_out``.

    ``perm`` is the index form of the same map: ``v_in = v_out[perm]``.
    """

    matrix: np.ndarray
    perm: np.ndarray
    in_slices: dict
    out_slices: dict

    @property
    def dim(self) -> int:
        return self.perm.size

    def apply(self, v_out: np.ndarray) -> np.ndarray:
        return np.asarray(v_out)[self.perm]

    def apply_transpose(self, v_in: np.ndarray) -> np.ndarray:
        out = np.empty_like(np.asarray(v_in))
        out[self.perm] = v_in
        return out


def build_routing_matrix(topology: NetworkTopology) -> RoutingMatrix:
    D = topology.dim
    perm = np.empty(D, dtype=np.intp)
    for e in topology.edges:
        si = topology.edge_slice(e.key, Layout.INCOMING)
        so = topology.edge_slice(e.key, Layout.OUTGOING)
        perm[si] = np.arange(so.start, so.stop)
    matrix = np.zeros((D, D), dtype=np.int64)
    matrix[np.arange(D), perm] = 1
    return RoutingMatrix(
        matrix=matrix,
        perm=perm,
        in_slices=dict(topology._in_slices),
        out_slices=dict(topology._out_slices),
    )


@dataclass(frozen=True)
class CouplingProfile:
    data: np.ndarray
    layout: Layout

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float).reshape(-1)
        if not np.all(np.isfinite(data)):
            raise ValueError("coupling profile contains non-finite entries")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "layout", Layout(self.layout))

    def __len__(self):
        return self.data.size

    @classmethod
    def zeros(cls, topology: NetworkTopology, layout: Layout = Layout.INCOMING):
        return cls(np.zeros(topology.dim), layout)


def scatter_incoming(profile: CouplingProfile, topology: NetworkTopology) -> list[np.ndarray]:
    """Split a global incoming profile into per-subsystem ``v_s^in`` slices."""
    if profile.layout is not Layout.INCOMING:
        raise TopologyError(f"expected incoming layout, got {profile.layout.value}")
    if len(profile) != topology.dim:
        raise TopologyError(f"profile length {len(profile)} != D = {topology.dim}")
    return [
        profile.data[topology.subsystem_slice(s, Layout.INCOMING)].copy()
        for s in range(topology.n_subsystems)
    ]


def gather_outgoing(slices: Sequence[np.ndarray], topology: NetworkTopology) -> CouplingProfile:
    """Concatenate per-subsystem ``v_s^out`` in canonical outgoing order."""
    if len(slices) != topology.n_subsystems:
        raise TopologyError(
            f"expected {topology.n_subsystems} outgoing slices, got {len(slices)}"
        )
    parts = []
    for s, part in enumerate(slices):
        part = np.asarray(part, dtype=float).reshape(-1)
        if part.size != topology.out_dim(s):
            raise TopologyError(
                f"subsystem {s}: outgoing slice has length {part.size}, "
                f"expected {topology.out_dim(s)}"
            )
        parts.append(part)
    data = np.concatenate(parts) if parts else np.zeros(0)
    return CouplingProfile(data, Layout.OUTGOING)
