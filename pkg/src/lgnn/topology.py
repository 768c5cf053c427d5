"""Graph description of an articulated rigid body and its dynamic state.

Joints are graph nodes and rigid links are graph edges. Coordinates are
stored node-major: ``q[dim * node + axis]``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

ROD = 0
ROPE = 1


class TopologyError(ValueError):
    """Raised for malformed topologies."""


@dataclass(frozen=True)
class Topology:
    """Nodes, rigid links and supports of an articulated body.

    Attributes:
      q_ref: reference node positions, shape ``(n_nodes, dim)``. Fixed nodes
        stay at these coordinates; free nodes use them as the default start.
      senders, receivers: edge endpoints ``(i, j)``.
      types: integer edge type used by the graph model's one-hot features.
      lengths, masses, inertias: per-edge rigid-link properties.
      fixed: boolean mask of support nodes.
    """

    q_ref: np.ndarray
    senders: np.ndarray
    receivers: np.ndarray
    types: np.ndarray
    lengths: np.ndarray
    masses: np.ndarray
    inertias: np.ndarray
    fixed: np.ndarray
    gravity: float = 9.81
    drag_coeff: float = 0.0
    label: str = ""

    def __post_init__(self):
        arrays = dict(
            q_ref=np.asarray(self.q_ref, dtype=np.float64),
            senders=np.asarray(self.senders, dtype=np.int64).reshape(-1),
            receivers=np.asarray(self.receivers, dtype=np.int64).reshape(-1),
            types=np.asarray(self.types, dtype=np.int64).reshape(-1),
            lengths=np.asarray(self.lengths, dtype=np.float64).reshape(-1),
            masses=np.asarray(self.masses, dtype=np.float64).reshape(-1),
            inertias=np.asarray(self.inertias, dtype=np.float64).reshape(-1),
            fixed=np.asarray(self.fixed, dtype=bool).reshape(-1),
        )
        for name, value in arrays.items():
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        self._validate()

    def _validate(self):
        if self.q_ref.ndim != 2 or self.q_ref.shape[1] not in (2, 3):
            raise TopologyError(f"q_ref must have shape (n_nodes, 2|3), got {self.q_ref.shape}")
        n, e = self.n_nodes, self.n_edges
        for name in ("receivers", "types", "lengths", "masses", "inertias"):
            if getattr(self, name).shape[0] != e:
                raise TopologyError(f"{name} has {getattr(self, name).shape[0]} entries, expected {e}")
        if self.fixed.shape[0] != n:
            raise TopologyError(f"fixed mask has {self.fixed.shape[0]} entries, expected {n}")
        if e and (self.senders.min() < 0 or self.receivers.min() < 0
                  or self.senders.max() >= n or self.receivers.max() >= n):
            raise TopologyError("edge endpoint references a missing node")
        if np.any(self.senders == self.receivers):
            raise TopologyError("edge endpoints must be distinct")
        for name in ("lengths", "masses", "inertias"):
            if np.any(getattr(self, name) <= 0):
                raise TopologyError(f"{name} must be strictly positive")
        if self.drag_coeff < 0:
            raise TopologyError("drag_coeff must be non-negative")

    @property
    def n_nodes(self) -> int:
        return self.q_ref.shape[0]

    @property
    def n_edges(self) -> int:
        return self.senders.shape[0]

    @property
    def dim(self) -> int:
        return self.q_ref.shape[1]

    @property
    def n_coords(self) -> int:
        return self.n_nodes * self.dim

    def edges(self) -> list[tuple[int, int]]:
        return list(zip(self.senders.tolist(), self.receivers.tolist()))

    def neighbors(self) -> list[list[int]]:
        adj: list[list[int]] = [[] for _ in range(self.n_nodes)]
        for i, j in self.edges():
            adj[i].append(j)
            adj[j].append(i)
        return adj

    def components(self) -> list[list[int]]:
        """Connected components as sorted node lists."""
        adj = self.neighbors()
        seen = np.zeros(self.n_nodes, dtype=bool)
        comps = []
        for start in range(self.n_nodes):
            if seen[start]:
                continue
            stack, comp = [start], []
            seen[start] = True
            while stack:
                u = stack.pop()
                comp.append(u)
                for v in adj[u]:
                    if not seen[v]:
                        seen[v] = True
                        stack.append(v)
            comps.append(sorted(comp))
        return comps

    def graph_distances(self) -> np.ndarray:
        """All-pairs hop distances (``inf`` across components)."""
        adj = self.neighbors()
        n = self.n_nodes
        dist = np.full((n, n), np.inf)
        for s in range(n):
            dist[s, s] = 0
            frontier = [s]
            d = 0
            while frontier:
                d += 1
                nxt = []
                for u in frontier:
                    for v in adj[u]:
                        if dist[s, v] == np.inf:
                            dist[s, v] = d
                            nxt.append(v)
                frontier = nxt
        return dist

    def is_serial_chain(self) -> bool:
        """Edges ``(k, k+1)`` for ``k = 0..n-2`` with node 0 alone fixed."""
        n = self.n_nodes
        return (self.n_edges == n - 1
                and np.array_equal(self.senders, np.arange(n - 1))
                and np.array_equal(self.receivers, np.arange(1, n))
                and bool(self.fixed[0]) and not self.fixed[1:].any())

    def permuted(self, perm: Sequence[int]) -> "Topology":
        """Relabel nodes so that old node ``k`` becomes node ``perm[k]``."""
        perm = np.asarray(perm)
        inv = np.argsort(perm)
        return Topology(
            q_ref=self.q_ref[inv], senders=perm[self.senders], receivers=perm[self.receivers],
            types=self.types, lengths=self.lengths, masses=self.masses, inertias=self.inertias,
            fixed=self.fixed[inv], gravity=self.gravity, drag_coeff=self.drag_coeff, label=self.label)

    def union(self, other: "Topology") -> "Topology":
        """Disjoint union; ``other``'s nodes are appended after ``self``'s."""
        if other.dim != self.dim:
            raise TopologyError("cannot join topologies of different dimension")
        off = self.n_nodes
        return Topology(
            q_ref=np.concatenate([self.q_ref, other.q_ref]),
            senders=np.concatenate([self.senders, other.senders + off]),
            receivers=np.concatenate([self.receivers, other.receivers + off]),
            types=np.concatenate([self.types, other.types]),
            lengths=np.concatenate([self.lengths, other.lengths]),
            masses=np.concatenate([self.masses, other.masses]),
            inertias=np.concatenate([self.inertias, other.inertias]),
            fixed=np.concatenate([self.fixed, other.fixed]),
            gravity=self.gravity, drag_coeff=self.drag_coeff, label=f"{self.label}+{other.label}")

    def replace(self, **changes: Any) -> "Topology":
        fields = {name: getattr(self, name) for name in self.__dataclass_fields__}
        fields.update(changes)
        return Topology(**fields)

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "dim": self.dim,
            "gravity": self.gravity,
            "drag_coeff": self.drag_coeff,
            "nodes": [{"id": k, "q0": self.q_ref[k].tolist(), "fixed": bool(self.fixed[k])}
                      for k in range(self.n_nodes)],
            "edges": [{"i": int(i), "j": int(j), "type": int(t), "length": float(l),
                       "mass": float(m), "inertia": float(I)}
                      for i, j, t, l, m, I in zip(self.senders, self.receivers, self.types,
                                                  self.lengths, self.masses, self.inertias)],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Topology":
        nodes = sorted(data["nodes"], key=lambda nd: nd["id"])
        ids = [nd["id"] for nd in nodes]
        if ids != list(range(len(nodes))):
            raise TopologyError("node ids must be 0..n-1")
        dim = int(data.get("dim", len(nodes[0]["q0"])))
        q_ref = np.array([nd["q0"] for nd in nodes], dtype=np.float64).reshape(len(nodes), dim)
        edges = data["edges"]
        return cls(
            q_ref=q_ref,
            senders=[e["i"] for e in edges],
            receivers=[e["j"] for e in edges],
            types=[e.get("type", ROD) for e in edges],
            lengths=[e["length"] for e in edges],
            masses=[e.get("mass", 1.0) for e in edges],
            inertias=[e["inertia"] if "inertia" in e else e.get("mass", 1.0) * e["length"] ** 2 / 12
                      for e in edges],
            fixed=[nd.get("fixed", False) for nd in nodes],
            gravity=float(data.get("gravity", 9.81)),
            drag_coeff=float(data.get("drag_coeff", 0.0)),
            label=data.get("label", ""),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "Topology":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class State:
    """Full Cartesian state over all nodes, flattened node-major."""

    q: np.ndarray
    qdot: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "q", np.asarray(self.q, dtype=np.float64).reshape(-1))
        object.__setattr__(self, "qdot", np.asarray(self.qdot, dtype=np.float64).reshape(-1))
        if self.q.shape != self.qdot.shape:
            raise ValueError("q and qdot must have the same length")

    @classmethod
    def at_rest(cls, topology: Topology, q: np.ndarray | None = None) -> "State":
        q = topology.q_ref.reshape(-1) if q is None else q
        return cls(q=q, qdot=np.zeros(topology.n_coords))


@dataclass(frozen=True)
class FreeIndex:
    """Bijection between free node coordinates and ``0..D-1``."""

    free: np.ndarray = field(repr=False)
    fixed: np.ndarray = field(repr=False)
    n_coords: int = 0

    @property
    def size(self) -> int:
        return self.free.shape[0]


def free_dof_index(topology: Topology) -> FreeIndex:
    """Coordinates of non-fixed nodes, in node-major order."""
    mask = np.repeat(~topology.fixed, topology.dim)
    coords = np.arange(topology.n_coords)
    return FreeIndex(free=coords[mask], fixed=coords[~mask], n_coords=topology.n_coords)


def link_residuals(topology: Topology, q: np.ndarray) -> np.ndarray:
    """``|q_i - q_j| - l_ij`` for every edge."""
    x = np.asarray(q).reshape(topology.n_nodes, topology.dim)
    d = x[topology.senders] - x[topology.receivers]
    return np.linalg.norm(d, axis=1) - topology.lengths
