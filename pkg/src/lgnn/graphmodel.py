"""Lagrangian graph network and the feed-forward constrained LNN baseline.

The graph network predicts ``L = T - V`` with two structurally identical
message-passing networks. Nodes carry positions (potential stream) or
velocities (kinetic stream); edges carry the one-hot link type with either
the relative position ``dq_ij`` or ``omega_ij = dq_ij x dqdot_ij``. Edge
embeddings after the last round are read out to per-link energies and summed.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any

import jax
import jax.numpy as jnp
import numpy as np

from lgnn.topology import Topology

Params = dict[str, jnp.ndarray]


class TypeVocabularyError(ValueError):
    pass


class SizeMismatchError(ValueError):
    pass


def squareplus(x, b: float = 4.0):
    """``(x + sqrt(x^2 + b)) / 2``; smooth with finite curvature everywhere."""
    return 0.5 * (x + jnp.sqrt(x * x + b))


@dataclass(frozen=True)
class ModelConfig:
    embedding_dim: int = 5
    mlp_hidden: int = 10
    mlp_layers: int = 1
    mp_rounds: int = 2
    type_vocab: int = 2
    squareplus_b: float = 4.0

    def __post_init__(self):
        for name in ("embedding_dim", "mlp_hidden", "mlp_layers", "mp_rounds", "type_vocab"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.squareplus_b <= 0:
            raise ValueError("squareplus_b must be positive")


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _init_dense(rng, prefix: str, n_in: int, n_out: int, bias: bool = True) -> dict:
    out = {f"{prefix}.w": _uniform(rng, n_in, (n_in, n_out))}
    if bias:
        out[f"{prefix}.b"] = _uniform(rng, n_in, (n_out,))
    return out


def _init_mlp(rng, prefix: str, sizes: list[int]) -> dict:
    out = {}
    for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        out.update(_init_dense(rng, f"{prefix}.{k}", a, b))
    return out


def _mlp(p: Params, prefix: str, n_layers: int, x, b: float):
    """Dense stack with square-plus between layers and a linear output."""
    for k in range(n_layers):
        x = x @ p[f"{prefix}.{k}.w"] + p[f"{prefix}.{k}.b"]
        if k < n_layers - 1:
            x = squareplus(x, b)
    return x


# -- graph network -------------------------------------------------------------

def init_graph_net(config: ModelConfig, rng: np.random.Generator) -> dict:
    E, H = config.embedding_dim, config.mlp_hidden
    inner = [E] + [H] * config.mlp_layers + [E]
    p = {}
    p.update(_init_dense(rng, "node_enc", 3, E))
    p.update(_init_dense(rng, "edge_enc", config.type_vocab + 3, E))
    for r in range(config.mp_rounds):
        p.update(_init_dense(rng, f"round{r}.W_E", 2 * E, E, bias=False))
        p.update(_init_mlp(rng, f"round{r}.edge_mlp", inner))
        p.update(_init_dense(rng, f"round{r}.W_U", E, E, bias=False))
        p.update(_init_mlp(rng, f"round{r}.node_mlp", inner))
    p.update(_init_mlp(rng, "readout", [E] + [H] * config.mlp_layers + [1]))
    return p


def graph_net_energy(p: Params, config: ModelConfig, senders, receivers, node_x, edge_x):
    """Sum of per-edge energies predicted by one message-passing network."""
    b = config.squareplus_b
    depth = config.mlp_layers + 1
    h = squareplus(node_x @ p["node_enc.w"] + p["node_enc.b"], b)
    he = squareplus(edge_x @ p["edge_enc.w"] + p["edge_enc.b"], b)
    n_nodes = node_x.shape[0]
    for r in range(config.mp_rounds):
        pair = jnp.concatenate([h[senders], h[receivers]], axis=1)
        he_new = squareplus(_mlp(p, f"round{r}.edge_mlp", depth, he + pair @ p[f"round{r}.W_E.w"], b), b)
        msg = he @ p[f"round{r}.W_U.w"]
        agg = jnp.zeros((n_nodes, msg.shape[1]), dtype=msg.dtype)
        agg = agg.at[senders].add(msg).at[receivers].add(msg)
        h = squareplus(_mlp(p, f"round{r}.node_mlp", depth, h + agg, b), b)
        he = he_new
    return jnp.sum(_mlp(p, "readout", depth, he, b))


def _pad3(x):
    if x.shape[-1] == 3:
        return x
    return jnp.concatenate([x, jnp.zeros(x.shape[:-1] + (3 - x.shape[-1],), dtype=x.dtype)], axis=-1)


def featurize(topology: Topology, q, qdot, type_vocab: int = 2):
    """Node and edge inputs of both streams.

    Returns ``(potential_nodes, potential_edges, kinetic_nodes, kinetic_edges)``.
    Planar inputs are embedded in 3-D with ``z = 0`` so that ``omega_ij`` is
    a 3-vector.
    """
    if topology.n_edges and int(topology.types.max()) >= type_vocab:
        raise TypeVocabularyError(
            f"edge type {int(topology.types.max())} outside vocabulary of size {type_vocab}")
    n, d = topology.n_nodes, topology.dim
    x = _pad3(jnp.asarray(q).reshape(n, d))
    v = _pad3(jnp.asarray(qdot).reshape(n, d))
    s, r = topology.senders, topology.receivers
    dq = x[s] - x[r]
    omega = jnp.cross(dq, v[s] - v[r])
    onehot = jnp.asarray(np.eye(type_vocab)[topology.types])
    return (x, jnp.concatenate([onehot, dq], axis=1),
            v, jnp.concatenate([onehot, omega], axis=1))


@dataclass
class LgnnModel:
    """Lagrangian graph network with separate potential and kinetic networks."""

    config: ModelConfig
    params: dict
    seed: int | None = None
    family = "lgnn"

    @classmethod
    def init(cls, config: ModelConfig | None = None, seed: int = 0) -> "LgnnModel":
        config = config or ModelConfig()
        rng = np.random.default_rng(seed)
        params = {"potential": init_graph_net(config, rng), "kinetic": init_graph_net(config, rng)}
        return cls(config, jax.tree_util.tree_map(jnp.asarray, params), seed)

    def with_params(self, params: dict) -> "LgnnModel":
        return LgnnModel(self.config, params, self.seed)

    def energies(self, params: dict, topology: Topology, q, qdot):
        xp, ep, xk, ek = featurize(topology, q, qdot, self.config.type_vocab)
        s, r = topology.senders, topology.receivers
        V = graph_net_energy(params["potential"], self.config, s, r, xp, ep)
        T = graph_net_energy(params["kinetic"], self.config, s, r, xk, ek)
        return T, V

    def apply(self, params: dict, topology: Topology, q, qdot):
        T, V = self.energies(params, topology, q, qdot)
        return T - V

    def lagrangian_fn(self, topology: Topology):
        featurize(topology, np.zeros(topology.n_coords), np.zeros(topology.n_coords),
                  self.config.type_vocab)
        params = self.params
        return lambda q, qdot: self.apply(params, topology, q, qdot)

    @property
    def n_params(self) -> int:
        return sum(int(np.size(x)) for x in jax.tree_util.tree_leaves(self.params))

    def to_dict(self) -> dict:
        return {"model": "lgnn", "config": asdict(self.config), "seed": self.seed,
                "potential_net": _arrays_to_json(self.params["potential"]),
                "kinetic_net": _arrays_to_json(self.params["kinetic"])}

    @classmethod
    def from_dict(cls, data: dict) -> "LgnnModel":
        params = {"potential": _arrays_from_json(data["potential_net"]),
                  "kinetic": _arrays_from_json(data["kinetic_net"])}
        return cls(ModelConfig(**data["config"]), params, data.get("seed"))


# -- feed-forward baseline -------------------------------------------------------

@dataclass(frozen=True)
class ClnnConfig:
    n_coords: int
    hidden: int = 128
    layers: int = 2
    squareplus_b: float = 4.0


@dataclass
class ClnnModel:
    """MLP over the concatenated ``(q, qdot)`` of one fixed-size system."""

    config: ClnnConfig
    params: dict
    seed: int | None = None
    family = "clnn"

    @classmethod
    def init(cls, config: ClnnConfig, seed: int = 0) -> "ClnnModel":
        rng = np.random.default_rng(seed)
        sizes = [2 * config.n_coords] + [config.hidden] * config.layers + [1]
        params = {"net": _init_mlp(rng, "mlp", sizes)}
        return cls(config, jax.tree_util.tree_map(jnp.asarray, params), seed)

    def with_params(self, params: dict) -> "ClnnModel":
        return ClnnModel(self.config, params, self.seed)

    def _check(self, topology: Topology):
        if topology.n_coords != self.config.n_coords:
            raise SizeMismatchError(
                f"CLNN built for {self.config.n_coords} coordinates cannot evaluate a system "
                f"with {topology.n_coords}; the feed-forward model is not inductive")

    def apply(self, params: dict, topology: Topology, q, qdot):
        self._check(topology)
        x = jnp.concatenate([jnp.asarray(q).reshape(-1), jnp.asarray(qdot).reshape(-1)])
        return _mlp(params["net"], "mlp", self.config.layers + 1, x, self.config.squareplus_b)[0]

    def lagrangian_fn(self, topology: Topology):
        self._check(topology)
        params = self.params
        return lambda q, qdot: self.apply(params, topology, q, qdot)

    def to_dict(self) -> dict:
        return {"model": "clnn", "config": asdict(self.config), "seed": self.seed,
                "net": _arrays_to_json(self.params["net"])}

    @classmethod
    def from_dict(cls, data: dict) -> "ClnnModel":
        return cls(ClnnConfig(**data["config"]), {"net": _arrays_from_json(data["net"])},
                   data.get("seed"))


def clnn_lagrangian(model: ClnnModel, topology: Topology, q, qdot):
    return model.apply(model.params, topology, q, qdot)


def lagrangian(model: LgnnModel, topology: Topology, q, qdot):
    return model.apply(model.params, topology, q, qdot)


# -- checkpoints -------------------------------------------------------------------

def _arrays_to_json(p: dict) -> dict:
    return {k: np.asarray(v).tolist() for k, v in sorted(p.items())}


def _arrays_from_json(p: dict) -> dict:
    return {k: jnp.asarray(np.asarray(v, dtype=np.float64)) for k, v in p.items()}


def model_from_dict(data: dict):
    kind = data.get("model", "lgnn")
    if kind == "lgnn":
        return LgnnModel.from_dict(data)
    if kind == "clnn":
        return ClnnModel.from_dict(data)
    raise ValueError(f"unknown model family {kind!r}")


def save_checkpoint(model, path: str | Path, extra: dict[str, Any] | None = None) -> None:
    data = model.to_dict()
    if extra:
        data.update(extra)
    Path(path).write_text(json.dumps(data))


def load_checkpoint(path: str | Path):
    return model_from_dict(json.loads(Path(path).read_text()))
