"""Ground-truth articulated systems, the velocity-Verlet integrator and datasets."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable

import jax
import jax.numpy as jnp
import numpy as np

from lgnn import dynamics
from lgnn.dynamics import LagrangianModel
from lgnn.topology import ROD, State, Topology, TopologyError, link_residuals

log = logging.getLogger(__name__)

HETERO_LENGTHS = (0.81331408, 1.15980562, 0.8647536, 1.17632355)
HETERO_MASSES = (1.83244264, 1.18182497, 1.30424224, 1.43194502)
HETERO_INERTIAS = (1.21233911, 1.18340451, 1.52475643, 1.29122914)
DRAG_COEFF = 0.01
GRAVITY = 9.81

CATALOG_LABELS = ("chain-4", "chain-8", "chain-16", "chain-100", "chain-4-hetero",
                  "chain-4-drag", "T1", "T2", "T3")


class UnsupportedTopologyError(TopologyError):
    pass


class DivergenceError(FloatingPointError):
    def __init__(self, last_valid_step: int):
        self.last_valid_step = last_valid_step
        super().__init__(f"trajectory became non-finite after step {last_valid_step}")


# -- analytic Lagrangian ----------------------------------------------------

def _rod_energies(topology: Topology, q, qdot):
    n, d = topology.n_nodes, topology.dim
    x = q.reshape(n, d)
    v = qdot.reshape(n, d)
    s, r = topology.senders, topology.receivers
    m = jnp.asarray(topology.masses)
    l = jnp.asarray(topology.lengths)
    inertia = jnp.asarray(topology.inertias)
    vi, vj = v[s], v[r]
    T_uniform = m / 6.0 * (jnp.sum(vi * vi, 1) + jnp.sum(vi * vj, 1) + jnp.sum(vj * vj, 1))
    dv = vj - vi
    T_extra = (inertia - m * l ** 2 / 12.0) * jnp.sum(dv * dv, 1) / (2.0 * l ** 2)
    V = m * topology.gravity * 0.5 * (x[s, 1] + x[r, 1])
    return jnp.sum(T_uniform + T_extra), jnp.sum(V)


class AnalyticLagrangian:
    """Exact rigid-rod Lagrangian in endpoint coordinates.

    Each link is a rod whose kinetic energy is
    ``m/6 (|v_i|^2 + v_i.v_j + |v_j|^2)`` plus a rotational correction when
    its inertia differs from the uniform-rod value ``m l^2 / 12``; the
    potential is gravity acting on the rod midpoint.
    """

    params = None

    def apply(self, params, topology: Topology, q, qdot):
        del params  # parameter-free
        T, V = _rod_energies(topology, q, qdot)
        return T - V

    def lagrangian_fn(self, topology: Topology):
        return lambda q, qdot: self.apply(None, topology, q, qdot)

    def energy_fn(self, topology: Topology):
        def H(q, qdot):
            T, V = _rod_energies(topology, q, qdot)
            return T + V
        return H

    def kinetic_fn(self, topology: Topology):
        return lambda q, qdot: _rod_energies(topology, q, qdot)[0]

    def potential_fn(self, topology: Topology):
        return lambda q: _rod_energies(topology, q, jnp.zeros_like(q))[1]


def analytic_lagrangian_cartesian(topology: Topology) -> AnalyticLagrangian:
    del topology  # the model binds to a topology on demand
    return AnalyticLagrangian()


def total_energy(topology: Topology, q, qdot) -> np.ndarray:
    """Analytic ``T + V``; accepts batches with a leading axis."""
    H = jax.jit(jax.vmap(AnalyticLagrangian().energy_fn(topology)))
    q = np.atleast_2d(q)
    qdot = np.atleast_2d(qdot)
    return np.asarray(H(q, qdot))


# -- generalized-coordinate oracle for serial chains -------------------------

def _require_chain(topology: Topology):
    if not topology.is_serial_chain() or topology.dim != 2:
        raise UnsupportedTopologyError("generalized coordinates are defined for planar serial chains only")


def analytic_lagrangian_generalized(topology: Topology, phi, phidot) -> float:
    """``T - V`` of a planar chain from link angles measured from the x axis.

    Segment centres of mass follow from the cumulative link vectors with the
    origin at the pivot; kinetic energy is translational plus ``I phidot^2 / 2``
    per link.
    """
    _require_chain(topology)
    phi = np.asarray(phi, dtype=np.float64)
    phidot = np.asarray(phidot, dtype=np.float64)
    l = topology.lengths
    m = topology.masses
    inertia = topology.inertias
    c, s = np.cos(phi), np.sin(phi)
    # links before i contribute in full, link i up to its midpoint
    before_y = np.concatenate([[0.0], np.cumsum(l * s)[:-1]])
    y_cm = before_y + 0.5 * l * s + topology.q_ref[0, 1]
    dx_before = np.concatenate([[0.0], np.cumsum(-l * s * phidot)[:-1]])
    dy_before = np.concatenate([[0.0], np.cumsum(l * c * phidot)[:-1]])
    xdot_cm = dx_before - 0.5 * l * s * phidot
    ydot_cm = dy_before + 0.5 * l * c * phidot
    T = 0.5 * np.sum(m * (xdot_cm ** 2 + ydot_cm ** 2) + inertia * phidot ** 2)
    V = np.sum(m * topology.gravity * y_cm)
    return float(T - V)


def chain_state_from_angles(topology: Topology, phi, phidot) -> State:
    """Node coordinates and velocities of a planar chain at link angles ``phi``."""
    _require_chain(topology)
    phi = np.asarray(phi, dtype=np.float64)
    phidot = np.asarray(phidot, dtype=np.float64)
    l = topology.lengths
    seg = np.stack([l * np.cos(phi), l * np.sin(phi)], axis=1)
    segdot = np.stack([-l * np.sin(phi) * phidot, l * np.cos(phi) * phidot], axis=1)
    x = topology.q_ref[0] + np.concatenate([[[0.0, 0.0]], np.cumsum(seg, axis=0)])
    v = np.concatenate([[[0.0, 0.0]], np.cumsum(segdot, axis=0)])
    return State(q=x.reshape(-1), qdot=v.reshape(-1))


def chain_angles_from_state(topology: Topology, state: State):
    _require_chain(topology)
    x = state.q.reshape(-1, 2)
    v = state.qdot.reshape(-1, 2)
    d = x[1:] - x[:-1]
    dv = v[1:] - v[:-1]
    phi = np.arctan2(d[:, 1], d[:, 0])
    phidot = (d[:, 0] * dv[:, 1] - d[:, 1] * dv[:, 0]) / np.sum(d * d, axis=1)
    return phi, phidot


drag_model = dynamics.drag_model


# -- catalog ------------------------------------------------------------------

@dataclass(frozen=True)
class SystemSpec:
    topology: Topology
    drag_coeff: float = 0.0
    ic_policy: str = "hanging-random"
    ic_params: dict = field(default_factory=lambda: {"max_angle": float(np.pi / 3)})
    label: str = ""

    def __post_init__(self):
        if self.drag_coeff < 0:
            raise ValueError("drag_coeff must be non-negative")
        if self.topology.drag_coeff != self.drag_coeff:
            object.__setattr__(self, "topology", self.topology.replace(drag_coeff=self.drag_coeff))

    def to_dict(self) -> dict:
        return {"label": self.label, "drag_coeff": self.drag_coeff, "ic_policy": self.ic_policy,
                "ic_params": self.ic_params, "topology": self.topology.to_dict()}

    @classmethod
    def from_dict(cls, data: dict) -> "SystemSpec":
        topo = Topology.from_dict(data["topology"])
        return cls(topology=topo, drag_coeff=float(data.get("drag_coeff", topo.drag_coeff)),
                   ic_policy=data.get("ic_policy", "fixed"), ic_params=data.get("ic_params", {}),
                   label=data.get("label", topo.label))


def chain_topology(n_links: int, lengths=None, masses=None, inertias=None, gravity: float = GRAVITY,
                   dim: int = 2, label: str = "") -> Topology:
    """Serial chain hanging straight down from a support at the origin."""
    l = np.ones(n_links) if lengths is None else np.asarray(lengths, dtype=np.float64)
    m = np.ones(n_links) if masses is None else np.asarray(masses, dtype=np.float64)
    inertia = m * l ** 2 / 12.0 if inertias is None else np.asarray(inertias, dtype=np.float64)
    q_ref = np.zeros((n_links + 1, dim))
    q_ref[1:, 1] = -np.cumsum(l)
    fixed = np.zeros(n_links + 1, dtype=bool)
    fixed[0] = True
    return Topology(q_ref=q_ref, senders=np.arange(n_links), receivers=np.arange(1, n_links + 1),
                    types=np.full(n_links, ROD), lengths=l, masses=m, inertias=inertia,
                    fixed=fixed, gravity=gravity, label=label or f"chain-{n_links}")


def load_topology_file(name: str) -> Topology:
    text = resources.files("lgnn.data").joinpath(f"{name}.json").read_text()
    return Topology.from_dict(json.loads(text))


def catalog(label: str) -> SystemSpec:
    """Named benchmark systems; ``chain-N`` is accepted for any ``N >= 1``."""
    if label == "chain-4-hetero":
        topo = chain_topology(4, HETERO_LENGTHS, HETERO_MASSES, HETERO_INERTIAS, label=label)
        return SystemSpec(topology=topo, label=label)
    if label == "chain-4-drag":
        return SystemSpec(topology=chain_topology(4, label=label), drag_coeff=DRAG_COEFF, label=label)
    if label.startswith("chain-") and label[6:].isdigit() and int(label[6:]) >= 1:
        return SystemSpec(topology=chain_topology(int(label[6:])), label=label)
    if label in ("T1", "T2", "T3"):
        topo = load_topology_file(label)
        return SystemSpec(topology=topo, drag_coeff=topo.drag_coeff, ic_policy="fixed",
                          ic_params={}, label=label)
    raise KeyError(f"unknown system label {label!r}; known: {', '.join(CATALOG_LABELS)}")


def resolve_system(label_or_path: str) -> SystemSpec:
    """Catalog label, or a topology JSON file (initial condition: its reference pose)."""
    path = Path(label_or_path)
    if path.suffix == ".json" and path.exists():
        data = json.loads(path.read_text())
        if "topology" in data:
            return SystemSpec.from_dict(data)
        topo = Topology.from_dict(data)
        return SystemSpec(topology=topo, drag_coeff=topo.drag_coeff, ic_policy="fixed",
                          ic_params={}, label=topo.label or path.stem)
    return catalog(label_or_path)


def initial_condition(spec: SystemSpec, rng: np.random.Generator) -> State:
    """Sample a constraint-feasible start according to the system's policy."""
    topo = spec.topology
    if spec.ic_policy == "fixed":
        return State.at_rest(topo)
    if spec.ic_policy == "hanging-random":
        if not topo.is_serial_chain():
            raise UnsupportedTopologyError("hanging-random starts need a serial chain")
        max_angle = spec.ic_params.get("max_angle", np.pi / 3)
        delta = rng.uniform(-max_angle, max_angle, size=topo.n_edges)
        phi = -np.pi / 2 + delta
        if topo.dim == 2:
            state = chain_state_from_angles(topo, phi, np.zeros_like(phi))
        else:
            seg = np.zeros((topo.n_edges, topo.dim))
            seg[:, 0] = np.cos(phi) * topo.lengths
            seg[:, 1] = np.sin(phi) * topo.lengths
            x = topo.q_ref[0] + np.concatenate([np.zeros((1, topo.dim)), np.cumsum(seg, 0)])
            state = State.at_rest(topo, x.reshape(-1))
        q, v = dynamics.project_state(topo, jnp.asarray(state.q), jnp.asarray(state.qdot))
        return State(q=np.asarray(q), qdot=np.asarray(v))
    raise ValueError(f"unknown initial-condition policy {spec.ic_policy!r}")


# -- integration -----------------------------------------------------------------

def make_integrator(model: LagrangianModel, topology: Topology, dt: float, record_every: int,
                    drag_coeff: float | None = None, project: bool = True,
                    exact_labels: bool = True) -> Callable:
    """Jitted velocity-Verlet integrator ``(q0, v0, n_records) -> (q, v, a)``.

    The records include the initial state; consecutive records are
    ``record_every`` steps apart. Velocity-dependent accelerations at the new
    position use the Euler-predicted velocity ``v + dt a``. With ``project``
    the state is pulled back onto the constraint manifold after each step.
    With ``exact_labels`` the recorded ``a`` is re-solved at the recorded
    ``(q, v)``; otherwise it is the integrator's own acceleration.
    """
    c = topology.drag_coeff if drag_coeff is None else drag_coeff
    L = model.lagrangian_fn(topology)

    def acc(q, v):
        return dynamics.full_acceleration(L, topology, q, v, c)

    def step(carry, _):
        q, v, a = carry
        v_half = v + 0.5 * dt * a
        q_new = q + dt * v_half
        v_pred = v + dt * a
        if project:
            q_new = dynamics.project_positions(topology, q_new)
            on_manifold = dynamics.velocity_projector(topology, q_new)
            v_pred = on_manifold(v_pred)
        a_new = acc(q_new, v_pred)
        v_new = v_half + 0.5 * dt * a_new
        if project:
            v_new = on_manifold(v_new)
        return (q_new, v_new, a_new), None

    def block(carry, _):
        carry, _ = jax.lax.scan(step, carry, None, length=record_every)
        q, v, a = carry
        return carry, (q, v, acc(q, v) if exact_labels else a)

    def run(q0, v0, n_records: int):
        a0 = acc(q0, v0)
        carry = (q0, v0, a0)
        if n_records <= 1:
            return q0[None], v0[None], a0[None]
        _, (qs, vs, as_) = jax.lax.scan(block, carry, None, length=n_records - 1)
        return (jnp.concatenate([q0[None], qs]), jnp.concatenate([v0[None], vs]),
                jnp.concatenate([a0[None], as_]))

    return jax.jit(run, static_argnums=2)


def first_nonfinite(*arrays: np.ndarray) -> int | None:
    """Index of the first record containing a non-finite entry."""
    bad = np.zeros(arrays[0].shape[0], dtype=bool)
    for arr in arrays:
        bad |= ~np.isfinite(arr.reshape(arr.shape[0], -1)).all(axis=1)
    hits = np.flatnonzero(bad)
    return int(hits[0]) if hits.size else None


@dataclass
class TrajectoryDataset:
    system: SystemSpec
    t: np.ndarray
    q: np.ndarray
    qdot: np.ndarray
    qddot: np.ndarray
    traj: np.ndarray
    sample_interval: float
    source_dt: float
    seed: int | None = None

    def __len__(self) -> int:
        return self.t.shape[0]

    @property
    def topology(self) -> Topology:
        return self.system.topology

    def trajectory(self, k: int) -> "TrajectoryDataset":
        sel = self.traj == k
        return TrajectoryDataset(self.system, self.t[sel], self.q[sel], self.qdot[sel],
                                 self.qddot[sel], self.traj[sel], self.sample_interval,
                                 self.source_dt, self.seed)

    def header(self) -> dict:
        return {"format": "lgnn-dataset/1", "system": self.system.to_dict(),
                "sample_interval": self.sample_interval, "source_dt": self.source_dt,
                "seed": self.seed, "n_records": len(self),
                "n_trajectories": int(np.unique(self.traj).size)}

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            fh.write(json.dumps({"header": self.header()}) + "\n")
            for k in range(len(self)):
                rec = {"traj": int(self.traj[k]), "t": float(self.t[k]), "q": self.q[k].tolist(),
                       "qdot": self.qdot[k].tolist(), "qddot": self.qddot[k].tolist()}
                fh.write(json.dumps(rec) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "TrajectoryDataset":
        with open(path) as fh:
            header = json.loads(fh.readline())["header"]
            recs = [json.loads(line) for line in fh if line.strip()]
        system = SystemSpec.from_dict(header["system"])
        n = system.topology.n_coords

        def col(key):
            return np.array([r[key] for r in recs], dtype=np.float64).reshape(len(recs), n)

        return cls(system=system,
                   t=np.array([r["t"] for r in recs], dtype=np.float64),
                   q=col("q"), qdot=col("qdot"), qddot=col("qddot"),
                   traj=np.array([r.get("traj", 0) for r in recs], dtype=np.int64),
                   sample_interval=header["sample_interval"], source_dt=header["source_dt"],
                   seed=header.get("seed"))


def simulate(spec: SystemSpec, model: LagrangianModel, q0, qdot0, dt: float, steps: int,
             record_every: int = 1, project: bool | None = None) -> TrajectoryDataset:
    """Integrate one trajectory and record every ``record_every`` steps.

    ``project`` defaults to on for horizons of at least 0.1 s.
    """
    topo = spec.topology
    if steps % record_every:
        raise ValueError("steps must be a multiple of record_every")
    resid = np.abs(link_residuals(topo, np.asarray(q0, dtype=np.float64)))
    if resid.size and resid.max() > 1e-10:
        raise ValueError(f"initial state violates link constraints by {resid.max():.2e}")
    if project is None:
        project = steps * dt >= 0.1
    run = make_integrator(model, topo, dt, record_every, spec.drag_coeff, project)
    n_records = steps // record_every + 1
    q, v, a = (np.asarray(x) for x in run(jnp.asarray(q0, dtype=jnp.float64),
                                           jnp.asarray(qdot0, dtype=jnp.float64), n_records))
    bad = first_nonfinite(q, v, a)
    if bad is not None:
        raise DivergenceError(max(bad - 1, 0) * record_every)
    t = np.arange(n_records) * (dt * record_every)
    return TrajectoryDataset(system=spec, t=t, q=q, qdot=v, qddot=a,
                             traj=np.zeros(n_records, dtype=np.int64),
                             sample_interval=dt * record_every, source_dt=dt)


def generate_dataset(spec: SystemSpec, n_trajectories: int = 100, points_total: int = 10000,
                     dt: float = 1e-5, sample_interval: float = 1e-3, seed: int = 0,
                     model: LagrangianModel | None = None, max_retries: int = 10
                     ) -> TrajectoryDataset:
    """Sample ``points_total`` labelled states from ``n_trajectories`` short runs.

    Every trajectory starts from the system's initial-condition policy and
    contributes ``points_total / n_trajectories`` records spaced
    ``sample_interval`` apart (the first ones take any remainder).
    Divergent runs are resampled.
    """
    if n_trajectories < 1 or points_total < n_trajectories:
        raise ValueError("need at least one point per trajectory")
    model = AnalyticLagrangian() if model is None else model
    topo = spec.topology
    record_every = int(round(sample_interval / dt))
    if record_every < 1 or abs(record_every * dt - sample_interval) > 1e-9 * sample_interval:
        raise ValueError("sample_interval must be a multiple of dt")
    base, extra = divmod(points_total, n_trajectories)
    counts = [base + (k < extra) for k in range(n_trajectories)]
    rng = np.random.default_rng(seed)
    horizon = (max(counts) - 1) * sample_interval
    run = make_integrator(model, topo, dt, record_every, spec.drag_coeff, project=horizon >= 0.1)

    starts = [initial_condition(spec, rng) for _ in range(n_trajectories)]
    out = {key: [] for key in ("t", "q", "qdot", "qddot", "traj")}
    batched = jax.jit(jax.vmap(lambda q0, v0: run(q0, v0, max(counts))))
    q0 = jnp.asarray(np.stack([s.q for s in starts]))
    v0 = jnp.asarray(np.stack([s.qdot for s in starts]))
    qs, vs, as_ = (np.asarray(x) for x in batched(q0, v0))
    for k in range(n_trajectories):
        q, v, a = qs[k], vs[k], as_[k]
        retries = 0
        while first_nonfinite(q, v, a) is not None:
            if retries == max_retries:
                raise DivergenceError(first_nonfinite(q, v, a) * record_every)
            retries += 1
            log.warning("trajectory %d diverged; resampling initial condition (retry %d)", k, retries)
            s = initial_condition(spec, rng)
            q, v, a = (np.asarray(x) for x in run(jnp.asarray(s.q), jnp.asarray(s.qdot), max(counts)))
        n = counts[k]
        out["t"].append(np.arange(n) * sample_interval)
        out["q"].append(q[:n])
        out["qdot"].append(v[:n])
        out["qddot"].append(a[:n])
        out["traj"].append(np.full(n, k, dtype=np.int64))
    return TrajectoryDataset(system=spec, t=np.concatenate(out["t"]), q=np.concatenate(out["q"]),
                             qdot=np.concatenate(out["qdot"]), qddot=np.concatenate(out["qddot"]),
                             traj=np.concatenate(out["traj"]), sample_interval=sample_interval,
                             source_dt=dt, seed=seed)
