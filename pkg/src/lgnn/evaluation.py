"""Rollouts with learned models, trajectory/energy error metrics and mass-matrix probes."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import jax
import jax.numpy as jnp
import numpy as np

from lgnn import dynamics
from lgnn.systems import (AnalyticLagrangian, SystemSpec, first_nonfinite, initial_condition,
                          make_integrator, total_energy)
from lgnn.topology import State, Topology, free_dof_index

log = logging.getLogger(__name__)

ERROR_FLOOR = 1e-15
# positions beyond this magnitude count as a blown-up rollout
BLOWUP = 1e6


class VocabularyMismatchError(ValueError):
    pass


@dataclass
class Trajectory:
    t: np.ndarray
    q: np.ndarray
    qdot: np.ndarray
    qddot: np.ndarray
    diverged_step: int | None = None

    def __len__(self) -> int:
        return self.t.shape[0]


def _n_steps(horizon: float, dt: float) -> int:
    n = int(round(horizon / dt))
    if abs(n * dt - horizon) > 1e-9 * max(dt, horizon):
        raise ValueError("horizon must be a multiple of dt")
    return n


def _truncate(t, q, v, a) -> Trajectory:
    bad = first_nonfinite(q, v, a)
    big = np.flatnonzero(np.abs(np.nan_to_num(q, nan=0.0)).max(axis=1) > BLOWUP)
    if big.size:
        bad = int(big[0]) if bad is None else min(bad, int(big[0]))
    if bad is None:
        return Trajectory(t, q, v, a)
    return Trajectory(t[:bad], q[:bad], v[:bad], a[:bad], diverged_step=bad)


def batch_rollout(model, topology: Topology, q0: np.ndarray, qdot0: np.ndarray,
                  horizon: float = 1.0, dt: float = 1e-3, project: bool | None = None,
                  record_every: int = 1) -> list[Trajectory]:
    """Velocity-Verlet rollouts from a batch of starts ``(B, n_coords)``."""
    steps = _n_steps(horizon, dt)
    if steps % record_every:
        raise ValueError("steps must be a multiple of record_every")
    project = horizon >= 0.1 if project is None else project
    n_records = steps // record_every + 1
    q0 = np.atleast_2d(q0)
    qdot0 = np.atleast_2d(qdot0)
    t = np.arange(n_records) * (dt * record_every)
    run = make_integrator(model, topology, dt, record_every, project=project, exact_labels=False)
    if n_records == 1:
        out = [run(jnp.asarray(a), jnp.asarray(b), 1) for a, b in zip(q0, qdot0)]
        return [Trajectory(t, np.asarray(q), np.asarray(v), np.asarray(a)) for q, v, a in out]
    batched = jax.jit(jax.vmap(lambda a, b: run(a, b, n_records)))
    qs, vs, as_ = (np.asarray(x) for x in batched(jnp.asarray(q0), jnp.asarray(qdot0)))
    return [_truncate(t, qs[k], vs[k], as_[k]) for k in range(q0.shape[0])]


def rollout(model, topology: Topology, q0, qdot0, horizon: float = 1.0, dt: float = 1e-3,
            project: bool | None = None) -> Trajectory:
    """Integrate the model's dynamics; divergent runs are truncated and flagged."""
    return batch_rollout(model, topology, q0, qdot0, horizon, dt, project)[0]


def ground_truth(spec: SystemSpec, starts: Sequence[State], horizon: float, dt: float,
                 gt_dt: float = 1e-5) -> list[Trajectory]:
    """Analytic-model trajectories at ``gt_dt``, sampled at the rollout spacing ``dt``."""
    every = int(round(dt / gt_dt))
    if every < 1 or abs(every * gt_dt - dt) > 1e-9 * dt:
        raise ValueError("dt must be a multiple of gt_dt")
    q0 = np.stack([s.q for s in starts])
    v0 = np.stack([s.qdot for s in starts])
    return batch_rollout(AnalyticLagrangian(), spec.topology, q0, v0, horizon, gt_dt,
                         project=True, record_every=every)


# -- metrics ----------------------------------------------------------------------

def _normalized_gap(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    num = np.linalg.norm(a - b, axis=-1)
    den = np.linalg.norm(a, axis=-1) + np.linalg.norm(b, axis=-1)
    safe = np.where(den > 0, den, 1.0)
    return np.where(den > 0, num / safe, 0.0)


def rollout_error(q_pred, q_true) -> np.ndarray:
    """``|q_hat - q| / (|q_hat| + |q|)`` per step (last axis is the state); ``0/0 = 0``."""
    q_pred = np.asarray(q_pred, dtype=np.float64)
    q_true = np.asarray(q_true, dtype=np.float64)
    if q_pred.shape != q_true.shape:
        raise ValueError(f"length mismatch: {q_pred.shape} vs {q_true.shape}")
    return _normalized_gap(q_pred, q_true)


def energy_error(H_pred, H_true) -> np.ndarray:
    """Normalized energy violation per step; energies are scalars per step."""
    H_pred = np.asarray(H_pred, dtype=np.float64)[..., None]
    H_true = np.asarray(H_true, dtype=np.float64)[..., None]
    return _normalized_gap(H_pred, H_true)


def geometric_mean_error(re: np.ndarray, ee: np.ndarray) -> tuple[float, int]:
    """Time average of the per-step ``sqrt(RE * EE)``.

    Zeros are floored at ``1e-15``; the number of floored entries is returned
    alongside the value.
    """
    re = np.asarray(re, dtype=np.float64)
    ee = np.asarray(ee, dtype=np.float64)
    floored = int(np.sum(re < ERROR_FLOOR) + np.sum(ee < ERROR_FLOOR))
    g = np.sqrt(np.maximum(re, ERROR_FLOOR) * np.maximum(ee, ERROR_FLOOR))
    return float(np.mean(g)), floored


def geometric_mean(values: Iterable[float]) -> float:
    v = np.maximum(np.asarray(list(values), dtype=np.float64), ERROR_FLOOR)
    return float(np.exp(np.mean(np.log(v))))


@dataclass
class RolloutResult:
    system: str
    seed: int
    t: np.ndarray
    predicted: Trajectory
    truth: Trajectory
    rollout_error: np.ndarray
    energy_error: np.ndarray
    combined: float
    diverged_step: int | None = None
    floored: int = 0


def compare(spec: SystemSpec, pred: Trajectory, truth: Trajectory, seed: int = 0) -> RolloutResult:
    """Per-step metrics of a prediction against ground truth on shared timestamps.

    Steps lost to divergence score the maximal error 1 in both metrics.
    """
    n = len(truth)
    m = len(pred)
    re = np.ones(n)
    ee = np.ones(n)
    if m:
        re[:m] = rollout_error(pred.q, truth.q[:m])
        topo = spec.topology
        ee[:m] = energy_error(total_energy(topo, pred.q, pred.qdot),
                              total_energy(topo, truth.q[:m], truth.qdot[:m]))
    combined, floored = geometric_mean_error(re, ee)
    return RolloutResult(system=spec.label, seed=seed, t=truth.t, predicted=pred, truth=truth,
                         rollout_error=re, energy_error=ee, combined=combined,
                         diverged_step=pred.diverged_step, floored=floored)


# -- zero-shot harness -------------------------------------------------------------------------

@dataclass
class SystemSummary:
    system: str
    geomean_RE: float
    geomean_EE: float
    geomean_combined: float
    n_diverged: int
    n_runs: int
    results: list[RolloutResult] = field(default_factory=list, repr=False)


def summarize(system: str, results: list[RolloutResult]) -> SystemSummary:
    """Geometric means across runs of the time-averaged RE, EE and combined errors."""
    return SystemSummary(
        system=system,
        geomean_RE=geometric_mean(np.mean(r.rollout_error) for r in results),
        geomean_EE=geometric_mean(np.mean(r.energy_error) for r in results),
        geomean_combined=geometric_mean(r.combined for r in results),
        n_diverged=sum(r.diverged_step is not None for r in results),
        n_runs=len(results), results=results)


def starts_for(spec: SystemSpec, n_seeds: int, seed: int = 0) -> list[tuple[int, State]]:
    """Seeded starts; fixed-policy systems get their single reference pose."""
    if spec.ic_policy == "fixed":
        return [(0, initial_condition(spec, np.random.default_rng(seed)))]
    return [(seed + k, initial_condition(spec, np.random.default_rng(seed + k))) for k in range(n_seeds)]


def evaluate_system(model, spec: SystemSpec, n_seeds: int = 100, horizon: float = 1.0,
                    dt: float = 1e-3, gt_dt: float = 1e-5, seed: int = 0,
                    truths: list[Trajectory] | None = None) -> SystemSummary:
    starts = starts_for(spec, n_seeds, seed)
    if truths is None:
        truths = ground_truth(spec, [s for _, s in starts], horizon, dt, gt_dt)
    preds = batch_rollout(model, spec.topology, np.stack([s.q for _, s in starts]),
                          np.stack([s.qdot for _, s in starts]), horizon, dt)
    results = [compare(spec, p, g, sd) for (sd, _), p, g in zip(starts, preds, truths)]
    return summarize(spec.label, results)


def check_vocabulary(model, topology: Topology) -> None:
    vocab = getattr(getattr(model, "config", None), "type_vocab", None)
    if vocab is not None and topology.n_edges and int(topology.types.max()) >= vocab:
        raise VocabularyMismatchError(
            f"system uses edge type {int(topology.types.max())} but the model knows {vocab} types")


def zero_shot_eval(model, specs: Sequence[SystemSpec], n_seeds: int = 100, horizon: float = 1.0,
                   dt: float = 1e-3, gt_dt: float = 1e-5, seed: int = 0) -> list[SystemSummary]:
    """Evaluate one trained model on each target system."""
    for spec in specs:
        check_vocabulary(model, spec.topology)
    out = []
    for spec in specs:
        log.info("evaluating on %s", spec.label)
        out.append(evaluate_system(model, spec, n_seeds, horizon, dt, gt_dt, seed))
    return out


METRIC_COLUMNS = ("system", "seed", "t", "rollout_error", "energy_error")
SUMMARY_COLUMNS = ("system", "geomean_RE", "geomean_EE", "geomean_combined", "n_diverged")


def write_metrics_csv(summaries: Sequence[SystemSummary], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for s in summaries:
            for r in s.results:
                for t, re, ee in zip(r.t, r.rollout_error, r.energy_error):
                    w.writerow([s.system, r.seed, repr(float(t)), repr(float(re)), repr(float(ee))])


def write_summary_csv(summaries: Sequence[SystemSummary], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_COLUMNS)
        for s in summaries:
            w.writerow([s.system, repr(s.geomean_RE), repr(s.geomean_EE),
                        repr(s.geomean_combined), s.n_diverged])


def summaries_from_metrics_csv(path: str | Path) -> dict[str, dict[str, float]]:
    """Recompute the summary table from a per-step metrics file."""
    runs: dict[tuple[str, int], tuple[list, list]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (row["system"], int(row["seed"]))
            re, ee = runs.setdefault(key, ([], []))
            re.append(float(row["rollout_error"]))
            ee.append(float(row["energy_error"]))
    per_system: dict[str, list] = {}
    for (system, _), (re, ee) in runs.items():
        per_system.setdefault(system, []).append((np.array(re), np.array(ee)))
    return {system: {"geomean_RE": geometric_mean(np.mean(r) for r, _ in v),
                     "geomean_EE": geometric_mean(np.mean(e) for _, e in v),
                     "geomean_combined": geometric_mean(geometric_mean_error(r, e)[0] for r, e in v)}
            for system, v in per_system.items()}


# -- mass matrix -----------------------------------------------------------------------------

@dataclass
class MassMatrixReport:
    M: np.ndarray
    symmetry_residual: float
    band_max: dict[int, float]
    mask: np.ndarray
    threshold: float
    coord_nodes: np.ndarray

    def max_beyond(self, hops: int) -> float:
        vals = [v for d, v in self.band_max.items() if d > hops]
        return max(vals) if vals else 0.0


def mass_matrix_probe(model, topology: Topology, state: State | None = None,
                      mask_fraction: float = 0.01) -> MassMatrixReport:
    """Extract ``M = d^2 L / d qdot^2`` on free coordinates and describe its band structure.

    ``band_max[d]`` is the largest ``|M_ab|`` over coordinate pairs whose nodes
    are ``d`` hops apart (``-1`` collects pairs in different components).
    """
    state = State.at_rest(topology) if state is None else state
    terms = dynamics.state_terms(model, topology, state, 0.0)
    M = np.asarray(terms.M)
    idx = free_dof_index(topology)
    nodes = idx.free // topology.dim
    hops = topology.graph_distances()[np.ix_(nodes, nodes)]
    hops = np.where(np.isinf(hops), -1, hops).astype(int)
    band = {int(d): float(np.abs(M[hops == d]).max()) for d in np.unique(hops)}
    threshold = mask_fraction * float(np.abs(np.diag(M)).max()) if M.size else 0.0
    return MassMatrixReport(M=M, symmetry_residual=float(np.abs(M - M.T).max()) if M.size else 0.0,
                            band_max=band, mask=np.abs(M) > threshold, threshold=threshold,
                            coord_nodes=nodes)
