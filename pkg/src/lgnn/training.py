"""Supervised training on accelerations predicted through the constrained EL solve."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import jax
import jax.numpy as jnp
import numpy as np
import optax

from lgnn import dynamics
from lgnn.systems import TrajectoryDataset
from lgnn.topology import Topology, free_dof_index

log = logging.getLogger(__name__)


class SpacingError(ValueError):
    pass


class TrainingAborted(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 10
    max_epochs: int = 10000
    early_stop_patience: int = 500
    min_delta: float = 1e-8
    split: float = 0.75
    seed: int = 0
    label_source: str = "solver"

    def __post_init__(self):
        if not 0 < self.split < 1:
            raise ValueError("split must lie strictly between 0 and 1")
        if self.batch_size < 1 or self.early_stop_patience < 1 or self.max_epochs < 0:
            raise ValueError("batch_size and patience must be >= 1, max_epochs >= 0")
        if self.label_source not in ("solver", "verlet"):
            raise ValueError("label_source must be 'solver' or 'verlet'")


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    skipped: list[int] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = math.inf
    stopped_early: bool = False
    wall_seconds: float = 0.0
    checkpoint: str | None = None
    n_train: int = 0
    n_val: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, json_path: str | Path, csv_path: str | Path | None = None) -> None:
        Path(json_path).write_text(json.dumps(self.to_dict(), indent=1))
        if csv_path is not None:
            with open(csv_path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["epoch", "train_loss", "val_loss"])
                for k, (a, b) in enumerate(zip(self.train_loss, self.val_loss)):
                    w.writerow([k + 1, repr(a), repr(b)])


# -- labels ----------------------------------------------------------------------

def verlet_labels(q_prev, q, q_next, dt: float, t=None) -> np.ndarray:
    """Central second difference ``(q(t+dt) + q(t-dt) - 2 q(t)) / dt^2``.

    ``t`` (three sample times) is optional and checked for uniform spacing.
    """
    if t is not None:
        t0, t1, t2 = (float(x) for x in t)
        for gap in (t1 - t0, t2 - t1):
            if abs(gap - dt) > 1e-12 * max(abs(dt), abs(t1)):
                raise SpacingError(f"sample spacing {gap!r} differs from dt={dt!r}")
    q_prev, q, q_next = (np.asarray(x, dtype=np.float64) for x in (q_prev, q, q_next))
    return (q_next + q_prev - 2.0 * q) / dt ** 2


def dataset_verlet_labels(dataset: TrajectoryDataset):
    """Verlet labels at interior samples of each trajectory.

    Returns ``(record_indices, labels)``.
    """
    idx, labels = [], []
    dt = dataset.sample_interval
    for k in np.unique(dataset.traj):
        rows = np.flatnonzero(dataset.traj == k)
        for a, b, c in zip(rows[:-2], rows[1:-1], rows[2:]):
            labels.append(verlet_labels(dataset.q[a], dataset.q[b], dataset.q[c], dt,
                                        dataset.t[[a, b, c]]))
            idx.append(b)
    return np.asarray(idx, dtype=np.int64), np.asarray(labels)


# -- loss ----------------------------------------------------------------------------

def _sample_sq_error_fn(model, topology: Topology, drag_coeff: float):
    def f(params, q, qdot, label):
        L = lambda qq, vv: model.apply(params, topology, qq, vv)  # noqa: E731
        pred = dynamics.full_acceleration(L, topology, q, qdot, drag_coeff)
        r = label - pred
        return jnp.sum(r * r)
    return f


def make_loss_fn(model, topology: Topology, drag_coeff: float | None = None):
    """Jitted ``(params, q, qdot, labels) -> (loss, per-sample squared errors)``.

    ``loss = sum_samples sum_nodes |qddot - qddot_hat|^2 / (B |U|)`` over the
    samples whose prediction is finite; ``B`` counts only those samples and
    ``|U|`` is the number of nodes.
    """
    c = topology.drag_coeff if drag_coeff is None else drag_coeff
    per = jax.vmap(_sample_sq_error_fn(model, topology, c), in_axes=(None, 0, 0, 0))
    n_nodes = topology.n_nodes

    @jax.jit
    def f(params, q, qdot, labels):
        vals = per(params, q, qdot, labels)
        ok = jnp.isfinite(vals)
        total = jnp.sum(jnp.where(ok, vals, 0.0))
        return total / (jnp.maximum(jnp.sum(ok), 1) * n_nodes), vals

    return f


def loss(model, params, topology: Topology, q, qdot, labels, drag_coeff: float | None = None):
    """Batch loss and the number of skipped (non-finite) samples."""
    value, vals = make_loss_fn(model, topology, drag_coeff)(
        params, jnp.atleast_2d(q), jnp.atleast_2d(qdot), jnp.atleast_2d(labels))
    n_bad = int(np.sum(~np.isfinite(np.asarray(vals))))
    if n_bad:
        log.warning("%d sample(s) skipped: acceleration solve produced non-finite values", n_bad)
    return float(value), n_bad


def make_train_step(model, topology: Topology, optimizer, drag_coeff: float | None = None):
    """``(params, opt_state, q, qdot, labels) -> (params, opt_state, loss, n_skipped)``.

    A forward pass screens the batch first. Samples whose acceleration is
    non-finite are replaced by a finite sample of the same batch with zero
    weight, so their (possibly NaN) sensitivities never reach the gradient.
    """
    c = topology.drag_coeff if drag_coeff is None else drag_coeff
    per = jax.vmap(_sample_sq_error_fn(model, topology, c), in_axes=(None, 0, 0, 0))
    n_nodes = topology.n_nodes

    def weighted(params, q, qdot, labels, w):
        vals = per(params, q, qdot, labels)
        return jnp.sum(w * vals) / (jnp.maximum(jnp.sum(w), 1.0) * n_nodes)

    grad_fn = jax.value_and_grad(weighted)

    def finite_tree(tree):
        return jnp.all(jnp.stack([jnp.all(jnp.isfinite(x)) for x in jax.tree_util.tree_leaves(tree)]))

    def step(params, opt_state, q, qdot, labels):
        ok = jnp.isfinite(per(params, q, qdot, labels))
        good = jnp.argmax(ok)
        sel = lambda x: jnp.where(ok[:, None], x, x[good])  # noqa: E731
        value, g = grad_fn(params, sel(q), sel(qdot), sel(labels), ok.astype(q.dtype))
        n_bad = jnp.sum(~ok)
        value = jnp.where(jnp.any(ok), value, jnp.nan)
        usable = jnp.isfinite(value) & finite_tree(g)
        g = jax.tree_util.tree_map(lambda x: jnp.where(usable, x, 0.0), g)
        updates, new_state = optimizer.update(g, opt_state, params)
        new_params = optax.apply_updates(params, updates)
        params = jax.tree_util.tree_map(lambda a, b: jnp.where(usable, a, b), new_params, params)
        opt_state = jax.tree_util.tree_map(lambda a, b: jnp.where(usable, a, b), new_state, opt_state)
        return params, opt_state, jnp.where(usable, value, jnp.nan), n_bad

    return step


# -- loop ----------------------------------------------------------------------------

def split_indices(n: int, split: float, seed: int):
    """Random partition into ``floor(split n)`` training and remaining validation indices."""
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(math.floor(split * n))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def _labels(dataset: TrajectoryDataset, source: str):
    if source == "solver":
        return np.arange(len(dataset)), dataset.qddot
    return dataset_verlet_labels(dataset)


_COMPILED: dict = {}


def _compiled(model, topology: Topology, lr: float, drag_coeff: float):
    """Adam optimizer, jitted epoch runner and loss, shared by runs with equal structure."""
    key = (model.family, model.config, json.dumps(topology.to_dict(), sort_keys=True),
           float(drag_coeff), float(lr))
    if key not in _COMPILED:
        optimizer = optax.adam(lr)
        step = make_train_step(model, topology, optimizer, drag_coeff)

        @jax.jit
        def run_epoch(params, opt_state, batch_idx, q_tr, v_tr, l_tr):
            def body(carry, ix):
                p, s = carry
                p, s, value, n_bad = step(p, s, q_tr[ix], v_tr[ix], l_tr[ix])
                return (p, s), (value, n_bad)
            (params, opt_state), (values, bad) = jax.lax.scan(body, (params, opt_state), batch_idx)
            return params, opt_state, values, jnp.sum(bad)

        _COMPILED[key] = (optimizer, run_epoch, make_loss_fn(model, topology, drag_coeff))
    return _COMPILED[key]


def train(model, dataset: TrajectoryDataset, config: TrainConfig = TrainConfig(),
          progress_every: int = 0):
    """Fit ``model`` to a dataset; returns ``(best_model, report)``.

    Each epoch draws ``ceil(N_train / batch)`` independent random batches.
    Training stops after ``early_stop_patience`` epochs without a validation
    improvement of at least ``min_delta``; the best-validation parameters are
    returned.
    """
    t_start = time.perf_counter()
    topo = dataset.topology
    rows, labels = _labels(dataset, config.label_source)
    if rows.shape[0] < 2:
        raise ValueError("training needs at least two samples")
    q_all, v_all = dataset.q[rows], dataset.qdot[rows]
    tr, va = split_indices(rows.shape[0], config.split, config.seed)
    report = TrainReport(n_train=int(tr.size), n_val=int(va.size))
    if config.max_epochs == 0:
        report.wall_seconds = time.perf_counter() - t_start
        return model, report

    optimizer, run_epoch, loss_fn = _compiled(model, topo, config.lr, dataset.system.drag_coeff)
    q_tr, v_tr, l_tr = (jnp.asarray(x[tr]) for x in (q_all, v_all, labels))
    q_va, v_va, l_va = (jnp.asarray(x[va]) for x in (q_all, v_all, labels))
    n_batches = math.ceil(tr.size / config.batch_size)
    bsz = min(config.batch_size, tr.size)

    params = model.params
    opt_state = optimizer.init(params)
    rng = np.random.default_rng(config.seed + 1)
    best_params = params
    since_best = 0
    for epoch in range(config.max_epochs):
        batch_idx = np.stack([rng.choice(tr.size, size=bsz, replace=False) for _ in range(n_batches)])
        params, opt_state, values, bad = run_epoch(params, opt_state, jnp.asarray(batch_idx),
                                                   q_tr, v_tr, l_tr)
        values = np.asarray(values)
        finite = np.isfinite(values)
        if not finite.any():
            raise TrainingAborted(f"epoch {epoch + 1}: every batch produced a non-finite loss "
                                  f"({int(bad)} samples skipped)")
        val, _ = loss_fn(params, q_va, v_va, l_va)
        val = float(val)
        report.train_loss.append(float(values[finite].mean()))
        report.val_loss.append(val)
        report.skipped.append(int(bad))
        if val < report.best_val_loss - config.min_delta:
            report.best_val_loss = val
            report.best_epoch = epoch + 1
            best_params = params
            since_best = 0
        else:
            since_best += 1
        if progress_every and (epoch + 1) % progress_every == 0:
            log.info("epoch %d train %.4e val %.4e best %.4e@%d", epoch + 1, report.train_loss[-1],
                     val, report.best_val_loss, report.best_epoch)
        if since_best >= config.early_stop_patience:
            report.stopped_early = True
            break
    report.wall_seconds = time.perf_counter() - t_start
    return model.with_params(best_params), report


def validation_rmse(model, dataset: TrajectoryDataset, config: TrainConfig = TrainConfig()):
    """Acceleration RMSE on the validation split and the label standard deviation."""
    rows, labels = _labels(dataset, config.label_source)
    _, va = split_indices(rows.shape[0], config.split, config.seed)
    topo = dataset.topology
    L = model.lagrangian_fn(topo)
    acc = jax.jit(jax.vmap(lambda q, v: dynamics.full_acceleration(L, topo, q, v, dataset.system.drag_coeff)))
    pred = np.asarray(acc(jnp.asarray(dataset.q[rows][va]), jnp.asarray(dataset.qdot[rows][va])))
    free = free_dof_index(topo).free
    pred, lab = pred[:, free], labels[va][:, free]
    rmse = float(np.sqrt(np.mean((pred - lab) ** 2)))
    return rmse, float(np.std(lab))
