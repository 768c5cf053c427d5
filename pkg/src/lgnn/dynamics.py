"""Constrained Euler-Lagrange accelerations on free Cartesian coordinates.

Given a Lagrangian ``L(q, qdot)`` over all node coordinates, the mass matrix
``M``, the Coriolis-like block ``C`` and the conservative force ``Pi`` are
taken from ``L`` by automatic differentiation. Rigid links enter as Pfaffian
rows ``A(q) qdot = 0``; supports are eliminated from the solve instead of
being added as rows. The accelerations solve

    M qddot = Pi - C qdot + Upsilon + F - A^T lambda,
    A qddot + Adot qdot = 0.

Everything here is traceable by JAX; eager calls additionally raise on
degenerate links and rank-deficient constraint sets.
"""
from __future__ import annotations

from typing import Callable, NamedTuple, Protocol

import jax
import jax.numpy as jnp
import jax.scipy.linalg as jsl
import numpy as np

from lgnn.autodiff import hessian_block_fn
from lgnn.topology import State, Topology, free_dof_index

LagrangianFn = Callable[[jnp.ndarray, jnp.ndarray], jnp.ndarray]

# below this link length the constraint row carries no direction
DEGENERATE_LINK = 1e-9
# condition number beyond which A M^-1 A^T counts as rank deficient
RANK_COND_LIMIT = 1e12


class DegenerateConstraintError(ValueError):
    pass


class RankDeficiencyError(np.linalg.LinAlgError):
    def __init__(self, cond: float):
        self.cond = cond
        super().__init__(f"constraint system A M^-1 A^T is rank deficient (condition estimate {cond:.3e})")


class LagrangianModel(Protocol):
    def lagrangian_fn(self, topology: Topology) -> LagrangianFn:
        """Return ``L(q, qdot)`` over flattened full node coordinates."""


class DynamicsTerms(NamedTuple):
    M: jnp.ndarray
    C: jnp.ndarray
    Pi: jnp.ndarray
    Upsilon: jnp.ndarray
    F: jnp.ndarray
    A: jnp.ndarray
    Adot_qdot: jnp.ndarray
    qdot: jnp.ndarray

    @property
    def rhs(self) -> jnp.ndarray:
        """Unconstrained generalized force ``Pi - C qdot + Upsilon + F``."""
        return self.Pi - self.C @ self.qdot + self.Upsilon + self.F


def _concrete(*xs) -> bool:
    return not any(isinstance(x, jax.core.Tracer) for x in xs)


def spd_solve(A: jnp.ndarray, B: jnp.ndarray) -> jnp.ndarray:
    """Solve ``A X = B`` by Cholesky, falling back to jittered LU.

    Branch selection uses masked operands so that neither branch produces
    non-finite values, which keeps reverse-mode gradients finite.
    """
    n = A.shape[0]
    if n == 0:
        return jnp.zeros_like(B)
    eye = jnp.eye(n, dtype=A.dtype)
    ok = jnp.all(jnp.isfinite(jnp.linalg.cholesky(jax.lax.stop_gradient(A))))
    chol = jnp.linalg.cholesky(jnp.where(ok, A, eye))
    x_chol = jsl.cho_solve((chol, True), B)
    jitter = 1e-10 * jnp.abs(jnp.trace(A)) / n
    x_lu = jnp.linalg.solve(jnp.where(ok, eye, A + jitter * eye), B)
    return jnp.where(ok, x_chol, x_lu)


def constraint_edges(topology: Topology) -> np.ndarray:
    """Edges that constrain at least one free node."""
    f = topology.fixed
    return np.flatnonzero(~(f[topology.senders] & f[topology.receivers]))


def _constraint_full(topology: Topology, q: jnp.ndarray, qdot: jnp.ndarray):
    rows = constraint_edges(topology)
    n, d = topology.n_nodes, topology.dim
    i, j = topology.senders[rows], topology.receivers[rows]
    x = q.reshape(n, d)
    v = qdot.reshape(n, d)
    fixed = jnp.asarray(topology.fixed[:, None])
    v = jnp.where(fixed, 0.0, v)
    dq = x[i] - x[j]
    dv = v[i] - v[j]
    k = rows.shape[0]
    A = jnp.zeros((k, n, d), dtype=q.dtype)
    A = A.at[jnp.arange(k), i].add(dq).at[jnp.arange(k), j].add(-dq)
    return A.reshape(k, n * d), jnp.sum(dv * dv, axis=1), dq


def constraint_matrix(topology: Topology, q: jnp.ndarray, qdot: jnp.ndarray):
    """Pfaffian rows of the rigid-link constraints on free coordinates.

    Row ``e`` holds ``q_i - q_j`` at node ``i``'s slots and ``-(q_i - q_j)``
    at node ``j``'s; ``Adot_qdot[e] = |qdot_i - qdot_j|^2``. Rows are not
    normalized.
    """
    q = jnp.asarray(q, dtype=jnp.float64)
    qdot = jnp.asarray(qdot, dtype=jnp.float64)
    A, adq, dq = _constraint_full(topology, q, qdot)
    if _concrete(q) and dq.shape[0]:
        norms = np.linalg.norm(np.asarray(dq), axis=1)
        if np.any(norms < DEGENERATE_LINK):
            e = int(constraint_edges(topology)[np.argmin(norms)])
            raise DegenerateConstraintError(f"edge {e} has coincident endpoints")
    idx = free_dof_index(topology)
    return A[:, idx.free], adq


def drag_model(topology: Topology, qdot: jnp.ndarray, drag_coeff: float) -> jnp.ndarray:
    """Nodal drag ``Upsilon``: each link feels ``-c (qdot_i + qdot_j)/2``, split evenly."""
    n, d = topology.n_nodes, topology.dim
    v = jnp.asarray(qdot, dtype=jnp.float64).reshape(n, d)
    i, j = topology.senders, topology.receivers
    half = -0.25 * drag_coeff * (v[i] + v[j])
    out = jnp.zeros((n, d), dtype=v.dtype).at[i].add(half).at[j].add(half)
    return out.reshape(-1)


def restrict(topology: Topology, L: LagrangianFn) -> LagrangianFn:
    """Lift ``L`` over full coordinates to one over free coordinates.

    Fixed coordinates are pinned to the reference positions with zero velocity.
    """
    idx = free_dof_index(topology)
    q_fixed = jnp.asarray(topology.q_ref.reshape(-1))

    def L_free(qf, qdf):
        q = q_fixed.at[idx.free].set(qf)
        qd = jnp.zeros_like(q_fixed, dtype=qdf.dtype).at[idx.free].set(qdf)
        return L(q, qd)

    return L_free


def assemble_terms(L: LagrangianFn, topology: Topology, q: jnp.ndarray, qdot: jnp.ndarray,
                   drag_coeff: float = 0.0, external_force: jnp.ndarray | None = None
                   ) -> DynamicsTerms:
    """All terms of the constrained equation at one state, on free coordinates.

    ``q`` and ``qdot`` are full flattened coordinates; fixed entries of ``q``
    are ignored in favour of the topology's reference positions.
    """
    idx = free_dof_index(topology)
    q = jnp.asarray(q, dtype=jnp.float64)
    qdot = jnp.asarray(qdot, dtype=jnp.float64)
    qf, qdf = q[idx.free], qdot[idx.free]
    Lf = restrict(topology, L)
    Pi = jax.grad(Lf, argnums=0)(qf, qdf)
    M = hessian_block_fn(Lf, 1, 1)(qf, qdf)
    C = hessian_block_fn(Lf, 1, 0)(qf, qdf)
    qdot_full = jnp.zeros_like(q).at[idx.free].set(qdf)
    Ups = drag_model(topology, qdot_full, drag_coeff)[idx.free] if drag_coeff else jnp.zeros_like(qf)
    F = jnp.zeros_like(qf) if external_force is None else jnp.asarray(external_force)[idx.free]
    A, adq = constraint_matrix(topology, q, qdot_full)
    return DynamicsTerms(M=M, C=C, Pi=Pi, Upsilon=Ups, F=F, A=A, Adot_qdot=adq, qdot=qdf)


def solve_lambda(terms: DynamicsTerms) -> jnp.ndarray:
    """Lagrange multipliers ``(A M^-1 A^T)^-1 (Adot qdot + A M^-1 rhs)``."""
    A = terms.A
    if A.shape[0] == 0:
        return jnp.zeros((0,), dtype=terms.M.dtype)
    Minv_At = spd_solve(terms.M, A.T)
    Minv_f = spd_solve(terms.M, terms.rhs)
    S = A @ Minv_At
    if _concrete(S):
        cond = float(np.linalg.cond(np.asarray(S)))
        if not np.isfinite(cond) or cond > RANK_COND_LIMIT:
            raise RankDeficiencyError(cond)
    return spd_solve(S, terms.Adot_qdot + A @ Minv_f)


def acceleration(terms: DynamicsTerms) -> jnp.ndarray:
    """Free-coordinate accelerations ``M^-1 (rhs - A^T lambda)``."""
    lam = solve_lambda(terms)
    return spd_solve(terms.M, terms.rhs - terms.A.T @ lam)


def full_acceleration(L: LagrangianFn, topology: Topology, q: jnp.ndarray, qdot: jnp.ndarray,
                      drag_coeff: float = 0.0, external_force: jnp.ndarray | None = None
                      ) -> jnp.ndarray:
    """Accelerations over all coordinates; fixed coordinates get zero."""
    idx = free_dof_index(topology)
    terms = assemble_terms(L, topology, q, qdot, drag_coeff, external_force)
    qdd = acceleration(terms)
    return jnp.zeros(topology.n_coords, dtype=qdd.dtype).at[idx.free].set(qdd)


def acceleration_fn(model: LagrangianModel, topology: Topology, drag_coeff: float | None = None,
                    external_force: np.ndarray | None = None) -> Callable:
    """Jitted ``(q, qdot) -> qddot`` over full coordinates.

    ``drag_coeff`` defaults to the topology's own coefficient.
    """
    c = topology.drag_coeff if drag_coeff is None else drag_coeff
    L = model.lagrangian_fn(topology)
    F = None if external_force is None else jnp.asarray(external_force)

    @jax.jit
    def f(q, qdot):
        return full_acceleration(L, topology, q, qdot, c, F)

    return f


def state_terms(model: LagrangianModel, topology: Topology, state: State, drag_coeff: float = 0.0,
                external_force: np.ndarray | None = None) -> DynamicsTerms:
    return assemble_terms(model.lagrangian_fn(topology), topology, state.q, state.qdot,
                          drag_coeff, external_force)


def _gram_solve(A: jnp.ndarray):
    """``b -> (A A^T)^-1 b``; the Gram matrix of non-degenerate link rows is SPD."""
    factor = jnp.linalg.cholesky(A @ A.T)
    return lambda b: jsl.cho_solve((factor, True), b)


def project_positions(topology: Topology, q: jnp.ndarray, iters: int = 2) -> jnp.ndarray:
    """Gauss-Newton on the squared-length residuals ``(|q_i - q_j|^2 - l^2) / 2``."""
    rows = constraint_edges(topology)
    if rows.shape[0] == 0 or iters == 0:
        return q
    idx = free_dof_index(topology)
    lengths = jnp.asarray(topology.lengths[rows])
    zero_v = jnp.zeros_like(q)
    for _ in range(iters):
        A, _, dq = _constraint_full(topology, q, zero_v)
        A = A[:, idx.free]
        r = 0.5 * (jnp.sum(dq * dq, axis=1) - lengths ** 2)
        q = q.at[idx.free].add(-A.T @ _gram_solve(A)(r))
    return q


def velocity_projector(topology: Topology, q: jnp.ndarray) -> Callable:
    """``qdot -> `` the minimal-norm correction of ``qdot`` satisfying ``A(q) qdot = 0``."""
    rows = constraint_edges(topology)
    if rows.shape[0] == 0:
        return lambda qdot: qdot
    idx = free_dof_index(topology)
    A, _, _ = _constraint_full(topology, q, jnp.zeros_like(q))
    A = A[:, idx.free]
    solve = _gram_solve(A)

    def project(qdot):
        vf = qdot[idx.free]
        vf = vf - A.T @ solve(A @ vf)
        return jnp.zeros_like(qdot).at[idx.free].set(vf)

    return project


def project_state(topology: Topology, q: jnp.ndarray, qdot: jnp.ndarray, iters: int = 2):
    """Pull ``(q, qdot)`` back onto the constraint manifold.

    ``iters`` Gauss-Newton steps on the link lengths, then the velocity
    correction enforcing ``A qdot = 0``.
    """
    q = project_positions(topology, q, iters)
    return q, velocity_projector(topology, q)(qdot)
