"""Derivative extraction for Lagrangians and training losses.

Second-order blocks are built forward-over-reverse (``jacfwd`` of ``grad``),
which suits the small state dimension of an articulated body. Parameter
gradients use reverse accumulation. Linear solves inside a loss are
differentiated through JAX's solve rules, which apply
``d(A^-1 b) = -A^-1 dA A^-1 b`` to the factorization rather than forming an
inverse.

The eager entry points check their results for non-finite values; inside
``jit`` use the raw ``jax`` transforms directly.
"""
from __future__ import annotations

from typing import Any, Callable, Sequence

import jax
import jax.numpy as jnp
import numpy as np


class NumericalEvaluationError(FloatingPointError):
    """A derivative evaluation produced a non-finite value."""

    def __init__(self, what: str, index: tuple[int, ...]):
        self.index = index
        super().__init__(f"non-finite {what} at coordinate {index}")


def _check_finite(value: Any, what: str) -> np.ndarray:
    arr = np.asarray(value)
    bad = np.argwhere(~np.isfinite(arr))
    if bad.size:
        raise NumericalEvaluationError(what, tuple(int(k) for k in bad[0]))
    return arr


def gradient(f: Callable[..., Any], *args: Any, argnum: int = 0) -> np.ndarray:
    """Gradient of scalar ``f(*args)`` with respect to ``args[argnum]``."""
    g = jax.grad(f, argnums=argnum)(*(jnp.asarray(a, dtype=jnp.float64) for a in args))
    return _check_finite(g, "gradient")


def hessian_block_fn(f: Callable[..., Any], row: int, col: int) -> Callable[..., Any]:
    """Traceable ``(*args) -> d^2 f / d args[row] d args[col]``.

    Row index runs over ``args[row]``, column index over ``args[col]``.
    """
    return jax.jacfwd(jax.grad(f, argnums=row), argnums=col)


def hessian_block(f: Callable[..., Any], args: Sequence[Any], row: int = 0,
                  col: int | None = None) -> np.ndarray:
    """Mixed second derivative block of scalar ``f(*args)``.

    ``hessian_block(L, (q, qdot), 1, 1)`` is the mass matrix and
    ``hessian_block(L, (q, qdot), 1, 0)`` the Coriolis-like block.
    """
    col = row if col is None else col
    args = tuple(jnp.asarray(a, dtype=jnp.float64) for a in args)
    return _check_finite(hessian_block_fn(f, row, col)(*args), "hessian")


def parameter_gradient(loss: Callable[..., Any], params: Any, *args: Any) -> Any:
    """Reverse-mode gradient of ``loss(params, *args)`` for any parameter pytree."""
    g = jax.grad(loss)(params, *args)
    for leaf in jax.tree_util.tree_leaves(g):
        _check_finite(leaf, "parameter gradient")
    return g


def jvp_primal(f: Callable[..., Any], *args: Any) -> Any:
    """Evaluate ``f`` on inputs carrying zero tangents and return the primal."""
    args = tuple(jnp.asarray(a, dtype=jnp.float64) for a in args)
    zeros = tuple(jnp.zeros_like(a) for a in args)
    primal, _ = jax.jvp(f, args, zeros)
    return primal
