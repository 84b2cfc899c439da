"""
Linear solves for the shifted operators (c - L): preconditioned GMRES for the
matrix-free spectral operators and a sparse LU for the assembled upwind ones.
"""

import logging
from typing import Callable, Optional

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import LinearOperator, gmres, splu

from ..core.errors import SolverError

logger = logging.getLogger(__name__)

DEFAULT_RTOL = 1e-10


def krylov_solve(
    apply_matrix: Callable[[np.ndarray], np.ndarray],
    rhs: np.ndarray,
    precondition: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    x0: Optional[np.ndarray] = None,
    rtol: float = DEFAULT_RTOL,
    mean_gain: Optional[float] = None,
    restart: int = 40,
    max_cycles: int = 50,
    label: str = "solve",
) -> np.ndarray:
    """
    Solve A x = rhs for an operator given by its action on grid arrays.

    Args:
        apply_matrix: x -> A x on arrays shaped like rhs
        rhs: Right-hand side
        precondition: Approximate inverse of A, same calling convention
        x0: Initial guess (the previous state keeps stepping deterministic)
        rtol: Required relative residual ||rhs - A x|| / ||rhs||
        mean_gain: If A maps the mean of x to mean_gain * mean(x), the mean of the
            solution is set to mean(rhs) / mean_gain exactly
        restart: GMRES restart length
        max_cycles: Maximum number of restart cycles
        label: Name used in log and error messages

    Returns:
        Solution array shaped like rhs
    """
    shape = rhs.shape
    b = rhs.ravel()
    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0:
        return np.zeros(shape)

    size = b.size
    A = LinearOperator((size, size), matvec=lambda v: apply_matrix(v.reshape(shape)).ravel(), dtype=float)
    M = None
    if precondition is not None:
        M = LinearOperator((size, size), matvec=lambda v: precondition(v.reshape(shape)).ravel(), dtype=float)

    iterations = [0]

    def count(_):
        iterations[0] += 1

    guess = None if x0 is None else np.asarray(x0, dtype=float).ravel()
    x = guess
    residual = np.inf
    # restarted passes from the last iterate until the true residual is small enough
    for _ in range(3):
        x, info = gmres(A, b, x0=x, rtol=0.1 * rtol, atol=0.0, restart=restart,
                        maxiter=max_cycles, M=M, callback=count, callback_type="pr_norm")
        if mean_gain is not None:
            x = x + (b.mean() / mean_gain - x.mean())
        residual = float(np.linalg.norm(b - A.matvec(x))) / b_norm
        if residual <= rtol:
            break
        logger.debug(f"{label}: gmres info={info}, true residual {residual:.3e}, restarting")
    else:
        raise SolverError(f"{label} did not converge", iterations=iterations[0], residual=residual)

    if not np.all(np.isfinite(x)):
        raise SolverError(f"{label} produced non-finite values", iterations=iterations[0], residual=residual)
    logger.debug(f"{label}: {iterations[0]} iterations, residual {residual:.3e}")
    return x.reshape(shape)


def direct_solver(matrix: sparse.spmatrix, label: str = "factorize") -> Callable[[np.ndarray], np.ndarray]:
    """
    Factorize a fixed sparse system once and return rhs -> x on grid arrays.

    The implicit upwind steps solve with one matrix; the LU keeps their
    M-matrix inverse exact to round-off.
    """
    try:
        lu = splu(sparse.csc_matrix(matrix))
    except RuntimeError as e:
        raise SolverError(f"{label}: sparse LU failed ({e})") from e
    logger.debug(f"{label}: LU of a {matrix.shape[0]}-unknown system, {lu.nnz} factor entries")

    def solve(rhs: np.ndarray) -> np.ndarray:
        x = lu.solve(np.ascontiguousarray(rhs, dtype=float).ravel())
        if not np.all(np.isfinite(x)):
            raise SolverError(f"{label} produced non-finite values")
        return x.reshape(rhs.shape)

    return solve
