"""Matrix-free conjugate gradients."""

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import NumericalBreakdownError


@dataclass
class LinearSystem:
    """A symmetric positive semi-definite system ``A x = b``.

    ``apply`` maps a flat vector to ``A @ x``; ``diagonal`` (optional) feeds
    a Jacobi preconditioner.
    """

    apply: Callable[[np.ndarray], np.ndarray]
    rhs: np.ndarray
    diagonal: Optional[np.ndarray] = None

    @property
    def dimension(self):
        return self.rhs.size


@dataclass
class CGResult:
    x: np.ndarray
    iterations: int
    residual: float  # relative, ||b - A x|| / ||b||


def cg_solve(system, iters=60, tol=1e-6, x0=None, precondition=False):
    """Conjugate gradients, optionally Jacobi-preconditioned.

    Stops after ``iters`` iterations or once the relative residual drops to
    ``tol``. Raises :class:`NumericalBreakdownError` on non-finite values.
    """
    b = np.asarray(system.rhs, dtype=np.float64).ravel()
    bnorm = np.linalg.norm(b)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64).ravel()
    if bnorm == 0.0 and x0 is None:
        return CGResult(x, 0, 0.0)
    scale = bnorm if bnorm > 0 else 1.0
    if precondition and system.diagonal is not None:
        d = np.asarray(system.diagonal, dtype=np.float64).ravel()
        inv_d = np.where(d > 0, 1.0 / np.where(d > 0, d, 1.0), 1.0)
    else:
        inv_d = None

    r = b - system.apply(x) if x0 is not None else b.copy()
    z = r * inv_d if inv_d is not None else r
    p = z.copy()
    rz = r @ z
    res = np.linalg.norm(r) / scale
    it = 0
    while it < iters and res > tol:
        ap = system.apply(p)
        pap = p @ ap
        if not np.isfinite(pap):
            raise NumericalBreakdownError(f"non-finite curvature at CG iteration {it}")
        if pap <= 0.0:
            # direction in the null space of a semi-definite operator
            break
        alpha = rz / pap
        x += alpha * p
        r -= alpha * ap
        it += 1
        res = np.linalg.norm(r) / scale
        if not np.isfinite(res):
            raise NumericalBreakdownError(f"non-finite residual at CG iteration {it}")
        z = r * inv_d if inv_d is not None else r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    return CGResult(x, it, float(res))
