"""Dense strictly convex QP by a dual active-set method.

Solves::

    min 1/2 z^T H z + g^T z   s.t.   C z <= d

following Goldfarb and Idnani: start from the unconstrained minimizer and add
the most violated constraint at a time, dropping active constraints whose
multipliers would turn negative. No feasible starting point is needed, so the
same routine serves cold and shifted problems alike.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import cho_factor, cho_solve


@dataclass
class QpResult:
    z: NDArray[np.float64]
    multipliers: NDArray[np.float64]  # one per row of C, zero when inactive
    active: list[int]
    iterations: int
    status: str  # "optimal" | "infeasible" | "max-iters"


def solve_qp(H, g, C=None, d=None, max_iter: int = 500, tol: float = 1e-9) -> QpResult:
    H = np.asarray(H, dtype=float)
    g = np.asarray(g, dtype=float)
    n = g.shape[0]
    if C is None or len(C) == 0:
        C = np.zeros((0, n))
        d = np.zeros(0)
    C = np.asarray(C, dtype=float)
    d = np.asarray(d, dtype=float)
    m = C.shape[0]

    Hf = cho_factor(H, lower=True, check_finite=False)
    Hinv_C = cho_solve(Hf, C.T, check_finite=False) if m else np.zeros((n, 0))  # (n, m)
    CHC = C @ Hinv_C  # (m, m); active-set blocks are read from here
    z = -cho_solve(Hf, g, check_finite=False)
    row_scale = np.maximum(np.linalg.norm(C, axis=1), 1e-300)

    active: list[int] = []
    lam = np.zeros(0)
    it = 0
    while it < max_iter:
        viol = (C @ z - d) / row_scale
        if active:
            viol[active] = -np.inf
        p = int(np.argmax(viol)) if m else -1
        if m == 0 or viol[p] <= tol:
            return QpResult(z, _full(lam, active, m), active, it, "optimal")
        lam_p = 0.0
        while True:
            it += 1
            if it > max_iter:
                return QpResult(z, _full(lam, active, m), active, it, "max-iters")
            # direction of z and of the active multipliers as lam_p grows
            hp = Hinv_C[:, p]
            if active:
                M = CHC[np.ix_(active, active)]
                rhs = CHC[active, p]
                try:
                    r = cho_solve(cho_factor(M, lower=True, check_finite=False), rhs, check_finite=False)
                except np.linalg.LinAlgError:
                    r = np.linalg.lstsq(M, rhs, rcond=None)[0]
                dz = -(hp - Hinv_C[:, active] @ r)
            else:
                r = np.zeros(0)
                dz = -hp
            # lam_a(t) = lam_a - t r
            blocking = [k for k in range(len(active)) if r[k] > tol]
            t1, k_drop = np.inf, -1
            for k in blocking:
                if lam[k] / r[k] < t1:
                    t1, k_drop = lam[k] / r[k], k
            slope = C[p] @ dz  # < 0 when dz reduces the violation
            s_p = C[p] @ z - d[p]
            t2 = s_p / -slope if slope < -1e-14 * row_scale[p] ** 2 else np.inf
            t = min(t1, t2)
            if not np.isfinite(t):
                return QpResult(z, _full(lam, active, m), active, it, "infeasible")
            z = z + t * dz
            lam = lam - t * r
            lam_p += t
            if t2 <= t1:
                active.append(p)
                lam = np.append(np.maximum(lam, 0.0), lam_p)
                break
            del active[k_drop]
            lam = np.maximum(np.delete(lam, k_drop), 0.0)
    return QpResult(z, _full(lam, active, m), active, it, "max-iters")


def _full(lam, active, m) -> NDArray:
    out = np.zeros(m)
    if active:
        out[active] = lam
    return out
