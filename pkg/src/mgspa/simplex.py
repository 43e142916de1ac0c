"""Dense two-phase revised simplex and zero-sum matrix-game solver.

Meant for small LPs (tens to a few hundred variables). The basis inverse
gets rank-one updates and is re-inverted from the original data every few
pivots, so round-off cannot accumulate; stalling on degenerate vertices falls back to
Bland's rule so every problem terminates.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["LPError", "LPResult", "linprog", "solve_matrix_game"]

_COST_TOL = 1e-10
_PIVOT_TOL = 1e-9
_UNBOUNDED_TOL = 1e-7
_DEGENERATE_RUN = 20
_REFACTOR_EVERY = 25


class LPError(RuntimeError):
    """Raised for infeasible or unbounded programs."""


def _inv(B: np.ndarray) -> np.ndarray:
    # near-duplicate columns can make a basis numerically singular; the
    # pseudo-inverse keeps going and callers certify the result
    try:
        return np.linalg.inv(B)
    except np.linalg.LinAlgError:
        return np.linalg.pinv(B)


def _solve(B: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.solve(B, rhs)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(B, rhs, rcond=None)[0]


@dataclass
class LPResult:
    x: np.ndarray
    fun: float
    iterations: int
    duals_ub: np.ndarray | None = None  # <= 0 for a minimisation
    duals_eq: np.ndarray | None = None


def _simplex(A: np.ndarray, b: np.ndarray, c: np.ndarray, basis: list[int], allowed: np.ndarray, max_iter: int) -> int:
    """Minimise ``c @ x`` over ``A x = b, x >= 0`` from a feasible ``basis``.

    Entering columns use the most negative reduced cost; after a run of
    degenerate pivots the rule switches to Bland's (lowest index) until the
    objective moves again, which rules out cycling. ``basis`` is updated in
    place; returns the number of pivots.
    """
    m = A.shape[0]
    rows = np.arange(m)
    scale = 1.0 + float(np.abs(c).max(initial=0.0))
    it = 0
    degenerate = 0
    Binv = None
    while True:
        if Binv is None or it % _REFACTOR_EVERY == 0:
            Binv = _inv(A[:, basis])
        xB = Binv @ b
        d = c - (c[basis] @ Binv) @ A
        mask = (d < -_COST_TOL * scale) & allowed
        mask[basis] = False
        cand = np.nonzero(mask)[0]
        if degenerate < _DEGENERATE_RUN:
            cand = cand[np.argsort(d[cand], kind="stable")]
        entered = False
        for j in cand:
            u = Binv @ A[:, j]
            pos = u > _PIVOT_TOL * max(1.0, float(np.abs(u).max()))
            if not pos.any():
                if d[j] < -_UNBOUNDED_TOL * scale:
                    raise LPError("unbounded")
                continue  # reduced cost is round-off
            ratios = np.maximum(xB[pos], 0.0) / u[pos]
            best = ratios.min()
            ties = rows[pos][ratios <= best + 1e-12 * max(1.0, best)]
            if degenerate < _DEGENERATE_RUN:
                r = int(ties[np.argmax(u[ties])])  # largest pivot is most stable
            else:
                r = int(min(ties, key=lambda k: basis[k]))
            basis[r] = int(j)
            # product-form update of the basis inverse
            pivot_row = Binv[r] / u[r]
            Binv -= np.outer(u, pivot_row)
            Binv[r] = pivot_row
            degenerate = degenerate + 1 if best <= 1e-12 else 0
            entered = True
            break
        if not entered:
            return it
        it += 1
        if it > max_iter:
            raise LPError("iteration limit reached")


def linprog(c, A_ub=None, b_ub=None, A_eq=None, b_eq=None, free=None, max_iter: int = 50_000) -> LPResult:
    """Minimise ``c @ x`` subject to ``A_ub x <= b_ub``, ``A_eq x == b_eq``.

    Variables are non-negative except the indices listed in ``free``, which are
    split into positive and negative parts internally.
    """
    try:
        return _linprog(c, A_ub, b_ub, A_eq, b_eq, free, max_iter)
    except np.linalg.LinAlgError as exc:
        raise LPError(f"numerically singular basis: {exc}") from exc


def _linprog(c, A_ub, b_ub, A_eq, b_eq, free, max_iter) -> LPResult:
    c = np.asarray(c, dtype=float)
    n0 = c.size
    A_ub = np.zeros((0, n0)) if A_ub is None else np.asarray(A_ub, dtype=float).reshape(-1, n0)
    b_ub = np.zeros(0) if b_ub is None else np.asarray(b_ub, dtype=float).ravel()
    A_eq = np.zeros((0, n0)) if A_eq is None else np.asarray(A_eq, dtype=float).reshape(-1, n0)
    b_eq = np.zeros(0) if b_eq is None else np.asarray(b_eq, dtype=float).ravel()
    free = [] if free is None else list(free)
    c_orig = c
    if free:
        A_ub = np.hstack([A_ub, -A_ub[:, free]])
        A_eq = np.hstack([A_eq, -A_eq[:, free]])
        c = np.concatenate([c, -c[free]])
    n = c.size
    m_ub, m_eq = A_ub.shape[0], A_eq.shape[0]
    m = m_ub + m_eq

    # standard form: structural n | slacks m_ub | artificials m
    art0 = n + m_ub
    A = np.zeros((m, art0 + m))
    A[:m_ub, :n] = A_ub
    A[:m_ub, n:art0] = np.eye(m_ub)
    A[m_ub:, :n] = A_eq
    b = np.concatenate([b_ub, b_eq])
    neg = b < 0
    A[neg] *= -1.0
    b = np.abs(b)
    A[:, art0:] = np.eye(m)
    row_ids = list(range(m))
    basis = [n + r if (r < m_ub and not neg[r]) else art0 + r for r in range(m)]

    iters = 0
    allowed = np.ones(A.shape[1], dtype=bool)
    if any(j >= art0 for j in basis):
        c1 = np.zeros(A.shape[1])
        c1[art0:] = 1.0
        iters += _simplex(A, b, c1, basis, allowed, max_iter)
        xB = _solve(A[:, basis], b)
        infeas = sum(xB[k] for k, j in enumerate(basis) if j >= art0)
        if infeas > 1e-9 * max(1.0, float(b.max(initial=0.0))):
            raise LPError("infeasible")
        # drive artificials out of the basis, dropping redundant rows
        r = 0
        while r < len(basis):
            if basis[r] < art0:
                r += 1
                continue
            z = _solve(A[:, basis].T, np.eye(len(basis))[r])
            row = z @ A[:, :art0]
            row[[j for j in basis if j < art0]] = 0.0
            k = int(np.argmax(np.abs(row)))
            if abs(row[k]) > 1e-9:
                basis[r] = k
                r += 1
            else:
                keep = [i for i in range(A.shape[0]) if i != r]
                A, b = A[keep], b[keep]
                del basis[r]
                del row_ids[r]
        allowed[art0:] = False

    cfull = np.zeros(A.shape[1])
    cfull[:n] = c
    iters += _simplex(A, b, cfull, basis, allowed, max_iter)

    B = A[:, basis]
    x = np.zeros(A.shape[1])
    x[basis] = _solve(B, b)
    x = np.maximum(x[:n], 0.0)
    y = np.zeros(m)
    y[row_ids] = _solve(B.T, cfull[basis])
    y[neg] *= -1.0
    if free:
        x_main = x[:n0].copy()
        x_main[free] -= x[n0:]
        x = x_main
    return LPResult(x=x, fun=float(c_orig @ x), iterations=iters, duals_ub=y[:m_ub], duals_eq=y[m_ub:])


def solve_matrix_game(M) -> tuple[float, np.ndarray, np.ndarray]:
    """Solve the zero-sum game where the row player receives ``M[i, j]``.

    Returns ``(value, row_strategy, column_strategy)``; the row player
    maximises. Payoffs are shifted to be positive so the value variable needs
    no sign split.
    """
    M = np.asarray(M, dtype=float)
    nr, nc = M.shape
    shift = 1.0 - float(M.min())
    P = M + shift
    # row player: max t  s.t.  t <= x @ P[:, j],  sum x = 1
    c = np.zeros(nr + 1)
    c[-1] = -1.0
    A_ub = np.hstack([-P.T, np.ones((nc, 1))])
    A_eq = np.concatenate([np.ones(nr), [0.0]])[None]
    res = linprog(c, A_ub, np.zeros(nc), A_eq, [1.0])
    x = np.clip(res.x[:nr], 0.0, None)
    x /= x.sum()
    # column player: min z  s.t.  z >= P[i, :] @ y
    c = np.zeros(nc + 1)
    c[-1] = 1.0
    A_ub = np.hstack([P, -np.ones((nr, 1))])
    A_eq = np.concatenate([np.ones(nc), [0.0]])[None]
    res2 = linprog(c, A_ub, np.zeros(nr), A_eq, [1.0])
    y = np.clip(res2.x[:nc], 0.0, None)
    y /= y.sum()
    return float(res.x[nr]) - shift, x, y
