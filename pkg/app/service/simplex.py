"""
Dense two-phase tableau simplex.

Solves min c @ x s.t. rows (<=, =, >=) rhs, lower <= x <= upper by mapping
the problem to standard form (A x = b, x >= 0, b >= 0), running phase 1 on
artificial variables and phase 2 on the original objective. Pricing is
Dantzig's rule until a run of degenerate pivots is seen, then Bland's rule
for the rest of the phase, which rules out cycling.
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np

from app.core.config import LP_FEASIBILITY_TOL, LP_OPTIMALITY_TOL, PIVOT_EPS
from app.core.errors import LpNumericalError
from app.schema.LinearProgram import LinearProgram, LpStatus, Relation, Sense

DEGENERATE_RUN = 20


@dataclass
class _StandardForm:
    A: np.ndarray
    b: np.ndarray
    c: np.ndarray
    # x_orig = offset + recover @ z
    offset: np.ndarray
    recover: np.ndarray
    n_struct: int
    slack_basis: list


def _to_standard_form(lp: LinearProgram) -> _StandardForm:
    n = lp.n_vars
    sign = -1.0 if lp.sense == Sense.MAX else 1.0
    c_orig = sign * lp.objective

    cost, offset = [], np.zeros(n)
    recover_cols = []
    extra_rows = []

    for j in range(n):
        lo, hi = lp.lower[j], lp.upper[j]
        unit = np.zeros(n)
        unit[j] = 1.0
        if np.isfinite(lo):
            offset[j] = lo
            recover_cols.append(unit)
            cost.append(c_orig[j])
            if np.isfinite(hi):
                extra_rows.append((len(recover_cols) - 1, hi - lo))
        elif np.isfinite(hi):
            offset[j] = hi
            recover_cols.append(-unit)
            cost.append(-c_orig[j])
        else:
            recover_cols.append(unit)
            cost.append(c_orig[j])
            recover_cols.append(-unit)
            cost.append(-c_orig[j])
    recover = np.array(recover_cols).T if recover_cols else np.zeros((n, 0))
    n_struct = recover.shape[1]

    k = lp.n_rows
    rows = lp.rows @ recover if k else np.zeros((0, n_struct))
    rhs = lp.rhs - (lp.rows @ offset if k else 0.0)
    relations = list(lp.relations)

    for col, width in extra_rows:
        row = np.zeros(n_struct)
        row[col] = 1.0
        rows = np.vstack([rows, row])
        rhs = np.append(rhs, width)
        relations.append(Relation.LE)

    # Slack/surplus columns, then flip rows so that b >= 0.
    n_rows = len(relations)
    n_slack = sum(1 for r in relations if r != Relation.EQ)
    A = np.zeros((n_rows, n_struct + n_slack))
    A[:, :n_struct] = rows
    b = np.array(rhs, dtype=float)
    slack_basis = [None] * n_rows
    s = n_struct
    for i, rel in enumerate(relations):
        if rel == Relation.LE:
            A[i, s] = 1.0
            slack_basis[i] = s
            s += 1
        elif rel == Relation.GE:
            A[i, s] = -1.0
            s += 1
    for i in range(n_rows):
        if b[i] < 0:
            A[i] *= -1.0
            b[i] *= -1.0
            slack_basis[i] = None
    for i, rel in enumerate(relations):
        # A surplus column flipped to +1 can serve as the starting basis.
        if rel == Relation.GE and b[i] >= 0 and slack_basis[i] is None:
            cols = np.flatnonzero(A[i, n_struct:] > 0.5) + n_struct
            for col in cols:
                if np.count_nonzero(A[:, col]) == 1:
                    slack_basis[i] = int(col)
                    break

    c = np.zeros(A.shape[1])
    c[:n_struct] = cost
    return _StandardForm(A=A, b=b, c=c, offset=offset, recover=recover,
                         n_struct=n_struct, slack_basis=slack_basis)


class _Tableau:
    def __init__(self, A: np.ndarray, b: np.ndarray, basis: list[int], max_pivots: int):
        self.T = np.hstack([A, b[:, None]]).astype(float)
        self.basis = list(basis)
        self.max_pivots = max_pivots
        self.pivots = 0

    def set_objective(self, c: np.ndarray):
        obj = np.append(c, 0.0)
        for r, col in enumerate(self.basis):
            if obj[col] != 0.0:
                obj = obj - obj[col] * self.T[r]
        self.obj = obj

    def pivot(self, r: int, col: int):
        piv = self.T[r, col]
        if abs(piv) < PIVOT_EPS:
            raise LpNumericalError(f"pivot element {piv:.3e} below pivot epsilon")
        self.T[r] /= piv
        factors = self.T[:, col].copy()
        factors[r] = 0.0
        self.T -= np.outer(factors, self.T[r])
        self.obj -= self.obj[col] * self.T[r]
        self.basis[r] = col
        self.pivots += 1

    def run(self, allowed: np.ndarray) -> LpStatus:
        """Iterate to optimality over the columns flagged in allowed."""
        degenerate = 0
        bland = False
        while True:
            if self.pivots > self.max_pivots:
                raise LpNumericalError(f"simplex exceeded {self.max_pivots} pivots")
            reduced = np.where(allowed, self.obj[:-1], 0.0)
            candidates = np.flatnonzero(reduced < -LP_OPTIMALITY_TOL)
            if candidates.size == 0:
                return LpStatus.OPTIMAL
            col = int(candidates[0]) if bland else int(candidates[np.argmin(reduced[candidates])])

            column = self.T[:, col]
            positive = np.flatnonzero(column > PIVOT_EPS)
            if positive.size == 0:
                return LpStatus.UNBOUNDED
            ratios = np.maximum(self.T[positive, -1], 0.0) / column[positive]
            best = ratios.min()
            ties = positive[ratios <= best + PIVOT_EPS * max(1.0, abs(best))]
            r = int(min(ties, key=lambda i: self.basis[i]))

            degenerate = degenerate + 1 if best <= PIVOT_EPS else 0
            if degenerate >= DEGENERATE_RUN:
                bland = True
            self.pivot(r, col)


def simplex_solve(lp: LinearProgram) -> tuple[LpStatus, Optional[np.ndarray], int]:
    """Returns (status, x, pivots). x is None unless Optimal."""
    sf = _to_standard_form(lp)
    m, ncols = sf.A.shape
    max_pivots = 50 * (m + ncols) + 1000

    if m == 0:
        if np.any(sf.c < -LP_OPTIMALITY_TOL):
            return LpStatus.UNBOUNDED, None, 0
        return LpStatus.OPTIMAL, sf.offset.copy(), 0

    # Phase 1: an artificial column for every row lacking a slack basis.
    need_art = [i for i in range(m) if sf.slack_basis[i] is None]
    A1 = np.zeros((m, ncols + len(need_art)))
    A1[:, :ncols] = sf.A
    basis = list(sf.slack_basis)
    for k, i in enumerate(need_art):
        A1[i, ncols + k] = 1.0
        basis[i] = ncols + k
    tab = _Tableau(A1, sf.b, basis, max_pivots)

    if need_art:
        c1 = np.zeros(A1.shape[1])
        c1[ncols:] = 1.0
        tab.set_objective(c1)
        tab.run(np.ones(A1.shape[1], dtype=bool))
        infeasibility = -tab.obj[-1]
        if infeasibility > LP_FEASIBILITY_TOL * (1.0 + np.abs(sf.b).max()):
            return LpStatus.INFEASIBLE, None, tab.pivots

        # Drive leftover artificials out of the basis; drop redundant rows.
        keep = []
        for r in range(m):
            if tab.basis[r] < ncols:
                keep.append(r)
                continue
            row = tab.T[r, :ncols]
            candidates = np.flatnonzero(np.abs(row) > 1e-7)
            if candidates.size:
                tab.pivot(r, int(candidates[np.argmax(np.abs(row[candidates]))]))
                keep.append(r)
        if len(keep) < m:
            tab.T = tab.T[keep]
            tab.basis = [tab.basis[r] for r in keep]
        tab.T = np.hstack([tab.T[:, :ncols], tab.T[:, -1:]])

    tab.set_objective(sf.c)
    status = tab.run(np.ones(ncols, dtype=bool))
    if status != LpStatus.OPTIMAL:
        return status, None, tab.pivots

    z = np.zeros(ncols)
    for r, col in enumerate(tab.basis):
        z[col] = tab.T[r, -1]
    z = np.maximum(z, 0.0)
    x = sf.offset + sf.recover @ z[:sf.n_struct]
    return LpStatus.OPTIMAL, x, tab.pivots
