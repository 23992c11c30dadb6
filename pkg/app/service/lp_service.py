import itertools
import os
import re
import threading
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linprog

from app.core.config import LP_FEASIBILITY_TOL, get_settings
from app.core.errors import LpModelError, LpNumericalError
from app.core.logger import setup_logger
from app.schema.LinearProgram import LinearProgram, LpResult, LpStatus, Relation, Sense
from app.service.simplex import simplex_solve

logger = setup_logger("app_logger")

ABS_ROLES = ("objective_min", "upper_bounded")

# A block of terms: (variable indices, k x len(indices) coefficient matrix).
Terms = Sequence[Tuple[np.ndarray, np.ndarray]]

_dump_counter = itertools.count()
_dump_lock = threading.Lock()


class LpBuilder:
    """Assembles a LinearProgram from named variable blocks and row blocks."""

    def __init__(self, label: str = "lp"):
        self.label = label
        self._names: list[str] = []
        self._lower: list[float] = []
        self._upper: list[float] = []
        self._row_blocks: list[tuple[Terms, Relation, np.ndarray]] = []
        self._objective: dict[int, float] = {}
        self._sense = Sense.MIN
        self._abs_vars: dict[int, str] = {}
        self._epigraph_blocks: dict[int, tuple[int, int]] = {}

    @property
    def n_vars(self) -> int:
        return len(self._names)

    def add_variables(self, name: str, size: int, lower=0.0, upper=np.inf) -> np.ndarray:
        start = len(self._names)
        lower = np.broadcast_to(np.asarray(lower, dtype=float), (size,))
        upper = np.broadcast_to(np.asarray(upper, dtype=float), (size,))
        for k in range(size):
            self._names.append(f"{name}_{k}" if size > 1 else name)
            self._lower.append(float(lower[k]))
            self._upper.append(float(upper[k]))
        return np.arange(start, start + size)

    def add_rows(self, terms: Terms, relation: Relation, rhs) -> None:
        rhs = np.atleast_1d(np.asarray(rhs, dtype=float))
        blocks = []
        for idx, coef in terms:
            coef = np.asarray(coef, dtype=float)
            if coef.ndim == 1:
                coef = coef[None, :]
            if coef.shape != (len(rhs), len(idx)):
                raise LpModelError(
                    f"{self.label}: row block of shape {coef.shape} does not match "
                    f"{len(rhs)} rows x {len(idx)} variables")
            blocks.append((np.asarray(idx), coef))
        self._row_blocks.append((blocks, Relation(relation), rhs))

    def set_objective(self, terms: Iterable[Tuple[np.ndarray, np.ndarray]], sense: Sense = Sense.MIN) -> None:
        self._objective = {}
        self._sense = Sense(sense)
        for idx, coef in terms:
            coef = np.broadcast_to(np.asarray(coef, dtype=float), (len(idx),))
            for j, cj in zip(idx, coef):
                self._objective[int(j)] = self._objective.get(int(j), 0.0) + float(cj)

    def _check_abs_tightness(self, lp: LinearProgram, epigraph_rows: dict[int, set[int]]) -> None:
        """Absolute-value epigraph variables must only ever be pushed downwards."""
        direction = 1.0 if lp.sense == Sense.MIN else -1.0
        for j, role in self._abs_vars.items():
            col = lp.rows[:, j] if lp.n_rows else np.zeros(0)
            own = epigraph_rows.get(j, set())
            for r in np.flatnonzero(col):
                if r in own:
                    continue
                rel = lp.relations[r]
                if not ((rel == Relation.LE and col[r] > 0) or (rel == Relation.GE and col[r] < 0)):
                    raise LpModelError(
                        f"{self.label}: |expr| variable {lp.names[j]} appears in row {r} "
                        f"where the epigraph relaxation is not tight")
            if direction * lp.objective[j] < 0:
                raise LpModelError(
                    f"{self.label}: |expr| variable {lp.names[j]} ({role}) is rewarded by the objective")

    def build(self) -> LinearProgram:
        nvar = self.n_vars
        total_rows = sum(len(rhs) for _, _, rhs in self._row_blocks)
        rows = np.zeros((total_rows, nvar))
        relations: list[Relation] = []
        rhs_all = np.zeros(total_rows)
        block_rows = []
        r0 = 0
        for blocks, relation, rhs in self._row_blocks:
            k = len(rhs)
            for idx, coef in blocks:
                if len(idx):
                    rows[r0:r0 + k, idx] += coef
            relations.extend([relation] * k)
            rhs_all[r0:r0 + k] = rhs
            block_rows.append(range(r0, r0 + k))
            r0 += k
        objective = np.zeros(nvar)
        for j, cj in self._objective.items():
            objective[j] = cj
        lp = LinearProgram(
            sense=self._sense, objective=objective,
            lower=np.array(self._lower), upper=np.array(self._upper),
            rows=rows, relations=tuple(relations), rhs=rhs_all,
            names=list(self._names), label=self.label,
        )
        if self._abs_vars:
            epigraph_rows = {j: {r for b in ids for r in block_rows[b]} for j, ids in self._epigraph_blocks.items()}
            self._check_abs_tightness(lp, epigraph_rows)
        return lp


def abs_linearize(builder: LpBuilder, terms: Terms, constant, role: str, name: str = "u") -> np.ndarray:
    """
    Adds u >= |expr| for the row block expr = sum(coef @ x[idx]) + constant,
    via u >= expr and u >= -expr. Only valid where u is pushed down at the
    optimum, so the caller declares the role: "objective_min" when u carries
    a nonnegative weight in a minimised objective, "upper_bounded" when u
    only appears on the small side of <= rows. build() re-checks this.
    """
    if role not in ABS_ROLES:
        raise LpModelError(f"abs_linearize cannot be used with role {role!r}; the relaxation is only tight for {ABS_ROLES}")
    constant = np.atleast_1d(np.asarray(constant, dtype=float))
    k = len(constant)
    u = builder.add_variables(name, k, lower=0.0)
    eye = np.eye(k)
    first = len(builder._row_blocks)
    builder.add_rows([(u, eye)] + [(idx, -np.asarray(c)) for idx, c in terms], Relation.GE, constant)
    builder.add_rows([(u, eye)] + [(idx, np.asarray(c)) for idx, c in terms], Relation.GE, -constant)
    for j in u:
        builder._abs_vars[int(j)] = role
        builder._epigraph_blocks[int(j)] = (first, first + 1)
    return u


def _solve_highs(lp: LinearProgram) -> LpResult:
    sign = -1.0 if lp.sense == Sense.MAX else 1.0
    le = np.array([r == Relation.LE for r in lp.relations], dtype=bool)
    ge = np.array([r == Relation.GE for r in lp.relations], dtype=bool)
    eq = np.array([r == Relation.EQ for r in lp.relations], dtype=bool)
    A_ub = np.vstack([lp.rows[le], -lp.rows[ge]]) if (le.any() or ge.any()) else None
    b_ub = np.concatenate([lp.rhs[le], -lp.rhs[ge]]) if A_ub is not None else None
    A_eq = lp.rows[eq] if eq.any() else None
    b_eq = lp.rhs[eq] if eq.any() else None
    bounds = [(None if np.isinf(lo) else lo, None if np.isinf(hi) else hi) for lo, hi in zip(lp.lower, lp.upper)]
    res = linprog(sign * lp.objective, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq,
                  bounds=bounds, method="highs")
    if res.status == 0:
        return LpResult(status=LpStatus.OPTIMAL, x=res.x, iterations=int(getattr(res, "nit", 0)), backend="highs")
    if res.status == 2:
        return LpResult(status=LpStatus.INFEASIBLE, iterations=int(getattr(res, "nit", 0)), backend="highs")
    if res.status == 3:
        return LpResult(status=LpStatus.UNBOUNDED, iterations=int(getattr(res, "nit", 0)), backend="highs")
    raise LpNumericalError(f"{lp.label}: highs failed with status {res.status}: {res.message}")


def _solve_simplex(lp: LinearProgram) -> LpResult:
    status, x, pivots = simplex_solve(lp)
    return LpResult(status=status, x=x, iterations=pivots, backend="simplex")


def max_violation(lp: LinearProgram, x: np.ndarray) -> float:
    worst = float(np.max(np.maximum(lp.lower - x, 0.0), initial=0.0))
    worst = max(worst, float(np.max(np.maximum(x - lp.upper, 0.0), initial=0.0)))
    if lp.n_rows:
        lhs = lp.rows @ x
        for rel, value, bound in zip(lp.relations, lhs, lp.rhs):
            scale = 1.0 + abs(bound)
            if rel == Relation.LE:
                gap = value - bound
            elif rel == Relation.GE:
                gap = bound - value
            else:
                gap = abs(value - bound)
            worst = max(worst, gap / scale)
    return worst


def solve(lp: LinearProgram, backend: Optional[str] = None) -> LpResult:
    """Solve with the configured backend (GRIDGUARD_LP_BACKEND)."""
    settings = get_settings()
    backend = backend or settings.lp_backend
    if settings.lp_dump_dir:
        dump_lp(lp, settings.lp_dump_dir)
    try:
        if backend == "simplex":
            result = _solve_simplex(lp)
        elif backend == "highs":
            result = _solve_highs(lp)
        else:
            raise LpModelError(f"unknown LP backend {backend!r}")
    except (LpNumericalError, LpModelError):
        logger.error(f"LP {lp.label} failed on backend {backend}", exc_info=True)
        raise
    except (ValueError, FloatingPointError, np.linalg.LinAlgError) as e:
        logger.error(f"LP {lp.label} raised {e!r} on backend {backend}", exc_info=True)
        raise LpNumericalError(f"{lp.label}: {e}") from e

    if result.status != LpStatus.OPTIMAL:
        logger.debug(f"LP {lp.label}: {result.status.value} after {result.iterations} iterations ({backend})")
        return result

    x = np.clip(result.x, lp.lower, lp.upper)
    violation = max_violation(lp, x)
    if violation > 1e3 * LP_FEASIBILITY_TOL:
        raise LpNumericalError(f"{lp.label}: {backend} returned a point violating constraints by {violation:.3e}")
    if violation > LP_FEASIBILITY_TOL:
        logger.warning(f"LP {lp.label}: solution violates constraints by {violation:.3e}")
    value = float(lp.objective @ x)
    logger.debug(f"LP {lp.label}: optimal {value:.10g} after {result.iterations} iterations ({backend})")
    return result.model_copy(update={"x": x, "objective_value": value})


def _fmt(coef: float) -> str:
    return f"{coef:.12g}"


def _safe_name(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.]", "_", name)


def _linear_expr(coefs: np.ndarray, names: list[str]) -> str:
    parts = []
    for j in np.flatnonzero(coefs):
        c = coefs[j]
        parts.append(f"{'-' if c < 0 else '+'} {_fmt(abs(c))} {names[j]}")
    if not parts:
        return "0 " + names[0] if names else "0"
    text = " ".join(parts)
    return text[2:] if text.startswith("+ ") else text


def write_lp_text(lp: LinearProgram) -> str:
    """CPLEX LP text of the program."""
    names = [_safe_name(n) for n in (lp.names or [f"x{j}" for j in range(lp.n_vars)])]
    lines = [f"\\ {lp.label}", "Maximize" if lp.sense == Sense.MAX else "Minimize",
             f" obj: {_linear_expr(lp.objective, names)}", "Subject To"]
    symbol = {Relation.LE: "<=", Relation.GE: ">=", Relation.EQ: "="}
    for r in range(lp.n_rows):
        lines.append(f" c{r}: {_linear_expr(lp.rows[r], names)} {symbol[lp.relations[r]]} {_fmt(lp.rhs[r])}")
    lines.append("Bounds")
    for j, name in enumerate(names):
        lo, hi = lp.lower[j], lp.upper[j]
        if np.isinf(lo) and np.isinf(hi):
            lines.append(f" {name} free")
        elif np.isinf(hi):
            if lo != 0.0:
                lines.append(f" {name} >= {_fmt(lo)}")
        else:
            lo_txt = "-inf" if np.isinf(lo) else _fmt(lo)
            lines.append(f" {lo_txt} <= {name} <= {_fmt(hi)}")
    lines.append("End")
    return "\n".join(lines) + "\n"


def dump_lp(lp: LinearProgram, directory: str) -> str:
    with _dump_lock:
        seq = next(_dump_counter)
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, f"{_safe_name(lp.label)}-{seq:06d}.lp")
    with open(path, "w", encoding="utf-8") as f:
        f.write(write_lp_text(lp))
    return path
