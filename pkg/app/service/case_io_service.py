import csv
import json
import math
import os
import re
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import pandas as pd
from pydantic import ValidationError

from app.core.config import get_settings
from app.core.errors import CapacityRuleError, CaseFormatError, ReportError
from app.core.logger import setup_logger
from app.schema.PrimaryResponse import AttackBounds
from app.schema.RawCase import BranchRow, BusRow, CapacityMode, CapacityRule, GeneratorRow, RawCase
from app.schema.Report import ReportDocument

logger = setup_logger("app_logger")

FIXTURE_DIR = Path(__file__).resolve().parent.parent / "fixtures"
BUILTIN_CASES = {"tri3": "tri3.json", "five_bus": "five_bus.json", "ieee14": "case14.m"}
CASE_ALIASES = {"ieee14": "case14.m", "ieee30": "case30.m", "ne39": "case39.m", "ieee57": "case57.m"}

_SECTION = re.compile(r"^\s*mpc\.(\w+)\s*=\s*(.*)$")
_FUNCTION = re.compile(r"^\s*function\s+\w+\s*=\s*(\w+)")


# ---------------------------------------------------------------------------
# MATPOWER subset
# ---------------------------------------------------------------------------

def _numbers(chunk: str, lineno: int) -> list[float]:
    values = []
    for token in chunk.replace(",", " ").split():
        try:
            values.append(float(token))
        except ValueError:
            raise CaseFormatError(f"unexpected token {token!r}", line=lineno)
    return values


def _read_matpower_tables(text: str) -> tuple[Optional[str], Optional[float], dict[str, list[tuple[int, list[float]]]]]:
    name, base_mva = None, None
    tables: dict[str, list[tuple[int, list[float]]]] = {}
    current: Optional[str] = None

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("%", 1)[0].strip()
        if not line:
            continue
        if current is None:
            fn = _FUNCTION.match(line)
            if fn:
                name = fn.group(1)
                continue
            m = _SECTION.match(line)
            if not m:
                continue
            key, rest = m.group(1), m.group(2).strip()
            if key == "baseMVA":
                values = _numbers(rest.rstrip(";"), lineno)
                if len(values) != 1:
                    raise CaseFormatError("mpc.baseMVA must be a single number", line=lineno)
                base_mva = values[0]
                continue
            if not rest.startswith("["):
                # Strings and other fields are not part of the DC model.
                continue
            current = key
            tables[current] = []
            line = rest[1:]
        closed = "]" in line
        # Inside brackets both ';' and a line break end a row.
        for piece in line.split("]", 1)[0].split(";"):
            values = _numbers(piece, lineno)
            if values:
                tables[current].append((lineno, values))
        if closed:
            current = None
    if current is not None:
        raise CaseFormatError(f"table mpc.{current} is not closed with '];'", line=len(text.splitlines()))
    return name, base_mva, tables


def _column(row: tuple[int, list[float]], col: int, table: str, required: bool = True) -> Optional[float]:
    lineno, values = row
    if len(values) < col:
        if required:
            raise CaseFormatError(f"mpc.{table} row needs at least {col} columns, found {len(values)}", line=lineno)
        return None
    return values[col - 1]


def _parse_matpower(text: str, default_name: str) -> RawCase:
    name, base_mva, tables = _read_matpower_tables(text)
    for required in ("bus", "gen", "branch"):
        if required not in tables:
            raise CaseFormatError(f"missing table mpc.{required}")

    buses = []
    for row in tables["bus"]:
        buses.append(BusRow(id=int(_column(row, 1, "bus")), bus_type=int(_column(row, 2, "bus")),
                            pd_mw=_column(row, 3, "bus")))
    known = {b.id for b in buses}

    cost_rows = tables.get("gencost", [])
    generators = []
    for k, row in enumerate(tables["gen"]):
        bus = int(_column(row, 1, "gen"))
        status = _column(row, 8, "gen")
        if bus not in known:
            raise CaseFormatError(f"dangling bus reference {bus} in generator table", line=row[0])
        if status <= 0:
            continue
        cost = [0.0]
        if k < len(cost_rows):
            cost = _gencost(cost_rows[k])
        generators.append(GeneratorRow(bus=bus, pg_mw=_column(row, 2, "gen"), p_max_mw=_column(row, 9, "gen"),
                                       p_min_mw=_column(row, 10, "gen"), cost=cost))

    branches = []
    for row in tables["branch"]:
        f, t = int(_column(row, 1, "branch")), int(_column(row, 2, "branch"))
        for end in (f, t):
            if end not in known:
                raise CaseFormatError(f"dangling bus reference {end} in branch table", line=row[0])
        status = _column(row, 11, "branch", required=False)
        if status is not None and status <= 0:
            continue
        x = _column(row, 4, "branch")
        tap = _column(row, 9, "branch", required=False)
        if tap:
            # off-nominal transformer ratio scales the series reactance in the DC model
            x *= tap
        if not x > 0:
            raise CaseFormatError(f"nonpositive reactance {x} on branch {f}-{t}", line=row[0])
        rate = _column(row, 6, "branch", required=False)
        if rate is not None and rate == 0:
            rate = math.inf
        branches.append(BranchRow(from_bus=f, to_bus=t, x_pu=x, rate_mw=rate))

    try:
        return RawCase(name=name or default_name, base_mva=base_mva if base_mva is not None else 100.0,
                       buses=buses, generators=generators, branches=branches)
    except ValidationError as e:
        raise CaseFormatError(_first_error(e)) from e


def _gencost(row: tuple[int, list[float]]) -> list[float]:
    lineno, values = row
    model = int(_column(row, 1, "gencost"))
    if model != 2:
        raise CaseFormatError(f"gencost model {model} is not supported (polynomial model 2 only)", line=lineno)
    ncost = int(_column(row, 4, "gencost"))
    coeffs = values[4:4 + ncost]
    if len(coeffs) != ncost:
        raise CaseFormatError(f"gencost row declares {ncost} coefficients but has {len(coeffs)}", line=lineno)
    while len(coeffs) > 3 and coeffs[0] == 0:
        coeffs = coeffs[1:]
    if len(coeffs) > 3:
        raise CaseFormatError(f"gencost polynomial of degree {len(coeffs) - 1} is not supported", line=lineno)
    return coeffs or [0.0]


# ---------------------------------------------------------------------------
# Native structured-text format
# ---------------------------------------------------------------------------

def _decode_rate(value) -> Optional[float]:
    if value is None:
        return None
    if isinstance(value, str):
        if value.strip().lower() in ("inf", "infinity", "unlimited"):
            return math.inf
        raise ValueError(f"invalid rate {value!r}")
    return float(value)


def _parse_native(text: str, default_name: str) -> RawCase:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise CaseFormatError(f"syntax error: {e.msg}", line=e.lineno) from e
    if not isinstance(doc, dict):
        raise CaseFormatError("case document must be an object")
    try:
        branches = []
        for br in doc.get("branches", []):
            br = dict(br)
            br["rate_mw"] = _decode_rate(br.get("rate_mw"))
            branches.append(br)
        return RawCase(name=doc.get("name", default_name), base_mva=doc.get("base_mva", 100.0),
                       buses=doc.get("buses", []), generators=doc.get("generators", []),
                       branches=branches)
    except (ValidationError, ValueError, TypeError) as e:
        message = _first_error(e) if isinstance(e, ValidationError) else str(e)
        raise CaseFormatError(message) from e


def _first_error(e: ValidationError) -> str:
    err = e.errors()[0]
    msg = err.get("msg", str(e))
    return msg.removeprefix("Value error, ")


def parse_case(text: str, name: str = "case") -> RawCase:
    """Parse a MATPOWER-style or native case document into a RawCase."""
    stripped = text.lstrip()
    try:
        if stripped.startswith("{"):
            case = _parse_native(text, name)
        elif "mpc." in text:
            case = _parse_matpower(text, name)
        else:
            raise CaseFormatError("unrecognised case format (expected MATPOWER tables or a native document)", line=1)
    except CaseFormatError as e:
        logger.error(f"Failed to parse case {name}: {e}")
        raise
    logger.info(f"Parsed case {case.name}: n={case.n}, m={case.m}, generators={len(case.generators)}")
    return case


def serialize_case(case: RawCase) -> str:
    """Native document with sorted keys. parse_case(serialize_case(c)) == c."""
    doc = case.model_dump()
    for br in doc["branches"]:
        if br["rate_mw"] is not None and math.isinf(br["rate_mw"]):
            br["rate_mw"] = "inf"
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def builtin_case(name: str) -> str:
    filename = BUILTIN_CASES.get(name)
    if filename is None:
        raise CaseFormatError(f"unknown builtin case {name!r}; available: {', '.join(sorted(BUILTIN_CASES))}")
    return (FIXTURE_DIR / filename).read_text(encoding="utf-8")


def resolve_case(path_or_name: str) -> tuple[str, str]:
    """
    Returns (case name, text). Order: an existing path, an alias or file
    name inside GRIDGUARD_CASE_DIR, then a builtin fixture.
    """
    if os.path.isfile(path_or_name):
        return Path(path_or_name).stem, Path(path_or_name).read_text(encoding="utf-8")
    case_dir = get_settings().case_dir
    if case_dir:
        for candidate in (CASE_ALIASES.get(path_or_name), path_or_name, f"{path_or_name}.m"):
            if candidate and os.path.isfile(os.path.join(case_dir, candidate)):
                return path_or_name, Path(case_dir, candidate).read_text(encoding="utf-8")
    if path_or_name in BUILTIN_CASES:
        return path_or_name, builtin_case(path_or_name)
    raise CaseFormatError(f"case {path_or_name!r} not found (not a file, not in GRIDGUARD_CASE_DIR, not builtin)")


# ---------------------------------------------------------------------------
# Capacities and attack bounds
# ---------------------------------------------------------------------------

def synthesize_capacities(case: RawCase, rule: CapacityRule, base_flows: Optional[Sequence[float]] = None) -> np.ndarray:
    """Per-line capacities in MW."""
    if rule.mode == CapacityMode.GIVEN:
        missing = [k + 1 for k, br in enumerate(case.branches) if br.rate_mw is None]
        if missing:
            raise CapacityRuleError(f"capacity rule 'given' but branches {missing} have no rate")
        return np.array([br.rate_mw for br in case.branches], dtype=float)

    if base_flows is None:
        raise CapacityRuleError(f"capacity rule {rule.mode.value!r} needs base flows")
    flows = np.abs(np.asarray(base_flows, dtype=float))
    if flows.shape != (case.m,):
        raise CapacityRuleError(f"expected {case.m} base flows, got {flows.shape}")
    if rule.mode == CapacityMode.FRACTION_MEDIAN:
        caps = np.maximum(rule.fraction_factor * flows, np.median(flows))
    else:
        caps = np.full(case.m, rule.uniform_factor * flows.max(initial=0.0))
    logger.debug(f"Synthesized capacities ({rule.mode.value}) for {case.name}: min {caps.min(initial=0):.4g} MW")
    return caps


def parse_attack_bounds(text: str, bus_ids: Sequence[int], forecast: np.ndarray, base_mva: float) -> AttackBounds:
    """
    Rows `bus_id, delta_max_mw` or `bus_id, pd_min_mw, pd_max_mw` (MW).
    Buses not listed keep their forecast demand.
    """
    index = {bus: i for i, bus in enumerate(bus_ids)}
    forecast = np.asarray(forecast, dtype=float)
    delta = np.zeros(len(bus_ids))
    pd_min, pd_max = forecast.copy(), forecast.copy()
    kinds = set()
    for lineno, row in enumerate(csv.reader(text.splitlines()), start=1):
        cells = [c.strip() for c in row]
        if not cells or not cells[0] or cells[0].startswith("#"):
            continue
        try:
            values = [float(c) for c in cells if c]
        except ValueError:
            if lineno == 1:
                continue  # header
            raise CaseFormatError(f"non-numeric attack-bounds row {row}", line=lineno)
        if len(values) not in (2, 3):
            raise CaseFormatError(f"attack-bounds row needs 2 or 3 columns, found {len(values)}", line=lineno)
        bus = int(values[0])
        if bus not in index:
            raise CaseFormatError(f"unknown bus id {bus}", line=lineno)
        kinds.add(len(values))
        i = index[bus]
        if len(values) == 2:
            if values[1] < 0:
                raise CaseFormatError(f"negative deviation {values[1]} for bus {bus}", line=lineno)
            delta[i] = values[1] / base_mva
        else:
            pd_min[i], pd_max[i] = values[1] / base_mva, values[2] / base_mva
    if len(kinds) > 1:
        raise CaseFormatError("attack-bounds file mixes deviation rows and envelope rows")
    try:
        if kinds == {3}:
            return AttackBounds(pd_min=pd_min, pd_max=pd_max, forecast=forecast)
        return AttackBounds(delta_max=delta, forecast=forecast)
    except ValidationError as e:
        raise CaseFormatError(_first_error(e)) from e


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def _canonical(value):
    if isinstance(value, dict):
        return {str(k): _canonical(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_canonical(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_canonical(v) for v in value.tolist()]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if not math.isfinite(value):
            return None
        return float(f"{value:.6g}")
    return value


def emit_report(report: Union[ReportDocument, dict], fmt: str = "json") -> str:
    """Deterministic rendering: sorted keys, 6 significant digits, non-finite as null."""
    doc = report.model_dump() if isinstance(report, ReportDocument) else dict(report)
    doc = _canonical(doc)
    if fmt == "json":
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"
    if fmt == "text":
        return _render_text(doc)
    raise ReportError(f"unknown report format {fmt!r}")


def _render_text(doc: dict) -> str:
    lines = []
    for key in sorted(doc):
        value = doc[key]
        if key in ("dispatch", "flows"):
            continue
        if isinstance(value, dict):
            inner = ", ".join(f"{k}={'null' if v is None else v}" for k, v in sorted(value.items()))
            lines.append(f"{key}: {inner}")
        elif isinstance(value, list):
            lines.append(f"{key}: {'; '.join(str(v) for v in value) if value else '-'}")
        else:
            lines.append(f"{key}: {'null' if value is None else value}")
    for table in ("dispatch", "flows"):
        if doc.get(table):
            lines.append("")
            lines.append(f"[{table}]")
            lines.append(pd.DataFrame(doc[table]).to_string(index=False, na_rep="null"))
    return "\n".join(lines) + "\n"


def write_report(text: str, path: Optional[str]) -> None:
    if path is None:
        return
    try:
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            f.write(text)
    except OSError as e:
        logger.error(f"Failed to write report to {path}: {e}", exc_info=True)
        raise ReportError(f"cannot write report to {path}: {e}") from e
