import json
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from app.core.errors import CapacityRuleError, CaseFormatError, ReportError
from app.schema.AlphaBounds import AlphaBounds
from app.schema.RawCase import CapacityMode, CapacityRule
from app.schema.Report import ReportDocument
from app.service.case_io_service import (
    builtin_case,
    emit_report,
    parse_attack_bounds,
    parse_case,
    resolve_case,
    serialize_case,
    synthesize_capacities,
    write_report,
)

TRIANGLE_M = """function mpc = tri
mpc.baseMVA = 100;
mpc.bus = [
    1 3 0 0;
    2 1 0 0;
    3 1 100 0;
];
mpc.gen = [
    1 60 0 0 0 1 100 1 100 0;
    2 40 0 0 0 1 100 1 50 0;
];
mpc.branch = [
    1 2 0 1 0 0;
    2 3 0 1 0 0;
    1 3 0 1 0 50;
];
mpc.gencost = [
    2 0 0 2 1 0;
    2 0 0 2 2 0;
];
"""


def _flows_case(n_lines: int):
    buses = "\n".join(f"    {i} 1 0 0;" for i in range(1, n_lines + 2))
    branches = "\n".join(f"    {i} {i + 1} 0 1 0 0;" for i in range(1, n_lines + 1))
    return parse_case(f"mpc.bus = [\n{buses}\n];\nmpc.gen = [\n    1 0 0 0 0 1 100 1 10 0;\n];\n"
                      f"mpc.branch = [\n{branches}\n];\n")


def test_parse_matpower_triangle():
    case = parse_case(TRIANGLE_M)
    assert case.name == "tri"
    assert (case.n, case.m, len(case.generators)) == (3, 3, 2)
    assert case.buses[0].bus_type == 3
    assert case.buses[2].pd_mw == 100
    assert case.generators[0].pg_mw == 60
    assert case.generators[1].cost == [2.0, 0.0]
    # rateA = 0 means unlimited
    assert math.isinf(case.branches[0].rate_mw)
    assert case.branches[2].rate_mw == 50


def test_parse_matpower_skips_out_of_service_rows():
    text = TRIANGLE_M.replace("2 40 0 0 0 1 100 1 50 0", "2 40 0 0 0 1 100 0 50 0")
    text = text.replace("1 3 0 1 0 50;", "1 3 0 1 0 50 0 0 0 0 0;")
    case = parse_case(text)
    assert len(case.generators) == 1
    assert case.m == 2


def test_out_of_service_branch_reactance_is_not_checked():
    text = TRIANGLE_M.replace("1 3 0 1 0 50;", "1 3 0 0 0 50 0 0 0 0 0;")
    case = parse_case(text)
    assert case.m == 2
    assert [(br.from_bus, br.to_bus) for br in case.branches] == [(1, 2), (2, 3)]


def test_transformer_ratio_scales_reactance():
    text = TRIANGLE_M.replace("2 3 0 1 0 0;", "2 3 0 0.5 0 0 0 0 0.9 0 1;")
    text = text.replace("1 2 0 1 0 0;", "1 2 0 1 0 0 0 0 0 0 1;")
    case = parse_case(text)
    assert case.branches[1].x_pu == pytest.approx(0.45)
    # a zero ratio means nominal
    assert case.branches[0].x_pu == 1.0


def test_parse_dangling_bus_reference():
    text = TRIANGLE_M.replace("1 3 0 1 0 50;", "1 99 0 1 0 50;")
    with pytest.raises(CaseFormatError, match="dangling bus reference 99"):
        parse_case(text)


def test_parse_nonpositive_reactance_reports_line():
    text = TRIANGLE_M.replace("2 3 0 1 0 0;", "2 3 0 0 0 0;")
    with pytest.raises(CaseFormatError) as err:
        parse_case(text)
    assert err.value.line is not None
    assert "reactance" in str(err.value)


def test_parse_rejects_piecewise_gencost():
    text = TRIANGLE_M.replace("2 0 0 2 1 0;", "1 0 0 2 0 0 10 10;")
    with pytest.raises(CaseFormatError, match="gencost model 1"):
        parse_case(text)


def test_parse_unclosed_table():
    with pytest.raises(CaseFormatError, match="not closed"):
        parse_case("mpc.bus = [\n 1 3 0 0;\n")


def test_parse_unknown_format():
    with pytest.raises(CaseFormatError, match="unrecognised"):
        parse_case("hello")


def test_native_round_trip():
    case = parse_case(builtin_case("tri3"), name="tri3")
    again = parse_case(serialize_case(case))
    assert again == case
    assert serialize_case(again) == serialize_case(case)


def test_matpower_round_trip_through_native():
    case = parse_case(builtin_case("ieee14"))
    assert (case.n, case.m, len(case.generators)) == (14, 20, 5)
    assert parse_case(serialize_case(case)) == case


def test_native_syntax_error_has_line():
    with pytest.raises(CaseFormatError) as err:
        parse_case('{\n  "name": "x",\n  "buses": [,]\n}')
    assert err.value.line == 3


def test_native_duplicate_bus():
    doc = json.loads(builtin_case("tri3"))
    doc["buses"][1]["id"] = 1
    with pytest.raises(CaseFormatError, match="duplicate bus ids"):
        parse_case(json.dumps(doc))


def test_resolve_case_prefers_file(tmp_path):
    path = tmp_path / "mine.m"
    path.write_text(TRIANGLE_M, encoding="utf-8")
    name, text = resolve_case(str(path))
    assert name == "mine"
    assert text == TRIANGLE_M
    with pytest.raises(CaseFormatError, match="not found"):
        resolve_case("no-such-case")


def test_capacity_rules_direct_formula():
    case = _flows_case(3)
    flows = [10.0, -2.0, 4.0]
    assert_allclose(synthesize_capacities(case, CapacityRule(mode=CapacityMode.FRACTION_MEDIAN), flows),
                    [12.0, 4.0, 4.8])
    assert_allclose(synthesize_capacities(case, CapacityRule(mode=CapacityMode.UNIFORM_MAX), flows),
                    [11.0, 11.0, 11.0])


def test_capacity_rules_scale_equivariant_and_admit_base_flows(rng):
    case = _flows_case(8)
    for _ in range(20):
        flows = rng.normal(0, 50, size=8)
        for mode in (CapacityMode.FRACTION_MEDIAN, CapacityMode.UNIFORM_MAX):
            rule = CapacityRule(mode=mode)
            caps = synthesize_capacities(case, rule, flows)
            assert_allclose(synthesize_capacities(case, rule, 3.0 * flows), 3.0 * caps)
            if mode == CapacityMode.UNIFORM_MAX:
                assert np.all(np.abs(flows) <= caps)
            else:
                big = np.abs(flows) >= np.median(np.abs(flows)) / 1.2
                assert np.all(np.abs(flows)[big] <= caps[big])


def test_given_rule_needs_rates():
    case = parse_case(TRIANGLE_M.replace("1 3 0 1 0 50;", "1 3 0 1;"))
    with pytest.raises(CapacityRuleError, match=r"branches \[3\]"):
        synthesize_capacities(case, CapacityRule())


def test_synthesized_rule_needs_base_flows():
    with pytest.raises(CapacityRuleError, match="needs base flows"):
        synthesize_capacities(_flows_case(2), CapacityRule(mode=CapacityMode.UNIFORM_MAX))


def test_attack_bounds_deviation_rows():
    forecast = np.array([0.0, 0.5, 1.0])
    bounds = parse_attack_bounds("bus,delta_mw\n# comment\n3, 10\n", (1, 2, 3), forecast, 100.0)
    assert_allclose(bounds.delta_max, [0.0, 0.0, 0.1])


def test_attack_bounds_envelope_rows():
    forecast = np.array([0.0, 0.5, 1.0])
    bounds = parse_attack_bounds("2, 40, 60\n", (1, 2, 3), forecast, 100.0)
    assert_allclose(bounds.pd_min, [0.0, 0.4, 1.0])
    assert_allclose(bounds.pd_max, [0.0, 0.6, 1.0])
    assert_allclose(bounds.dev_up, [0.0, 0.1, 0.0])


@pytest.mark.parametrize("text, message", [
    ("9, 10\n", "unknown bus id 9"),
    ("2, -1\n", "negative deviation"),
    ("2, 10\n3, 1, 2\n", "mixes"),
    ("2, 1, 2, 3\n", "2 or 3 columns"),
])
def test_attack_bounds_errors(text, message):
    with pytest.raises(CaseFormatError, match=message):
        parse_attack_bounds(text, (1, 2, 3), np.array([0.0, 0.5, 1.0]), 1.0)


def test_emit_report_is_deterministic_and_rounded():
    report = ReportDocument(case="ne39", algorithm="opf", cost_dollars_per_hr=41264.0000001, feasible=True,
                            meta={"b": 1, "a": math.inf})
    first = emit_report(report)
    assert first == emit_report(report)
    doc = json.loads(first)
    assert doc["cost_dollars_per_hr"] == 41264
    assert doc["meta"]["a"] is None
    assert list(doc) == sorted(doc)


def test_emit_report_empty_alpha_bounds():
    bounds = AlphaBounds()
    report = ReportDocument(case="x", algorithm="alpha-bounds",
                            alpha_bounds={"star": bounds.alpha_star, "beta": None, "gamma_beta": None,
                                          "hat": None, "max": None})
    doc = json.loads(emit_report(report))
    assert set(doc["alpha_bounds"].values()) == {None}
    assert "alpha_bounds: beta=null" in emit_report(report, "text")


def test_emit_report_unknown_format():
    with pytest.raises(ReportError):
        emit_report(ReportDocument(case="x", algorithm="opf"), "yaml")


def test_write_report_creates_directories(tmp_path):
    target = tmp_path / "out" / "report.json"
    write_report("{}\n", str(target))
    assert target.read_text(encoding="utf-8") == "{}\n"
