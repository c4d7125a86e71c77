"""Case parsing, validation and the admittance matrix."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import TWO_BUS
from gridflow.grid import (
    CaseFormatError,
    build_admittance,
    bundled_cases,
    load_case,
    parse_case,
    read_case_text,
    serialize_case,
    series_to_admittance,
)


def test_two_bus_fields(two_bus):
    assert two_bus.name == "two_bus"
    assert two_bus.n_bus == 2 and two_bus.n_branch == 1
    assert two_bus.slack_bus == 1
    assert list(two_bus.pq_idx) == [1]
    g, b = series_to_admittance(0.01, 0.1)
    y = 1 / complex(0.01, 0.1)
    assert g == pytest.approx(-y.real) and b == pytest.approx(-y.imag)
    assert two_bus.branches[0].g_l == g


def test_bundled_case_sizes():
    assert bundled_cases() == ["case118", "case24", "case5"]
    sizes = {name: (load_case(name).n_bus, load_case(name).n_branch) for name in bundled_cases()}
    assert sizes == {"case5": (5, 6), "case24": (24, 34), "case118": (118, 179)}


def test_case5_bus_types(case5):
    assert case5.slack_bus == 4
    assert list(case5.pv_idx + 1) == [1, 3, 5]
    assert list(case5.pq_idx + 1) == [2]


def test_serialize_round_trip():
    for name in bundled_cases():
        case = load_case(name, shunts=True)
        again = parse_case(serialize_case(case))
        assert again == case


def test_load_case_strips_shunts():
    full = load_case("case118", shunts=True)
    assert full.has_shunts
    assert not load_case("case118").has_shunts


def test_read_case_text_missing():
    with pytest.raises(FileNotFoundError):
        read_case_text("no_such_case")


@pytest.mark.parametrize("edit, fragment", [
    (lambda t: t.replace("bus 1 slack", "bus 1 pv"), "slack"),
    (lambda t: t.replace("bus 2 pq", "bus 1 pq"), "duplicate bus"),
    (lambda t: t.replace("pmin -1.0 pmax 0.0", "pmin 1.0 pmax 0.0"), "inverted"),
    (lambda t: t.replace("branch 1 2", "branch 1 3"), "endpoint"),
    (lambda t: t.replace("smax 2.0", "smax abc"), "line 6"),
    (lambda t: t.replace("case two_bus base_mva 100.0", "case two_bus"), "line 1"),
    (lambda t: t.replace("bus 2 pq", "bus 2 load"), "unknown bus kind"),
    (lambda t: t.replace("branch 1 2", "branch 2 2"), "loop"),
])
def test_parse_errors(edit, fragment):
    with pytest.raises(CaseFormatError, match=fragment):
        parse_case(edit(TWO_BUS))


def test_parse_error_carries_line():
    with pytest.raises(CaseFormatError) as info:
        parse_case(TWO_BUS.replace("vmax 1.1 pload 0.5", "vmax 1.1 pload x"))
    assert info.value.line == 4


def _admittance_oracle(case, shunts):
    """Independent assembly: Y = A^T diag(y_series) A plus diagonal shunts."""
    n = case.n_bus
    A = np.zeros((case.n_branch, n))
    y = np.empty(case.n_branch, dtype=complex)
    for k, br in enumerate(case.branches):
        A[k, br.from_bus - 1] = 1.0
        A[k, br.to_bus - 1] = -1.0
        y[k] = -(br.g_l + 1j * br.b_l)  # off-diagonal entries are minus the series admittance
    Y = A.T @ np.diag(y) @ A
    if shunts:
        Y = Y + np.diag(case.shunt_g + 1j * case.shunt_b)
    return Y


@pytest.mark.parametrize("name", ["case5", "case24", "case118"])
def test_admittance_matches_incidence_oracle(name):
    case = load_case(name, shunts=True)
    for shunts in (True, False):
        Y = build_admittance(case, include_shunts=shunts).Y
        np.testing.assert_allclose(Y, _admittance_oracle(case, shunts), rtol=0, atol=1e-12)


def test_admittance_structure(three_bus):
    adm = build_admittance(three_bus, include_shunts=False)
    np.testing.assert_array_equal(adm.G, adm.G.T)
    np.testing.assert_allclose(adm.Y.sum(axis=1), 0, atol=1e-12)
    # off-diagonal entries are exactly the branch parameters
    for br in three_bus.branches:
        assert adm.G[br.from_bus - 1, br.to_bus - 1] == br.g_l
        assert adm.B[br.from_bus - 1, br.to_bus - 1] == br.b_l
    with pytest.raises(ValueError):
        adm.G[0, 0] = 1.0


@settings(max_examples=40, deadline=None)
@given(st.floats(1e-4, 1.0), st.floats(1e-3, 2.0))
def test_series_conversion_inverts(r, x):
    g, b = series_to_admittance(r, x)
    z = -1 / complex(g, b)
    assert z.real == pytest.approx(r, rel=1e-12)
    assert z.imag == pytest.approx(x, rel=1e-12)
