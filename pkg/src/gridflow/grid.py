"""Grid case files, network data types and the bus admittance matrix.

Case files are plain text::

    case <name> base_mva <float>
    bus
    bus <idx> <slack|pv|pq> pmin <f> pmax <f> qmin <f> qmax <f> vmin <f> vmax <f> \
pload <f> qload <f> vset <f> gsh <f> bsh <f>
    branch
    branch <from> <to> g <f> b <f> smax <f>

Everything is per-unit on ``base_mva``.  A branch may alternatively be given as
``branch <from> <to> r <f> x <f> smax <f>``; the series impedance is converted to
the admittance-matrix entries ``(G_ij, B_ij)`` at parse time.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable

import numpy as np

__all__ = [
    "Bus",
    "Branch",
    "GridCase",
    "AdmittanceMatrix",
    "CaseFormatError",
    "parse_case",
    "serialize_case",
    "load_case",
    "read_case_text",
    "bundled_cases",
    "build_admittance",
    "series_to_admittance",
]

BUS_KINDS = ("slack", "pv", "pq")
_BUS_FIELDS = ("pmin", "pmax", "qmin", "qmax", "vmin", "vmax", "pload", "qload", "vset", "gsh", "bsh")


class CaseFormatError(ValueError):
    """Raised for malformed or semantically invalid case files."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class Bus:
    index: int
    kind: str
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    v_min: float
    v_max: float
    p_load_nom: float = 0.0
    q_load_nom: float = 0.0
    v_setpoint: float = 1.0
    shunt_g: float = 0.0
    shunt_b: float = 0.0


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    g_l: float
    b_l: float
    s_max: float


@dataclass(frozen=True)
class AdmittanceMatrix:
    G: np.ndarray
    B: np.ndarray

    @property
    def Y(self) -> np.ndarray:
        return self.G + 1j * self.B


@dataclass(frozen=True, eq=False)
class GridCase:
    """Static network description.

    Buses are indexed ``1..B`` in the file and stored in that order, so bus ``k``
    lives at array position ``k - 1``.  Array views of the bus and branch data are
    precomputed because every numerical routine consumes them.
    """

    name: str
    base_mva: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]

    def __post_init__(self):
        _validate(self)
        arr = {
            "p_min": [b.p_min for b in self.buses],
            "p_max": [b.p_max for b in self.buses],
            "q_min": [b.q_min for b in self.buses],
            "q_max": [b.q_max for b in self.buses],
            "v_min": [b.v_min for b in self.buses],
            "v_max": [b.v_max for b in self.buses],
            "p_load_nom": [b.p_load_nom for b in self.buses],
            "q_load_nom": [b.q_load_nom for b in self.buses],
            "v_setpoint": [b.v_setpoint for b in self.buses],
            "shunt_g": [b.shunt_g for b in self.buses],
            "shunt_b": [b.shunt_b for b in self.buses],
            "g_l": [br.g_l for br in self.branches],
            "b_l": [br.b_l for br in self.branches],
            "s_max": [br.s_max for br in self.branches],
        }
        for key, values in arr.items():
            a = np.asarray(values, dtype=float)
            a.setflags(write=False)
            object.__setattr__(self, key, a)
        f = np.array([br.from_bus - 1 for br in self.branches], dtype=int)
        t = np.array([br.to_bus - 1 for br in self.branches], dtype=int)
        f.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "from_idx", f)
        object.__setattr__(self, "to_idx", t)
        # branch-to-bus incidence, used to scatter per-branch quantities onto buses
        cf = np.zeros((len(self.branches), len(self.buses)))
        ct = np.zeros((len(self.branches), len(self.buses)))
        cf[np.arange(len(f)), f] = 1.0
        ct[np.arange(len(t)), t] = 1.0
        cf.setflags(write=False)
        ct.setflags(write=False)
        object.__setattr__(self, "from_incidence", cf)
        object.__setattr__(self, "to_incidence", ct)
        kinds = np.array([b.kind for b in self.buses])
        for kind in BUS_KINDS:
            idx = np.flatnonzero(kinds == kind)
            idx.setflags(write=False)
            object.__setattr__(self, f"{kind}_idx", idx)

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_branch(self) -> int:
        return len(self.branches)

    @property
    def slack_bus(self) -> int:
        """1-based index of the slack bus."""
        return int(self.slack_idx[0]) + 1

    @property
    def has_shunts(self) -> bool:
        return bool(np.any(self.shunt_g) or np.any(self.shunt_b))

    def without_shunts(self) -> "GridCase":
        buses = tuple(dataclasses.replace(b, shunt_g=0.0, shunt_b=0.0) for b in self.buses)
        return GridCase(self.name, self.base_mva, buses, self.branches)

    def __eq__(self, other):
        if not isinstance(other, GridCase):
            return NotImplemented
        return (self.name, self.base_mva, self.buses, self.branches) == (
            other.name, other.base_mva, other.buses, other.branches)

    def __hash__(self):
        return hash((self.name, self.base_mva, self.buses, self.branches))


def _validate(case: GridCase) -> None:
    if not case.base_mva > 0:
        raise CaseFormatError(f"base_mva must be positive, got {case.base_mva}")
    if not case.buses:
        raise CaseFormatError("case has no buses")
    for pos, bus in enumerate(case.buses, start=1):
        if bus.index != pos:
            raise CaseFormatError(f"bus indices must be dense 1..B, found {bus.index} at position {pos}")
        if bus.kind not in BUS_KINDS:
            raise CaseFormatError(f"bus {bus.index}: unknown kind {bus.kind!r}")
        if bus.p_min > bus.p_max:
            raise CaseFormatError(f"bus {bus.index}: pmin > pmax")
        if bus.q_min > bus.q_max:
            raise CaseFormatError(f"bus {bus.index}: qmin > qmax")
        if not 0 < bus.v_min <= bus.v_max:
            raise CaseFormatError(f"bus {bus.index}: need 0 < vmin <= vmax")
    n_slack = sum(b.kind == "slack" for b in case.buses)
    if n_slack != 1:
        raise CaseFormatError(f"exactly one slack bus required, found {n_slack}")
    n = len(case.buses)
    for br in case.branches:
        if not (1 <= br.from_bus <= n and 1 <= br.to_bus <= n):
            raise CaseFormatError(f"branch {br.from_bus}-{br.to_bus}: endpoint out of range")
        if br.from_bus == br.to_bus:
            raise CaseFormatError(f"branch {br.from_bus}-{br.to_bus}: self loop")
        if not br.s_max > 0:
            raise CaseFormatError(f"branch {br.from_bus}-{br.to_bus}: smax must be positive")


def series_to_admittance(r: float, x: float) -> tuple[float, float]:
    """Off-diagonal admittance entries ``(G_ij, B_ij)`` of a series impedance."""
    y = -1.0 / complex(r, x)
    return y.real, y.imag


def _float(tok: str, lineno: int, what: str) -> float:
    try:
        return float(tok)
    except ValueError:
        raise CaseFormatError(f"{what}: expected a number, got {tok!r}", lineno) from None


def _int(tok: str, lineno: int, what: str) -> int:
    try:
        return int(tok)
    except ValueError:
        raise CaseFormatError(f"{what}: expected an integer, got {tok!r}", lineno) from None


def _keyed(tokens: list[str], keys: Iterable[str], lineno: int) -> dict[str, float]:
    keys = tuple(keys)
    if len(tokens) != 2 * len(keys):
        raise CaseFormatError(f"expected fields {' '.join(keys)}", lineno)
    out = {}
    for k, (name, val) in enumerate(zip(tokens[::2], tokens[1::2])):
        if name != keys[k]:
            raise CaseFormatError(f"expected field {keys[k]!r}, got {name!r}", lineno)
        out[name] = _float(val, lineno, name)
    return out


def parse_case(text: str) -> GridCase:
    name = None
    base_mva = None
    section = None
    buses: dict[int, Bus] = {}
    bus_order: list[int] = []
    branches: list[Branch] = []

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        head = tok[0]
        if head == "case":
            if name is not None:
                raise CaseFormatError("duplicate case header", lineno)
            if len(tok) != 4 or tok[2] != "base_mva":
                raise CaseFormatError("header must read 'case <name> base_mva <float>'", lineno)
            name = tok[1]
            base_mva = _float(tok[3], lineno, "base_mva")
            continue
        if name is None:
            raise CaseFormatError("missing 'case' header before data", lineno)
        if head in ("bus", "branch") and len(tok) == 1:
            section = head
            continue
        if head == "bus":
            if section != "bus":
                raise CaseFormatError("bus line outside the bus section", lineno)
            if len(tok) < 3:
                raise CaseFormatError("bus line too short", lineno)
            idx = _int(tok[1], lineno, "bus index")
            kind = tok[2]
            if kind not in BUS_KINDS:
                raise CaseFormatError(f"unknown bus kind {kind!r}", lineno)
            vals = _keyed(tok[3:], _BUS_FIELDS, lineno)
            if idx in buses:
                raise CaseFormatError(f"duplicate bus index {idx}", lineno)
            if vals["pmin"] > vals["pmax"] or vals["qmin"] > vals["qmax"]:
                raise CaseFormatError(f"bus {idx}: injection limits inverted", lineno)
            if not 0 < vals["vmin"] <= vals["vmax"]:
                raise CaseFormatError(f"bus {idx}: voltage limits inverted or non-positive", lineno)
            buses[idx] = Bus(
                idx, kind, vals["pmin"], vals["pmax"], vals["qmin"], vals["qmax"],
                vals["vmin"], vals["vmax"], vals["pload"], vals["qload"], vals["vset"],
                vals["gsh"], vals["bsh"],
            )
            bus_order.append(idx)
        elif head == "branch":
            if section != "branch":
                raise CaseFormatError("branch line outside the branch section", lineno)
            if len(tok) != 9:
                raise CaseFormatError("branch line must read 'branch <from> <to> g <f> b <f> smax <f>'", lineno)
            f = _int(tok[1], lineno, "from bus")
            t = _int(tok[2], lineno, "to bus")
            if tok[3] == "g":
                vals = _keyed(tok[3:], ("g", "b", "smax"), lineno)
                g_l, b_l = vals["g"], vals["b"]
            elif tok[3] == "r":
                vals = _keyed(tok[3:], ("r", "x", "smax"), lineno)
                if vals["r"] == 0 and vals["x"] == 0:
                    raise CaseFormatError("zero series impedance", lineno)
                g_l, b_l = series_to_admittance(vals["r"], vals["x"])
            else:
                raise CaseFormatError(f"expected 'g' or 'r' after branch endpoints, got {tok[3]!r}", lineno)
            branches.append(Branch(f, t, g_l, b_l, vals["smax"]))
        else:
            raise CaseFormatError(f"unrecognised line starting with {head!r}", lineno)

    if name is None:
        raise CaseFormatError("empty case file")
    ordered = tuple(buses[i] for i in sorted(bus_order))
    # _validate reports the remaining semantic problems (slack count, density, endpoints)
    return GridCase(name, base_mva, ordered, tuple(branches))


def serialize_case(case: GridCase) -> str:
    lines = [f"case {case.name} base_mva {case.base_mva!r}", "", "bus"]
    for b in case.buses:
        lines.append(
            f"bus {b.index} {b.kind} pmin {b.p_min!r} pmax {b.p_max!r} qmin {b.q_min!r} qmax {b.q_max!r} "
            f"vmin {b.v_min!r} vmax {b.v_max!r} pload {b.p_load_nom!r} qload {b.q_load_nom!r} "
            f"vset {b.v_setpoint!r} gsh {b.shunt_g!r} bsh {b.shunt_b!r}"
        )
    lines += ["", "branch"]
    for br in case.branches:
        lines.append(f"branch {br.from_bus} {br.to_bus} g {br.g_l!r} b {br.b_l!r} smax {br.s_max!r}")
    return "\n".join(lines) + "\n"


def bundled_cases() -> list[str]:
    root = resources.files("gridflow") / "cases"
    return sorted(p.name[:-4] for p in root.iterdir() if p.name.endswith(".txt"))


def read_case_text(name_or_path: str | Path) -> str:
    path = Path(name_or_path)
    if path.is_file():
        return path.read_text(encoding="utf-8")
    res = resources.files("gridflow") / "cases" / f"{name_or_path}.txt"
    if res.is_file():
        return res.read_text(encoding="utf-8")
    raise FileNotFoundError(f"no case file or bundled case named {str(name_or_path)!r}")


def load_case(name_or_path: str | Path, shunts: bool = False) -> GridCase:
    """Load a case from a path, or by bundled name (``case5``, ``case24``, ``case118``).

    Shunt admittances are dropped unless ``shunts`` is true; the power-flow
    routines always honour whatever shunts the returned case carries.
    """
    case = parse_case(read_case_text(name_or_path))
    return case if shunts else case.without_shunts()


def build_admittance(case: GridCase, include_shunts: bool = True) -> AdmittanceMatrix:
    n = case.n_bus
    G = np.zeros((n, n))
    B = np.zeros((n, n))
    for br in case.branches:
        i, j = br.from_bus - 1, br.to_bus - 1
        G[i, j] += br.g_l
        G[j, i] += br.g_l
        B[i, j] += br.b_l
        B[j, i] += br.b_l
        G[i, i] -= br.g_l
        G[j, j] -= br.g_l
        B[i, i] -= br.b_l
        B[j, j] -= br.b_l
    if include_shunts:
        G[np.diag_indices(n)] += case.shunt_g
        B[np.diag_indices(n)] += case.shunt_b
    G.setflags(write=False)
    B.setflags(write=False)
    return AdmittanceMatrix(G, B)
