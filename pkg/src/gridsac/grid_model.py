"""Static grid data model: buses, branches, generators, plants, and case files.

All electrical quantities are per-unit on the case's ``base_mva`` (voltages on
the nominal voltage base). Case files are JSON documents whose field names
match the dataclass fields one-for-one; :func:`parse_case` and
:func:`serialize_case` are exact inverses for every representable value.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, replace
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

__all__ = [
    "BusKind",
    "Bus",
    "Branch",
    "Generator",
    "Plant",
    "GridCase",
    "CaseError",
    "CaseSyntaxError",
    "CaseSemanticError",
    "parse_case",
    "serialize_case",
    "load_case",
    "save_case",
    "bundled_case",
    "bundled_case_names",
    "derive_admittance_params",
    "rebase",
    "with_plant_setpoints",
    "with_loads",
    "with_generation",
]

# Default voltage security zone, overridable per bus in the case file.
DEFAULT_V_MIN = 0.97
DEFAULT_V_MAX = 1.07

# Global bounds of the continuous voltage-setpoint command, p.u.
V_SET_MIN = 0.9
V_SET_MAX = 1.1


class CaseError(Exception):
    """Base class for case-file problems."""


class CaseSyntaxError(CaseError):
    """Malformed case text. Carries the offending line/column when known."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        if line is not None:
            message = f"{message} (line {line}, column {column})"
        super().__init__(message)
        self.line = line
        self.column = column


class CaseSemanticError(CaseError):
    """Structurally valid text that violates a grid-model invariant."""


class BusKind(str, enum.Enum):
    SLACK = "Slack"
    PV = "PV"
    PQ = "PQ"


@dataclass(frozen=True)
class Bus:
    """A network node with its demand, shunt, and voltage security zone.

    ``g_shunt`` and ``b_shunt`` are the per-unit active and reactive power the
    shunt consumes at 1.0 p.u. voltage (consumption scales with V^2; a
    capacitor bank therefore carries a negative ``b_shunt``).
    """

    id: int
    kind: BusKind
    v_mag: float = 1.0
    v_ang: float = 0.0
    p_load: float = 0.0
    q_load: float = 0.0
    g_shunt: float = 0.0
    b_shunt: float = 0.0
    v_min: float = DEFAULT_V_MIN
    v_max: float = DEFAULT_V_MAX


@dataclass(frozen=True)
class Branch:
    """A transmission line or (fixed-tap) transformer between two buses.

    Series impedance is stored as ``r`` and ``x``; the pi-model conductance
    and susceptance are derived on demand. ``b_charge`` is the per-end half
    line-charging susceptance and ``s_max`` the apparent-power rating.
    """

    id: int
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_charge: float = 0.0
    s_max: float = 1.0
    in_service: bool = True


@dataclass(frozen=True)
class Generator:
    id: int
    bus: int
    p_gen: float
    q_gen: float
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    v_set: float
    plant: int


@dataclass(frozen=True)
class Plant:
    """A group of generators that receive one shared voltage command."""

    id: int
    name: str
    generators: tuple[int, ...]


@dataclass(frozen=True)
class GridCase:
    """Validated, immutable network description.

    Instances are safe to share read-only across concurrent solvers and
    environments; derive modified cases with the ``with_*`` helpers.
    """

    base_mva: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]
    plants: tuple[Plant, ...]
    monitored_buses: tuple[int, ...]
    monitored_branches: tuple[int, ...]

    def __post_init__(self):
        _validate(self)

    @cached_property
    def bus_order(self) -> tuple[int, ...]:
        """Canonical bus ordering (ascending id) used by all solution arrays."""
        return tuple(sorted(b.id for b in self.buses))

    @cached_property
    def bus_position(self) -> dict[int, int]:
        return {bus_id: i for i, bus_id in enumerate(self.bus_order)}

    @cached_property
    def bus_by_id(self) -> dict[int, Bus]:
        return {b.id: b for b in self.buses}

    @cached_property
    def branch_by_id(self) -> dict[int, Branch]:
        return {b.id: b for b in self.branches}

    @cached_property
    def generator_by_id(self) -> dict[int, Generator]:
        return {g.id: g for g in self.generators}

    @cached_property
    def plant_by_id(self) -> dict[int, Plant]:
        return {p.id: p for p in self.plants}

    @cached_property
    def plant_order(self) -> tuple[int, ...]:
        """Canonical plant ordering (ascending id); defines the action layout."""
        return tuple(sorted(p.id for p in self.plants))

    @cached_property
    def generators_at_bus(self) -> dict[int, tuple[Generator, ...]]:
        out: dict[int, list[Generator]] = {b.id: [] for b in self.buses}
        for g in self.generators:
            out[g.bus].append(g)
        return {k: tuple(v) for k, v in out.items()}

    @cached_property
    def slack_bus(self) -> Bus:
        return next(b for b in self.buses if b.kind is BusKind.SLACK)

    @property
    def n_buses(self) -> int:
        return len(self.buses)

    @property
    def n_branches(self) -> int:
        return len(self.branches)


def derive_admittance_params(branch: Branch) -> tuple[float, float]:
    """Series conductance and susceptance of a branch's pi-model.

    g = r / (r^2 + x^2), b = -x / (r^2 + x^2).
    """
    z2 = branch.r * branch.r + branch.x * branch.x
    if z2 <= 0.0:
        raise ValueError(f"branch {branch.id}: zero series impedance")
    return branch.r / z2, -branch.x / z2


def _validate(case: GridCase) -> None:
    if case.base_mva <= 0:
        raise CaseSemanticError("base_mva must be positive")

    bus_ids = [b.id for b in case.buses]
    if len(set(bus_ids)) != len(bus_ids):
        raise CaseSemanticError("duplicate bus id")
    bus_set = set(bus_ids)
    if not bus_set:
        raise CaseSemanticError("case has no buses")

    slack_ids = [b.id for b in case.buses if b.kind is BusKind.SLACK]
    if not slack_ids:
        raise CaseSemanticError("missing slack: no bus of kind Slack")
    if len(slack_ids) > 1:
        raise CaseSemanticError(f"multiple slack buses: {slack_ids}")

    for b in case.buses:
        if not (b.v_min < b.v_max):
            raise CaseSemanticError(f"bus {b.id}: v_min must be < v_max")
        for name in ("v_mag", "v_ang", "p_load", "q_load", "g_shunt", "b_shunt"):
            v = getattr(b, name)
            if not _finite(v):
                raise CaseSemanticError(f"bus {b.id}: {name} not finite")

    branch_ids = [b.id for b in case.branches]
    if len(set(branch_ids)) != len(branch_ids):
        raise CaseSemanticError("duplicate branch id")
    for br in case.branches:
        if br.from_bus not in bus_set or br.to_bus not in bus_set:
            raise CaseSemanticError(f"branch {br.id}: dangling bus reference")
        if br.from_bus == br.to_bus:
            raise CaseSemanticError(f"branch {br.id}: from_bus equals to_bus")
        for name in ("r", "x", "b_charge", "s_max"):
            if not _finite(getattr(br, name)):
                raise CaseSemanticError(f"branch {br.id}: {name} not finite")
        if br.r < 0:
            raise CaseSemanticError(f"branch {br.id}: negative resistance")
        if br.x == 0:
            raise CaseSemanticError(f"branch {br.id}: zero reactance")
        if br.s_max <= 0:
            raise CaseSemanticError(f"branch {br.id}: s_max must be positive")
        derive_admittance_params(br)

    gen_ids = [g.id for g in case.generators]
    if len(set(gen_ids)) != len(gen_ids):
        raise CaseSemanticError("duplicate generator id")
    plant_ids = {p.id for p in case.plants}
    if len(plant_ids) != len(case.plants):
        raise CaseSemanticError("duplicate plant id")
    for g in case.generators:
        if g.bus not in bus_set:
            raise CaseSemanticError(f"generator {g.id}: dangling bus reference")
        if g.plant not in plant_ids:
            raise CaseSemanticError(f"generator {g.id}: dangling plant reference")
        for name in ("p_gen", "q_gen", "p_min", "p_max", "q_min", "q_max", "v_set"):
            if not _finite(getattr(g, name)):
                raise CaseSemanticError(f"generator {g.id}: {name} not finite")
        if not (g.q_min < g.q_max):
            raise CaseSemanticError(f"generator {g.id}: q_min must be < q_max")
        if not (g.p_min <= g.p_gen <= g.p_max):
            raise CaseSemanticError(f"generator {g.id}: p_gen outside [p_min, p_max]")
        if not (V_SET_MIN <= g.v_set <= V_SET_MAX):
            raise CaseSemanticError(
                f"generator {g.id}: v_set outside [{V_SET_MIN}, {V_SET_MAX}]")

    gen_set = set(gen_ids)
    claimed: dict[int, int] = {}
    for p in case.plants:
        if not p.generators:
            raise CaseSemanticError(f"plant {p.id}: no generators")
        for gid in p.generators:
            if gid not in gen_set:
                raise CaseSemanticError(f"plant {p.id}: dangling generator reference {gid}")
            if gid in claimed:
                raise CaseSemanticError(f"generator {gid} assigned to plants {claimed[gid]} and {p.id}")
            claimed[gid] = p.id
    for g in case.generators:
        if claimed.get(g.id) != g.plant:
            raise CaseSemanticError(f"generator {g.id}: plant membership mismatch")

    for m in case.monitored_buses:
        if m not in bus_set:
            raise CaseSemanticError(f"monitored bus {m} does not exist")
    for m in case.monitored_branches:
        if m not in set(branch_ids):
            raise CaseSemanticError(f"monitored branch {m} does not exist")

    _check_connected(case)


def _check_connected(case: GridCase) -> None:
    if len(case.buses) == 1:
        return
    adjacency: dict[int, list[int]] = {b.id: [] for b in case.buses}
    for br in case.branches:
        if br.in_service:
            adjacency[br.from_bus].append(br.to_bus)
            adjacency[br.to_bus].append(br.from_bus)
    start = case.buses[0].id
    seen = {start}
    stack = [start]
    while stack:
        for nxt in adjacency[stack.pop()]:
            if nxt not in seen:
                seen.add(nxt)
                stack.append(nxt)
    missing = sorted(set(b.id for b in case.buses) - seen)
    if missing:
        raise CaseSemanticError(f"buses {missing} disconnected from bus {start}")


def _finite(x: float) -> bool:
    return x == x and abs(x) != float("inf")


# --- case file format -------------------------------------------------------

_BUS_FIELDS = ("id", "kind", "v_mag", "v_ang", "p_load", "q_load",
               "g_shunt", "b_shunt", "v_min", "v_max")
_BRANCH_FIELDS = ("id", "from_bus", "to_bus", "r", "x", "b_charge", "s_max", "in_service")
_GEN_FIELDS = ("id", "bus", "p_gen", "q_gen", "p_min", "p_max", "q_min", "q_max", "v_set", "plant")
_PLANT_FIELDS = ("id", "name", "generators")
_TOP_KEYS = ("base_mva", "buses", "branches", "generators", "plants",
             "monitored_buses", "monitored_branches")

_BUS_DEFAULTS: dict[str, Any] = {
    "v_mag": 1.0, "v_ang": 0.0, "p_load": 0.0, "q_load": 0.0,
    "g_shunt": 0.0, "b_shunt": 0.0, "v_min": DEFAULT_V_MIN, "v_max": DEFAULT_V_MAX,
}
_BRANCH_DEFAULTS: dict[str, Any] = {"b_charge": 0.0, "s_max": 1.0, "in_service": True}


def parse_case(text: str) -> GridCase:
    """Parse case-file text into a validated :class:`GridCase`.

    Values in the file are per-unit on the declared ``base_mva`` and are
    stored as given. Raises :class:`CaseSyntaxError` for malformed text (with
    position) and :class:`CaseSemanticError` for invariant violations.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseSyntaxError(exc.msg, exc.lineno, exc.colno) from exc
    if not isinstance(doc, Mapping):
        raise CaseSemanticError("case document must be an object")
    unknown = set(doc) - set(_TOP_KEYS)
    if unknown:
        raise CaseSemanticError(f"unknown top-level keys: {sorted(unknown)}")
    missing = [k for k in _TOP_KEYS if k not in doc]
    if missing:
        raise CaseSemanticError(f"missing top-level keys: {missing}")

    buses = tuple(_parse_component(o, "bus", _BUS_FIELDS, _BUS_DEFAULTS, _make_bus)
                  for o in doc["buses"])
    branches = tuple(_parse_component(o, "branch", _BRANCH_FIELDS, _BRANCH_DEFAULTS, _make_branch)
                     for o in doc["branches"])
    generators = tuple(_parse_component(o, "generator", _GEN_FIELDS, {}, _make_generator)
                       for o in doc["generators"])
    plants = tuple(_parse_component(o, "plant", _PLANT_FIELDS, {}, _make_plant)
                   for o in doc["plants"])
    return GridCase(
        base_mva=float(doc["base_mva"]),
        buses=buses,
        branches=branches,
        generators=generators,
        plants=plants,
        monitored_buses=tuple(int(i) for i in doc["monitored_buses"]),
        monitored_branches=tuple(int(i) for i in doc["monitored_branches"]),
    )


def _parse_component(obj, what, fields, defaults, make):
    if not isinstance(obj, Mapping):
        raise CaseSemanticError(f"each {what} must be an object")
    unknown = set(obj) - set(fields)
    if unknown:
        raise CaseSemanticError(f"{what}: unknown fields {sorted(unknown)}")
    values = {}
    for name in fields:
        if name in obj:
            values[name] = obj[name]
        elif name in defaults:
            values[name] = defaults[name]
        else:
            raise CaseSemanticError(f"{what}: missing field {name!r}")
    try:
        return make(values)
    except (TypeError, ValueError) as exc:
        raise CaseSemanticError(f"{what}: {exc}") from exc


def _make_bus(v) -> Bus:
    return Bus(
        id=int(v["id"]), kind=BusKind(v["kind"]),
        v_mag=float(v["v_mag"]), v_ang=float(v["v_ang"]),
        p_load=float(v["p_load"]), q_load=float(v["q_load"]),
        g_shunt=float(v["g_shunt"]), b_shunt=float(v["b_shunt"]),
        v_min=float(v["v_min"]), v_max=float(v["v_max"]),
    )


def _make_branch(v) -> Branch:
    if not isinstance(v["in_service"], bool):
        raise ValueError("in_service must be a boolean")
    return Branch(
        id=int(v["id"]), from_bus=int(v["from_bus"]), to_bus=int(v["to_bus"]),
        r=float(v["r"]), x=float(v["x"]), b_charge=float(v["b_charge"]),
        s_max=float(v["s_max"]), in_service=v["in_service"],
    )


def _make_generator(v) -> Generator:
    return Generator(
        id=int(v["id"]), bus=int(v["bus"]),
        p_gen=float(v["p_gen"]), q_gen=float(v["q_gen"]),
        p_min=float(v["p_min"]), p_max=float(v["p_max"]),
        q_min=float(v["q_min"]), q_max=float(v["q_max"]),
        v_set=float(v["v_set"]), plant=int(v["plant"]),
    )


def _make_plant(v) -> Plant:
    return Plant(id=int(v["id"]), name=str(v["name"]),
                 generators=tuple(int(g) for g in v["generators"]))


def serialize_case(case: GridCase) -> str:
    """Emit the canonical case-file text; exact inverse of :func:`parse_case`."""
    doc = {
        "base_mva": case.base_mva,
        "buses": [
            {"id": b.id, "kind": b.kind.value, "v_mag": b.v_mag, "v_ang": b.v_ang,
             "p_load": b.p_load, "q_load": b.q_load, "g_shunt": b.g_shunt,
             "b_shunt": b.b_shunt, "v_min": b.v_min, "v_max": b.v_max}
            for b in case.buses
        ],
        "branches": [
            {"id": b.id, "from_bus": b.from_bus, "to_bus": b.to_bus, "r": b.r,
             "x": b.x, "b_charge": b.b_charge, "s_max": b.s_max,
             "in_service": b.in_service}
            for b in case.branches
        ],
        "generators": [
            {"id": g.id, "bus": g.bus, "p_gen": g.p_gen, "q_gen": g.q_gen,
             "p_min": g.p_min, "p_max": g.p_max, "q_min": g.q_min,
             "q_max": g.q_max, "v_set": g.v_set, "plant": g.plant}
            for g in case.generators
        ],
        "plants": [
            {"id": p.id, "name": p.name, "generators": list(p.generators)}
            for p in case.plants
        ],
        "monitored_buses": list(case.monitored_buses),
        "monitored_branches": list(case.monitored_branches),
    }
    return json.dumps(doc, indent=2) + "\n"


def load_case(path: str | Path) -> GridCase:
    return parse_case(Path(path).read_text())


def save_case(case: GridCase, path: str | Path) -> None:
    Path(path).write_text(serialize_case(case))


def bundled_case_names() -> tuple[str, ...]:
    files = resources.files("gridsac") / "cases"
    return tuple(sorted(p.name.removesuffix(".json")
                        for p in files.iterdir() if p.name.endswith(".json")))


def bundled_case(name: str) -> GridCase:
    """Load a case shipped with the package (``case3`` or ``case14``)."""
    ref = resources.files("gridsac") / "cases" / f"{name}.json"
    if not ref.is_file():
        raise KeyError(f"no bundled case {name!r}; available: {bundled_case_names()}")
    return parse_case(ref.read_text())


# --- case derivation --------------------------------------------------------

def rebase(case: GridCase, base_mva: float) -> GridCase:
    """Convert all per-unit quantities to a new MVA base.

    Rebasing to the current base is the identity (per-unit conversion is
    idempotent). Voltages are unchanged; powers scale by old/new and
    impedances by new/old.
    """
    if base_mva <= 0:
        raise ValueError("base_mva must be positive")
    s = case.base_mva / base_mva  # power scale
    z = 1.0 / s                   # impedance scale
    buses = tuple(replace(b, p_load=b.p_load * s, q_load=b.q_load * s,
                          g_shunt=b.g_shunt * s, b_shunt=b.b_shunt * s)
                  for b in case.buses)
    branches = tuple(replace(b, r=b.r * z, x=b.x * z, b_charge=b.b_charge * s,
                             s_max=b.s_max * s)
                     for b in case.branches)
    generators = tuple(replace(g, p_gen=g.p_gen * s, q_gen=g.q_gen * s,
                               p_min=g.p_min * s, p_max=g.p_max * s,
                               q_min=g.q_min * s, q_max=g.q_max * s)
                       for g in case.generators)
    return replace(case, base_mva=base_mva, buses=buses, branches=branches,
                   generators=generators)


def with_plant_setpoints(case: GridCase, setpoints: Mapping[int, float]) -> GridCase:
    """New case with the given per-plant voltage setpoint applied to every
    generator of each listed plant."""
    for pid in setpoints:
        if pid not in case.plant_by_id:
            raise KeyError(f"unknown plant id {pid}")
    generators = tuple(
        replace(g, v_set=float(setpoints[g.plant])) if g.plant in setpoints else g
        for g in case.generators
    )
    return replace(case, generators=generators)


def with_loads(case: GridCase, p_load: Mapping[int, float],
               q_load: Mapping[int, float] | None = None) -> GridCase:
    q_load = q_load if q_load is not None else {}
    buses = tuple(
        replace(b, p_load=float(p_load.get(b.id, b.p_load)),
                q_load=float(q_load.get(b.id, b.q_load)))
        for b in case.buses
    )
    return replace(case, buses=buses)


def with_generation(case: GridCase, p_gen: Mapping[int, float]) -> GridCase:
    generators = tuple(
        replace(g, p_gen=float(p_gen.get(g.id, g.p_gen))) for g in case.generators
    )
    return replace(case, generators=generators)
