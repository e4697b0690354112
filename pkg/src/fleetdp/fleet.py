"""EV and fleet state, the transition function and admissibility checks.

Sign convention for energy deltas: positive charges the battery (energy drawn
from the grid), negative discharges it (energy delivered to the grid).

Constraint levels:

* L0 - homogeneous fleet
* L1 - heterogeneous initial/target SoC and capacities
* L2 - L1 plus site-wide charge/discharge power caps
* L3 - L2 plus at most one charge/discharge reversal per EV per hour window
"""
from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConstraintViolation, DataError

EPS = 1e-9
DEFAULT_SLOT_HOURS = 0.25

ROSTER_HEADER = ["id", "capacity_kwh", "min_soc_kwh", "max_rate_kw", "initial_soc_kwh", "target_soc_kwh"]


class Direction(enum.IntEnum):
    NONE = 0
    CHARGING = 1
    DISCHARGING = -1


class Level(enum.IntEnum):
    L0 = 0
    L1 = 1
    L2 = 2
    L3 = 3


class ViolationKind(str, enum.Enum):
    SOC_UPPER = "SocUpper"
    SOC_LOWER = "SocLower"
    RATE = "RateLimit"
    SITE_CHARGE_CAP = "SiteChargeCap"
    SITE_DISCHARGE_CAP = "SiteDischargeCap"
    REVERSAL = "Reversal"
    DIMENSION = "Dimension"


@dataclass(frozen=True)
class Violation:
    kind: ViolationKind
    ev_id: int | None = None
    detail: str = ""

    def __str__(self) -> str:
        who = f"EV {self.ev_id}" if self.ev_id is not None else "site"
        return f"{self.kind.value} ({who}): {self.detail}"


@dataclass(frozen=True)
class EvSpec:
    """Static limits of one vehicle. Energies in kWh, power in kW."""

    id: int
    capacity_kwh: float
    min_soc_kwh: float
    max_rate_kw: float
    initial_soc_kwh: float
    target_soc_kwh: float

    def __post_init__(self):
        if not (0 <= self.min_soc_kwh <= self.initial_soc_kwh <= self.capacity_kwh):
            raise ValueError(
                f"EV {self.id}: need 0 <= min_soc <= initial_soc <= capacity, got "
                f"{self.min_soc_kwh}, {self.initial_soc_kwh}, {self.capacity_kwh}"
            )
        if not (self.min_soc_kwh <= self.target_soc_kwh <= self.capacity_kwh):
            raise ValueError(f"EV {self.id}: target_soc {self.target_soc_kwh} outside [min_soc, capacity]")
        if not self.max_rate_kw > 0:
            raise ValueError(f"EV {self.id}: max_rate_kw must be positive")

    def step_kwh(self, slot_hours: float = DEFAULT_SLOT_HOURS) -> float:
        """Energy moved by one full-rate slot."""
        return self.max_rate_kw * slot_hours


@dataclass(frozen=True)
class EvState:
    soc_kwh: float
    last_direction: Direction = Direction.NONE
    reversal_used_in_hour: bool = False


@dataclass(frozen=True)
class FleetState:
    slot: int
    ev_states: tuple[EvState, ...]

    @classmethod
    def initial(cls, specs: Sequence[EvSpec]) -> "FleetState":
        return cls(0, tuple(EvState(s.initial_soc_kwh) for s in specs))

    @property
    def socs(self) -> np.ndarray:
        return np.array([e.soc_kwh for e in self.ev_states], dtype=float)


@dataclass(frozen=True)
class ConstraintLevel:
    level: Level = Level.L1
    site_charge_cap_kw: float | None = None
    site_discharge_cap_kw: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "level", Level(self.level))
        for name in ("site_charge_cap_kw", "site_discharge_cap_kw"):
            cap = getattr(self, name)
            if cap is not None and not cap > 0:
                raise ValueError(f"{name} must be positive, got {cap}")
        if self.level >= Level.L2 and (self.site_charge_cap_kw is None or self.site_discharge_cap_kw is None):
            raise ValueError("levels L2 and L3 require both site caps")

    @property
    def has_site_caps(self) -> bool:
        return self.level >= Level.L2

    @property
    def caps_reversals(self) -> bool:
        return self.level >= Level.L3

    def check_fleet(self, specs: Sequence[EvSpec]) -> None:
        """Raise ValueError if the roster is inconsistent with the level."""
        if self.level == Level.L0 and specs:
            first = replace(specs[0], id=0)
            for s in specs[1:]:
                if replace(s, id=0) != first:
                    raise ValueError("level L0 requires identical EV specs across the fleet")


def slots_per_hour(slot_hours: float) -> int:
    sph = round(1.0 / slot_hours)
    if sph < 1 or abs(sph * slot_hours - 1.0) > 1e-9:
        raise ValueError(f"slot_hours={slot_hours} does not divide one hour")
    return sph


def _effective_flag(ev: EvState, slot: int, sph: int) -> bool:
    # the per-hour reversal budget is refreshed at aligned window starts
    return ev.reversal_used_in_hour and slot % sph != 0


def is_reversal(ev: EvState, delta: float) -> bool:
    if abs(delta) <= EPS or ev.last_direction == Direction.NONE:
        return False
    return (delta > 0) != (ev.last_direction == Direction.CHARGING)


def is_admissible(
    state: FleetState,
    action: Sequence[float],
    specs: Sequence[EvSpec],
    level: ConstraintLevel,
    slot_hours: float = DEFAULT_SLOT_HOURS,
) -> tuple[bool, list[Violation]]:
    """Check one per-EV action against all constraints of ``level``.

    Returns ``(ok, violations)``; ``ok`` is true iff the list is empty.
    """
    deltas = np.asarray(action, dtype=float)
    if deltas.shape != (len(specs),) or len(state.ev_states) != len(specs):
        return False, [Violation(ViolationKind.DIMENSION, None, f"expected {len(specs)} deltas, got {deltas.shape}")]

    sph = slots_per_hour(slot_hours)
    out: list[Violation] = []
    for spec, ev, delta in zip(specs, state.ev_states, deltas):
        r = spec.step_kwh(slot_hours)
        if abs(delta) > r + EPS:
            out.append(Violation(ViolationKind.RATE, spec.id, f"|{delta}| > {r}"))
        new = ev.soc_kwh + delta
        if new > spec.capacity_kwh + EPS:
            out.append(Violation(ViolationKind.SOC_UPPER, spec.id, f"{new} > {spec.capacity_kwh}"))
        if new < spec.min_soc_kwh - EPS:
            out.append(Violation(ViolationKind.SOC_LOWER, spec.id, f"{new} < {spec.min_soc_kwh}"))
        if level.caps_reversals and is_reversal(ev, delta) and _effective_flag(ev, state.slot, sph):
            out.append(Violation(ViolationKind.REVERSAL, spec.id, f"second reversal in hour window at slot {state.slot}"))

    if level.has_site_caps:
        charge = math.fsum(float(x) for x in deltas if x > 0)
        discharge = math.fsum(float(-x) for x in deltas if x < 0)
        cap_c = level.site_charge_cap_kw * slot_hours
        cap_d = level.site_discharge_cap_kw * slot_hours
        if charge > cap_c + EPS:
            out.append(Violation(ViolationKind.SITE_CHARGE_CAP, None, f"{charge} kWh > {cap_c} kWh"))
        if discharge > cap_d + EPS:
            out.append(Violation(ViolationKind.SITE_DISCHARGE_CAP, None, f"{discharge} kWh > {cap_d} kWh"))
    return not out, out


def transition(
    state: FleetState,
    action: Sequence[float],
    specs: Sequence[EvSpec],
    level: ConstraintLevel,
    slot_hours: float = DEFAULT_SLOT_HOURS,
) -> FleetState:
    """Apply ``action`` and return the state at the next slot.

    Raises ConstraintViolation when the action is not admissible.
    """
    ok, violations = is_admissible(state, action, specs, level, slot_hours)
    if not ok:
        raise ConstraintViolation(violations)
    sph = slots_per_hour(slot_hours)
    new_states = []
    for ev, delta in zip(state.ev_states, np.asarray(action, dtype=float)):
        flag = _effective_flag(ev, state.slot, sph)
        direction = ev.last_direction
        if abs(delta) > EPS:
            if is_reversal(ev, delta):
                flag = True
            direction = Direction.CHARGING if delta > 0 else Direction.DISCHARGING
        new_states.append(EvState(ev.soc_kwh + float(delta), direction, flag))
    return FleetState(state.slot + 1, tuple(new_states))


def terminal_ok(state: FleetState, specs: Sequence[EvSpec], n_slots: int) -> bool:
    if state.slot != n_slots:
        raise ValueError(f"terminal check at slot {state.slot}, horizon is {n_slots}")
    return all(ev.soc_kwh >= s.target_soc_kwh - EPS for ev, s in zip(state.ev_states, specs))


def blocked_charge_slots(ev: EvState, slot: int, slots_remaining: int, level: ConstraintLevel, sph: int) -> int:
    """Slots (from ``slot`` on) in which an L3 reversal lock forbids charging."""
    if not level.caps_reversals or ev.last_direction != Direction.DISCHARGING:
        return 0
    if not _effective_flag(ev, slot, sph):
        return 0
    return min(slots_remaining, sph - slot % sph)


def reachability_bound(
    ev_state: EvState,
    spec: EvSpec,
    slots_remaining: int,
    level: ConstraintLevel,
    slot_hours: float = DEFAULT_SLOT_HOURS,
    slot: int | None = None,
) -> float:
    """Upper bound on the SoC reachable after ``slots_remaining`` slots.

    ``min(capacity, soc + usable * r)``. At L3, when ``slot`` is given and
    the EV already spent its reversal while discharging in the current
    hour window, the rest of that window cannot be used for charging.
    The solvers use the tighter lattice ceiling of FleetLattice instead.
    """
    if slots_remaining < 0:
        raise ValueError("slots_remaining must be non-negative")
    r = spec.step_kwh(slot_hours)
    usable = slots_remaining
    if slot is not None:
        usable -= blocked_charge_slots(ev_state, slot, slots_remaining, level, slots_per_hour(slot_hours))
    return min(spec.capacity_kwh, ev_state.soc_kwh + usable * r)


def read_roster(path: str | Path) -> list[EvSpec]:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ROSTER_HEADER:
            raise DataError(f"{path}: expected header {','.join(ROSTER_HEADER)}")
        specs = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                specs.append(EvSpec(int(row[0]), *(float(x) for x in row[1:6])))
            except (ValueError, IndexError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    return specs


def write_roster(specs: Sequence[EvSpec], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ROSTER_HEADER)
        for s in specs:
            w.writerow([s.id, repr(s.capacity_kwh), repr(s.min_soc_kwh), repr(s.max_rate_kw),
                        repr(s.initial_soc_kwh), repr(s.target_soc_kwh)])


@dataclass
class FleetLattice:
    """Integer-step view of a fleet used by the solvers.

    SoC of EV j is ``initial[j] + steps[j] * step[j]``; the DP never leaves
    this lattice, so all bound checks reduce to integer comparisons.
    """

    specs: Sequence[EvSpec]
    level: ConstraintLevel
    slot_hours: float = DEFAULT_SLOT_HOURS
    ids: np.ndarray = field(init=False)
    step: np.ndarray = field(init=False)
    initial: np.ndarray = field(init=False)
    up: np.ndarray = field(init=False)
    down: np.ndarray = field(init=False)
    target: np.ndarray = field(init=False)

    def __post_init__(self):
        s = self.specs
        self.sph = slots_per_hour(self.slot_hours)
        self.d = len(s)
        self.ids = np.array([e.id for e in s], dtype=np.int64)
        self.step = np.array([e.step_kwh(self.slot_hours) for e in s], dtype=float)
        self.initial = np.array([e.initial_soc_kwh for e in s], dtype=float)
        cap = np.array([e.capacity_kwh for e in s], dtype=float)
        lo = np.array([e.min_soc_kwh for e in s], dtype=float)
        tgt = np.array([e.target_soc_kwh for e in s], dtype=float)
        self.up = np.floor((cap - self.initial) / self.step + EPS).astype(np.int64)
        self.down = np.floor((self.initial - lo) / self.step + EPS).astype(np.int64)
        self.target = np.maximum(np.ceil((tgt - self.initial) / self.step - EPS).astype(np.int64), -self.down)
        self.uniform_step = bool(self.d == 0 or np.all(self.step == self.step[0]))
        rmax = float(self.step.max()) if self.d else 1.0
        if self.level.has_site_caps:
            self.cap_charge = self.level.site_charge_cap_kw * self.slot_hours
            self.cap_discharge = self.level.site_discharge_cap_kw * self.slot_hours
            # EVs that can always charge together; exact for a uniform fleet
            self.max_chargers = min(self.d, int(math.floor(self.cap_charge / rmax + EPS)))
        else:
            self.cap_charge = math.inf
            self.cap_discharge = math.inf
            self.max_chargers = self.d

    def socs(self, steps: np.ndarray) -> np.ndarray:
        return self.initial + steps * self.step

    def target_reachable(self) -> bool:
        """Every target lies on or below the highest lattice point under capacity."""
        return bool(np.all(self.target <= self.up))

    def encode(self, state: FleetState) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        steps = np.rint((state.socs - self.initial) / self.step).astype(np.int64) if self.d else np.zeros(0, np.int64)
        dirs = np.array([int(e.last_direction) for e in state.ev_states], dtype=np.int8)
        flags = np.array([e.reversal_used_in_hour for e in state.ev_states], dtype=bool)
        return steps, dirs, flags

    def decode(self, slot: int, steps: np.ndarray, dirs: np.ndarray, flags: np.ndarray) -> FleetState:
        socs = self.socs(steps)
        return FleetState(slot, tuple(
            EvState(float(socs[j]), Direction(int(dirs[j])), bool(flags[j])) for j in range(self.d)
        ))
