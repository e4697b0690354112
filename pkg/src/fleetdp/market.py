"""Scenario data, the stage cost and scenario ingestion/generation."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from datetime import datetime
from decimal import ROUND_FLOOR, Decimal
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError, EmptyScenario
from .fleet import DEFAULT_SLOT_HOURS, ConstraintLevel, EvSpec, Level, slots_per_hour

SCENARIO_VERSION = 1
SIGMA_RATIO = 0.5
SIGMA_FLOOR = 1e-4  # EUR/kWh, keeps the excess penalty positive on zero-price slots
SITE_CAP_FRACTION = 0.9


def sig9(x: float) -> float:
    """Round to 9 significant digits (the scenario file precision)."""
    return float(f"{float(x):.9g}")


def sig9_floor(x: float) -> float:
    """Largest 9-significant-digit value not above ``x``."""
    y = sig9(x)
    return y if y <= x else float(Decimal(repr(x)).quantize(Decimal(f"1e{Decimal(repr(x)).adjusted() - 8}"), ROUND_FLOOR))


@dataclass(frozen=True)
class Scenario:
    n_slots: int
    slot_hours: float
    rho: tuple[float, ...]
    sigma: tuple[float, ...]
    volumes: tuple[float, ...]
    fleet: tuple[EvSpec, ...]
    level: ConstraintLevel
    seed: int = 0

    def __post_init__(self):
        for name in ("rho", "sigma", "volumes", "fleet"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        n = self.n_slots
        if n < 1:
            raise ValueError("n_slots must be >= 1")
        for name in ("rho", "sigma", "volumes"):
            vec = getattr(self, name)
            if len(vec) != n:
                raise ValueError(f"{name} has length {len(vec)}, expected {n}")
            if not all(math.isfinite(x) for x in vec):
                raise ValueError(f"{name} contains non-finite values")
        if min(self.rho) < 0:
            raise ValueError("rho must be non-negative")
        if min(self.sigma) < 0:
            raise ValueError("sigma must be non-negative")
        slots_per_hour(self.slot_hours)
        ids = [s.id for s in self.fleet]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate EV ids in fleet")
        self.level.check_fleet(self.fleet)

    @property
    def d(self) -> int:
        return len(self.fleet)

    # -- serialization -------------------------------------------------
    def to_dict(self) -> dict:
        lvl = self.level
        return {
            "version": SCENARIO_VERSION,
            "n_slots": self.n_slots,
            "slot_hours": sig9(self.slot_hours),
            "rho": [sig9(x) for x in self.rho],
            "sigma": [sig9(x) for x in self.sigma],
            "volumes": [sig9(x) for x in self.volumes],
            "fleet": [
                {
                    "id": s.id,
                    "capacity_kwh": sig9(s.capacity_kwh),
                    "min_soc_kwh": sig9(s.min_soc_kwh),
                    "max_rate_kw": sig9(s.max_rate_kw),
                    "initial_soc_kwh": sig9(s.initial_soc_kwh),
                    "target_soc_kwh": sig9(s.target_soc_kwh),
                }
                for s in self.fleet
            ],
            "level": {
                "level": int(lvl.level),
                "site_charge_cap_kw": None if lvl.site_charge_cap_kw is None else sig9(lvl.site_charge_cap_kw),
                "site_discharge_cap_kw": None if lvl.site_discharge_cap_kw is None else sig9(lvl.site_discharge_cap_kw),
            },
            "seed": self.seed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "Scenario":
        try:
            if data.get("version", SCENARIO_VERSION) != SCENARIO_VERSION:
                raise DataError(f"unsupported scenario version {data.get('version')}")
            lvl = data["level"]
            return cls(
                n_slots=int(data["n_slots"]),
                slot_hours=float(data["slot_hours"]),
                rho=[float(x) for x in data["rho"]],
                sigma=[float(x) for x in data["sigma"]],
                volumes=[float(x) for x in data["volumes"]],
                fleet=[EvSpec(**{**s, "id": int(s["id"])}) for s in data["fleet"]],
                level=ConstraintLevel(Level(lvl["level"]), lvl.get("site_charge_cap_kw"), lvl.get("site_discharge_cap_kw")),
                seed=int(data.get("seed", 0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"invalid scenario: {exc}") from exc

    @classmethod
    def from_json(cls, text: str) -> "Scenario":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DataError(f"scenario JSON: {exc}") from exc
        return cls.from_dict(data)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Scenario":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise DataError(f"cannot read scenario {path}: {exc}") from exc
        return cls.from_json(text)


@dataclass
class CostBreakdown:
    total_eur: float
    per_slot: list[tuple[float, float, float]] = field(default_factory=list)  # (bought, excess, cost)


def stage_cost(k: int, action_sum_kwh: float, scenario: Scenario) -> tuple[float, float, float]:
    """Cost of slot ``k`` given the fleet's net energy delta.

    Returns ``(cost_eur, bought_kwh, excess_kwh)``.
    """
    if not 0 <= k < scenario.n_slots:
        raise IndexError(f"slot {k} outside [0, {scenario.n_slots})")
    net = scenario.volumes[k] + action_sum_kwh
    bought = max(0.0, net)
    excess = -min(0.0, net)
    return scenario.rho[k] * bought + scenario.sigma[k] * excess, bought, excess


def total_cost(schedule, scenario: Scenario) -> CostBreakdown:
    """Sum of stage costs over the horizon.

    ``schedule`` is anything with an ``actions`` attribute or an N x d array.
    Sums use ``math.fsum`` so the result is independent of EV order.
    """
    actions = np.asarray(getattr(schedule, "actions", schedule), dtype=float)
    if actions.ndim != 2 or actions.shape != (scenario.n_slots, scenario.d):
        raise ValueError(f"schedule shape {actions.shape} != ({scenario.n_slots}, {scenario.d})")
    per_slot = []
    for k in range(scenario.n_slots):
        cost, bought, excess = stage_cost(k, math.fsum(actions[k].tolist()), scenario)
        per_slot.append((bought, excess, cost))
    return CostBreakdown(math.fsum(c for _, _, c in per_slot), per_slot)


def ingest_prices(csv_path: str | Path, granularity: str = "quarter") -> list[float]:
    """Read a ``timestamp,price_eur_per_mwh`` file and return EUR/kWh per slot.

    Hourly files are expanded to four quarter-hour slots per row.
    """
    if granularity not in ("hourly", "quarter"):
        raise ValueError("granularity must be 'hourly' or 'quarter'")
    path = Path(csv_path)
    prices: list[float] = []
    with path.open(newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or not "".join(row).strip():
                continue
            if lineno == 1 and row[0].strip() == "timestamp":
                continue
            try:
                if len(row) != 2:
                    raise ValueError(f"expected 2 columns, got {len(row)}")
                datetime.fromisoformat(row[0].strip())
                value = float(row[1])
                if math.isnan(value) or math.isinf(value):
                    raise ValueError("price is not finite")
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            prices.extend([value / 1000.0] * (4 if granularity == "hourly" else 1))
    if not prices:
        raise EmptyScenario(f"{path}: no price rows")
    return prices


def synthetic_prices(n: int, rng: np.random.Generator) -> np.ndarray:
    phase = rng.uniform(0.0, 2 * np.pi)
    k = np.arange(n)
    rho = 0.06 + 0.03 * np.sin(2 * np.pi * k / n + phase) + rng.normal(0.0, 0.005, n)
    return np.maximum(rho, 0.0)


def synthetic_volumes(n: int, d: int, rng: np.random.Generator) -> np.ndarray:
    phase = rng.uniform(0.0, 2 * np.pi)
    k = np.arange(n)
    return d * (0.8 * np.sin(2 * np.pi * k / n + phase) + rng.normal(0.0, 0.2, n))


def generate_fleet(level: Level, d: int, rng: np.random.Generator, slot_hours: float = DEFAULT_SLOT_HOURS) -> list[EvSpec]:
    capacity, floor_soc, rate = 100.0, 10.0, 10.0
    step = rate * slot_hours
    fleet = []
    for j in range(d):
        if level == Level.L0:
            initial, target = 30.0, 80.0
        else:
            initial = sig9(rng.uniform(10.0, 50.0))
            target = sig9(rng.uniform(70.0, 100.0))
        # targets must sit on a lattice point the EV can actually reach
        top = initial + math.floor((capacity - initial) / step + 1e-9) * step
        target = min(target, sig9_floor(top))
        fleet.append(EvSpec(j, capacity, floor_soc, rate, initial, target))
    return fleet


def site_level(level: Level, fleet: Sequence[EvSpec]) -> ConstraintLevel:
    if level < Level.L2:
        return ConstraintLevel(level)
    cap = sig9(SITE_CAP_FRACTION * sum(s.max_rate_kw for s in fleet))
    return ConstraintLevel(level, cap, cap)


def generate_scenario(
    level: int | Level,
    d: int,
    n_slots: int,
    seed: int,
    *,
    prices: Sequence[float] | None = None,
    slot_hours: float = DEFAULT_SLOT_HOURS,
) -> Scenario:
    """Deterministic synthetic scenario.

    Fleet: 100 kWh batteries, 10 kWh floor, 10 kW rate; L0 starts every EV
    at 30 kWh with an 80 kWh target, L1+ draws initial SoC from U(10, 50)
    and target from U(70, 100). L2+ adds site caps at 90 % of the fleet
    rate. When ``prices`` is given (EUR/kWh, length >= n_slots) it replaces
    the synthetic price curve; negative prices are clipped to zero.
    """
    if d < 1 or n_slots < 1:
        raise ValueError("need d >= 1 and n_slots >= 1")
    level = Level(level)
    rng = np.random.default_rng(seed)
    fleet = generate_fleet(level, d, rng, slot_hours)
    rho = synthetic_prices(n_slots, rng)
    if prices is not None:
        if len(prices) < n_slots:
            raise DataError(f"price trace has {len(prices)} slots, need {n_slots}")
        rho = np.maximum(np.asarray(prices[:n_slots], dtype=float), 0.0)
    volumes = synthetic_volumes(n_slots, d, rng)
    rho = [sig9(x) for x in rho]
    sigma = [sig9(max(SIGMA_RATIO * x, SIGMA_FLOOR)) for x in rho]
    return Scenario(
        n_slots=n_slots,
        slot_hours=slot_hours,
        rho=rho,
        sigma=sigma,
        volumes=[sig9(x) for x in volumes],
        fleet=fleet,
        level=site_level(level, fleet),
        seed=seed,
    )
