"""Ground truth for small instances and an LP-format MILP export.

``enumerate_schedules`` is brute force: every sequence of per-EV actions in
{-r, 0, +r} is generated (prefixes that already break a constraint are
dropped), and the cheapest sequence meeting every target wins. It shares
no code with the DP solvers beyond the scenario types and the stage-cost
definition used for the final reported objective.
"""
from __future__ import annotations

import hashlib
import itertools
import math
from pathlib import Path

import numpy as np

from . import __version__
from .dp import Schedule
from .errors import BudgetExceeded, Infeasible
from .fleet import EPS, Level, slots_per_hour
from .market import Scenario, sig9

ENUMERATION_BUDGET = 10**7
_CHUNK_ROWS = 1 << 20


def sequence_count(scenario: Scenario) -> int:
    return 3 ** (scenario.n_slots * scenario.d)


def enumerate_schedules(scenario: Scenario, budget: int = ENUMERATION_BUDGET) -> tuple[float, Schedule]:
    """Global minimum over all admissible action sequences.

    Ties go to the lexicographically smallest sequence with per-EV order
    (-r, 0, +r). Raises BudgetExceeded when 3^(N*d) > ``budget`` and
    Infeasible when no sequence meets every target.
    """
    if sequence_count(scenario) > budget:
        raise BudgetExceeded(f"3^({scenario.n_slots}*{scenario.d}) sequences exceed budget {budget}")
    d, n = scenario.d, scenario.n_slots
    specs = scenario.fleet
    rate = np.array([s.max_rate_kw * scenario.slot_hours for s in specs])
    cap = np.array([s.capacity_kwh for s in specs])
    floor = np.array([s.min_soc_kwh for s in specs])
    target = np.array([s.target_soc_kwh for s in specs])
    sph = slots_per_hour(scenario.slot_hours)
    lvl = scenario.level

    moves = np.array(list(itertools.product((-1, 0, 1), repeat=d)), dtype=np.int8).reshape(-1, d)
    deltas = moves * rate
    if lvl.level >= Level.L2:
        ok = (np.where(deltas > 0, deltas, 0).sum(1) <= lvl.site_charge_cap_kw * scenario.slot_hours + EPS) & (
            np.where(deltas < 0, -deltas, 0).sum(1) <= lvl.site_discharge_cap_kw * scenario.slot_hours + EPS)
        moves, deltas = moves[ok], deltas[ok]
    net_delta = np.array([math.fsum(row) for row in deltas.tolist()]) if d else np.zeros(len(moves))
    rho, sigma, vol = (np.asarray(x, dtype=float) for x in (scenario.rho, scenario.sigma, scenario.volumes))

    best = [math.inf, None]

    def search(k, soc, dirs, flags, cost, hist):
        if k == n:
            done = np.all(soc >= target - EPS, axis=1)
            if not done.any():
                return
            idx = np.flatnonzero(done)
            i = idx[np.argmin(cost[idx])]
            if cost[i] < best[0]:
                best[0], best[1] = float(cost[i]), hist[i].copy()
            return
        rows = len(soc)
        if rows * len(moves) > _CHUNK_ROWS and rows > 1:
            step = max(1, _CHUNK_ROWS // len(moves))
            for a in range(0, rows, step):
                sl = slice(a, a + step)
                search(k, soc[sl], dirs[sl], flags[sl], cost[sl], hist[sl])
            return
        new_soc = soc[:, None, :] + deltas[None, :, :]
        ok = np.all((new_soc <= cap + EPS) & (new_soc >= floor - EPS), axis=2)
        eff = flags & (k % sph != 0)
        mv = moves[None, :, :]
        reversal = (mv != 0) & (dirs[:, None, :] != 0) & (mv != dirs[:, None, :])
        if lvl.level >= Level.L3:
            ok &= ~np.any(reversal & eff[:, None, :], axis=2)
        p, a = np.nonzero(ok)
        if len(p) == 0:
            return
        net = vol[k] + net_delta[a]
        g = rho[k] * np.maximum(net, 0.0) + sigma[k] * np.maximum(-net, 0.0)
        moving = moves[a] != 0
        new_dirs = np.where(moving, moves[a], dirs[p]).astype(np.int8)
        new_flags = eff[p] | reversal[p, a]
        new_hist = np.concatenate([hist[p], a[:, None].astype(np.int32)], axis=1)
        search(k + 1, new_soc[p, a], new_dirs, new_flags, cost[p] + g, new_hist)

    search(0,
           np.array([[s.initial_soc_kwh for s in specs]], dtype=float).reshape(1, d),
           np.zeros((1, d), np.int8), np.zeros((1, d), bool), np.zeros(1), np.zeros((1, 0), np.int32))
    if best[1] is None:
        raise Infeasible("no admissible action sequence meets every target")
    schedule = Schedule.from_actions(deltas[best[1]].reshape(n, d), scenario)
    return schedule.objective_eur, schedule


# -- MILP export ---------------------------------------------------------------

def _num(x: float) -> str:
    x = float(x)
    if x == 0:
        return "0"
    return repr(x)


def _term(coef: float, name: str) -> str:
    coef = float(coef)
    sign = "-" if coef < 0 else "+"
    return f"{sign} {_num(abs(coef))} {name}"


def scenario_digest(scenario: Scenario) -> str:
    return hashlib.sha256(scenario.to_json().encode("utf-8")).hexdigest()


def milp_counts(d: int, n: int, level: Level) -> dict[str, int]:
    """Closed-form variable and row counts of the exported model."""
    level = Level(level)
    windows = 0
    if level >= Level.L3 and n > 1:
        sph = 4
        windows = len({k // sph for k in range(1, n)})
    return {
        "action_vars": 2 * d * n,
        "soc_vars": d * n,
        "market_vars": 2 * n,
        "binaries": 2 * d * n + (d * (n - 1) if level >= Level.L3 else 0),
        "soc_rows": d * n,
        "link_rows": 3 * d * n,
        "balance_rows": n,
        "site_rows": 2 * n if level >= Level.L2 else 0,
        "switch_rows": 2 * d * (n - 1) + d * windows if level >= Level.L3 else 0,
    }


def emit_milp_lp(scenario: Scenario, out_path: str | Path) -> Path:
    """Write the scheduling MILP in CPLEX LP format.

    Charge/discharge energies are continuous in [0, r] and gated by binary
    direction indicators; ``buy_k``/``exc_k`` linearize the stage cost. At
    L3 a switch binary per EV and slot marks adjacent direction changes,
    at most one per aligned hour window.
    """
    d, n = scenario.d, scenario.n_slots
    sph = slots_per_hour(scenario.slot_hours)
    lvl = scenario.level
    ids = [s.id for s in scenario.fleet]
    counts = milp_counts(d, n, lvl.level) if sph == 4 else None
    out: list[str] = [
        "\\ fleetdp EV fleet scheduling MILP",
        f"\\ generator: fleetdp {__version__}",
        f"\\ scenario sha256: {scenario_digest(scenario)}",
        f"\\ d={d} N={n} level=L{int(lvl.level)} slot_hours={sig9(scenario.slot_hours)}",
    ]
    if counts:
        out.append("\\ counts: " + " ".join(f"{k}={v}" for k, v in counts.items()))
        out.append("\\ formulas: action_vars=2dN soc_vars=dN market_vars=2N binaries=2dN(+d(N-1) at L3)")
        out.append("\\           soc_rows=dN link_rows=3dN balance_rows=N site_rows=2N at L2+")
        out.append("\\           switch_rows=2d(N-1)+d*windows at L3")
    out.append("Minimize")
    out.append(" obj:")
    for k in range(n):
        out.append(f"  {_term(scenario.rho[k], f'buy_{k}')}")
        out.append(f"  {_term(scenario.sigma[k], f'exc_{k}')}")
    out.append("Subject To")
    for k in range(n):
        out.append(f" bal_{k}:")
        out.append(f"  + 1 buy_{k}")
        out.append(f"  - 1 exc_{k}")
        for j in ids:
            out.append(f"  - 1 ch_{j}_{k}")
            out.append(f"  + 1 dc_{j}_{k}")
        out.append(f"  = {_num(scenario.volumes[k])}")
    for s in scenario.fleet:
        j = s.id
        r = s.max_rate_kw * scenario.slot_hours
        for k in range(n):
            prev = "" if k == 0 else f" - 1 s_{j}_{k}"
            rhs = s.initial_soc_kwh if k == 0 else 0.0
            out.append(f" soc_{j}_{k}: + 1 s_{j}_{k + 1}{prev} - 1 ch_{j}_{k} + 1 dc_{j}_{k} = {_num(rhs)}")
        for k in range(n):
            out.append(f" lc_{j}_{k}: + 1 ch_{j}_{k} - {_num(r)} uc_{j}_{k} <= 0")
            out.append(f" ld_{j}_{k}: + 1 dc_{j}_{k} - {_num(r)} ud_{j}_{k} <= 0")
            out.append(f" x_{j}_{k}: + 1 uc_{j}_{k} + 1 ud_{j}_{k} <= 1")
    if lvl.level >= Level.L2:
        cap_c = lvl.site_charge_cap_kw * scenario.slot_hours
        cap_d = lvl.site_discharge_cap_kw * scenario.slot_hours
        for k in range(n):
            out.append(f" capc_{k}:")
            out.extend(f"  + 1 ch_{j}_{k}" for j in ids)
            out.append(f"  <= {_num(cap_c)}")
            out.append(f" capd_{k}:")
            out.extend(f"  + 1 dc_{j}_{k}" for j in ids)
            out.append(f"  <= {_num(cap_d)}")
    if lvl.level >= Level.L3:
        for j in ids:
            for k in range(1, n):
                out.append(f" swa_{j}_{k}: + 1 sw_{j}_{k} - 1 uc_{j}_{k} - 1 ud_{j}_{k - 1} >= -1")
                out.append(f" swb_{j}_{k}: + 1 sw_{j}_{k} - 1 ud_{j}_{k} - 1 uc_{j}_{k - 1} >= -1")
            windows: dict[int, list[int]] = {}
            for k in range(1, n):
                windows.setdefault(k // sph, []).append(k)
            for h, ks in windows.items():
                out.append(f" hr_{j}_{h}: " + " ".join(f"+ 1 sw_{j}_{k}" for k in ks) + " <= 1")
    out.append("Bounds")
    for s in scenario.fleet:
        j = s.id
        r = s.max_rate_kw * scenario.slot_hours
        for k in range(n):
            out.append(f" 0 <= ch_{j}_{k} <= {_num(r)}")
            out.append(f" 0 <= dc_{j}_{k} <= {_num(r)}")
        for k in range(1, n + 1):
            lo = max(s.min_soc_kwh, s.target_soc_kwh) if k == n else s.min_soc_kwh
            out.append(f" {_num(lo)} <= s_{j}_{k} <= {_num(s.capacity_kwh)}")
    for k in range(n):
        out.append(f" buy_{k} >= 0")
        out.append(f" exc_{k} >= 0")
    out.append("Binaries")
    for j in ids:
        for k in range(n):
            out.append(f" uc_{j}_{k}")
            out.append(f" ud_{j}_{k}")
        if lvl.level >= Level.L3:
            out.extend(f" sw_{j}_{k}" for k in range(1, n))
    out.append("End")
    path = Path(out_path)
    path.write_text("\n".join(out) + "\n", encoding="utf-8")
    return path


def random_small_scenario(seed: int, d: int, n_slots: int, level: int | Level):
    """Random instance sized for enumeration, with targets reachable in ``n_slots``.

    Prices are continuous draws (no structural ties); volumes are on the
    order of the fleet's per-slot energy so the C/I/D choice matters.
    """
    from .fleet import ConstraintLevel, EvSpec

    level = Level(level)
    rng = np.random.default_rng(seed)
    rate, slot_hours = 10.0, 0.25
    step = rate * slot_hours
    fleet = []
    shared = None
    for j in range(d):
        if level == Level.L0 and shared is not None:
            fleet.append(EvSpec(j, *shared))
            continue
        cap = sig9(rng.uniform(40.0, 100.0))
        lo = 10.0
        init = sig9(rng.uniform(lo, min(cap, lo + 6 * step)))
        up = math.floor((cap - init) / step + 1e-9)
        down = math.floor((init - lo) / step + 1e-9)
        m = int(rng.integers(-min(down, 1), min(up, n_slots // 2) + 1))
        target = max(lo, init + m * step - 0.1)
        shared = (cap, lo, rate, init, sig9(target))
        fleet.append(EvSpec(j, *shared))
    rho = [sig9(x) for x in rng.uniform(0.02, 0.12, n_slots)]
    sigma = [sig9(x) for x in rng.uniform(0.01, 0.08, n_slots)]
    volumes = [sig9(x) for x in rng.normal(0.0, 1.5 * step * d, n_slots)]
    if level >= Level.L2:
        cap_kw = sig9(max(rate, rng.uniform(0.4, 0.9) * rate * d))
        lvl = ConstraintLevel(level, cap_kw, cap_kw)
    else:
        lvl = ConstraintLevel(level)
    return Scenario(n_slots, slot_hours, rho, sigma, volumes, fleet, lvl, seed)
