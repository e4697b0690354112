"""Backward dynamic programming over fleet states.

Two solvers share one layered engine:

* ``solve_exact`` evaluates every per-EV action in {-r, 0, +r}^d and is
  exponential in the fleet size, so it is guarded by size limits.
* ``solve_approx`` only evaluates the three aggregate actions C / I / D,
  each expanded to a per-EV action by the lowest-battery-first rule.

Both build the graph of states reachable from the initial state slot by
slot, then run the Bellman recursion backwards from the terminal slot.
States are keyed by their integer SoC offsets (plus direction and
reversal bookkeeping at L3), so converging paths are merged.
"""
from __future__ import annotations

import csv
import enum
import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import Infeasible, SizeLimit
from .fleet import EPS, FleetLattice, FleetState, Level
from .market import CostBreakdown, Scenario, stage_cost, total_cost

D_MAX_EXACT = 4
N_MAX_EXACT = 12
# layer width of the restricted DP; None disables the beam
BEAM_WIDTH = 32


class AggregateAction(str, enum.Enum):
    C = "C"
    I = "I"  # noqa: E741
    D = "D"

    @property
    def index(self) -> int:
        return _KIND_ORDER.index(self)

    @classmethod
    def from_index(cls, i: int) -> "AggregateAction":
        return _KIND_ORDER[i]


# evaluation and tie-break order everywhere
_KIND_ORDER = (AggregateAction.C, AggregateAction.I, AggregateAction.D)


@dataclass
class Schedule:
    actions: np.ndarray  # N x d, kWh per slot, + charges
    aggregate_labels: list[AggregateAction] | None
    objective_eur: float
    costs: CostBreakdown
    ev_ids: list[int] = field(default_factory=list)

    @classmethod
    def from_actions(cls, actions, scenario: Scenario, labels=None) -> "Schedule":
        actions = np.asarray(actions, dtype=float)
        costs = total_cost(actions, scenario)
        return cls(actions, None if labels is None else list(labels), costs.total_eur, costs,
                   [s.id for s in scenario.fleet])

    def write_csv(self, path: str | Path) -> None:
        """Write ``slot,ev_id,delta_kwh,aggregate_label`` rows plus a JSON sidecar."""
        path = Path(path)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["slot", "ev_id", "delta_kwh", "aggregate_label"])
            for k, row in enumerate(self.actions):
                label = self.aggregate_labels[k].value if self.aggregate_labels else ""
                for ev_id, delta in zip(self.ev_ids, row):
                    w.writerow([k, ev_id, repr(float(delta) + 0.0), label])
        sidecar = {
            "objective_eur": self.objective_eur,
            "per_slot": [
                {"slot": k, "bought_kwh": b, "excess_kwh": e, "cost_eur": c}
                for k, (b, e, c) in enumerate(self.costs.per_slot)
            ],
        }
        path.with_suffix(".json").write_text(json.dumps(sidecar, indent=1) + "\n", encoding="utf-8")


# -- lattice node helpers --------------------------------------------------

@dataclass
class Node:
    steps: np.ndarray
    dirs: np.ndarray
    flags: np.ndarray


def _effective_flags(lat: FleetLattice, slot: int, flags: np.ndarray) -> np.ndarray:
    if not lat.level.caps_reversals or slot % lat.sph == 0:
        return np.zeros_like(flags)
    return flags


def _blocked(lat: FleetLattice, slot: int, remaining: int, dirs: np.ndarray, eff: np.ndarray) -> np.ndarray:
    """Slots from ``slot`` on in which each EV is locked out of charging."""
    if not lat.level.caps_reversals or slot % lat.sph == 0:
        return np.zeros(lat.d, dtype=np.int64)
    left = min(remaining, lat.sph - slot % lat.sph)
    return np.where((dirs == -1) & eff, left, 0)


def _need(lat: FleetLattice, steps: np.ndarray) -> np.ndarray:
    return np.maximum(lat.target - steps, 0)


def charge_feasible(lat: FleetLattice, n_slots: int, slot: int, node: Node) -> bool:
    """Can every EV still reach its target from ``node``?

    Sufficient test for charge scheduling with at most ``max_chargers``
    EVs per slot: each EV's missing steps fit in its unlocked slots, and
    the fleet total fits in the slots after the longest lock. Without
    locks (always the case before L3 reversals happen) it is also
    necessary.
    """
    remaining = n_slots - slot
    eff = _effective_flags(lat, slot, node.flags)
    n = _need(lat, node.steps)
    b = _blocked(lat, slot, remaining, node.dirs, eff)
    if np.any(n > remaining - b):
        return False
    pos = n > 0
    lock = int(b[pos].max()) if pos.any() else 0
    return int(n.sum()) <= lat.max_chargers * (remaining - lock)


def forced_charges(lat: FleetLattice, n_slots: int, slot: int, node: Node):
    """EVs that must charge at ``slot`` for the fleet to stay feasible.

    Returns ``(mask, context)`` or None when ``node`` itself cannot reach
    the terminal set. The mask holds zero-slack EVs first, then the
    largest-need EVs (ties by id) until the fleet total fits the slots left.
    """
    remaining = n_slots - slot
    after = remaining - 1
    l3 = lat.level.caps_reversals
    eff = _effective_flags(lat, slot, node.flags)
    steps, dirs = node.steps, node.dirs
    n = _need(lat, steps)
    b = _blocked(lat, slot, remaining, dirs, eff)
    if np.any(n > remaining - b):
        return None
    pos = n > 0
    lock = int(b[pos].max()) if pos.any() else 0
    total = int(n.sum())
    if total > lat.max_chargers * (remaining - lock):
        return None

    nxt = slot + 1
    window_left = lat.sph - nxt % lat.sph if (l3 and nxt % lat.sph != 0) else 0
    window_left = min(window_left, after)
    b_idle = np.where((dirs == -1) & eff, window_left, 0)
    lock_idle = int(b_idle[pos].max()) if pos.any() else 0

    chargeable = pos & (b == 0)
    slack0 = chargeable & (n >= remaining)
    n_forced = max(int(slack0.sum()), total - lat.max_chargers * (after - lock_idle), 0)
    mask = np.zeros(lat.d, dtype=bool)
    if n_forced:
        extra = np.flatnonzero(chargeable & ~slack0)
        extra = extra[np.lexsort((lat.ids[extra], -n[extra]))]
        chosen = np.concatenate([np.flatnonzero(slack0), extra[: n_forced - int(slack0.sum())]])
        if len(chosen) < n_forced or n_forced > lat.max_chargers:
            return None
        mask[chosen] = True
    ctx = (eff, n, total, n_forced, after, window_left, lock_idle)
    return mask, ctx


def expand(lat: FleetLattice, kind: AggregateAction, n_slots: int, slot: int, node: Node) -> np.ndarray | None:
    """Per-EV action (in steps: -1, 0, +1) for an aggregate action.

    Returns None when ``node`` itself cannot reach the terminal set.
    EVs whose charging cannot be postponed are charged under every kind;
    C then tops up the lowest-SoC EVs, D drains the highest-SoC EVs as
    long as the fleet stays able to meet its targets.
    """
    forced = forced_charges(lat, n_slots, slot, node)
    if forced is None:
        return None
    mask, (eff, n, total, n_forced, after, window_left, lock_idle) = forced
    l3 = lat.level.caps_reversals
    steps, dirs = node.steps, node.dirs
    action = mask.astype(np.int8)

    if kind is AggregateAction.I:
        return action

    soc = lat.socs(steps)
    free = action == 0
    if kind is AggregateAction.C:
        ok = free & (steps < lat.up)
        if l3:
            ok &= ~((dirs == -1) & eff)
        cand = np.flatnonzero(ok)
        cand = cand[np.lexsort((lat.ids[cand], soc[cand]))]
        budget = lat.cap_charge - math.fsum(lat.step[action == 1].tolist())
        if lat.uniform_step:
            take = len(cand) if math.isinf(budget) else max(0, int(math.floor(budget / lat.step[0] + EPS)))
            action[cand[:take]] = 1
        else:
            for j in cand:
                if lat.step[j] <= budget + EPS:
                    action[j] = 1
                    budget -= lat.step[j]
        return action

    # D
    ok = free & (steps > -lat.down)
    if l3:
        ok &= ~((dirs == 1) & eff)
    cand = np.flatnonzero(ok)
    cand = cand[np.lexsort((lat.ids[cand], -soc[cand]))]
    if len(cand) == 0:
        return action
    n_after = np.maximum(lat.target[cand] - steps[cand] + 1, 0)
    if l3 and window_left:
        flag_after = eff[cand] | (dirs[cand] == 1)
        b_after = np.where(flag_after, window_left, 0)
    else:
        b_after = np.zeros(len(cand), dtype=np.int64)
    per_ev_ok = n_after <= after - b_after
    delta_n = n_after - n[cand]

    n_sum = total - int(n_forced)
    lock_now = lock_idle
    budget = lat.cap_discharge
    chargers = lat.max_chargers
    for i, j in enumerate(cand.tolist()):
        if not per_ev_ok[i]:
            continue
        r = lat.step[j]
        if r > budget + EPS:
            if lat.uniform_step:
                break
            continue
        new_sum = n_sum + int(delta_n[i])
        new_lock = max(lock_now, int(b_after[i])) if n_after[i] > 0 else lock_now
        if new_sum > chargers * (after - new_lock):
            continue
        action[j] = -1
        budget -= r
        n_sum, lock_now = new_sum, new_lock
    return action


def apply(lat: FleetLattice, slot: int, node: Node, action: np.ndarray) -> Node:
    eff = node.flags & (slot % lat.sph != 0)
    moving = action != 0
    reversal = moving & (node.dirs != 0) & (node.dirs != action)
    flags = eff | reversal
    dirs = np.where(moving, action, node.dirs).astype(np.int8)
    return Node(node.steps + action, dirs, flags)


def node_key(lat: FleetLattice, slot: int, node: Node) -> bytes:
    if not lat.level.caps_reversals:
        return node.steps.tobytes()
    eff = _effective_flags(lat, slot, node.flags)
    return node.steps.tobytes() + node.dirs.tobytes() + eff.tobytes()


def action_cost(lat: FleetLattice, scenario: Scenario, slot: int, action: np.ndarray) -> float:
    if lat.uniform_step and lat.d:
        total = float(int(action.sum(dtype=np.int64)) * lat.step[0])
    else:
        total = math.fsum((action * lat.step).tolist())
    return stage_cost(slot, total, scenario)[0]


# -- layered engine ----------------------------------------------------------

ActionFn = Callable[[int, Node], Sequence[tuple[object, np.ndarray]]]


@dataclass
class DpTable:
    """Cost-to-go and best action per (slot, state key)."""

    lattice: FleetLattice
    n_slots: int
    nodes: list[dict[bytes, Node]]
    cost_to_go: list[dict[bytes, float]]
    best: list[dict[bytes, tuple[object, np.ndarray, bytes]]]

    def entries(self) -> Iterator[tuple[int, FleetState, float]]:
        for k, layer in enumerate(self.cost_to_go):
            for key, j in layer.items():
                n = self.nodes[k][key]
                yield k, self.lattice.decode(k, n.steps, n.dirs, n.flags), j

    def lookup(self, slot: int, state: FleetState) -> float:
        steps, dirs, flags = self.lattice.encode(state)
        key = node_key(self.lattice, slot, Node(steps, dirs, flags))
        return self.cost_to_go[slot].get(key, math.inf)

    def state_count(self) -> int:
        return sum(len(x) for x in self.nodes)


def _run(lat: FleetLattice, scenario: Scenario, start_slot: int, start: Node,
         actions_for: ActionFn, terminal: Callable[[Node], bool],
         max_states: int | None = None, protect: Sequence[bytes] = ()) -> DpTable:
    """Forward reachability then backward Bellman recursion.

    With ``max_states`` set, each layer keeps the ``max_states`` nodes with
    the lowest cost-so-far minus the value of their stored energy (priced
    at the mean remaining ICM price); the nodes listed in ``protect`` (one
    key per slot from ``start_slot`` on) are never dropped.
    """
    n_slots = scenario.n_slots
    layers: list[dict[bytes, Node]] = [dict() for _ in range(n_slots + 1)]
    edges: list[dict[bytes, list]] = [dict() for _ in range(n_slots + 1)]
    key0 = node_key(lat, start_slot, start)
    layers[start_slot][key0] = start
    so_far = {key0: 0.0}
    rho = np.asarray(scenario.rho)
    for k in range(start_slot, n_slots):
        nxt = layers[k + 1]
        nxt_cost: dict[bytes, float] = {}
        for key, node in layers[k].items():
            out = []
            base = so_far[key]
            for label, act in actions_for(k, node):
                child = apply(lat, k, node, act)
                ckey = node_key(lat, k + 1, child)
                g = action_cost(lat, scenario, k, act)
                if ckey not in nxt:
                    nxt[ckey] = child
                    nxt_cost[ckey] = base + g
                elif base + g < nxt_cost[ckey]:
                    nxt_cost[ckey] = base + g
                out.append((label, act, ckey, g))
            edges[k][key] = out
        if max_states is not None and len(nxt) > max_states:
            price = float(rho[k + 1:].mean()) if k + 1 < n_slots else 0.0
            rank = sorted(
                nxt,
                key=lambda c: nxt_cost[c] - price * float(nxt[c].steps @ lat.step),
            )
            keep = set(rank[:max_states])
            if len(protect) > k + 1 - start_slot:
                keep.add(protect[k + 1 - start_slot])
            layers[k + 1] = nxt = {c: n for c, n in nxt.items() if c in keep}
        so_far = {c: nxt_cost[c] for c in nxt}

    # equal costs go to the path moving the least energy, then to the first action
    cost_to_go: list[dict[bytes, float]] = [dict() for _ in range(n_slots + 1)]
    moved: list[dict[bytes, int]] = [dict() for _ in range(n_slots + 1)]
    best: list[dict] = [dict() for _ in range(n_slots + 1)]
    for key, node in layers[n_slots].items():
        if terminal(node):
            cost_to_go[n_slots][key] = 0.0
            moved[n_slots][key] = 0
    for k in range(n_slots - 1, start_slot - 1, -1):
        ahead, ahead_moved = cost_to_go[k + 1], moved[k + 1]
        for key, out in edges[k].items():
            if key not in layers[k]:
                continue
            best_val, best_moved, best_edge = math.inf, 0, None
            for label, act, ckey, g in out:
                tail = ahead.get(ckey)
                if tail is None:
                    continue
                val = g + tail
                m = int(np.abs(act).sum()) + ahead_moved[ckey]
                if val < best_val or (val == best_val and m < best_moved):
                    best_val, best_moved, best_edge = val, m, (label, act, ckey)
            if best_edge is not None:
                cost_to_go[k][key] = best_val
                moved[k][key] = best_moved
                best[k][key] = best_edge
    return DpTable(lat, n_slots, layers, cost_to_go, best)


def _extract(table: DpTable, start_slot: int, start: Node) -> tuple[list, np.ndarray]:
    lat = table.lattice
    key = node_key(lat, start_slot, start)
    if key not in table.cost_to_go[start_slot]:
        raise Infeasible("problem is infeasible: no admissible path reaches the terminal set")
    labels, acts = [], []
    for k in range(start_slot, table.n_slots):
        label, act, key = table.best[k][key]
        labels.append(label)
        acts.append(act)
    return labels, np.array(acts, dtype=np.int8).reshape(len(acts), lat.d)


def lattice_for(scenario: Scenario) -> FleetLattice:
    return FleetLattice(scenario.fleet, scenario.level, scenario.slot_hours)


# -- approximate DP ------------------------------------------------------------

def approx_table(scenario: Scenario, start_slot: int = 0, start: FleetState | None = None,
                 max_states: int | None = BEAM_WIDTH) -> DpTable:
    lat = lattice_for(scenario)
    if start is None:
        node = Node(np.zeros(lat.d, np.int64), np.zeros(lat.d, np.int8), np.zeros(lat.d, bool))
    else:
        node = Node(*lat.encode(start))
    n_slots = scenario.n_slots

    def actions_for(k: int, nd: Node):
        seen, out = set(), []
        for kind in _KIND_ORDER:
            act = expand(lat, kind, n_slots, k, nd)
            if act is None:
                return []
            sig = act.tobytes()
            if sig not in seen:
                seen.add(sig)
                out.append((kind, act))
        return out

    # the all-idle path survives any beam, so the result never loses to it
    protect = [node_key(lat, start_slot, node)]
    cur = node
    for k in range(start_slot, n_slots):
        act = expand(lat, AggregateAction.I, n_slots, k, cur)
        if act is None:
            break
        cur = apply(lat, k, cur, act)
        protect.append(node_key(lat, k + 1, cur))
    return _run(lat, scenario, start_slot, node, actions_for, lambda nd: not np.any(_need(lat, nd.steps) > 0),
                max_states=max_states, protect=protect)


def plan_approx(scenario: Scenario, start_slot: int = 0, start: FleetState | None = None,
                max_states: int | None = BEAM_WIDTH):
    """Labels and step actions of the restricted-DP plan from ``start``."""
    table = approx_table(scenario, start_slot, start, max_states)
    lat = table.lattice
    node = Node(*lat.encode(start)) if start is not None else Node(
        np.zeros(lat.d, np.int64), np.zeros(lat.d, np.int8), np.zeros(lat.d, bool))
    return _extract(table, start_slot, node)


def solve_approx(scenario: Scenario, max_states: int | None = BEAM_WIDTH) -> Schedule:
    """Cost-minimal schedule over aggregate actions {C, I, D}.

    Each layer keeps at most ``max_states`` states (pass None for the full
    restricted DP). Raises Infeasible when no restricted path meets every
    target.
    """
    lat = lattice_for(scenario)
    if not lat.target_reachable():
        raise Infeasible("a target lies above the highest reachable SoC")
    labels, steps = plan_approx(scenario, max_states=max_states)
    return Schedule.from_actions(steps * lat.step, scenario, labels)


# -- exact DP ------------------------------------------------------------------

def _exact_actions(lat: FleetLattice, n_slots: int):
    options = list(itertools.product((-1, 0, 1), repeat=lat.d))
    table = np.array(options, dtype=np.int8).reshape(len(options), lat.d)
    charge_e = np.where(table > 0, lat.step, 0.0).sum(axis=1)
    discharge_e = np.where(table < 0, lat.step, 0.0).sum(axis=1)
    site_ok = (charge_e <= lat.cap_charge + EPS) & (discharge_e <= lat.cap_discharge + EPS)
    table = table[site_ok]
    l3 = lat.level.caps_reversals

    def actions_for(k: int, nd: Node):
        eff = _effective_flags(lat, k, nd.flags)
        new = nd.steps + table
        ok = np.all((new <= lat.up) & (new >= -lat.down), axis=1)
        if l3:
            reversal = (table != 0) & (nd.dirs != 0) & (table != nd.dirs)
            ok &= ~np.any(reversal & eff, axis=1)
        # prune children that can no longer reach a target even charging flat out
        remaining = n_slots - k - 1
        ok &= np.all(lat.target - new <= remaining, axis=1)
        return [(None, a) for a in table[ok]]

    return actions_for


def exact_table(scenario: Scenario, d_max: int = D_MAX_EXACT, n_max: int = N_MAX_EXACT) -> DpTable:
    if scenario.d > d_max or scenario.n_slots > n_max:
        raise SizeLimit(f"exact DP limited to d <= {d_max}, N <= {n_max}; got d={scenario.d}, N={scenario.n_slots}")
    lat = lattice_for(scenario)
    node = Node(np.zeros(lat.d, np.int64), np.zeros(lat.d, np.int8), np.zeros(lat.d, bool))
    return _run(lat, scenario, 0, node, _exact_actions(lat, scenario.n_slots),
                lambda nd: not np.any(_need(lat, nd.steps) > 0))


def solve_exact(scenario: Scenario, d_max: int = D_MAX_EXACT, n_max: int = N_MAX_EXACT) -> Schedule:
    """Cost-minimal schedule over the full per-EV action lattice.

    Raises SizeLimit beyond the guards and Infeasible when the terminal
    set cannot be reached.
    """
    table = exact_table(scenario, d_max, n_max)
    lat = table.lattice
    _, steps = _extract(table, 0, Node(np.zeros(lat.d, np.int64), np.zeros(lat.d, np.int8), np.zeros(lat.d, bool)))
    return Schedule.from_actions(steps * lat.step, scenario)


# -- public expansion on FleetState ------------------------------------------

def expand_aggregate(kind: AggregateAction, state: FleetState, scenario: Scenario) -> np.ndarray:
    """Per-EV kWh deltas for aggregate ``kind`` at ``state``.

    Falls back to all-idle when the state can no longer meet the targets.
    """
    lat = lattice_for(scenario)
    act = expand(lat, AggregateAction(kind), scenario.n_slots, state.slot, Node(*lat.encode(state)))
    if act is None:
        return np.zeros(lat.d)
    return act * lat.step
