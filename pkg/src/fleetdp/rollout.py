"""Closed-loop evaluation of charging policies over scenario batches."""
from __future__ import annotations

import csv
import enum
import json
import math
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dp import (
    BEAM_WIDTH,
    AggregateAction,
    Node,
    Schedule,
    apply,
    expand,
    forced_charges,
    lattice_for,
    plan_approx,
)
from .errors import ConstraintViolation, FleetDPError, Infeasible
from .fleet import EPS, FleetState, Violation, ViolationKind, is_admissible, terminal_ok, transition
from .learner import CLASSES, SvcModel, features_from_socs
from .market import Scenario, generate_scenario

# fallback order after the predicted kind has failed
LADDER = {
    AggregateAction.D: (AggregateAction.I, AggregateAction.C),
    AggregateAction.I: (AggregateAction.C,),
    AggregateAction.C: (),
}


class PolicyKind(str, enum.Enum):
    Adp = "adp"
    Svc = "svc"
    IdleBaseline = "idle"
    GreedyPriceBaseline = "greedy"


@dataclass
class RunRow:
    scenario_id: int
    fleet_size: int
    policy: str
    objective_eur: float = math.nan
    wall_time_s: float = math.nan
    infeasible_repairs: int = 0
    forced_overrides: int = 0
    constraint_violations: int = 0
    status: str = "ok"
    message: str = ""


def audit(schedule: Schedule, scenario: Scenario) -> list[Violation]:
    """Replay ``schedule`` through the transition rules and the terminal check."""
    state = FleetState.initial(scenario.fleet)
    found: list[Violation] = []
    for k in range(scenario.n_slots):
        ok, violations = is_admissible(state, schedule.actions[k], scenario.fleet, scenario.level, scenario.slot_hours)
        if not ok:
            found.extend(violations)
            return found
        state = transition(state, schedule.actions[k], scenario.fleet, scenario.level, scenario.slot_hours)
    if not terminal_ok(state, scenario.fleet, scenario.n_slots):
        for spec, ev in zip(scenario.fleet, state.ev_states):
            if ev.soc_kwh < spec.target_soc_kwh - EPS:
                found.append(Violation(ViolationKind.SOC_LOWER, spec.id, f"terminal {ev.soc_kwh} < target {spec.target_soc_kwh}"))
    return found


class _Greedy:
    """Charge in the cheapest third of the horizon, discharge in the dearest."""

    def __init__(self, scenario: Scenario):
        lo, hi = np.quantile(np.asarray(scenario.rho), [1 / 3, 2 / 3])
        self.lo, self.hi = float(lo), float(hi)
        self.rho = scenario.rho

    def __call__(self, k: int) -> AggregateAction:
        if self.rho[k] <= self.lo:
            return AggregateAction.C
        if self.rho[k] > self.hi:
            return AggregateAction.D
        return AggregateAction.I


def run_policy(
    policy: PolicyKind | str,
    scenario: Scenario,
    model: SvcModel | None = None,
    replan_every: int | None = None,
    scenario_id: int = 0,
    max_states: int | None = BEAM_WIDTH,
) -> tuple[Schedule, RunRow]:
    """Drive ``scenario`` slot by slot under ``policy``.

    The policy names an aggregate action each slot; it is expanded with
    forced charging, and if the expansion still fails the ladder falls back
    towards C. Wall time counts decisions only (planning, feature
    extraction, prediction, expansion), not the audit.
    """
    policy = PolicyKind(policy)
    if policy is PolicyKind.Svc and model is None:
        raise ValueError("the svc policy needs a trained model")
    if replan_every is not None and replan_every < 1:
        raise ValueError("replan_every must be a positive number of slots")
    row = RunRow(scenario_id, scenario.d, policy.value)
    lat = lattice_for(scenario)
    n = scenario.n_slots
    if not lat.target_reachable():
        raise Infeasible("a target lies above the highest reachable SoC")
    caps = np.array([s.capacity_kwh for s in scenario.fleet])
    targets = np.array([s.target_soc_kwh for s in scenario.fleet])
    greedy = _Greedy(scenario) if policy is PolicyKind.GreedyPriceBaseline else None

    node = Node(np.zeros(lat.d, np.int64), np.zeros(lat.d, np.int8), np.zeros(lat.d, bool))
    steps = np.zeros((n, lat.d), dtype=np.int8)
    labels: list[AggregateAction] = []
    plan: list[AggregateAction] = []
    plan_start = 0
    elapsed = 0.0
    for k in range(n):
        t0 = time.perf_counter()
        if policy is PolicyKind.Adp:
            if k == 0 or (replan_every is not None and (k - plan_start) % replan_every == 0 and k != plan_start):
                state = lat.decode(k, node.steps, node.dirs, node.flags)
                plan, _ = plan_approx(scenario, k, state if k else None, max_states=max_states)
                plan_start = k
            wanted = plan[k - plan_start]
        elif policy is PolicyKind.Svc:
            feats = features_from_socs(lat.socs(node.steps), caps, targets, scenario, k)
            wanted = CLASSES[int(model.predict_raw(feats)[0])]
        elif policy is PolicyKind.IdleBaseline:
            wanted = AggregateAction.I
        else:
            wanted = greedy(k)

        action, used = None, wanted
        for kind in (wanted, *LADDER[wanted]):
            action = expand(lat, kind, n, k, node)
            if action is not None and _admissible(lat, k, node, action):
                used = kind
                break
            action = None
        if action is None:
            raise Infeasible(f"slot {k}: no aggregate action keeps the fleet able to meet its targets")
        elapsed += time.perf_counter() - t0

        forced = forced_charges(lat, n, k, node)

        if used is not wanted:
            row.infeasible_repairs += 1
        if forced is not None and forced[0].any():
            row.forced_overrides += 1
        steps[k] = action
        labels.append(used)
        node = apply(lat, k, node, action)

    schedule = Schedule.from_actions(steps * lat.step, scenario, labels)
    row.objective_eur = schedule.objective_eur
    row.wall_time_s = elapsed
    row.constraint_violations = len(audit(schedule, scenario))
    if row.constraint_violations:
        row.status = "violation"
    return schedule, row


def _admissible(lat, k: int, node: Node, action: np.ndarray) -> bool:
    new = node.steps + action
    if np.any(new > lat.up) or np.any(new < -lat.down):
        return False
    if math.fsum(lat.step[action > 0].tolist()) > lat.cap_charge + EPS:
        return False
    if math.fsum(lat.step[action < 0].tolist()) > lat.cap_discharge + EPS:
        return False
    if lat.level.caps_reversals and k % lat.sph != 0:
        reversal = (action != 0) & (node.dirs != 0) & (action != node.dirs)
        if np.any(reversal & node.flags):
            return False
    return True


# -- batches ------------------------------------------------------------------

@dataclass
class EvalReport:
    rows: list[RunRow] = field(default_factory=list)

    def summary(self) -> list[dict]:
        groups: dict[tuple[int, str], list[RunRow]] = {}
        for r in self.rows:
            groups.setdefault((r.fleet_size, r.policy), []).append(r)
        out = []
        for (d, pol), rows in sorted(groups.items()):
            ok = [r for r in rows if r.status == "ok"]
            objs = [r.objective_eur for r in ok]
            walls = [r.wall_time_s for r in ok]
            out.append({
                "fleet_size": d,
                "policy": pol,
                "runs": len(rows),
                "failed": len(rows) - len(ok),
                "mean_objective_eur": statistics.fmean(objs) if objs else math.nan,
                "std_objective_eur": statistics.pstdev(objs) if objs else math.nan,
                "mean_wall_s": statistics.fmean(walls) if walls else math.nan,
                "infeasible_repairs": sum(r.infeasible_repairs for r in rows),
                "forced_overrides": sum(r.forced_overrides for r in rows),
                "constraint_violations": sum(r.constraint_violations for r in rows),
            })
        return out

    def write(self, prefix: str | Path, timing: bool = True) -> dict[str, Path]:
        """Write ``<prefix>.csv``, ``<prefix>.json`` and ``<prefix>_plot.csv``.

        With ``timing`` off the wall-time columns are left blank so the
        files depend on the inputs alone.
        """
        prefix = Path(prefix)
        paths = {
            "report": prefix.with_name(prefix.name + ".csv"),
            "summary": prefix.with_name(prefix.name + ".json"),
            "plot": prefix.with_name(prefix.name + "_plot.csv"),
        }
        cols = list(RunRow.__dataclass_fields__)
        with paths["report"].open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r in self.rows:
                rec = asdict(r)
                if not timing:
                    rec["wall_time_s"] = ""
                w.writerow([_fmt(rec[c]) for c in cols])
        summary = self.summary()
        if not timing:
            for s in summary:
                s["mean_wall_s"] = None
        paths["summary"].write_text(json.dumps({"groups": summary}, indent=1, allow_nan=True) + "\n", encoding="utf-8")
        with paths["plot"].open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["fleet_size", "policy", "mean_objective_eur", "std_objective_eur", "mean_wall_s"])
            for s in summary:
                w.writerow([s["fleet_size"], s["policy"], _fmt(s["mean_objective_eur"]),
                            _fmt(s["std_objective_eur"]), _fmt(s["mean_wall_s"])])
        return paths


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return "" if math.isnan(x) else repr(x)
    return str(x)


@dataclass(frozen=True)
class _Job:
    policy: str
    fleet_size: int
    scenario_id: int
    seed: int
    level: int
    n_slots: int


_WORKER_MODEL: SvcModel | None = None


def _init_worker(model: SvcModel | None) -> None:
    global _WORKER_MODEL
    _WORKER_MODEL = model


def _run_job(job: _Job, model: SvcModel | None = None) -> RunRow:
    model = model if model is not None else _WORKER_MODEL
    try:
        scenario = generate_scenario(job.level, job.fleet_size, job.n_slots, job.seed)
        _, row = run_policy(job.policy, scenario, model, scenario_id=job.scenario_id)
        return row
    except (FleetDPError, ConstraintViolation, ValueError) as exc:
        status = "infeasible" if isinstance(exc, Infeasible) else "error"
        return RunRow(job.scenario_id, job.fleet_size, PolicyKind(job.policy).value, status=status, message=str(exc))


def scenario_seed(base_seed: int, fleet_size: int, scenario_id: int) -> int:
    """Seed of scenario ``scenario_id`` at ``fleet_size``; shared by every policy."""
    return base_seed + 100_003 * fleet_size + scenario_id


def benchmark(
    fleet_sizes: Sequence[int],
    n_scenarios: int,
    policies: Sequence[PolicyKind | str],
    model: SvcModel | None = None,
    seed: int = 0,
    level: int = 3,
    n_slots: int = 48,
    jobs: int = 1,
) -> EvalReport:
    """Cross product of fleet sizes, scenarios and policies with fixed seeds.

    Rows come back ordered by fleet size, scenario id and policy whatever
    the worker count. Failed runs are kept as rows with a status.
    """
    if n_scenarios < 1:
        raise ValueError("need at least one scenario")
    if not policies:
        raise ValueError("need at least one policy")
    pols = [PolicyKind(p) for p in policies]
    if PolicyKind.Svc in pols and model is None:
        raise ValueError("the svc policy needs a trained model")
    work = [
        _Job(p.value, d, i, scenario_seed(seed, d, i), int(level), n_slots)
        for d in fleet_sizes
        for i in range(n_scenarios)
        for p in pols
    ]
    if jobs <= 1:
        rows = [_run_job(j, model) for j in work]
    else:
        with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker, initargs=(model,)) as pool:
            rows = list(pool.map(_run_job, work, chunksize=1))
    return EvalReport(rows)
