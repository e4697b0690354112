"""Command-line entry point: ``fleetdp <command> ...``.

Exit codes: 0 success, 2 usage, 3 infeasible, 4 data or model error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .dp import solve_approx, solve_exact
from .errors import DataError, FleetDPError, Infeasible, ModelFormatError, SizeLimit
from .learner import (
    FEATURE_NAMES,
    SvcModel,
    _as_arrays,
    label_scenario,
    read_training_csv,
    select_features,
    train_svc,
    write_training_csv,
)
from .market import Scenario, generate_scenario, ingest_prices
from .oracle import emit_milp_lp
from .rollout import PolicyKind, benchmark, run_policy

EXIT_OK, EXIT_USAGE, EXIT_INFEASIBLE, EXIT_DATA = 0, 2, 3, 4

log = logging.getLogger("fleetdp")


class UsageError(Exception):
    pass


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fleetdp", description="EV fleet charging schedules: DP, learned policy, benchmarks.")
    p.add_argument("--version", action="version", version=f"fleetdp {__version__}")
    p.add_argument("--config", help="JSON file supplying default values for any flag")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="command")

    def seeded(sp):
        sp.add_argument("--seed", type=int, help="random seed (default: $FLEETDP_SEED or 0)")

    scen = sub.add_parser("scenario", help="scenario files").add_subparsers(dest="action", metavar="action")
    sg = scen.add_parser("gen", help="generate a scenario JSON file")
    sg.add_argument("--level", type=int, choices=range(4))
    sg.add_argument("--evs", type=int)
    sg.add_argument("--slots", type=int, default=48)
    seeded(sg)
    sg.add_argument("--prices", help="price CSV (timestamp,price_eur_per_mwh)")
    sg.add_argument("--granularity", choices=("quarter", "hourly"), default="quarter")
    sg.add_argument("--out", default="scenario.json")

    data = sub.add_parser("data", help="training data").add_subparsers(dest="action", metavar="action")
    dg = data.add_parser("gen", help="label generated scenarios with the restricted DP")
    dg.add_argument("--scenarios", type=int)
    dg.add_argument("--level", type=int, choices=range(4), default=3)
    dg.add_argument("--evs", type=int, default=100)
    dg.add_argument("--slots", type=int, default=48)
    dg.add_argument("--per-scenario", type=int, help="rows sampled per scenario (default: every slot)")
    seeded(dg)
    dg.add_argument("--out", default="training.csv")

    tr = sub.add_parser("train", help="select features and fit the classifier")
    tr.add_argument("--data")
    tr.add_argument("--samples", type=int, default=1000, help="training rows drawn uniformly; the rest is held out")
    tr.add_argument("--C", type=float, default=1.0)
    tr.add_argument("--tol", type=float, default=1e-3)
    tr.add_argument("--max-passes", type=int, default=100_000)
    seeded(tr)
    tr.add_argument("--out", default="model.json")

    so = sub.add_parser("solve", help="solve a scenario with the exact or restricted DP")
    so.add_argument("--scenario")
    so.add_argument("--method", choices=("approx", "exact"), default="approx")
    so.add_argument("--out", default="schedule.csv")

    ev = sub.add_parser("evaluate", help="run one policy on one scenario")
    ev.add_argument("--scenario")
    ev.add_argument("--model")
    ev.add_argument("--policy", choices=[k.value for k in PolicyKind], default="svc")
    ev.add_argument("--replan-every", type=int)
    ev.add_argument("--out", default="schedule.csv")

    cp = sub.add_parser("compare", help="benchmark policies across fleet sizes")
    cp.add_argument("--fleet-sizes", type=_ints, default=[50, 100, 200, 300])
    cp.add_argument("--scenarios", type=int, default=100)
    cp.add_argument("--policies", default="adp,svc,idle")
    cp.add_argument("--model")
    cp.add_argument("--level", type=int, choices=range(4), default=3)
    cp.add_argument("--slots", type=int, default=48)
    cp.add_argument("--jobs", type=int, default=1)
    cp.add_argument("--no-timing", action="store_true", help="leave wall-time columns blank")
    seeded(cp)
    cp.add_argument("--out", default="report", help="output prefix")

    ex = sub.add_parser("export", help="model exports").add_subparsers(dest="action", metavar="action")
    em = ex.add_parser("milp", help="write the scenario as a CPLEX LP file")
    em.add_argument("--scenario")
    em.add_argument("--out", default="model.lp")
    return p


def _apply_config(args: argparse.Namespace, argv: list[str]) -> None:
    """Fill flags from the JSON config unless given on the command line."""
    if not args.config:
        return
    try:
        cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read config {args.config}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise DataError("config must be a JSON object")
    given = {tok.split("=", 1)[0] for tok in argv if tok.startswith("--")}
    for key, value in cfg.items():
        dest = key.replace("-", "_")
        if not hasattr(args, dest):
            raise UsageError(f"config key {key!r} is not a flag of this command")
        if "--" + dest.replace("_", "-") not in given:
            if dest == "fleet_sizes" and not isinstance(value, list):
                value = _ints(value)
            setattr(args, dest, value)


def _seed(args) -> int:
    if getattr(args, "seed", None) is not None:
        return int(args.seed)
    env = os.environ.get("FLEETDP_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"FLEETDP_SEED must be an integer, got {env!r}")
    return 0


def _require(args, *names: str) -> None:
    missing = ["--" + n.replace("_", "-") for n in names if getattr(args, n, None) is None]
    if missing:
        raise UsageError("missing required flag(s): " + ", ".join(missing))


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _manifest(out: Path, args, seed: int | None, outputs: list[Path], extra: dict | None = None) -> Path:
    """Write ``<out>.manifest.json`` describing how ``outputs`` were produced."""
    flags = {k: v for k, v in sorted(vars(args).items()) if k not in ("verbose",)}
    doc = {
        "tool": "fleetdp",
        "version": __version__,
        "command": " ".join(x for x in (args.command, getattr(args, "action", None)) if x),
        "flags": flags,
        "seed": seed,
        "outputs": {p.name: _sha256(p) for p in outputs},
    }
    if extra:
        doc.update(extra)
    path = out.with_name(out.name + ".manifest.json")
    path.write_text(json.dumps(doc, indent=1, sort_keys=True, default=str) + "\n", encoding="utf-8")
    return path


def _load_scenario(path) -> Scenario:
    return Scenario.load(path)


# -- commands -----------------------------------------------------------------

def cmd_scenario_gen(args) -> int:
    _require(args, "level", "evs")
    if args.evs < 1 or args.slots < 1:
        raise UsageError("--evs and --slots must be positive")
    seed = _seed(args)
    prices = None
    if args.prices:
        prices = ingest_prices(args.prices, args.granularity)
        if any(x < 0 for x in prices[: args.slots]):
            log.warning("negative prices in %s clipped to zero", args.prices)
    scenario = generate_scenario(args.level, args.evs, args.slots, seed, prices=prices)
    out = Path(args.out)
    scenario.save(out)
    _manifest(out, args, seed, [out])
    print(f"wrote {out} (level {args.level}, {args.evs} EVs, {args.slots} slots)")
    return EXIT_OK


def cmd_data_gen(args) -> int:
    _require(args, "scenarios")
    if args.scenarios < 1:
        raise UsageError("--scenarios must be at least 1")
    if args.per_scenario is not None and args.per_scenario < 1:
        raise UsageError("--per-scenario must be at least 1")
    seed = _seed(args)
    rng = np.random.default_rng(seed)
    out = Path(args.out)
    rows, skipped = [], []
    for i in range(args.scenarios):
        scenario = generate_scenario(args.level, args.evs, args.slots, seed + i)
        try:
            samples = label_scenario(scenario, i)
        except Infeasible as exc:
            log.warning("scenario %d skipped: %s", i, exc)
            skipped.append({"scenario_id": i, "seed": seed + i, "reason": str(exc)})
            continue
        if args.per_scenario is not None and args.per_scenario < len(samples):
            pick = np.sort(rng.choice(len(samples), args.per_scenario, replace=False))
            samples = [samples[j] for j in pick]
        rows.extend(samples)
    write_training_csv(rows, out)
    log_path = out.with_name(out.name + ".log")
    log_path.write_text("".join(json.dumps(s) + "\n" for s in skipped), encoding="utf-8")
    _manifest(out, args, seed, [out, log_path], {"rows": len(rows), "skipped": len(skipped)})
    print(f"wrote {out}: {len(rows)} rows from {args.scenarios - len(skipped)} scenarios ({len(skipped)} skipped)")
    return EXIT_OK


def cmd_train(args) -> int:
    _require(args, "data")
    if args.samples < 50:
        raise UsageError("--samples must be at least 50")
    seed = _seed(args)
    samples = read_training_csv(args.data)
    X, y = _as_arrays(samples)
    perm = np.random.default_rng(seed).permutation(len(y))
    train_idx, held_idx = perm[: args.samples], perm[args.samples:]
    if len(train_idx) < 50:
        raise DataError(f"{args.data}: {len(y)} rows, need at least 50")
    sel = select_features((X[train_idx], y[train_idx]))
    model = train_svc((X[train_idx], y[train_idx]), sel, C=args.C, tol=args.tol, max_iter=args.max_passes, seed=seed)
    held = model.accuracy(X[held_idx], y[held_idx]) if len(held_idx) else None
    model.meta["held_out_samples"] = int(len(held_idx))
    model.meta["held_out_accuracy"] = held
    model.meta["selected_features"] = [FEATURE_NAMES[i] for i in sel]
    out = Path(args.out)
    model.save(out)
    _manifest(out, args, seed, [out])
    print("selected features: " + ", ".join(FEATURE_NAMES[i] for i in sel))
    print(f"training accuracy: {model.meta['train_accuracy']:.4f}")
    if held is None:
        print("held-out accuracy: n/a (no rows left after sampling)")
    else:
        print(f"held-out accuracy: {held:.4f} on {len(held_idx)} rows")
    if not model.converged:
        print("warning: SMO did not converge for every class", file=sys.stderr)
    return EXIT_OK


def cmd_solve(args) -> int:
    _require(args, "scenario")
    scenario = _load_scenario(args.scenario)
    schedule = solve_exact(scenario) if args.method == "exact" else solve_approx(scenario)
    out = Path(args.out)
    schedule.write_csv(out)
    _manifest(out, args, None, [out, out.with_suffix(".json")])
    print(f"objective_eur {schedule.objective_eur!r}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    _require(args, "scenario")
    scenario = _load_scenario(args.scenario)
    model = None
    if args.policy == PolicyKind.Svc.value:
        _require(args, "model")
        model = SvcModel.load(args.model)
    schedule, row = run_policy(args.policy, scenario, model, replan_every=args.replan_every)
    out = Path(args.out)
    schedule.write_csv(out)
    _manifest(out, args, None, [out, out.with_suffix(".json")],
              {"infeasible_repairs": row.infeasible_repairs, "forced_overrides": row.forced_overrides})
    print(f"policy {row.policy}: objective_eur {row.objective_eur!r}, "
          f"repairs {row.infeasible_repairs}, forced overrides {row.forced_overrides}, "
          f"violations {row.constraint_violations}")
    return EXIT_OK


def cmd_compare(args) -> int:
    if args.scenarios < 1:
        raise UsageError("--scenarios must be at least 1")
    if not args.fleet_sizes or any(d < 1 for d in args.fleet_sizes):
        raise UsageError("--fleet-sizes must list positive integers")
    try:
        policies = [PolicyKind(p.strip()) for p in str(args.policies).split(",") if p.strip()]
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    model = None
    if PolicyKind.Svc in policies:
        _require(args, "model")
        model = SvcModel.load(args.model)
    seed = _seed(args)
    report = benchmark(args.fleet_sizes, args.scenarios, policies, model, seed=seed,
                       level=args.level, n_slots=args.slots, jobs=args.jobs)
    paths = report.write(args.out, timing=not args.no_timing)
    _manifest(Path(args.out), args, seed, list(paths.values()))
    for s in report.summary():
        print(f"d={s['fleet_size']:>4} {s['policy']:<7} mean {s['mean_objective_eur']:.2f} EUR  "
              f"repairs {s['infeasible_repairs']}  forced {s['forced_overrides']}  failed {s['failed']}")
    return EXIT_OK


def cmd_export_milp(args) -> int:
    _require(args, "scenario")
    scenario = _load_scenario(args.scenario)
    out = emit_milp_lp(scenario, args.out)
    _manifest(out, args, None, [out])
    print(f"wrote {out}")
    return EXIT_OK


COMMANDS = {
    ("scenario", "gen"): cmd_scenario_gen,
    ("data", "gen"): cmd_data_gen,
    ("train", None): cmd_train,
    ("solve", None): cmd_solve,
    ("evaluate", None): cmd_evaluate,
    ("compare", None): cmd_compare,
    ("export", "milp"): cmd_export_milp,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on malformed flags
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    handler = COMMANDS.get((args.command, getattr(args, "action", None)))
    if handler is None:
        parser.print_usage(sys.stderr)
        print("fleetdp: error: choose a command", file=sys.stderr)
        return EXIT_USAGE
    try:
        _apply_config(args, argv)
        return handler(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"fleetdp: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Infeasible as exc:
        print(f"fleetdp: infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except SizeLimit as exc:
        print(f"fleetdp: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ModelFormatError, FleetDPError, OSError) as exc:
        print(f"fleetdp: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
