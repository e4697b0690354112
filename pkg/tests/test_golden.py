"""Byte-level golden files. Set FLEETDP_REGEN_GOLDEN=1 to rewrite them."""
import os
from pathlib import Path

import pytest

from fleetdp.learner import label_scenario, train_svc
from fleetdp.market import generate_scenario
from fleetdp.oracle import emit_milp_lp, random_small_scenario
from fleetdp.rollout import benchmark

GOLDEN = Path(__file__).parent / "golden"
REGEN = os.environ.get("FLEETDP_REGEN_GOLDEN") == "1"


def check(name, produced: Path):
    data = produced.read_bytes()
    target = GOLDEN / name
    if REGEN:
        target.write_bytes(data)
    assert target.exists(), f"missing golden file {name}"
    assert data == target.read_bytes(), f"{name} differs from golden copy"


def test_scenario_json(tmp_path):
    generate_scenario(3, 5, 48, seed=42).save(tmp_path / "s.json")
    check("scenario_l3_d5_seed42.json", tmp_path / "s.json")


def test_lp_export(tmp_path):
    path = emit_milp_lp(random_small_scenario(11, 2, 6, 3), tmp_path / "m.lp")
    check("milp_l3_d2_n6_seed11.lp", path)
    highspy = pytest.importorskip("highspy")
    h = highspy.Highs()
    h.setOptionValue("output_flag", False)
    assert h.readModel(str(GOLDEN / "milp_l3_d2_n6_seed11.lp")) == highspy.HighsStatus.kOk


def test_model_json(tmp_path):
    samples = []
    for i in range(4):
        samples += label_scenario(generate_scenario(3, 10, 48, seed=700 + i), i)
    train_svc(samples, seed=0).save(tmp_path / "m.json")
    check("model_l3_d10_seed700.json", tmp_path / "m.json")


def test_report_csv(tmp_path):
    paths = benchmark([4, 6], 2, ["adp", "idle", "greedy"], seed=5).write(tmp_path / "r", timing=False)
    check("report_seed5.csv", paths["report"])
    check("report_seed5_plot.csv", paths["plot"])
