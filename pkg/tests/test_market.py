import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import ev, scenario
from fleetdp.errors import DataError, EmptyScenario
from fleetdp.fleet import Level
from fleetdp.market import (
    Scenario,
    generate_scenario,
    ingest_prices,
    sig9,
    sig9_floor,
    stage_cost,
    total_cost,
)


def one_slot(rho, sigma, v):
    return scenario([rho], [sigma], [v], [ev()])


class TestStageCost:
    def test_buying(self):
        cost, bought, excess = stage_cost(0, -40.0, one_slot(0.10, 0.05, 100.0))
        assert cost == pytest.approx(6.0, rel=1e-12)
        assert (bought, excess) == (60.0, 0.0)

    def test_excess(self):
        cost, bought, excess = stage_cost(0, 20.0, one_slot(0.10, 0.05, -50.0))
        assert cost == pytest.approx(1.5, rel=1e-12)
        assert (bought, excess) == (0.0, 30.0)

    def test_zero(self):
        assert stage_cost(0, 0.0, one_slot(0.1, 0.05, 0.0)) == (0.0, 0.0, 0.0)

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            stage_cost(1, 0.0, one_slot(0.1, 0.05, 0.0))

    @given(st.floats(0, 1), st.floats(0, 1), st.floats(-500, 500),
           st.floats(-100, 100), st.floats(-100, 100), st.floats(0, 1))
    def test_convex_nonnegative_exclusive(self, rho, sigma, v, a, b, t):
        s = one_slot(rho, sigma, v)
        ca, ba, ea = stage_cost(0, a, s)
        cb, _, _ = stage_cost(0, b, s)
        cm, _, _ = stage_cost(0, t * a + (1 - t) * b, s)
        assert cm <= t * ca + (1 - t) * cb + 1e-9 * (1 + abs(ca) + abs(cb))
        assert ca >= 0
        assert ba * ea == 0


class TestTotalCost:
    def test_idle_linear(self):
        s = scenario([0.1] * 4, [0.05] * 4, [10.0] * 4, [ev()])
        assert total_cost(np.zeros((4, 1)), s).total_eur == pytest.approx(4.0, rel=1e-12)

    def test_perfect_offset(self):
        s = scenario([0.1] * 3, [0.05] * 3, [2.5, 5.0, 2.5], [ev(0, init=50.0), ev(1, init=50.0)])
        acts = np.array([[-2.5, 0.0], [-2.5, -2.5], [0.0, -2.5]])
        assert total_cost(acts, s).total_eur == 0.0

    def test_brute_force_two_slots(self):
        s = scenario([0.2, 0.2], [0.1, 0.1], [2.5, -2.5], [ev()])
        costs = {seq: total_cost(np.array(seq, dtype=float).reshape(2, 1), s).total_eur
                 for seq in itertools.product((-2.5, 0.0, 2.5), repeat=2)}
        assert len(costs) == 9
        assert min(costs.values()) == 0.0
        assert costs[(-2.5, 2.5)] == 0.0

    def test_breakdown_sums(self):
        s = generate_scenario(1, 5, 12, seed=3)
        acts = np.random.default_rng(0).choice([-2.5, 0.0, 2.5], size=(12, 5))
        br = total_cost(acts, s)
        assert br.total_eur == pytest.approx(math.fsum(c for _, _, c in br.per_slot), rel=1e-9)
        assert all(b * e == 0 for b, e, _ in br.per_slot)

    def test_order_independent(self):
        s = generate_scenario(1, 40, 8, seed=3)
        acts = np.random.default_rng(1).choice([-2.5, 0.0, 2.5], size=(8, 40))
        assert total_cost(acts, s).total_eur == total_cost(acts[:, ::-1], s).total_eur

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            total_cost(np.zeros((3, 1)), one_slot(0.1, 0.05, 0.0))


class TestScenario:
    def test_validation(self):
        with pytest.raises(ValueError):
            scenario([0.1, 0.1], [0.05], [0.0, 0.0], [ev()])
        with pytest.raises(ValueError):
            scenario([-0.1], [0.05], [0.0], [ev()])
        with pytest.raises(ValueError):
            scenario([math.nan], [0.05], [0.0], [ev()])
        with pytest.raises(ValueError):
            scenario([0.1], [0.05], [0.0], [ev(0), ev(0)])

    def test_json_round_trip(self, tmp_path):
        s = generate_scenario(3, 7, 48, seed=11)
        s.save(tmp_path / "s.json")
        back = Scenario.load(tmp_path / "s.json")
        assert back == s
        assert back.to_json() == s.to_json()

    def test_json_key_order_and_precision(self):
        d = generate_scenario(2, 3, 4, seed=1).to_dict()
        assert list(d) == ["version", "n_slots", "slot_hours", "rho", "sigma", "volumes", "fleet", "level", "seed"]
        assert all(sig9(x) == x for x in d["rho"] + d["volumes"])

    def test_bad_files(self, tmp_path):
        with pytest.raises(DataError):
            Scenario.load(tmp_path / "missing.json")
        (tmp_path / "a.json").write_text("{")
        with pytest.raises(DataError):
            Scenario.load(tmp_path / "a.json")
        (tmp_path / "b.json").write_text('{"version": 2}')
        with pytest.raises(DataError):
            Scenario.load(tmp_path / "b.json")


class TestGenerate:
    def test_level0(self):
        s = generate_scenario(0, 5, 48, seed=4)
        assert len({(e.initial_soc_kwh, e.target_soc_kwh, e.capacity_kwh) for e in s.fleet}) == 1
        assert s.fleet[0].initial_soc_kwh == 30.0 and s.fleet[0].target_soc_kwh == 80.0

    def test_level2_caps(self):
        s = generate_scenario(2, 200, 48, seed=4)
        assert s.level.site_charge_cap_kw == 1800.0
        assert s.level.site_discharge_cap_kw == 1800.0

    def test_deterministic(self):
        a = generate_scenario(3, 20, 48, seed=9).to_json()
        assert a == generate_scenario(3, 20, 48, seed=9).to_json()
        assert a != generate_scenario(3, 20, 48, seed=10).to_json()

    def test_draw_ranges(self):
        s = generate_scenario(1, 300, 48, seed=2)
        init = np.array([e.initial_soc_kwh for e in s.fleet])
        tgt = np.array([e.target_soc_kwh for e in s.fleet])
        assert init.min() >= 10 and init.max() <= 50
        assert tgt.min() >= 70 and tgt.max() <= 100
        assert all(x > 0 for x in s.sigma)
        assert min(s.rho) >= 0

    def test_target_on_reachable_lattice(self):
        for e in generate_scenario(1, 300, 48, seed=5).fleet:
            top = e.initial_soc_kwh + math.floor((100 - e.initial_soc_kwh) / 2.5 + 1e-9) * 2.5
            assert e.target_soc_kwh <= top

    def test_volumes_scale_with_fleet(self):
        v1 = np.abs(generate_scenario(1, 10, 48, seed=3).volumes).mean()
        v2 = np.abs(generate_scenario(1, 100, 48, seed=3).volumes).mean()
        assert 5 < v2 / v1 < 20

    def test_external_prices(self):
        s = generate_scenario(1, 3, 4, seed=0, prices=[0.05, -0.01, 0.07, 0.08, 0.09])
        assert s.rho == (0.05, 0.0, 0.07, 0.08)
        with pytest.raises(DataError):
            generate_scenario(1, 3, 8, seed=0, prices=[0.05])

    def test_bad_params(self):
        with pytest.raises(ValueError):
            generate_scenario(1, 0, 48, seed=0)


class TestIngest:
    def test_hourly(self, tmp_path):
        p = tmp_path / "p.csv"
        p.write_text("timestamp,price_eur_per_mwh\n2018-03-01T18:00,45.0\n")
        assert ingest_prices(p, "hourly") == [0.045] * 4

    def test_quarter_and_negative(self, tmp_path):
        p = tmp_path / "p.csv"
        p.write_text("timestamp,price_eur_per_mwh\n2018-03-01T18:00,45.0\n2018-03-01T18:15,-5\n")
        assert ingest_prices(p, "quarter") == [0.045, -0.005]

    def test_malformed_row_names_line(self, tmp_path):
        p = tmp_path / "p.csv"
        p.write_text("timestamp,price_eur_per_mwh\n2018-03-01T18:00,45.0\n2018-03-01T18:15,abc\n")
        with pytest.raises(DataError, match=":3"):
            ingest_prices(p)

    def test_nan_and_bad_time(self, tmp_path):
        p = tmp_path / "p.csv"
        p.write_text("timestamp,price_eur_per_mwh\n2018-03-01T18:00,nan\n")
        with pytest.raises(DataError):
            ingest_prices(p)
        p.write_text("timestamp,price_eur_per_mwh\nyesterday,4\n")
        with pytest.raises(DataError):
            ingest_prices(p)

    def test_empty(self, tmp_path):
        p = tmp_path / "p.csv"
        p.write_text("")
        with pytest.raises(EmptyScenario):
            ingest_prices(p)
        p.write_text("timestamp,price_eur_per_mwh\n")
        with pytest.raises(EmptyScenario):
            ingest_prices(p)

    def test_bad_granularity(self, tmp_path):
        with pytest.raises(ValueError):
            ingest_prices(tmp_path / "x.csv", "daily")


@given(st.floats(1e-6, 1e6))
def test_sig9_floor(x):
    f = sig9_floor(x)
    assert f <= x
    assert sig9(f) == f
    assert x - f <= abs(x) * 1e-8
