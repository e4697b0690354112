import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import ev
from fleetdp.errors import ConstraintViolation, DataError
from fleetdp.fleet import (
    ConstraintLevel,
    Direction,
    EvSpec,
    EvState,
    FleetLattice,
    FleetState,
    Level,
    ViolationKind,
    is_admissible,
    reachability_bound,
    read_roster,
    terminal_ok,
    transition,
    write_roster,
)

L1 = ConstraintLevel(Level.L1)
L3 = ConstraintLevel(Level.L3, 1800.0, 1800.0)


def state(*socs, slot=0, dirs=None, flags=None):
    dirs = dirs or [Direction.NONE] * len(socs)
    flags = flags or [False] * len(socs)
    return FleetState(slot, tuple(EvState(s, d, f) for s, d, f in zip(socs, dirs, flags)))


class TestEvSpec:
    def test_valid(self):
        s = ev(init=30, target=80)
        assert s.step_kwh() == 2.5

    @pytest.mark.parametrize("kw", [
        dict(lo=40.0, init=30.0),
        dict(init=120.0),
        dict(target=5.0),
        dict(target=101.0),
        dict(rate=0.0),
    ])
    def test_rejects_bad_limits(self, kw):
        with pytest.raises(ValueError):
            ev(**kw)

    def test_l0_requires_identical_fleet(self):
        lvl = ConstraintLevel(Level.L0)
        lvl.check_fleet([ev(0), ev(1)])
        with pytest.raises(ValueError):
            lvl.check_fleet([ev(0), ev(1, init=40.0)])

    def test_site_caps_required_at_l2(self):
        with pytest.raises(ValueError):
            ConstraintLevel(Level.L2)
        with pytest.raises(ValueError):
            ConstraintLevel(Level.L2, 0.0, 10.0)


class TestTransition:
    def test_charge(self):
        nxt = transition(state(30.0), [2.5], [ev()], L1)
        assert nxt.slot == 1
        assert nxt.ev_states[0].soc_kwh == 32.5
        assert nxt.ev_states[0].last_direction == Direction.CHARGING

    def test_idle_keeps_direction(self):
        s = state(30.0, dirs=[Direction.DISCHARGING])
        nxt = transition(s, [0.0], [ev()], L1)
        assert nxt.ev_states[0].soc_kwh == 30.0
        assert nxt.ev_states[0].last_direction == Direction.DISCHARGING

    def test_second_reversal_in_window_rejected(self):
        s = state(50.0, slot=1, dirs=[Direction.CHARGING])
        nxt = transition(s, [-2.5], [ev(init=50.0)], L3)
        e = nxt.ev_states[0]
        assert e.reversal_used_in_hour and e.last_direction == Direction.DISCHARGING
        with pytest.raises(ConstraintViolation) as info:
            transition(nxt, [2.5], [ev(init=50.0)], L3)
        assert info.value.violations[0].kind == ViolationKind.REVERSAL
        assert info.value.violations[0].ev_id == 0

    def test_flag_resets_at_window_start(self):
        s = state(50.0, slot=3, dirs=[Direction.CHARGING])
        s = transition(s, [-2.5], [ev(init=50.0)], L3)  # reversal in window 0
        assert s.slot == 4
        s = transition(s, [2.5], [ev(init=50.0)], L3)  # window 1: budget refreshed
        assert s.ev_states[0].reversal_used_in_hour

    def test_reversal_allowed_below_l3(self):
        s = state(50.0, slot=1, dirs=[Direction.CHARGING], flags=[True])
        transition(s, [-2.5], [ev(init=50.0)], ConstraintLevel(Level.L2, 10.0, 10.0))


class TestAdmissible:
    def test_site_charge_cap(self):
        specs = [ev(i) for i in range(200)]
        lvl = ConstraintLevel(Level.L2, 1800.0, 1800.0)
        ok, v = is_admissible(state(*[30.0] * 200), [2.5] * 200, specs, lvl)
        assert not ok
        assert [x.kind for x in v] == [ViolationKind.SITE_CHARGE_CAP]
        ok, _ = is_admissible(state(*[30.0] * 200), [2.5] * 180 + [0.0] * 20, specs, lvl)
        assert ok

    def test_soc_upper(self):
        ok, v = is_admissible(state(100.0), [2.5], [ev(init=100.0)], L1)
        assert not ok and v[0].kind == ViolationKind.SOC_UPPER

    def test_soc_lower_and_rate(self):
        ok, v = is_admissible(state(10.0), [-2.5], [ev(init=10.0)], L1)
        assert v[0].kind == ViolationKind.SOC_LOWER
        ok, v = is_admissible(state(30.0), [5.0], [ev()], L1)
        assert v[0].kind == ViolationKind.RATE

    def test_dimension(self):
        ok, v = is_admissible(state(30.0), [0.0, 0.0], [ev()], L1)
        assert not ok and v[0].kind == ViolationKind.DIMENSION

    @given(st.lists(st.floats(10, 100), min_size=1, max_size=6), st.sampled_from(list(Level)), st.integers(0, 47))
    def test_idle_always_admissible(self, socs, level, slot):
        specs = [ev(i, init=s, target=s) for i, s in enumerate(socs)] if level else [ev(i) for i in range(len(socs))]
        if level == Level.L0:
            socs = [30.0] * len(socs)
        caps = (10.0, 10.0) if level >= 2 else (None, None)
        s = state(*socs, slot=slot, dirs=[Direction.DISCHARGING] * len(socs), flags=[True] * len(socs))
        ok, v = is_admissible(s, [0.0] * len(socs), specs, ConstraintLevel(level, *caps))
        assert ok and v == []


def test_terminal_ok():
    specs = [ev(0, target=80.0), ev(1, target=80.0)]
    assert terminal_ok(state(80.0, 85.0, slot=4), specs, 4)
    assert not terminal_ok(state(80.0, 77.5, slot=4), specs, 4)
    assert terminal_ok(FleetState(4, ()), [], 4)
    with pytest.raises(ValueError):
        terminal_ok(state(80.0, 85.0, slot=3), specs, 4)


class TestReachability:
    def test_examples(self):
        spec = ev(init=70.0, target=90.0)
        assert reachability_bound(EvState(70.0), spec, 8, L1) == 90.0
        assert reachability_bound(EvState(70.0), spec, 7, L1) == 87.5
        assert reachability_bound(EvState(100.0), ev(init=100.0), 20, L1) == 100.0

    def test_capped_at_capacity(self):
        assert reachability_bound(EvState(31.0), ev(init=31.0), 100, L1) == 100.0

    def test_l3_lock_costs_window_slots(self):
        e = EvState(50.0, Direction.DISCHARGING, True)
        assert reachability_bound(e, ev(init=50.0), 10, L3, slot=1) == 50.0 + 7 * 2.5
        assert reachability_bound(e, ev(init=50.0), 10, L3, slot=4) == 50.0 + 10 * 2.5

    def test_negative_slots(self):
        with pytest.raises(ValueError):
            reachability_bound(EvState(50.0), ev(), -1, L1)

    @given(st.floats(10, 100), st.integers(0, 60), st.integers(0, 60), st.floats(0, 20))
    def test_monotone(self, soc, a, b, bump):
        lo, hi = sorted((a, b))
        spec = ev(init=10.0)
        assert reachability_bound(EvState(soc), spec, lo, L1) <= reachability_bound(EvState(soc), spec, hi, L1)
        soc2 = min(100.0, soc + bump)
        assert reachability_bound(EvState(soc), spec, lo, L1) <= reachability_bound(EvState(soc2), spec, lo, L1) + 1e-9


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4), st.integers(1, 24))
def test_random_walks_keep_invariants(seed, d, n):
    """Admissible random actions keep SoC in bounds and at most one reversal per window."""
    rng = np.random.default_rng(seed)
    specs = [ev(j, init=float(rng.uniform(10, 100)), target=10.0) for j in range(d)]
    lvl = ConstraintLevel(Level.L3, 10.0 * d * 0.9, 10.0 * d * 0.9)
    s = FleetState.initial(specs)
    history = []
    for _ in range(n):
        for _ in range(20):
            act = rng.choice([-2.5, 0.0, 2.5], size=d)
            if is_admissible(s, act, specs, lvl)[0]:
                break
        else:
            act = np.zeros(d)
        s = transition(s, act, specs, lvl)
        history.append(act)
        for spec, e in zip(specs, s.ev_states):
            assert spec.min_soc_kwh - 1e-9 <= e.soc_kwh <= spec.capacity_kwh + 1e-9
    acts = np.array(history)
    for j in range(d):
        for w in range(0, n, 4):
            last = 0
            prior = acts[:w, j][acts[:w, j] != 0]
            if len(prior):
                last = np.sign(prior[-1])
            flips = 0
            for x in acts[w:w + 4, j]:
                if x != 0:
                    if last and np.sign(x) != last:
                        flips += 1
                    last = np.sign(x)
            assert flips <= 1


def test_lattice_round_trip():
    specs = [ev(0, init=31.0, target=80.0), ev(1, init=12.0, target=95.0)]
    lat = FleetLattice(specs, L3)
    assert list(lat.up) == [27, 35]
    assert list(lat.down) == [8, 0]
    assert list(lat.target) == [20, 34]
    s = state(36.0, 12.0, slot=5, dirs=[Direction.CHARGING, Direction.NONE], flags=[True, False])
    back = lat.decode(5, *lat.encode(s))
    assert back == s


def test_roster_round_trip(tmp_path):
    specs = [ev(0, init=31.5, target=80.0), ev(7, cap=60.0, rate=7.4, init=20.0, target=50.0)]
    write_roster(specs, tmp_path / "r.csv")
    assert read_roster(tmp_path / "r.csv") == specs
    (tmp_path / "bad.csv").write_text("id,capacity_kwh\n1,2\n")
    with pytest.raises(DataError):
        read_roster(tmp_path / "bad.csv")
    (tmp_path / "bad2.csv").write_text(
        "id,capacity_kwh,min_soc_kwh,max_rate_kw,initial_soc_kwh,target_soc_kwh\n1,100,10,10,x,80\n")
    with pytest.raises(DataError, match=":2"):
        read_roster(tmp_path / "bad2.csv")
