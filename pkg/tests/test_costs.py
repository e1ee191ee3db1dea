from fractions import Fraction

import pytest
from hypothesis import given, strategies as st

from ccasim.costs import (
    PRIMITIVES,
    REFERENCE_MEASUREMENTS,
    MEASURED_ROWS,
    ZERO,
    CostDelta,
    CostWeights,
    NoiseModel,
    PmuLedger,
    calibrate,
    default_weights,
    find_measurement,
    load_measurements,
    measurements_to_json,
    predict,
    rmi_handler,
    round_half_up,
    summarize,
    weight,
)
from ccasim.errors import EmptySamples, NegativeWeight, UnderdeterminedSystem, UnknownPrimitive
from ccasim.gpt import build_table, reference_layout
from ccasim.world import World

MIB = 1 << 20
REF_BYTES = build_table(reference_layout()).byte_size


def test_charge_accumulates_global_counter():
    ledger = PmuLedger(CostWeights({"smc_rt": weight(182, 421)}))
    ledger.charge(World.ROOT, "smc_rt", 3)
    assert ledger.read(World.NORMAL) == weight(546, 1263)
    assert ledger.per_world[World.ROOT] == weight(546, 1263)


def test_isolated_counters():
    ledger = PmuLedger(CostWeights({"smc_rt": weight(1, 2)}), cross_world=False)
    ledger.charge(World.ROOT, "smc_rt")
    assert ledger.read(World.NORMAL) == ZERO
    assert ledger.read(World.ROOT) == weight(1, 2)


def test_unknown_primitive():
    with pytest.raises(UnknownPrimitive):
        PmuLedger().charge(World.ROOT, "nope")
    with pytest.raises(UnknownPrimitive):
        CostDelta().add(World.ROOT, "nope")
    with pytest.raises(NegativeWeight):
        CostWeights({"smc_rt": weight(-1, 0)})


def test_calibrated_weights():
    w = calibrate(MEASURED_ROWS).weights
    assert w[rmi_handler("VERSION")] == weight(62, 213)
    assert w["smc_rt"] == weight(182, 421)
    assert float(w["delegate_boot_path"].instr) == pytest.approx(584.9, abs=0.05)


def test_calibration_needs_two_boot_sizes():
    rows = [r for r in MEASURED_ROWS if not (r.scenario == "cvm_boot" and r.ram_size == 1024 * MIB)]
    with pytest.raises(UnderdeterminedSystem):
        calibrate(rows)
    with pytest.raises(UnderdeterminedSystem):
        calibrate([r for r in MEASURED_ROWS if r.scenario != "smc_rt"])


def test_fixed_subweights_too_large():
    with pytest.raises(NegativeWeight):
        calibrate(MEASURED_ROWS, {"nse_lookup": weight(10_000, 10_000)})


def test_calibration_reproduces_identifiable_rows():
    cal = calibrate(REFERENCE_MEASUREMENTS, shadow_table_bytes=REF_BYTES)
    for row in REFERENCE_MEASUREMENTS:
        if row.scenario == "cvm_boot" and row.backend == "two-gpt":
            continue
        assert predict(row, cal.weights, shadow_table_bytes=REF_BYTES) == row.mean
    for key, res in cal.residuals.items():
        row = find_measurement(*key)
        assert abs(res.instr) <= row.instr * Fraction(5, 1000)
        assert abs(res.cycles) <= row.cycles * Fraction(5, 1000)


def test_default_weights_match_calibration():
    cal = calibrate(REFERENCE_MEASUREMENTS, shadow_table_bytes=REF_BYTES)
    assert default_weights().to_json_dict() == cal.weights.to_json_dict()


def test_weights_json_round_trip(tmp_path):
    w = default_weights()
    path = tmp_path / "w.json"
    path.write_text(w.dumps())
    assert CostWeights.load(path).to_json_dict() == w.to_json_dict()
    for p in PRIMITIVES:
        assert CostWeights.load(path)[p] == w[p]


def test_measurement_json_round_trip():
    assert load_measurements(measurements_to_json(MEASURED_ROWS)) == [
        r._replace(stdev_instr=Fraction(0), stdev_cycles=Fraction(0)) for r in MEASURED_ROWS]


def test_summarize_exact():
    s = summarize([(10, 20), (12, 24)])
    assert s.mean == (11.0, 22.0)
    assert s.stdev_instr == pytest.approx(2 ** 0.5)
    with pytest.raises(EmptySamples):
        summarize([])


def test_summarize_noise_is_seeded_and_close():
    samples = [(2865, 7988)] * 100
    noise = NoiseModel(seed=7, stdev_instr=187, stdev_cycles=365)
    a, b = summarize(samples, noise), summarize(samples, noise)
    assert a == b
    assert abs(a.stdev_instr - 187) / 187 < 0.2
    assert abs(a.stdev_cycles - 365) / 365 < 0.2
    assert summarize(samples, NoiseModel(8, 187, 365)) != a


def test_round_half_up():
    assert round_half_up(Fraction(5, 2)) == 3
    assert round_half_up(Fraction(9, 4)) == 2


deltas = st.lists(st.tuples(st.sampled_from(list(World)), st.sampled_from(PRIMITIVES), st.integers(0, 50)),
                  max_size=20)


@given(a=deltas, b=deltas)
def test_delta_total_is_additive(a, b):
    w = default_weights()
    da, db = CostDelta(), CostDelta()
    for world, prim, n in a:
        da.add(world, prim, n)
    for world, prim, n in b:
        db.add(world, prim, n)
    assert (da + db).total(w) == da.total(w) + db.total(w)
    assert da.scaled(3).total(w) == da.total(w) * 3


@given(trace=deltas, cut=st.integers(0, 20))
def test_ledger_split_additivity_and_monotonicity(trace, cut):
    w = default_weights()
    whole, head, tail = PmuLedger(w), PmuLedger(w), PmuLedger(w)
    isolated = PmuLedger(w, cross_world=False)
    prev = ZERO
    for i, (world, prim, n) in enumerate(trace):
        whole.charge(world, prim, n)
        isolated.charge(world, prim, n)
        (head if i < cut else tail).charge(world, prim, n)
        cur = whole.read(World.REALM)
        assert cur.instr >= prev.instr and cur.cycles >= prev.cycles
        prev = cur
    for key, value in whole.counters().items():
        assert value == head.counters()[key] + tail.counters()[key]
    assert whole.read(World.NORMAL) == sum((isolated.read(x) for x in World), ZERO)
