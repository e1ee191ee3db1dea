"""Acceptance checks, shared by ``ccasim verify`` and the test suite.

Each check returns a :class:`Check`; none of them raise on failure.
"""

from __future__ import annotations

import dataclasses
import time
from fractions import Fraction
from typing import Callable, Dict, Iterable, List, Optional

import numpy as np

from ccasim import bench
from ccasim.board import load_profile
from ccasim.costs import PRIMITIVES, MEASURED_ROWS, ZERO, CostWeights, PmuLedger, Weight, calibrate, default_weights
from ccasim.errors import CcaSimError, IllegalGranuleTransition, InvalidSecurityState
from ccasim.gpt import (
    BackendKind,
    Gpi,
    GranuleOracle,
    SingleGpt,
    backend_delegate,
    backend_undelegate,
    build_table,
    gpt_init,
    gpt_set,
    gpt_walk,
    make_layout,
    reference_layout,
    small_layout,
)
from ccasim.gpt.layout import GRANULE
from ccasim.host import CvmConfig, boot_system
from ccasim.monitor import Monitor, Regime, boot_sequence
from ccasim.rmm import livelock_trace
from ccasim.world import EL, World, derive_world

GIB = 1 << 30
MIB = 1 << 20


@dataclasses.dataclass
class Check:
    number: int
    title: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        mark = "PASS" if self.passed else "FAIL"
        return f"[{mark}] criterion {self.number:>2}: {self.title} -- {self.detail} ({self.seconds:.2f}s)"


def _timed(number: int, title: str, fn: Callable[[], tuple]) -> Check:
    start = time.perf_counter()
    try:
        passed, detail = fn()
    except CcaSimError as exc:
        passed, detail = False, f"raised {type(exc).__name__}: {exc}"
    return Check(number, title, bool(passed), detail, time.perf_counter() - start)


# --------------------------------------------------------------------------
# 1-4: reproduction of the reference numbers

MICRO_EXPECTED = (
    ("smc_rt", "single", 182, 421),
    ("rmi_rt", "single", 932, 3370),
    ("rmi_version", "single", 994, 3583),
    ("rmi_delegate", "single", 2865, 7988),
    ("rmi_delegate", "two-gpt", 3488, 8654),
)


def check_microbenchmarks() -> tuple:
    bad = []
    slowest = 0.0
    for sid, backend, instr, cycles in MICRO_EXPECTED:
        t = time.perf_counter()
        row = bench.run_scenario(bench.Scenario(sid, backend))
        took = time.perf_counter() - t
        slowest = max(slowest, took)
        if (row.mean_instr, row.mean_cycles) != (instr, cycles) or took >= 1.0:
            bad.append(f"{sid}/{backend}=({row.mean_instr}, {row.mean_cycles}) in {took:.2f}s")
    if bad:
        return False, "; ".join(bad)
    return True, f"5 rows exact, slowest {slowest:.2f}s"


def check_overheads() -> tuple:
    single = [bench.run_scenario(bench.Scenario("rmi_delegate", "single", iterations=1)),
              bench.run_scenario(bench.Scenario("cvm_boot", "single", 1 * GIB, iterations=1))]
    two = [bench.run_scenario(bench.Scenario("rmi_delegate", "two-gpt", iterations=1)),
           bench.run_scenario(bench.Scenario("cvm_boot", "two-gpt", 1 * GIB, iterations=1))]
    dlg, boot = bench.compare(single, two)
    ok = (abs(dlg.instr_pct - 21.7) <= 0.1 and abs(dlg.cycles_pct - 8.3) <= 0.1
          and abs(boot.instr_pct - 1.19) <= 0.05 and abs(boot.cycles_pct - 1.15) <= 0.05)
    detail = (f"delegate {bench.Overhead.display(dlg.instr_pct)}/{bench.Overhead.display(dlg.cycles_pct)}, "
              f"1G boot {bench.Overhead.display(boot.instr_pct)}/{bench.Overhead.display(boot.cycles_pct)}")
    return ok, detail


def check_boot_calibration() -> tuple:
    cal = calibrate(MEASURED_ROWS)
    worst = 0.0
    for row in (r for r in MEASURED_ROWS if r.scenario == "cvm_boot"):
        got = bench.run_scenario(bench.Scenario("cvm_boot", row.backend, row.ram_size, iterations=1), cal.weights)
        for mean, ref in ((got.mean_instr, row.instr), (got.mean_cycles, row.cycles)):
            worst = max(worst, abs(mean * got.scale - float(ref)) / float(ref) * 100)
    monotone = True
    sizes = (16 * MIB, 64 * MIB, 256 * MIB, 512 * MIB, 1 * GIB, 2 * GIB)
    for backend in ("single", "two-gpt", "shadow"):
        prev = None
        for size in sizes:
            got = bench.run_scenario(bench.Scenario("cvm_boot", backend, size, iterations=1), cal.weights)
            cur = (got.mean_instr, got.mean_cycles)
            if prev is not None and not (cur[0] > prev[0] and cur[1] > prev[1]):
                monotone = False
            prev = cur
    return worst <= 0.5 and monotone, f"worst boot error {worst:.3f}%, monotone={monotone}"


def check_shadow() -> tuple:
    row = bench.run_scenario(bench.Scenario("shadow_gpt_create", "shadow"))
    exact = (row.mean_instr, row.mean_cycles) == (50.86, 34.61)
    identical = row.extra.get("bit_identical") is True
    for layout in (small_layout(), make_layout(3 * GIB, device=(GIB, 256 * MIB))):
        backend, _ = gpt_init(layout, BackendKind.SHADOW)
        identical &= backend.live.dump() == build_table(layout, cached=False).dump()
    return exact and identical, f"({row.mean_instr}M, {row.mean_cycles}M), bit-identical={identical}"


# --------------------------------------------------------------------------
# 5-6: GPT engine


def _random_range(rng: np.random.Generator, granules: int) -> tuple:
    if rng.random() < 0.02:
        n = int(rng.integers(1, granules + 1))
    else:
        n = int(min(granules, rng.geometric(1 / 64)))
    start = int(rng.integers(0, granules - n + 1))
    return start * GRANULE, n


ALL_GPI = list(Gpi)


def gpt_oracle_run(layout, ops: int, seed: int, full_every: int) -> Optional[str]:
    """Random set/delegate/undelegate mix against the flat oracle; error text or None."""
    rng = np.random.default_rng(seed)
    oracle = GranuleOracle.from_layout(layout)
    backend = SingleGpt(build_table(layout), layout)
    n = layout.granule_count
    for step in range(ops):
        base, count = _random_range(rng, n)
        size = count * GRANULE
        kind = rng.integers(0, 3)
        if kind == 0:
            gpi = ALL_GPI[int(rng.integers(0, len(ALL_GPI)))]
            table, token, _ = gpt_set(backend.gpt, base, size, gpi)
            backend = SingleGpt(table, layout)
            oracle.set(base, size, gpi)
        else:
            src, dst = (Gpi.NON_SECURE, Gpi.REALM) if kind == 1 else (Gpi.REALM, Gpi.NON_SECURE)
            a = base // GRANULE
            legal = layout.is_delegable(base, size) and all(oracle.codes[i] == src for i in range(a, a + count))
            op = backend_delegate if kind == 1 else backend_undelegate
            try:
                backend, _, _ = op(backend, base, count)
                if not legal:
                    return f"step {step}: illegal transition accepted at {base:#x}+{count}"
                oracle.set(base, size, dst)
            except IllegalGranuleTransition:
                if legal:
                    return f"step {step}: legal transition rejected at {base:#x}+{count}"
        probes = [base, base + size - GRANULE] + [int(x) * GRANULE for x in rng.integers(0, n, 4)]
        for pa in probes:
            if gpt_walk(backend.gpt, pa) is not oracle.lookup(pa):
                return f"step {step}: pa {pa:#x} table={gpt_walk(backend.gpt, pa).name} oracle={oracle.lookup(pa).name}"
        if full_every and (step + 1) % full_every == 0:
            if not np.array_equal(backend.gpt.flat_codes(), np.frombuffer(bytes(oracle.codes), dtype=np.uint8)):
                return f"step {step}: full-table mismatch"
    if backend.gpt.dump() != oracle.dump():
        return "final serialized dump differs from oracle"
    return None


def check_gpt_oracle() -> tuple:
    big = gpt_oracle_run(reference_layout(4 * GIB), 100_000, seed=5, full_every=10_000)
    if big:
        return False, f"4 GB layout: {big}"
    small = gpt_oracle_run(small_layout(), 5_000, seed=6, full_every=1)
    if small:
        return False, f"16 MB layout: {small}"
    layout = small_layout()
    rng = np.random.default_rng(7)
    oracle = GranuleOracle.from_layout(layout)
    table = build_table(layout)
    for _ in range(200):
        base, count = _random_range(rng, layout.granule_count)
        gpi = ALL_GPI[int(rng.integers(0, len(ALL_GPI)))]
        table, _, _ = gpt_set(table, base, count * GRANULE, gpi)
        oracle.set(base, count * GRANULE, gpi)
        for g in range(layout.granule_count):
            if gpt_walk(table, g * GRANULE) is not oracle.lookup(g * GRANULE):
                return False, f"16 MB exhaustive walk mismatch at granule {g}"
    return True, "1e5 ops on 4 GB and exhaustive 16 MB agree"


VALID_PAIRS = {(int(Gpi.NON_SECURE), int(Gpi.ROOT)), (int(Gpi.REALM), int(Gpi.NON_SECURE))}


def check_two_gpt() -> tuple:
    layout = make_layout(256 * MIB, device=(128 * MIB, 16 * MIB))
    backend, _ = gpt_init(layout, BackendKind.TWO_GPT)
    init = (backend.gpt1.dump(), backend.gpt2.dump())
    ram = np.zeros(layout.granule_count, dtype=bool)
    for r in layout.ram_regions():
        ram[r.base // GRANULE:r.end // GRANULE] = True
    delegated = np.zeros(layout.granule_count, dtype=bool)
    pair_code = lambda a, b: a.astype(np.int32) * 16 + b
    valid = np.array([a * 16 + b for a, b in VALID_PAIRS])
    rng = np.random.default_rng(11)
    accepted = 0
    for step in range(10_000):
        base, count = _random_range(rng, layout.granule_count)
        count = min(count, 256)
        delegate = bool(rng.integers(0, 2))
        op = backend_delegate if delegate else backend_undelegate
        before = (backend.gpt1, backend.gpt2)
        try:
            backend, _, _ = op(backend, base, count)
            a = base // GRANULE
            delegated[a:a + count] = delegate
            accepted += 1
        except IllegalGranuleTransition:
            if backend.gpt1 is not before[0] or backend.gpt2 is not before[1]:
                return False, f"step {step}: rejected op changed state"
        codes = pair_code(backend.gpt1.flat_codes(), backend.gpt2.flat_codes())
        if not np.isin(codes[ram], valid).all():
            return False, f"step {step}: RAM granule outside the coupled states"
    edges = np.flatnonzero(np.diff(np.concatenate([[0], delegated.astype(np.int8), [0]])))
    for start, stop in zip(edges[0::2], edges[1::2]):
        backend, _, _ = backend_undelegate(backend, int(start) * GRANULE, int(stop - start))
    restored = (backend.gpt1.dump(), backend.gpt2.dump()) == init

    host = boot_system("rk3588", "two-gpt")
    post_init = tuple(t.dump() for t in host.monitor.backend.tables())
    report = host.cvm_boot(CvmConfig(ram_size=64 * MIB, backend="two-gpt"))
    host.teardown(report.handle)
    system_restored = tuple(t.dump() for t in host.monitor.backend.tables()) == post_init
    ok = restored and system_restored
    return ok, f"{accepted} accepted transitions, teardown restores dump={restored and system_restored}"


# --------------------------------------------------------------------------
# 7-8: world model and TLB modes

ENCODING_TABLE = {(1, 0): World.NORMAL, (1, 1): World.REALM, (0, 0): World.SECURE}


def check_world_model() -> tuple:
    for ns in (0, 1):
        for nse in (0, 1):
            for el in EL:
                try:
                    got = derive_world(ns, nse, el)
                except InvalidSecurityState:
                    got = None
                want = World.ROOT if el == EL.EL3 else ENCODING_TABLE.get((ns, nse))
                if got is not want:
                    return False, f"derive_world({ns}, {nse}, {el.name}) = {got}"

    host = boot_system("rk3588", "single")
    core = host.monitor.cores[0]
    core.trace = []
    report = host.cvm_boot(CvmConfig(ram_size=16 * MIB))
    host.run_guest(report.handle, livelock_trace(20))
    host.teardown(report.handle)
    trace = core.trace
    realm_instants = [t for t in trace if t[0] is World.REALM]
    if not realm_instants or any(ns != 1 for _, ns, _ in realm_instants):
        return False, "NS pinning violated or realm never active"

    monitor = host.monitor
    rng = np.random.default_rng(13)
    targets = (World.NORMAL, World.REALM, World.SECURE)
    expected = {w: s.as_tuple() for w, s in core.saved.items()}
    expected[core.lower_world] = core.live.as_tuple()
    switches = 0
    for _ in range(10_000):
        for _ in range(int(rng.integers(1, 6))):
            if rng.random() < 0.5:
                idx = int(rng.integers(0, 31))
                core.live.x[idx] = int(rng.integers(0, 1 << 63))
                field = ("ttbr0_el2", "ttbr1_el2", "cntp_ctl_el0", "cntp_cval_el0", "afsr0_el2", "afsr1_el2")[
                    int(rng.integers(0, 6))]
                setattr(core.live, field, int(rng.integers(0, 1 << 63)))
                expected[core.lower_world] = core.live.as_tuple()
            else:
                target = targets[int(rng.integers(0, 3))]
                monitor.switch(core, target)
                switches += 1
                if core.live.as_tuple() != expected[target] or core.lower_world is not target:
                    return False, f"context of {target.value} not restored after {switches} switches"
                if target is World.REALM and core.regs.scr_el3_ns != 1:
                    return False, "NS dropped while realm active"
    return True, f"encoding table total, {len(realm_instants)} realm instants NS=1, {switches} switches restore exactly"


_WORLD_INDEX = {w: i for i, w in enumerate(World)}


def _walker(world: World, asid: int, page: int) -> int:
    """Stand-in page tables: every (world, ASID) pair maps pages differently."""
    return ((_WORLD_INDEX[world] * 1_000_003 + asid * 7_919 + page * 31) & 0xFFFFF) | (1 << 24)


def _tlb_trace(monitor: Monitor, ops: List[tuple]) -> tuple:
    core = monitor.cores[0]
    outcomes = []
    empty_after_switch = True
    for op in ops:
        if op[0] == "switch":
            before = core.lower_world
            monitor.switch(core, op[1])
            if {before, op[1]} == {World.NORMAL, World.REALM} and not monitor.profile.asid_partition_mode:
                empty_after_switch &= not any(k[2] is Regime.EL2 for k in core.tlb.entries)
        else:
            _, host_asid, rmm_asid, va = op
            asid = rmm_asid if core.lower_world is World.REALM else host_asid
            outcomes.append(monitor.translate(core, asid, va, _walker))
    return outcomes, empty_after_switch, core.tlb


def check_tlb_modes() -> tuple:
    flush_profile = load_profile("rk3588")
    part_profile = flush_profile.with_asid_partition(True)
    rng = np.random.default_rng(17)
    total_flush_switch = 0
    for trial in range(200):
        ops = []
        world = World.NORMAL
        for _ in range(200):
            if rng.random() < 0.2:
                world = World.REALM if world is World.NORMAL else World.NORMAL
                ops.append(("switch", world))
            else:
                ops.append(("xlat", int(rng.integers(0, 4)), 0xFF00 + int(rng.integers(0, 4)),
                            int(rng.integers(0, 16)) << 12))
        truth = []
        w = World.NORMAL
        for op in ops:
            if op[0] == "switch":
                w = op[1]
            else:
                truth.append(_walker(w, op[2] if w is World.REALM else op[1], op[3] >> 12))
        results = []
        for profile in (flush_profile, part_profile):
            monitor, _ = boot_sequence(profile, small_layout())
            before = monitor.cores[0].tlb.flushes
            outcomes, empty, tlb = _tlb_trace(monitor, ops)
            results.append((outcomes, empty, tlb.flushes - before, tlb))
        (o_flush, empty, n_flush, _), (o_part, _, n_part, tlb_part) = results
        if not empty:
            return False, f"trial {trial}: EL2 entries survived a realm/normal switch in flush mode"
        if o_flush != o_part or o_flush != truth:
            return False, f"trial {trial}: translation outcomes differ between modes"
        if n_part != 0:
            return False, f"trial {trial}: {n_part} flushes in partition mode"
        for key in tlb_part.entries:
            if key[2] is Regime.EL2 and not (key[1] in tlb_part.reserved_asids or key[1] < 0xFF00):
                return False, "ASID outside both ranges"
        total_flush_switch += n_flush
    return True, f"200 traces agree; {total_flush_switch} flushes in flush mode, 0 in partition mode"


# --------------------------------------------------------------------------
# 9-12


def check_livelock() -> tuple:
    start = time.perf_counter()
    results = {}
    for fix in (False, True):
        host = boot_system("rk3588", "single")
        report = host.cvm_boot(CvmConfig(ram_size=2 * MIB))
        rec = host.rec(report.handle)
        seq, _ = host.rmm.rec_run(rec, livelock_trace(1000), fp_timer_fix=fix)
        host2 = boot_system("rk3588", "single")
        report2 = host2.cvm_boot(CvmConfig(ram_size=2 * MIB))
        seq2, _ = host2.rmm.rec_run(host2.rec(report2.handle), livelock_trace(1000), fp_timer_fix=fix)
        results[fix] = (seq.pc_end - seq.pc_start, seq.exits == seq2.exits and seq.pc_end == seq2.pc_end)
    took = time.perf_counter() - start
    ok = results[False][0] == 0 and results[True][0] == 10_000 and results[False][1] and results[True][1]
    return ok and took < 1.0, f"retired off={results[False][0]} on={results[True][0]}, {took:.2f}s"


def check_fwb() -> tuple:
    off = bench.run_scenario(bench.Scenario("fwb_demo", profile="rk3588", fwb_maintenance=False))
    on = bench.run_scenario(bench.Scenario("fwb_demo", profile="rk3588", fwb_maintenance=True))
    fvp = bench.run_scenario(bench.Scenario("fwb_demo", profile="fvp-rme", fwb_maintenance=False))
    fr = (off.extra["stale_fraction"], on.extra["stale_fraction"], fvp.extra["stale_fraction"])
    return fr == (1.0, 0.0, 0.0), f"stale fraction off={fr[0]:.0%} on={fr[1]:.0%} fvp-rme={fr[2]:.0%}"


def _random_weights(rng: np.random.Generator) -> CostWeights:
    base = default_weights()
    changes = {p: Weight(Fraction(int(rng.integers(0, 5000)), int(rng.integers(1, 7))),
                         Fraction(int(rng.integers(0, 5000)))) for p in PRIMITIVES}
    return base.with_weights(changes)


def _sum(counters: Iterable[Weight]) -> Weight:
    return sum(counters, ZERO)


def check_ledger_laws() -> tuple:
    rng = np.random.default_rng(19)
    worlds = list(World)
    prims = list(PRIMITIVES)
    for trial in range(10_000):
        weights = default_weights() if trial % 2 else _random_weights(rng)
        length = int(rng.integers(0, 24))
        trace = [(worlds[int(rng.integers(0, 4))], prims[int(rng.integers(0, len(prims)))], int(rng.integers(0, 6)))
                 for _ in range(length)]
        cut = int(rng.integers(0, length + 1))
        whole, first, second = (PmuLedger(weights, cross_world=True) for _ in range(3))
        isolated = PmuLedger(weights, cross_world=False)
        prev = ZERO
        for i, (w, p, k) in enumerate(trace):
            whole.charge(w, p, k)
            isolated.charge(w, p, k)
            (first if i < cut else second).charge(w, p, k)
            cur = whole.read(World.NORMAL)
            if cur.instr < prev.instr or cur.cycles < prev.cycles:
                return False, f"trial {trial}: global counter decreased"
            prev = cur
        a, b, ab = first.counters(), second.counters(), whole.counters()
        if any(ab[key] != a[key] + b[key] for key in ab):
            return False, f"trial {trial}: additivity violated"
        if whole.read(World.REALM) != _sum(isolated.read(w) for w in worlds):
            return False, f"trial {trial}: cross-world total differs from per-world sum"
    return True, "10^4 random traces: additive, global equals per-world sum"


def check_determinism() -> tuple:
    for noise in (False, True):
        scenarios = bench.expand("all", iterations=20, seed=1234, noise=noise, rounds=100)
        outs = [bench.emit_table(bench.run_all(scenarios), "json") for _ in range(2)]
        if outs[0] != outs[1]:
            return False, f"JSON differs between runs (noise={noise})"
    return True, "all scenarios byte-identical across two runs, noise on and off"


CRITERIA: Dict[int, tuple] = {
    1: ("reference microbenchmarks exact", check_microbenchmarks),
    2: ("case-study overheads", check_overheads),
    3: ("calibrated boot reproduction", check_boot_calibration),
    4: ("shadow GPT cost and copy identity", check_shadow),
    5: ("GPT oracle equivalence", check_gpt_oracle),
    6: ("two-GPT coupling invariant", check_two_gpt),
    7: ("world-model properties", check_world_model),
    8: ("TLB flush vs ASID partition", check_tlb_modes),
    9: ("FP/timer livelock reproduction", check_livelock),
    10: ("FWB hazard reproduction", check_fwb),
    11: ("PMU ledger laws", check_ledger_laws),
    12: ("determinism", check_determinism),
}


def run_check(number: int) -> Check:
    title, fn = CRITERIA[number]
    return _timed(number, title, fn)


def run_all(only: Optional[Iterable[int]] = None) -> List[Check]:
    numbers = sorted(CRITERIA) if only is None else list(only)
    return [run_check(n) for n in numbers]
