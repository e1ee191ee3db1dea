import pytest
from hypothesis import given, settings, strategies as st

from ccasim.board import initial_registers, load_profile
from ccasim.errors import InvalidParams, NotOwnedGranule, RealmNotActive, Unmapped, UnsupportedOnProfile, UnsupportedVaBits
from ccasim.gpt import small_layout
from ccasim.gpt.layout import GRANULE
from ccasim.rmm import (
    FP_USE,
    HVC,
    LEGAL_EDGES,
    TIMER_FIRE,
    Cacheability,
    Event,
    ExitReason,
    GranuleState,
    RealmState,
    RmiCommand,
    RmiStatus,
    Rmm,
    RsiCommand,
    RsiStatus,
    TimerMaskPath,
    compute_start_level,
    livelock_trace,
    load_trace,
    mask_timer,
    parse_trace,
    retire,
)
from ccasim.world import World

MIB = 1 << 20
BASE = 2 * MIB


def brute_force_start_level(va_bits, has_ttst):
    # Smallest number of 9-bit levels above the 4 KB page offset.
    levels = next(n for n in range(1, 5) if 12 + 9 * n >= va_bits)
    start = 4 - levels
    if start == 3 and not has_ttst:
        return 2, 2, 26
    return start, levels, va_bits


@pytest.mark.parametrize("has_ttst", [False, True])
def test_start_level_table(has_ttst):
    for va_bits in range(21, 49):
        got = compute_start_level(va_bits, has_ttst)
        assert (got.start_level, got.walk_depth, got.va_bits) == brute_force_start_level(va_bits, has_ttst)


def test_start_level_examples():
    assert compute_start_level(21, True).start_level == 3
    assert compute_start_level(21, False).start_level == 2
    assert compute_start_level(48, False).start_level == 0
    for bad in (20, 49):
        with pytest.raises(UnsupportedVaBits):
            compute_start_level(bad, True)


def make_rmm(profile="rk3588"):
    return Rmm(load_profile(profile), small_layout())


def rmi(rmm, cmd, *args):
    return rmm.rmi_handle(int(cmd), args)[0]


def active_realm(rmm, base=BASE):
    assert rmi(rmm, RmiCommand.GRANULE_DELEGATE, base, 8).ok
    assert rmi(rmm, RmiCommand.REALM_CREATE, base, base + GRANULE).ok
    assert rmi(rmm, RmiCommand.REC_CREATE, base, base + 2 * GRANULE).ok
    assert rmi(rmm, RmiCommand.REALM_ACTIVATE, base).ok
    return rmm.realms[base], rmm.recs[base + 2 * GRANULE]


def test_lifecycle():
    rmm = make_rmm()
    assert rmi(rmm, RmiCommand.VERSION).values == (1, 0)
    realm, rec = active_realm(rmm)
    assert realm.state is RealmState.ACTIVE
    assert rmm.state_of(BASE) is GranuleState.RD
    assert rmm.state_of(BASE + GRANULE) is GranuleState.RTT
    assert rmm.state_of(BASE + 2 * GRANULE) is GranuleState.REC
    assert rmi(rmm, RmiCommand.REALM_ACTIVATE, BASE).status is RmiStatus.REALM_NOT_NEW
    assert rmi(rmm, RmiCommand.REC_CREATE, BASE, BASE + 3 * GRANULE).status is RmiStatus.REALM_NOT_NEW
    assert rmi(rmm, RmiCommand.REC_ENTER, BASE + 2 * GRANULE).ok
    # Owned granules cannot be undelegated before the realm is gone.
    assert rmi(rmm, RmiCommand.GRANULE_UNDELEGATE, BASE).status is RmiStatus.ILLEGAL_GRANULE_TRANSITION
    assert rmi(rmm, RmiCommand.REALM_DESTROY, BASE).ok
    assert realm.state is RealmState.DESTROYED
    assert rmi(rmm, RmiCommand.GRANULE_UNDELEGATE, BASE, 8).ok
    assert rmm.granule_counts()[GranuleState.UNDELEGATED] == small_layout().granule_count


def test_bad_parameters():
    rmm = make_rmm()
    assert rmi(rmm, RmiCommand.GRANULE_DELEGATE, BASE + 1).status is RmiStatus.BAD_PARAMETERS
    assert rmi(rmm, RmiCommand.REALM_CREATE).status is RmiStatus.BAD_PARAMETERS
    assert rmi(rmm, RmiCommand.REALM_ACTIVATE, BASE).status is RmiStatus.BAD_PARAMETERS
    assert rmm.rmi_handle(0xC400_018F)[0].status is RmiStatus.NOT_SUPPORTED


def test_rec_enter_before_activate():
    rmm = make_rmm()
    rmi(rmm, RmiCommand.GRANULE_DELEGATE, BASE, 3)
    rmi(rmm, RmiCommand.REALM_CREATE, BASE, BASE + GRANULE)
    rmi(rmm, RmiCommand.REC_CREATE, BASE, BASE + 2 * GRANULE)
    assert rmi(rmm, RmiCommand.REC_ENTER, BASE + 2 * GRANULE).status is RmiStatus.REALM_NOT_ACTIVE
    with pytest.raises(RealmNotActive):
        rmm.rec_run(rmm.recs[BASE + 2 * GRANULE], [retire(1)])


def test_rsi():
    rmm = make_rmm()
    result, cost = rmm.rsi_handle(int(RsiCommand.VERSION))
    assert result.status is RsiStatus.SUCCESS and cost.count("rsi_handler[VERSION]") == 1
    assert rmm.rsi_handle(0xC400_01FF)[0].status is RsiStatus.UNKNOWN_COMMAND
    assert rmm.rsi_handle(int(RsiCommand.VERSION), World.NORMAL)[0].status is RsiStatus.WRONG_CALLER


POOL = [BASE + i * GRANULE for i in range(6)]
commands = st.one_of(
    st.tuples(st.just("delegate"), st.sampled_from(POOL)),
    st.tuples(st.just("undelegate"), st.sampled_from(POOL)),
    st.tuples(st.just("create"), st.sampled_from(POOL), st.sampled_from(POOL)),
    st.tuples(st.just("rec"), st.sampled_from(POOL), st.sampled_from(POOL)),
    st.tuples(st.just("activate"), st.sampled_from(POOL)),
    st.tuples(st.just("destroy"), st.sampled_from(POOL)),
)
CMD = {"delegate": RmiCommand.GRANULE_DELEGATE, "undelegate": RmiCommand.GRANULE_UNDELEGATE,
       "create": RmiCommand.REALM_CREATE, "rec": RmiCommand.REC_CREATE,
       "activate": RmiCommand.REALM_ACTIVATE, "destroy": RmiCommand.REALM_DESTROY}


@settings(max_examples=150, deadline=None)
@given(ops=st.lists(commands, max_size=40))
def test_granule_state_machine(ops):
    rmm = make_rmm()
    states = {pa: GranuleState.UNDELEGATED for pa in POOL}
    for op in ops:
        result = rmi(rmm, CMD[op[0]], *op[1:])
        after = {pa: rmm.state_of(pa) for pa in POOL}
        changed = {pa for pa in POOL if after[pa] is not states[pa]}
        for pa in changed:
            assert (states[pa], after[pa]) in LEGAL_EDGES
        if not result.ok:
            assert not changed
        if op[0] == "delegate":
            assert result.ok == (states[op[1]] is GranuleState.UNDELEGATED)
        if op[0] == "undelegate":
            assert result.ok == (states[op[1]] is GranuleState.DELEGATED)
        states = after


def test_cntpoff_is_read_only():
    rmm = make_rmm()
    realm, _ = active_realm(rmm)
    assert realm.cntpoff == 0
    with pytest.raises(AttributeError):
        realm.cntpoff = 5


def test_timer_mask_paths():
    rk, fvp = load_profile("rk3588"), load_profile("fvp-rme")
    masked = mask_timer(rk, initial_registers(rk), True)
    assert masked.cntp_ctl_el0.imask == 1
    with pytest.raises(UnsupportedOnProfile):
        mask_timer(rk, initial_registers(rk), True, TimerMaskPath.EL2_MASK)
    mask_timer(fvp, initial_registers(fvp), True, TimerMaskPath.EL2_MASK)


# -- stage 2 and caches


def test_stage2_requires_owned_granule():
    rmm = make_rmm()
    realm, _ = active_realm(rmm)
    with pytest.raises(NotOwnedGranule):
        rmm.stage2_map(realm, 0, BASE)  # the RD itself
    with pytest.raises(NotOwnedGranule):
        rmm.stage2_map(realm, 0, 8 * MIB)  # never delegated
    rmm.stage2_map(realm, 0, BASE + 3 * GRANULE)
    assert rmm.state_of(BASE + 3 * GRANULE) is GranuleState.DATA


def test_unmapped():
    rmm = make_rmm()
    realm, _ = active_realm(rmm)
    with pytest.raises(Unmapped):
        rmm.guest_read(realm, 0x5000)
    with pytest.raises(Unmapped):
        rmm.memory_read_visible(World.NORMAL, 8 * MIB)


@pytest.mark.parametrize("profile,mitigation,stale", [
    ("rk3588", False, True),
    ("rk3588", True, False),
    ("fvp-rme", False, False),
])
def test_non_coherent_write_visibility(profile, mitigation, stale):
    rmm = make_rmm(profile)
    realm, _ = active_realm(rmm)
    pa = BASE + 3 * GRANULE
    rmm.stage2_map(realm, 0x8000, pa, mitigation=mitigation)
    rmm.guest_write(realm, 0x8000, 0xABCD)
    assert rmm.guest_read(realm, 0x8000) == 0xABCD
    seen = rmm.memory_read_visible(World.NORMAL, pa)
    assert (seen != 0xABCD) == stale


@settings(max_examples=50, deadline=None)
@given(writes=st.lists(st.tuples(st.integers(0, 3), st.integers(1, 1 << 32),
                                 st.sampled_from(list(Cacheability))), min_size=1, max_size=20),
       profile=st.sampled_from(["rk3588", "fvp-rme"]))
def test_mitigated_cache_model_is_sound(writes, profile):
    rmm = make_rmm(profile)
    realm, _ = active_realm(rmm)
    for page in range(4):
        rmm.stage2_map(realm, page * GRANULE, BASE + (3 + page) * GRANULE, mitigation=True)
    for page, value, attr in writes:
        rmm.guest_write(realm, page * GRANULE, value, attr)
        assert rmm.memory_read_visible(World.ROOT, BASE + (3 + page) * GRANULE) == value


# -- REC run loop


def fresh_rec():
    rmm = make_rmm()
    _, rec = active_realm(rmm)
    return rmm, rec


def test_livelock_without_fix():
    rmm, rec = fresh_rec()
    seq, _ = rmm.rec_run(rec, livelock_trace(1000), fp_timer_fix=False)
    assert seq.livelocked and seq.pc_end == 0
    assert seq.histogram() == {"FpRestore": 2, "TimerExit": 2}


def test_fix_makes_progress():
    rmm, rec = fresh_rec()
    seq, _ = rmm.rec_run(rec, livelock_trace(1000), fp_timer_fix=True)
    assert not seq.livelocked and seq.pc_end == 10_000
    assert seq.histogram() == {"FpRestore": 1000, "TimerExit": 1000}
    assert seq.events_consumed == 3000


def test_budget_truncates():
    rmm, rec = fresh_rec()
    seq, _ = rmm.rec_run(rec, livelock_trace(10), budget=3)
    assert seq.events_consumed == 3 and seq.pc_end == 10


def test_hvc_rearms_fp_traps():
    rmm, rec = fresh_rec()
    seq, _ = rmm.rec_run(rec, [FP_USE, retire(1), HVC, FP_USE, retire(1)])
    assert seq.exits == [ExitReason.FP_RESTORE, ExitReason.HVC, ExitReason.FP_RESTORE]
    assert seq.pc_end == 2


no_fp_events = st.lists(st.one_of(st.just(TIMER_FIRE), st.just(HVC), st.integers(0, 50).map(retire)), max_size=40)


@given(trace=no_fp_events)
def test_fix_is_invisible_without_fp_use(trace):
    runs = []
    for fix in (False, True):
        rmm, rec = fresh_rec()
        seq, _ = rmm.rec_run(rec, trace, fp_timer_fix=fix)
        runs.append((seq.exits, seq.pc_end, seq.livelocked))
    assert runs[0] == runs[1]


@settings(max_examples=60, deadline=None)
@given(trace=st.lists(st.one_of(st.just(FP_USE), st.just(TIMER_FIRE), st.just(HVC),
                                st.integers(0, 20).map(retire)), max_size=60))
def test_fix_never_livelocks_and_retires_everything(trace):
    rmm, rec = fresh_rec()
    seq, _ = rmm.rec_run(rec, trace, fp_timer_fix=True)
    assert not seq.livelocked
    assert seq.pc_end == sum(e.n for e in trace if e.ev == "Retire")


def test_trace_parsing(tmp_path):
    events = parse_trace([{"ev": "FpUse"}, {"ev": "Retire", "n": 4}])
    assert events == [FP_USE, retire(4)]
    path = tmp_path / "t.json"
    path.write_text('[{"ev": "TimerFire"}, {"ev": "Hvc"}]')
    assert load_trace(path) == [TIMER_FIRE, HVC]
    with pytest.raises(InvalidParams):
        parse_trace([{"ev": "Nope"}])
    with pytest.raises(InvalidParams):
        Event("Retire", -1)
