"""Realm Management Monitor model.

Covers the granule, realm and REC lifecycles behind the RMI, the RSI
VERSION call, the RMM's own translation geometry, stage-2 mappings on boards
without FWB (with a small cache-visibility model) and the event-driven REC
run loop where lazy FP restore and an ECV-less timer interact.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import math
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from ccasim.board import BoardProfile, RegisterFile, set_timer_imask
from ccasim.costs import CostDelta, rmi_handler, rsi_handler
from ccasim.errors import (
    InvalidParams,
    NotOwnedGranule,
    RealmNotActive,
    Unmapped,
    UnsupportedOnProfile,
    UnsupportedVaBits,
)
from ccasim.gpt.layout import GRANULE, MemoryLayout
from ccasim.world import World


class RmiCommand(enum.IntEnum):
    VERSION = 0xC400_0150
    GRANULE_DELEGATE = 0xC400_0151
    GRANULE_UNDELEGATE = 0xC400_0152
    REALM_ACTIVATE = 0xC400_0157
    REALM_CREATE = 0xC400_0158
    REALM_DESTROY = 0xC400_0159
    REC_CREATE = 0xC400_015A
    REC_ENTER = 0xC400_015C
    # Benchmark command that returns straight away.
    NOP = 0xC400_016F


class RmiStatus(enum.IntEnum):
    SUCCESS = 0
    BAD_PARAMETERS = 1
    ILLEGAL_GRANULE_TRANSITION = 2
    REALM_NOT_NEW = 3
    REALM_NOT_ACTIVE = 4
    NOT_SUPPORTED = 5


class RsiCommand(enum.IntEnum):
    VERSION = 0xC400_0190


class RsiStatus(enum.IntEnum):
    SUCCESS = 0
    UNKNOWN_COMMAND = 1
    WRONG_CALLER = 2


RMI_VERSION = (1, 0)
RSI_VERSION = (1, 0)


@dataclasses.dataclass(frozen=True)
class RmiResult:
    status: RmiStatus
    values: tuple = ()

    @property
    def ok(self) -> bool:
        return self.status is RmiStatus.SUCCESS


@dataclasses.dataclass(frozen=True)
class RsiResult:
    status: RsiStatus
    values: tuple = ()


class GranuleState(enum.IntEnum):
    UNDELEGATED = 0
    DELEGATED = 1
    RD = 2
    REC = 3
    RTT = 4
    DATA = 5


LEGAL_EDGES = frozenset(
    [(GranuleState.UNDELEGATED, GranuleState.DELEGATED), (GranuleState.DELEGATED, GranuleState.UNDELEGATED)]
    + [(GranuleState.DELEGATED, s) for s in (GranuleState.RD, GranuleState.REC, GranuleState.RTT, GranuleState.DATA)]
    + [(s, GranuleState.DELEGATED) for s in (GranuleState.RD, GranuleState.REC, GranuleState.RTT, GranuleState.DATA)]
)


class RealmState(enum.Enum):
    NEW = "new"
    ACTIVE = "active"
    DESTROYED = "destroyed"


class FpState(enum.Enum):
    TRAPS_ARMED = "traps_armed"
    RESTORED = "restored"


class ExitReason(enum.Enum):
    FP_RESTORE = "FpRestore"
    TIMER = "TimerExit"
    HVC = "Hvc"


# Exits that go all the way out to the hypervisor.
HOST_EXITS = (ExitReason.TIMER, ExitReason.HVC)


class Cacheability(enum.Enum):
    WRITE_BACK = "wb"
    NON_CACHEABLE = "nc"


@dataclasses.dataclass(frozen=True)
class S2Attrs:
    cacheability: Cacheability
    fwb_forced: bool = False
    maintenance: bool = False


@dataclasses.dataclass
class Stage2Map:
    entries: Dict[int, Tuple[int, S2Attrs]] = dataclasses.field(default_factory=dict)
    pending_maintenance: set = dataclasses.field(default_factory=set)

    def lookup(self, ipa: int) -> Tuple[int, S2Attrs]:
        page = ipa - ipa % GRANULE
        if page not in self.entries:
            raise Unmapped(f"ipa {ipa:#x} has no stage-2 mapping")
        pa, attrs = self.entries[page]
        return pa + ipa % GRANULE, attrs


@dataclasses.dataclass
class RecTimer:
    masked: bool = False
    pending: bool = False
    mask_source: str = "CNTP_CTL_EL0"
    # Mask held over from an FP restore exit, lifted once the trapped
    # instruction retires.
    fix_hold: bool = False


@dataclasses.dataclass
class Rec:
    rec_id: int
    realm: "RealmDescriptor"
    pc: int = 0
    fp_state: FpState = FpState.TRAPS_ARMED
    last_exit: Optional[ExitReason] = None
    timer: RecTimer = dataclasses.field(default_factory=RecTimer)
    resume_pending: bool = False
    virq_pending: bool = False


@dataclasses.dataclass
class RealmDescriptor:
    realm_id: int
    rd_granule: int
    rtt_root: int
    ipa_width: int = 40
    state: RealmState = RealmState.NEW
    recs: List[Rec] = dataclasses.field(default_factory=list)
    stage2: Stage2Map = dataclasses.field(default_factory=Stage2Map)
    _cntpoff: int = dataclasses.field(default=0, repr=False)

    @property
    def cntpoff(self) -> int:
        return self._cntpoff


# --------------------------------------------------------------------------
# Translation geometry

MIN_VA_BITS, MAX_VA_BITS = 21, 48
NO_TTST_VA_BITS = 26


@dataclasses.dataclass(frozen=True)
class StartLevel:
    start_level: int
    walk_depth: int
    va_bits: int


def compute_start_level(va_bits: int, has_ttst: bool) -> StartLevel:
    if not MIN_VA_BITS <= va_bits <= MAX_VA_BITS:
        raise UnsupportedVaBits(f"va_bits must be in [{MIN_VA_BITS}, {MAX_VA_BITS}], got {va_bits}")
    levels = math.ceil((va_bits - 12) / 9)
    start = 4 - levels
    if start == 3 and not has_ttst:
        start, va_bits = 2, max(va_bits, NO_TTST_VA_BITS)
    return StartLevel(start, 4 - start, va_bits)


@dataclasses.dataclass(frozen=True)
class RmmAddressSpace:
    low_region: Tuple[int, int]
    high_va_bits: int
    start_level: int

    @classmethod
    def for_profile(cls, profile: BoardProfile, layout: Optional[MemoryLayout] = None,
                    va_bits: int = MIN_VA_BITS) -> "RmmAddressSpace":
        low = (0, 0)
        if layout is not None:
            rmm = next((r for r in layout.regions if r.name == "rmm"), None)
            if rmm is not None:
                low = (rmm.base, rmm.size)
        geo = compute_start_level(va_bits, profile.has_ttst)
        return cls(low, geo.va_bits, geo.start_level)


# --------------------------------------------------------------------------
# Timer masking

class TimerMaskPath(enum.Enum):
    EL0_CTL = "CNTP_CTL_EL0"
    EL2_MASK = "CNTHCTL_EL2.CNTPMASK"


def mask_timer(profile: BoardProfile, regs: RegisterFile, masked: bool,
               path: TimerMaskPath = TimerMaskPath.EL0_CTL) -> RegisterFile:
    if path is TimerMaskPath.EL2_MASK:
        if not profile.has_ecv:
            raise UnsupportedOnProfile(f"{path.value} needs ECV, absent on {profile.name}")
        return regs
    return set_timer_imask(profile, regs, masked)


# --------------------------------------------------------------------------
# Event traces


@dataclasses.dataclass(frozen=True)
class Event:
    ev: str
    n: int = 0

    KINDS = ("FpUse", "TimerFire", "Hvc", "Retire")

    def __post_init__(self):
        if self.ev not in self.KINDS:
            raise InvalidParams(f"unknown guest event {self.ev!r}")
        if self.ev == "Retire" and self.n < 0:
            raise InvalidParams("Retire count must be non-negative")

    def to_dict(self) -> dict:
        return {"ev": self.ev, "n": self.n} if self.ev == "Retire" else {"ev": self.ev}


FP_USE = Event("FpUse")
TIMER_FIRE = Event("TimerFire")
HVC = Event("Hvc")


def retire(n: int) -> Event:
    return Event("Retire", n)


def parse_trace(items: Iterable[dict]) -> List[Event]:
    out = []
    for item in items:
        if not isinstance(item, dict) or "ev" not in item:
            raise InvalidParams(f"bad trace event {item!r}")
        out.append(Event(item["ev"], int(item.get("n", 0))))
    return out


def load_trace(path: Union[str, Path]) -> List[Event]:
    return parse_trace(json.loads(Path(path).read_text()))


def livelock_trace(k: int) -> List[Event]:
    return [FP_USE, TIMER_FIRE, retire(10)] * k


@dataclasses.dataclass
class RecExitSequence:
    exits: List[ExitReason]
    pc_start: int
    pc_end: int
    events_consumed: int
    livelocked: bool = False

    @property
    def injections(self) -> int:
        return sum(1 for e in self.exits if e is ExitReason.TIMER)

    def histogram(self) -> Dict[str, int]:
        hist: Dict[str, int] = {}
        for e in self.exits:
            hist[e.value] = hist.get(e.value, 0) + 1
        return hist


# --------------------------------------------------------------------------
# The RMM


class Rmm:
    def __init__(self, profile: BoardProfile, layout: MemoryLayout, monitor=None):
        self.profile = profile
        self.layout = layout
        self.monitor = monitor
        self.granules = np.zeros(layout.granule_count, dtype=np.uint8)
        self.owner: Dict[int, int] = {}
        self.realms: Dict[int, RealmDescriptor] = {}
        self.recs: Dict[int, Rec] = {}
        self.address_space = RmmAddressSpace.for_profile(profile, layout)
        self._next_realm_id = 1
        self._next_rec_id = 1
        # Two-state cache model: DRAM contents and what cacheable observers see.
        self.dram: Dict[int, int] = {}
        self.cached: Dict[int, int] = {}
        self.maintenance_ops = 0

    # -- granule bookkeeping ---------------------------------------------

    def state_of(self, pa: int) -> GranuleState:
        return GranuleState(int(self.granules[pa // GRANULE]))

    def _valid_range(self, pa: int, count: int) -> bool:
        return (isinstance(pa, int) and isinstance(count, int) and count >= 1 and pa >= 0
                and pa % GRANULE == 0 and pa // GRANULE + count <= len(self.granules))

    def _range_all(self, pa: int, count: int, state: GranuleState) -> bool:
        a = pa // GRANULE
        return bool(np.all(self.granules[a:a + count] == int(state)))

    def _set(self, pa: int, state: GranuleState, count: int = 1) -> None:
        a = pa // GRANULE
        self.granules[a:a + count] = int(state)

    def granule_counts(self) -> Dict[GranuleState, int]:
        counts = np.bincount(self.granules, minlength=len(GranuleState))
        return {s: int(counts[s]) for s in GranuleState}

    # -- RMI ---------------------------------------------------------------

    def rmi_handle(self, cmd: int, args: Sequence = (), core=None) -> Tuple[RmiResult, CostDelta]:
        try:
            command = RmiCommand(cmd)
        except ValueError:
            return RmiResult(RmiStatus.NOT_SUPPORTED), CostDelta().add(World.REALM, "rmi_rt")
        cost = CostDelta().add(World.REALM, "rmi_rt")
        handler = getattr(self, "_rmi_" + command.name.lower())
        try:
            result = handler(cost, core, *args)
        except TypeError:
            result = RmiResult(RmiStatus.BAD_PARAMETERS)
        return result, cost

    def _rmi_nop(self, cost, core):
        cost.add(World.REALM, rmi_handler("NOP"))
        return RmiResult(RmiStatus.SUCCESS)

    def _rmi_version(self, cost, core):
        cost.add(World.REALM, rmi_handler("VERSION"))
        return RmiResult(RmiStatus.SUCCESS, RMI_VERSION)

    def _el3_transition(self, cost, core, pa, count, delegate: bool) -> bool:
        from ccasim.monitor import RMM_GTSI_DELEGATE, RMM_GTSI_UNDELEGATE, SMC_SUCCESS

        if self.monitor is None or core is None:
            return True
        fid = RMM_GTSI_DELEGATE if delegate else RMM_GTSI_UNDELEGATE
        result, smc_cost = self.monitor.smc_dispatch(core, fid, pa, count)
        cost.extend(smc_cost)
        return result.status == SMC_SUCCESS

    def _rmi_granule_delegate(self, cost, core, pa, count=1):
        cost.add(World.REALM, "delegate_standalone", count if isinstance(count, int) and count > 0 else 1)
        if not self._valid_range(pa, count):
            return RmiResult(RmiStatus.BAD_PARAMETERS)
        if not self._range_all(pa, count, GranuleState.UNDELEGATED):
            return RmiResult(RmiStatus.ILLEGAL_GRANULE_TRANSITION)
        if not self._el3_transition(cost, core, pa, count, True):
            return RmiResult(RmiStatus.ILLEGAL_GRANULE_TRANSITION)
        self._set(pa, GranuleState.DELEGATED, count)
        return RmiResult(RmiStatus.SUCCESS)

    def _rmi_granule_undelegate(self, cost, core, pa, count=1):
        cost.add(World.REALM, "delegate_standalone", count if isinstance(count, int) and count > 0 else 1)
        if not self._valid_range(pa, count):
            return RmiResult(RmiStatus.BAD_PARAMETERS)
        if not self._range_all(pa, count, GranuleState.DELEGATED):
            return RmiResult(RmiStatus.ILLEGAL_GRANULE_TRANSITION)
        if not self._el3_transition(cost, core, pa, count, False):
            return RmiResult(RmiStatus.ILLEGAL_GRANULE_TRANSITION)
        self._set(pa, GranuleState.UNDELEGATED, count)
        a = pa // GRANULE
        for g in range(a, a + count):
            self.owner.pop(g * GRANULE, None)
        return RmiResult(RmiStatus.SUCCESS)

    def _rmi_realm_create(self, cost, core, rd, rtt_root, ipa_width=40):
        cost.add(World.REALM, rmi_handler("REALM_CREATE"))
        if not (self._valid_range(rd, 1) and self._valid_range(rtt_root, 1)) or rd == rtt_root:
            return RmiResult(RmiStatus.BAD_PARAMETERS)
        if not 32 <= ipa_width <= 48:
            return RmiResult(RmiStatus.BAD_PARAMETERS)
        if self.state_of(rd) is not GranuleState.DELEGATED or self.state_of(rtt_root) is not GranuleState.DELEGATED:
            return RmiResult(RmiStatus.ILLEGAL_GRANULE_TRANSITION)
        realm = RealmDescriptor(self._next_realm_id, rd, rtt_root, ipa_width)
        self._next_realm_id += 1
        self._set(rd, GranuleState.RD)
        self._set(rtt_root, GranuleState.RTT)
        self.owner[rd] = self.owner[rtt_root] = realm.realm_id
        self.realms[rd] = realm
        return RmiResult(RmiStatus.SUCCESS, (realm.realm_id,))

    def _realm(self, rd) -> Optional[RealmDescriptor]:
        if not self._valid_range(rd, 1) or self.state_of(rd) is not GranuleState.RD:
            return None
        return self.realms.get(rd)

    def _rmi_realm_activate(self, cost, core, rd):
        cost.add(World.REALM, rmi_handler("REALM_ACTIVATE"))
        realm = self._realm(rd)
        if realm is None:
            return RmiResult(RmiStatus.BAD_PARAMETERS)
        if realm.state is not RealmState.NEW:
            return RmiResult(RmiStatus.REALM_NOT_NEW)
        realm.state = RealmState.ACTIVE
        return RmiResult(RmiStatus.SUCCESS)

    def _rmi_realm_destroy(self, cost, core, rd):
        cost.add(World.REALM, rmi_handler("REALM_DESTROY"))
        realm = self._realm(rd)
        if realm is None:
            return RmiResult(RmiStatus.BAD_PARAMETERS)
        # Everything the realm owned drops back to Delegated.
        for pa, rid in list(self.owner.items()):
            if rid == realm.realm_id:
                self._set(pa, GranuleState.DELEGATED)
                del self.owner[pa]
                self.recs.pop(pa, None)
        realm.recs.clear()
        realm.stage2 = Stage2Map()
        realm.state = RealmState.DESTROYED
        del self.realms[rd]
        return RmiResult(RmiStatus.SUCCESS)

    def _rmi_rec_create(self, cost, core, rd, rec_pa):
        cost.add(World.REALM, rmi_handler("REC_CREATE"))
        realm = self._realm(rd)
        if realm is None or not self._valid_range(rec_pa, 1):
            return RmiResult(RmiStatus.BAD_PARAMETERS)
        if realm.state is not RealmState.NEW:
            return RmiResult(RmiStatus.REALM_NOT_NEW)
        if self.state_of(rec_pa) is not GranuleState.DELEGATED:
            return RmiResult(RmiStatus.ILLEGAL_GRANULE_TRANSITION)
        rec = Rec(self._next_rec_id, realm)
        self._next_rec_id += 1
        self._set(rec_pa, GranuleState.REC)
        self.owner[rec_pa] = realm.realm_id
        self.recs[rec_pa] = rec
        realm.recs.append(rec)
        return RmiResult(RmiStatus.SUCCESS, (rec.rec_id,))

    def _rmi_rec_enter(self, cost, core, rec_pa):
        cost.add(World.REALM, rmi_handler("REC_ENTER"))
        if not self._valid_range(rec_pa, 1) or self.state_of(rec_pa) is not GranuleState.REC:
            return RmiResult(RmiStatus.BAD_PARAMETERS)
        if self.recs[rec_pa].realm.state is not RealmState.ACTIVE:
            return RmiResult(RmiStatus.REALM_NOT_ACTIVE)
        return RmiResult(RmiStatus.SUCCESS)

    # -- RSI ---------------------------------------------------------------

    def rsi_handle(self, cmd: int, caller: World = World.REALM) -> Tuple[RsiResult, CostDelta]:
        if caller is not World.REALM:
            return RsiResult(RsiStatus.WRONG_CALLER), CostDelta()
        try:
            command = RsiCommand(cmd)
        except ValueError:
            return RsiResult(RsiStatus.UNKNOWN_COMMAND), CostDelta()
        cost = CostDelta().add(World.REALM, rsi_handler(command.name))
        return RsiResult(RsiStatus.SUCCESS, RSI_VERSION), cost

    # -- stage 2 and cache visibility ----------------------------------------

    def stage2_map(self, realm: RealmDescriptor, ipa: int, pa: int,
                   requested: Cacheability = Cacheability.NON_CACHEABLE,
                   mitigation: bool = True) -> Tuple[Stage2Map, CostDelta]:
        if ipa % GRANULE or not self._valid_range(pa, 1):
            raise InvalidParams("stage-2 mappings are granule aligned")
        state = self.state_of(pa)
        owner = self.owner.get(pa)
        if state is GranuleState.DELEGATED and owner is None:
            self._set(pa, GranuleState.DATA)
            self.owner[pa] = realm.realm_id
        elif not (state is GranuleState.DATA and owner == realm.realm_id):
            raise NotOwnedGranule(f"granule {pa:#x} ({state.name}) is not available to realm {realm.realm_id}")
        cost = CostDelta()
        if self.profile.has_fwb:
            attrs = S2Attrs(Cacheability.WRITE_BACK, fwb_forced=True)
        else:
            attrs = S2Attrs(requested, maintenance=mitigation)
            if mitigation:
                # Clean+invalidate at install time, before any host access.
                realm.stage2.pending_maintenance.add(pa)
                cost.extend(self._drain(realm.stage2))
        realm.stage2.entries[ipa] = (pa, attrs)
        return realm.stage2, cost

    def _drain(self, s2: Stage2Map) -> CostDelta:
        cost = CostDelta()
        for pa in sorted(s2.pending_maintenance):
            if pa in self.dram:
                self.cached[pa] = self.dram[pa]
            self.maintenance_ops += 1
            cost.add(World.REALM, "stage2_maintenance_per_granule")
        s2.pending_maintenance.clear()
        return cost

    def _mapping_of(self, pa: int) -> Tuple[RealmDescriptor, S2Attrs]:
        base = pa - pa % GRANULE
        for realm in self.realms.values():
            for mapped, attrs in realm.stage2.entries.values():
                if mapped == base:
                    return realm, attrs
        raise Unmapped(f"pa {pa:#x} is not mapped by any realm")

    def guest_write(self, realm: RealmDescriptor, ipa: int, value: int,
                    guest_attr: Cacheability = Cacheability.NON_CACHEABLE) -> CostDelta:
        """Guest store; ``guest_attr`` is the stage-1 memory type in effect."""
        pa, attrs = realm.stage2.lookup(ipa)
        pa -= pa % GRANULE
        coherent = attrs.fwb_forced or (attrs.cacheability is Cacheability.WRITE_BACK
                                        and guest_attr is Cacheability.WRITE_BACK)
        self.dram[pa] = value
        if coherent:
            self.cached[pa] = value
            return CostDelta()
        if attrs.maintenance:
            realm.stage2.pending_maintenance.add(pa)
        return CostDelta()

    def guest_read(self, realm: RealmDescriptor, ipa: int) -> int:
        pa, _ = realm.stage2.lookup(ipa)
        return self.dram.get(pa - pa % GRANULE, 0)

    def memory_read_visible(self, observer: World, pa: int) -> int:
        """Value a cacheable observer (hypervisor, firmware or RMM) reads."""
        realm, attrs = self._mapping_of(pa)
        base = pa - pa % GRANULE
        if base in realm.stage2.pending_maintenance:
            # Maintenance runs before the observer is allowed to look.
            self._drain(realm.stage2)
        return self.cached.get(base, 0)

    # -- REC run loop --------------------------------------------------------

    def rec_run(self, rec: Rec, trace: Sequence[Event], fp_timer_fix: bool = True,
                budget: Optional[int] = None) -> Tuple[RecExitSequence, CostDelta]:
        if rec.realm.state is not RealmState.ACTIVE:
            raise RealmNotActive(f"realm {rec.realm.realm_id} is {rec.realm.state.value}")
        exits: List[ExitReason] = []
        start = rec.pc
        events = list(trace) if budget is None else list(trace)[:budget]

        def enter() -> None:
            # REC entry programs CNTP_CTL_EL0.IMASK for this run.
            if rec.last_exit is ExitReason.TIMER:
                rec.timer.masked = True
            elif rec.last_exit is ExitReason.FP_RESTORE and fp_timer_fix:
                rec.timer.masked = True
                rec.timer.fix_hold = True
            elif rec.last_exit is not None:
                rec.timer.masked = False

        def exit_to(reason: ExitReason) -> None:
            exits.append(reason)
            rec.last_exit = reason
            if reason in HOST_EXITS:
                rec.fp_state = FpState.TRAPS_ARMED
                rec.timer.fix_hold = False
            else:
                rec.fp_state = FpState.RESTORED
            enter()

        def settle() -> bool:
            """Run until nothing is pending; False means a livelock."""
            seen = set()
            while True:
                key = (rec.fp_state, rec.last_exit, rec.timer.masked, rec.timer.pending,
                       rec.timer.fix_hold, rec.resume_pending, rec.virq_pending)
                if key in seen:
                    return False
                seen.add(key)
                if rec.timer.pending and not rec.timer.masked:
                    exit_to(ExitReason.TIMER)
                    rec.virq_pending = True
                    continue
                if rec.resume_pending:
                    if rec.fp_state is FpState.TRAPS_ARMED:
                        exit_to(ExitReason.FP_RESTORE)
                        continue
                    rec.resume_pending = False
                    if rec.timer.fix_hold:
                        rec.timer.fix_hold = False
                        rec.timer.masked = False
                    continue
                if rec.virq_pending:
                    # Guest takes the virtual IRQ and quiesces its timer.
                    rec.virq_pending = False
                    rec.timer.pending = False
                    rec.timer.masked = False
                return True

        consumed = 0
        live = True
        for ev in events:
            consumed += 1
            if ev.ev == "FpUse":
                rec.resume_pending = True
                if rec.fp_state is FpState.TRAPS_ARMED:
                    exit_to(ExitReason.FP_RESTORE)
                    continue
                live = settle()
            elif ev.ev == "TimerFire":
                rec.timer.pending = True
                live = settle()
            elif ev.ev == "Retire":
                live = settle()
                if live:
                    rec.pc += ev.n
            else:
                live = settle()
                if live:
                    exit_to(ExitReason.HVC)
            if not live:
                break
        if live and events:
            live = settle()
        seq = RecExitSequence(exits, start, rec.pc, consumed, livelocked=not live)
        return seq, CostDelta()
