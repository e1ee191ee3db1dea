"""Normal-world hypervisor model: CVM boot, the guest run loop and teardown."""

from __future__ import annotations

import dataclasses
import json
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple, Union

from ccasim.board import BoardProfile, load_profile
from ccasim.costs import CostDelta, CostWeights, Weight, ZERO
from ccasim.errors import BootError, InvalidParams, RealmNotActive
from ccasim.gpt import BackendKind, MemoryLayout, reference_layout
from ccasim.gpt.layout import GRANULE
from ccasim.monitor import Monitor, boot_sequence
from ccasim.rmm import Event, ExitReason, RealmState, Rec, RmiCommand, RmiStatus
from ccasim.world import World

MIB = 1 << 20
ALLOC_ALIGN = 2 * MIB
BOOT_PHASES = ("delegation_loop", "realm_create", "rec_create", "activate", "first_enter")


@dataclasses.dataclass
class CvmConfig:
    ram_size: int = 256 * MIB
    vcpus: int = 1
    backend: BackendKind = BackendKind.SINGLE
    fwb_maintenance: bool = True
    fp_timer_fix: bool = True
    iterations: int = 1
    # Share of guest RAM delegated eagerly at boot.
    delegate_fraction: Fraction = Fraction(1)

    def __post_init__(self):
        self.backend = BackendKind(self.backend)
        self.delegate_fraction = Fraction(self.delegate_fraction)
        if self.ram_size <= 0 or self.ram_size % GRANULE:
            raise InvalidParams(f"ram_size {self.ram_size} is not a positive multiple of {GRANULE}")
        if self.vcpus < 1:
            raise InvalidParams("vcpus must be at least 1")
        if self.iterations < 1:
            raise InvalidParams("iterations must be at least 1")
        if not 0 < self.delegate_fraction <= 1:
            raise InvalidParams("delegate_fraction must be in (0, 1]")

    @property
    def granules(self) -> int:
        return self.ram_size // GRANULE

    @property
    def eager_granules(self) -> int:
        return max(1, int(self.granules * self.delegate_fraction))


def _num(x: Fraction):
    x = Fraction(x)
    return int(x) if x.denominator == 1 else float(x)


@dataclasses.dataclass
class PhaseCost:
    name: str
    instr: Fraction
    cycles: Fraction

    def to_dict(self) -> dict:
        return {"name": self.name, "instr": _num(self.instr), "cycles": _num(self.cycles)}


@dataclasses.dataclass
class CvmHandle:
    """Host-side bookkeeping for one booted CVM."""

    rd: int
    rtt: int
    recs: List[int]
    pool_base: int
    pool_granules: int
    torn_down: bool = False


@dataclasses.dataclass
class BootReport:
    phases: List[PhaseCost]
    granules_delegated: int
    complete: bool = True
    error: Optional[str] = None
    handle: Optional[CvmHandle] = dataclasses.field(default=None, compare=False)

    @property
    def total(self) -> Weight:
        return sum((Weight(p.instr, p.cycles) for p in self.phases), ZERO)

    @property
    def total_instr(self) -> Fraction:
        return self.total.instr

    @property
    def total_cycles(self) -> Fraction:
        return self.total.cycles

    def to_dict(self) -> dict:
        return {
            "phases": [p.to_dict() for p in self.phases],
            "total_instr": _num(self.total_instr),
            "total_cycles": _num(self.total_cycles),
            "granules_delegated": self.granules_delegated,
            "complete": self.complete,
            "error": self.error,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


@dataclasses.dataclass
class GuestRunReport:
    pc_start: int
    pc_end: int
    exits: Dict[str, int]
    injections: int
    reentries: int
    events_consumed: int
    livelocked: bool
    instr: Fraction = Fraction(0)
    cycles: Fraction = Fraction(0)

    @property
    def progress(self) -> int:
        return self.pc_end - self.pc_start

    def to_dict(self) -> dict:
        return {
            "pc_start": self.pc_start, "pc_end": self.pc_end, "progress": self.progress,
            "exits": dict(sorted(self.exits.items())), "injections": self.injections,
            "reentries": self.reentries, "events_consumed": self.events_consumed,
            "livelocked": self.livelocked, "instr": _num(self.instr), "cycles": _num(self.cycles),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


class Host:
    """The hypervisor on one core plus its physical memory allocator."""

    def __init__(self, monitor: Monitor, core: int = 0):
        self.monitor = monitor
        self.core = core
        self.allocated: List[Tuple[int, int]] = []

    @property
    def rmm(self):
        return self.monitor.rmm

    def alloc(self, size: int) -> int:
        """First-fit allocation of delegable RAM."""
        for region in self.monitor.layout.ram_regions():
            base = -(-region.base // ALLOC_ALIGN) * ALLOC_ALIGN
            for a, n in sorted(self.allocated):
                if a < base + size and base < a + n:
                    base = -(-(a + n) // ALLOC_ALIGN) * ALLOC_ALIGN
            if base + size <= region.end:
                self.allocated.append((base, size))
                return base
        raise InvalidParams(f"no room for {size:#x} bytes of guest memory")

    def free(self, base: int) -> None:
        self.allocated = [(a, n) for a, n in self.allocated if a != base]

    def rmi(self, cmd: RmiCommand, *args) -> Tuple[int, tuple, CostDelta]:
        result, cost = self.monitor.smc_dispatch(self.core, int(cmd), *args)
        return result.status, result.values, cost

    def _phase(self, phases: List[PhaseCost], name: str, cost: CostDelta) -> None:
        self.monitor.ledger.apply(cost)
        w = cost.total(self.monitor.weights)
        phases.append(PhaseCost(name, w.instr, w.cycles))

    def cvm_boot(self, cfg: CvmConfig) -> BootReport:
        """Delegate guest memory, then create, activate and enter the realm."""
        phases: List[PhaseCost] = []
        n = cfg.eager_granules
        meta = 2 + cfg.vcpus
        if n <= meta:
            raise InvalidParams(f"{cfg.ram_size} bytes is too small for RD, RTT and {cfg.vcpus} REC granules")
        base = self.alloc(cfg.granules * GRANULE)
        unwind = CvmHandle(rd=-1, rtt=-1, recs=[], pool_base=base, pool_granules=0)

        def abort(name: str, status) -> BootReport:
            msg = f"{name} failed with {RmiStatus(status).name}"
            return BootReport(phases, unwind.pool_granules, complete=False, error=msg, handle=unwind)

        # Boot-path delegation is accounted with its own per-granule weight.
        status, _, _ = self.rmi(RmiCommand.GRANULE_DELEGATE, base, n)
        if status != RmiStatus.SUCCESS:
            self.free(base)
            return abort("delegation_loop", status)
        unwind.pool_granules = n
        cost = CostDelta().add(World.NORMAL, "delegate_boot_path", n)
        if cfg.backend is BackendKind.TWO_GPT:
            cost.add(World.ROOT, "two_gpt_boot_per_granule", n).add(World.ROOT, "two_gpt_boot_constant")
        self._phase(phases, "delegation_loop", cost)

        rd, rtt = base, base + GRANULE
        status, _, cost = self.rmi(RmiCommand.REALM_CREATE, rd, rtt)
        self._phase(phases, "realm_create", cost)
        if status != RmiStatus.SUCCESS:
            return abort("realm_create", status)
        unwind.rd, unwind.rtt = rd, rtt

        total = CostDelta()
        for i in range(cfg.vcpus):
            rec_pa = base + (2 + i) * GRANULE
            status, _, cost = self.rmi(RmiCommand.REC_CREATE, rd, rec_pa)
            total.extend(cost)
            if status != RmiStatus.SUCCESS:
                self._phase(phases, "rec_create", total)
                return abort("rec_create", status)
            unwind.recs.append(rec_pa)
        self._phase(phases, "rec_create", total)

        status, _, cost = self.rmi(RmiCommand.REALM_ACTIVATE, rd)
        self._phase(phases, "activate", cost)
        if status != RmiStatus.SUCCESS:
            return abort("activate", status)

        status, _, cost = self.rmi(RmiCommand.REC_ENTER, unwind.recs[0])
        cost.add(World.REALM, "boot_base")
        self._phase(phases, "first_enter", cost)
        if status != RmiStatus.SUCCESS:
            return abort("first_enter", status)
        return BootReport(phases, n, handle=unwind)

    def rec(self, handle: CvmHandle, index: int = 0) -> Rec:
        return self.rmm.recs[handle.recs[index]]

    def run_guest(self, handle: CvmHandle, trace: Sequence[Event], budget: Optional[int] = None,
                  fp_timer_fix: bool = True, rec_index: int = 0) -> GuestRunReport:
        if handle.torn_down or handle.rd not in self.rmm.realms:
            raise RealmNotActive("realm no longer exists")
        rec_pa = handle.recs[rec_index]
        rec = self.rmm.recs[rec_pa]
        if rec.realm.state is not RealmState.ACTIVE:
            raise RealmNotActive(f"realm {rec.realm.realm_id} is {rec.realm.state.value}")
        if not trace:
            return GuestRunReport(rec.pc, rec.pc, {}, 0, 0, 0, False)
        seq, cost = self.rmm.rec_run(rec, trace, fp_timer_fix=fp_timer_fix, budget=budget)
        host_exits = sum(1 for e in seq.exits if e in (ExitReason.TIMER, ExitReason.HVC))
        # One REC_ENTER to start, plus one re-entry after every host exit.
        for _ in range(1 + host_exits):
            _, _, c = self.rmi(RmiCommand.REC_ENTER, rec_pa)
            cost.extend(c)
        self.monitor.ledger.apply(cost)
        w = cost.total(self.monitor.weights)
        return GuestRunReport(seq.pc_start, seq.pc_end, seq.histogram(), seq.injections, host_exits,
                              seq.events_consumed, seq.livelocked, w.instr, w.cycles)

    def teardown(self, handle: CvmHandle) -> CostDelta:
        """Destroy the realm and give every delegated granule back."""
        cost = CostDelta()
        if handle.torn_down:
            return cost
        if handle.rd >= 0 and handle.rd in self.rmm.realms:
            _, _, c = self.rmi(RmiCommand.REALM_DESTROY, handle.rd)
            cost.extend(c)
        if handle.pool_granules:
            status, _, c = self.rmi(RmiCommand.GRANULE_UNDELEGATE, handle.pool_base, handle.pool_granules)
            cost.extend(c)
            if status != RmiStatus.SUCCESS:
                raise BootError(f"teardown undelegate failed with {RmiStatus(status).name}")
        self.free(handle.pool_base)
        handle.torn_down = True
        self.monitor.ledger.apply(cost)
        return cost


def boot_system(profile: Union[BoardProfile, str] = "rk3588", backend: Union[BackendKind, str] = BackendKind.SINGLE,
                weights: Optional[CostWeights] = None, layout: Optional[MemoryLayout] = None) -> Host:
    if isinstance(profile, str):
        profile = load_profile(profile)
    monitor, _ = boot_sequence(profile, layout or reference_layout(), backend, weights)
    return Host(monitor)


def cvm_boot(cfg: CvmConfig, host: Optional[Host] = None, *, profile: Union[BoardProfile, str] = "rk3588",
             weights: Optional[CostWeights] = None) -> BootReport:
    """Boot a CVM, bringing up a fresh system first when none is given."""
    host = host or boot_system(profile, cfg.backend, weights)
    return host.cvm_boot(cfg)
