"""EL3 monitor model.

Each core carries its architectural SCR_EL3.NS bit in its register file and
a software NSE' bit in per-core context memory. The monitor reads both on
every EL3 entry to find the calling world, dispatches SMCs, switches the
banked register context between worlds and runs the granule delegation
service on behalf of the RMM.

On boards without RME the realm and normal worlds both execute with NS=1, so
their EL2 TLB entries are indistinguishable. A switch between the two
therefore flushes the EL2 TLB, unless the profile runs in ASID-partition mode
where the RMM only ever uses a reserved ASID range.
"""

from __future__ import annotations

import dataclasses
import enum
import json
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

from ccasim.board import BoardProfile, Reg, RegisterFile, initial_registers, write_system_register
from ccasim.costs import CostDelta, CostWeights, PmuLedger, default_weights
from ccasim.errors import BootError, IllegalGranuleTransition, InvalidSecurityState
from ccasim.gpt import (
    BackendKind,
    GptBackend,
    MemoryLayout,
    TlbMaintenanceToken,
    backend_delegate,
    backend_undelegate,
    gpc_permits,
    gpt_init,
    gpt_walk,
)
from ccasim.world import EL, ENCODING_OF, World, derive_world

SMC_SUCCESS = 0
SMC_NOT_SUPPORTED = -1

# Benchmark no-op in the SiP fast-call range.
SMC_NOP = 0xC200_0000
# RMM -> EL3 granule transition requests.
RMM_GTSI_DELEGATE = 0xC400_01B0
RMM_GTSI_UNDELEGATE = 0xC400_01B1

RMI_FID_RANGE = range(0xC400_0150, 0xC400_0190)

GP_REGS = 31
HOST_ASIDS = range(0, 0xFF00)
RMM_ASIDS = range(0xFF00, 0x10000)


class Regime(enum.Enum):
    EL2 = "el2"
    EL10 = "el1&0"


@dataclasses.dataclass
class BankedRegs:
    """Register state saved and restored per (core, world)."""

    x: List[int] = dataclasses.field(default_factory=lambda: [0] * GP_REGS)
    ttbr0_el2: int = 0
    ttbr1_el2: int = 0
    cntp_ctl_el0: int = 0
    cntp_cval_el0: int = 0
    afsr0_el2: int = 0
    afsr1_el2: int = 0

    def copy(self) -> "BankedRegs":
        return BankedRegs(list(self.x), self.ttbr0_el2, self.ttbr1_el2, self.cntp_ctl_el0,
                          self.cntp_cval_el0, self.afsr0_el2, self.afsr1_el2)

    def as_tuple(self) -> tuple:
        return (tuple(self.x), self.ttbr0_el2, self.ttbr1_el2, self.cntp_ctl_el0,
                self.cntp_cval_el0, self.afsr0_el2, self.afsr1_el2)


BANKED_SCALARS = ("ttbr0_el2", "ttbr1_el2", "cntp_ctl_el0", "cntp_cval_el0", "afsr0_el2", "afsr1_el2")


@dataclasses.dataclass
class CoreSecurityState:
    ns: int
    nse_prime: int
    el: EL

    @property
    def world(self) -> World:
        return derive_world(self.ns, self.nse_prime, self.el)


class TlbModel:
    """Translation cache keyed by (va page, ASID, regime, tag).

    On boards without RME the tag is only the NS bit, so the realm and
    normal worlds alias each other.
    """

    def __init__(self, partition: bool = False):
        self.entries: Dict[tuple, int] = {}
        self.partition = partition
        self.reserved_asids = RMM_ASIDS
        self.flushes = 0

    def lookup(self, tag, regime: Regime, asid: int, va: int) -> Optional[int]:
        return self.entries.get((va >> 12, asid, regime, tag))

    def fill(self, tag, regime: Regime, asid: int, va: int, pa_page: int, owner: World) -> None:
        if self.partition and regime is Regime.EL2:
            in_reserved = asid in self.reserved_asids
            if (owner is World.REALM) != in_reserved:
                raise InvalidSecurityState(f"{owner.value} may not fill ASID {asid:#x} in partition mode")
        self.entries[(va >> 12, asid, regime, tag)] = pa_page

    def invalidate_all(self) -> None:
        self.entries.clear()
        self.flushes += 1

    def invalidate_regime(self, regime: Regime) -> None:
        for key in [k for k in self.entries if k[2] is regime]:
            del self.entries[key]
        self.flushes += 1

    def __len__(self):
        return len(self.entries)


class Core:
    def __init__(self, index: int, profile: BoardProfile):
        self.index = index
        self.regs: RegisterFile = initial_registers(profile)
        # NSE' lives in the monitor's per-core context memory.
        self.context_nse = 0
        self.el = EL.EL2
        self.live = BankedRegs()
        self.saved: Dict[World, BankedRegs] = {w: BankedRegs() for w in (World.NORMAL, World.REALM, World.SECURE)}
        self.tlb = TlbModel(partition=profile.asid_partition_mode)
        self.trace: Optional[List[Tuple[World, int, EL]]] = None

    @property
    def state(self) -> CoreSecurityState:
        return CoreSecurityState(self.regs.scr_el3_ns, self.context_nse, self.el)

    @property
    def world(self) -> World:
        return self.state.world

    @property
    def lower_world(self) -> World:
        """World the core returns to when it leaves EL3."""
        return derive_world(self.regs.scr_el3_ns, self.context_nse, EL.EL2)

    def record(self) -> None:
        if self.trace is not None:
            self.trace.append((self.world, self.regs.scr_el3_ns, self.el))

    def tlb_tag(self, profile: BoardProfile):
        if profile.has_rme:
            return self.lower_world
        return ("ns", self.regs.scr_el3_ns)


@dataclasses.dataclass(frozen=True)
class SmcResult:
    status: int
    values: tuple = ()


@dataclasses.dataclass
class BootPhase:
    name: str
    instr: float
    cycles: float


@dataclasses.dataclass
class SystemBootReport:
    phases: List[BootPhase]

    @property
    def order(self) -> List[str]:
        return [p.name for p in self.phases]

    def to_json(self) -> str:
        return json.dumps({"phases": [dataclasses.asdict(p) for p in self.phases]}, indent=2, sort_keys=True)


class Monitor:
    """Root-world firmware plus the simulator state it serializes."""

    def __init__(self, profile: BoardProfile, layout: MemoryLayout, weights: Optional[CostWeights] = None,
                 cross_world_pmu: bool = True):
        self.profile = profile
        self.layout = layout
        self.weights = weights or default_weights()
        self.ledger = PmuLedger(self.weights, cross_world=cross_world_pmu)
        self.cores = [Core(i, profile) for i in range(profile.core_count)]
        self.backend: Optional[GptBackend] = None
        # Snapshot the GPC sees until the next TLB maintenance completes.
        self.visible_backend: Optional[GptBackend] = None
        self.pending_tokens: List[TlbMaintenanceToken] = []
        self.rmm = None
        self.boot_report: Optional[SystemBootReport] = None

    def core(self, core: Union[int, Core]) -> Core:
        return core if isinstance(core, Core) else self.cores[core]

    # -- world switching ---------------------------------------------------

    def world_switch(self, core: Union[int, Core], target: World) -> CostDelta:
        core = self.core(core)
        if core.el != EL.EL3:
            raise InvalidSecurityState("world_switch requires the core at EL3")
        if target is World.ROOT:
            raise InvalidSecurityState("root world is not a switch target")
        current = core.lower_world
        core.saved[current] = core.live.copy()
        core.live = core.saved[target].copy()
        ns, nse = ENCODING_OF[target]
        core.regs = write_system_register(self.profile, core.regs, Reg.SCR_EL3_NS, ns)
        core.context_nse = nse
        cost = CostDelta().add(World.ROOT, "world_switch")
        multiplex = {current, target} == {World.NORMAL, World.REALM}
        if multiplex and not self.profile.has_rme and not self.profile.asid_partition_mode:
            core.tlb.invalidate_regime(Regime.EL2)
            cost.add(World.ROOT, "tlb_full_flush")
        core.record()
        return cost

    def enter_el3(self, core: Union[int, Core]) -> Tuple[EL, CostDelta]:
        core = self.core(core)
        if core.el == EL.EL3:
            raise InvalidSecurityState("core already at EL3")
        prev = core.el
        core.el = EL.EL3
        core.record()
        cost = CostDelta()
        if not self.profile.has_rme:
            cost.add(World.ROOT, "nse_lookup")
        return prev, cost

    def eret(self, core: Union[int, Core], el: EL) -> None:
        core = self.core(core)
        core.el = el
        core.record()

    def switch(self, core: Union[int, Core], target: World, el: EL = EL.EL2) -> CostDelta:
        """Convenience: trap to EL3, switch worlds, return at ``el``."""
        _, cost = self.enter_el3(core)
        cost.extend(self.world_switch(core, target))
        self.eret(core, el)
        return cost

    # -- TLB maintenance ---------------------------------------------------

    def tlb_invalidate_all(self, core: Union[int, Core], tokens: Sequence[TlbMaintenanceToken] = ()) -> CostDelta:
        """Stand-in for TLBI PAALLOS: flush every core, every regime and world."""
        for c in self.cores:
            c.tlb.invalidate_all()
        for tok in list(tokens) + self.pending_tokens:
            tok.satisfy()
        self.pending_tokens.clear()
        self.visible_backend = self.backend
        return CostDelta().add(World.ROOT, "tlb_full_flush")

    def translate(self, core: Union[int, Core], asid: int, va: int,
                  walk: Callable[[World, int, int], int], regime: Regime = Regime.EL2) -> int:
        """EL2 translation through the core's TLB; ``walk`` resolves misses."""
        core = self.core(core)
        world = core.world
        tag = core.tlb_tag(self.profile)
        hit = core.tlb.lookup(tag, regime, asid, va)
        if hit is not None:
            return hit
        pa_page = walk(world, asid, va >> 12)
        core.tlb.fill(tag, regime, asid, va, pa_page, world)
        return pa_page

    def gpc_check(self, world: World, pa: int) -> bool:
        return gpc_permits(gpt_walk(self.visible_backend.primary, pa), world)

    # -- services ------------------------------------------------------------

    def delegation_service(self, core: Union[int, Core], pa: int, delegate: bool, count: int = 1) -> Tuple[int, CostDelta]:
        core = self.core(core)
        if core.lower_world is not World.REALM:
            return SMC_NOT_SUPPORTED, CostDelta()
        op = backend_delegate if delegate else backend_undelegate
        try:
            backend, tokens, cost = op(self.backend, pa, count)
        except IllegalGranuleTransition:
            return SMC_NOT_SUPPORTED, CostDelta()
        self.backend = backend
        self.pending_tokens.extend(tokens)
        cost.extend(self.tlb_invalidate_all(core, tokens))
        return SMC_SUCCESS, cost

    def smc_dispatch(self, core: Union[int, Core], fid: int, *args) -> Tuple[SmcResult, CostDelta]:
        core = self.core(core)
        caller = core.lower_world
        prev_el, cost = self.enter_el3(core)
        cost.add(World.ROOT, "smc_rt")
        result: SmcResult
        if fid == SMC_NOP:
            result = SmcResult(SMC_SUCCESS)
        elif fid in RMI_FID_RANGE and caller is World.NORMAL and self.rmm is not None:
            cost.extend(self.world_switch(core, World.REALM))
            self.eret(core, EL.EL2)
            rmi_result, rmm_cost = self.rmm.rmi_handle(fid, args, core)
            cost.extend(rmm_cost)
            # RMM signals completion with another SMC.
            _, entry = self.enter_el3(core)
            cost.extend(entry)
            cost.extend(self.world_switch(core, World.NORMAL))
            result = SmcResult(int(rmi_result.status), rmi_result.values)
        elif fid in (RMM_GTSI_DELEGATE, RMM_GTSI_UNDELEGATE) and caller is World.REALM:
            pa = args[0]
            count = args[1] if len(args) > 1 else 1
            status, svc = self.delegation_service(core, pa, fid == RMM_GTSI_DELEGATE, count)
            cost.extend(svc)
            result = SmcResult(status)
        else:
            result = SmcResult(SMC_NOT_SUPPORTED)
        self.eret(core, prev_el)
        return result, cost

    def call(self, core: Union[int, Core], fid: int, *args) -> Tuple[SmcResult, CostDelta]:
        """smc_dispatch and charge the PMU ledger."""
        result, cost = self.smc_dispatch(core, fid, *args)
        self.ledger.apply(cost)
        return result, cost


def boot_sequence(profile: BoardProfile, layout: Optional[MemoryLayout],
                  backend_kind: Union[BackendKind, str] = BackendKind.SINGLE,
                  weights: Optional[CostWeights] = None, cross_world_pmu: bool = True) -> Tuple[Monitor, CostDelta]:
    """Boot firmware: GPT setup in BL31, then RMM init, then the host."""
    from ccasim.rmm import Rmm

    if layout is None:
        raise BootError("no memory layout supplied")
    kind = BackendKind(backend_kind)
    monitor = Monitor(profile, layout, weights, cross_world_pmu)
    phases: List[BootPhase] = []
    total = CostDelta()

    def finish(name: str, cost: CostDelta) -> None:
        w = cost.total(monitor.weights)
        monitor.ledger.apply(cost)
        total.extend(cost)
        phases.append(BootPhase(name, float(w.instr), float(w.cycles)))

    backend, cost = gpt_init(layout, kind)
    monitor.backend = monitor.visible_backend = backend
    gpt_region = next((r for r in layout.regions if r.name == "gpt-tables"), layout.regions[0])
    for core in monitor.cores:
        core.regs = write_system_register(profile, core.regs, Reg.GPTBR_EL3, gpt_region.base >> 12)
        core.regs = write_system_register(profile, core.regs, Reg.GPCCR_EL3, profile.gpccr_shadow)
    finish("gpt_init", cost)

    monitor.rmm = Rmm(profile, layout, monitor)
    finish("rmm_init", CostDelta())

    for core in monitor.cores:
        core.regs = write_system_register(profile, core.regs, Reg.SCR_EL3_NS, 1)
        core.context_nse = 0
        core.el = EL.EL2
    finish("host_start", CostDelta())

    monitor.boot_report = SystemBootReport(phases)
    return monitor, total
