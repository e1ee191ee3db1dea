"""Benchmark scenarios, result rows and their table/JSON/CSV renderings."""

from __future__ import annotations

import concurrent.futures
import csv
import dataclasses
import io
import json
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from ccasim.board import load_profile
from ccasim.costs import (
    CostDelta,
    CostWeights,
    NoiseModel,
    Weight,
    default_weights,
    find_measurement,
    summarize,
)
from ccasim.errors import CcaSimError, EmptyRows, InvalidParams, MismatchedRows, ProfileError
from ccasim.gpt import BackendKind, build_table, create_shadow_gpt, reference_layout
from ccasim.gpt.layout import GRANULE
from ccasim.host import CvmConfig, Host, boot_system
from ccasim.monitor import SMC_NOP
from ccasim.rmm import Cacheability, RmiCommand, livelock_trace
from ccasim.units import format_size
from ccasim.world import World

MIB = 1 << 20
MEGA = 1_000_000
BACKENDS = tuple(b.value for b in BackendKind)


@dataclasses.dataclass(frozen=True)
class ScenarioSchema:
    description: str
    backends: Tuple[str, ...]
    default_backends: Tuple[str, ...]
    uses_ram: bool = False
    default_rams: Tuple[int, ...] = ()
    scale: int = 1
    default_iterations: int = 100


SCHEMAS: Dict[str, ScenarioSchema] = {
    "smc_rt": ScenarioSchema("no-op SMC round trip from the normal world", BACKENDS, ("single",)),
    "rmi_rt": ScenarioSchema("RMI round trip that returns straight from the RMM", BACKENDS, ("single",)),
    "rmi_version": ScenarioSchema("RMI VERSION call", BACKENDS, ("single",)),
    "rmi_delegate": ScenarioSchema("delegate one 4 KB granule", BACKENDS, ("single", "two-gpt")),
    "cvm_boot": ScenarioSchema("boot a 1-vCPU CVM", BACKENDS, ("single", "two-gpt"),
                               uses_ram=True, default_rams=(256 * MIB, 1024 * MIB), scale=MEGA),
    "shadow_gpt_create": ScenarioSchema("copy the template GPT into a live table", ("shadow",), ("shadow",),
                                        scale=MEGA),
    "fp_timer_demo": ScenarioSchema("lazy FP restore vs. timer exit livelock", BACKENDS, ("single",),
                                    default_iterations=10),
    "fwb_demo": ScenarioSchema("guest write observed by the host without FWB", BACKENDS, ("single",)),
}

DEMO_RAM = 2 * MIB


@dataclasses.dataclass(frozen=True)
class Scenario:
    id: str
    backend: str = "single"
    ram_size: Optional[int] = None
    iterations: Optional[int] = None
    profile: str = "rk3588"
    fwb_maintenance: bool = True
    fp_timer_fix: bool = True
    seed: int = 0
    noise: bool = False
    rounds: int = 1000

    def __post_init__(self):
        if self.id in SCHEMAS and self.iterations is None:
            object.__setattr__(self, "iterations", SCHEMAS[self.id].default_iterations)
        self.validate()

    @property
    def schema(self) -> ScenarioSchema:
        return SCHEMAS[self.id]

    def validate(self) -> None:
        if self.id not in SCHEMAS:
            raise InvalidParams(f"unknown scenario {self.id!r}")
        if self.backend not in self.schema.backends:
            raise InvalidParams(f"{self.id} does not run on backend {self.backend!r}")
        if self.iterations < 1:
            raise InvalidParams("iterations must be at least 1")
        if self.rounds < 0:
            raise InvalidParams("rounds must be non-negative")
        if not 0 <= self.seed < 1 << 64:
            raise InvalidParams("seed must fit in 64 bits")
        if self.schema.uses_ram:
            if self.ram_size is None or self.ram_size <= 0 or self.ram_size % GRANULE:
                raise InvalidParams(f"ram size {self.ram_size!r} is not a positive multiple of 4K")
        try:
            load_profile(self.profile)
        except ProfileError as exc:
            raise InvalidParams(str(exc)) from exc


@dataclasses.dataclass
class ResultRow:
    scenario: str
    backend: str
    mean_instr: float
    mean_cycles: float
    stdev_instr: float
    stdev_cycles: float
    scale: int = 1
    ram_size: Optional[int] = None
    iterations: int = 1
    extra: dict = dataclasses.field(default_factory=dict)

    @property
    def label(self) -> str:
        if self.ram_size is None:
            return self.scenario
        return f"{self.scenario} {format_size(self.ram_size)}"

    @property
    def key(self) -> Tuple[str, Optional[int]]:
        return (self.scenario, self.ram_size)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ResultRow":
        return cls(**data)


# --------------------------------------------------------------------------
# Single iterations


def _fresh(sc: Scenario, weights: CostWeights) -> Host:
    return boot_system(sc.profile, sc.backend, weights)


def _iteration(sc: Scenario, weights: CostWeights, index: int) -> Tuple[Weight, dict]:
    """Run one iteration on its own simulator instance."""
    if sc.id == "shadow_gpt_create":
        layout = reference_layout()
        template = build_table(layout)
        _, cost = create_shadow_gpt(template)
        return cost.total(weights), {"table_bytes": template.byte_size}

    host = _fresh(sc, weights)
    monitor = host.monitor
    if sc.id == "smc_rt":
        _, cost = monitor.call(host.core, SMC_NOP)
        return cost.total(weights), {}
    if sc.id in ("rmi_rt", "rmi_version"):
        cmd = RmiCommand.NOP if sc.id == "rmi_rt" else RmiCommand.VERSION
        status, values, cost = host.rmi(cmd)
        monitor.ledger.apply(cost)
        return cost.total(weights), {"status": int(status), "values": list(values)}
    if sc.id == "rmi_delegate":
        pa = host.alloc(GRANULE)
        status, _, cost = host.rmi(RmiCommand.GRANULE_DELEGATE, pa)
        if status:
            raise CcaSimError(f"delegate of {pa:#x} failed with status {status}")
        monitor.ledger.apply(cost)
        return cost.total(weights), {}
    if sc.id == "cvm_boot":
        report = host.cvm_boot(CvmConfig(ram_size=sc.ram_size, backend=sc.backend))
        if not report.complete:
            raise CcaSimError(f"CVM boot failed: {report.error}")
        return report.total, {"granules_delegated": report.granules_delegated}
    if sc.id == "fp_timer_demo":
        report = host.cvm_boot(CvmConfig(ram_size=DEMO_RAM, backend=sc.backend))
        run = host.run_guest(report.handle, livelock_trace(sc.rounds), fp_timer_fix=sc.fp_timer_fix)
        extra = {"rounds": sc.rounds, "fp_timer_fix": sc.fp_timer_fix, "retired": run.progress,
                 "expected": 10 * sc.rounds, "livelocked": run.livelocked, "exits": run.exits,
                 "injections": run.injections}
        return Weight(run.instr, run.cycles), extra
    if sc.id == "fwb_demo":
        stale, cost = fwb_interleaving(host, sc.fwb_maintenance, np.random.default_rng([sc.seed, index]))
        return cost.total(weights), {"stale": stale, "fwb_maintenance": sc.fwb_maintenance}
    raise InvalidParams(f"no driver for scenario {sc.id!r}")


def fwb_interleaving(host: Host, maintenance: bool, rng: np.random.Generator, ops: int = 8) -> Tuple[bool, CostDelta]:
    """Random guest writes and host reads of one granule; True if any read was stale."""
    if not host.rmm.realms:
        host.cvm_boot(CvmConfig(ram_size=DEMO_RAM))
    rmm = host.rmm
    realm = next(iter(rmm.realms.values()))
    # The RD sits at the bottom of the realm's delegated pool.
    pa = realm.rd_granule + (4 + len(realm.stage2.entries)) * GRANULE
    ipa = len(realm.stage2.entries) * GRANULE
    _, cost = rmm.stage2_map(realm, ipa, pa, Cacheability.NON_CACHEABLE, mitigation=maintenance)
    latest = None
    stale = False
    wrote = False
    for i in range(ops):
        # Ensure at least one write followed by a read.
        do_write = (not wrote) or (i < ops - 1 and rng.random() < 0.5)
        if do_write:
            latest = int(rng.integers(1, 1 << 32))
            cost.extend(rmm.guest_write(realm, ipa, latest))
            wrote = True
        else:
            seen = rmm.memory_read_visible(World.NORMAL, pa)
            stale |= seen != latest
    seen = rmm.memory_read_visible(World.NORMAL, pa)
    stale |= seen != latest
    return stale, cost


# --------------------------------------------------------------------------
# Running scenarios


def _run_indexed(args):
    sc, weights_json, index = args
    weights = CostWeights.from_json_dict(json.loads(weights_json))
    return index, _iteration(sc, weights, index)


def run_scenario(sc: Scenario, weights: Optional[CostWeights] = None, jobs: int = 1) -> ResultRow:
    weights = weights or default_weights()
    if jobs > 1 and sc.iterations > 1:
        payload = weights.dumps()
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_indexed, [(sc, payload, i) for i in range(sc.iterations)]))
    else:
        results = [(i, _iteration(sc, weights, i)) for i in range(sc.iterations)]
    results.sort(key=lambda r: r[0])
    samples = [(w.instr, w.cycles) for _, (w, _) in results]
    extras = [e for _, (_, e) in results]
    noise = None
    if sc.noise:
        ref = find_measurement(sc.id, sc.backend, sc.ram_size)
        sd_i, sd_c = (float(ref.stdev_instr), float(ref.stdev_cycles)) if ref else (0.0, 0.0)
        noise = NoiseModel(sc.seed, sd_i, sd_c)
    stats = summarize(samples, noise, sc.schema.scale)
    extra = _merge_extras(sc, extras)
    return ResultRow(sc.id, sc.backend, stats.mean_instr, stats.mean_cycles, stats.stdev_instr,
                     stats.stdev_cycles, sc.schema.scale, sc.ram_size, sc.iterations, extra)


def _merge_extras(sc: Scenario, extras: List[dict]) -> dict:
    if sc.id == "fwb_demo":
        stale = sum(1 for e in extras if e["stale"])
        return {"profile": sc.profile, "fwb_maintenance": sc.fwb_maintenance,
                "interleavings": len(extras), "stale": stale, "stale_fraction": stale / len(extras)}
    first = extras[0] if extras else {}
    if any(e != first for e in extras):
        raise CcaSimError(f"{sc.id}: iterations disagree on deterministic outputs")
    merged = dict(first)
    if sc.id == "shadow_gpt_create":
        # Compare a copy's serialized form against an independent rebuild.
        layout = reference_layout()
        live, _ = create_shadow_gpt(build_table(layout))
        fresh = build_table(layout, cached=False)
        merged["bit_identical"] = live.dump() == fresh.dump()
    return merged


def expand(scenario: str = "all", backend: Optional[str] = None, ram: Optional[int] = None,
           **params) -> List[Scenario]:
    """Scenario list for a CLI-style request; defaults mirror the reference table."""
    ids = list(SCHEMAS) if scenario == "all" else [scenario]
    out = []
    for sid in ids:
        if sid not in SCHEMAS:
            raise InvalidParams(f"unknown scenario {sid!r}")
        schema = SCHEMAS[sid]
        if backend is None:
            backends = schema.default_backends
        elif backend in schema.backends:
            backends = (backend,)
        elif scenario == "all":
            continue
        else:
            raise InvalidParams(f"{sid} does not run on backend {backend!r}")
        rams = ((ram,) if ram is not None else schema.default_rams) if schema.uses_ram else (None,)
        for b in backends:
            for r in rams:
                out.append(Scenario(sid, b, r, **params))
    return out


def run_all(scenarios: Iterable[Scenario], weights: Optional[CostWeights] = None, jobs: int = 1) -> List[ResultRow]:
    return [run_scenario(sc, weights, jobs) for sc in scenarios]


# --------------------------------------------------------------------------
# Output

CSV_FIELDS = ("scenario", "backend", "mean_instr", "mean_cycles", "stdev_instr", "stdev_cycles", "scale")
BACKEND_TITLES = {"single": "Single GPT", "two-gpt": "Two-GPT", "shadow": "Shadow-GPT"}


def _fmt(x: float) -> str:
    if float(x).is_integer():
        return str(int(x))
    return f"{x:.4f}".rstrip("0")


def _scale_label(scale: int) -> str:
    return "1M" if scale == MEGA else str(scale)


def emit_table(rows: Sequence[ResultRow], fmt: str = "table") -> str:
    if not rows:
        raise EmptyRows("no result rows to emit")
    if fmt == "json":
        return json.dumps([r.to_dict() for r in rows], indent=2, sort_keys=True) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_FIELDS)
        for r in rows:
            writer.writerow([r.label, r.backend, _fmt(r.mean_instr), _fmt(r.mean_cycles),
                             _fmt(r.stdev_instr), _fmt(r.stdev_cycles), r.scale])
        return buf.getvalue()
    if fmt != "table":
        raise InvalidParams(f"unknown output format {fmt!r}")
    header = ("Benchmark", "Instr", "Cycles", "Stdev instr", "Stdev cycles", "Scale")
    widths = (24, 12, 12, 12, 12, 6)
    lines = []
    order = [b for b in BACKENDS if any(r.backend == b for r in rows)]
    for backend in order:
        if lines:
            lines.append("")
        lines.append(f"== {BACKEND_TITLES[backend]} ==")
        lines.append("  ".join(h.ljust(w) if i == 0 else h.rjust(w) for i, (h, w) in enumerate(zip(header, widths))))
        for r in rows:
            if r.backend != backend:
                continue
            cells = (r.label, _fmt(r.mean_instr), _fmt(r.mean_cycles), _fmt(r.stdev_instr),
                     _fmt(r.stdev_cycles), _scale_label(r.scale))
            lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(cells, widths))))
    return "\n".join(lines) + "\n"


def rows_from_json(text: str) -> List[ResultRow]:
    return [ResultRow.from_dict(d) for d in json.loads(text)]


@dataclasses.dataclass(frozen=True)
class Overhead:
    scenario: str
    ram_size: Optional[int]
    backend_a: str
    backend_b: str
    instr_pct: float
    cycles_pct: float

    @staticmethod
    def display(pct: float) -> str:
        digits = 1 if abs(pct) >= 5 else 2
        return f"{pct:+.{digits}f}%"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _pct(base: float, other: float) -> float:
    if base == 0:
        return 0.0 if other == 0 else float("inf")
    return (other - base) / base * 100.0


def compare(rows_a: Sequence[ResultRow], rows_b: Sequence[ResultRow]) -> List[Overhead]:
    """Percentage change of each row in ``rows_b`` over its match in ``rows_a``."""
    a = {r.key: r for r in rows_a}
    b = {r.key: r for r in rows_b}
    if len(a) != len(rows_a) or len(b) != len(rows_b) or set(a) != set(b):
        raise MismatchedRows(f"row sets differ: {sorted(map(str, set(a) ^ set(b)))}")
    out = []
    for key in [r.key for r in rows_a]:
        x, y = a[key], b[key]
        out.append(Overhead(key[0], key[1], x.backend, y.backend,
                            _pct(x.mean_instr, y.mean_instr), _pct(x.mean_cycles, y.mean_cycles)))
    return out


def emit_overheads(items: Sequence[Overhead], fmt: str = "table") -> str:
    if fmt == "json":
        return json.dumps([o.to_dict() for o in items], indent=2, sort_keys=True) + "\n"
    lines = []
    for o in items:
        label = o.scenario if o.ram_size is None else f"{o.scenario} {format_size(o.ram_size)}"
        lines.append(f"{label:<24} {o.backend_a} -> {o.backend_b}: instr {Overhead.display(o.instr_pct)}"
                     f"  cycles {Overhead.display(o.cycles_pct)}")
    return "\n".join(lines) + "\n"
