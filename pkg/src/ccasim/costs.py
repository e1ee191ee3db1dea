"""Cost accounting: primitive weights, charge lists, the PMU ledger,
calibration against measured rows, and sample statistics.

Simulated operations never compute instruction or cycle counts themselves.
They return a :class:`CostDelta`, a weight-independent multiset of
``(world, primitive)`` charges, which a :class:`PmuLedger` prices against a
:class:`CostWeights` table. Weights are exact rationals; rounding happens only
when a report is rendered.
"""

from __future__ import annotations

import dataclasses
import json
import math
from collections import Counter
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from ccasim.errors import EmptySamples, NegativeWeight, UnderdeterminedSystem, UnknownPrimitive
from ccasim.world import World

MIB = 1 << 20
GRANULE = 4096

RMI_HANDLED = ("NOP", "VERSION", "REALM_CREATE", "REALM_ACTIVATE", "REALM_DESTROY", "REC_CREATE", "REC_ENTER")
RSI_HANDLED = ("VERSION",)

BASE_PRIMITIVES = (
    "smc_rt",
    "nse_lookup",
    "world_switch",
    "tlb_full_flush",
    "rmi_rt",
    "gpt_build_per_table",
    "gpt_copy_per_byte",
    "gpt_set_per_granule",
    "delegate_standalone",
    "delegate_boot_path",
    "two_gpt_extra_per_delegate",
    "two_gpt_boot_per_granule",
    "two_gpt_boot_constant",
    "stage2_maintenance_per_granule",
    "boot_base",
)


def rmi_handler(cmd: str) -> str:
    return f"rmi_handler[{cmd}]"


def rsi_handler(cmd: str) -> str:
    return f"rsi_handler[{cmd}]"


PRIMITIVES = (
    BASE_PRIMITIVES
    + tuple(rmi_handler(c) for c in RMI_HANDLED)
    + tuple(rsi_handler(c) for c in RSI_HANDLED)
)


class Weight(NamedTuple):
    instr: Fraction
    cycles: Fraction

    def __add__(self, other):  # type: ignore[override]
        return Weight(self.instr + other.instr, self.cycles + other.cycles)

    def __sub__(self, other):
        return Weight(self.instr - other.instr, self.cycles - other.cycles)

    def __mul__(self, k):  # type: ignore[override]
        return Weight(self.instr * k, self.cycles * k)

    __rmul__ = __mul__

    def __truediv__(self, k):
        return Weight(Fraction(self.instr) / k, Fraction(self.cycles) / k)


ZERO = Weight(Fraction(0), Fraction(0))


def weight(instr, cycles) -> Weight:
    return Weight(Fraction(instr), Fraction(cycles))


def _encode_num(x: Fraction):
    x = Fraction(x)
    return x.numerator if x.denominator == 1 else f"{x.numerator}/{x.denominator}"


def _decode_num(x) -> Fraction:
    if isinstance(x, str):
        return Fraction(x)
    if isinstance(x, float):
        return Fraction(x).limit_denominator(1 << 32)
    return Fraction(x)


@dataclasses.dataclass(frozen=True)
class CostWeights:
    """Per-primitive (instructions, cycles) weights."""

    table: Mapping[str, Weight]

    def __post_init__(self):
        for name, w in self.table.items():
            if name not in PRIMITIVES:
                raise UnknownPrimitive(name)
            if w.instr < 0 or w.cycles < 0:
                raise NegativeWeight(f"{name} = {w}")

    def __getitem__(self, primitive: str) -> Weight:
        if primitive not in PRIMITIVES:
            raise UnknownPrimitive(primitive)
        return self.table.get(primitive, ZERO)

    def replace(self, **changes: Weight) -> "CostWeights":
        table = dict(self.table)
        for key, value in changes.items():
            table[key] = value
        return CostWeights(table)

    def with_weights(self, changes: Mapping[str, Weight]) -> "CostWeights":
        table = dict(self.table)
        table.update(changes)
        return CostWeights(table)

    @classmethod
    def zeros(cls) -> "CostWeights":
        return cls({})

    def to_json_dict(self) -> dict:
        out: dict = {}
        for name in PRIMITIVES:
            w = self[name]
            entry = {"instr": _encode_num(w.instr), "cycles": _encode_num(w.cycles)}
            if name.startswith(("rmi_handler[", "rsi_handler[")):
                group, cmd = name[:-1].split("[")
                out.setdefault(group, {})[cmd] = entry
            else:
                out[name] = entry
        return out

    @classmethod
    def from_json_dict(cls, data: Mapping) -> "CostWeights":
        table = {}
        for key, value in data.items():
            if key in ("rmi_handler", "rsi_handler"):
                for cmd, entry in value.items():
                    table[f"{key}[{cmd}]"] = Weight(_decode_num(entry["instr"]), _decode_num(entry["cycles"]))
            else:
                if key not in PRIMITIVES:
                    raise UnknownPrimitive(key)
                table[key] = Weight(_decode_num(value["instr"]), _decode_num(value["cycles"]))
        return cls(table)

    def dumps(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2) + "\n"

    @classmethod
    def load(cls, path: Union[str, Path]) -> "CostWeights":
        return cls.from_json_dict(json.loads(Path(path).read_text()))


_DEFAULT: Optional[CostWeights] = None


def default_weights() -> CostWeights:
    """The shipped weight table, calibrated from the reference measurements."""
    global _DEFAULT
    if _DEFAULT is None:
        text = resources.files("ccasim.data").joinpath("weights_default.json").read_text()
        _DEFAULT = CostWeights.from_json_dict(json.loads(text))
    return _DEFAULT


class CostDelta:
    """Multiset of charges keyed by (world, primitive)."""

    __slots__ = ("_charges",)

    def __init__(self, charges: Optional[Mapping[Tuple[World, str], int]] = None):
        self._charges: Counter = Counter()
        if charges:
            for key, n in charges.items():
                self.add(key[0], key[1], n)

    def add(self, world: World, primitive: str, n: int = 1) -> "CostDelta":
        if primitive not in PRIMITIVES:
            raise UnknownPrimitive(primitive)
        if n:
            self._charges[(world, primitive)] += n
        return self

    def extend(self, other: "CostDelta") -> "CostDelta":
        self._charges.update(other._charges)
        return self

    def __add__(self, other: "CostDelta") -> "CostDelta":
        return CostDelta(self._charges).extend(other)

    def scaled(self, k: int) -> "CostDelta":
        return CostDelta({key: n * k for key, n in self._charges.items()})

    def __iter__(self) -> Iterator[Tuple[World, str, int]]:
        for (world, prim), n in sorted(self._charges.items(), key=lambda kv: (kv[0][0].value, kv[0][1])):
            yield world, prim, n

    def __eq__(self, other):
        return isinstance(other, CostDelta) and +self._charges == +other._charges

    def __bool__(self):
        return any(self._charges.values())

    def count(self, primitive: str, world: Optional[World] = None) -> int:
        return sum(n for (w, p), n in self._charges.items() if p == primitive and (world is None or w == world))

    def total(self, weights: CostWeights) -> Weight:
        acc = ZERO
        for _, prim, n in self:
            acc = acc + weights[prim] * n
        return acc

    def __repr__(self):
        body = ", ".join(f"{w.value}:{p}x{n}" for w, p, n in self)
        return f"CostDelta({body})"


class PmuLedger:
    """Instruction/cycle counters.

    With ``cross_world`` set, counters are not saved and restored on world
    switch: every read sees one global counter. Without it, each world reads
    only the charges it incurred itself.
    """

    def __init__(self, weights: Optional[CostWeights] = None, cross_world: bool = True):
        self.weights = weights or default_weights()
        self.cross_world = cross_world
        self.per_world: Dict[World, Weight] = {w: ZERO for w in World}
        self.global_counter: Weight = ZERO

    def charge(self, world: World, primitive: str, multiplier: int = 1) -> "PmuLedger":
        if multiplier < 0:
            raise ValueError("multiplier must be non-negative")
        if multiplier == 0:
            self.weights[primitive]
            return self
        amount = self.weights[primitive] * multiplier
        self.per_world[world] = self.per_world[world] + amount
        self.global_counter = self.global_counter + amount
        return self

    def apply(self, delta: CostDelta) -> "PmuLedger":
        for world, prim, n in delta:
            self.charge(world, prim, n)
        return self

    def read(self, world: World) -> Weight:
        if self.cross_world:
            return self.global_counter
        return self.per_world[world]

    def copy(self) -> "PmuLedger":
        dup = PmuLedger(self.weights, self.cross_world)
        dup.per_world = dict(self.per_world)
        dup.global_counter = self.global_counter
        return dup

    def counters(self) -> Dict[str, Weight]:
        out = {w.value: self.per_world[w] for w in World}
        out["global"] = self.global_counter
        return out


# --------------------------------------------------------------------------
# Reference measurements


class Measurement(NamedTuple):
    scenario: str
    backend: str
    instr: Fraction
    cycles: Fraction
    ram_size: Optional[int] = None
    stdev_instr: Fraction = Fraction(0)
    stdev_cycles: Fraction = Fraction(0)

    @property
    def mean(self) -> Weight:
        return Weight(Fraction(self.instr), Fraction(self.cycles))

    def key(self) -> Tuple[str, str, Optional[int]]:
        return (self.scenario, self.backend, self.ram_size)


def _m(scenario, backend, instr, cycles, sd_i, sd_c, ram=None, scale=1):
    return Measurement(scenario, backend, Fraction(instr * scale), Fraction(cycles * scale), ram,
                       Fraction(sd_i * scale), Fraction(sd_c * scale))


M = 1_000_000

MEASURED_ROWS: Tuple[Measurement, ...] = (
    _m("cvm_boot", "single", 1900, 2647, 6, 15, 256 * MIB, M),
    _m("cvm_boot", "single", 2015, 2869, 8, 18, 1024 * MIB, M),
    _m("rmi_delegate", "single", 2865, 7988, 187, 365),
    _m("rmi_version", "single", 994, 3583, 120, 222),
    _m("rmi_rt", "single", 932, 3370, 115, 209),
    _m("smc_rt", "single", 182, 421, 44, 68),
    _m("cvm_boot", "two-gpt", 1928, 2690, 9, 10, 256 * MIB, M),
    _m("cvm_boot", "two-gpt", 2039, 2902, 7, 18, 1024 * MIB, M),
    _m("rmi_delegate", "two-gpt", 3488, 8654, 182, 372),
)

SHADOW_GPT_CREATE = Measurement("shadow_gpt_create", "shadow", Fraction(50_860_000), Fraction(34_610_000))

REFERENCE_MEASUREMENTS: Tuple[Measurement, ...] = MEASURED_ROWS + (SHADOW_GPT_CREATE,)


def find_measurement(scenario: str, backend: str, ram_size: Optional[int] = None,
                     rows: Iterable[Measurement] = REFERENCE_MEASUREMENTS) -> Optional[Measurement]:
    for row in rows:
        if row.scenario == scenario and row.backend == backend and row.ram_size == ram_size:
            return row
    return None


def load_measurements(data) -> List[Measurement]:
    """Parse measurement rows from JSON-like data (a list of dicts)."""
    from ccasim.units import parse_size

    rows = []
    for item in data:
        scale = Fraction(item.get("scale", 1))
        ram = item.get("ram")
        rows.append(Measurement(
            scenario=item["scenario"],
            backend=item.get("backend", "single"),
            instr=_decode_num(item["instr"]) * scale,
            cycles=_decode_num(item["cycles"]) * scale,
            ram_size=parse_size(ram) if ram is not None else None,
            stdev_instr=_decode_num(item.get("stdev_instr", 0)) * scale,
            stdev_cycles=_decode_num(item.get("stdev_cycles", 0)) * scale,
        ))
    return rows


def measurements_to_json(rows: Iterable[Measurement]) -> list:
    out = []
    for row in rows:
        item = {"scenario": row.scenario, "backend": row.backend,
                "instr": _encode_num(row.instr), "cycles": _encode_num(row.cycles)}
        if row.ram_size is not None:
            item["ram"] = row.ram_size
        out.append(item)
    return out


# --------------------------------------------------------------------------
# Calibration

# Sub-weights that the reference rows cannot separate from their neighbours.
# They are taken as given and the identifiable residual weights are solved
# around them.
UNIDENTIFIED = (
    "nse_lookup",
    "world_switch",
    "tlb_full_flush",
    "gpt_set_per_granule",
    "gpt_build_per_table",
    "stage2_maintenance_per_granule",
    rmi_handler("REALM_CREATE"),
    rmi_handler("REALM_ACTIVATE"),
    rmi_handler("REALM_DESTROY"),
    rmi_handler("REC_CREATE"),
    rmi_handler("REC_ENTER"),
    rsi_handler("VERSION"),
)


@dataclasses.dataclass(frozen=True)
class PathModel:
    """Which conditional charges the calibrated platform incurs."""

    nse_lookup_per_entry: bool = True   # no RME: NSE' read from context memory
    flush_on_multiplex: bool = True     # no RME and no ASID partition
    vcpus: int = 1


def composite_smc_rt(w: CostWeights, path: PathModel) -> Weight:
    return w["smc_rt"] + (w["nse_lookup"] if path.nse_lookup_per_entry else ZERO)


def composite_rmi(w: CostWeights, path: PathModel, handler: Weight) -> Weight:
    """Host SMC, switch to realm, RMM work, completion SMC, switch back."""
    entry = w["nse_lookup"] if path.nse_lookup_per_entry else ZERO
    switch = w["world_switch"] + (w["tlb_full_flush"] if path.flush_on_multiplex else ZERO)
    return composite_smc_rt(w, path) + entry + switch * 2 + w["rmi_rt"] + handler


def composite_delegate(w: CostWeights, path: PathModel, tables: int = 1, two_gpt: bool = False) -> Weight:
    service = composite_smc_rt(w, path) + w["gpt_set_per_granule"] * tables + w["tlb_full_flush"]
    if two_gpt:
        service = service + w["two_gpt_extra_per_delegate"]
    return composite_rmi(w, path, w["delegate_standalone"] + service)


def composite_boot(w: CostWeights, path: PathModel, granules: int, two_gpt: bool = False) -> Weight:
    cmds = (
        composite_rmi(w, path, w[rmi_handler("REALM_CREATE")])
        + composite_rmi(w, path, w[rmi_handler("REC_CREATE")]) * path.vcpus
        + composite_rmi(w, path, w[rmi_handler("REALM_ACTIVATE")])
        + composite_rmi(w, path, w[rmi_handler("REC_ENTER")])
    )
    total = w["delegate_boot_path"] * granules + cmds + w["boot_base"]
    if two_gpt:
        total = total + w["two_gpt_boot_per_granule"] * granules + w["two_gpt_boot_constant"]
    return total


def predict(row: Measurement, w: CostWeights, path: PathModel = PathModel(),
            shadow_table_bytes: Optional[int] = None) -> Weight:
    """Closed-form cost of a reference scenario under ``w``."""
    two = row.backend == "two-gpt"
    if row.scenario == "smc_rt":
        return composite_smc_rt(w, path)
    if row.scenario == "rmi_rt":
        return composite_rmi(w, path, w[rmi_handler("NOP")])
    if row.scenario == "rmi_version":
        return composite_rmi(w, path, w[rmi_handler("VERSION")])
    if row.scenario == "rmi_delegate":
        return composite_delegate(w, path, tables=2 if two else 1, two_gpt=two)
    if row.scenario == "cvm_boot":
        return composite_boot(w, path, row.ram_size // GRANULE, two_gpt=two)
    if row.scenario == "shadow_gpt_create":
        if shadow_table_bytes is None:
            raise UnderdeterminedSystem("shadow prediction needs the template byte size")
        return w["gpt_copy_per_byte"] * shadow_table_bytes
    raise UnderdeterminedSystem(f"no composition for scenario {row.scenario!r}")


@dataclasses.dataclass(frozen=True)
class Calibration:
    weights: CostWeights
    residuals: Dict[Tuple[str, str, Optional[int]], Weight]
    clamped: Tuple[str, ...] = ()


def _residual(name: str, value: Weight) -> Weight:
    if value.instr < 0 or value.cycles < 0:
        raise NegativeWeight(f"solved {name} is negative: {value}; fixed sub-weights too large")
    return value


def _clamp(value: Fraction) -> Tuple[Fraction, bool]:
    return (Fraction(0), True) if value < 0 else (value, False)


def calibrate(
    measurements: Sequence[Measurement],
    fixed: Optional[Mapping[str, Weight]] = None,
    *,
    path: PathModel = PathModel(),
    shadow_table_bytes: Optional[int] = None,
) -> Calibration:
    """Solve primitive weights from measured scenario rows.

    ``fixed`` supplies the sub-weights listed in :data:`UNIDENTIFIED`
    (zero when omitted). ``gpt_build_per_table`` defaults to the measured
    template copy cost when a shadow row is present.
    """
    fixed = dict(fixed or {})
    for name in fixed:
        if name not in UNIDENTIFIED:
            raise UnderdeterminedSystem(f"{name} is solved, not fixed")

    def need(scenario, backend="single", ram=None):
        row = find_measurement(scenario, backend, ram, measurements)
        if row is None:
            raise UnderdeterminedSystem(f"missing measurement {scenario}/{backend}")
        return row.mean

    def boots(backend):
        rows = sorted((r for r in measurements if r.scenario == "cvm_boot" and r.backend == backend),
                      key=lambda r: r.ram_size)
        return rows

    single_boots = boots("single")
    if len(single_boots) < 2 or single_boots[0].ram_size == single_boots[-1].ram_size:
        raise UnderdeterminedSystem("need two single-GPT boot rows with distinct RAM sizes")

    smc, rmi, ver, dlg = need("smc_rt"), need("rmi_rt"), need("rmi_version"), need("rmi_delegate")
    shadow = find_measurement("shadow_gpt_create", "shadow", None, measurements)
    if "gpt_build_per_table" not in fixed:
        fixed["gpt_build_per_table"] = shadow.mean if shadow is not None else ZERO
    w = CostWeights({k: fixed.get(k, ZERO) for k in UNIDENTIFIED})

    nse = w["nse_lookup"] if path.nse_lookup_per_entry else ZERO
    flush = w["tlb_full_flush"] if path.flush_on_multiplex else ZERO
    solved: Dict[str, Weight] = {}
    solved["smc_rt"] = _residual("smc_rt", smc - nse)
    solved["rmi_rt"] = _residual("rmi_rt", rmi - smc - nse - (w["world_switch"] + flush) * 2)
    solved[rmi_handler("NOP")] = ZERO
    solved[rmi_handler("VERSION")] = _residual("VERSION handler", ver - rmi)
    solved["delegate_standalone"] = _residual(
        "delegate_standalone", dlg - rmi - smc - w["gpt_set_per_granule"] - w["tlb_full_flush"])
    w = w.with_weights(solved)

    dlg2 = find_measurement("rmi_delegate", "two-gpt", None, measurements)
    if dlg2 is not None:
        w = w.replace(two_gpt_extra_per_delegate=_residual(
            "two_gpt_extra_per_delegate", dlg2.mean - dlg - w["gpt_set_per_granule"]))

    lo, hi = single_boots[0], single_boots[-1]
    n_lo, n_hi = lo.ram_size // GRANULE, hi.ram_size // GRANULE
    per_granule = (hi.mean - lo.mean) / (n_hi - n_lo)
    w = w.replace(delegate_boot_path=_residual("delegate_boot_path", per_granule))
    without_base = composite_boot(w.replace(boot_base=ZERO), path, n_lo)
    w = w.replace(boot_base=_residual("boot_base", lo.mean - without_base))

    clamped: List[str] = []
    two_boots = boots("two-gpt")
    if two_boots:
        big = two_boots[-1]
        n_big = big.ram_size // GRANULE
        single_at_big = composite_boot(w, path, n_big)
        if len(two_boots) >= 2 and two_boots[0].ram_size != big.ram_size:
            small = two_boots[0]
            n_small = small.ram_size // GRANULE
            single_at_small = composite_boot(w, path, n_small)
            slope = ((big.mean - single_at_big) - (small.mean - single_at_small)) / (n_big - n_small)
        else:
            slope = ZERO
        comps = []
        for i, component in enumerate(("instr", "cycles")):
            s, was = _clamp(slope[i])
            if was:
                clamped.append(f"two_gpt_boot_per_granule.{component}")
            # Residual goes to the constant, fitted at the largest RAM point.
            c, was = _clamp((big.mean - single_at_big)[i] - s * n_big)
            if was:
                clamped.append(f"two_gpt_boot_constant.{component}")
            comps.append((s, c))
        w = w.replace(
            two_gpt_boot_per_granule=Weight(comps[0][0], comps[1][0]),
            two_gpt_boot_constant=Weight(comps[0][1], comps[1][1]),
        )

    if shadow is not None:
        if not shadow_table_bytes:
            raise UnderdeterminedSystem("shadow row given without template byte size")
        w = w.replace(gpt_copy_per_byte=shadow.mean / shadow_table_bytes)

    residuals = {}
    for row in measurements:
        try:
            residuals[row.key()] = predict(row, w, path, shadow_table_bytes) - row.mean
        except UnderdeterminedSystem:
            continue
    return Calibration(w, residuals, tuple(clamped))


# --------------------------------------------------------------------------
# Statistics


@dataclasses.dataclass(frozen=True)
class NoiseModel:
    """Seeded multiplicative jitter with a target absolute stdev."""

    seed: int
    stdev_instr: float
    stdev_cycles: float


@dataclasses.dataclass(frozen=True)
class StatSummary:
    mean_instr: float
    mean_cycles: float
    stdev_instr: float
    stdev_cycles: float
    count: int
    scale: int = 1

    @property
    def mean(self) -> Tuple[float, float]:
        return (self.mean_instr, self.mean_cycles)

    @property
    def stdev(self) -> Tuple[float, float]:
        return (self.stdev_instr, self.stdev_cycles)


def summarize(samples: Sequence[Tuple], noise: Optional[NoiseModel] = None, scale: int = 1) -> StatSummary:
    if len(samples) == 0:
        raise EmptySamples("cannot summarize zero samples")
    exact = [(Fraction(i), Fraction(c)) for i, c in samples]
    n = len(exact)
    if noise is None:
        mean_i = sum(s[0] for s in exact) / n
        mean_c = sum(s[1] for s in exact) / n
        sd_i = _exact_stdev([s[0] for s in exact], mean_i)
        sd_c = _exact_stdev([s[1] for s in exact], mean_c)
        return StatSummary(float(mean_i / scale), float(mean_c / scale), sd_i / scale, sd_c / scale, n, scale)

    arr = np.array([[float(i), float(c)] for i, c in exact])
    base = arr.mean(axis=0)
    rel = np.array([
        noise.stdev_instr / base[0] if base[0] else 0.0,
        noise.stdev_cycles / base[1] if base[1] else 0.0,
    ])
    rng = np.random.default_rng(noise.seed)
    jittered = arr * (1.0 + rng.standard_normal(arr.shape) * rel)
    mean = jittered.mean(axis=0)
    sd = jittered.std(axis=0, ddof=1) if n > 1 else np.zeros(2)
    return StatSummary(float(mean[0] / scale), float(mean[1] / scale),
                       float(sd[0] / scale), float(sd[1] / scale), n, scale)


def _exact_stdev(values: List[Fraction], mean: Fraction) -> float:
    if len(values) < 2:
        return 0.0
    var = sum((v - mean) ** 2 for v in values) / (len(values) - 1)
    return math.sqrt(var) if var else 0.0


def round_half_up(x: Fraction) -> int:
    return math.floor(Fraction(x) + Fraction(1, 2))
