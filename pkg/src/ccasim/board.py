"""Board feature profiles and the per-core system-register file.

Boards without RME have no GPTBR_EL3/GPCCR_EL3. Those registers are emulated
through a dummy store backed by the implementation-defined AFSRx registers:
GPTBR_EL3 lives in the AFSR0_EL3 slot and GPCCR_EL3 in the AFSR1_EL3 slot.
"""

from __future__ import annotations

import dataclasses
import enum
import json
from importlib import resources
from pathlib import Path
from typing import Mapping, Union

from ccasim.errors import (
    IllegalRegisterValue,
    ProfileError,
    ReadOnlyOnProfile,
    UnknownRegister,
)

GRANULE_SIZE = 4096
GIB = 1 << 30

# GPCCR_EL3-style encoding: PPS=36 bit, IRGN/ORGN write-back, inner
# shareable, PGS=4 KB, GPC enabled, L0GPTSZ=1 GB.
DEFAULT_GPCCR = 0x1 | (0x1 << 8) | (0x1 << 10) | (0x3 << 12) | (0x0 << 14) | (1 << 16)

_U64_MAX = (1 << 64) - 1

BUILTIN_PROFILES = ("rk3588", "fvp-rme")


class Reg(enum.Enum):
    """Closed set of modeled system registers."""

    SCR_EL3_NS = "SCR_EL3.NS"
    GPTBR_EL3 = "GPTBR_EL3"
    GPCCR_EL3 = "GPCCR_EL3"
    AFSR0_EL3 = "AFSR0_EL3"
    AFSR1_EL3 = "AFSR1_EL3"
    CNTP_CTL_EL0 = "CNTP_CTL_EL0"
    CNTPOFF_EL2 = "CNTPOFF_EL2"


# RME register -> dummy slot standing in for it on boards without RME.
SHADOW_SLOT = {Reg.GPTBR_EL3: Reg.AFSR0_EL3, Reg.GPCCR_EL3: Reg.AFSR1_EL3}

CNTP_CTL_ENABLE = 1 << 0
CNTP_CTL_IMASK = 1 << 1


def _coerce_reg(reg: Union[Reg, str]) -> Reg:
    if isinstance(reg, Reg):
        return reg
    try:
        return Reg(reg)
    except ValueError:
        pass
    try:
        return Reg[str(reg)]
    except KeyError:
        raise UnknownRegister(f"unmodeled register {reg!r}") from None


@dataclasses.dataclass(frozen=True)
class BoardProfile:
    name: str
    has_rme: bool
    has_ttst: bool
    has_fwb: bool
    has_ecv: bool
    core_count: int = 4
    asid_partition_mode: bool = False
    gpccr_shadow: int = DEFAULT_GPCCR
    granule_size: int = GRANULE_SIZE

    def __post_init__(self):
        if self.granule_size != GRANULE_SIZE:
            raise ProfileError(f"granule size must be {GRANULE_SIZE}")
        if self.core_count < 1:
            raise ProfileError("profile needs at least one core")

    def with_asid_partition(self, enabled: bool = True) -> "BoardProfile":
        return dataclasses.replace(self, asid_partition_mode=enabled)

    @classmethod
    def from_dict(cls, data: Mapping) -> "BoardProfile":
        try:
            feats = data["features"]
            return cls(
                name=str(data["name"]),
                has_rme=bool(feats["rme"]),
                has_ttst=bool(feats["ttst"]),
                has_fwb=bool(feats["fwb"]),
                has_ecv=bool(feats["ecv"]),
                core_count=int(data.get("cores", 4)),
                asid_partition_mode=bool(data.get("asid_partition", False)),
                gpccr_shadow=int(data.get("gpccr_shadow", DEFAULT_GPCCR)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ProfileError(f"malformed profile: {exc}") from exc

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "features": {
                "rme": self.has_rme,
                "ttst": self.has_ttst,
                "fwb": self.has_fwb,
                "ecv": self.has_ecv,
            },
            "asid_partition": self.asid_partition_mode,
            "cores": self.core_count,
        }


def load_profile(name_or_path: Union[str, Path]) -> BoardProfile:
    """Load a built-in profile by name, or a profile JSON file by path."""
    name = str(name_or_path)
    if name in BUILTIN_PROFILES:
        text = resources.files("ccasim.data").joinpath(f"{name}.json").read_text()
    else:
        path = Path(name)
        if not path.is_file():
            raise ProfileError(f"unknown profile {name!r}")
        text = path.read_text()
    try:
        return BoardProfile.from_dict(json.loads(text))
    except json.JSONDecodeError as exc:
        raise ProfileError(f"profile {name!r} is not valid JSON: {exc}") from exc


@dataclasses.dataclass(frozen=True)
class TimerControl:
    enable: int = 0
    imask: int = 0

    @property
    def value(self) -> int:
        return (CNTP_CTL_ENABLE if self.enable else 0) | (CNTP_CTL_IMASK if self.imask else 0)

    @classmethod
    def from_value(cls, value: int) -> "TimerControl":
        return cls(enable=1 if value & CNTP_CTL_ENABLE else 0, imask=1 if value & CNTP_CTL_IMASK else 0)


@dataclasses.dataclass(frozen=True)
class RegisterFile:
    """System registers of one core.

    ``gptbr_el3_shadow``/``gpccr_el3_shadow`` are the AFSRx-backed dummy store;
    ``native`` holds architectural register state and is never touched by
    shadow accesses.
    """

    scr_el3_ns: int = 1
    gptbr_el3_shadow: int = 0
    gpccr_el3_shadow: int = DEFAULT_GPCCR
    native: tuple = ()
    cntp_ctl_el0: TimerControl = TimerControl()
    cntpoff: int = 0

    def native_value(self, reg: Reg) -> int:
        return dict(self.native).get(reg, 0)

    def _with_native(self, reg: Reg, value: int) -> "RegisterFile":
        items = dict(self.native)
        items[reg] = value
        ordered = tuple(sorted(items.items(), key=lambda kv: kv[0].value))
        return dataclasses.replace(self, native=ordered)


def initial_registers(profile: BoardProfile) -> RegisterFile:
    regs = RegisterFile(gpccr_el3_shadow=profile.gpccr_shadow)
    if profile.has_rme:
        regs = regs._with_native(Reg.GPCCR_EL3, profile.gpccr_shadow)
    return regs


def _shadowed(profile: BoardProfile, reg: Reg) -> bool:
    """True when ``reg`` is served by the dummy store on this profile."""
    if profile.has_rme:
        return False
    return reg in SHADOW_SLOT or reg in SHADOW_SLOT.values()


def _shadow_field(reg: Reg) -> str:
    if reg in (Reg.GPTBR_EL3, Reg.AFSR0_EL3):
        return "gptbr_el3_shadow"
    return "gpccr_el3_shadow"


def read_system_register(profile: BoardProfile, regs: RegisterFile, reg) -> int:
    reg = _coerce_reg(reg)
    if reg is Reg.SCR_EL3_NS:
        return regs.scr_el3_ns
    if reg is Reg.CNTP_CTL_EL0:
        return regs.cntp_ctl_el0.value
    if reg is Reg.CNTPOFF_EL2:
        return regs.cntpoff if profile.has_ecv else 0
    if _shadowed(profile, reg):
        return getattr(regs, _shadow_field(reg))
    return regs.native_value(reg)


def write_system_register(profile: BoardProfile, regs: RegisterFile, reg, value: int) -> RegisterFile:
    reg = _coerce_reg(reg)
    value = int(value)
    if reg is Reg.SCR_EL3_NS:
        if value not in (0, 1):
            raise IllegalRegisterValue("SCR_EL3.NS is a single bit")
        return dataclasses.replace(regs, scr_el3_ns=value)
    if reg is Reg.CNTP_CTL_EL0:
        if not 0 <= value <= (CNTP_CTL_ENABLE | CNTP_CTL_IMASK):
            raise IllegalRegisterValue("CNTP_CTL_EL0 only models ENABLE and IMASK")
        return dataclasses.replace(regs, cntp_ctl_el0=TimerControl.from_value(value))
    if not 0 <= value <= _U64_MAX:
        raise IllegalRegisterValue(f"{reg.value} is a 64-bit register")
    if reg is Reg.CNTPOFF_EL2:
        if not profile.has_ecv:
            raise ReadOnlyOnProfile(f"CNTPOFF_EL2 requires ECV, absent on {profile.name}")
        return dataclasses.replace(regs, cntpoff=value)
    if _shadowed(profile, reg):
        return dataclasses.replace(regs, **{_shadow_field(reg): value})
    return regs._with_native(reg, value)


def set_timer_imask(profile: BoardProfile, regs: RegisterFile, masked: bool) -> RegisterFile:
    """Mask or unmask the EL1 physical timer through CNTP_CTL_EL0.IMASK."""
    ctl = regs.cntp_ctl_el0
    value = dataclasses.replace(ctl, imask=1 if masked else 0).value
    return write_system_register(profile, regs, Reg.CNTP_CTL_EL0, value)
