"""Physical memory layouts: named regions with their initial protection."""

from __future__ import annotations

import dataclasses
import enum
from typing import Optional, Sequence, Tuple

from ccasim.errors import OverlappingRegions, UnalignedRegion
from ccasim.gpt.gpi import Gpi

GRANULE = 4096
MIB = 1 << 20
GIB = 1 << 30


class RegionKind(enum.Enum):
    FIRMWARE = "firmware"
    RMM = "rmm"
    RAM = "ram"
    DEVICE = "device"


_DEFAULT_GPI = {
    RegionKind.FIRMWARE: Gpi.ROOT,
    RegionKind.RMM: Gpi.REALM,
    RegionKind.RAM: Gpi.NON_SECURE,
    RegionKind.DEVICE: Gpi.NON_SECURE,
}


@dataclasses.dataclass(frozen=True)
class Region:
    name: str
    base: int
    size: int
    kind: RegionKind
    gpi: Optional[Gpi] = None

    @property
    def end(self) -> int:
        return self.base + self.size

    @property
    def initial_gpi(self) -> Gpi:
        return self.gpi if self.gpi is not None else _DEFAULT_GPI[self.kind]

    @property
    def delegable(self) -> bool:
        return self.kind is RegionKind.RAM


@dataclasses.dataclass(frozen=True)
class MemoryLayout:
    """Granule-aligned, non-overlapping regions inside ``[0, pas_size)``.

    Addresses not covered by any region read as NoAccess.
    """

    regions: Tuple[Region, ...]
    pas_size: int

    def __post_init__(self):
        if self.pas_size <= 0 or self.pas_size % GRANULE:
            raise UnalignedRegion(f"PAS size {self.pas_size:#x} is not granule aligned")
        ordered = sorted(self.regions, key=lambda r: r.base)
        for r in ordered:
            if r.size <= 0 or r.base % GRANULE or r.size % GRANULE:
                raise UnalignedRegion(f"region {r.name} [{r.base:#x}, {r.end:#x}) is not granule aligned")
            if r.end > self.pas_size:
                raise UnalignedRegion(f"region {r.name} extends past the PAS")
        for a, b in zip(ordered, ordered[1:]):
            if b.base < a.end:
                raise OverlappingRegions(f"{a.name} and {b.name} overlap")
        object.__setattr__(self, "regions", tuple(ordered))

    @classmethod
    def build(cls, regions: Sequence[Region], pas_size: Optional[int] = None) -> "MemoryLayout":
        if not regions:
            raise ValueError("layout needs at least one region")
        if pas_size is None:
            pas_size = max(r.end for r in regions)
        return cls(tuple(regions), pas_size)

    @property
    def granule_count(self) -> int:
        return self.pas_size // GRANULE

    def ram_regions(self) -> Tuple[Region, ...]:
        return tuple(r for r in self.regions if r.delegable)

    def region_at(self, pa: int) -> Optional[Region]:
        for r in self.regions:
            if r.base <= pa < r.end:
                return r
        return None

    def is_delegable(self, pa: int, size: int) -> bool:
        """True when ``[pa, pa + size)`` lies inside one RAM region."""
        r = self.region_at(pa)
        return r is not None and r.delegable and pa + size <= r.end


def make_layout(dram_bytes: int, *, device: Optional[Tuple[int, int]] = None,
                firmware_bytes: int = 2 * MIB, gpt_bytes: int = 4 * MIB,
                rmm_bytes: int = 16 * MIB) -> MemoryLayout:
    """DRAM from PA 0 with the monitor, GPT and RMM carve-outs at the bottom.

    ``device`` is an optional ``(base, size)`` MMIO window punched out of
    DRAM.
    """
    regions = []
    cursor = 0
    for name, size, kind in (("tf-a", firmware_bytes, RegionKind.FIRMWARE),
                             ("gpt-tables", gpt_bytes, RegionKind.FIRMWARE),
                             ("rmm", rmm_bytes, RegionKind.RMM)):
        if size:
            regions.append(Region(name, cursor, size, kind))
            cursor += size
    if device is None:
        regions.append(Region("dram", cursor, dram_bytes - cursor, RegionKind.RAM))
    else:
        dev_base, dev_size = device
        regions.append(Region("dram-lo", cursor, dev_base - cursor, RegionKind.RAM))
        regions.append(Region("mmio", dev_base, dev_size, RegionKind.DEVICE))
        if dram_bytes > dev_base + dev_size:
            regions.append(Region("dram-hi", dev_base + dev_size, dram_bytes - dev_base - dev_size,
                                  RegionKind.RAM))
    return MemoryLayout.build(regions, dram_bytes)


def reference_layout(dram_bytes: int = 16 * GIB) -> MemoryLayout:
    """Board-scale layout: 16 GB DRAM with an MMIO window below 4 GB."""
    return make_layout(dram_bytes, device=(0xF000_0000, 0x1000_0000))


def small_layout(dram_bytes: int = 16 * MIB) -> MemoryLayout:
    """Tiny layout for exhaustive checks: one 1 MB firmware carve-out."""
    return make_layout(dram_bytes, firmware_bytes=1 * MIB, gpt_bytes=0, rmm_bytes=0)
