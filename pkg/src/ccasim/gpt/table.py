"""Two-level granule protection tables.

Level 0 has one descriptor per 1 GB of physical address space: either a
Block carrying one GPI for the whole region, or a reference to a level-1
array holding one GPI per 4 KB granule. Tables are immutable snapshots;
:func:`gpt_set` returns a new table and only copies the level-1 arrays it
touches. After every mutation a uniform level-1 array is fused back into a
Block, so the representation is canonical.
"""

from __future__ import annotations

import dataclasses
import functools
import struct
from typing import Iterator, Optional, Tuple, Union

import numpy as np

from ccasim.costs import CostDelta
from ccasim.errors import OutOfRange, Unaligned
from ccasim.gpt.gpi import Gpi
from ccasim.gpt.layout import GRANULE, MemoryLayout
from ccasim.world import World

L0_SHIFT = 30
L0_SPAN = 1 << L0_SHIFT
GRANULE_SHIFT = 12
GRANULES_PER_L0 = L0_SPAN // GRANULE
L0_DESC_BYTES = 8


@dataclasses.dataclass(frozen=True)
class Block:
    gpi: Gpi


class L1Table:
    """Per-granule GPI codes for one L0 region, plus a histogram of codes."""

    __slots__ = ("codes", "counts")

    def __init__(self, codes: np.ndarray, counts: Optional[np.ndarray] = None):
        if counts is None:
            counts = np.bincount(codes, minlength=16).astype(np.int64)
        codes.flags.writeable = False
        counts.flags.writeable = False
        self.codes = codes
        self.counts = counts

    def __len__(self):
        return len(self.codes)

    def uniform_gpi(self) -> Optional[Gpi]:
        n = len(self.codes)
        hit = np.flatnonzero(self.counts == n)
        return Gpi(int(hit[0])) if len(hit) else None

    def copy(self) -> "L1Table":
        return L1Table(self.codes.copy(), self.counts.copy())


Descriptor = Union[Block, L1Table]


@dataclasses.dataclass(frozen=True)
class TlbMaintenanceToken:
    """Proof obligation: a GPT change is visible only after a TLB flush."""

    base: int
    size: int
    state: list = dataclasses.field(default_factory=lambda: [False], compare=False)

    @property
    def satisfied(self) -> bool:
        return self.state[0]

    def satisfy(self) -> None:
        self.state[0] = True


@dataclasses.dataclass(frozen=True, eq=False)
class GptTable:
    l0: Tuple[Descriptor, ...]
    pas_size: int

    @property
    def granule_count(self) -> int:
        return self.pas_size // GRANULE

    def region_granules(self, index: int) -> int:
        start = index * GRANULES_PER_L0
        return min(GRANULES_PER_L0, self.granule_count - start)

    @property
    def l1_tables(self) -> Tuple[L1Table, ...]:
        return tuple(d for d in self.l0 if isinstance(d, L1Table))

    @property
    def byte_size(self) -> int:
        """Table memory footprint: 8-byte L0 descriptors, 4-bit L1 entries."""
        return L0_DESC_BYTES * len(self.l0) + sum((len(t) + 1) // 2 for t in self.l1_tables)

    def flat_codes(self) -> np.ndarray:
        parts = []
        for i, desc in enumerate(self.l0):
            if isinstance(desc, Block):
                parts.append(np.full(self.region_granules(i), int(desc.gpi), dtype=np.uint8))
            else:
                parts.append(desc.codes)
        return np.concatenate(parts)

    def dump(self) -> bytes:
        return dump_codes(self.flat_codes())

    def __eq__(self, other):
        if not isinstance(other, GptTable):
            return NotImplemented
        return self.pas_size == other.pas_size and self.dump() == other.dump()

    __hash__ = None  # type: ignore[assignment]


def dump_codes(codes: np.ndarray) -> bytes:
    """8-byte little-endian granule count, then two 4-bit codes per byte,
    even granule in the low nibble."""
    n = len(codes)
    padded = codes if n % 2 == 0 else np.concatenate([codes, np.zeros(1, dtype=np.uint8)])
    packed = (padded[0::2] & 0xF) | ((padded[1::2] & 0xF) << 4)
    return struct.pack("<Q", n) + packed.astype(np.uint8).tobytes()


def load_dump(data: bytes) -> np.ndarray:
    (n,) = struct.unpack_from("<Q", data)
    packed = np.frombuffer(data, dtype=np.uint8, offset=8)
    codes = np.empty(len(packed) * 2, dtype=np.uint8)
    codes[0::2] = packed & 0xF
    codes[1::2] = packed >> 4
    return codes[:n]


def _canonical(codes: np.ndarray) -> Descriptor:
    table = L1Table(codes)
    gpi = table.uniform_gpi()
    return Block(gpi) if gpi is not None else table


def build_table(layout: MemoryLayout, remap: Optional[dict] = None, cached: bool = True) -> GptTable:
    """Table matching ``layout``; ``remap`` maps RegionKind -> Gpi overrides.

    Tables are immutable, so identical requests share one instance unless
    ``cached`` is off.
    """
    items = tuple(sorted((remap or {}).items(), key=lambda kv: kv[0].value))
    return _build_table(layout, items) if cached else _build_table.__wrapped__(layout, items)


@functools.lru_cache(maxsize=64)
def _build_table(layout: MemoryLayout, remap_items: tuple) -> GptTable:
    remap = dict(remap_items)
    n_regions = -(-layout.pas_size // L0_SPAN)
    l0 = []
    for i in range(n_regions):
        lo = i * L0_SPAN
        hi = min(lo + L0_SPAN, layout.pas_size)
        hits = [r for r in layout.regions if r.base < hi and r.end > lo]
        gpi_of = [remap.get(r.kind, r.initial_gpi) for r in hits]
        if len(hits) == 1 and hits[0].base <= lo and hits[0].end >= hi:
            l0.append(Block(gpi_of[0]))
            continue
        codes = np.full((hi - lo) // GRANULE, int(Gpi.NO_ACCESS), dtype=np.uint8)
        for r, gpi in zip(hits, gpi_of):
            a = (max(r.base, lo) - lo) // GRANULE
            b = (min(r.end, hi) - lo) // GRANULE
            codes[a:b] = int(gpi)
        l0.append(_canonical(codes))
    return GptTable(tuple(l0), layout.pas_size)


def check_range(gpt: GptTable, base: int, size: int) -> None:
    if base % GRANULE or size % GRANULE or size <= 0:
        raise Unaligned(f"range [{base:#x}, +{size:#x}) is not granule aligned")
    if base < 0 or base + size > gpt.pas_size:
        raise OutOfRange(f"range [{base:#x}, {base + size:#x}) outside PAS of {gpt.pas_size:#x}")


def _spans(gpt: GptTable, base: int, size: int) -> Iterator[Tuple[int, int, int]]:
    """(l0 index, first granule, end granule) per L0 region touched."""
    first = base >> GRANULE_SHIFT
    last = (base + size) >> GRANULE_SHIFT
    idx = first // GRANULES_PER_L0
    while first < last:
        region_start = idx * GRANULES_PER_L0
        stop = min(last, region_start + gpt.region_granules(idx))
        yield idx, first - region_start, stop - region_start
        first = stop
        idx += 1


def gpt_walk(gpt: GptTable, pa: int) -> Gpi:
    if not 0 <= pa < gpt.pas_size:
        raise OutOfRange(f"pa {pa:#x} outside PAS")
    desc = gpt.l0[pa >> L0_SHIFT]
    if isinstance(desc, Block):
        return desc.gpi
    return Gpi(int(desc.codes[(pa >> GRANULE_SHIFT) & (GRANULES_PER_L0 - 1)]))


def range_is(gpt: GptTable, base: int, size: int, gpi: Gpi) -> bool:
    """True when every granule in the range currently maps to ``gpi``."""
    check_range(gpt, base, size)
    for idx, a, b in _spans(gpt, base, size):
        desc = gpt.l0[idx]
        if isinstance(desc, Block):
            if desc.gpi is not gpi:
                return False
        elif not np.all(desc.codes[a:b] == int(gpi)):
            return False
    return True


def gpt_set(gpt: GptTable, base: int, size: int, gpi: Gpi) -> Tuple[GptTable, TlbMaintenanceToken, CostDelta]:
    check_range(gpt, base, size)
    gpi = Gpi(gpi)
    code = int(gpi)
    l0 = list(gpt.l0)
    for idx, a, b in _spans(gpt, base, size):
        desc = l0[idx]
        n = gpt.region_granules(idx)
        if a == 0 and b == n:
            l0[idx] = Block(gpi)
            continue
        if isinstance(desc, Block):
            if desc.gpi is gpi:
                continue
            codes = np.full(n, int(desc.gpi), dtype=np.uint8)
            counts = np.zeros(16, dtype=np.int64)
            counts[int(desc.gpi)] = n - (b - a)
        else:
            codes = desc.codes.copy()
            counts = desc.counts - np.bincount(codes[a:b], minlength=16)
        codes[a:b] = code
        counts[code] += b - a
        l0[idx] = Block(gpi) if counts[code] == n else L1Table(codes, counts)
    cost = CostDelta().add(World.ROOT, "gpt_set_per_granule", size // GRANULE)
    return GptTable(tuple(l0), gpt.pas_size), TlbMaintenanceToken(base, size), cost


def create_shadow_gpt(template: GptTable) -> Tuple[GptTable, CostDelta]:
    """Copy a pre-built template instead of building a table from scratch."""
    l0 = tuple(d.copy() if isinstance(d, L1Table) else d for d in template.l0)
    cost = CostDelta().add(World.ROOT, "gpt_copy_per_byte", template.byte_size)
    return GptTable(l0, template.pas_size), cost


def is_canonical(gpt: GptTable) -> bool:
    return all(t.uniform_gpi() is None for t in gpt.l1_tables)
