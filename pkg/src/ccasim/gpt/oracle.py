"""Flat one-entry-per-granule reference model of a GPT.

Deliberately shares nothing with the two-level table code: it is built from
the layout with plain ``bytearray`` slices so it can serve as a differential
oracle.
"""

from __future__ import annotations

from ccasim.errors import OutOfRange
from ccasim.gpt.gpi import Gpi
from ccasim.gpt.layout import GRANULE, MemoryLayout


class GranuleOracle:
    def __init__(self, granules: int, fill: Gpi = Gpi.NO_ACCESS):
        self.codes = bytearray([int(fill)]) * granules

    @classmethod
    def from_layout(cls, layout: MemoryLayout, remap=None) -> "GranuleOracle":
        remap = remap or {}
        oracle = cls(layout.pas_size // GRANULE)
        for r in layout.regions:
            oracle.set(r.base, r.size, remap.get(r.kind, r.initial_gpi))
        return oracle

    def __len__(self):
        return len(self.codes)

    def set(self, base: int, size: int, gpi: Gpi) -> None:
        a, b = base // GRANULE, (base + size) // GRANULE
        if a < 0 or b > len(self.codes):
            raise OutOfRange(f"[{base:#x}, {base + size:#x}) outside oracle")
        self.codes[a:b] = bytes([int(gpi)]) * (b - a)

    def lookup(self, pa: int) -> Gpi:
        idx = pa // GRANULE
        if not 0 <= idx < len(self.codes):
            raise OutOfRange(f"pa {pa:#x} outside oracle")
        return Gpi(self.codes[idx])

    def dump(self) -> bytes:
        """Same wire format as a table dump, produced by plain Python loops."""
        n = len(self.codes)
        out = bytearray(n.to_bytes(8, "little"))
        for i in range(0, n, 2):
            lo = self.codes[i]
            hi = self.codes[i + 1] if i + 1 < n else 0
            out.append(lo | (hi << 4))
        return bytes(out)
