"""GPT backends: one table, a coupled pair, or a template plus a live copy.

The Two-GPT backend keeps every delegable RAM granule in one of two coupled
states, ``(NonSecure, Root)`` when owned by the normal world and
``(Realm, NonSecure)`` once delegated. Both tables change together or not at
all.
"""

from __future__ import annotations

import dataclasses
import enum
from typing import List, Tuple, Union

from ccasim.costs import CostDelta
from ccasim.errors import IllegalGranuleTransition
from ccasim.gpt.gpi import Gpi
from ccasim.gpt.layout import GRANULE, MemoryLayout, RegionKind
from ccasim.gpt.table import (
    GptTable,
    TlbMaintenanceToken,
    build_table,
    check_range,
    create_shadow_gpt,
    gpt_set,
    gpt_walk,
    range_is,
)
from ccasim.world import World


class BackendKind(enum.Enum):
    SINGLE = "single"
    TWO_GPT = "two-gpt"
    SHADOW = "shadow"


@dataclasses.dataclass(frozen=True, eq=False)
class SingleGpt:
    gpt: GptTable
    layout: MemoryLayout
    kind = BackendKind.SINGLE

    @property
    def primary(self) -> GptTable:
        return self.gpt

    def tables(self) -> Tuple[GptTable, ...]:
        return (self.gpt,)


@dataclasses.dataclass(frozen=True, eq=False)
class TwoGpt:
    gpt1: GptTable
    gpt2: GptTable
    layout: MemoryLayout
    kind = BackendKind.TWO_GPT

    @property
    def primary(self) -> GptTable:
        return self.gpt1

    def tables(self) -> Tuple[GptTable, ...]:
        return (self.gpt1, self.gpt2)


@dataclasses.dataclass(frozen=True, eq=False)
class ShadowTemplate:
    template: GptTable
    live: GptTable
    layout: MemoryLayout
    kind = BackendKind.SHADOW

    @property
    def primary(self) -> GptTable:
        return self.live

    def tables(self) -> Tuple[GptTable, ...]:
        return (self.live,)


GptBackend = Union[SingleGpt, TwoGpt, ShadowTemplate]

OWNED = (Gpi.NON_SECURE, Gpi.ROOT)
DELEGATED = (Gpi.REALM, Gpi.NON_SECURE)


def gpt_init(layout: MemoryLayout, kind: Union[BackendKind, str] = BackendKind.SINGLE) -> Tuple[GptBackend, CostDelta]:
    kind = BackendKind(kind)
    cost = CostDelta()
    gpt = build_table(layout)
    cost.add(World.ROOT, "gpt_build_per_table")
    if kind is BackendKind.SINGLE:
        return SingleGpt(gpt, layout), cost
    if kind is BackendKind.TWO_GPT:
        gpt2 = build_table(layout, remap={RegionKind.RAM: Gpi.ROOT})
        cost.add(World.ROOT, "gpt_build_per_table")
        return TwoGpt(gpt, gpt2, layout), cost
    live, copy_cost = create_shadow_gpt(gpt)
    return ShadowTemplate(gpt, live, layout), cost.extend(copy_cost)


def _check_delegable(backend: GptBackend, base: int, size: int) -> None:
    check_range(backend.primary, base, size)
    if not backend.layout.is_delegable(base, size):
        raise IllegalGranuleTransition(f"[{base:#x}, +{size:#x}) is not delegable RAM")


def _transition(backend: GptBackend, base: int, count: int, src: Tuple[Gpi, Gpi], dst: Tuple[Gpi, Gpi]):
    size = count * GRANULE
    _check_delegable(backend, base, size)
    tokens: List[TlbMaintenanceToken] = []
    cost = CostDelta()
    if isinstance(backend, TwoGpt):
        if not (range_is(backend.gpt1, base, size, src[0]) and range_is(backend.gpt2, base, size, src[1])):
            raise IllegalGranuleTransition(f"{base:#x}: coupled state is not {src[0].name}/{src[1].name}")
        gpt1, tok1, c1 = gpt_set(backend.gpt1, base, size, dst[0])
        gpt2, tok2, c2 = gpt_set(backend.gpt2, base, size, dst[1])
        tokens += [tok1, tok2]
        cost.extend(c1).extend(c2).add(World.ROOT, "two_gpt_extra_per_delegate", count)
        return TwoGpt(gpt1, gpt2, backend.layout), tokens, cost
    table = backend.primary
    if not range_is(table, base, size, src[0]):
        raise IllegalGranuleTransition(f"{base:#x}: granule is not {src[0].name}")
    new, tok, c = gpt_set(table, base, size, dst[0])
    tokens.append(tok)
    cost.extend(c)
    if isinstance(backend, SingleGpt):
        return SingleGpt(new, backend.layout), tokens, cost
    return ShadowTemplate(backend.template, new, backend.layout), tokens, cost


def backend_delegate(backend: GptBackend, pa: int, count: int = 1):
    """Move ``count`` granules from ``pa`` into the realm PAS.

    Returns ``(backend', tokens, cost)``.
    """
    return _transition(backend, pa, count, OWNED, DELEGATED)


def backend_undelegate(backend: GptBackend, pa: int, count: int = 1):
    return _transition(backend, pa, count, DELEGATED, OWNED)


def coupled_state(backend: TwoGpt, pa: int) -> Tuple[Gpi, Gpi]:
    return gpt_walk(backend.gpt1, pa), gpt_walk(backend.gpt2, pa)
