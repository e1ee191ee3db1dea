"""Granule protection table engine."""

from ccasim.gpt.backend import (
    BackendKind,
    GptBackend,
    ShadowTemplate,
    SingleGpt,
    TwoGpt,
    backend_delegate,
    backend_undelegate,
    coupled_state,
    gpt_init,
)
from ccasim.gpt.gpi import Gpi, gpc_permits
from ccasim.gpt.layout import MemoryLayout, Region, RegionKind, make_layout, reference_layout, small_layout
from ccasim.gpt.oracle import GranuleOracle
from ccasim.gpt.table import (
    Block,
    GptTable,
    L1Table,
    TlbMaintenanceToken,
    build_table,
    create_shadow_gpt,
    dump_codes,
    gpt_set,
    gpt_walk,
    is_canonical,
    load_dump,
    range_is,
)

__all__ = [
    "BackendKind", "GptBackend", "ShadowTemplate", "SingleGpt", "TwoGpt",
    "backend_delegate", "backend_undelegate", "coupled_state", "gpt_init",
    "Gpi", "gpc_permits", "MemoryLayout", "Region", "RegionKind", "make_layout",
    "reference_layout", "small_layout", "GranuleOracle", "Block", "GptTable",
    "L1Table", "TlbMaintenanceToken", "build_table", "create_shadow_gpt",
    "dump_codes", "gpt_set", "gpt_walk", "is_canonical", "load_dump", "range_is",
]
