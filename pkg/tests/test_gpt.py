import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ccasim.errors import IllegalGranuleTransition, OutOfRange, OverlappingRegions, Unaligned, UnalignedRegion
from ccasim.gpt import (
    BackendKind,
    Block,
    Gpi,
    GranuleOracle,
    L1Table,
    MemoryLayout,
    Region,
    RegionKind,
    ShadowTemplate,
    TwoGpt,
    backend_delegate,
    backend_undelegate,
    build_table,
    coupled_state,
    create_shadow_gpt,
    gpc_permits,
    gpt_init,
    gpt_set,
    gpt_walk,
    is_canonical,
    load_dump,
    make_layout,
    small_layout,
)
from ccasim.gpt.layout import GRANULE
from ccasim.world import World

MIB = 1 << 20
GIB = 1 << 30
SMALL = small_layout()
# Crosses an L0 boundary so that sets span two first-level entries.
WIDE = make_layout(GIB + 8 * MIB, device=(512 * MIB, 4 * MIB))
GPIS = list(Gpi)


def test_initial_table_matches_layout():
    gpt = build_table(SMALL)
    assert gpt_walk(gpt, 0) is Gpi.ROOT
    assert gpt_walk(gpt, 1 * MIB) is Gpi.NON_SECURE
    assert gpt_walk(gpt, SMALL.pas_size - GRANULE) is Gpi.NON_SECURE
    assert is_canonical(gpt)


def test_uncovered_addresses_are_no_access():
    layout = MemoryLayout.build([Region("ram", 4 * MIB, 4 * MIB, RegionKind.RAM)], pas_size=16 * MIB)
    gpt = build_table(layout)
    assert gpt_walk(gpt, 0) is Gpi.NO_ACCESS
    assert gpt_walk(gpt, 4 * MIB) is Gpi.NON_SECURE
    assert gpt_walk(gpt, 12 * MIB) is Gpi.NO_ACCESS


def test_layout_validation():
    with pytest.raises(OverlappingRegions):
        MemoryLayout.build([Region("a", 0, 2 * MIB, RegionKind.RAM), Region("b", MIB, MIB, RegionKind.RAM)])
    with pytest.raises(UnalignedRegion):
        MemoryLayout.build([Region("a", 100, GRANULE, RegionKind.RAM)])


def test_walk_outside_pas():
    with pytest.raises(OutOfRange):
        gpt_walk(build_table(SMALL), SMALL.pas_size)


def test_set_rejects_bad_ranges_and_leaves_table():
    gpt = build_table(SMALL)
    before = gpt.dump()
    with pytest.raises(OutOfRange):
        gpt_set(gpt, SMALL.pas_size - GRANULE, 2 * GRANULE, Gpi.REALM)
    with pytest.raises(Unaligned):
        gpt_set(gpt, 100, GRANULE, Gpi.REALM)
    with pytest.raises(Unaligned):
        gpt_set(gpt, 0, 0, Gpi.REALM)
    assert gpt.dump() == before


def test_split_and_fuse():
    layout = make_layout(GIB, firmware_bytes=0, gpt_bytes=0, rmm_bytes=0)
    gpt = build_table(layout)
    assert isinstance(gpt.l0[0], Block)
    split, token, cost = gpt_set(gpt, 4 * MIB, GRANULE, Gpi.REALM)
    assert isinstance(split.l0[0], L1Table)
    assert not token.satisfied
    assert cost.count("gpt_set_per_granule") == 1
    fused, _, _ = gpt_set(split, 4 * MIB, GRANULE, Gpi.NON_SECURE)
    assert isinstance(fused.l0[0], Block)
    assert fused == gpt
    # Original is immutable.
    assert isinstance(gpt.l0[0], Block)


def test_dump_format():
    gpt = build_table(SMALL)
    data = gpt.dump()
    n = SMALL.granule_count
    assert int.from_bytes(data[:8], "little") == n
    assert len(data) == 8 + (n + 1) // 2
    # Granule 0 (firmware, Root) in the low nibble of the first byte.
    assert data[8] == Gpi.ROOT | (Gpi.ROOT << 4)
    assert np.array_equal(load_dump(data), gpt.flat_codes())
    assert data == GranuleOracle.from_layout(SMALL).dump()


ops = st.lists(
    st.tuples(st.integers(0, SMALL.granule_count - 1), st.integers(1, 1024), st.sampled_from(GPIS)),
    max_size=40)


@settings(max_examples=60, deadline=None)
@given(ops=ops)
def test_table_matches_flat_oracle(ops):
    gpt = build_table(SMALL)
    oracle = GranuleOracle.from_layout(SMALL)
    for start, count, gpi in ops:
        count = min(count, SMALL.granule_count - start)
        gpt, _, _ = gpt_set(gpt, start * GRANULE, count * GRANULE, gpi)
        oracle.set(start * GRANULE, count * GRANULE, gpi)
        assert is_canonical(gpt)
    assert gpt.flat_codes().tobytes() == bytes(oracle.codes)
    assert gpt.dump() == oracle.dump()


@settings(max_examples=25, deadline=None)
@given(data=st.data())
def test_oracle_across_l0_boundary(data):
    gpt = build_table(WIDE)
    oracle = GranuleOracle.from_layout(WIDE)
    boundary = GIB // GRANULE
    for _ in range(data.draw(st.integers(1, 12))):
        start = data.draw(st.integers(boundary - 4096, boundary + 1024))
        count = data.draw(st.integers(1, min(8192, WIDE.granule_count - start)))
        gpi = data.draw(st.sampled_from(GPIS))
        gpt, _, _ = gpt_set(gpt, start * GRANULE, count * GRANULE, gpi)
        oracle.set(start * GRANULE, count * GRANULE, gpi)
        assert is_canonical(gpt)
        probe = data.draw(st.integers(0, WIDE.granule_count - 1))
        assert gpt_walk(gpt, probe * GRANULE) is oracle.lookup(probe * GRANULE)
    assert gpt.flat_codes().tobytes() == bytes(oracle.codes)


def test_gpc_permits():
    assert gpc_permits(Gpi.NON_SECURE, World.NORMAL)
    assert not gpc_permits(Gpi.REALM, World.NORMAL)
    assert gpc_permits(Gpi.REALM, World.REALM)
    assert gpc_permits(Gpi.ANY, World.SECURE)
    assert gpc_permits(Gpi.REALM, World.ROOT)
    assert not gpc_permits(Gpi.NO_ACCESS, World.ROOT)


def test_shadow_copy_is_identical_and_independent():
    template = build_table(SMALL)
    live, cost = create_shadow_gpt(template)
    assert live.dump() == template.dump()
    assert cost.count("gpt_copy_per_byte") == template.byte_size
    changed, _, _ = gpt_set(live, 2 * MIB, 3 * GRANULE, Gpi.REALM)
    assert template.dump() == build_table(SMALL, cached=False).dump()
    assert changed.dump() != template.dump()


def test_backend_init_costs():
    _, single = gpt_init(SMALL, "single")
    _, two = gpt_init(SMALL, "two-gpt")
    backend, shadow = gpt_init(SMALL, BackendKind.SHADOW)
    assert single.count("gpt_build_per_table") == 1
    assert two.count("gpt_build_per_table") == 2
    assert isinstance(backend, ShadowTemplate)
    assert shadow.count("gpt_copy_per_byte") == backend.template.byte_size


@pytest.mark.parametrize("kind", list(BackendKind))
def test_delegate_undelegate_identity(kind):
    backend, _ = gpt_init(SMALL, kind)
    init = [t.dump() for t in backend.tables()]
    after, tokens, _ = backend_delegate(backend, 2 * MIB, 16)
    assert gpt_walk(after.primary, 2 * MIB) is Gpi.REALM
    assert tokens and not any(t.satisfied for t in tokens)
    back, _, _ = backend_undelegate(after, 2 * MIB, 16)
    assert [t.dump() for t in back.tables()] == init


@pytest.mark.parametrize("kind", list(BackendKind))
def test_illegal_transitions(kind):
    backend, _ = gpt_init(SMALL, kind)
    with pytest.raises(IllegalGranuleTransition):
        backend_undelegate(backend, 2 * MIB)
    with pytest.raises(IllegalGranuleTransition):
        backend_delegate(backend, 0)  # firmware is not delegable
    once, _, _ = backend_delegate(backend, 2 * MIB)
    with pytest.raises(IllegalGranuleTransition):
        backend_delegate(once, 2 * MIB)


def test_two_gpt_initial_pairs():
    backend, _ = gpt_init(SMALL, "two-gpt")
    assert isinstance(backend, TwoGpt)
    assert coupled_state(backend, 2 * MIB) == (Gpi.NON_SECURE, Gpi.ROOT)
    after, tokens, cost = backend_delegate(backend, 2 * MIB)
    assert coupled_state(after, 2 * MIB) == (Gpi.REALM, Gpi.NON_SECURE)
    assert len(tokens) == 2
    assert cost.count("two_gpt_extra_per_delegate") == 1


VALID = {(Gpi.NON_SECURE, Gpi.ROOT), (Gpi.REALM, Gpi.NON_SECURE)}


@settings(max_examples=40, deadline=None)
@given(ops=st.lists(st.tuples(st.booleans(), st.integers(256, 4095), st.integers(1, 64)), max_size=30))
def test_two_gpt_coupling_property(ops):
    backend, _ = gpt_init(SMALL, "two-gpt")
    init = (backend.gpt1.dump(), backend.gpt2.dump())
    delegated = np.zeros(SMALL.granule_count, dtype=bool)
    for delegate, start, count in ops:
        count = min(count, SMALL.granule_count - start)
        op = backend_delegate if delegate else backend_undelegate
        try:
            backend, _, _ = op(backend, start * GRANULE, count)
            delegated[start:start + count] = delegate
        except IllegalGranuleTransition:
            pass
        pairs = set(zip(backend.gpt1.flat_codes()[256:].tolist(), backend.gpt2.flat_codes()[256:].tolist()))
        assert pairs <= {(int(a), int(b)) for a, b in VALID}
    for g in np.flatnonzero(delegated):
        backend, _, _ = backend_undelegate(backend, int(g) * GRANULE)
    assert (backend.gpt1.dump(), backend.gpt2.dump()) == init
