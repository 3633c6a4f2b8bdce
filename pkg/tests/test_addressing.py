import ipaddress
import random

import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.stateful import RuleBasedStateMachine, invariant, precondition, rule

from tcsap.addressing import (
    HOST_SPACE,
    AddressError,
    AddressSpaceExhausted,
    AllocationState,
    BlockLayout,
    DuplicateRegistration,
    RegisteredEntry,
    SiteLocalAddress,
    UnknownPending,
    allocate_lowest_free,
    compose_address,
    decompose_address,
    expire_certificates,
    link_local_from,
    register_address,
)

from conftest import FixedChoice


def bits_oracle(subprefix, subnet, host_id):
    s = "1111111011" + format(subprefix, "038b") + format(subnet, "016b") + format(host_id, "064b")
    assert len(s) == 128
    return ipaddress.IPv6Address(int(s, 2))


# -- composition ---------------------------------------------------------------


def test_compose_all_zero_is_fec0_1():
    assert str(compose_address(0, 0, 1)) == "fec0::1"


def test_compose_all_ones_matches_bit_string():
    a = compose_address(2**38 - 1, 0xFFFF, 2**64 - 1)
    assert ipaddress.IPv6Address(a.value) == bits_oracle(2**38 - 1, 0xFFFF, 2**64 - 1)
    assert str(a) == "feff:ffff:ffff:ffff:ffff:ffff:ffff:ffff"


def test_decompose_fec0_1():
    assert decompose_address("FEC0::1") == SiteLocalAddress(0, 0, 1)


@pytest.mark.parametrize("bad", [(2**38, 0, 0), (0, 2**16, 0), (0, 0, 2**64), (-1, 0, 0)])
def test_compose_rejects_out_of_range(bad):
    with pytest.raises(AddressError):
        compose_address(*bad)


def test_decompose_rejects_other_prefixes():
    with pytest.raises(AddressError):
        decompose_address("fe80::1")


@given(st.integers(0, 2**38 - 1), st.integers(0, 2**16 - 1), st.integers(0, 2**64 - 1))
def test_compose_matches_bit_oracle(sp, sn, h):
    a = compose_address(sp, sn, h)
    assert ipaddress.IPv6Address(a.value) == bits_oracle(sp, sn, h)
    assert str(a)[:3].upper() in ("FEC", "FED", "FEE", "FEF")


@given(st.integers(0, 2**118 - 1))
def test_decompose_compose_round_trip(low):
    value = (0b1111111011 << 118) | low
    a = decompose_address(value)
    assert compose_address(a.subprefix, a.subnet, a.host_id).value == value


# -- link-local -------------------------------------------------------------------


@pytest.mark.parametrize(
    "host,expected",
    [(1, "fe80::1"), (0, "fe80::"), (2**64 - 1, "fe80::ffff:ffff:ffff:ffff")],
)
def test_link_local(host, expected):
    assert str(link_local_from(host)) == expected


# -- blocks ---------------------------------------------------------------------------


@pytest.mark.parametrize("m", [1, 2, 4, 16, 1024])
def test_blocks_are_disjoint_and_cover(m):
    layout = BlockLayout(m)
    spans = [(layout.base(i), layout.bound(i)) for i in range(m)]
    assert spans[0][0] == 0 and spans[-1][1] == HOST_SPACE
    for (a0, a1), (b0, b1) in zip(spans, spans[1:]):
        assert a1 == b0 and a0 < a1


@pytest.mark.parametrize("m", [0, 3, 12])
def test_block_count_must_be_power_of_two(m):
    with pytest.raises(AddressError):
        BlockLayout(m)


@given(st.integers(0, 10), st.integers(0, 2**64 - 1))
def test_block_of_locates_host(log_m, host):
    layout = BlockLayout(2**log_m)
    b = layout.block_of(host)
    assert layout.base(b) <= host < layout.bound(b)


# -- allocation ---------------------------------------------------------------------


def fresh(m=4, **kw):
    layout = BlockLayout(m, **kw)
    return layout, AllocationState.fresh(layout, 0, 0)


def test_allocate_fresh_returns_block_base():
    layout, st_ = fresh(4)
    assert allocate_lowest_free(st_, layout, FixedChoice(2)) == (2, layout.base(2))


def test_allocate_after_pending_advances_by_one():
    layout, st_ = fresh(4)
    _, host = allocate_lowest_free(st_, layout, FixedChoice(2))
    st_.mark_pending(st_.address(host), 1, 0.0)
    assert allocate_lowest_free(st_, layout, FixedChoice(2)) == (2, layout.base(2) + 1)


def test_allocate_exhausts_miniature_space():
    # 4-bit Host-ID variant with two blocks of eight: the oracle is the full
    # list of 16 Host-IDs, which must come out exactly once before exhaustion.
    layout, st_ = fresh(2, host_bits=4)
    rng = random.Random(7)
    seen = []
    for _ in range(16):
        _, host = allocate_lowest_free(st_, layout, rng)
        st_.mark_pending(st_.address(host), 1, 0.0)
        seen.append(host)
    assert sorted(seen) == list(range(16))
    with pytest.raises(AddressSpaceExhausted):
        allocate_lowest_free(st_, layout, rng)


def test_host_id_zero_is_allocatable():
    layout, st_ = fresh(4)
    assert allocate_lowest_free(st_, layout, FixedChoice(0)) == (0, 0)


# -- registration and expiry --------------------------------------------------------------


def pending(st_, host=5, who=1):
    a = st_.address(host)
    st_.mark_pending(a, who, 0.0)
    return a


def test_register_moves_pat_to_rat():
    _, st_ = fresh()
    a = pending(st_)
    fat_before = dict(st_.fat)
    register_address(st_, a, 11, 99, (0.0, 10.0))
    assert st_.rat[a].identity == 11 and a not in st_.pat
    assert st_.fat == fat_before


def test_register_unknown_pending():
    _, st_ = fresh()
    with pytest.raises(UnknownPending):
        register_address(st_, st_.address(3), 11, 99, (0.0, 10.0))


def test_register_twice_is_duplicate():
    _, st_ = fresh()
    a = pending(st_)
    register_address(st_, a, 11, 99, (0.0, 10.0))
    with pytest.raises(DuplicateRegistration):
        register_address(st_, a, 11, 99, (0.0, 10.0))


@pytest.mark.parametrize("now,kept", [(11.0, False), (10.0, True)])
def test_expiry_is_closed_interval(now, kept):
    _, st_ = fresh()
    a = pending(st_)
    register_address(st_, a, 11, 99, (0.0, 10.0))
    expire_certificates(st_, now)
    assert (a in st_.rat) is kept


def test_expire_empty_rat_is_noop():
    _, st_ = fresh()
    before = st_.copy()
    expire_certificates(st_, 100.0)
    assert st_ == before


def test_pending_ttl_collects_abandoned_entries():
    _, st_ = fresh()
    a = pending(st_)
    assert st_.collect_pending(30.0) == []
    assert st_.collect_pending(30.5) == [a]


class AllocationMachine(RuleBasedStateMachine):
    """Random interleavings of allocate / register / expire / ttl collection."""

    def __init__(self):
        super().__init__()
        self.layout = BlockLayout(4, host_bits=6)
        self.state = AllocationState.fresh(self.layout, 1, 2, pending_ttl=5.0)
        self.rng = random.Random(0)
        self.now = 0.0
        self.ever_registered = set()
        self.last_host = {}

    @rule(block=st.integers(0, 3))
    def allocate(self, block):
        try:
            b, host = allocate_lowest_free(self.state, self.layout, FixedChoice(block))
        except AddressSpaceExhausted:
            return
        assert host > self.last_host.get(b, -1), "allocation order within a block must increase"
        self.last_host[b] = host
        self.state.mark_pending(self.state.address(host), 1, self.now)

    @precondition(lambda self: self.state.pat)
    @rule(data=st.data(), life=st.floats(0, 20))
    def register(self, data, life):
        addr = data.draw(st.sampled_from(sorted(self.state.pat)))
        register_address(self.state, addr, 2, 3, (self.now, self.now + life))
        self.ever_registered.add(addr)

    @rule(dt=st.floats(0, 8))
    def advance(self, dt):
        self.now += dt
        expire_certificates(self.state, self.now)
        self.state.collect_pending(self.now)

    @invariant()
    def tables_consistent(self):
        self.state.check_invariants()
        # nothing that was registered ever goes back to pending
        assert not (self.ever_registered & set(self.state.pat))
        for e in self.state.rat.values():
            assert e.valid_until >= self.now


TestAllocationInterleavings = AllocationMachine.TestCase


def test_registered_entry_is_hashable_value():
    assert RegisteredEntry(1, 2, 0.0, 1.0) == RegisteredEntry(1, 2, 0.0, 1.0)
