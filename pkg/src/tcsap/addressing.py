"""Site-local IPv6 addresses, Host-ID block partitioning and the FAT/PAT/RAT tables."""

from __future__ import annotations

import ipaddress
from dataclasses import dataclass, field

FIXED_PREFIX = 0b1111111011
SUBPREFIX_BITS = 38
SUBNET_BITS = 16
HOST_BITS = 64

SUBPREFIX_SPACE = 1 << SUBPREFIX_BITS
SUBNET_SPACE = 1 << SUBNET_BITS
HOST_SPACE = 1 << HOST_BITS

LINK_LOCAL_PREFIX = 0xFE80 << 112
ALL_NODES_SITE_LOCAL = ipaddress.IPv6Address("ff05::1")

DEFAULT_BLOCKS = 16
DEFAULT_PENDING_TTL = 30.0


class AddressError(ValueError):
    pass


class AddressSpaceExhausted(Exception):
    pass


class UnknownPending(KeyError):
    pass


class DuplicateRegistration(Exception):
    pass


def _check_width(name: str, value: int, bits: int) -> None:
    if not isinstance(value, int) or value < 0 or value >= (1 << bits):
        raise AddressError(f"{name} must fit in {bits} bits, got {value!r}")


@dataclass(frozen=True, order=True)
class SiteLocalAddress:
    subprefix: int
    subnet: int
    host_id: int

    def __post_init__(self):
        _check_width("subprefix", self.subprefix, SUBPREFIX_BITS)
        _check_width("subnet", self.subnet, SUBNET_BITS)
        _check_width("host_id", self.host_id, HOST_BITS)

    @property
    def value(self) -> int:
        return (
            (FIXED_PREFIX << 118)
            | (self.subprefix << 80)
            | (self.subnet << 64)
            | self.host_id
        )

    def packed(self) -> bytes:
        return self.value.to_bytes(16, "big")

    def __str__(self) -> str:
        return str(ipaddress.IPv6Address(self.value))


def compose_address(subprefix: int, subnet: int, host_id: int) -> SiteLocalAddress:
    return SiteLocalAddress(subprefix, subnet, host_id)


def decompose_address(value: int | str | ipaddress.IPv6Address) -> SiteLocalAddress:
    """Split a 128-bit site-local value into (subprefix, subnet, host_id)."""
    if isinstance(value, (str, ipaddress.IPv6Address)):
        value = int(ipaddress.IPv6Address(value))
    if not 0 <= value < (1 << 128):
        raise AddressError(f"not a 128-bit value: {value!r}")
    if value >> 118 != FIXED_PREFIX:
        raise AddressError(f"{ipaddress.IPv6Address(value)} is not site-local")
    return SiteLocalAddress(
        (value >> 80) & (SUBPREFIX_SPACE - 1),
        (value >> 64) & (SUBNET_SPACE - 1),
        value & (HOST_SPACE - 1),
    )


def link_local_from(host_id: int) -> ipaddress.IPv6Address:
    _check_width("host_id", host_id, HOST_BITS)
    return ipaddress.IPv6Address(LINK_LOCAL_PREFIX | host_id)


@dataclass(frozen=True)
class BlockLayout:
    """Equal-sized disjoint blocks covering a Host-ID space of ``2**host_bits``."""

    m_blocks: int = DEFAULT_BLOCKS
    host_bits: int = HOST_BITS

    def __post_init__(self):
        m = self.m_blocks
        if m < 1 or m & (m - 1):
            raise AddressError(f"M must be a power of two, got {m}")
        if m > (1 << self.host_bits):
            raise AddressError("more blocks than Host-IDs")

    @property
    def block_size(self) -> int:
        return (1 << self.host_bits) // self.m_blocks

    def base(self, i: int) -> int:
        if not 0 <= i < self.m_blocks:
            raise IndexError(i)
        return i * self.block_size

    def bound(self, i: int) -> int:
        """Exclusive upper end of block ``i``."""
        return self.base(i) + self.block_size

    def block_of(self, host_id: int) -> int:
        return host_id // self.block_size


@dataclass(frozen=True)
class RegisteredEntry:
    identity: int
    public_key: int
    valid_from: float
    valid_until: float


@dataclass(frozen=True)
class PendingEntry:
    requester: int
    assigned_at: float


@dataclass
class AllocationState:
    """FAT, PAT, RAT and RC as held by one configured node.

    ``fat`` is keyed by ``(subnet, block)``; PAT and RAT are keyed by the full
    site-local address.
    """

    layout: BlockLayout
    subprefix: int = 0
    subnets: list[int] = field(default_factory=list)
    fat: dict[tuple[int, int], int] = field(default_factory=dict)
    pat: dict[SiteLocalAddress, PendingEntry] = field(default_factory=dict)
    rat: dict[SiteLocalAddress, RegisteredEntry] = field(default_factory=dict)
    rc: dict[int, int] = field(default_factory=dict)
    pending_ttl: float = DEFAULT_PENDING_TTL

    @classmethod
    def fresh(cls, layout: BlockLayout, subprefix: int, subnet: int, **kw) -> "AllocationState":
        state = cls(layout=layout, subprefix=subprefix, **kw)
        state.add_subnet(subnet)
        return state

    @property
    def active_subnet(self) -> int:
        return self.subnets[-1]

    def add_subnet(self, subnet: int) -> None:
        _check_width("subnet", subnet, SUBNET_BITS)
        if subnet not in self.subnets:
            self.subnets.append(subnet)
        for b in range(self.layout.m_blocks):
            self.fat.setdefault((subnet, b), self.layout.base(b))

    def fat_view(self, subnet: int | None = None) -> list[int]:
        subnet = self.active_subnet if subnet is None else subnet
        return [self.fat[(subnet, b)] for b in range(self.layout.m_blocks)]

    def block_exhausted(self, subnet: int, block: int) -> bool:
        return self.fat[(subnet, block)] >= self.layout.bound(block)

    def address(self, host_id: int, subnet: int | None = None) -> SiteLocalAddress:
        subnet = self.active_subnet if subnet is None else subnet
        return SiteLocalAddress(self.subprefix, subnet, host_id)

    def mark_pending(self, addr: SiteLocalAddress, requester: int, now: float) -> None:
        """Move ``addr`` out of the free range into PAT, advancing the FAT past it."""
        if addr in self.rat or addr in self.pat:
            return
        key = (addr.subnet, self.layout.block_of(addr.host_id))
        if key not in self.fat:
            self.add_subnet(addr.subnet)
        if addr.host_id >= self.fat[key]:
            self.fat[key] = addr.host_id + 1
        self.pat[addr] = PendingEntry(requester, now)

    def self_assign(self, addr: SiteLocalAddress, entry: RegisteredEntry) -> None:
        """Founder self-assignment: assignment and registration in one step."""
        key = (addr.subnet, self.layout.block_of(addr.host_id))
        if key not in self.fat:
            self.add_subnet(addr.subnet)
        if addr.host_id >= self.fat[key]:
            self.fat[key] = addr.host_id + 1
        self.pat.pop(addr, None)
        self.rat[addr] = entry

    def collect_pending(self, now: float) -> list[SiteLocalAddress]:
        stale = [a for a, p in self.pat.items() if now - p.assigned_at > self.pending_ttl]
        for a in stale:
            del self.pat[a]
        return stale

    def check_invariants(self) -> None:
        assert not (set(self.pat) & set(self.rat)), "address both pending and registered"
        for addr in list(self.pat) + list(self.rat):
            key = (addr.subnet, self.layout.block_of(addr.host_id))
            assert self.fat[key] > addr.host_id, f"FAT not above {addr}"

    def copy(self) -> "AllocationState":
        return AllocationState(
            layout=self.layout,
            subprefix=self.subprefix,
            subnets=list(self.subnets),
            fat=dict(self.fat),
            pat=dict(self.pat),
            rat=dict(self.rat),
            rc=dict(self.rc),
            pending_ttl=self.pending_ttl,
        )


def allocate_lowest_free(state: AllocationState, layout: BlockLayout, rng) -> tuple[int, int]:
    """Pick a uniformly random non-exhausted block; return its lowest free Host-ID.

    The caller is responsible for moving the result into PAT.
    """
    subnet = state.active_subnet
    open_blocks = [b for b in range(layout.m_blocks) if not state.block_exhausted(subnet, b)]
    if not open_blocks:
        raise AddressSpaceExhausted(f"all {layout.m_blocks} blocks of subnet {subnet:#x} are full")
    block = open_blocks[rng.randrange(len(open_blocks))]
    return block, state.fat[(subnet, block)]


def register_address(
    state: AllocationState,
    addr: SiteLocalAddress,
    identity: int,
    public_key: int,
    validity: tuple[float, float],
) -> AllocationState:
    if addr in state.rat:
        raise DuplicateRegistration(str(addr))
    if addr not in state.pat:
        raise UnknownPending(str(addr))
    del state.pat[addr]
    state.rat[addr] = RegisteredEntry(identity, public_key, validity[0], validity[1])
    return state


def expire_certificates(state: AllocationState, now: float) -> AllocationState:
    for addr in [a for a, e in state.rat.items() if e.valid_until < now]:
        del state.rat[addr]
    return state
