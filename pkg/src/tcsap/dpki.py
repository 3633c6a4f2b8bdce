"""Distributed PKI: dealer-free key sharing, threshold signatures, certificates, revocation.

Arithmetic is over the order-``q`` subgroup of ``Z_p^*`` for a safe prime
``p = 2q + 1``.  Signatures are deterministic: every nonce is derived by hashing
the signer's secret with the message, so a simulation run is reproducible.

Threshold signatures are of the "unique value" kind: the combined signature on
``m`` is ``H(m)^x`` where ``H`` hashes into the subgroup and ``x`` is the shared
CA key.  Each partial ``H(m)^{s_i}`` travels with a Chaum-Pedersen proof that it
uses the same exponent as the signer's verification key ``g^{s_i}``.  The
combined signature keeps those proofs, so a verifier holding only ``g^x`` can
check it: the verification keys must Lagrange-interpolate to ``g^x`` in the
exponent and every proof must hold.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Mapping, Sequence

from .addressing import SiteLocalAddress


class InsufficientShares(Exception):
    pass


class DuplicateIndex(Exception):
    pass


class InvalidShare(Exception):
    pass


@dataclass(frozen=True)
class GroupParams:
    p: int
    q: int
    g: int

    def __post_init__(self):
        if (self.p - 1) % self.q:
            raise ValueError("q must divide p - 1")
        if self.g in (0, 1) or pow(self.g, self.q, self.p) != 1:
            raise ValueError("g must generate the order-q subgroup")

    @property
    def element_bytes(self) -> int:
        return (self.p.bit_length() + 7) // 8

    def encode(self, element: int) -> bytes:
        return element.to_bytes(self.element_bytes, "big")


# q < 10**6 keeps discrete logs and secret spaces brute-forceable in tests.
TEST_GROUP = GroupParams(p=1999619, q=999809, g=4)
TINY_GROUP = GroupParams(p=2027, q=1013, g=4)
# 160-bit q; p = 2q + 1.
SIM_GROUP = GroupParams(
    p=1710600468576692840327677009100615935303919028203,
    q=855300234288346420163838504550307967651959514101,
    g=4,
)


@dataclass(frozen=True)
class ThresholdParams:
    k: int
    n: int

    def __post_init__(self):
        if self.k < 2:
            raise ValueError(f"k must be >= 2, got {self.k}")
        if self.n < self.k:
            raise ValueError(f"n={self.n} is below the threshold k={self.k}")

    @property
    def tolerates_k_minus_1_faults(self) -> bool:
        return self.n >= 2 * self.k - 1


# -- hashing and encoding ---------------------------------------------------


def encode_fields(*fields: bytes) -> bytes:
    """Length-prefixed concatenation; byte-stable across runs."""
    out = bytearray()
    for f in fields:
        out += len(f).to_bytes(4, "big")
        out += f
    return bytes(out)


def _int_bytes(v: int) -> bytes:
    return v.to_bytes(max(1, (v.bit_length() + 7) // 8), "big")


def hash_to_scalar(group: GroupParams, *parts: bytes) -> int:
    digest = hashlib.sha256(encode_fields(b"tcsap-scalar", *parts)).digest()
    return int.from_bytes(digest, "big") % group.q


def _nonce(group: GroupParams, secret: int, *parts: bytes) -> int:
    counter = 0
    while True:
        digest = hashlib.sha256(
            encode_fields(b"tcsap-nonce", _int_bytes(secret), _int_bytes(counter), *parts)
        ).digest()
        w = int.from_bytes(digest, "big") % group.q
        if w:
            return w
        counter += 1


@lru_cache(maxsize=4096)
def hash_to_group(group: GroupParams, message: bytes) -> int:
    # Squaring maps into the quadratic residues, i.e. the order-q subgroup,
    # without revealing a discrete log of the result.
    counter = 0
    while True:
        digest = hashlib.sha256(encode_fields(b"tcsap-h2g", _int_bytes(counter), message)).digest()
        h = pow(int.from_bytes(digest, "big") % group.p, 2, group.p)
        if h not in (0, 1):
            return h
        counter += 1


def lagrange_coefficient(index: int, indices: Iterable[int], q: int, at: int = 0) -> int:
    num, den = 1, 1
    for j in indices:
        if j == index:
            continue
        num = num * (at - j) % q
        den = den * (index - j) % q
    return num * pow(den, -1, q) % q


def _poly_eval(coeffs: Sequence[int], x: int, q: int) -> int:
    acc = 0
    for c in reversed(coeffs):
        acc = (acc * x + c) % q
    return acc


def share_index(identity: int, group: GroupParams) -> int:
    idx = identity + 1
    if idx >= group.q:
        raise ValueError(f"identity {identity} too large for group order")
    return idx


# -- ordinary (Schnorr) signatures -------------------------------------------


@dataclass(frozen=True)
class KeyPair:
    secret: int
    public: int


@dataclass(frozen=True)
class Signature:
    challenge: int
    response: int


def keypair_from_seed(group: GroupParams, seed: bytes) -> KeyPair:
    x = _nonce(group, 1, b"keygen", seed)
    return KeyPair(x, pow(group.g, x, group.p))


def sign(group: GroupParams, key: KeyPair, message: bytes) -> Signature:
    w = _nonce(group, key.secret, message)
    r = pow(group.g, w, group.p)
    c = hash_to_scalar(group, group.encode(r), group.encode(key.public), message)
    return Signature(c, (w + c * key.secret) % group.q)


@lru_cache(maxsize=65536)
def verify(group: GroupParams, public_key: int, message: bytes, sig: Signature) -> bool:
    if not (0 < public_key < group.p) or not (0 <= sig.response < group.q):
        return False
    r = pow(group.g, sig.response, group.p) * pow(public_key, group.q - sig.challenge, group.p) % group.p
    return sig.challenge == hash_to_scalar(group, group.encode(r), group.encode(public_key), message)


# -- joint verifiable random secret sharing -----------------------------------


@dataclass(frozen=True)
class Dealing:
    """One participant's contribution: Feldman commitments plus per-index share values."""

    dealer: int
    commitments: tuple[int, ...]
    values: Mapping[int, int]


@dataclass(frozen=True)
class KeyShare:
    holder: int
    index: int
    value: int
    commitments: tuple[int, ...]
    group: GroupParams = field(repr=False)

    @property
    def threshold(self) -> int:
        return len(self.commitments)

    @property
    def public_key(self) -> int:
        return self.commitments[0]


def make_dealing(dealer: int, indices: Iterable[int], k: int, group: GroupParams, rng) -> Dealing:
    coeffs = [rng.randrange(group.q) for _ in range(k)]
    commitments = tuple(pow(group.g, a, group.p) for a in coeffs)
    return Dealing(dealer, commitments, {i: _poly_eval(coeffs, i, group.q) for i in indices})


def expected_verification_key(commitments: Sequence[int], index: int, group: GroupParams) -> int:
    acc = 1
    for j, c in enumerate(commitments):
        acc = acc * pow(c, pow(index, j, group.q), group.p) % group.p
    return acc


def verify_dealing_value(dealing: Dealing, index: int, group: GroupParams) -> bool:
    value = dealing.values.get(index)
    if value is None:
        return False
    return pow(group.g, value, group.p) == expected_verification_key(dealing.commitments, index, group)


def combine_dealings(dealings: Sequence[Dealing], holder: int, index: int, group: GroupParams) -> KeyShare:
    if not dealings:
        raise InsufficientShares("no dealings")
    k = len(dealings[0].commitments)
    commitments = [1] * k
    value = 0
    for d in dealings:
        if len(d.commitments) != k:
            raise InvalidShare(f"dealer {d.dealer} used a different degree")
        if not verify_dealing_value(d, index, group):
            raise InvalidShare(f"dealer {d.dealer} sent an inconsistent share")
        value = (value + d.values[index]) % group.q
        commitments = [a * b % group.p for a, b in zip(commitments, d.commitments)]
    return KeyShare(holder, index, value, tuple(commitments), group)


def jvrss_setup(
    participants: Sequence[int],
    params: ThresholdParams,
    group: GroupParams,
    rng,
) -> tuple[dict[int, KeyShare], int]:
    """Run the dealer-free sharing among ``participants`` (identities).

    Returns each participant's share and the network public key ``g^x``; the
    secret ``x`` itself is never formed.
    """
    if len(participants) < params.k:
        raise InsufficientShares(f"{len(participants)} participants for k={params.k}")
    indices = {p: share_index(p, group) for p in participants}
    dealings = [make_dealing(p, indices.values(), params.k, group, rng) for p in participants]
    shares = {p: combine_dealings(dealings, p, indices[p], group) for p in participants}
    return shares, next(iter(shares.values())).public_key


def verify_share(share: KeyShare, group: GroupParams | None = None) -> bool:
    group = group or share.group
    return pow(group.g, share.value, group.p) == expected_verification_key(
        share.commitments, share.index, group
    )


def share_contribution(share: KeyShare, coalition_indices: Sequence[int], new_index: int) -> int:
    """This holder's additive piece of the share for ``new_index``."""
    q = share.group.q
    return lagrange_coefficient(share.index, coalition_indices, q, at=new_index) * share.value % q


def assemble_share(
    contributions: Iterable[int], holder: int, index: int, commitments: tuple[int, ...], group: GroupParams
) -> KeyShare:
    return KeyShare(holder, index, sum(contributions) % group.q, commitments, group)


def issue_share(holders: Sequence[KeyShare], new_identity: int) -> KeyShare:
    if not holders:
        raise InsufficientShares("no holders")
    group = holders[0].group
    k = holders[0].threshold
    if len({h.index for h in holders}) < k:
        raise InsufficientShares(f"{len(holders)} shares supplied, {k} required")
    coalition = sorted({h.index: h for h in holders}.values(), key=lambda h: h.index)[:k]
    indices = [h.index for h in coalition]
    new_index = share_index(new_identity, group)
    if new_index in indices:
        raise DuplicateIndex(new_index)
    parts = [share_contribution(h, indices, new_index) for h in coalition]
    return assemble_share(parts, new_identity, new_index, coalition[0].commitments, group)


# -- threshold signatures -------------------------------------------------------


@dataclass(frozen=True)
class PartialSignature:
    index: int
    value: int
    verification_key: int
    challenge: int
    response: int
    digest: bytes


@dataclass(frozen=True)
class ThresholdSignature:
    value: int
    partials: tuple[PartialSignature, ...]


def _digest(message: bytes) -> bytes:
    return hashlib.sha256(message).digest()


def _dleq_challenge(group, h, vk, sigma, a, b, digest) -> int:
    enc = group.encode
    return hash_to_scalar(group, enc(group.g), enc(h), enc(vk), enc(sigma), enc(a), enc(b), digest)


def partial_sign(message: bytes, share: KeyShare) -> PartialSignature:
    group = share.group
    h = hash_to_group(group, message)
    digest = _digest(message)
    sigma = pow(h, share.value, group.p)
    vk = pow(group.g, share.value, group.p)
    w = _nonce(group, share.value, _int_bytes(share.index), digest)
    a, b = pow(group.g, w, group.p), pow(h, w, group.p)
    c = _dleq_challenge(group, h, vk, sigma, a, b, digest)
    return PartialSignature(share.index, sigma, vk, c, (w + c * share.value) % group.q, digest)


@lru_cache(maxsize=65536)
def _dleq_holds(group: GroupParams, message: bytes, ps: PartialSignature) -> bool:
    p, q = group.p, group.q
    if ps.digest != _digest(message) or not (0 < ps.value < p and 0 < ps.verification_key < p):
        return False
    h = hash_to_group(group, message)
    a = pow(group.g, ps.response, p) * pow(ps.verification_key, q - ps.challenge, p) % p
    b = pow(h, ps.response, p) * pow(ps.value, q - ps.challenge, p) % p
    return ps.challenge == _dleq_challenge(group, h, ps.verification_key, ps.value, a, b, ps.digest)


def verify_partial(
    partial: PartialSignature,
    message: bytes,
    group: GroupParams,
    commitments: Sequence[int] | None = None,
) -> bool:
    """Check the equality-of-logs proof, and, given the sharing commitments,
    that the signer used the share actually assigned to its index."""
    if not _dleq_holds(group, message, partial):
        return False
    if commitments is not None:
        return partial.verification_key == expected_verification_key(commitments, partial.index, group)
    return True


def combine(partials: Sequence[PartialSignature], params: ThresholdParams | int, group: GroupParams) -> ThresholdSignature:
    k = params if isinstance(params, int) else params.k
    indices = [ps.index for ps in partials]
    if len(set(indices)) != len(indices):
        raise DuplicateIndex(sorted(i for i in set(indices) if indices.count(i) > 1))
    if len(partials) < k:
        raise InsufficientShares(f"{len(partials)} partials, {k} required")
    if len({ps.digest for ps in partials}) != 1:
        raise ValueError("partials cover different messages")
    value = 1
    for ps in partials:
        lam = lagrange_coefficient(ps.index, indices, group.q)
        value = value * pow(ps.value, lam, group.p) % group.p
    return ThresholdSignature(value, tuple(sorted(partials, key=lambda ps: ps.index)))


@lru_cache(maxsize=16384)
def verify_threshold(sig: ThresholdSignature, message: bytes, network_public_key: int, group: GroupParams) -> bool:
    if not sig.partials:
        return False
    indices = [ps.index for ps in sig.partials]
    if len(set(indices)) != len(indices):
        return False
    vk_acc, value_acc = 1, 1
    for ps in sig.partials:
        if not _dleq_holds(group, message, ps):
            return False
        lam = lagrange_coefficient(ps.index, indices, group.q)
        vk_acc = vk_acc * pow(ps.verification_key, lam, group.p) % group.p
        value_acc = value_acc * pow(ps.value, lam, group.p) % group.p
    return vk_acc == network_public_key and value_acc == sig.value


def threshold_sign_direct(message: bytes, secret: int, group: GroupParams) -> int:
    """``H(m)^x`` computed from the whole key; only meaningful in tests."""
    return pow(hash_to_group(group, message), secret, group.p)


# -- certificates ------------------------------------------------------------------


def _time_u64(t: float) -> bytes:
    return int(round(t * 1_000_000)).to_bytes(8, "big")


@dataclass(frozen=True)
class OfflineCertificate:
    subject: int
    public_key: int
    issuer: str
    valid_from: float
    valid_until: float
    signature: Signature

    def body(self, group: GroupParams) -> bytes:
        return offline_body(self.subject, self.public_key, self.issuer, self.valid_from, self.valid_until, group)


def offline_body(subject, public_key, issuer, valid_from, valid_until, group) -> bytes:
    return encode_fields(
        b"offline-cert",
        subject.to_bytes(8, "big"),
        group.encode(public_key),
        issuer.encode(),
        _time_u64(valid_from),
        _time_u64(valid_until),
    )


def issue_offline_certificate(
    root: KeyPair, subject: int, public_key: int, group: GroupParams,
    valid_from: float = 0.0, valid_until: float = 1e9, issuer: str = "root",
) -> OfflineCertificate:
    body = offline_body(subject, public_key, issuer, valid_from, valid_until, group)
    return OfflineCertificate(subject, public_key, issuer, valid_from, valid_until, sign(group, root, body))


def verify_offline_certificate(cert: OfflineCertificate, root_public: int, group: GroupParams, now: float | None = None) -> bool:
    if now is not None and not (cert.valid_from <= now <= cert.valid_until):
        return False
    return verify(group, root_public, cert.body(group), cert.signature)


def certificate_message(ip: SiteLocalAddress, public_key: int, valid_from: float, valid_until: float, group: GroupParams) -> bytes:
    return encode_fields(ip.packed(), group.encode(public_key), _time_u64(valid_from), _time_u64(valid_until))


@dataclass(frozen=True)
class OnlineJointCertificate:
    ip: SiteLocalAddress
    public_key: int
    valid_from: float
    valid_until: float
    signature: ThresholdSignature

    def message(self, group: GroupParams) -> bytes:
        return certificate_message(self.ip, self.public_key, self.valid_from, self.valid_until, group)

    def valid_at(self, now: float) -> bool:
        return self.valid_from <= now <= self.valid_until


def verify_online_certificate(cert: OnlineJointCertificate, network_public_key: int, group: GroupParams) -> bool:
    return verify_threshold(cert.signature, cert.message(group), network_public_key, group)


def issue_online_certificate(
    request: tuple[SiteLocalAddress, int, tuple[float, float]],
    coalition: Sequence[KeyShare],
    params: ThresholdParams | int,
) -> OnlineJointCertificate:
    ip, public_key, (start, end) = request
    k = params if isinstance(params, int) else params.k
    if len({s.index for s in coalition}) < k:
        raise InsufficientShares(f"coalition of {len(coalition)} for k={k}")
    group = coalition[0].group
    msg = certificate_message(ip, public_key, start, end, group)
    partials = [partial_sign(msg, s) for s in coalition]
    return OnlineJointCertificate(ip, public_key, start, end, combine(partials, k, group))


# -- revocation --------------------------------------------------------------------


@dataclass
class RevocationState:
    rcl: set[int] = field(default_factory=set)
    anl: dict[int, set[int]] = field(default_factory=dict)
    bl: set[int] = field(default_factory=set)

    def copy(self) -> "RevocationState":
        return RevocationState(set(self.rcl), {k: set(v) for k, v in self.anl.items()}, set(self.bl))

    def is_excluded(self, identity: int, public_key: int | None = None) -> bool:
        return identity in self.bl or (public_key is not None and public_key in self.rcl)


def accuse(revstate: RevocationState, accuser: int, accused: int, threshold: int) -> RevocationState:
    if accuser in revstate.bl or accuser == accused:
        return revstate
    accusers = revstate.anl.setdefault(accused, set())
    accusers.add(accuser)
    if len(accusers) >= threshold:
        revstate.bl.add(accused)
    return revstate


def revocation_message(identity: int, public_key: int, group: GroupParams) -> bytes:
    return encode_fields(b"revoke", identity.to_bytes(8, "big"), group.encode(public_key))


def apply_revocation(
    revstate: RevocationState,
    identity: int,
    public_key: int,
    sig: ThresholdSignature,
    network_public_key: int,
    group: GroupParams,
) -> bool:
    """Honour a threshold-signed revocation; returns whether it verified."""
    if not verify_threshold(sig, revocation_message(identity, public_key, group), network_public_key, group):
        return False
    revstate.rcl.add(public_key)
    revstate.bl.add(identity)
    return True
