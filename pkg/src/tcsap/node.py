"""The per-node TCSAP state machine.

A :class:`NodeMachine` is a single-threaded reactor.  The simulator feeds it
messages and timer expiries; every reaction is appended to ``outbox`` as
:class:`Send`, :class:`StartTimer`, :class:`StopTimer`, :class:`Work` (crypto
cost to charge to the node's CPU) or :class:`Note` (a metrics hook) entries,
which the caller drains with :meth:`NodeMachine.drain`.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Any

from . import dpki
from .addressing import (
    AllocationState,
    BlockLayout,
    DuplicateRegistration,
    RegisteredEntry,
    SiteLocalAddress,
    UnknownPending,
    compose_address,
    expire_certificates,
    link_local_from,
    register_address,
)
from .messages import Kind, Message, sig_check, sign_message
from .protocol import (
    FoundingSet,
    InsufficientAgreement,
    MissingContribution,
    NoCommonFreeHostId,
    ServerReply,
    choose_free_host,
    compute_founding_set,
    derive_network_params,
    founding_self_assign,
    merge_snapshots,
    select_coalition,
    snapshot_of,
)

log = logging.getLogger(__name__)


class NodeState(enum.Enum):
    UNCONFIGURED = "Unconfigured"
    IN_PROGRESS = "ConfigurationInProgress"
    CONFIGURED = "Configured"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class Timers:
    discovery: float = 2.0
    init: float = 5.0
    config: float = 3.0
    config_cert: float = 3.0
    registration: float = 2.0


@dataclass(frozen=True)
class ProtocolConfig:
    k: int = 3
    rc_thresh: int = 3
    m_blocks: int = 16
    timers: Timers = Timers()
    initial_r_k: int = 2
    # Proceed to coalition selection this long after k agreeing replies are
    # in, instead of always waiting out the ConfigTimer.
    reply_grace: float = 0.05
    early_exit: bool = True
    cert_lifetime: float = 3600.0
    pending_ttl: float = 30.0
    accusation_threshold: int | None = None
    network_hops: int = 64
    group: dpki.GroupParams = dpki.SIM_GROUP
    root_public: int = 0
    joiner_block: int | None = None

    @property
    def accusation_limit(self) -> int:
        return self.accusation_threshold or self.k

    @property
    def layout(self) -> BlockLayout:
        return BlockLayout(self.m_blocks)


# -- outbox entries -------------------------------------------------------------


@dataclass
class Send:
    msg: Message
    dst: int | None
    hop_limit: int


@dataclass
class StartTimer:
    name: Any
    delay: float
    generation: int


@dataclass
class StopTimer:
    name: Any


@dataclass
class Work:
    op: str
    count: int = 1


@dataclass
class Note:
    event: str
    data: dict = field(default_factory=dict)


# -- per-phase contexts -------------------------------------------------------------


@dataclass
class InitContext:
    founders: FoundingSet
    acked: bool = False
    acks: dict = field(default_factory=dict)
    signs: dict = field(default_factory=dict)
    finalized: bool = False
    addresses: dict = field(default_factory=dict)
    cert_messages: dict = field(default_factory=dict)
    ca_message: bytes = b""
    own_partials: list = field(default_factory=list)
    ca_partials: list = field(default_factory=list)
    share: dpki.KeyShare | None = None
    alloc: AllocationState | None = None


@dataclass
class RequestContext:
    session: int
    link_local: Any
    r_k: int
    replies: dict = field(default_factory=dict)
    collecting: bool = False
    round: int = 0
    coalition: list = field(default_factory=list)
    ip: SiteLocalAddress | None = None
    validity: tuple = (0.0, 0.0)
    agreed: ServerReply | None = None


@dataclass
class CombinerContext:
    requester: int
    session: int
    round: int
    ip: SiteLocalAddress
    validity: tuple
    coalition: tuple
    partial_msgs: dict = field(default_factory=dict)
    done: bool = False


class NodeMachine:
    def __init__(
        self,
        identity: int,
        keys: dpki.KeyPair,
        offline_cert: dpki.OfflineCertificate,
        config: ProtocolConfig,
        rng,
    ):
        self.identity = identity
        self.keys = keys
        self.offline_cert = offline_cert
        self.cfg = config
        self.group = config.group
        self.layout = config.layout
        self.rng = rng

        self.state = NodeState.UNCONFIGURED
        self.phase: str | None = None
        self.active = True
        self.service = True

        self.own_nl: dict[int, float] = {}
        self.neighbor_cache: dict[int, frozenset] = {}

        self.alloc: AllocationState | None = None
        self.revocation = dpki.RevocationState()
        self.accusation_log: dict[int, dict[int, Message]] = {}
        self.share: dpki.KeyShare | None = None
        self.network_pk: int | None = None
        self.ca_certificate: dpki.ThresholdSignature | None = None
        self.online_cert: dpki.OnlineJointCertificate | None = None
        self.founding_group: tuple[int, ...] | None = None

        self.rc_sessions: dict[int, dict[int, set[int]]] = {}
        self.malicious_servers: set[int] = set()
        self.registrations: dict[SiteLocalAddress, tuple[int, dpki.OnlineJointCertificate]] = {}
        self.combining: dict[tuple, CombinerContext] = {}

        self.init: InitContext | None = None
        self.req: RequestContext | None = None
        self.refresh: dict | None = None
        self.timers: dict[Any, int] = {}
        self.outbox: list = []

        self._seq = 0
        self._timer_gen = 0
        self._sessions = 0
        self._next_housekeeping = 0.0

    # -- plumbing -------------------------------------------------------------------

    def __repr__(self) -> str:
        return f"<Node {self.identity} {self.state} phase={self.phase}>"

    @property
    def address(self) -> SiteLocalAddress | None:
        return self.online_cert.ip if self.online_cert else None

    @property
    def k(self) -> int:
        return self.cfg.k

    def drain(self) -> list:
        out, self.outbox = self.outbox, []
        return out

    def _send(self, kind: Kind, payload: dict, dst: int | None = None, hop_limit: int = 1, about: int | None = None) -> Message:
        self._seq += 1
        msg = Message(kind, self.identity, dst, about, (self.identity << 24) | self._seq, payload, self.offline_cert)
        sign_message(msg, self.keys, self.group)
        self.outbox.append(Work("sign"))
        self.outbox.append(Send(msg, dst, hop_limit))
        return msg

    def _flood(self, kind: Kind, payload: dict, about: int | None = None) -> Message:
        return self._send(kind, payload, None, self.cfg.network_hops, about)

    def _start_timer(self, name, delay: float) -> None:
        self._timer_gen += 1
        self.timers[name] = self._timer_gen
        self.outbox.append(StartTimer(name, delay, self._timer_gen))

    def _stop_timer(self, name) -> None:
        if self.timers.pop(name, None) is not None:
            self.outbox.append(StopTimer(name))

    def _note(self, event: str, **data) -> None:
        self.outbox.append(Note(event, data))

    def _sigcheck(self, msg: Message, now: float) -> bool:
        ok = sig_check(msg, self.cfg.root_public, self.group, now)
        self.outbox.append(Work("verify", 2))
        if not ok:
            self._note("discard", reason="signature", kind=str(msg.kind), src=msg.src)
        return ok

    def timer_live(self, name, generation: int) -> bool:
        return self.timers.get(name) == generation

    def _housekeeping(self, now: float) -> None:
        if now < self._next_housekeeping or self.alloc is None:
            return
        self._next_housekeeping = now + 1.0
        expire_certificates(self.alloc, now)
        self.alloc.collect_pending(now)
        for ident in [i for i, t in self.own_nl.items() if now - t > 3 * self.cfg.timers.discovery]:
            del self.own_nl[ident]

    # -- entry points ------------------------------------------------------------------

    def boot(self, now: float) -> None:
        if self.state is NodeState.UNCONFIGURED:
            self.discovery_round(now)

    def on_message(self, msg: Message, now: float, hops: int = 1) -> None:
        if not self.active:
            return
        self._housekeeping(now)
        handler = getattr(self, "_on_" + msg.kind.name.lower(), None)
        if handler is not None:
            handler(msg, now, hops)

    def on_timer(self, name, now: float) -> None:
        if not self.active:
            return
        self.timers.pop(name, None)
        self._housekeeping(now)
        if isinstance(name, tuple) and name[0] == "reg":
            self._registration_expired(name[1], now)
            return
        getattr(self, "_timeout_" + name)(now)

    def leave(self, now: float) -> None:
        for name in list(self.timers):
            self._stop_timer(name)
        self.active = False
        if self.state is not NodeState.CONFIGURED:
            self._reset(now, restart=False)
        self._note("leave")

    def rejoin(self, now: float) -> None:
        self.active = True
        self._note("rejoin")
        if self.state is NodeState.CONFIGURED and self.online_cert and self.online_cert.valid_at(now):
            self.phase = "refreshing"
            self.refresh = {"nonce": self._new_session(), "replies": {}, "collecting": False}
            self._send_refresh_request()
        else:
            self._reset(now, restart=False)
            self.online_cert = None
            self.boot(now)

    def _new_session(self) -> int:
        self._sessions += 1
        return self._sessions

    def _reset(self, now: float, restart: bool = True) -> None:
        """Back to Unconfigured, dropping everything tied to the failed attempt."""
        for name in [n for n in self.timers if not (isinstance(n, tuple) and n[0] == "reg")]:
            self._stop_timer(name)
        self.state = NodeState.UNCONFIGURED
        self.phase = None
        self.init = None
        self.req = None
        self.refresh = None
        self.neighbor_cache.clear()
        if self.online_cert is None or not self.online_cert.valid_at(now):
            self.online_cert = None
            self.share = None
            self.alloc = None
            self.network_pk = None
            self.founding_group = None
            self.registrations.clear()
            self.combining.clear()
        if restart and self.active:
            self.discovery_round(now)

    # -- neighbors discovery ------------------------------------------------------

    def discovery_round(self, now: float) -> None:
        if self.state is not NodeState.UNCONFIGURED:
            return
        self.phase = "discovery"
        self._flood_discovery()
        self._start_timer("discovery", self.cfg.timers.discovery)
        self._note("discovery_request")

    def _flood_discovery(self) -> None:
        self._send(Kind.DISCOVERY_REQUEST, {}, None, 1, about=self.identity)

    def closed_neighbor_list(self) -> tuple[int, ...]:
        return tuple(sorted({self.identity, *self.own_nl}))

    def _on_discovery_request(self, msg, now, hops):
        if self.state is NodeState.IN_PROGRESS or not self._sigcheck(msg, now):
            return
        if self.state is NodeState.UNCONFIGURED:
            self.own_nl[msg.src] = now
            self._send(Kind.DISCOVERY_REPLY, {"nl": self.closed_neighbor_list()}, msg.src, 1, about=msg.src)
        elif self.phase != "refreshing" and self.service:
            self._send(
                Kind.DISCOVERY_WELCOME,
                {"ip": self.address, "network_pk": self.network_pk},
                msg.src, 1, about=msg.src,
            )

    def _on_discovery_reply(self, msg, now, hops):
        if self.state is not NodeState.UNCONFIGURED or not self._sigcheck(msg, now):
            return
        self.own_nl[msg.src] = now
        self.neighbor_cache[msg.src] = frozenset(msg["nl"])

    def _on_discovery_welcome(self, msg, now, hops):
        if self.state is not NodeState.UNCONFIGURED or not self._sigcheck(msg, now):
            return
        self._stop_timer("discovery")
        self.state = NodeState.IN_PROGRESS
        self.start_config_request(msg["ip"], now)

    def _timeout_discovery(self, now):
        if self.state is not NodeState.UNCONFIGURED:
            return
        views = {j: nl for j, nl in self.neighbor_cache.items() if j in self.own_nl}
        views[self.identity] = self.closed_neighbor_list()
        founding = compute_founding_set(self.identity, views, self.k)
        if founding is not None:
            self._begin_init(founding, now, initiator=True)
            return
        self.neighbor_cache.clear()
        self.discovery_round(now)

    # -- initialization -------------------------------------------------------------

    def _begin_init(self, founding: FoundingSet, now: float, initiator: bool) -> None:
        self._stop_timer("discovery")
        self.state = NodeState.IN_PROGRESS
        self.phase = "init"
        self.init = InitContext(founding)
        if initiator:
            self._send(Kind.INIT_START, {"founders": founding.members}, None, 1)
            self._note("init_start", founders=founding.members)
        if founding.lowest == self.identity:
            self._flood(Kind.INIT_ADVERT, {"founders": founding.members})
            self._send_init_ack(now)
        self._start_timer("init", self.cfg.timers.init)

    def _send_init_ack(self, now: float) -> None:
        ctx = self.init
        ctx.acked = True
        members = ctx.founders.members
        indices = [dpki.share_index(m, self.group) for m in members]
        dealing = dpki.make_dealing(self.identity, indices, self.k, self.group, self.rng)
        self.outbox.append(Work("jvrss", len(members)))
        x = self.rng.randrange(1 << 38)
        y = self.rng.randrange(1 << 16)
        validity = (now, now + self.cfg.cert_lifetime)
        ack = {"founders": members, "x": x, "y": y, "dealing": dealing, "validity": validity}
        ctx.acks[self.identity] = (ack, self.keys.public)
        self._send(Kind.INIT_ACK, ack, None, 1)
        self._start_timer("init", self.cfg.timers.init)
        self._maybe_finalize_init(now)

    def _on_init_start(self, msg, now, hops):
        founders = tuple(msg["founders"])
        if self.identity not in founders or self.state is not NodeState.UNCONFIGURED:
            return
        if not self._sigcheck(msg, now):
            return
        self._begin_init(FoundingSet(tuple(sorted(founders))), now, initiator=False)

    def resolve_concurrent_init(self, msg: Message, now: float) -> None:
        """React to an Init_Advert or Init_Oppos (signature already checked)."""
        founders = tuple(sorted(msg["founders"]))
        advertiser = msg.src
        if msg.kind is Kind.INIT_OPPOS:
            if self.phase == "init" and self.init and self.init.founders.members == founders:
                self._note("init_aborted", reason="opposed", founders=founders)
                self._reset(now)
            elif self.founding_group == founders and self._yields_to(tuple(msg.get("network_founders") or ())):
                self._abandon_network(advertiser, now)
            return
        if self.state is NodeState.CONFIGURED:
            if self.founding_group == founders:
                return
            if self._yields_to(founders):
                self._abandon_network(advertiser, now)
                return
            payload = {"founders": founders, "network_pk": self.network_pk, "network_founders": self.founding_group}
            for target in sorted({advertiser, *founders}):
                self._send(Kind.INIT_OPPOS, payload, target, self.cfg.network_hops)
            return
        if self.phase != "init" or self.init is None:
            return
        ctx = self.init
        if advertiser in ctx.founders:
            if advertiser == ctx.founders.lowest and not ctx.acked:
                self._send_init_ack(now)
        elif advertiser < ctx.founders.lowest:
            self._note("init_aborted", reason="lower advert", founders=ctx.founders.members, by=advertiser)
            self._reset(now)

    def _yields_to(self, other_founders: tuple) -> bool:
        """A network still made only of its founders gives way to a concurrent
        founding group with a lower lowest identity."""
        if self.state is not NodeState.CONFIGURED or not self.founding_group or not other_founders:
            return False
        if min(other_founders) >= min(self.founding_group):
            return False
        owners = {e.identity for e in self.alloc.rat.values()}
        return owners <= set(self.founding_group) and not self.alloc.pat

    def _abandon_network(self, by: int, now: float) -> None:
        self._note("init_aborted", reason="lower founding group", founders=self.founding_group, by=by)
        self.online_cert = None
        self._reset(now)

    def _on_init_advert(self, msg, now, hops):
        if msg.src == self.identity or not self._sigcheck(msg, now):
            return
        self.resolve_concurrent_init(msg, now)

    def _on_init_oppos(self, msg, now, hops):
        if self._sigcheck(msg, now):
            self.resolve_concurrent_init(msg, now)

    def _on_init_ack(self, msg, now, hops):
        ctx = self.init
        if self.phase != "init" or ctx is None or msg.src not in ctx.founders:
            return
        if tuple(msg["founders"]) != ctx.founders.members or not self._sigcheck(msg, now):
            return
        ctx.acks[msg.src] = (msg.payload, msg.cert.public_key)
        self._maybe_finalize_init(now)

    def _maybe_finalize_init(self, now: float) -> None:
        ctx = self.init
        if ctx.finalized or not ctx.acked or len(ctx.acks) < len(ctx.founders):
            return
        members = ctx.founders.members
        try:
            subprefix, subnet = derive_network_params(
                [(ctx.acks[m][0]["x"], ctx.acks[m][0]["y"]) for m in members]
            )
            addresses = founding_self_assign(ctx.founders, self.layout, subprefix, subnet)
            my_index = dpki.share_index(self.identity, self.group)
            share = dpki.combine_dealings([ctx.acks[m][0]["dealing"] for m in members], self.identity, my_index, self.group)
        except (MissingContribution, dpki.InvalidShare, ValueError) as exc:
            self._note("init_aborted", reason=str(exc), founders=members)
            self._reset(now)
            return
        self.outbox.append(Work("verify", len(members)))
        ctx.finalized = True
        ctx.share = share
        ctx.addresses = addresses
        alloc = AllocationState.fresh(self.layout, subprefix, subnet, pending_ttl=self.cfg.pending_ttl)
        for m in members:
            ack, pk = ctx.acks[m]
            start, end = ack["validity"]
            alloc.self_assign(addresses[m], RegisteredEntry(m, pk, start, end))
            ctx.cert_messages[m] = dpki.certificate_message(addresses[m], pk, start, end, self.group)
        ctx.alloc = alloc
        ctx.ca_message = ca_record_message(share.public_key, subprefix, subnet, self.group)
        partials = {m: dpki.partial_sign(ctx.cert_messages[m], share) for m in members}
        ca_partial = dpki.partial_sign(ctx.ca_message, share)
        self.outbox.append(Work("partial_sign", len(members) + 1))
        self._send(
            Kind.INIT_SIGN,
            {"founders": members, "ip": addresses[self.identity], "partials": partials, "ca_partial": ca_partial},
            None, 1,
        )
        ctx.own_partials.append(partials[self.identity])
        ctx.ca_partials.append(ca_partial)
        self._start_timer("init", self.cfg.timers.init)
        for sender, payload in sorted(ctx.signs.items()):
            self._absorb_init_sign(sender, payload, now)
        self._maybe_complete_init(now)

    def _on_init_sign(self, msg, now, hops):
        ctx = self.init
        if self.phase != "init" or ctx is None or msg.src not in ctx.founders:
            return
        if tuple(msg["founders"]) != ctx.founders.members or not self._sigcheck(msg, now):
            return
        if not ctx.finalized:
            ctx.signs[msg.src] = msg.payload
            return
        self._absorb_init_sign(msg.src, msg.payload, now)
        self._maybe_complete_init(now)

    def _absorb_init_sign(self, sender: int, payload: dict, now: float) -> None:
        ctx = self.init
        if payload["ip"] != ctx.addresses[sender]:
            # The sender's self-assigned Host-ID disagrees with the ordering rule.
            self._note("init_aborted", reason="wrong self-assigned host id", founders=ctx.founders.members, by=sender)
            self._reset(now)
            return
        own = payload["partials"].get(self.identity)
        self.outbox.append(Work("verify_partial", 2))
        if own is not None and dpki.verify_partial(own, ctx.cert_messages[self.identity], self.group, ctx.share.commitments):
            ctx.own_partials.append(own)
        ca = payload["ca_partial"]
        if dpki.verify_partial(ca, ctx.ca_message, self.group, ctx.share.commitments):
            ctx.ca_partials.append(ca)

    def _maybe_complete_init(self, now: float) -> None:
        ctx = self.init
        if ctx is None or not ctx.finalized or len(ctx.own_partials) < self.k or len(ctx.ca_partials) < self.k:
            return
        sig = dpki.combine(ctx.own_partials[: self.k], self.k, self.group)
        ca_sig = dpki.combine(ctx.ca_partials[: self.k], self.k, self.group)
        self.outbox.append(Work("combine", 2 * self.k))
        ack, _ = ctx.acks[self.identity]
        start, end = ack["validity"]
        cert = dpki.OnlineJointCertificate(ctx.addresses[self.identity], self.keys.public, start, end, sig)
        if not dpki.verify_online_certificate(cert, ctx.share.public_key, self.group):
            self._note("init_aborted", reason="joint certificate failed", founders=ctx.founders.members)
            self._reset(now)
            return
        self._stop_timer("init")
        self.share = ctx.share
        self.network_pk = ctx.share.public_key
        self.ca_certificate = ca_sig
        self.online_cert = cert
        self.alloc = ctx.alloc
        self.founding_group = ctx.founders.members
        self.state = NodeState.CONFIGURED
        self.phase = None
        self.init = None
        self._note("configured", how="founder", founders=self.founding_group, ip=str(cert.ip), network_pk=self.network_pk)

    def _timeout_init(self, now):
        if self.phase == "init":
            self._note("init_aborted", reason="InitTimer", founders=self.init.founders.members if self.init else ())
            self._reset(now)

    # -- research of co-signers -------------------------------------------------------

    def start_config_request(self, welcome_ip: SiteLocalAddress, now: float) -> None:
        self.state = NodeState.IN_PROGRESS
        self.phase = "requesting"
        r_k = max(1, min(self.cfg.initial_r_k, self.k - 1))
        self.req = RequestContext(self._new_session(), link_local_from(welcome_ip.host_id), r_k)
        self._note("session", session=self.req.session)
        self._send_config_request()

    def _send_config_request(self) -> None:
        req = self.req
        req.replies = {}
        req.collecting = False
        self._send(Kind.CONFIG_REQUEST, {"session": req.session, "r_k": req.r_k, "src_ip": req.link_local}, None, req.r_k, about=self.identity)
        self._start_timer("config", self.cfg.timers.config)

    def _on_config_reply(self, msg, now, hops):
        req = self.req
        if self.phase != "requesting" or req is None or msg["session"] != req.session:
            return
        if not self._sigcheck(msg, now):
            return
        p = msg.payload
        req.replies[msg.src] = ServerReply(
            msg.src, p["hops"], p["network_pk"], tuple(p["commitments"]), p["subprefix"],
            p["active_subnet"], tuple(p["fat"]), p["ip"],
        )
        if self.cfg.early_exit and not req.collecting and self._agreeing_count() >= self.k:
            req.collecting = True
            self._start_timer("collect", self.cfg.reply_grace)

    def _agreeing_count(self) -> int:
        counts: dict[int, int] = {}
        for r in self.req.replies.values():
            counts[r.network_pk] = counts.get(r.network_pk, 0) + 1
        return max(counts.values(), default=0)

    def _timeout_collect(self, now):
        if self.phase == "requesting":
            self._stop_timer("config")
            self._begin_selection(now)

    def _timeout_config(self, now):
        if self.phase == "requesting":
            req = self.req
            if self._agreeing_count() >= self.k:
                self._stop_timer("collect")
                self._begin_selection(now)
            elif req.r_k < self.k - 1:
                req.r_k += 1
                self._note("retry", reason="hop escalation", r_k=req.r_k)
                self._send_config_request()
            else:
                self._note("retry", reason="too few servers")
                self._reset(now)
        elif self.phase == "refreshing":
            self._refresh_expired(now)

    # -- co-signer side of requesting ---------------------------------------------------

    def _serving(self) -> bool:
        return self.state is NodeState.CONFIGURED and self.phase != "refreshing" and self.service and self.alloc is not None

    def _count_session(self, requester: int, session: int) -> bool:
        sessions = self.rc_sessions.setdefault(requester, {})
        if session in sessions:
            return False
        sessions[session] = set()
        self.alloc.rc[requester] = self.alloc.rc.get(requester, 0) + 1
        return True

    def process_config_request(self, msg: Message, now: float, hops: int) -> None:
        if not self._serving() or msg.src == self.identity:
            return
        if msg.src in self.revocation.bl:
            self._note("discard", reason="blacklisted", kind=str(msg.kind), src=msg.src)
            return
        if not self._sigcheck(msg, now):
            return
        if msg["r_k"] >= self.k:
            self._note("discard", reason="hop limit", kind=str(msg.kind), src=msg.src)
            return
        session = msg["session"]
        answered = self.rc_sessions.get(msg.src, {}).get(session)
        if answered is None:
            if self.alloc.rc.get(msg.src, 0) >= self.cfg.rc_thresh:
                self._note("rc_refused", requester=msg.src)
                self.publish_accusation(msg.src, now)
                return
            self._count_session(msg.src, session)
            answered = self.rc_sessions[msg.src][session]
        elif msg["r_k"] in answered:
            return
        answered.add(msg["r_k"])
        self._send(
            Kind.CONFIG_REPLY,
            {
                "session": session,
                "network_pk": self.network_pk,
                "commitments": self.share.commitments,
                "subprefix": self.alloc.subprefix,
                "subnets": tuple(self.alloc.subnets),
                "active_subnet": self.alloc.active_subnet,
                "fat": tuple(self.alloc.fat_view()),
                "hops": hops,
                "ip": self.address,
                "online_cert": self.online_cert,
            },
            msg.src, self.cfg.network_hops, about=msg.src,
        )
        self._note("config_reply", requester=msg.src, session=session)

    _on_config_request = process_config_request

    # -- coalition selection ----------------------------------------------------------

    def _begin_selection(self, now: float) -> None:
        self.phase = "selecting"
        self._select(now)

    def _select(self, now: float) -> None:
        req = self.req
        exclude = self.malicious_servers | self.revocation.bl
        try:
            coalition = select_coalition(req.replies.values(), self.k, exclude)
            block, host = choose_free_host(coalition, self.layout, self.rng, self.cfg.joiner_block)
        except (InsufficientAgreement, NoCommonFreeHostId) as exc:
            self._note("retry", reason=type(exc).__name__)
            self._reset(now)
            return
        req.round += 1
        req.coalition = coalition
        req.agreed = coalition[0]
        req.ip = compose_address(coalition[0].subprefix, coalition[0].active_subnet, host)
        req.validity = (now, now + self.cfg.cert_lifetime)
        members = tuple((r.server, r.ip) for r in coalition)
        payload = {
            "session": req.session,
            "round": req.round,
            "coalition": members,
            "ip": req.ip,
            "validity": req.validity,
        }
        for r in coalition:
            self._send(Kind.CONFIG_CERT_REQUEST, payload, r.server, self.cfg.network_hops, about=self.identity)
        self._note("coalition", members=[r.server for r in coalition], ip=str(req.ip), round=req.round)
        self._start_timer("config_cert", self.cfg.timers.config_cert)

    def _on_config_cert_reply(self, msg, now, hops):
        req = self.req
        if self.phase != "selecting" or req is None or msg["session"] != req.session or msg["round"] != req.round:
            return
        if not self._sigcheck(msg, now):
            return
        cert = msg["cert"]
        pk = req.agreed.network_pk
        self.outbox.append(Work("verify_partial", self.k))
        ok = (
            cert.ip == req.ip
            and cert.public_key == self.keys.public
            and (cert.valid_from, cert.valid_until) == req.validity
            and dpki.verify_online_certificate(cert, pk, self.group)
        )
        share = dpki.KeyShare(
            self.identity, dpki.share_index(self.identity, self.group),
            msg["share_value"], req.agreed.commitments, self.group,
        )
        if not ok or not dpki.verify_share(share):
            self.malicious_servers.add(msg.src)
            self._note("bad_cert_reply", combiner=msg.src)
            self._stop_timer("config_cert")
            self._select(now)
            return
        self._stop_timer("config_cert")
        self.online_cert = cert
        self.share = share
        self.network_pk = pk
        alloc, bl = merge_snapshots(msg["states"], self.layout, self.cfg.pending_ttl)
        self.alloc = alloc
        self.revocation.bl |= bl
        self._note("cert_received", ip=str(cert.ip), session=req.session)
        self.register(now)

    def _on_config_alert(self, msg, now, hops):
        req = self.req
        if self.phase == "selecting" and req is not None and msg.get("requester") == self.identity:
            if msg["session"] != req.session or msg["round"] != req.round:
                return
            if msg.src not in {r.server for r in req.coalition} or not self._sigcheck(msg, now):
                return
            named = self._check_alert_evidence(msg, now)
            if named:
                self.malicious_servers |= named
            else:
                self.malicious_servers.add(msg.src)
            self._note("alert", named=sorted(named), by=msg.src)
            self._stop_timer("config_cert")
            self._select(now)
        elif self._serving() and self._sigcheck(msg, now):
            named = self._check_alert_evidence(msg, now)
            for culprit in sorted(named):
                dpki.accuse(self.revocation, msg.src, culprit, self.cfg.accusation_limit)

    def _check_alert_evidence(self, msg: Message, now: float) -> set[int]:
        """Accept only culprits the alert proves: a signed partial that fails
        verification, or enough signed accusations to blacklist the member."""
        named: set[int] = set()
        commitments = self.share.commitments if self.share else (self.req.agreed.commitments if self.req and self.req.agreed else None)
        for kind, culprit, proof in msg["evidence"]:
            if kind == "partial":
                if proof.kind is not Kind.PARTIAL or proof.src != culprit or not sig_check(proof, self.cfg.root_public, self.group):
                    continue
                p = proof.payload
                cert_msg = dpki.certificate_message(p["ip"], p["requester_pk"], *p["validity"], self.group)
                self.outbox.append(Work("verify_partial", 1))
                if not dpki.verify_partial(p["partial"], cert_msg, self.group, commitments):
                    named.add(culprit)
            elif kind == "blacklisted":
                accusers = {
                    a.src for a in proof
                    if a.kind is Kind.ACCUSATION and a["accused"] == culprit and sig_check(a, self.cfg.root_public, self.group)
                }
                if len(accusers) >= self.cfg.accusation_limit:
                    named.add(culprit)
        return named

    def _timeout_config_cert(self, now):
        if self.phase == "selecting":
            self._note("retry", reason="ConfigCertTimer")
            self._reset(now)

    # -- co-signer: certificate issuing -------------------------------------------------

    def process_cert_request(self, msg: Message, now: float) -> None:
        if not self._serving():
            return
        members = tuple(msg["coalition"])
        ids = [m for m, _ in members]
        if self.identity not in ids or msg.src in self.revocation.bl:
            return
        if not self._sigcheck(msg, now):
            return
        ip: SiteLocalAddress = msg["ip"]
        base = {"session": msg["session"], "round": msg["round"], "requester": msg.src, "ip": ip}
        if ip in self.alloc.rat:
            self._send(Kind.CONFIG_ERROR, {**base, "reason": "registered", "registered": False}, msg.src, self.cfg.network_hops, about=msg.src)
            return
        flagged = [m for m in ids if m in self.revocation.bl]
        if flagged:
            evidence = tuple(
                ("blacklisted", m, tuple(self.accusation_log.get(m, {}).values())) for m in flagged
            )
            alert = {**base, "malicious": tuple(flagged), "evidence": evidence}
            for target in [msg.src] + [m for m in ids if m != self.identity and m not in flagged]:
                self._send(Kind.CONFIG_ALERT, alert, target, self.cfg.network_hops, about=msg.src)
            return
        requester_pk = msg.cert.public_key
        validity = tuple(msg["validity"])
        cert_msg = dpki.certificate_message(ip, requester_pk, *validity, self.group)
        partial = self.make_partial(cert_msg)
        indices = [dpki.share_index(m, self.group) for m in ids]
        contribution = dpki.share_contribution(self.share, indices, dpki.share_index(msg.src, self.group))
        self.outbox.append(Work("partial_sign"))
        self.alloc.mark_pending(ip, msg.src, now)
        self._count_session(msg.src, msg["session"])
        combiner = min(members, key=lambda m: (m[1], m[0]))[0]
        payload = {
            **base,
            "validity": validity,
            "requester_pk": requester_pk,
            "coalition": members,
            "partial": partial,
            "contribution": contribution,
            "state": snapshot_of(self.alloc, self.revocation.bl),
        }
        self._send(Kind.PARTIAL, payload, combiner, self.cfg.network_hops, about=msg.src)

    _on_config_cert_request = lambda self, msg, now, hops: self.process_cert_request(msg, now)

    def make_partial(self, cert_msg: bytes) -> dpki.PartialSignature:
        return dpki.partial_sign(cert_msg, self.share)

    def _on_dpki_partial(self, msg, now, hops):
        if not self._serving() or not self._sigcheck(msg, now):
            return
        p = msg.payload
        key = (p["requester"], p["session"], p["round"])
        ctx = self.combining.get(key)
        if ctx is None:
            ctx = CombinerContext(p["requester"], p["session"], p["round"], p["ip"], tuple(p["validity"]), tuple(p["coalition"]))
            self.combining[key] = ctx
        ids = {m for m, _ in ctx.coalition}
        if ctx.done or msg.src not in ids or p["ip"] != ctx.ip:
            return
        ctx.partial_msgs[msg.src] = msg
        if len(ctx.partial_msgs) == len(ids):
            self._combine(ctx, now)

    _on_partial = _on_dpki_partial

    def culprits(self, ctx: CombinerContext, cert_msg: bytes) -> list[int]:
        self.outbox.append(Work("verify_partial", len(ctx.partial_msgs)))
        return sorted(
            m for m, pm in ctx.partial_msgs.items()
            if not dpki.verify_partial(pm["partial"], cert_msg, self.group, self.share.commitments)
        )

    def _combine(self, ctx: CombinerContext, now: float) -> None:
        ctx.done = True
        any_msg = next(iter(ctx.partial_msgs.values()))
        requester_pk = any_msg["requester_pk"]
        cert_msg = dpki.certificate_message(ctx.ip, requester_pk, *ctx.validity, self.group)
        base = {"session": ctx.session, "round": ctx.round, "requester": ctx.requester, "ip": ctx.ip}
        bad = self.culprits(ctx, cert_msg)
        if bad:
            evidence = tuple(("partial", m, ctx.partial_msgs[m]) for m in bad)
            alert = {**base, "malicious": tuple(bad), "evidence": evidence}
            others = [m for m, _ in ctx.coalition if m != self.identity and m not in bad]
            for target in [ctx.requester] + others:
                self._send(Kind.CONFIG_ALERT, alert, target, self.cfg.network_hops, about=ctx.requester)
            for m in bad:
                self.publish_accusation(m, now)
            return
        partials = [ctx.partial_msgs[m]["partial"] for m in sorted(ctx.partial_msgs)]
        sig = dpki.combine(partials, self.k, self.group)
        self.outbox.append(Work("combine", len(partials)))
        cert = dpki.OnlineJointCertificate(ctx.ip, requester_pk, ctx.validity[0], ctx.validity[1], sig)
        share_value = sum(pm["contribution"] for pm in ctx.partial_msgs.values()) % self.group.q
        states = tuple(ctx.partial_msgs[m]["state"] for m in sorted(ctx.partial_msgs))
        self._flood(Kind.CONFIG_ADVERT, base, about=ctx.requester)
        self._send(
            Kind.CONFIG_CERT_REPLY,
            {**base, "cert": cert, "share_value": share_value, "states": states},
            ctx.requester, self.cfg.network_hops, about=ctx.requester,
        )

    def _on_config_advert(self, msg, now, hops):
        if self.alloc is None or msg["requester"] == self.identity or not self._sigcheck(msg, now):
            return
        self._count_session(msg["requester"], msg["session"])
        self.alloc.mark_pending(msg["ip"], msg["requester"], now)

    # -- registration -----------------------------------------------------------------

    def register(self, now: float) -> None:
        self.phase = "registering"
        self._flood(Kind.CONFIG_REGISTER, {"cert": self.online_cert}, about=self.identity)
        self._start_timer("registration", self.cfg.timers.registration)

    def _lose_conflict(self, other: int, now: float, registered: bool = False) -> None:
        self._note("conflict_lost", ip=str(self.online_cert.ip), winner=other, registered=registered)
        self._stop_timer("registration")
        self.online_cert = None
        self._reset(now)

    def _on_config_register(self, msg, now, hops):
        cert: dpki.OnlineJointCertificate = msg["cert"]
        if msg.src == self.identity:
            return
        if self.phase == "registering" and self.online_cert and cert.ip == self.online_cert.ip:
            if not self._sigcheck(msg, now) or not self._valid_joint(cert, msg):
                return
            if self.identity < msg.src:
                self._send(Kind.CONFIG_ERROR, {"ip": cert.ip, "reason": "conflict", "registered": False}, msg.src, self.cfg.network_hops, about=msg.src)
            else:
                self._lose_conflict(msg.src, now)
            return
        self.process_registration(msg, now)

    def _valid_joint(self, cert: dpki.OnlineJointCertificate, msg: Message) -> bool:
        self.outbox.append(Work("verify_partial", self.k))
        return cert.public_key == msg.cert.public_key and dpki.verify_online_certificate(cert, self.network_pk, self.group)

    def process_registration(self, msg: Message, now: float) -> None:
        if self.alloc is None or self.network_pk is None:
            return
        if not self._sigcheck(msg, now):
            return
        cert: dpki.OnlineJointCertificate = msg["cert"]
        if not self._valid_joint(cert, msg):
            self._note("discard", reason="joint certificate", kind=str(msg.kind), src=msg.src)
            return
        if self.state is NodeState.CONFIGURED and self.address == cert.ip:
            self._send(Kind.CONFIG_ERROR, {"ip": cert.ip, "reason": "owned", "registered": True}, msg.src, self.cfg.network_hops, about=msg.src)
            return
        if cert.ip not in self.alloc.pat:
            self._note("discard", reason="not pending", kind=str(msg.kind), src=msg.src)
            return
        current = self.registrations.get(cert.ip)
        if current is None:
            self.registrations[cert.ip] = (msg.src, cert)
            self._start_timer(("reg", cert.ip), self.cfg.timers.registration)
        elif msg.src < current[0]:
            self.registrations[cert.ip] = (msg.src, cert)

    def _registration_expired(self, ip: SiteLocalAddress, now: float) -> None:
        entry = self.registrations.pop(ip, None)
        if entry is None or self.alloc is None:
            return
        lowest, cert = entry
        try:
            register_address(self.alloc, ip, lowest, cert.public_key, (cert.valid_from, cert.valid_until))
        except (UnknownPending, DuplicateRegistration):
            return
        self._note("rat_insert", ip=str(ip), owner=lowest)

    def _on_config_error(self, msg, now, hops):
        if not self._sigcheck(msg, now):
            return
        ip = msg["ip"]
        if self.phase == "registering" and self.online_cert and ip == self.online_cert.ip:
            if msg["registered"] or self.identity > msg.src:
                self._lose_conflict(msg.src, now, registered=bool(msg["registered"]))
            else:
                self._send(Kind.CONFIG_ERROR, {"ip": ip, "reason": "conflict", "registered": False}, msg.src, self.cfg.network_hops, about=msg.src)
        elif self.phase == "selecting" and self.req and msg.get("session") == self.req.session and msg.get("round") == self.req.round:
            # The requested address is already registered: stop offering it.
            block = self.layout.block_of(ip.host_id)
            for server, r in list(self.req.replies.items()):
                fat = list(r.fat)
                fat[block] = max(fat[block], ip.host_id + 1)
                self.req.replies[server] = ServerReply(r.server, r.hops, r.network_pk, r.commitments, r.subprefix, r.active_subnet, tuple(fat), r.ip)
            self._stop_timer("config_cert")
            self._select(now)

    def _timeout_registration(self, now):
        if self.phase != "registering":
            return
        cert = self.online_cert
        self.alloc.self_assign(cert.ip, RegisteredEntry(self.identity, cert.public_key, cert.valid_from, cert.valid_until))
        self.state = NodeState.CONFIGURED
        self.phase = None
        self.req = None
        self._note("configured", how="join", ip=str(cert.ip), network_pk=self.network_pk)

    # -- revocation -------------------------------------------------------------------

    def publish_accusation(self, accused: int, now: float) -> None:
        if accused in self.accusation_log.get(accused, {}) or self.identity in self.accusation_log.get(accused, {}):
            return
        msg = self._flood(Kind.ACCUSATION, {"accused": accused}, about=accused)
        self.accusation_log.setdefault(accused, {})[self.identity] = msg
        dpki.accuse(self.revocation, self.identity, accused, self.cfg.accusation_limit)
        self._note("accuse", accused=accused)

    def _on_dpki_accusation(self, msg, now, hops):
        if self.alloc is None or not self._sigcheck(msg, now):
            return
        accused = msg["accused"]
        self.accusation_log.setdefault(accused, {})[msg.src] = msg
        dpki.accuse(self.revocation, msg.src, accused, self.cfg.accusation_limit)

    _on_accusation = _on_dpki_accusation

    # -- state refresh after rejoin ------------------------------------------------------

    def _send_refresh_request(self) -> None:
        self.refresh["replies"] = {}
        self.refresh["collecting"] = False
        self._send(Kind.STATE_REQUEST, {"nonce": self.refresh["nonce"]}, None, self.k - 1, about=self.identity)
        self._start_timer("config", self.cfg.timers.config)

    def _on_state_request(self, msg, now, hops):
        if not self._serving() or not self._sigcheck(msg, now):
            return
        self._send(
            Kind.STATE_REPLY,
            {"nonce": msg["nonce"], "network_pk": self.network_pk, "state": snapshot_of(self.alloc, self.revocation.bl)},
            msg.src, self.cfg.network_hops, about=msg.src,
        )

    def _on_state_reply(self, msg, now, hops):
        if self.phase != "refreshing" or msg["nonce"] != self.refresh["nonce"]:
            return
        if msg["network_pk"] != self.network_pk or not self._sigcheck(msg, now):
            return
        self.refresh["replies"][msg.src] = msg["state"]
        if self.cfg.early_exit and not self.refresh["collecting"] and len(self.refresh["replies"]) >= self.k:
            self.refresh["collecting"] = True
            self._start_timer("refresh_collect", self.cfg.reply_grace)

    def _timeout_refresh_collect(self, now):
        if self.phase == "refreshing":
            self._stop_timer("config")
            self._refresh_expired(now)

    def _refresh_expired(self, now: float) -> None:
        replies = self.refresh["replies"]
        if len(replies) < self.k:
            self._note("refresh_incomplete", got=len(replies))
            self._send_refresh_request()
            return
        alloc, bl = merge_snapshots([replies[s] for s in sorted(replies)], self.layout, self.cfg.pending_ttl)
        cert = self.online_cert
        alloc.self_assign(cert.ip, RegisteredEntry(self.identity, cert.public_key, cert.valid_from, cert.valid_until))
        self.alloc = alloc
        self.revocation.bl |= bl
        self.phase = None
        self.refresh = None
        self._note("refreshed", sources=len(replies))

    # -- data plane -------------------------------------------------------------------

    def send_data(self, body: bytes = b"") -> Message | None:
        if self.online_cert is None:
            return None
        return self._send(Kind.DATA, {"ip": self.online_cert.ip, "cert": self.online_cert, "body": body}, None, 1)

    def accepts_data(self, msg: Message, now: float) -> bool:
        """Spoofing check: the claimed source address must be bound to the
        signing key by a verifying joint certificate matching our RAT."""
        cert = msg.get("cert")
        if self.network_pk is None or not isinstance(cert, dpki.OnlineJointCertificate):
            return False
        if cert.ip != msg.get("ip") or not cert.valid_at(now) or cert.public_key in self.revocation.rcl:
            return False
        if msg.signature is None or not dpki.verify(self.group, cert.public_key, msg.signed_bytes, msg.signature):
            return False
        entry = self.alloc.rat.get(cert.ip) if self.alloc else None
        if entry is not None and entry.public_key != cert.public_key:
            return False
        return dpki.verify_online_certificate(cert, self.network_pk, self.group)

    def _on_data(self, msg, now, hops):
        if self.alloc is None:
            return
        self.outbox.append(Work("verify_partial", self.k))
        accepted = self.accepts_data(msg, now)
        self._note("data_accept" if accepted else "data_reject", src=msg.src, ip=str(msg.get("ip")))


def ca_record_message(network_pk: int, subprefix: int, subnet: int, group: dpki.GroupParams) -> bytes:
    return dpki.encode_fields(b"ca-record", group.encode(network_pk), subprefix.to_bytes(5, "big"), subnet.to_bytes(2, "big"))
