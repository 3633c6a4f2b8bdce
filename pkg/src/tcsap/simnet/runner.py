"""Drives node machines over a simulated radio network."""

from __future__ import annotations

import hashlib
import math
import random
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .. import dpki
from ..addressing import AllocationState, allocate_lowest_free, register_address
from ..messages import CONTROL_KINDS, Kind, Message
from ..node import NodeMachine, NodeState, Note, ProtocolConfig, Send, StartTimer, StopTimer, Work
from .adversary import Adversary, inject_adversary
from .events import EventQueue
from .metrics import Metrics, NodeSummary, collect
from .mobility import RandomWaypoint
from .topology import Topology, flood_tree, next_hop


class SimulationError(RuntimeError):
    pass


def stream(seed: int, *label) -> random.Random:
    """An independent, reproducible random stream per purpose."""
    digest = hashlib.sha256(repr((seed,) + label).encode()).digest()
    return random.Random(int.from_bytes(digest[:16], "big"))


@dataclass
class Placement:
    identity: int
    position: tuple[float, float]
    start: float
    role: str = "honest"
    preconfigured: bool = False
    relay_only: bool = False
    spec: object = None


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6f}"
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt(x) for x in v)
    return str(v)


@dataclass
class _Flood:
    msg: Message
    depth: dict
    children: dict


def layout_nodes(scenario, seed: int) -> list[Placement]:
    """Identities, positions and start times for every node of the scenario."""
    ids_rng = stream(seed, "ids")
    place_rng = stream(seed, "placement")
    start_rng = stream(seed, "start")
    width, height = scenario.area
    reserved = {i for g in scenario.node_groups for i in (g.ids or ())}
    reserved |= {j.id for j in scenario.joins} | {a.id for a in scenario.adversaries if a.id is not None}

    def fresh_id() -> int:
        while True:
            i = ids_rng.getrandbits(32)
            if i not in reserved:
                reserved.add(i)
                return i

    def random_point():
        return (place_rng.uniform(0, width), place_rng.uniform(0, height))

    out: list[Placement] = []
    for g in scenario.node_groups:
        n = scenario.group_count(g)
        ids = list(g.ids) if g.ids is not None else [fresh_id() for _ in range(n)]
        cx, cy = g.center if g.center is not None else (width / 2, height / 2)
        for i, ident in enumerate(ids[:n]):
            if g.placement == "explicit":
                pos = g.positions[i]
            elif g.placement == "cluster":
                r = g.radius * math.sqrt(place_rng.random())
                a = place_rng.uniform(0, 2 * math.pi)
                pos = (min(max(cx + r * math.cos(a), 0.0), width), min(max(cy + r * math.sin(a), 0.0), height))
            else:
                pos = random_point()
            start = g.start + g.spacing * i + (start_rng.uniform(0, g.jitter) if g.jitter else 0.0)
            out.append(Placement(ident, pos, start, preconfigured=g.preconfigured, relay_only=g.relay_only))
    for j in scenario.joins:
        out.append(Placement(j.id, j.position or random_point(), j.time))
    for a in scenario.adversaries:
        ident = a.id if a.id is not None else fresh_id()
        out.append(Placement(ident, a.position or random_point(), a.time, role=a.role,
                             preconfigured=a.role == "malicious-cosigner" and scenario.bootstrap == "preconfigured",
                             spec=a))
    return out


def protocol_config(scenario, root_public: int) -> ProtocolConfig:
    return ProtocolConfig(
        k=scenario.k,
        rc_thresh=scenario.rc_thresh,
        m_blocks=scenario.m_blocks,
        timers=scenario.timers,
        initial_r_k=scenario.initial_r_k,
        reply_grace=scenario.reply_grace,
        early_exit=scenario.early_exit,
        cert_lifetime=scenario.cert_lifetime,
        pending_ttl=scenario.pending_ttl,
        accusation_threshold=scenario.accusation_threshold,
        group=dpki.TEST_GROUP if scenario.group == "test" else dpki.SIM_GROUP,
        root_public=root_public,
        joiner_block=scenario.joiner_block,
    )


class Simulation:
    def __init__(self, scenario, seed: int, keep_trace: bool = True):
        self.scenario = scenario
        self.seed = seed
        self.keep_trace = keep_trace
        self.trace: list[str] = []
        self.queue = EventQueue()
        self.placements = layout_nodes(scenario, seed)
        self.group = dpki.TEST_GROUP if scenario.group == "test" else dpki.SIM_GROUP
        self.root = dpki.keypair_from_seed(self.group, b"root/%d" % seed)
        self.config = protocol_config(scenario, self.root.public)
        self.delays = scenario.delays
        self.link_rng = stream(seed, "link")

        self.slot_of = {p.identity: i for i, p in enumerate(self.placements)}
        self.ids = [p.identity for p in self.placements]
        positions = np.array([p.position for p in self.placements], dtype=float).reshape(-1, 2)
        self.topology = Topology(positions, scenario.radio_range, scenario.area, list(self.ids),
                                 np.zeros(len(self.placements), dtype=bool))
        self.mobility = None
        if scenario.mobility.moving and len(self.placements):
            self.mobility = RandomWaypoint(scenario.mobility, positions, scenario.area,
                                           np.random.default_rng(stream(seed, "mobility").getrandbits(64)))

        self.machines: dict[int, NodeMachine] = {}
        self.roles: dict[int, str] = {}
        for p in self.placements:
            if p.relay_only:
                continue
            keys = dpki.keypair_from_seed(self.group, b"node/%d/%d" % (seed, p.identity))
            cert = dpki.issue_offline_certificate(self.root, p.identity, keys.public, self.group)
            rng = stream(seed, "node", p.identity)
            if p.spec is not None:
                inject_adversary(p.spec, self.machines, p.identity, keys, cert, self.config, rng)
            else:
                self.machines[p.identity] = NodeMachine(p.identity, keys, cert, self.config, rng)
            self.roles[p.identity] = p.role
        self.cpu_free = [0.0] * len(self.placements)
        self.busy = [0.0] * len(self.placements)
        self.notes: list[tuple] = []
        self.by_kind: Counter = Counter()
        self.about: Counter = Counter()
        self.control = 0
        self.started: dict[int, float] = {}
        if scenario.bootstrap == "preconfigured":
            self._preconfigure()

    # -- setup -------------------------------------------------------------------------

    def _preconfigure(self) -> None:
        members = sorted(p.identity for p in self.placements if p.preconfigured and not p.relay_only)
        if not members:
            return
        k = self.scenario.k
        if len(members) < k:
            raise SimulationError(f"{len(members)} preconfigured nodes, need at least k={k}")
        rng = stream(self.seed, "bootstrap")
        shares, pk = dpki.jvrss_setup(members[:k], dpki.ThresholdParams(k, k), self.group, rng)
        coalition = [shares[m] for m in members[:k]]
        for m in members[k:]:
            shares[m] = dpki.issue_share(coalition, m)
        layout = self.config.layout
        alloc = AllocationState.fresh(layout, rng.randrange(1 << 38), rng.randrange(1 << 16),
                                      pending_ttl=self.config.pending_ttl)
        certs = {}
        for m in members:
            block, host = allocate_lowest_free(alloc, layout, rng)
            addr = alloc.address(host)
            node = self.machines[m]
            validity = (0.0, self.config.cert_lifetime)
            alloc.mark_pending(addr, m, 0.0)
            register_address(alloc, addr, m, node.keys.public, validity)
            certs[m] = dpki.issue_online_certificate((addr, node.keys.public, validity), coalition, k)
        for m in members:
            node = self.machines[m]
            node.share = shares[m]
            node.network_pk = pk
            node.online_cert = certs[m]
            node.alloc = alloc.copy()
            node.founding_group = tuple(members[:k])
            node.state = NodeState.CONFIGURED

    # -- trace -------------------------------------------------------------------------

    def _log(self, t: float, slot_or_id, event: str, detail: str = "") -> None:
        if self.keep_trace:
            self.trace.append(f"{t:.6f}\t{slot_or_id}\t{event}\t{detail}")

    # -- main loop -------------------------------------------------------------------------

    def run(self) -> tuple[Metrics, list[str]]:
        sc = self.scenario
        q = self.queue
        for slot, p in enumerate(self.placements):
            if p.start <= sc.t_end:
                q.schedule(p.start, "start", slot)
        for d in sc.departures:
            slot = self.slot_of[d.id]
            q.schedule(d.leave, "leave", slot)
            if d.rejoin is not None:
                q.schedule(d.rejoin, "rejoin", slot)
        if self.mobility is not None:
            q.schedule(sc.mobility.step, "move")
        while len(q) and q.peek_time() <= sc.t_end:
            t, kind, args = q.pop()
            getattr(self, "_ev_" + kind)(t, *args)
        return self._metrics(), self.trace

    def _ev_start(self, t, slot):
        p = self.placements[slot]
        self.topology.set_active(slot, True)
        self._log(t, p.identity, "start", p.role if not p.relay_only else "relay")
        if p.relay_only:
            return
        m = self.machines[p.identity]
        if m.state is NodeState.UNCONFIGURED:
            self.started[p.identity] = t
        if isinstance(m, Adversary) and type(m).act is not Adversary.act:
            q = self.queue
            q.schedule(t, "act", slot)
        if m.state is NodeState.UNCONFIGURED:
            self._react(t, slot, "boot", lambda: m.boot(t))

    def _ev_act(self, t, slot):
        m = self.machines[self.ids[slot]]
        if not m.active:
            return
        self._react(t, slot, "act", lambda: m.act(t, self.machines))
        if m.interval:
            self.queue.schedule(t + m.interval, "act", slot)

    def _ev_leave(self, t, slot):
        m = self.machines.get(self.ids[slot])
        self.topology.set_active(slot, False)
        self._log(t, self.ids[slot], "leave")
        if m is not None:
            self._react(t, slot, "leave", lambda: m.leave(t), force=True)

    def _ev_rejoin(self, t, slot):
        m = self.machines.get(self.ids[slot])
        self.topology.set_active(slot, True)
        self._log(t, self.ids[slot], "rejoin")
        if m is not None:
            self._react(t, slot, "rejoin", lambda: m.rejoin(t), force=True)

    def _ev_move(self, t):
        step = self.scenario.mobility.step
        self.topology.positions = self.mobility.step(self.topology.positions, step)
        self.topology.refresh()
        self.queue.schedule(t + step, "move")

    def _ev_timer(self, t, slot, name, gen):
        m = self.machines[self.ids[slot]]
        if not m.timer_live(name, gen):
            return
        if self.cpu_free[slot] > t:
            self.queue.schedule(self.cpu_free[slot], "timer", slot, name, gen)
            return
        self._react(t, slot, f"timer:{_fmt(name)}", lambda: m.on_timer(name, t))

    def _ev_recv(self, t, slot, msg, hops):
        m = self.machines[self.ids[slot]]
        if not m.active:
            return
        if self.cpu_free[slot] > t:
            self.queue.schedule(self.cpu_free[slot], "recv", slot, msg, hops)
            return
        self._react(t, slot, f"recv:{msg.kind}", lambda: m.on_message(msg, t, hops))

    # -- reacting to a machine's outbox ---------------------------------------------------

    def _react(self, t, slot, label, fn, force=False):
        m = self.machines[self.ids[slot]]
        fn()
        out = m.drain()
        cost = sum(self.delays.cost(w.op, w.count) for w in out if isinstance(w, Work))
        done = max(t, self.cpu_free[slot]) + cost if not force else t
        self.cpu_free[slot] = max(self.cpu_free[slot], done)
        sends = sum(isinstance(o, Send) for o in out)
        self._log(t, m.identity, "handle", f"state={m.state} event={label} emits={sends}")
        for o in out:
            if isinstance(o, Send):
                # sends leave once the CPU work is done; logging them now would run ahead of the clock
                self.queue.schedule(done, "send", slot, o)
            elif isinstance(o, StartTimer):
                self.queue.schedule(done + o.delay, "timer", slot, o.name, o.generation)
            elif isinstance(o, Note):
                self.queue.schedule(done, "note", m.identity, o)
            elif isinstance(o, StopTimer):
                pass

    def _ev_note(self, t, identity, note: Note):
        self.notes.append((t, identity, note.event, note.data))
        detail = " ".join(f"{k}={_fmt(v)}" for k, v in sorted(note.data.items()))
        self._log(t, identity, "note", f"{note.event} {detail}".rstrip())

    def _ev_send(self, t, slot, send: Send) -> None:
        msg = send.msg
        if send.dst is None:
            if send.hop_limit <= 0:
                return
            self.queue.schedule(t, "flood", slot, msg, send.hop_limit)
            return
        dst = self.slot_of.get(send.dst)
        if dst is None or self.placements[dst].relay_only:
            self._log(t, self.ids[slot], "drop", f"{msg.brief()} reason=unknown-destination")
            return
        if dst == slot:
            self._log(t, self.ids[slot], "loopback", msg.brief())
            self.queue.schedule(t, "recv", slot, msg, 0)
            return
        self.queue.schedule(t, "utx", slot, msg, dst, 0)

    # -- radio ------------------------------------------------------------------------------

    def _transmit(self, t, slot) -> float | None:
        """Reserve the channel around ``slot``.  Returns the end of the
        transmission, or None when the channel is busy (caller retries)."""
        if self.busy[slot] > t:
            return None
        end = t + self.delays.link(self.link_rng)
        self.busy[slot] = end
        for v in self.topology.neighbors(slot):
            self.busy[v] = max(self.busy[v], end)
        return end

    def _ev_flood(self, t, slot, msg, hop_limit):
        if not self.topology.active[slot]:
            return
        if msg.kind is Kind.CONFIG_REQUEST:
            # relays refuse to carry a Config_Request past k-1 hops
            hop_limit = min(hop_limit, self.scenario.k - 1)
        depth, children = flood_tree(self.topology, slot, hop_limit)
        if slot in children:
            self.queue.schedule(t, "tx", slot, _Flood(msg, depth, children))

    def _ev_tx(self, t, slot, fl: _Flood):
        if not self.topology.active[slot]:
            return
        end = self._transmit(t, slot)
        if end is None:
            self.queue.schedule(self.busy[slot], "tx", slot, fl)
            return
        for c in fl.children.get(slot, ()):
            if not self.topology.linked(slot, c) or self.delays.lost(self.link_rng):
                self._log(end, self.ids[c], "drop", f"{fl.msg.brief()} reason=link")
                continue
            self.queue.schedule(end, "arrive", c, fl)

    def _ev_arrive(self, t, slot, fl: _Flood):
        if not self.topology.active[slot]:
            return
        hops = fl.depth[slot]
        self._delivered(t, slot, fl.msg, hops)
        if self.ids[slot] in self.machines:
            self.queue.schedule(t, "recv", slot, fl.msg, hops)
        if slot in fl.children:
            self._log(t, self.ids[slot], "forward", f"{fl.msg.brief()} depth={hops}")
            self.queue.schedule(t, "tx", slot, fl)

    def _ev_utx(self, t, slot, msg, dst, hops):
        if not self.topology.active[slot]:
            return
        nh = next_hop(self.topology, slot, dst)
        if nh is None or hops >= self.config.network_hops:
            self._log(t, self.ids[slot], "drop", f"{msg.brief()} reason=no-route")
            return
        end = self._transmit(t, slot)
        if end is None:
            self.queue.schedule(self.busy[slot], "utx", slot, msg, dst, hops)
            return
        if self.delays.lost(self.link_rng):
            self._log(end, self.ids[nh], "drop", f"{msg.brief()} reason=link")
            return
        self.queue.schedule(end, "uarrive", nh, msg, dst, hops + 1)

    def _ev_uarrive(self, t, slot, msg, dst, hops):
        if not self.topology.active[slot]:
            return
        self._delivered(t, slot, msg, hops)
        if slot == dst:
            self.queue.schedule(t, "recv", slot, msg, hops)
        else:
            self.queue.schedule(t, "utx", slot, msg, dst, hops)

    def _delivered(self, t, slot, msg, hops) -> None:
        if msg.kind in CONTROL_KINDS:
            self.control += 1
            self.by_kind[str(msg.kind)] += 1
            if msg.about is not None:
                self.about[msg.about] += 1
        self._log(t, self.ids[slot], "deliver", f"{msg.brief()} hops={hops}")

    # -- results --------------------------------------------------------------------------

    def _metrics(self) -> Metrics:
        init_delay, joins, failed, retries = collect(self.notes, self.about, self.started, self.roles)
        summaries = {}
        for ident, m in sorted(self.machines.items()):
            rat = tuple(sorted((str(a), e.identity) for a, e in m.alloc.rat.items())) if m.alloc else ()
            summaries[ident] = NodeSummary(
                ident, self.roles[ident], str(m.state), str(m.address) if m.address else None,
                m.network_pk if m.state is NodeState.CONFIGURED else None, rat,
            )
        return Metrics(
            init_delay=init_delay,
            joins=joins,
            failed_joins=failed,
            control_msg_count=self.control,
            by_kind=self.by_kind,
            retry_count=retries,
            notes=Counter(e for _, _, e, _ in self.notes),
            nodes=summaries,
        )


def run_scenario(scenario, seed: int, keep_trace: bool = True) -> tuple[Metrics, list[str]]:
    """One deterministic run: same (scenario, seed), same trace and metrics."""
    return Simulation(scenario, seed, keep_trace).run()
