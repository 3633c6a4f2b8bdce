"""Dishonest actors.  Each one is a node machine with some behavior swapped out."""

from __future__ import annotations

import dataclasses
import random

from .. import dpki
from ..messages import Kind, Message, sign_message
from ..node import NodeMachine, NodeState, Send, Work


def forge(kind: Kind, src: int, payload: dict, cert, key: dpki.KeyPair, group, seq: int, dst=None) -> Message:
    """A message claiming ``src``, carrying ``cert`` and signed with ``key``."""
    msg = Message(kind, src, dst, src, (src << 24) | seq, payload, cert)
    return sign_message(msg, key, group)


class Adversary(NodeMachine):
    role = "adversary"
    # seconds between act() calls; None acts once
    interval: float | None = None

    def __init__(self, *args, params: dict | None = None, **kw):
        super().__init__(*args, **kw)
        self.params = dict(params or {})
        if "interval" in self.params:
            self.interval = float(self.params["interval"])

    def act(self, now: float, machines: dict) -> None:
        pass


class ExhaustionRequester(Adversary):
    """Runs complete configuration attempts but never registers, burning a
    fresh address each time.  ``hop_limit`` widens its Config_Request flood
    beyond what the payload declares."""

    role = "exhaustion-requester"

    def _send_config_request(self) -> None:
        req = self.req
        req.replies = {}
        req.collecting = False
        hop_limit = int(self.params.get("hop_limit", req.r_k))
        r_k = int(self.params.get("declared_r_k", req.r_k))
        self._send(Kind.CONFIG_REQUEST, {"session": req.session, "r_k": r_k, "src_ip": req.link_local}, None, hop_limit, about=self.identity)
        self._start_timer("config", self.cfg.timers.config)

    def register(self, now: float) -> None:
        self._note("attack_attempt", ip=str(self.online_cert.ip))
        self.online_cert = None
        self._reset(now)


class SpoofingSender(Adversary):
    """Sends data under a victim's address, alternating between the victim's
    real joint certificate (signed with the wrong key) and a forged one."""

    role = "spoofing-sender"
    interval = 1.0

    def boot(self, now: float) -> None:
        pass

    def act(self, now: float, machines: dict) -> None:
        victim = machines.get(self.params.get("victim"))
        if victim is None:
            victims = [m for m in machines.values() if m.online_cert is not None and not isinstance(m, Adversary)]
            victim = min(victims, key=lambda m: m.identity) if victims else None
        if victim is None or victim.online_cert is None:
            return
        self._seq += 1
        target = victim.online_cert
        if self._seq % 2:
            cert = target
            mode = "stolen"
        else:
            rng = random.Random(self._seq)
            fake, _ = dpki.jvrss_setup([1, 2, 3, 4][: self.k], dpki.ThresholdParams(self.k, self.k), self.group, rng)
            cert = dpki.issue_online_certificate(
                (target.ip, self.keys.public, (target.valid_from, target.valid_until)), list(fake.values()), self.k
            )
            mode = "forged"
        msg = Message(Kind.DATA, self.identity, None, None, (self.identity << 24) | self._seq,
                      {"ip": target.ip, "cert": cert, "body": b"spoof"}, self.offline_cert)
        sign_message(msg, self.keys, self.group)
        self.outbox.append(Work("sign"))
        self.outbox.append(Send(msg, None, 1))
        self._note("spoof_sent", mode=mode, ip=str(target.ip))


class SybilRequester(Adversary):
    """Asks for addresses under made-up identities whose off-line
    certificates it signed itself."""

    role = "sybil-requester"
    interval = 1.0

    def boot(self, now: float) -> None:
        pass

    def act(self, now: float, machines: dict) -> None:
        self._seq += 1
        fake_id = self.rng.getrandbits(32) | (1 << 32)
        key = dpki.keypair_from_seed(self.group, b"sybil/%d" % fake_id)
        cert = dpki.issue_offline_certificate(key, fake_id, key.public, self.group)
        msg = forge(Kind.CONFIG_REQUEST, fake_id, {"session": 1, "r_k": 1, "src_ip": None}, cert, key, self.group, self._seq)
        self.outbox.append(Work("sign"))
        self.outbox.append(Send(msg, None, 1))
        self._note("sybil_sent", fake=fake_id)


class MaliciousCosigner(Adversary):
    """A configured member that signs with a corrupted share and, when it is
    the combiner, skips verification of the partials."""

    role = "malicious-cosigner"

    def make_partial(self, cert_msg: bytes) -> dpki.PartialSignature:
        bad = dataclasses.replace(self.share, value=(self.share.value + 1) % self.group.q)
        return dpki.partial_sign(cert_msg, bad)

    def culprits(self, ctx, cert_msg: bytes) -> list[int]:
        return []


class DisturbingInitializer(Adversary):
    """Advertises an initialization under a forged, very low identity."""

    role = "disturbing-initializer"

    def boot(self, now: float) -> None:
        pass

    def act(self, now: float, machines: dict) -> None:
        forged = int(self.params.get("forged_id", 0))
        self._seq += 1
        msg = forge(Kind.INIT_ADVERT, forged, {"founders": (forged,)}, self.offline_cert, self.keys, self.group, self._seq)
        self.outbox.append(Work("sign"))
        self.outbox.append(Send(msg, None, self.cfg.network_hops))
        self._note("forged_advert", forged=forged)


ROLE_CLASSES = {
    cls.role: cls
    for cls in (ExhaustionRequester, SpoofingSender, SybilRequester, MaliciousCosigner, DisturbingInitializer)
}


def inject_adversary(spec, machines: dict, identity: int, keys, offline_cert, config, rng) -> Adversary:
    """Build the actor for ``spec`` and add it to ``machines``."""
    cls = ROLE_CLASSES[spec.role]
    actor = cls(identity, keys, offline_cert, config, rng, params=spec.params)
    machines[identity] = actor
    return actor


def is_honest(machine: NodeMachine) -> bool:
    return not isinstance(machine, Adversary)


__all__ = [
    "Adversary",
    "DisturbingInitializer",
    "ExhaustionRequester",
    "MaliciousCosigner",
    "NodeState",
    "SpoofingSender",
    "SybilRequester",
    "forge",
    "inject_adversary",
    "is_honest",
]
