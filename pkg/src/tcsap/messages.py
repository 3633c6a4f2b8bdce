"""Protocol messages and their canonical byte encoding."""

from __future__ import annotations

import dataclasses
import enum
import struct
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any

from . import dpki


class Kind(enum.Enum):
    DISCOVERY_REQUEST = "Discovery_Request"
    DISCOVERY_REPLY = "Discovery_Reply"
    DISCOVERY_WELCOME = "Discovery_Welcome"
    INIT_START = "Init_Start"
    INIT_ACK = "Init_Ack"
    INIT_ADVERT = "Init_Advert"
    INIT_OPPOS = "Init_Oppos"
    CONFIG_REQUEST = "Config_Request"
    CONFIG_REPLY = "Config_Reply"
    CONFIG_CERT_REQUEST = "Config_Cert_Request"
    CONFIG_CERT_REPLY = "Config_Cert_Reply"
    CONFIG_ADVERT = "Config_Advert"
    CONFIG_ALERT = "Config_Alert"
    CONFIG_REGISTER = "Config_Register"
    CONFIG_ERROR = "Config_Error"
    # DPKI and maintenance traffic that the auto-configuration messages rely on.
    INIT_SIGN = "Dpki_Init_Sign"
    PARTIAL = "Dpki_Partial"
    ACCUSATION = "Dpki_Accusation"
    STATE_REQUEST = "State_Request"
    STATE_REPLY = "State_Reply"
    DATA = "Data"

    def __str__(self) -> str:
        return self.value


CONTROL_KINDS = frozenset(k for k in Kind if k is not Kind.DATA)


def encode_value(v: Any) -> bytes:
    """Type-tagged, length-prefixed, big-endian encoding.

    Dataclasses are encoded field by field in declaration order; mappings and
    sets are sorted by the encoding of their keys so the output never depends
    on insertion order.
    """
    if v is None:
        return b"N"
    if isinstance(v, bool):
        return b"B" + (b"\x01" if v else b"\x00")
    if isinstance(v, enum.Enum):
        return b"E" + dpki.encode_fields(str(v.value).encode())
    if isinstance(v, int):
        sign = b"-" if v < 0 else b"+"
        return b"I" + sign + dpki.encode_fields(abs(v).to_bytes(max(1, (abs(v).bit_length() + 7) // 8), "big"))
    if isinstance(v, float):
        return b"F" + struct.pack(">d", v)
    if isinstance(v, bytes):
        return b"Y" + dpki.encode_fields(v)
    if isinstance(v, str):
        return b"S" + dpki.encode_fields(v.encode())
    if isinstance(v, dpki.GroupParams):
        return b"G" + dpki.encode_fields(encode_value(v.p))
    if dataclasses.is_dataclass(v) and not isinstance(v, type):
        parts = [encode_value(getattr(v, f.name)) for f in dataclasses.fields(v)]
        return b"D" + dpki.encode_fields(type(v).__name__.encode(), *parts)
    if isinstance(v, dict):
        items = sorted((encode_value(k), encode_value(x)) for k, x in v.items())
        return b"M" + dpki.encode_fields(*(a + b for a, b in items))
    if isinstance(v, (set, frozenset)):
        return b"T" + dpki.encode_fields(*sorted(encode_value(x) for x in v))
    if isinstance(v, (list, tuple)):
        return b"L" + dpki.encode_fields(*(encode_value(x) for x in v))
    if hasattr(v, "packed"):
        return b"A" + dpki.encode_fields(v.packed)
    raise TypeError(f"cannot encode {type(v).__name__}")


@dataclass(eq=False)
class Message:
    kind: Kind
    src: int
    dst: int | None
    about: int | None
    msg_id: int
    payload: dict = field(default_factory=dict)
    cert: dpki.OfflineCertificate | None = None
    signature: dpki.Signature | None = None

    @cached_property
    def signed_bytes(self) -> bytes:
        return dpki.encode_fields(
            encode_value(self.kind),
            encode_value(self.src),
            encode_value(self.dst),
            encode_value(self.about),
            encode_value(self.msg_id),
            encode_value(self.payload),
        )

    def __getitem__(self, key):
        return self.payload[key]

    def get(self, key, default=None):
        return self.payload.get(key, default)

    def brief(self) -> str:
        dst = "*" if self.dst is None else self.dst
        return f"{self.kind} {self.src}->{dst} id={self.msg_id:x}"


def sign_message(msg: Message, key: dpki.KeyPair, group: dpki.GroupParams) -> Message:
    msg.signature = dpki.sign(group, key, msg.signed_bytes)
    return msg


def sig_check(msg: Message, root_public: int, group: dpki.GroupParams, now: float | None = None) -> bool:
    """Off-line certificate must chain to the root and name the sender; the
    message signature must verify under the certified key."""
    cert = msg.cert
    if cert is None or msg.signature is None or cert.subject != msg.src:
        return False
    if not dpki.verify_offline_certificate(cert, root_public, group, now):
        return False
    return dpki.verify(group, cert.public_key, msg.signed_bytes, msg.signature)
