"""Message envelopes, per-party views and the round transcript.

Every protocol message is recorded once as a :class:`Message` carrying both
its wire payload (``bytes``) and the decoded value. A party's view is the
set of messages it sent or received. The ideal 2PC functionality appears as
the pseudo-party ``F2PC``; its internals are never logged.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Any, Iterable, Iterator

import numpy as np

from . import ahe

AS = "AS"
CSP = "CSP"
F2PC = "F2PC"

_MATRIX = struct.Struct("<8sQQ")
_MATRIX_MAGIC = b"SEFLMAT1"
_CLIENT = struct.Struct("<8sQQQQId")
_CLIENT_MAGIC = b"SEFLCU01"
_AS_IN = struct.Struct("<8sQII")
_AS_IN_MAGIC = b"SEFLAI01"
_CSP_IN = struct.Struct("<8sII")
_CSP_IN_MAGIC = b"SEFLCI01"


def client_role(client_id: int) -> str:
    return f"client:{client_id}"


@dataclass(frozen=True)
class ClientPayload:
    """Encrypted, BHM-compressed update plus the metadata sent in the clear."""

    client_id: int
    data_size: int
    rows: int
    cols: int
    block_size: int
    scaling_factor: float
    ciphertexts: tuple[ahe.Ciphertext, ...]

    def layout_key(self) -> tuple:
        return (self.rows, self.cols, self.block_size, self.scaling_factor)


@dataclass(frozen=True)
class AsTwoPcInput:
    neg_mask: tuple[int, ...]
    bits: bytes = field(repr=False)
    participating_n: int
    participants: int


@dataclass(frozen=True)
class CspTwoPcInput:
    masked: tuple[int, ...]
    bits: bytes = field(repr=False)


# ---------------------------------------------------------------------------
# Payload codecs
# ---------------------------------------------------------------------------


def _pack_ints(xs: Iterable[int]) -> bytes:
    return b"".join(ahe._pack_int(x) for x in xs)


def _unpack_ints(buf: bytes, off: int, count: int) -> tuple[list[int], int]:
    out = []
    for _ in range(count):
        x, off = ahe._unpack_int(buf, off)
        out.append(x)
    return out, off


def encode_matrix(m: np.ndarray) -> bytes:
    m = np.atleast_2d(np.asarray(m, dtype=float))
    return _MATRIX.pack(_MATRIX_MAGIC, *m.shape) + m.astype("<f8").tobytes()


def decode_matrix(buf: bytes) -> np.ndarray:
    magic, rows, cols = _MATRIX.unpack_from(buf, 0)
    if magic != _MATRIX_MAGIC:
        raise ValueError("bad matrix magic")
    return np.frombuffer(buf, dtype="<f8", offset=_MATRIX.size).reshape(rows, cols).copy()


def encode_client_payload(p: ClientPayload) -> bytes:
    head = _CLIENT.pack(_CLIENT_MAGIC, p.client_id, p.data_size, p.rows, p.cols, p.block_size, p.scaling_factor)
    return head + ahe.ciphertexts_to_bytes(p.ciphertexts)


def decode_client_payload(buf: bytes, pk: ahe.PublicKey) -> ClientPayload:
    magic, cid, size, rows, cols, l, kappa = _CLIENT.unpack_from(buf, 0)
    if magic != _CLIENT_MAGIC:
        raise ValueError("bad client payload magic")
    cts = ahe.ciphertexts_from_bytes(buf[_CLIENT.size :], pk)
    return ClientPayload(cid, size, rows, cols, l, kappa, tuple(cts))


def encode_as_input(x: AsTwoPcInput) -> bytes:
    head = _AS_IN.pack(_AS_IN_MAGIC, x.participating_n, x.participants, len(x.neg_mask))
    return head + struct.pack("<I", len(x.bits)) + x.bits + _pack_ints(x.neg_mask)


def decode_as_input(buf: bytes) -> AsTwoPcInput:
    magic, total_n, participants, dim = _AS_IN.unpack_from(buf, 0)
    if magic != _AS_IN_MAGIC:
        raise ValueError("bad AS 2PC input magic")
    off = _AS_IN.size
    (nbits,) = struct.unpack_from("<I", buf, off)
    off += 4
    bits = bytes(buf[off : off + nbits])
    vals, _ = _unpack_ints(buf, off + nbits, dim)
    return AsTwoPcInput(tuple(vals), bits, total_n, participants)


def encode_csp_input(x: CspTwoPcInput) -> bytes:
    head = _CSP_IN.pack(_CSP_IN_MAGIC, len(x.masked), len(x.bits))
    return head + x.bits + _pack_ints(x.masked)


def decode_csp_input(buf: bytes) -> CspTwoPcInput:
    magic, dim, nbits = _CSP_IN.unpack_from(buf, 0)
    if magic != _CSP_IN_MAGIC:
        raise ValueError("bad CSP 2PC input magic")
    off = _CSP_IN.size
    bits = bytes(buf[off : off + nbits])
    vals, _ = _unpack_ints(buf, off + nbits, dim)
    return CspTwoPcInput(tuple(vals), bits)


# ---------------------------------------------------------------------------
# Messages and transcripts
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Message:
    round: int
    sender: str
    receiver: str
    message_type: str
    payload: bytes = field(repr=False)
    content: Any = field(default=None, repr=False, compare=False)

    def to_json(self) -> str:
        return json.dumps(
            {
                "round": self.round,
                "sender": self.sender,
                "receiver": self.receiver,
                "type": self.message_type,
                "payload": self.payload.hex(),
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, line: str, pk: ahe.PublicKey | None = None) -> "Message":
        d = json.loads(line)
        payload = bytes.fromhex(d["payload"])
        msg = cls(d["round"], d["sender"], d["receiver"], d["type"], payload)
        return cls(msg.round, msg.sender, msg.receiver, msg.message_type, payload, decode_payload(msg, pk))


def decode_payload(msg: Message, pk: ahe.PublicKey | None = None) -> Any:
    t = msg.message_type
    if t == "public_key":
        return ahe.public_key_from_bytes(msg.payload)
    if t in ("global_model", "2pc_output"):
        return decode_matrix(msg.payload)
    if t == "2pc_input":
        return decode_as_input(msg.payload) if msg.sender == AS else decode_csp_input(msg.payload)
    if pk is None:
        return None
    if t == "client_update":
        return decode_client_payload(msg.payload, pk)
    if t == "masked_aggregate":
        return ahe.ciphertexts_from_bytes(msg.payload, pk)
    raise ValueError(f"unknown message type {t!r}")


@dataclass
class RoundTranscript:
    round_index: int
    messages: list[Message] = field(default_factory=list)
    distorted_update: np.ndarray | None = None
    ledger_entry: tuple[float, float] | None = None
    participants: tuple[int, ...] = ()

    def log(self, sender: str, receiver: str, message_type: str, payload: bytes, content: Any) -> Message:
        msg = Message(self.round_index, sender, receiver, message_type, payload, content)
        self.messages.append(msg)
        return msg

    def view(self, role: str) -> list[Message]:
        return [m for m in self.messages if role in (m.sender, m.receiver)]

    def roles(self) -> set[str]:
        return {r for m in self.messages for r in (m.sender, m.receiver)} - {F2PC}

    def to_jsonl(self) -> str:
        return "".join(m.to_json() + "\n" for m in self.messages)


def read_jsonl(text: str, pk: ahe.PublicKey | None = None) -> list[Message]:
    return [Message.from_json(line, pk) for line in text.splitlines() if line.strip()]


# ---------------------------------------------------------------------------
# View hygiene
# ---------------------------------------------------------------------------

# message types each kind of party may send / receive
_ALLOWED = {
    AS: {
        "sent": {"global_model", "masked_aggregate", "2pc_input"},
        "received": {"public_key", "client_update", "2pc_output"},
    },
    CSP: {
        "sent": {"public_key", "2pc_input"},
        "received": {"masked_aggregate"},
    },
    "client": {
        "sent": {"client_update"},
        "received": {"public_key", "global_model"},
    },
}


class ViewInvariantError(AssertionError):
    """A party's view contains something the protocol must never show it."""


def check_view_structure(transcript: RoundTranscript) -> None:
    """Reject any message type outside a role's allowed set."""
    for role in transcript.roles():
        kind = "client" if role.startswith("client:") else role
        allowed = _ALLOWED.get(kind)
        if allowed is None:
            raise ViewInvariantError(f"unknown role {role!r} in transcript")
        for m in transcript.view(role):
            direction = "sent" if m.sender == role else "received"
            if m.message_type not in allowed[direction]:
                raise ViewInvariantError(
                    f"{role} {direction} a {m.message_type!r} message, which its view must not contain"
                )
            if m.message_type == "2pc_output" and m.receiver != AS:
                raise ViewInvariantError("2PC output delivered to a party other than AS")


def _plaintext_leaves(content: Any) -> Iterator[tuple[str, Any]]:
    if isinstance(content, np.ndarray):
        yield "real", np.asarray(content, dtype=float).ravel()
    elif isinstance(content, AsTwoPcInput):
        yield "ring", content.neg_mask
        yield "bits", content.bits
    elif isinstance(content, CspTwoPcInput):
        yield "ring", content.masked
        yield "bits", content.bits
    # ciphertexts, public keys and client payloads carry no plaintext values


def scan_view(
    messages: Iterable[Message],
    real_secrets: dict[str, np.ndarray] | None = None,
    ring_secrets: dict[str, Iterable[int]] | None = None,
    atol: float = 1e-9,
) -> list[str]:
    """Names of secrets that show up as plaintext anywhere in ``messages``.

    A real secret is found when a logged real vector of the same length
    matches it within ``atol``; a ring secret is found when any of its
    nonzero elements appears in a logged ring vector.
    """
    real_secrets = real_secrets or {}
    ring_sets = {k: {int(x) for x in v} - {0} for k, v in (ring_secrets or {}).items()}
    found: list[str] = []
    for m in messages:
        for kind, value in _plaintext_leaves(m.content):
            if kind == "real":
                for name, secret in real_secrets.items():
                    s = np.asarray(secret, dtype=float).ravel()
                    if s.shape == value.shape and np.allclose(s, value, atol=atol, rtol=0):
                        found.append(name)
            elif kind == "ring":
                logged = {int(x) for x in value}
                for name, secret in ring_sets.items():
                    if secret & logged:
                        found.append(name)
    return sorted(set(found))
