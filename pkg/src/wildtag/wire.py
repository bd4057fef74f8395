"""Radio packet payloads: sequences of typed data items with compressed headers.

Every data item has a 16-bit type and a length up to 255. The header is the
shortest of three forms:

  Form A, 1 byte:  0TTTLLLL             type <= 7, length <= 15
  Form B, 2 bytes: 10TTTTTT LLLLLLLL    type <= 63
  Form C, 4 bytes: 0xC0 LLLLLLLL TTTTTTTT TTTTTTTT   (type big-endian)

Decoding rejects non-canonical encodings (a value sent in a longer form than
necessary) and any first byte with prefix ``11`` other than 0xC0.

Worked examples::

    (type=2,    length=5)   -> 25
    (type=9,    length=200) -> 89 c8
    (type=1000, length=3)   -> c0 03 03 e8

Protocol-critical item types sit in 0..7 so routine traffic uses 1-byte
headers. Payload integers are little-endian.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from .errors import WireError

MAX_PACKET_PAYLOAD = 255
WAKEUP_HIGHEST = 0xFF

# Registry of protocol item types.
T_TAG_STATE = 0
T_TAG_ID = 1
T_ACK = 2
T_CLOCK = 3
T_WAKEUP = 4
T_ADDRESSED_TO = 5
T_LOG_ITEM = 6
T_LOG_STATE = 7


# -- header codec ---------------------------------------------------------

def encode_header(type_code: int, length: int) -> bytes:
    if not 0 <= type_code <= 0xFFFF:
        raise WireError(f"item type {type_code} out of range")
    if not 0 <= length <= 255:
        raise WireError(f"item length {length} out of range")
    if type_code <= 7 and length <= 15:
        return bytes([(type_code << 4) | length])
    if type_code <= 63:
        return bytes([0x80 | type_code, length])
    return struct.pack(">BBH", 0xC0, length, type_code)


def decode_header(buf: bytes, offset: int = 0) -> tuple[int, int, int]:
    """Return (type_code, length, bytes_consumed) for the header at offset."""
    if offset >= len(buf):
        raise WireError("truncated item header", offset)
    first = buf[offset]
    if first & 0x80 == 0:
        return first >> 4, first & 0x0F, 1
    if first & 0xC0 == 0x80:
        if offset + 2 > len(buf):
            raise WireError("truncated two-byte header", offset)
        type_code = first & 0x3F
        length = buf[offset + 1]
        if type_code <= 7 and length <= 15:
            raise WireError(
                f"non-canonical header: type {type_code}/length {length} "
                "must use the one-byte form", offset)
        return type_code, length, 2
    if first != 0xC0:
        raise WireError(f"reserved header byte 0x{first:02x}", offset)
    if offset + 4 > len(buf):
        raise WireError("truncated four-byte header", offset)
    length = buf[offset + 1]
    type_code = (buf[offset + 2] << 8) | buf[offset + 3]
    if type_code <= 63:
        raise WireError(
            f"non-canonical header: type {type_code} fits a shorter form", offset)
    return type_code, length, 4


# -- item codecs ----------------------------------------------------------

@dataclass(frozen=True)
class TagStateItem:
    """One status byte: listen flag, has-data flag, 4-bit config index."""

    will_listen: bool
    has_data: bool
    config_index: int

    TYPE = T_TAG_STATE

    def encode_payload(self) -> bytes:
        if not 0 <= self.config_index <= 15:
            raise WireError(f"config index {self.config_index} out of range")
        return bytes([(self.will_listen << 7) | (self.has_data << 6) | self.config_index])

    @classmethod
    def decode_payload(cls, payload: bytes) -> "TagStateItem":
        if len(payload) != 1:
            raise WireError(f"tag state payload must be 1 byte, got {len(payload)}")
        b = payload[0]
        if b & 0x30:
            raise WireError("tag state reserved bits set")
        return cls(bool(b & 0x80), bool(b & 0x40), b & 0x0F)


@dataclass(frozen=True)
class TagIdItem:
    tag_id: int

    TYPE = T_TAG_ID

    def encode_payload(self) -> bytes:
        return struct.pack("<Q", self.tag_id)

    @classmethod
    def decode_payload(cls, payload: bytes) -> "TagIdItem":
        if len(payload) != 8:
            raise WireError(f"tag id payload must be 8 bytes, got {len(payload)}")
        return cls(struct.unpack("<Q", payload)[0])


@dataclass(frozen=True)
class AckItem:
    """Acknowledges the log item at ``acked_address`` on the sender's log."""

    acked_address: int

    TYPE = T_ACK

    def encode_payload(self) -> bytes:
        return struct.pack("<I", self.acked_address)

    @classmethod
    def decode_payload(cls, payload: bytes) -> "AckItem":
        if len(payload) != 4:
            raise WireError(f"ack payload must be 4 bytes, got {len(payload)}")
        return cls(struct.unpack("<I", payload)[0])


@dataclass(frozen=True)
class ClockItem:
    utc_seconds: int

    TYPE = T_CLOCK

    def encode_payload(self) -> bytes:
        return struct.pack("<Q", self.utc_seconds)

    @classmethod
    def decode_payload(cls, payload: bytes) -> "ClockItem":
        if len(payload) != 8:
            raise WireError(f"clock payload must be 8 bytes, got {len(payload)}")
        return cls(struct.unpack("<Q", payload)[0])


@dataclass(frozen=True)
class WakeupItem:
    """Switch command: explicit config index, or 0xFF for highest-indexed."""

    target: int

    TYPE = T_WAKEUP

    @property
    def to_highest(self) -> bool:
        return self.target == WAKEUP_HIGHEST

    def encode_payload(self) -> bytes:
        if not (0 <= self.target <= 15 or self.target == WAKEUP_HIGHEST):
            raise WireError(f"wakeup target {self.target} out of range")
        return bytes([self.target])

    @classmethod
    def decode_payload(cls, payload: bytes) -> "WakeupItem":
        if len(payload) != 1:
            raise WireError(f"wakeup payload must be 1 byte, got {len(payload)}")
        if not (payload[0] <= 15 or payload[0] == WAKEUP_HIGHEST):
            raise WireError(f"wakeup target {payload[0]} out of range")
        return cls(payload[0])


@dataclass(frozen=True)
class AddressedToItem:
    tag_id: int

    TYPE = T_ADDRESSED_TO

    def encode_payload(self) -> bytes:
        return struct.pack("<Q", self.tag_id)

    @classmethod
    def decode_payload(cls, payload: bytes) -> "AddressedToItem":
        if len(payload) != 8:
            raise WireError(f"addressed-to payload must be 8 bytes, got {len(payload)}")
        return cls(struct.unpack("<Q", payload)[0])


@dataclass(frozen=True)
class LogItemCarrier:
    """One log item in flight, with its full global identity."""

    creation_time: int
    address: int
    item_type: int
    payload: bytes

    TYPE = T_LOG_ITEM

    def encode_payload(self) -> bytes:
        if len(self.payload) > 224:
            raise WireError(f"carried log item too long ({len(self.payload)} bytes)")
        return struct.pack("<QIB", self.creation_time, self.address, self.item_type) + self.payload

    @classmethod
    def decode_payload(cls, payload: bytes) -> "LogItemCarrier":
        if len(payload) < 13:
            raise WireError(f"log item carrier needs >= 13 bytes, got {len(payload)}")
        creation, address, item_type = struct.unpack_from("<QIB", payload)
        return cls(creation, address, item_type, bytes(payload[13:]))


@dataclass(frozen=True)
class LogStateItem:
    write_addr: int
    ack_cursor: int
    creation_time: int

    TYPE = T_LOG_STATE

    def encode_payload(self) -> bytes:
        return struct.pack("<IIQ", self.write_addr, self.ack_cursor, self.creation_time)

    @classmethod
    def decode_payload(cls, payload: bytes) -> "LogStateItem":
        if len(payload) != 16:
            raise WireError(f"log state payload must be 16 bytes, got {len(payload)}")
        return cls(*struct.unpack("<IIQ", payload))


@dataclass(frozen=True)
class OpaqueItem:
    """Item of a type this build does not know; bytes preserved exactly."""

    type_code: int
    payload: bytes

    def encode_payload(self) -> bytes:
        return self.payload

    @property
    def TYPE(self) -> int:  # noqa: N802 - mirrors the class attribute of known items
        return self.type_code


ITEM_TYPES = {
    cls.TYPE: cls
    for cls in (TagStateItem, TagIdItem, AckItem, ClockItem, WakeupItem,
                AddressedToItem, LogItemCarrier, LogStateItem)
}

WireItem = (TagStateItem | TagIdItem | AckItem | ClockItem | WakeupItem
            | AddressedToItem | LogItemCarrier | LogStateItem | OpaqueItem)


def encode_item(item) -> bytes:
    payload = item.encode_payload()
    return encode_header(item.TYPE, len(payload)) + payload


def encoded_size(item) -> int:
    return len(encode_item(item))


# -- packets --------------------------------------------------------------

@dataclass(frozen=True)
class Packet:
    """Radio payload plus the kind of node that sent it."""

    payload: bytes
    source: str  # "tag" or "base"

    def __post_init__(self):
        if self.source not in ("tag", "base"):
            raise WireError(f"unknown packet source {self.source!r}")


def build_packet(items, source: str = "tag") -> Packet:
    if source == "tag" and len(items) < 2:
        raise WireError("tag packets always carry at least two data items")
    if not items:
        raise WireError("packet needs at least one data item")
    encoded = b"".join(encode_item(it) for it in items)
    if len(encoded) > MAX_PACKET_PAYLOAD:
        raise WireError(f"packet payload {len(encoded)} exceeds {MAX_PACKET_PAYLOAD} bytes")
    return Packet(encoded, source)


def parse_packet(payload: bytes) -> list:
    """Parse a packet payload into typed items.

    Unknown types come back as OpaqueItem. Truncation or trailing garbage
    raises WireError naming the failing offset.
    """
    if len(payload) > MAX_PACKET_PAYLOAD:
        raise WireError(f"payload {len(payload)} exceeds {MAX_PACKET_PAYLOAD} bytes")
    items = []
    offset = 0
    while offset < len(payload):
        type_code, length, consumed = decode_header(payload, offset)
        start = offset + consumed
        if start + length > len(payload):
            raise WireError("payload ends mid-item", offset)
        body = payload[start:start + length]
        cls = ITEM_TYPES.get(type_code)
        if cls is None:
            items.append(OpaqueItem(type_code, bytes(body)))
        else:
            items.append(cls.decode_payload(body))
        offset = start + length
    return items


def find_item(items, cls):
    """First item of the given class, or None."""
    for item in items:
        if isinstance(item, cls):
            return item
    return None
