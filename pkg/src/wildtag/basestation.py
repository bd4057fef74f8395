"""Base-station runtime: intent-driven replies and received-item persistence.

A station answers a tag packet with at most one reply, addressed to that
tag, combining whatever its intents produce: a clock correction when the
advertised clock is more than 2 s off, an acknowledgment for a log item it
just persisted, a wakeup command from a user intent, and the upload
invitation (wakeup to the highest-indexed configuration) when a tag reports
pending data but carries no log item.

Received items go to the station's own log on an SD-profile medium, or to a
length-prefixed record file when the station is tethered to a computer.
A station whose store is full stops acknowledging.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from . import flashlog, wire
from .errors import LogFullError, StoreError
from .media import Media

CLOCK_TOLERANCE_S = 2

RECORD_SUSPECT_FLAG = 0x01

_ENVELOPE_FMT = "<QQIBBQ"            # tag, creation, address, item type, flags, rx time
ENVELOPE_SIZE = struct.calcsize(_ENVELOPE_FMT)
_RECORD_FMT = "<QQIBBQQB"            # envelope + station id + payload length
_RECORD_FIXED = struct.calcsize(_RECORD_FMT)


@dataclass(frozen=True)
class ReceivedRecord:
    """One log item with its global identity, as persisted by a station."""

    tag_id: int
    creation_time: int
    address: int
    item_type: int
    payload: bytes
    rx_time_us: int
    station_id: int
    flags: int = 0

    @property
    def key(self) -> tuple[int, int, int]:
        return self.tag_id, self.creation_time, self.address

    @property
    def suspect(self) -> bool:
        return bool(self.flags & RECORD_SUSPECT_FLAG)

    def to_bytes(self) -> bytes:
        head = struct.pack(_RECORD_FMT, self.tag_id, self.creation_time,
                           self.address, self.item_type, self.flags,
                           self.rx_time_us, self.station_id, len(self.payload))
        return head + self.payload

    @classmethod
    def from_bytes(cls, blob: bytes, offset: int = 0) -> tuple["ReceivedRecord", int]:
        if offset + _RECORD_FIXED > len(blob):
            raise StoreError("truncated record")
        (tag, creation, address, item_type, flags, rx, station,
         plen) = struct.unpack_from(_RECORD_FMT, blob, offset)
        start = offset + _RECORD_FIXED
        if start + plen > len(blob):
            raise StoreError("truncated record payload")
        return cls(tag, creation, address, item_type, blob[start:start + plen],
                   rx, station, flags), start + plen


# -- store backends ------------------------------------------------------------

class TetheredStore:
    """Record list backed by a flat file of length-prefixed records."""

    def __init__(self, capacity_records: int | None = None):
        self.records: list[ReceivedRecord] = []
        self.capacity_records = capacity_records

    @property
    def full(self) -> bool:
        return (self.capacity_records is not None
                and len(self.records) >= self.capacity_records)

    def persist(self, record: ReceivedRecord) -> bool:
        if self.full:
            return False
        self.records.append(record)
        return True

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            for record in self.records:
                blob = record.to_bytes()
                fh.write(struct.pack("<H", len(blob)))
                fh.write(blob)

    @classmethod
    def load(cls, path) -> "TetheredStore":
        store = cls()
        with open(path, "rb") as fh:
            blob = fh.read()
        offset = 0
        while offset < len(blob):
            if offset + 2 > len(blob):
                raise StoreError("truncated record file")
            (size,) = struct.unpack_from("<H", blob, offset)
            record, end = ReceivedRecord.from_bytes(blob[offset + 2:offset + 2 + size])
            if end != size:
                raise StoreError("record length mismatch")
            store.records.append(record)
            offset += 2 + size
        return store

    def export_text(self) -> str:
        lines = ["# tag creation address type flags rx_us station payload_hex"]
        for r in self.records:
            lines.append(f"{r.tag_id} {r.creation_time} {r.address} {r.item_type} "
                         f"{r.flags} {r.rx_time_us} {r.station_id} {r.payload.hex()}")
        return "\n".join(lines) + "\n"


class SdLogStore:
    """Received records kept in the same log structure on an SD medium.

    Each record is stored as an envelope item followed by a payload item so
    a 224-byte log item plus its identity still fits the item size limit.
    """

    def __init__(self, media: Media, station_id: int, creation_time: int,
                 logical_sector_size: int | None = None):
        self.media = media
        self.station_id = station_id
        self.log = flashlog.LogWriter.format(
            media, station_id, creation_time,
            registry_id=flashlog.REGISTRY_STATION,
            logical_sector_size=logical_sector_size)
        self.log.log_boot(1)
        self.log.flush()
        self._full = False

    @property
    def full(self) -> bool:
        return self._full

    def persist(self, record: ReceivedRecord) -> bool:
        if self._full:
            return False
        envelope = struct.pack(_ENVELOPE_FMT, record.tag_id, record.creation_time,
                               record.address, record.item_type, record.flags,
                               record.rx_time_us)
        try:
            self.log.append(flashlog.T_RECORD_ENVELOPE, envelope)
            self.log.append(flashlog.T_RECORD_PAYLOAD, record.payload)
            self.log.flush()
        except LogFullError:
            self._full = True
            return False
        return True

    def records(self) -> list[ReceivedRecord]:
        return records_from_station_log(self.media, self.station_id)


def records_from_station_log(media: Media, station_id: int,
                             logical_sector_size: int | None = None
                             ) -> list[ReceivedRecord]:
    """Re-read envelope/payload item pairs from a station's SD log image."""
    scan = flashlog.scan_log(media, logical_sector_size)
    out: list[ReceivedRecord] = []
    pending = None
    for item in scan.items:
        if item.validity != flashlog.VALID:
            continue
        if item.type_code == flashlog.T_RECORD_ENVELOPE:
            if len(item.payload) == ENVELOPE_SIZE:
                pending = struct.unpack(_ENVELOPE_FMT, item.payload)
            continue
        if item.type_code == flashlog.T_RECORD_PAYLOAD and pending is not None:
            tag, creation, address, item_type, flags, rx = pending
            out.append(ReceivedRecord(tag, creation, address, item_type,
                                      bytes(item.payload), rx, station_id, flags))
        pending = None
    return out


# -- intents ----------------------------------------------------------------------

@dataclass(frozen=True)
class Intent:
    """A declarative wish: switch some tag (or all) to a configuration."""

    kind: str                 # currently only "wakeup"
    tag_id: int | None        # None: applies to every tag
    target: int | str         # config index or "highest"

    def matches(self, tag_id: int) -> bool:
        return self.tag_id is None or self.tag_id == tag_id


@dataclass
class StationStats:
    packets: int = 0
    replies: int = 0
    acks: int = 0
    records: int = 0
    dropped_full: int = 0


class BaseStation:
    """One station: clock source, intent set, received-item store."""

    def __init__(self, station_id: int, *, store, has_valid_clock: bool = True,
                 utc_epoch: int = 0, logging_station: bool = True):
        self.station_id = station_id
        self.store = store
        self.has_valid_clock = has_valid_clock
        self.utc_epoch = utc_epoch
        self.logging_station = logging_station
        self.intents: list[Intent] = []
        self.stats = StationStats()
        self.last_seen: dict[int, int] = {}  # tag id -> rx time us

    def clock(self, t_us: int) -> int:
        return self.utc_epoch + t_us // 1_000_000

    # -- intent management ---------------------------------------------------

    def add_intent(self, intent: Intent) -> list[str]:
        """Install an intent; a later wakeup for the same scope replaces the
        earlier one (last added wins). Returns warnings for replacements."""
        warnings = []
        if intent in self.intents:
            return warnings
        for existing in list(self.intents):
            if existing.kind == intent.kind and existing.tag_id == intent.tag_id:
                self.intents.remove(existing)
                warnings.append(
                    f"intent for tag {intent.tag_id} replaced: "
                    f"{existing.target} -> {intent.target}")
        self.intents.append(intent)
        return warnings

    def remove_intent(self, intent: Intent) -> None:
        if intent in self.intents:
            self.intents.remove(intent)

    # -- packet handling --------------------------------------------------------

    def handle_packet(self, packet: wire.Packet, rx_time_us: int
                      ) -> wire.Packet | None:
        """Evaluate intents against one received tag packet; build the reply."""
        items = wire.parse_packet(packet.payload)
        state = wire.find_item(items, wire.TagStateItem)
        ident = wire.find_item(items, wire.TagIdItem)
        if state is None or ident is None:
            return None  # not a conforming tag packet
        self.stats.packets += 1
        tag_id = ident.tag_id
        self.last_seen[tag_id] = rx_time_us

        reply: list = []

        carrier = wire.find_item(items, wire.LogItemCarrier)
        if carrier is not None and self.logging_station:
            record = ReceivedRecord(
                tag_id=tag_id, creation_time=carrier.creation_time,
                address=carrier.address, item_type=carrier.item_type,
                payload=carrier.payload, rx_time_us=rx_time_us,
                station_id=self.station_id)
            if self.store.persist(record):
                self.stats.records += 1
                reply.append(wire.AckItem(carrier.address))
                self.stats.acks += 1
            else:
                self.stats.dropped_full += 1  # full store: never acknowledge

        if self.has_valid_clock:
            advertised = wire.find_item(items, wire.ClockItem)
            if advertised is not None:
                drift = abs(advertised.utc_seconds - self.clock(rx_time_us))
                if drift > CLOCK_TOLERANCE_S:
                    reply.append(wire.ClockItem(self.clock(rx_time_us)))

        wakeup = self._wakeup_for(tag_id, state, carrier)
        if wakeup is not None:
            reply.append(wakeup)

        if not reply or not state.will_listen:
            return None
        self.stats.replies += 1
        return wire.build_packet([wire.AddressedToItem(tag_id)] + reply, "base")

    def _wakeup_for(self, tag_id: int, state: wire.TagStateItem,
                    carrier) -> wire.WakeupItem | None:
        for intent in self.intents:
            if intent.kind != "wakeup" or not intent.matches(tag_id):
                continue
            if intent.target == "highest":
                return wire.WakeupItem(wire.WAKEUP_HIGHEST)
            if state.config_index != intent.target:
                return wire.WakeupItem(int(intent.target))
            return None  # tag already reports the intended configuration
        # Upload orchestration: a logging station invites a tag that has data
        # but sent no log item to its highest-indexed configuration.
        if self.logging_station and state.has_data and carrier is None \
                and not self.store.full:
            return wire.WakeupItem(wire.WAKEUP_HIGHEST)
        return None
