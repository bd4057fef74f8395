"""Append-only nonvolatile log of typed items, safe against power loss.

On-media layout (all integers little-endian):

  * Every item is ``[type u8][payload_len u8][payload]`` with type in 1..254
    and payload up to 224 bytes. Type 0xFF and length 0xFF stay reserved so
    an erased region can never read as a plausible header.
  * Address 0 holds the log header item (type 1, 22-byte payload: 4-byte
    magic, format version, registry id, 64-bit tag id, 64-bit creation time).
  * The medium is divided into logical sectors. Every sector except the
    first starts with a sector-header item (type 2, 7-byte payload: 32-bit
    ack cursor, 16-bit sector sequence, flags) - 9 bytes total.
  * Items never straddle a sector boundary: an item that does not fit in
    the remaining space skips to the next sector, leaving an erased gap of
    at most 225 bytes.
  * Each power session starts with a boot marker (type 3) before any other
    item of that session.

Writes go through a one-page RAM buffer flushed on fill, on sector skip and
on explicit ``flush()``. A power loss therefore costs at most the item being
written plus one buffered page.

Suspect classification: an item is reported suspect when it is the last one
on the medium, when the next item is a boot marker, or when its extent
reaches into the page that was the write frontier of a session that ended
before a boot marker (bytes below the boot marker in the page holding the
last non-erased byte before it). The third rule is what keeps randomly
scrambled page tails from ever being classified valid; see the recovery
notes in docs/formats.md.
"""

from __future__ import annotations

import binascii
import struct
from dataclasses import dataclass, field

from .errors import LogError, LogFullError
from .media import Media

LOG_MAGIC = b"TLG1"
LOG_FORMAT_VERSION = 1

ITEM_HEADER_SIZE = 2
MAX_PAYLOAD = 224
MAX_ITEM_SIZE = ITEM_HEADER_SIZE + MAX_PAYLOAD

T_LOG_HEADER = 1
T_SECTOR_HEADER = 2
T_BOOT_MARKER = 3
T_SENSOR_CONFIG = 4
T_CLOCK_SET = 5
T_ACK_CHECKPOINT = 6
# Station registry (registry id 2) adds:
T_RECORD_ENVELOPE = 32
T_RECORD_PAYLOAD = 33
# Sensor data types start at 16; see sensors.py.

LOG_HEADER_PAYLOAD = 22
LOG_HEADER_SIZE = ITEM_HEADER_SIZE + LOG_HEADER_PAYLOAD
SECTOR_HEADER_PAYLOAD = 7
SECTOR_HEADER_SIZE = ITEM_HEADER_SIZE + SECTOR_HEADER_PAYLOAD
BOOT_MARKER_PAYLOAD = 4
ACK_CHECKPOINT_PAYLOAD = 6
CLOCK_SET_PAYLOAD = 12

_CHECKPOINT_CRC_SEED = 0xA55A

VALID = "valid"
SUSPECT = "suspect"

REGISTRY_TAG = 1
REGISTRY_STATION = 2


# -- small codecs -----------------------------------------------------------

def pack_boot_marker(boot_count: int, firmware_id: int) -> bytes:
    return struct.pack("<HH", boot_count & 0xFFFF, firmware_id & 0xFFFF)


def parse_boot_marker(payload: bytes) -> tuple[int, int]:
    return struct.unpack("<HH", payload)


def pack_clock_set(old_clock: int, new_utc: int) -> bytes:
    return struct.pack("<IQ", old_clock & 0xFFFFFFFF, new_utc)


def parse_clock_set(payload: bytes) -> tuple[int, int]:
    return struct.unpack("<IQ", payload)


def _pack_checkpoint(ack: int) -> bytes:
    raw = struct.pack("<I", ack)
    return raw + struct.pack("<H", binascii.crc_hqx(raw, _CHECKPOINT_CRC_SEED))


def _checkpoint_value(payload: bytes) -> int | None:
    if len(payload) != ACK_CHECKPOINT_PAYLOAD:
        return None
    crc = struct.unpack_from("<H", payload, 4)[0]
    if binascii.crc_hqx(payload[:4], _CHECKPOINT_CRC_SEED) != crc:
        return None
    return struct.unpack_from("<I", payload)[0]


# -- scan structures --------------------------------------------------------

@dataclass
class ScannedItem:
    address: int
    type_code: int
    payload: bytes
    validity: str = VALID

    @property
    def end(self) -> int:
        return self.address + ITEM_HEADER_SIZE + len(self.payload)


@dataclass(frozen=True)
class Gap:
    start: int
    end: int
    kind: str  # "torn" or "sector-skip"


@dataclass(frozen=True)
class LogCursor:
    write_addr: int
    ack_cursor: int


@dataclass
class LogScan:
    tag_id: int
    creation_time: int
    registry_id: int
    logical_sector_size: int
    items: list[ScannedItem] = field(default_factory=list)
    gaps: list[Gap] = field(default_factory=list)
    poison_ranges: list[tuple[int, int]] = field(default_factory=list)
    write_addr: int = LOG_HEADER_SIZE
    ack_cursor: int = LOG_HEADER_SIZE
    boot_count: int = 0
    truncated: bool = False

    @property
    def cursor(self) -> LogCursor:
        return LogCursor(self.write_addr, self.ack_cursor)


@dataclass(frozen=True)
class RecoveryReport:
    first_erased_sector: int
    last_data_sector: int
    torn_tail: bool
    parse_end: int          # where contiguous parsing stopped
    ack_source: int | None  # address of the commit the cursor was restored from
    tag_id: int
    creation_time: int
    registry_id: int


def _check_lss(media: Media, logical_sector_size: int | None) -> int:
    g = media.geometry
    lss = logical_sector_size or g.sector_size
    if lss % g.page_size:
        raise LogError("logical sector size must be a multiple of the page size")
    if g.capacity % lss:
        raise LogError("capacity must be a multiple of the logical sector size")
    if lss < SECTOR_HEADER_SIZE + MAX_ITEM_SIZE:
        raise LogError(f"logical sector size {lss} too small")
    return lss


def _read_log_header(media: Media) -> tuple[int, int, int]:
    """Validate the header item at address 0; return (tag_id, creation, registry)."""
    raw = media.read(0, LOG_HEADER_SIZE)
    if raw[0] != T_LOG_HEADER or raw[1] != LOG_HEADER_PAYLOAD:
        raise LogError("missing or corrupt log header item")
    magic, version, registry, tag_id, creation = struct.unpack("<4sBBQQ", raw[2:])
    if magic != LOG_MAGIC:
        raise LogError(f"bad log magic {magic!r}")
    if version != LOG_FORMAT_VERSION:
        raise LogError(f"unsupported log format version {version}")
    return tag_id, creation, registry


def _junk_end(data, start: int, end: int) -> int | None:
    """Address one past the last non-erased byte in [start, end), or None."""
    chunk = bytes(data[start:end]).rstrip(b"\xff")
    return start + len(chunk) if chunk else None


def _parse_region(data, start: int, end: int, page_size: int):
    """Parse items in [start, end) with page-boundary resynchronization.

    Returns (items, gaps, parse_end, junk_end). ``junk_end`` is not None when
    non-erased bytes follow the parse end with no boot marker to resume at;
    the caller decides where appends would resume.
    """
    items: list[ScannedItem] = []
    gaps: list[Gap] = []
    addr = start
    while True:
        if addr + ITEM_HEADER_SIZE <= end:
            t = data[addr]
            size = data[addr + 1]
            if 1 <= t <= 254 and size <= MAX_PAYLOAD and addr + ITEM_HEADER_SIZE + size <= end:
                payload = bytes(data[addr + ITEM_HEADER_SIZE:addr + ITEM_HEADER_SIZE + size])
                items.append(ScannedItem(addr, t, payload))
                addr += ITEM_HEADER_SIZE + size
                continue
        junk = _junk_end(data, addr, end)
        if junk is None:
            return items, gaps, addr, None
        # Appends only ever resume at a page boundary, starting with the new
        # session's boot marker. Look for one.
        p = (addr // page_size + 1) * page_size
        resume = None
        while p + ITEM_HEADER_SIZE + BOOT_MARKER_PAYLOAD <= end:
            if data[p] == T_BOOT_MARKER and data[p + 1] == BOOT_MARKER_PAYLOAD:
                resume = p
                break
            p += page_size
        if resume is None:
            return items, gaps, addr, junk
        gaps.append(Gap(addr, resume, "torn"))
        addr = resume


def _page_floor(addr: int, page_size: int) -> int:
    return addr - addr % page_size


def _page_ceil(addr: int, page_size: int) -> int:
    return -(-addr // page_size) * page_size


def poison_range_before(media: Media, resume_addr: int, page_size: int
                        ) -> tuple[int, int] | None:
    """Distrusted address range for a session resuming at ``resume_addr``.

    The page holding the last non-erased byte below the resume point was the
    previous session's write frontier, so any of its bytes (and item extents
    reaching into it) may be a scrambled page tail that still parses. Items
    written at or after the resume point are new and unaffected.
    """
    last = media.last_data_before(resume_addr)
    if last is None or last < LOG_HEADER_SIZE:
        return None
    return _page_floor(last, page_size), resume_addr


def _poison_ranges_for(media: Media, items: list[ScannedItem], gaps: list[Gap],
                       lss: int) -> list[tuple[int, int]]:
    """Address ranges whose items cannot be trusted.

    Two sources: the scrambled page inside a torn gap (covering item extents
    that reach into it), and the write-frontier page of the session that
    ended before each boot marker.
    """
    ps = media.geometry.page_size
    poison: list[tuple[int, int]] = []
    for gap in gaps:
        if gap.kind != "torn":
            continue
        first_junk_page = None
        p = _page_floor(gap.start, ps)
        while p < gap.end:
            if not media.is_range_erased(max(p, gap.start), min(p + ps, gap.end)):
                first_junk_page = p
                break
            p += ps
        if first_junk_page is not None:
            poison.append((first_junk_page, gap.end))
    for idx, item in enumerate(items):
        if item.type_code != T_BOOT_MARKER:
            continue
        anchor = item.address
        if anchor == LOG_HEADER_SIZE:
            continue  # first boot of a fresh log; only the header precedes it
        prev = items[idx - 1] if idx else None
        if (prev is not None and prev.type_code == T_SECTOR_HEADER
                and prev.end == anchor and prev.address % lss == 0):
            anchor = prev.address  # the skip to a new sector happened at boot
        rng = poison_range_before(media, anchor, ps)
        if rng is not None:
            poison.append(rng)
    return poison


def _overlaps_poison(item: ScannedItem, poison: list[tuple[int, int]]) -> bool:
    for start, end in poison:
        if item.address < end and item.end > start:
            return True
    return False


def _classify(items: list[ScannedItem], poison: list[tuple[int, int]]) -> None:
    last = len(items) - 1
    for i, item in enumerate(items):
        if item.address == 0:
            item.validity = VALID  # the header was magic-checked already
            continue
        suspect = i == last
        if not suspect and items[i + 1].type_code == T_BOOT_MARKER:
            suspect = True
        if not suspect and poison and _overlaps_poison(item, poison):
            suspect = True
        item.validity = SUSPECT if suspect else VALID


def _ack_candidates(items: list[ScannedItem], lss: int) -> list[tuple[int, int]]:
    """(address, ack value) pairs from readable commit items.

    Candidacy relies on self-validation (sector sequence + flags, checkpoint
    CRC) rather than the poison pages: a commit that survived in a torn page
    carries a correct value, and scrambled bytes have no realistic chance of
    passing these checks.
    """
    out = []
    for item in items:
        if item.type_code == T_SECTOR_HEADER:
            if len(item.payload) != SECTOR_HEADER_PAYLOAD or item.address % lss:
                continue
            ack, seq, flags = struct.unpack("<IHB", item.payload)
            if flags != 0 or seq != (item.address // lss) & 0xFFFF:
                continue
            out.append((item.address, ack))
        elif item.type_code == T_ACK_CHECKPOINT:
            value = _checkpoint_value(item.payload)
            if value is not None:
                out.append((item.address, value))
    return out


# -- full scan ---------------------------------------------------------------

def scan_log(media: Media, logical_sector_size: int | None = None) -> LogScan:
    """Walk the whole log: every item with validity, gaps, cursors."""
    lss = _check_lss(media, logical_sector_size)
    tag_id, creation, registry = _read_log_header(media)
    scan = LogScan(tag_id, creation, registry, lss)
    g = media.geometry
    data = media.data
    sector_count = g.capacity // lss
    scan.items.append(ScannedItem(0, T_LOG_HEADER,
                                  media.read(ITEM_HEADER_SIZE, LOG_HEADER_PAYLOAD)))

    open_gap: tuple[int, int] | None = None
    parse_end = LOG_HEADER_SIZE
    final_resume: int | None = None
    stop = sector_count
    for s in range(sector_count):
        base = s * lss
        end = base + lss
        if s and media.is_range_erased(base, end):
            stop = s
            break
        if open_gap is not None:
            scan.gaps.append(Gap(open_gap[0], open_gap[1], "sector-skip"))
            open_gap = None
        start = LOG_HEADER_SIZE if s == 0 else base
        s_items, s_gaps, parse_end, junk = _parse_region(data, start, end, g.page_size)
        scan.items.extend(s_items)
        scan.gaps.extend(s_gaps)
        final_resume = None
        if junk is not None:
            resume = _page_ceil(max(parse_end, junk), g.page_size)
            scan.gaps.append(Gap(parse_end, resume, "torn"))
            final_resume = resume
            if resume < end:
                # Nothing can follow a torn tail that never rebooted.
                if s + 1 < sector_count and not media.is_range_erased(end, end + lss):
                    scan.truncated = True
                stop = s + 1
                break
        elif parse_end < end:
            open_gap = (parse_end, end)

    scan.write_addr = final_resume if final_resume is not None else parse_end
    scan.poison_ranges = _poison_ranges_for(media, scan.items, scan.gaps, lss)
    # The end of the log is treated like the moment before a boot marker:
    # the write-frontier page may hide a scrambled tail from a power cut
    # that nothing on the medium records yet.
    end_poison = poison_range_before(media, scan.write_addr, g.page_size)
    if end_poison is not None:
        scan.poison_ranges.append(end_poison)
    _classify(scan.items, scan.poison_ranges)
    scan.boot_count = sum(1 for it in scan.items if it.type_code == T_BOOT_MARKER)
    candidates = _ack_candidates(scan.items, lss)
    values = [v for _, v in candidates if LOG_HEADER_SIZE <= v <= scan.write_addr]
    scan.ack_cursor = max(values, default=LOG_HEADER_SIZE)
    return scan


def iterate_items(media: Media, logical_sector_size: int | None = None) -> list[ScannedItem]:
    """All items in address order, each tagged valid or suspect."""
    return scan_log(media, logical_sector_size).items


# -- fast recovery -------------------------------------------------------------

def recover(media: Media, logical_sector_size: int | None = None
            ) -> tuple[LogCursor, RecoveryReport]:
    """Recover the cursors: binary search for the first erased sector, then a
    linear scan inside the last used one. Equivalent to a full linear scan."""
    lss = _check_lss(media, logical_sector_size)
    tag_id, creation, registry = _read_log_header(media)
    g = media.geometry
    data = media.data
    sector_count = g.capacity // lss

    def sector_erased(s: int) -> bool:
        return media.is_range_erased(s * lss, (s + 1) * lss)

    lo, hi = 1, sector_count
    while lo < hi:
        mid = (lo + hi) // 2
        if sector_erased(mid):
            hi = mid
        else:
            lo = mid + 1
    first_erased = lo
    last = first_erased - 1

    def parse_sector(s: int):
        base = s * lss
        start = LOG_HEADER_SIZE if s == 0 else base
        items, gaps, parse_end, junk = _parse_region(data, start, base + lss, g.page_size)
        resume = None
        if junk is not None:
            resume = _page_ceil(max(parse_end, junk), g.page_size)
        return items, parse_end, resume

    items, parse_end, resume = parse_sector(last)
    torn = resume is not None
    write_addr = resume if torn else parse_end

    best: tuple[int, int] | None = None
    s = last
    probe_items = items
    while True:
        cands = [(a, v) for a, v in _ack_candidates(probe_items, lss)
                 if LOG_HEADER_SIZE <= v <= write_addr]
        if cands:
            best = max(cands, key=lambda av: av[1])
            break
        s -= 1
        if s < 0:
            break
        probe_items, _, _ = parse_sector(s)

    ack = best[1] if best else LOG_HEADER_SIZE
    report = RecoveryReport(
        first_erased_sector=first_erased,
        last_data_sector=last,
        torn_tail=torn,
        parse_end=parse_end,
        ack_source=best[0] if best else None,
        tag_id=tag_id,
        creation_time=creation,
        registry_id=registry,
    )
    return LogCursor(write_addr, ack), report


def _blackout(media: Media, start: int, end: int) -> None:
    """AND-write zeros over [start, end), one page at a time."""
    ps = media.geometry.page_size
    addr = start
    while addr < end:
        page = addr // ps
        base = page * ps
        mask = bytearray(b"\xff" * ps)
        lo = max(start, base) - base
        hi = min(end, base + ps) - base
        mask[lo:hi] = b"\x00" * (hi - lo)
        media.page_write(page, bytes(mask))
        addr = base + ps


# -- writer ---------------------------------------------------------------------

class LogWriter:
    """Single owner of an open log. Appends are buffered one page at a time."""

    def __init__(self, media: Media, lss: int, write_addr: int, ack_cursor: int,
                 tag_id: int, creation_time: int, registry_id: int):
        self._media = media
        self._g = media.geometry
        self._lss = lss
        self._addr = write_addr
        self._ack = ack_cursor
        self._durable_ack = ack_cursor
        self.tag_id = tag_id
        self.creation_time = creation_time
        self.registry_id = registry_id
        ps = self._g.page_size
        self._page_base = _page_floor(write_addr, ps)
        self._buf = bytearray(b"\xff" * ps)
        committed = write_addr - self._page_base
        if committed:
            self._buf[:committed] = media.read(self._page_base, committed)
        self._dirty = False

    # -- construction -----------------------------------------------------

    @classmethod
    def format(cls, media: Media, tag_id: int, creation_time: int,
               registry_id: int = REGISTRY_TAG,
               logical_sector_size: int | None = None) -> "LogWriter":
        """Lay down the log header on fully erased media."""
        lss = _check_lss(media, logical_sector_size)
        if not media.is_range_erased(0, media.geometry.capacity):
            raise LogError("format requires fully erased media")
        writer = cls(media, lss, 0, LOG_HEADER_SIZE, tag_id, creation_time, registry_id)
        header = struct.pack("<4sBBQQ", LOG_MAGIC, LOG_FORMAT_VERSION,
                             registry_id, tag_id, creation_time)
        writer._emit(T_LOG_HEADER, header)
        writer.flush()
        return writer

    @classmethod
    def open(cls, media: Media, logical_sector_size: int | None = None
             ) -> tuple["LogWriter", RecoveryReport]:
        lss = _check_lss(media, logical_sector_size)
        cursor, report = recover(media, lss)
        if report.torn_tail:
            # Zero-fill the torn span so its remains can never line up with
            # the new session's bytes and parse as an item. Writing zeros
            # only clears bits, which is always legal here.
            _blackout(media, report.parse_end, cursor.write_addr)
        writer = cls(media, lss, cursor.write_addr, cursor.ack_cursor,
                     report.tag_id, report.creation_time, report.registry_id)
        return writer, report

    # -- state --------------------------------------------------------------

    @property
    def write_addr(self) -> int:
        return self._addr

    @property
    def ack_cursor(self) -> int:
        return self._ack

    @property
    def cursor(self) -> LogCursor:
        return LogCursor(self._addr, self._ack)

    @property
    def capacity(self) -> int:
        return self._g.capacity

    @property
    def logical_sector_size(self) -> int:
        return self._lss

    @property
    def unacked_bytes(self) -> int:
        return self._addr - self._ack

    # -- appends --------------------------------------------------------------

    def append(self, type_code: int, payload: bytes) -> int:
        """Append one item; returns its address."""
        payload = bytes(payload)
        if not 1 <= type_code <= 254:
            raise LogError(f"item type {type_code} out of range")
        if len(payload) > MAX_PAYLOAD:
            raise LogError(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
        self._make_room(ITEM_HEADER_SIZE + len(payload))
        return self._emit(type_code, payload)

    def log_boot(self, boot_count: int, firmware_id: int = 1) -> int:
        return self.append(T_BOOT_MARKER, pack_boot_marker(boot_count, firmware_id))

    def set_ack_cursor(self, addr: int) -> None:
        """Advance the in-RAM ack cursor. Persisted in the next sector header;
        additionally checkpointed after roughly half a logical sector of
        progress, so even with the freshest checkpoint torn by a power loss a
        reboot never re-offers more than one sector's worth of items."""
        if addr < self._ack:
            raise LogError(f"ack cursor may not move backwards ({addr} < {self._ack})")
        if addr > self._addr:
            raise LogError(f"ack cursor {addr} beyond write cursor {self._addr}")
        self._ack = addr
        threshold = max(1, self._lss // 2 - MAX_ITEM_SIZE)
        if addr - self._durable_ack >= threshold:
            try:
                self.append(T_ACK_CHECKPOINT, _pack_checkpoint(addr))
                self.flush()
            except LogFullError:
                return  # log full: no way to persist, terminal anyway
            self._durable_ack = addr

    def flush(self) -> None:
        """Commit the partially filled trailing page, if any."""
        if self._dirty:
            ps = self._g.page_size
            self._media.page_write(self._page_base // ps, bytes(self._buf))
            self._dirty = False

    # -- buffered reads -----------------------------------------------------

    def read_bytes(self, start: int, length: int) -> bytes:
        """Read through the page buffer so un-flushed appends are visible."""
        out = bytearray(self._media.read(start, length))
        lo = max(start, self._page_base)
        hi = min(start + length, self._addr)
        if lo < hi:
            pb = self._page_base
            out[lo - start:hi - start] = self._buf[lo - pb:hi - pb]
        return bytes(out)

    def read_item(self, addr: int) -> tuple[int, bytes]:
        if not LOG_HEADER_SIZE <= addr < self._addr:
            raise LogError(f"no item at address {addr}")
        header = self.read_bytes(addr, ITEM_HEADER_SIZE)
        type_code, size = header[0], header[1]
        if not 1 <= type_code <= 254 or size > MAX_PAYLOAD:
            raise LogError(f"no readable item header at address {addr}")
        return type_code, self.read_bytes(addr + ITEM_HEADER_SIZE, size)

    # -- internals ------------------------------------------------------------

    def _make_room(self, size: int) -> None:
        lss = self._lss
        addr = self._addr
        at_base = addr % lss == 0 and addr > 0
        if not at_base:
            room = (addr // lss + 1) * lss - addr
            if size > room:
                self.flush()
                nxt = (addr // lss + 1) * lss
                if nxt >= self._g.capacity:
                    raise LogFullError("log full: no next sector to skip to")
                self._seek(nxt)
                at_base = True
        if at_base:
            base = self._addr
            if base + SECTOR_HEADER_SIZE + size > self._g.capacity:
                raise LogFullError("log full")
            seq = (base // lss) & 0xFFFF
            self._emit(T_SECTOR_HEADER, struct.pack("<IHB", self._ack, seq, 0))
            self._durable_ack = self._ack
        elif self._addr + size > self._g.capacity:
            raise LogFullError("log full")

    def _emit(self, type_code: int, payload: bytes) -> int:
        addr = self._addr
        self._write_bytes(bytes([type_code, len(payload)]) + payload)
        return addr

    def _write_bytes(self, blob: bytes) -> None:
        ps = self._g.page_size
        off = 0
        while off < len(blob):
            in_page = self._addr - self._page_base
            chunk = blob[off:off + ps - in_page]
            self._buf[in_page:in_page + len(chunk)] = chunk
            self._addr += len(chunk)
            off += len(chunk)
            self._dirty = True
            if self._addr - self._page_base == ps:
                self._media.page_write(self._page_base // ps, bytes(self._buf))
                self._page_base += ps
                self._buf[:] = b"\xff" * ps
                self._dirty = False

    def _seek(self, addr: int) -> None:
        # Only used to jump to a sector base, which is page-aligned.
        self._page_base = addr
        self._buf[:] = b"\xff" * self._g.page_size
        self._addr = addr
        self._dirty = False


def format_log(media: Media, tag_id: int, creation_time: int,
               registry_id: int = REGISTRY_TAG,
               logical_sector_size: int | None = None) -> LogWriter:
    return LogWriter.format(media, tag_id, creation_time, registry_id,
                            logical_sector_size)
