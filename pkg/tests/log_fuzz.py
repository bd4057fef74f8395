"""Shared fuzzing machinery for the log layer.

``linear_scan_oracle`` is an independent, deliberately simple reference for
recovery: it walks every sector from address zero (no binary search) and
gathers every self-validating cursor commit on the way. The fuzz trials
drive a writer through a random workload with an injected power loss, then
check three things: recovery equals the oracle, every valid-classified item
matches bytes that were actually requested, and the data lost is confined
to the crashed page plus the final pre-crash item.
"""

from __future__ import annotations

import binascii
import random
import struct
from dataclasses import dataclass, field

from wildtag import flashlog
from wildtag.errors import LogFullError, PowerLossError
from wildtag.media import FaultPlan, Media, MediaGeometry

FUZZ_GEOMETRY = MediaGeometry(page_size=256, sector_size=2048, sector_count=12)


def linear_scan_oracle(media, logical_sector_size=None):
    """(write_addr, ack_cursor) by exhaustive linear scan."""
    g = media.geometry
    lss = logical_sector_size or g.sector_size
    data = media.data
    page = g.page_size

    def erased(lo, hi):
        return not bytes(data[lo:hi]).strip(b"\xff")

    if data[0] != 1 or data[1] != 22 or bytes(data[2:6]) != b"TLG1":
        raise ValueError("bad log header")

    commits = []
    write_addr = 24
    n_sectors = g.capacity // lss
    for sector in range(n_sectors):
        base, end = sector * lss, (sector + 1) * lss
        if sector and erased(base, end):
            break
        addr = 24 if sector == 0 else base
        while True:
            if addr + 2 <= end and 1 <= data[addr] <= 254 and data[addr + 1] <= 224 \
                    and addr + 2 + data[addr + 1] <= end:
                t, size = data[addr], data[addr + 1]
                payload = bytes(data[addr + 2:addr + 2 + size])
                if t == flashlog.T_SECTOR_HEADER and size == 7 and addr % lss == 0:
                    ack, seq, flags = struct.unpack("<IHB", payload)
                    if flags == 0 and seq == (addr // lss) & 0xFFFF:
                        commits.append(ack)
                elif t == flashlog.T_ACK_CHECKPOINT and size == 6:
                    (crc,) = struct.unpack("<H", payload[4:])
                    if binascii.crc_hqx(payload[:4], 0xA55A) == crc:
                        commits.append(struct.unpack("<I", payload[:4])[0])
                addr += 2 + size
                continue
            tail = bytes(data[addr:end]).rstrip(b"\xff")
            if not tail:
                write_addr = addr
                break
            junk_end = addr + len(tail)
            p = (addr // page + 1) * page
            resume = None
            while p + 6 <= end:
                if data[p] == flashlog.T_BOOT_MARKER and data[p + 1] == 4:
                    resume = p
                    break
                p += page
            if resume is None:
                top = max(addr, junk_end)
                write_addr = -(-top // page) * page
                break
            addr = resume
    ack = max([c for c in commits if 24 <= c <= write_addr], default=24)
    return write_addr, ack


@dataclass
class TrialResult:
    crashed: bool
    fault_page: int | None
    history: dict[int, tuple[int, bytes]]
    session2: dict[int, tuple[int, bytes]] = field(default_factory=dict)
    phantom_valid: list[int] = field(default_factory=list)
    corrupt_valid: list[int] = field(default_factory=list)
    excess_loss: list[int] = field(default_factory=list)
    recover_matches_oracle: bool = True
    reboot_ack: int | None = None
    pre_crash_ack: int = flashlog.LOG_HEADER_SIZE


def _expected_structural(item, media, lss) -> bool:
    """Writer-emitted structural items validate themselves."""
    if item.type_code == flashlog.T_SECTOR_HEADER:
        if len(item.payload) != 7 or item.address % lss:
            return False
        ack, seq, flags = struct.unpack("<IHB", item.payload)
        return flags == 0 and seq == (item.address // lss) & 0xFFFF
    if item.type_code == flashlog.T_ACK_CHECKPOINT:
        if len(item.payload) != 6:
            return False
        (crc,) = struct.unpack("<H", item.payload[4:])
        return binascii.crc_hqx(item.payload[:4], 0xA55A) == crc
    return False


def _check_scan(scan, known: dict, media, lss, result: TrialResult) -> None:
    for item in scan.items:
        if item.address == 0 or item.validity != flashlog.VALID:
            continue
        expected = known.get(item.address)
        if expected is None:
            if not _expected_structural(item, media, lss):
                result.phantom_valid.append(item.address)
        elif expected != (item.type_code, bytes(item.payload)):
            result.corrupt_valid.append(item.address)


def run_power_loss_trial(trial_seed: int,
                         geometry: MediaGeometry = FUZZ_GEOMETRY,
                         reboot: bool = True) -> TrialResult:
    """One fault-injected workload; returns every observed violation."""
    rng = random.Random(trial_seed)
    lss = geometry.sector_size
    fail_at = rng.randint(1, 140)
    media = Media(geometry, FaultPlan(fail_at, seed=trial_seed ^ 0x5EED))
    try:
        writer = flashlog.LogWriter.format(media, tag_id=trial_seed,
                                           creation_time=1 << 30)
    except PowerLossError:
        # Power died while the header was being laid down. The medium holds a
        # torn header; recovery must refuse it rather than invent a log.
        media.power_cycle()
        result = TrialResult(crashed=True, fault_page=0, history={})
        try:
            flashlog.recover(media)
        except flashlog.LogError:
            pass
        else:
            header = media.read(0, flashlog.LOG_HEADER_SIZE)
            intact = (header[0] == flashlog.T_LOG_HEADER
                      and header[2:6] == flashlog.LOG_MAGIC)
            if not intact:
                result.phantom_valid.append(0)
        return result

    history: dict[int, tuple[int, bytes]] = {}
    crashed = False
    try:
        for _ in range(rng.randint(5, 320)):
            roll = rng.random()
            if roll < 0.72:
                type_code = rng.randint(16, 120)
                size = rng.choice((0, 1, 3, 7, 16, 40, 64, 120, 224))
                payload = rng.randbytes(size)
                addr = writer.append(type_code, payload)
                history[addr] = (type_code, payload)
            elif roll < 0.84:
                writer.flush()
            elif history:
                # Advance item-wise, like the real upload protocol does.
                bounds = sorted(a for a in history if a >= writer.ack_cursor)
                for target in bounds[:rng.randint(1, 6)]:
                    writer.set_ack_cursor(target)
                if not bounds:
                    writer.set_ack_cursor(writer.write_addr)
    except PowerLossError:
        crashed = True
    except LogFullError:
        pass

    result = TrialResult(crashed=crashed, fault_page=media.failed_page,
                         history=history, pre_crash_ack=writer.ack_cursor)
    pre_write_addr = writer.write_addr
    media.power_cycle()

    cursor, _ = flashlog.recover(media)
    oracle = linear_scan_oracle(media)
    result.recover_matches_oracle = \
        (cursor.write_addr, cursor.ack_cursor) == oracle
    _check_scan(flashlog.scan_log(media), history, media, lss, result)

    if reboot:
        writer2, _ = flashlog.LogWriter.open(media)
        result.reboot_ack = writer2.ack_cursor
        poison_anchor = media.last_data_before(writer2.write_addr)
        reboot_poison_page = None if poison_anchor is None \
            else poison_anchor // geometry.page_size
        session2: dict[int, tuple[int, bytes]] = {}
        try:
            marker = flashlog.pack_boot_marker(2, 1)
            session2[writer2.log_boot(2, 1)] = (flashlog.T_BOOT_MARKER, marker)
            for _ in range(rng.randint(0, 40)):
                type_code = rng.randint(16, 120)
                payload = rng.randbytes(rng.choice((0, 2, 9, 33, 80)))
                session2[writer2.append(type_code, payload)] = (type_code, payload)
            writer2.flush()
        except LogFullError:
            pass
        result.session2 = session2
        known = dict(history)
        known.update(session2)
        scan2 = flashlog.scan_log(media)
        _check_scan(scan2, known, media, lss, result)

        # Loss accounting: requested items may only disappear if they touch
        # the crashed page (or the still-buffered frontier page), the page
        # the recovery distrusts, or are the final item.
        valid_addrs = {it.address for it in scan2.items
                       if it.validity == flashlog.VALID}
        page = geometry.page_size
        lossy_pages = {reboot_poison_page}
        if media.failed_page is not None:
            lossy_pages.add(media.failed_page)
        else:
            lossy_pages.add(max(pre_write_addr - 1, 0) // page)
        lossy_pages.discard(None)
        last_addr = max(history, default=None)
        for addr, (_, payload) in history.items():
            if addr in valid_addrs:
                continue
            end = addr + 2 + len(payload)
            touches = any(addr < (p + 1) * page and end > p * page
                          for p in lossy_pages)
            if not touches and addr != last_addr:
                result.excess_loss.append(addr)
    return result
