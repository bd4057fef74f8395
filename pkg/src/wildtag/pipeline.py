"""Ingest received log items into a keyed store and rebuild sensor series.

The store is an append table keyed by (tag id, log creation time, item
address); ingestion is idempotent on that key and byte-equality is enforced
when the same key arrives twice. The store file is written in canonical key
order, so any permutation of ingestion batches produces an identical file.

Series extraction expands one-shot accumulation items (start timestamp plus
packed samples on a fixed interval) and reassembles burst fragments by
(start timestamp, fragment index). Timestamps are integer microseconds UTC.
Items recorded as suspect are kept in the store but never enter a series.
Sessions whose clock was never disciplined are reported and skipped.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

from . import flashlog, sensors
from .basestation import RECORD_SUSPECT_FLAG, ReceivedRecord
from .errors import StoreError, WildtagError
from .media import Media
from .tagdef import TagDefinition

STORE_MAGIC = b"TST1"
STORE_VERSION = 1


@dataclass
class IngestReport:
    inserted: int = 0
    duplicates: int = 0
    conflicts: list[tuple[int, int, int]] = field(default_factory=list)


class ItemStore:
    """Keyed table of received records; one writer, many readers."""

    def __init__(self):
        self._records: dict[tuple[int, int, int], ReceivedRecord] = {}

    def __len__(self) -> int:
        return len(self._records)

    def __contains__(self, key) -> bool:
        return key in self._records

    def get(self, key) -> ReceivedRecord | None:
        return self._records.get(key)

    def records(self) -> list[ReceivedRecord]:
        return [self._records[k] for k in sorted(self._records)]

    def records_for(self, tag_id: int, creation_time: int | None = None
                    ) -> list[ReceivedRecord]:
        out = [r for k, r in sorted(self._records.items())
               if r.tag_id == tag_id
               and (creation_time is None or r.creation_time == creation_time)]
        return out

    def creations_for(self, tag_id: int) -> list[int]:
        return sorted({r.creation_time for r in self._records.values()
                       if r.tag_id == tag_id})

    def ingest(self, records) -> IngestReport:
        """Insert new keys; equal duplicates count, unequal bytes conflict
        (first write wins)."""
        report = IngestReport()
        for record in records:
            existing = self._records.get(record.key)
            if existing is None:
                self._records[record.key] = record
                report.inserted += 1
            elif (existing.payload == record.payload
                  and existing.item_type == record.item_type):
                report.duplicates += 1
            else:
                report.conflicts.append(record.key)
        return report

    # -- file form ------------------------------------------------------------

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(STORE_MAGIC + bytes([STORE_VERSION]))
            for record in self.records():  # canonical key order
                blob = record.to_bytes()
                fh.write(struct.pack("<H", len(blob)))
                fh.write(blob)

    @classmethod
    def load(cls, path) -> "ItemStore":
        blob = Path(path).read_bytes()
        if blob[:4] != STORE_MAGIC:
            raise StoreError(f"{path}: not a store file")
        if blob[4] != STORE_VERSION:
            raise StoreError(f"{path}: unsupported store version {blob[4]}")
        store = cls()
        offset = 5
        while offset < len(blob):
            if offset + 2 > len(blob):
                raise StoreError(f"{path}: truncated store file")
            (size,) = struct.unpack_from("<H", blob, offset)
            record, end = ReceivedRecord.from_bytes(blob[offset + 2:offset + 2 + size])
            if end != size:
                raise StoreError(f"{path}: record length mismatch")
            store.ingest([record])
            offset += 2 + size
        return store


def records_from_media(media: Media, logical_sector_size: int | None = None
                       ) -> list[ReceivedRecord]:
    """Read a physically retrieved tag medium straight into records.

    Suspect items are flagged rather than dropped so reports can list them.
    """
    scan = flashlog.scan_log(media, logical_sector_size)
    out = []
    for item in scan.items:
        if item.type_code == flashlog.T_LOG_HEADER:
            continue
        flags = 0 if item.validity == flashlog.VALID else RECORD_SUSPECT_FLAG
        out.append(ReceivedRecord(
            tag_id=scan.tag_id, creation_time=scan.creation_time,
            address=item.address, item_type=item.type_code,
            payload=item.payload, rx_time_us=0, station_id=0, flags=flags))
    return out


# -- series extraction ----------------------------------------------------------

@dataclass(frozen=True)
class GapAnnotation:
    kind: str          # "missing-fragment", "missing-range", "unrebased-session"
    start_us: int
    end_us: int
    count: int         # samples or bytes covered, depending on kind
    detail: str = ""


@dataclass
class SensorSeries:
    sensor: str
    samples: list[tuple[int, tuple[int, ...]]] = field(default_factory=list)
    gaps: list[GapAnnotation] = field(default_factory=list)

    def values(self) -> list[tuple[int, ...]]:
        return [v for _, v in self.samples]

    def timestamps_us(self) -> list[int]:
        return [t for t, _ in self.samples]


@dataclass(frozen=True)
class _SensorParams:
    every: int
    burst: bool
    rate_hz: int
    duration_s: int
    samples_per_item: int


def _config_records(records, kind: sensors.SensorKind) -> list[tuple[int, _SensorParams]]:
    out = []
    for r in records:
        if r.item_type != flashlog.T_SENSOR_CONFIG or r.suspect:
            continue
        try:
            k, every, burst, rate, duration, per_item = \
                sensors.parse_sensor_config(r.payload)
        except (WildtagError, struct.error):
            continue
        if k.code != kind.code:
            continue
        if not per_item:
            per_item = sensors.max_samples_per_item(kind.name, burst=burst)
        out.append((r.address, _SensorParams(every, burst, rate, duration, per_item)))
    return out


def _params_for(configs, address: int, kind: sensors.SensorKind,
                definition: TagDefinition | None, where: str) -> _SensorParams:
    best = None
    for addr, params in configs:
        if addr <= address and (best is None or addr > best[0]):
            best = (addr, params)
    if best is not None:
        return best[1]
    if definition is not None:
        for schedule in definition.sensors:
            if schedule.kind == kind.name:
                per_item = schedule.samples_per_item or sensors.max_samples_per_item(
                    kind.name, burst=schedule.mode == "burst")
                return _SensorParams(schedule.every, schedule.mode == "burst",
                                     schedule.rate_hz, schedule.duration_s, per_item)
    if configs:
        return configs[0][1]
    raise StoreError(f"no sensor configuration for {kind.name} in {where} "
                     "and no tag definition supplied")


def _clock_deltas(records) -> list[tuple[int, int]]:
    """(clock-set address, rebase delta) per disciplined instant, plus session
    boundaries. The delta applying to an item is the one of the first
    clock-set at a higher address within the same session; 0 after the last."""
    deltas = []
    for r in records:
        if r.item_type != flashlog.T_CLOCK_SET or r.suspect:
            continue
        if len(r.payload) != flashlog.CLOCK_SET_PAYLOAD:
            continue
        old, new = flashlog.parse_clock_set(r.payload)
        deltas.append((r.address, new - old))
    return deltas


def _sessions(records) -> list[tuple[int, int]]:
    """Address ranges [start, end) split at boot markers."""
    bounds = [r.address for r in records
              if r.item_type == flashlog.T_BOOT_MARKER and not r.suspect]
    if not records:
        return []
    start = records[0].address
    end = records[-1].address + 1
    edges = [start] + [b for b in bounds if b > start] + [end]
    return [(a, b) for a, b in zip(edges, edges[1:]) if a < b]


def extract_series(store: ItemStore, tag_id: int, creation_time: int,
                   sensor: str, definition: TagDefinition | None = None
                   ) -> SensorSeries:
    """Timestamped samples for one sensor of one log, with annotated gaps."""
    if sensor not in sensors.SENSOR_KINDS:
        raise StoreError(f"unknown sensor kind {sensor!r}")
    kind = sensors.SENSOR_KINDS[sensor]
    where = f"tag {tag_id} log {creation_time}"
    records = store.records_for(tag_id, creation_time)
    if not records:
        return SensorSeries(sensor)
    configs = _config_records(records, kind)
    deltas = _clock_deltas(records)
    sessions = _sessions(records)
    series = SensorSeries(sensor)

    def session_of(address: int) -> tuple[int, int]:
        for a, b in sessions:
            if a <= address < b:
                return a, b
        return 0, records[-1].address + 1

    def delta_for(address: int) -> int | None:
        # The applicable rebase is the first clock-set after the item within
        # its session; items written after the last set are already on UTC.
        # A session without any clock-set never saw a disciplined clock, so
        # its timestamps cannot be placed on the UTC axis at all.
        lo, hi = session_of(address)
        session_deltas = [(a, d) for a, d in deltas if lo <= a < hi]
        if not session_deltas:
            return None
        later = [d for a, d in session_deltas if a > address]
        return later[0] if later else 0

    oneshot_type = sensors.item_type_for(kind, burst=False)
    burst_type = sensors.item_type_for(kind, burst=True)
    bursts: dict[int, dict[int, list]] = {}
    burst_params: dict[int, _SensorParams] = {}
    unrebased = 0

    for r in records:
        if r.suspect or r.item_type not in (oneshot_type, burst_type):
            continue
        params = _params_for(configs, r.address, kind, definition, where)
        delta = delta_for(r.address)
        if delta is None:
            unrebased += 1
            continue
        if r.item_type == oneshot_type:
            try:
                ts, samples = sensors.parse_oneshot_item(kind, r.payload)
            except WildtagError:
                continue
            base_us = (ts + delta) * 1_000_000
            for k, sample in enumerate(samples):
                series.samples.append((base_us + k * params.every * 1_000_000, sample))
        else:
            try:
                ts, index, samples = sensors.parse_burst_fragment(kind, r.payload)
            except WildtagError:
                continue
            start_us = (ts + delta) * 1_000_000
            bursts.setdefault(start_us, {})[index] = samples
            burst_params[start_us] = params

    for start_us in sorted(bursts):
        params = burst_params[start_us]
        fragments = bursts[start_us]
        step_us = 1_000_000 // params.rate_hz if params.rate_hz else 0
        total = params.rate_hz * params.duration_s
        per_item = params.samples_per_item
        expected_fragments = -(-total // per_item) if per_item else 0
        for index in range(expected_fragments):
            offset = index * per_item
            if index in fragments:
                for j, sample in enumerate(fragments[index]):
                    series.samples.append(
                        (start_us + (offset + j) * step_us, sample))
            else:
                count = min(per_item, total - offset)
                series.gaps.append(GapAnnotation(
                    "missing-fragment",
                    start_us + offset * step_us,
                    start_us + (offset + count) * step_us,
                    count,
                    detail=f"fragment {index} of burst at {start_us}us"))
        for index in sorted(fragments):
            if index >= expected_fragments:
                for j, sample in enumerate(fragments[index]):
                    series.samples.append(
                        (start_us + (index * per_item + j) * step_us, sample))

    if unrebased:
        series.gaps.append(GapAnnotation(
            "unrebased-session", 0, 0, unrebased,
            detail="items with undisciplined clock left out"))
    series.samples.sort(key=lambda s: s[0])
    series.gaps.sort(key=lambda g: (g.start_us, g.detail))
    return series


def export_series_text(series: SensorSeries) -> str:
    """Delimited text: timestamp, gap flag, values (or gap annotation)."""
    kind = sensors.SENSOR_KINDS[series.sensor]
    header = "\t".join(["timestamp_us", "gap"]
                       + [f"v{i}" for i in range(kind.channels)])
    lines = [f"# sensor={series.sensor}", header]
    rows = [(t, 0, values) for t, values in series.samples]
    rows += [(g.start_us, 1, g) for g in series.gaps]
    rows.sort(key=lambda r: (r[0], r[1]))
    for t, flag, payload in rows:
        if flag == 0:
            lines.append("\t".join([str(t), "0"] + [str(v) for v in payload]))
        else:
            lines.append(f"{t}\t1\t{payload.kind}:{payload.count}\t{payload.detail}")
    return "\n".join(lines) + "\n"


# -- barometric altitude ----------------------------------------------------------

#: International standard atmosphere constants for the barometric formula.
ALTITUDE_SCALE_M = 44_330.0
PRESSURE_EXPONENT = 1 / 5.255


def pressure_to_altitude(pressure_pa: float, reference_pa: float) -> float:
    """Altitude in meters from static pressure and a sea-level reference."""
    if pressure_pa <= 0 or reference_pa <= 0:
        raise WildtagError("pressures must be positive")
    return ALTITUDE_SCALE_M * (1.0 - (pressure_pa / reference_pa) ** PRESSURE_EXPONENT)


# -- session reporting ---------------------------------------------------------------

@dataclass
class SessionReport:
    tag_id: int
    creation_time: int
    boots: list[tuple[int, int]] = field(default_factory=list)  # (address, count)
    missing_boot_marker: bool = False
    coverage_gaps: list[tuple[int, int]] = field(default_factory=list)
    suspect_items: int = 0
    clock_sets: list[tuple[int, int, int]] = field(default_factory=list)
    record_count: int = 0

    def format_text(self) -> str:
        lines = [f"tag {self.tag_id} log {self.creation_time}: "
                 f"{self.record_count} records, {len(self.boots)} boots"]
        if self.missing_boot_marker:
            lines.append("  warning: first received item is not a boot marker "
                         "(possible boot-marker loss)")
        for addr, count in self.boots:
            lines.append(f"  boot #{count} at {addr}")
        for old, new, addr in self.clock_sets:
            lines.append(f"  clock set at {addr}: {old} -> {new}")
        for start, end in self.coverage_gaps:
            lines.append(f"  coverage gap: addresses [{start}, {end})")
        if self.suspect_items:
            lines.append(f"  {self.suspect_items} suspect items excluded")
        return "\n".join(lines) + "\n"


def session_report(store: ItemStore, tag_id: int,
                   creation_time: int | None = None,
                   logical_sector_size: int = 4096) -> list[SessionReport]:
    """Boots, coverage gaps, suspect counts, clock events per log instance."""
    reports = []
    for creation in (store.creations_for(tag_id) if creation_time is None
                     else [creation_time]):
        records = store.records_for(tag_id, creation)
        report = SessionReport(tag_id, creation, record_count=len(records))
        if not records:
            reports.append(report)
            continue
        first = records[0]
        report.missing_boot_marker = first.item_type != flashlog.T_BOOT_MARKER
        for r in records:
            if r.suspect:
                report.suspect_items += 1
            if r.item_type == flashlog.T_BOOT_MARKER and not r.suspect \
                    and len(r.payload) == flashlog.BOOT_MARKER_PAYLOAD:
                count, _ = flashlog.parse_boot_marker(r.payload)
                report.boots.append((r.address, count))
            if r.item_type == flashlog.T_CLOCK_SET and not r.suspect \
                    and len(r.payload) == flashlog.CLOCK_SET_PAYLOAD:
                old, new = flashlog.parse_clock_set(r.payload)
                report.clock_sets.append((old, new, r.address))
        lss = logical_sector_size
        for current, nxt in zip(records, records[1:]):
            end = current.address + flashlog.ITEM_HEADER_SIZE + len(current.payload)
            if nxt.address == end:
                continue
            sector_base = (end // lss + 1) * lss
            if nxt.address == sector_base \
                    and nxt.item_type == flashlog.T_SECTOR_HEADER:
                continue  # benign end-of-sector skip
            report.coverage_gaps.append((end, nxt.address))
        reports.append(report)
    return reports
