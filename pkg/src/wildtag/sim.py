"""Deterministic discrete-event simulator for tags, stations, and a lossy channel.

Virtual time is integer microseconds. Events are ordered by (time, kind
rank, tag id, sequence number), so a scenario with a fixed seed produces a
byte-identical trace on every run. Replies are delivered inside the same
receive window as the packet that elicited them.

Scenario files use the same named-section text style as tag definitions::

    [scenario]
    seed = 7
    duration_s = 60
    utc_epoch = 1700000000

    [channel data-shortrange]
    range_m = 50
    loss = 0.0

    [tag pigeon]
    definition = basic.tagdef
    pos = 10, 0
    media = nor:page=256,sector=4096,count=64
    clock = unset

    [station gate]
    id = 9001
    pos = 0, 0
    clock = valid
    store = file
    intent wakeup tag 42 -> config 1

Optional tag keys: ``id`` (override the definition's), ``boot_at_s``,
``reboot_at_s`` (repeatable), ``sense_until_s``, ``battery`` (e.g.
``stall_p:0.01,tau:5`` ), ``path`` (waypoints ``t:x,y; t:x,y``),
``logical_sector``. Optional station keys: ``logging``, ``store`` with
``sd[:count=N]`` or ``file[:capacity=N]``.
"""

from __future__ import annotations

import heapq
import math
import random
import re
from dataclasses import dataclass, field
from pathlib import Path

from . import wire
from .basestation import BaseStation, Intent, SdLogStore, TetheredStore
from .errors import ScenarioError
from .media import Media, MediaGeometry, NOR_8MB, SD_CARD
from .tag import BatteryState, TagRuntime
from .tagdef import TagDefinition, parse_tagdef

DEFAULT_CHANNELS = {
    "data-shortrange": (50.0, 0.0),
    "data-longrange": (5000.0, 0.0),
    "atlas-ping": (0.0, 1.0),  # pings are emission metadata, never delivered
}

_RANK_REBOOT = 0
_RANK_SENSE = 1
_RANK_SILENCE = 2
_RANK_SLOT = 3


@dataclass(frozen=True)
class ChannelParams:
    range_m: float
    loss: float


def deliver(channel: ChannelParams, distance_m: float, rng: random.Random) -> bool:
    """One delivery draw: never beyond range, else succeeds with 1 - loss."""
    if distance_m > channel.range_m:
        return False
    if channel.loss <= 0.0:
        return True
    return rng.random() >= channel.loss


@dataclass
class TagSpec:
    name: str
    definition: TagDefinition
    geometry: MediaGeometry
    position: tuple[float, float] = (0.0, 0.0)
    path: list[tuple[int, float, float]] = field(default_factory=list)
    boot_at_s: int = 0
    reboot_at_s: list[int] = field(default_factory=list)
    sense_until_s: int | None = None
    clock_offset_s: int | None = None  # None: clock unset at boot
    battery: BatteryState = field(default_factory=BatteryState)
    logical_sector_size: int | None = None
    creation_time: int = 0


@dataclass
class StationSpec:
    name: str
    station_id: int
    position: tuple[float, float] = (0.0, 0.0)
    path: list[tuple[int, float, float]] = field(default_factory=list)
    clock_valid: bool = True
    logging: bool = True
    store_kind: str = "file"          # "file" or "sd"
    store_capacity: int | None = None  # records (file) or sectors (sd)
    intents: list[Intent] = field(default_factory=list)


@dataclass
class Scenario:
    seed: int = 0
    duration_s: int = 60
    utc_epoch: int = 1_700_000_000
    channels: dict[str, ChannelParams] = field(default_factory=dict)
    tags: list[TagSpec] = field(default_factory=list)
    stations: list[StationSpec] = field(default_factory=list)

    def channel(self, setup_kind: str) -> ChannelParams:
        if setup_kind in self.channels:
            return self.channels[setup_kind]
        range_m, loss = DEFAULT_CHANNELS[setup_kind]
        return ChannelParams(range_m, loss)

    def validate(self) -> "Scenario":
        if self.duration_s <= 0:
            raise ScenarioError("duration_s must be positive")
        if not self.tags:
            raise ScenarioError("scenario needs at least one tag")
        ids = [t.definition.tag_id for t in self.tags]
        if len(set(ids)) != len(ids):
            raise ScenarioError("tag ids must be unique")
        sids = [s.station_id for s in self.stations]
        if len(set(sids)) != len(sids):
            raise ScenarioError("station ids must be unique")
        for t in self.tags:
            if t.boot_at_s < 0 or t.boot_at_s > self.duration_s:
                raise ScenarioError(f"tag {t.name}: boot_at_s outside the run")
            for r in t.reboot_at_s:
                if r <= t.boot_at_s:
                    raise ScenarioError(f"tag {t.name}: reboot before boot")
        return self


def position_at(spec, t_us: int) -> tuple[float, float]:
    """Static position or piecewise-linear waypoint interpolation."""
    if not spec.path:
        return spec.position
    t_s = t_us / 1_000_000
    points = spec.path
    if t_s <= points[0][0]:
        return points[0][1], points[0][2]
    for (t0, x0, y0), (t1, x1, y1) in zip(points, points[1:]):
        if t_s <= t1:
            f = (t_s - t0) / (t1 - t0) if t1 > t0 else 1.0
            return x0 + f * (x1 - x0), y0 + f * (y1 - y0)
    return points[-1][1], points[-1][2]


def _distance(a: tuple[float, float], b: tuple[float, float]) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


# -- scenario text format ----------------------------------------------------------

_SECTION_RE = re.compile(r"^\[([a-z-]+)(?:\s+(\S+))?\]$")
_KEY_RE = re.compile(r"^([a-z_]+)\s*=\s*(.+)$")
_INTENT_RE = re.compile(
    r"^intent\s+wakeup\s+(tag\s+(\d+)|all)\s*->\s*(highest|config\s+(\d+))$")


def _parse_media(spec: str) -> MediaGeometry:
    base, _, opts = spec.partition(":")
    if base == "nor8mb" and not opts:
        return NOR_8MB
    if base in ("nor", "sd"):
        page, sector, count = (256, 4096, 64) if base == "nor" else (512, 65536, 8)
        if base == "sd" and not opts:
            return SD_CARD
        for part in filter(None, opts.split(",")):
            key, _, value = part.partition("=")
            if key == "page":
                page = int(value)
            elif key == "sector":
                sector = int(value)
            elif key == "count":
                count = int(value)
            else:
                raise ScenarioError(f"unknown media option {key!r}")
        return MediaGeometry(page, sector, count)
    raise ScenarioError(f"unknown media spec {spec!r}")


def _parse_battery(spec: str) -> BatteryState:
    battery = BatteryState()
    for part in filter(None, spec.split(",")):
        key, _, value = part.partition(":")
        key = key.strip()
        if key == "stall_p":
            battery.stall_probability = float(value)
        elif key == "tau":
            battery.recovery_tau_s = float(value)
        elif key == "ocv":
            battery.open_circuit_v = float(value)
        elif key == "sag":
            battery.sag_v = float(value)
        elif key == "threshold":
            battery.threshold_v = float(value)
        else:
            raise ScenarioError(f"unknown battery parameter {key!r}")
    return battery


def _parse_pos(value: str) -> tuple[float, float]:
    try:
        x, y = value.split(",")
        return float(x), float(y)
    except ValueError:
        raise ScenarioError(f"bad position {value!r}") from None


def _parse_path(value: str) -> list[tuple[int, float, float]]:
    points = []
    for chunk in filter(None, (c.strip() for c in value.split(";"))):
        t, _, xy = chunk.partition(":")
        x, y = _parse_pos(xy)
        points.append((int(t), x, y))
    if points != sorted(points, key=lambda p: p[0]):
        raise ScenarioError("path waypoints must be in time order")
    return points


def parse_scenario(text: str, base_dir: Path | str = ".") -> Scenario:
    base_dir = Path(base_dir)
    scenario = Scenario()
    section: tuple[str, str | None] | None = None
    tag: TagSpec | None = None
    station: StationSpec | None = None

    def need_definition(body_name: str) -> Path:
        path = base_dir / body_name
        if not path.exists():
            raise ScenarioError(f"tag definition {path} not found")
        return path

    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _SECTION_RE.match(line)
        if m:
            kind, name = m.group(1), m.group(2)
            if kind == "scenario":
                section, tag, station = (kind, None), None, None
            elif kind == "channel":
                if name not in DEFAULT_CHANNELS:
                    raise ScenarioError(f"unknown channel setup kind {name!r} "
                                        f"(line {line_no})")
                scenario.channels[name] = ChannelParams(*DEFAULT_CHANNELS[name])
                section, tag, station = (kind, name), None, None
            elif kind == "tag":
                if not name:
                    raise ScenarioError(f"[tag] needs a name (line {line_no})")
                tag = TagSpec(name=name, definition=None, geometry=NOR_8MB)  # type: ignore[arg-type]
                scenario.tags.append(tag)
                section, station = (kind, name), None
            elif kind == "station":
                if not name:
                    raise ScenarioError(f"[station] needs a name (line {line_no})")
                station = StationSpec(name=name, station_id=0)
                scenario.stations.append(station)
                section, tag = (kind, name), None
            else:
                raise ScenarioError(f"unknown section [{kind}] (line {line_no})")
            continue
        if section is None:
            raise ScenarioError(f"content before any section (line {line_no})")
        kind = section[0]
        if kind == "station" and line.startswith("intent"):
            m = _INTENT_RE.match(line)
            if not m:
                raise ScenarioError(f"bad intent line {line!r} (line {line_no})")
            tag_scope = int(m.group(2)) if m.group(2) else None
            target: int | str = "highest" if m.group(3) == "highest" else int(m.group(4))
            station.intents.append(Intent("wakeup", tag_scope, target))
            continue
        m = _KEY_RE.match(line)
        if not m:
            raise ScenarioError(f"cannot parse line {line!r} (line {line_no})")
        key, value = m.group(1), m.group(2).strip()
        if kind == "scenario":
            if key == "seed":
                scenario.seed = int(value)
            elif key == "duration_s":
                scenario.duration_s = int(value)
            elif key == "utc_epoch":
                scenario.utc_epoch = int(value)
            else:
                raise ScenarioError(f"unknown scenario key {key!r} (line {line_no})")
        elif kind == "channel":
            params = scenario.channels[section[1]]
            if key == "range_m":
                scenario.channels[section[1]] = ChannelParams(float(value), params.loss)
            elif key == "loss":
                scenario.channels[section[1]] = ChannelParams(params.range_m, float(value))
            else:
                raise ScenarioError(f"unknown channel key {key!r} (line {line_no})")
        elif kind == "tag":
            if key == "definition":
                tag.definition = parse_tagdef(need_definition(value).read_text())
            elif key == "id":
                from dataclasses import replace
                if tag.definition is None:
                    raise ScenarioError(f"set definition before id (line {line_no})")
                tag.definition = replace(tag.definition, tag_id=int(value))
            elif key == "pos":
                tag.position = _parse_pos(value)
            elif key == "path":
                tag.path = _parse_path(value)
            elif key == "media":
                tag.geometry = _parse_media(value)
            elif key == "logical_sector":
                tag.logical_sector_size = int(value)
            elif key == "boot_at_s":
                tag.boot_at_s = int(value)
            elif key == "reboot_at_s":
                tag.reboot_at_s.append(int(value))
            elif key == "sense_until_s":
                tag.sense_until_s = int(value)
            elif key == "clock":
                if value == "unset":
                    tag.clock_offset_s = None
                elif value.startswith("offset:"):
                    tag.clock_offset_s = int(value.split(":", 1)[1])
                else:
                    raise ScenarioError(f"bad clock value {value!r} (line {line_no})")
            elif key == "battery":
                tag.battery = _parse_battery(value)
            else:
                raise ScenarioError(f"unknown tag key {key!r} (line {line_no})")
        elif kind == "station":
            if key == "id":
                station.station_id = int(value)
            elif key == "pos":
                station.position = _parse_pos(value)
            elif key == "path":
                station.path = _parse_path(value)
            elif key == "clock":
                station.clock_valid = value == "valid"
            elif key == "logging":
                station.logging = value not in ("0", "no", "false")
            elif key == "store":
                base, _, opts = value.partition(":")
                if base not in ("file", "sd"):
                    raise ScenarioError(f"unknown store kind {base!r} (line {line_no})")
                station.store_kind = base
                station.store_capacity = None
                for part in filter(None, opts.split(",")):
                    okey, _, ovalue = part.partition("=")
                    if okey in ("capacity", "count"):
                        station.store_capacity = int(ovalue)
                    else:
                        raise ScenarioError(f"unknown store option {okey!r}")
            else:
                raise ScenarioError(f"unknown station key {key!r} (line {line_no})")

    for t in scenario.tags:
        if t.definition is None:
            raise ScenarioError(f"tag {t.name} has no definition")
        t.creation_time = scenario.utc_epoch
    for s in scenario.stations:
        if s.station_id == 0:
            raise ScenarioError(f"station {s.name} needs a nonzero id")
    return scenario.validate()


def load_scenario(path) -> Scenario:
    path = Path(path)
    return parse_scenario(path.read_text(), path.parent)


# -- engine -------------------------------------------------------------------------

@dataclass
class SimTag:
    spec: TagSpec
    runtime: TagRuntime
    media: Media


@dataclass
class SimStation:
    spec: StationSpec
    station: BaseStation
    media: Media | None  # SD store medium, if any


@dataclass
class SimResult:
    scenario: Scenario
    trace: list[str]
    tags: dict[str, SimTag]
    stations: dict[str, SimStation]

    def trace_text(self) -> str:
        return "\n".join(self.trace) + ("\n" if self.trace else "")


def _fmt_t(t_us: int) -> str:
    return f"{t_us // 1_000_000}.{t_us % 1_000_000:06d}"


def run(scenario: Scenario) -> SimResult:
    """Run one scenario to completion; deterministic for a fixed seed."""
    scenario.validate()
    rng_channel = random.Random(scenario.seed * 0x9E3779B1 + 1)
    duration_us = scenario.duration_s * 1_000_000
    trace: list[str] = []

    tags: dict[str, SimTag] = {}
    for spec in scenario.tags:
        media = Media(spec.geometry)
        from .flashlog import LogWriter
        LogWriter.format(media, spec.definition.tag_id, spec.creation_time,
                         logical_sector_size=spec.logical_sector_size)
        runtime = TagRuntime(
            spec.definition, media, seed=scenario.seed,
            utc_epoch=scenario.utc_epoch, battery=spec.battery,
            initial_clock_offset_s=spec.clock_offset_s,
            logical_sector_size=spec.logical_sector_size)
        tags[spec.name] = SimTag(spec, runtime, media)

    stations: dict[str, SimStation] = {}
    for sspec in scenario.stations:
        media = None
        if sspec.store_kind == "sd":
            count = sspec.store_capacity or 8
            media = Media(MediaGeometry(SD_CARD.page_size, SD_CARD.sector_size, count))
            store = SdLogStore(media, sspec.station_id, scenario.utc_epoch)
        else:
            store = TetheredStore(capacity_records=sspec.store_capacity)
        station = BaseStation(sspec.station_id, store=store,
                              has_valid_clock=sspec.clock_valid,
                              utc_epoch=scenario.utc_epoch,
                              logging_station=sspec.logging)
        for intent in sspec.intents:
            station.add_intent(intent)
        stations[sspec.name] = SimStation(sspec, station, media)

    station_order = sorted(stations.values(), key=lambda s: s.spec.station_id)

    heap: list[tuple[int, int, int, int, str, str]] = []
    seq = 0

    def push(t_us: int, rank: int, kind: str, name: str) -> None:
        nonlocal seq
        if t_us <= duration_us:
            heapq.heappush(
                heap, (t_us, rank, tags[name].spec.definition.tag_id, seq, kind, name))
            seq += 1

    for name, sim_tag in tags.items():
        push(sim_tag.spec.boot_at_s * 1_000_000, _RANK_REBOOT, "boot", name)
        for reboot_s in sim_tag.spec.reboot_at_s:
            push(reboot_s * 1_000_000, _RANK_REBOOT, "reboot", name)

    def schedule_after(name: str, t_us: int) -> None:
        tag = tags[name].runtime
        push(tag.next_slot_time(), _RANK_SLOT, "slot", name)
        deadline = tag.silence_deadline_us()
        if deadline is not None:
            push(deadline, _RANK_SILENCE, "silence", name)

    def emit(line: str) -> None:
        trace.append(line)

    def run_slot(name: str, t_us: int) -> None:
        sim_tag = tags[name]
        tag = sim_tag.runtime
        result = tag.on_slot(t_us)
        tag_id = sim_tag.spec.definition.tag_id
        ts = _fmt_t(t_us)
        if result.kind == "stall":
            emit(f"t={ts} ev=stall tag={tag_id} slot={result.slot_index} "
                 f"resume={_fmt_t(result.resume_us)}")
            return
        if result.kind == "ping":
            emit(f"t={ts} ev=ping tag={tag_id} slot={result.slot_index} "
                 f"setup={result.setup} bits={result.ping_bits} "
                 f"sig={result.signature:016x}")
            return
        if result.kind != "tx":
            return
        setup = sim_tag.spec.definition.setup(result.setup)
        channel = scenario.channel(setup.kind)
        carried = result.carried_address if result.carried_address is not None else "-"
        emit(f"t={ts} ev=tx tag={tag_id} slot={result.slot_index} "
             f"setup={result.setup} mode={result.mode} carried={carried}")
        tag_pos = position_at(sim_tag.spec, t_us)
        for sim_station in station_order:
            distance = _distance(tag_pos, position_at(sim_station.spec, t_us))
            if distance > channel.range_m:
                continue
            sid = sim_station.spec.station_id
            if not deliver(channel, distance, rng_channel):
                emit(f"t={ts} ev=drop tag={tag_id} station={sid} reason=loss")
                continue
            emit(f"t={ts} ev=rx tag={tag_id} station={sid}")
            reply = sim_station.station.handle_packet(result.packet, t_us)
            if reply is None:
                continue
            emit(f"t={ts} ev=reply station={sid} tag={tag_id} "
                 f"items={len(wire.parse_packet(reply.payload))}")
            if result.mode != "txrx":
                continue
            if not deliver(channel, distance, rng_channel):
                emit(f"t={ts} ev=reply_drop tag={tag_id} station={sid} reason=loss")
                continue
            before = tag.config_index
            notes = tag.handle_reply(wire.parse_packet(reply.payload), t_us)
            emit(f"t={ts} ev=reply_rx tag={tag_id} station={sid} "
                 f"notes={','.join(notes) if notes else '-'}")
            if tag.config_index != before:
                emit(f"t={ts} ev=transition tag={tag_id} from={before} "
                     f"to={tag.config_index} trigger=wakeup")

    while heap:
        t_us, rank, _, _, kind, name = heapq.heappop(heap)
        if t_us > duration_us:
            break
        sim_tag = tags[name]
        tag = sim_tag.runtime
        tag_id = sim_tag.spec.definition.tag_id
        if kind in ("boot", "reboot"):
            if kind == "reboot":
                if tag.booted:
                    tag.shutdown()
                    sim_tag.media.power_cycle()
                    emit(f"t={_fmt_t(t_us)} ev=reboot tag={tag_id}")
            tag.boot(t_us)
            emit(f"t={_fmt_t(t_us)} ev=boot tag={tag_id} boots={tag.stats.boots} "
                 f"config={tag.config_index}")
            next_second = -(-t_us // 1_000_000) * 1_000_000
            push(next_second, _RANK_SENSE, "sense", name)
            schedule_after(name, t_us)
        elif kind == "sense":
            if tag.booted:
                until = sim_tag.spec.sense_until_s
                if until is None or t_us <= until * 1_000_000:
                    appended = tag.on_second(t_us)
                    if appended:
                        emit(f"t={_fmt_t(t_us)} ev=log tag={tag_id} "
                             f"appended={len(appended)}")
                    if tag.log_full and appended == []:
                        pass
            push(t_us + 1_000_000, _RANK_SENSE, "sense", name)
        elif kind == "slot":
            if not tag.booted:
                continue
            expected = tag.next_slot_time()
            if t_us < expected:
                push(expected, _RANK_SLOT, "slot", name)
                continue
            if t_us > expected:
                continue  # superseded by a scheduler restart
            run_slot(name, t_us)
            schedule_after(name, t_us)
        elif kind == "silence":
            if not tag.booted:
                continue
            change = tag.check_silence(t_us)
            if change is not None:
                emit(f"t={_fmt_t(t_us)} ev=transition tag={tag_id} "
                     f"from={change[0]} to={change[1]} trigger=silence")
                schedule_after(name, t_us)
            else:
                deadline = tag.silence_deadline_us()
                if deadline is not None and deadline > t_us:
                    push(deadline, _RANK_SILENCE, "silence", name)

    return SimResult(scenario, trace, tags, stations)
