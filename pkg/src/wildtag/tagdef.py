"""Tag behavior definitions: radio setups, slot schedules, FSM, sensing.

The text format is a named-section file::

    [tag]
    id = 42
    period_ms = 500

    [setup ATLAS_433]
    kind = atlas-ping
    bitrate = 1000000
    ping_bits = 8192

    [config 1]
    cycle = 8
    slot ATLAS_433 = every 4 from 0, tx
    slot DATA_433 = every 8 from 7, txrx

    [transitions]
    on wakeup 1 -> config 1
    on silence 10s -> config 0

    [sensor pressure-temperature]
    every = 2
    mode = oneshot

Transitions may carry an explicit source (``on wakeup 1 from 0 -> config 1``);
without one the rule applies from every other configuration.

``compile_config_block``/``decompile_config_block`` turn a definition into a
deterministic binary block and back, reusing the wire item encoding for its
sections.
"""

from __future__ import annotations

import math
import re
import struct
from dataclasses import dataclass, field, replace

from .errors import DefinitionError
from .wire import decode_header, encode_header

SETUP_KINDS = ("atlas-ping", "data-shortrange", "data-longrange")
MODE_TX = "tx"
MODE_TXRX = "txrx"
TRIGGER_WAKEUP = "wakeup"
TRIGGER_SILENCE = "silence"

MAX_CONFIGS = 16
DEFAULT_UPLOAD_THRESHOLD = 4096

# Config block section types (block-local registry, wire header encoding).
_S_META = 1
_S_SETUP = 2
_S_CONFIG = 3
_S_TRANSITION = 4
_S_SENSOR = 5
CONFIG_BLOCK_VERSION = 1

_KIND_CODES = {k: i for i, k in enumerate(SETUP_KINDS)}
_MODE_CODES = {MODE_TX: 0, MODE_TXRX: 1}
_TRIGGER_CODES = {TRIGGER_WAKEUP: 0, TRIGGER_SILENCE: 1}


@dataclass(frozen=True)
class RadioSetup:
    name: str
    kind: str
    bitrate: int
    ping_bits: int = 0

    def validate(self):
        if self.kind not in SETUP_KINDS:
            raise DefinitionError(f"unknown setup kind {self.kind!r}")
        if self.bitrate <= 0:
            raise DefinitionError(f"setup {self.name}: bitrate must be positive")
        if self.kind == "atlas-ping" and self.ping_bits <= 0:
            raise DefinitionError(f"setup {self.name}: atlas-ping needs ping_bits")


@dataclass(frozen=True)
class SlotAllocation:
    setup: str
    every: int
    start: int
    mode: str

    def validate(self):
        if self.every <= 0:
            raise DefinitionError(f"slot {self.setup}: 'every' must be positive")
        if not 0 <= self.start < self.every:
            raise DefinitionError(f"slot {self.setup}: 'from' must be below 'every'")
        if self.mode not in (MODE_TX, MODE_TXRX):
            raise DefinitionError(f"slot {self.setup}: bad mode {self.mode!r}")


@dataclass(frozen=True)
class Configuration:
    index: int
    cycle: int
    allocations: tuple[SlotAllocation, ...]

    def validate(self, setups):
        if not 0 <= self.index < MAX_CONFIGS:
            raise DefinitionError(f"config index {self.index} out of 0..15")
        if self.cycle <= 0:
            raise DefinitionError(f"config {self.index}: cycle must be positive")
        owners = {}
        for alloc in self.allocations:
            alloc.validate()
            if alloc.setup not in setups:
                raise DefinitionError(
                    f"config {self.index}: unknown setup {alloc.setup!r}")
            if self.cycle % alloc.every:
                raise DefinitionError(
                    f"config {self.index}: cycle {self.cycle} is not a multiple "
                    f"of every={alloc.every}")
            for residue in range(alloc.start, self.cycle, alloc.every):
                if residue in owners:
                    raise DefinitionError(
                        f"config {self.index}: slot {residue} claimed by both "
                        f"{owners[residue]!r} and {alloc.setup!r}")
                owners[residue] = alloc.setup


@dataclass(frozen=True)
class Transition:
    from_config: int
    trigger: str
    argument: int  # wakeup argument, or silence seconds
    to_config: int


@dataclass(frozen=True)
class SensorSchedule:
    kind: str
    every: int
    mode: str  # "oneshot" or "burst"
    rate_hz: int = 0
    duration_s: int = 0
    samples_per_item: int = 0  # 0 = derive from payload budget

    def validate(self):
        from .sensors import SENSOR_KINDS, max_samples_per_item
        if self.kind not in SENSOR_KINDS:
            raise DefinitionError(f"unknown sensor kind {self.kind!r}")
        if self.every <= 0:
            raise DefinitionError(f"sensor {self.kind}: 'every' must be whole seconds")
        if self.mode == "burst":
            if self.rate_hz <= 0 or self.duration_s <= 0:
                raise DefinitionError(
                    f"sensor {self.kind}: burst needs rate_hz and duration_s")
            if 1_000_000 % self.rate_hz:
                raise DefinitionError(
                    f"sensor {self.kind}: rate_hz must divide 1 MHz exactly")
            if self.duration_s > self.every:
                raise DefinitionError(
                    f"sensor {self.kind}: burst duration exceeds its period")
            cap = self.samples_per_item or max_samples_per_item(self.kind, burst=True)
            if cap <= 0:
                raise DefinitionError(f"sensor {self.kind}: no room for samples")
            fragments = -(-self.rate_hz * self.duration_s // cap)
            if fragments > 256:
                raise DefinitionError(
                    f"sensor {self.kind}: burst needs {fragments} fragments, max 256")
        elif self.mode != "oneshot":
            raise DefinitionError(f"sensor {self.kind}: bad mode {self.mode!r}")


@dataclass(frozen=True)
class TagDefinition:
    tag_id: int
    period_ms: int
    setups: tuple[RadioSetup, ...]
    configurations: tuple[Configuration, ...]
    transitions: tuple[Transition, ...]
    sensors: tuple[SensorSchedule, ...]
    initial_config: int = 0
    upload_threshold: int = DEFAULT_UPLOAD_THRESHOLD
    actuator_config: int = -1  # -1: no actuator

    def setup(self, name: str) -> RadioSetup:
        for s in self.setups:
            if s.name == name:
                return s
        raise DefinitionError(f"unknown setup {name!r}")

    def config(self, index: int) -> Configuration:
        for c in self.configurations:
            if c.index == index:
                return c
        raise DefinitionError(f"no configuration {index}")

    @property
    def highest_config(self) -> int:
        return max(c.index for c in self.configurations)

    def transition_for(self, from_config: int, trigger: str, argument: int
                       ) -> Transition | None:
        for t in self.transitions:
            if t.from_config == from_config and t.trigger == trigger:
                if trigger == TRIGGER_WAKEUP and t.argument != argument:
                    continue
                return t
        return None

    def silence_timeout(self, from_config: int) -> int | None:
        timeouts = [t.argument for t in self.transitions
                    if t.from_config == from_config and t.trigger == TRIGGER_SILENCE]
        return min(timeouts) if timeouts else None

    def validate(self) -> "TagDefinition":
        if not 0 <= self.tag_id < 2 ** 64:
            raise DefinitionError("tag id must fit 64 bits")
        if self.period_ms <= 0:
            raise DefinitionError("period_ms must be positive")
        names = [s.name for s in self.setups]
        if len(set(names)) != len(names):
            raise DefinitionError("setup names must be unique")
        for s in self.setups:
            s.validate()
        if not self.configurations:
            raise DefinitionError("at least one configuration is required")
        indexes = [c.index for c in self.configurations]
        if len(set(indexes)) != len(indexes):
            raise DefinitionError("configuration indexes must be unique")
        setups = {s.name for s in self.setups}
        for c in self.configurations:
            c.validate(setups)
        if self.initial_config not in indexes:
            raise DefinitionError(f"initial config {self.initial_config} does not exist")
        if self.actuator_config >= 0 and self.actuator_config not in indexes:
            raise DefinitionError(f"actuator config {self.actuator_config} does not exist")
        seen = set()
        for t in self.transitions:
            if t.from_config not in indexes or t.to_config not in indexes:
                raise DefinitionError(
                    f"transition {t.from_config}->{t.to_config} names a missing config")
            key = (t.from_config, t.trigger,
                   t.argument if t.trigger == TRIGGER_WAKEUP else None)
            if key in seen:
                raise DefinitionError(
                    f"duplicate transition for config {t.from_config} "
                    f"on {t.trigger} {t.argument}")
            seen.add(key)
        kinds = [s.kind for s in self.sensors]
        if len(set(kinds)) != len(kinds):
            raise DefinitionError("one schedule per sensor kind")
        for s in self.sensors:
            s.validate()
        if self.upload_threshold <= 0:
            raise DefinitionError("upload threshold must be positive")
        return self

    def canonical(self) -> "TagDefinition":
        """Stable ordering so structural equality is meaningful."""
        return replace(
            self,
            setups=tuple(sorted(self.setups, key=lambda s: s.name)),
            configurations=tuple(sorted(self.configurations, key=lambda c: c.index)),
            transitions=tuple(sorted(
                self.transitions, key=lambda t: (t.from_config, t.trigger, t.argument))),
            sensors=tuple(sorted(self.sensors, key=lambda s: s.kind)),
        )


def slot_action(config: Configuration, absolute_slot: int
                ) -> tuple[str, str] | None:
    """(setup name, mode) transmitted in the given slot, or None for idle."""
    residue = absolute_slot % config.cycle
    for alloc in config.allocations:
        if residue % alloc.every == alloc.start:
            return alloc.setup, alloc.mode
    return None


# -- text format ------------------------------------------------------------

_SECTION_RE = re.compile(r"^\[([a-z-]+)(?:\s+(\S+))?\]$")
_KEY_RE = re.compile(r"^([a-z_]+)\s*=\s*(.+)$")
_SLOT_RE = re.compile(r"^slot\s+(\S+)\s*=\s*every\s+(\d+)\s+from\s+(\d+)\s*,\s*(tx|txrx)$")
_TRANSITION_RE = re.compile(
    r"^on\s+(wakeup\s+(\d+)|silence\s+(\d+)s)(?:\s+from\s+(\d+))?\s*->\s*config\s+(\d+)$")


def _int_value(raw: str, line_no: int, what: str) -> int:
    try:
        return int(raw, 0)
    except ValueError:
        raise DefinitionError(f"{what} needs an integer, got {raw!r}", line_no) from None


def parse_tagdef(text: str) -> TagDefinition:
    """Parse and fully validate a definition file."""
    tag_keys: dict[str, int] = {}
    setups: list[RadioSetup] = []
    configs: list[Configuration] = []
    raw_transitions: list[tuple[int, str, int, int | None, int]] = []
    sensors: list[SensorSchedule] = []

    section = None          # (kind, name) of the open section
    body: dict[str, object] = {}
    slots: list[SlotAllocation] = []
    section_line = 0

    def close_section():
        nonlocal section, body, slots
        if section is None:
            return
        kind, name = section
        if kind == "tag":
            tag_keys.update(body)
        elif kind == "setup":
            setups.append(RadioSetup(
                name=name,
                kind=str(body.get("kind", "")),
                bitrate=int(body.get("bitrate", 0)),
                ping_bits=int(body.get("ping_bits", 0)),
            ))
        elif kind == "config":
            configs.append(Configuration(
                index=_int_value(name, section_line, "config index"),
                cycle=int(body.get("cycle", 0)),
                allocations=tuple(slots),
            ))
        elif kind == "sensor":
            sensors.append(SensorSchedule(
                kind=name,
                every=int(body.get("every", 0)),
                mode=str(body.get("mode", "oneshot")),
                rate_hz=int(body.get("rate_hz", 0)),
                duration_s=int(body.get("duration_s", 0)),
                samples_per_item=int(body.get("samples_per_item", 0)),
            ))
        section = None
        body = {}
        slots = []

    for line_no, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        m = _SECTION_RE.match(line)
        if m:
            close_section()
            kind, name = m.group(1), m.group(2)
            if kind not in ("tag", "setup", "config", "transitions", "sensor"):
                raise DefinitionError(f"unknown section [{kind}]", line_no)
            if kind in ("setup", "config", "sensor") and not name:
                raise DefinitionError(f"section [{kind}] needs a name", line_no)
            section = (kind, name)
            section_line = line_no
            continue
        if section is None:
            raise DefinitionError("content before any section", line_no)
        kind = section[0]
        if kind == "transitions":
            m = _TRANSITION_RE.match(line)
            if not m:
                raise DefinitionError(f"bad transition line {line!r}", line_no)
            if m.group(2) is not None:
                trigger, arg = TRIGGER_WAKEUP, int(m.group(2))
            else:
                trigger, arg = TRIGGER_SILENCE, int(m.group(3))
            source = int(m.group(4)) if m.group(4) is not None else None
            raw_transitions.append((line_no, trigger, arg, source, int(m.group(5))))
            continue
        if kind == "config" and line.startswith("slot"):
            m = _SLOT_RE.match(line)
            if not m:
                raise DefinitionError(f"bad slot line {line!r}", line_no)
            slots.append(SlotAllocation(
                setup=m.group(1), every=int(m.group(2)),
                start=int(m.group(3)), mode=m.group(4)))
            continue
        m = _KEY_RE.match(line)
        if not m:
            raise DefinitionError(f"cannot parse line {line!r}", line_no,
                                  column=len(raw_line) - len(raw_line.lstrip()) + 1)
        key, value = m.group(1), m.group(2).strip()
        if kind == "setup" and key == "kind":
            body[key] = value
        elif key == "mode" and kind == "sensor":
            body[key] = value
        else:
            body[key] = _int_value(value, line_no, key)
    close_section()

    if "id" not in tag_keys:
        raise DefinitionError("missing [tag] id")
    if "period_ms" not in tag_keys:
        raise DefinitionError("missing [tag] period_ms")

    config_indexes = sorted(c.index for c in configs)
    transitions: list[Transition] = []
    for line_no, trigger, arg, source, target in raw_transitions:
        if target not in config_indexes:
            raise DefinitionError(f"transition targets missing config {target}", line_no)
        sources = [source] if source is not None else \
            [i for i in config_indexes if i != target]
        for src in sources:
            if src not in config_indexes:
                raise DefinitionError(f"transition from missing config {src}", line_no)
            transitions.append(Transition(src, trigger, arg, target))

    definition = TagDefinition(
        tag_id=int(tag_keys["id"]),
        period_ms=int(tag_keys["period_ms"]),
        setups=tuple(setups),
        configurations=tuple(configs),
        transitions=tuple(transitions),
        sensors=tuple(sensors),
        initial_config=int(tag_keys.get("initial_config", 0)),
        upload_threshold=int(tag_keys.get("upload_threshold", DEFAULT_UPLOAD_THRESHOLD)),
        actuator_config=int(tag_keys.get("actuator_config", -1)),
    ).canonical()
    return definition.validate()


def format_tagdef(definition: TagDefinition) -> str:
    """Render a definition back to the text format (canonical order)."""
    d = definition.canonical()
    out = ["[tag]",
           f"id = {d.tag_id}",
           f"period_ms = {d.period_ms}",
           f"initial_config = {d.initial_config}",
           f"upload_threshold = {d.upload_threshold}"]
    if d.actuator_config >= 0:
        out.append(f"actuator_config = {d.actuator_config}")
    for s in d.setups:
        out += ["", f"[setup {s.name}]", f"kind = {s.kind}", f"bitrate = {s.bitrate}"]
        if s.ping_bits:
            out.append(f"ping_bits = {s.ping_bits}")
    for c in d.configurations:
        out += ["", f"[config {c.index}]", f"cycle = {c.cycle}"]
        for a in c.allocations:
            out.append(f"slot {a.setup} = every {a.every} from {a.start}, {a.mode}")
    if d.transitions:
        out += ["", "[transitions]"]
        for t in d.transitions:
            trig = (f"wakeup {t.argument}" if t.trigger == TRIGGER_WAKEUP
                    else f"silence {t.argument}s")
            out.append(f"on {trig} from {t.from_config} -> config {t.to_config}")
    for s in d.sensors:
        out += ["", f"[sensor {s.kind}]", f"every = {s.every}", f"mode = {s.mode}"]
        if s.mode == "burst":
            out += [f"rate_hz = {s.rate_hz}", f"duration_s = {s.duration_s}"]
        if s.samples_per_item:
            out.append(f"samples_per_item = {s.samples_per_item}")
    return "\n".join(out) + "\n"


# -- binary config block -----------------------------------------------------

def _block_item(section_type: int, payload: bytes) -> bytes:
    return encode_header(section_type, len(payload)) + payload


def compile_config_block(definition: TagDefinition) -> bytes:
    """Deterministic binary encoding of a validated definition."""
    d = definition.canonical().validate()
    parts = [bytes([CONFIG_BLOCK_VERSION])]
    meta = struct.pack("<QHBIb", d.tag_id, d.period_ms, d.initial_config,
                       d.upload_threshold, d.actuator_config)
    parts.append(_block_item(_S_META, meta))
    setup_index = {s.name: i for i, s in enumerate(d.setups)}
    for s in d.setups:
        name = s.name.encode("ascii")
        payload = struct.pack("<BIH", _KIND_CODES[s.kind], s.bitrate, s.ping_bits) + name
        parts.append(_block_item(_S_SETUP, payload))
    for c in d.configurations:
        payload = bytearray(struct.pack("<BH", c.index, c.cycle))
        for a in c.allocations:
            payload += struct.pack("<BHHB", setup_index[a.setup], a.every,
                                   a.start, _MODE_CODES[a.mode])
        parts.append(_block_item(_S_CONFIG, bytes(payload)))
    for t in d.transitions:
        payload = struct.pack("<BBHB", t.from_config, _TRIGGER_CODES[t.trigger],
                              t.argument, t.to_config)
        parts.append(_block_item(_S_TRANSITION, payload))
    for s in d.sensors:
        from .sensors import SENSOR_KINDS
        payload = struct.pack("<BHBHHB", SENSOR_KINDS[s.kind].code, s.every,
                              0 if s.mode == "oneshot" else 1,
                              s.rate_hz, s.duration_s, s.samples_per_item)
        parts.append(_block_item(_S_SENSOR, payload))
    return b"".join(parts)


def decompile_config_block(block: bytes) -> TagDefinition:
    """Inverse of compile_config_block (up to canonical ordering)."""
    from .sensors import sensor_kind_by_code
    if not block:
        raise DefinitionError("empty config block")
    if block[0] != CONFIG_BLOCK_VERSION:
        raise DefinitionError(f"unsupported config block version {block[0]}")
    offset = 1
    meta = None
    setups: list[RadioSetup] = []
    configs: list[Configuration] = []
    transitions: list[Transition] = []
    sensors: list[SensorSchedule] = []
    kind_names = {v: k for k, v in _KIND_CODES.items()}
    mode_names = {v: k for k, v in _MODE_CODES.items()}
    trigger_names = {v: k for k, v in _TRIGGER_CODES.items()}
    while offset < len(block):
        try:
            section, length, consumed = decode_header(block, offset)
        except Exception as exc:
            raise DefinitionError(f"corrupt config block: {exc}") from exc
        start = offset + consumed
        if start + length > len(block):
            raise DefinitionError("truncated config block")
        payload = block[start:start + length]
        offset = start + length
        if section == _S_META:
            meta = struct.unpack("<QHBIb", payload)
        elif section == _S_SETUP:
            kind_code, bitrate, ping_bits = struct.unpack_from("<BIH", payload)
            name = payload[7:].decode("ascii")
            setups.append(RadioSetup(name, kind_names[kind_code], bitrate, ping_bits))
        elif section == _S_CONFIG:
            index, cycle = struct.unpack_from("<BH", payload)
            allocs = []
            for pos in range(3, len(payload), 6):
                si, every, start_slot, mode = struct.unpack_from("<BHHB", payload, pos)
                allocs.append(SlotAllocation(setups[si].name, every, start_slot,
                                             mode_names[mode]))
            configs.append(Configuration(index, cycle, tuple(allocs)))
        elif section == _S_TRANSITION:
            src, trig, arg, dst = struct.unpack("<BBHB", payload)
            transitions.append(Transition(src, trigger_names[trig], arg, dst))
        elif section == _S_SENSOR:
            code, every, mode, rate, duration, per_item = struct.unpack("<BHBHHB", payload)
            sensors.append(SensorSchedule(
                sensor_kind_by_code(code).name, every,
                "oneshot" if mode == 0 else "burst", rate, duration, per_item))
        else:
            raise DefinitionError(f"unknown config block section {section}")
    if meta is None:
        raise DefinitionError("config block has no meta section")
    tag_id, period_ms, initial, threshold, actuator = meta
    definition = TagDefinition(
        tag_id=tag_id, period_ms=period_ms,
        setups=tuple(setups), configurations=tuple(configs),
        transitions=tuple(transitions), sensors=tuple(sensors),
        initial_config=initial, upload_threshold=threshold,
        actuator_config=actuator,
    ).canonical()
    return definition.validate()


def default_pinger_definition(tag_id: int, ping_interval_s: float,
                              ping_bits: int = 8192) -> TagDefinition:
    """Plain localization pinger: one ping every ``ping_interval_s`` seconds."""
    period_ms = int(ping_interval_s * 1000)
    if period_ms <= 0 or not math.isclose(period_ms / 1000, ping_interval_s):
        raise DefinitionError("ping interval must be a whole number of milliseconds")
    return TagDefinition(
        tag_id=tag_id,
        period_ms=period_ms,
        setups=(RadioSetup("PING", "atlas-ping", 1_000_000, ping_bits),),
        configurations=(Configuration(0, 1, (SlotAllocation("PING", 1, 0, MODE_TX),)),),
        transitions=(),
        sensors=(),
    ).validate()
