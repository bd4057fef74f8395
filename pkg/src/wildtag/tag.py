"""Tag runtime: slot scheduler, sensing, upload protocol, FSM, battery stalls.

The runtime is a deterministic state machine driven by the simulation
engine. Transmissions happen only on the slot grid (schedule origin plus a
whole number of periods); sensing runs on the global 1 Hz grid; replies are
handed in during the receive window that follows a tx-then-rx slot.

The battery model covers concentration polarization: at every slot wake the
supply may stall with a configured probability, in which case the voltage
relaxes back exponentially, the tag checks it once per second, and when it
recovers the scheduler restarts from a fresh origin.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from . import flashlog, sensors, wire
from .errors import LogError, LogFullError
from .media import Media
from .tagdef import MODE_TXRX, TRIGGER_WAKEUP, TagDefinition, slot_action

DEFAULT_SILENCE_WINDOW_S = 10
PERIODIC_ITEM_INTERVAL_S = 60
FIRMWARE_ID = 1

_M64 = (1 << 64) - 1


def _mix64(value: int) -> int:
    value = (value + 0x9E3779B97F4A7C15) & _M64
    value = ((value ^ (value >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    value = ((value ^ (value >> 27)) * 0x94D049BB133111EB) & _M64
    return value ^ (value >> 31)


@dataclass
class BatteryState:
    """Stochastic concentration-polarization stall model."""

    open_circuit_v: float = 3.0
    sag_v: float = 1.5
    threshold_v: float = 1.8
    stall_probability: float = 0.0
    recovery_tau_s: float = 5.0

    def recovery_seconds(self) -> int:
        """Whole seconds of 1 Hz voltage checks until recovery."""
        import math
        ocv, sag, thr = self.open_circuit_v, self.sag_v, self.threshold_v
        if sag >= thr:
            return 1
        k = 1
        while ocv - (ocv - sag) * math.exp(-k / self.recovery_tau_s) < thr:
            k += 1
            if k > 86_400:
                raise LogError("battery never recovers; check stall parameters")
        return k


@dataclass(frozen=True)
class SlotResult:
    kind: str  # "idle", "stall", "ping", "tx"
    slot_index: int
    setup: str | None = None
    mode: str | None = None
    packet: wire.Packet | None = None
    resume_us: int | None = None
    ping_bits: int = 0
    signature: int = 0
    carried_address: int | None = None


@dataclass
class SessionStats:
    boots: int = 0
    stalls: int = 0
    dropped_items: int = 0
    appended_items: int = 0
    acked_items: int = 0
    clock_sets: int = 0


class TagRuntime:
    """One tag bound to one formatted medium."""

    def __init__(self, definition: TagDefinition, media: Media, *,
                 seed: int = 0, utc_epoch: int = 0,
                 battery: BatteryState | None = None,
                 initial_clock_offset_s: int | None = None,
                 logical_sector_size: int | None = None):
        self.definition = definition
        self.media = media
        self.utc_epoch = utc_epoch
        self.battery = battery or BatteryState()
        self._lss = logical_sector_size
        self._initial_clock_offset = initial_clock_offset_s
        self._rng = random.Random(_mix64(seed ^ definition.tag_id * 0x9E37))
        self._ping_counter = 0

        self.stats = SessionStats()
        self.booted = False
        self.log: flashlog.LogWriter | None = None
        self.log_full = False
        self.actuator_on = False

        self.config_index = definition.initial_config
        self.schedule_origin_us = 0
        self._config_slot = 0
        self._next_slot_us = 0
        self.last_contact_us: int | None = None
        self.config_entry_us = 0

        self._clock_base: int | None = None  # tag clock = base + t//1e6 when set
        self._boot_s = 0

        self._upload_queue: list[int] = []
        self._accum: dict[str, tuple[int, list]] = {}  # kind -> (start_ts, samples)
        self._next_clock_item_us = 0
        self._next_log_state_us = 0

    # -- clock ---------------------------------------------------------------

    @property
    def clock_is_set(self) -> bool:
        return self._clock_base is not None

    def tag_clock(self, t_us: int) -> int:
        """The tag's idea of UTC seconds; relative to boot until set."""
        if self._clock_base is None:
            return t_us // 1_000_000 - self._boot_s
        return self._clock_base + t_us // 1_000_000

    def true_utc(self, t_us: int) -> int:
        return self.utc_epoch + t_us // 1_000_000

    # -- lifecycle -------------------------------------------------------------

    def boot(self, t_us: int) -> None:
        """Power-on: recover the log, append boot marker and sensor configs."""
        d = self.definition
        self.log_full = False
        self.log, recovery = flashlog.LogWriter.open(self.media, self._lss)
        pre_scan_boots = flashlog.scan_log(self.media, self._lss).boot_count
        resume_addr = self.log.write_addr
        boot_poison = flashlog.poison_range_before(
            self.media, resume_addr, self.media.geometry.page_size)

        session_addrs = set()
        boot_count = pre_scan_boots + 1
        try:
            session_addrs.add(self.log.log_boot(boot_count, FIRMWARE_ID))
            for schedule in d.sensors:
                kind = sensors.SENSOR_KINDS[schedule.kind]
                payload = sensors.pack_sensor_config(
                    kind, schedule.every, schedule.mode == "burst",
                    schedule.rate_hz, schedule.duration_s,
                    schedule.samples_per_item)
                session_addrs.add(self.log.append(flashlog.T_SENSOR_CONFIG, payload))
            self.log.flush()
        except LogFullError:
            self.log_full = True

        scan = flashlog.scan_log(self.media, self._lss)
        ack = self.log.ack_cursor
        queue = []
        for item in scan.items:
            if item.address < ack:
                continue
            if item.address in session_addrs:
                queue.append(item.address)
            elif item.validity == flashlog.VALID:
                if boot_poison and item.address < boot_poison[1] \
                        and item.end > boot_poison[0]:
                    continue
                queue.append(item.address)
        self._upload_queue = sorted(queue)
        self._align_ack_cursor()

        self.stats.boots += 1
        self.booted = True
        self.log_full = self.log_full or scan.write_addr >= self.log.capacity
        self.actuator_on = False
        self.config_index = d.initial_config
        self.config_entry_us = t_us
        self.schedule_origin_us = t_us
        self._config_slot = 0
        self._next_slot_us = t_us
        self.last_contact_us = None
        self._boot_s = t_us // 1_000_000
        if self._initial_clock_offset is not None:
            self._clock_base = self.utc_epoch + self._initial_clock_offset
            self._initial_clock_offset = None  # an RTC loses time across reboots
            # Declare the running clock so readers know these timestamps are
            # absolute (right or wrong) rather than boot-relative.
            now = self.tag_clock(t_us)
            try:
                addr = self.log.append(flashlog.T_CLOCK_SET,
                                       flashlog.pack_clock_set(now, now))
                self.log.flush()
                self._upload_queue.append(addr)
                self._upload_queue.sort()
            except LogFullError:
                self.log_full = True
        else:
            self._clock_base = None
        self._accum = {}
        self._next_clock_item_us = t_us
        self._next_log_state_us = t_us

    def shutdown(self) -> None:
        """Clean power removal: RAM (page buffer, accumulators) is lost."""
        self.booted = False
        self.log = None
        self._accum = {}
        self._upload_queue = []

    # -- slot scheduling ---------------------------------------------------------

    @property
    def period_us(self) -> int:
        return self.definition.period_ms * 1000

    def next_slot_time(self) -> int:
        return self._next_slot_us

    def on_slot(self, t_us: int) -> SlotResult:
        """Run one slot. The engine calls this exactly at next_slot_time()."""
        d = self.definition
        slot = self._config_slot
        if self.battery.stall_probability and \
                self._rng.random() < self.battery.stall_probability:
            resume_us = t_us + self.battery.recovery_seconds() * 1_000_000
            self.stats.stalls += 1
            # Off schedule: the scheduler restarts from the recovery instant.
            self.schedule_origin_us = resume_us
            self._config_slot = 0
            self._next_slot_us = resume_us
            return SlotResult("stall", slot, resume_us=resume_us)

        self._config_slot += 1
        self._next_slot_us = t_us + self.period_us

        action = slot_action(d.config(self.config_index), slot)
        if action is None:
            return SlotResult("idle", slot)
        setup_name, mode = action
        setup = d.setup(setup_name)
        if setup.kind == "atlas-ping":
            self._ping_counter += 1
            signature = _mix64(d.tag_id ^ (self._ping_counter * 0x2545F4914F6CDD1D))
            return SlotResult("ping", slot, setup=setup_name, mode=mode,
                              ping_bits=setup.ping_bits, signature=signature)
        packet, carried = self._build_data_packet(t_us, mode)
        return SlotResult("tx", slot, setup=setup_name, mode=mode, packet=packet,
                          carried_address=carried)

    def _build_data_packet(self, t_us: int, mode: str) -> tuple[wire.Packet, int | None]:
        d = self.definition
        will_listen = mode == MODE_TXRX
        has_data = (self.log is not None
                    and self.log.unacked_bytes >= d.upload_threshold)
        items: list = [
            wire.TagStateItem(will_listen, has_data, self.config_index),
            wire.TagIdItem(d.tag_id),
        ]
        optional: list = []
        if t_us >= self._next_clock_item_us:
            optional.append(wire.ClockItem(self.tag_clock(t_us)))
            self._next_clock_item_us = t_us + PERIODIC_ITEM_INTERVAL_S * 1_000_000
        if self.log is not None and t_us >= self._next_log_state_us:
            self.log.flush()  # announced state must be durable
            optional.append(wire.LogStateItem(
                self.log.write_addr, self.log.ack_cursor, self.log.creation_time))
            self._next_log_state_us = t_us + PERIODIC_ITEM_INTERVAL_S * 1_000_000
        carried = None
        if (self.log is not None and will_listen
                and self.config_index == d.highest_config
                and self._heard_base_recently(t_us) and self._upload_queue):
            addr = self._upload_queue[0]
            try:
                type_code, payload = self.log.read_item(addr)
                optional.append(wire.LogItemCarrier(
                    self.log.creation_time, addr, type_code, payload))
                carried = addr
            except LogError:
                self._upload_queue.pop(0)
                self._align_ack_cursor()
        # Drop optional items if the packet would overflow: Clock first, then
        # LogState, then the carried log item. TagState and TagId never drop.
        while items and optional:
            total = sum(wire.encoded_size(i) for i in items + optional)
            if total <= wire.MAX_PACKET_PAYLOAD:
                break
            dropped = optional.pop(0)
            if isinstance(dropped, wire.LogItemCarrier):
                carried = None
        return wire.build_packet(items + optional, "tag"), carried

    def _heard_base_recently(self, t_us: int) -> bool:
        if self.last_contact_us is None:
            return False
        window = self.definition.silence_timeout(self.config_index)
        if window is None:
            window = DEFAULT_SILENCE_WINDOW_S
        return t_us - self.last_contact_us <= window * 1_000_000

    # -- sensing -------------------------------------------------------------------

    def on_second(self, t_us: int) -> list[int]:
        """Whole-second tick: run due sensors, append finished items."""
        if not self.booted:
            return []
        appended: list[int] = []
        t_s = t_us // 1_000_000
        for schedule in self.definition.sensors:
            if t_s % schedule.every:
                continue
            kind = sensors.SENSOR_KINDS[schedule.kind]
            if schedule.mode == "burst":
                step_us = 1_000_000 // schedule.rate_hz
                count = schedule.rate_hz * schedule.duration_s
                samples = [sensors.sample_at(self._sensor_seed, kind,
                                             t_us + k * step_us)
                           for k in range(count)]
                fragments = sensors.build_burst_fragments(
                    kind, self.tag_clock(t_us), samples, schedule.samples_per_item)
                for payload in fragments:
                    addr = self._append_measurement(
                        sensors.item_type_for(kind, burst=True), payload)
                    if addr is not None:
                        appended.append(addr)
            else:
                sample = sensors.sample_at(self._sensor_seed, kind, t_us)
                start_ts, pending = self._accum.get(
                    schedule.kind, (self.tag_clock(t_us), []))
                pending.append(sample)
                cap = schedule.samples_per_item or \
                    sensors.max_samples_per_item(schedule.kind, burst=False)
                if len(pending) >= cap:
                    addr = self._append_measurement(
                        sensors.item_type_for(kind, burst=False),
                        sensors.build_oneshot_item(kind, start_ts, pending))
                    if addr is not None:
                        appended.append(addr)
                    self._accum.pop(schedule.kind, None)
                else:
                    self._accum[schedule.kind] = (start_ts, pending)
        return appended

    @property
    def _sensor_seed(self) -> int:
        return self.definition.tag_id

    def flush_accumulators(self) -> list[int]:
        """Close partial one-shot items (used when the clock is rebased)."""
        appended = []
        for kind_name, (start_ts, pending) in sorted(self._accum.items()):
            kind = sensors.SENSOR_KINDS[kind_name]
            addr = self._append_measurement(
                sensors.item_type_for(kind, burst=False),
                sensors.build_oneshot_item(kind, start_ts, pending))
            if addr is not None:
                appended.append(addr)
        self._accum = {}
        return appended

    def _append_measurement(self, type_code: int, payload: bytes) -> int | None:
        if self.log is None or self.log_full:
            self.stats.dropped_items += 1
            return None
        try:
            addr = self.log.append(type_code, payload)
        except LogFullError:
            self.log_full = True
            self.stats.dropped_items += 1
            return None
        self.stats.appended_items += 1
        self._upload_queue.append(addr)
        return addr

    # -- replies ---------------------------------------------------------------------

    def handle_reply(self, items: list, t_us: int) -> list[str]:
        """Process a reply received in this tag's listen window.

        Returns human-readable notes of the state changes, for the trace.
        """
        addressed = wire.find_item(items, wire.AddressedToItem)
        if addressed is None or addressed.tag_id != self.definition.tag_id:
            return []
        self.last_contact_us = t_us
        notes = []
        for item in items:
            if isinstance(item, wire.AckItem):
                note = self._handle_ack(item)
                if note:
                    notes.append(note)
            elif isinstance(item, wire.ClockItem):
                notes.append(self._set_clock(item.utc_seconds, t_us))
            elif isinstance(item, wire.WakeupItem):
                target = (self.definition.highest_config if item.to_highest
                          else item.target)
                if item.to_highest:
                    if target != self.config_index:
                        self._enter_config(target, t_us)
                        notes.append(f"wakeup-highest->config{target}")
                else:
                    rule = self.definition.transition_for(
                        self.config_index, TRIGGER_WAKEUP, item.target)
                    if rule is not None and rule.to_config != self.config_index:
                        self._enter_config(rule.to_config, t_us)
                        notes.append(f"wakeup{item.target}->config{rule.to_config}")
        return notes

    def _handle_ack(self, item: wire.AckItem) -> str | None:
        if not self._upload_queue or item.acked_address != self._upload_queue[0]:
            return None  # stale or mismatched ack: keep retransmitting
        acked = self._upload_queue.pop(0)
        self.stats.acked_items += 1
        self._align_ack_cursor()
        return f"ack@{acked}"

    def _align_ack_cursor(self) -> None:
        if self.log is None:
            return
        target = self._upload_queue[0] if self._upload_queue else self.log.write_addr
        if target > self.log.ack_cursor:
            try:
                self.log.set_ack_cursor(target)
            except LogError:
                pass  # log full while persisting a checkpoint

    def _set_clock(self, utc_seconds: int, t_us: int) -> str:
        old = self.tag_clock(t_us)
        self.flush_accumulators()
        self._clock_base = utc_seconds - t_us // 1_000_000
        self.stats.clock_sets += 1
        if self.log is not None and not self.log_full:
            try:
                addr = self.log.append(flashlog.T_CLOCK_SET,
                                       flashlog.pack_clock_set(old, utc_seconds))
                self._upload_queue.append(addr)
            except LogFullError:
                self.log_full = True
        return f"clock{old}->{utc_seconds}"

    # -- FSM -----------------------------------------------------------------------

    def _enter_config(self, index: int, t_us: int) -> None:
        self.config_index = index
        self.config_entry_us = t_us
        self._config_slot = 0
        # Stay on the period grid: the next grid instant starts the new epoch.
        origin = self.schedule_origin_us
        k = -(-(t_us + 1 - origin) // self.period_us)
        self._next_slot_us = origin + k * self.period_us
        if index == self.definition.actuator_config:
            self.actuator_on = True

    def silence_deadline_us(self) -> int | None:
        """Instant at which the silence transition for this config fires."""
        timeout = self.definition.silence_timeout(self.config_index)
        if timeout is None:
            return None
        anchor = self.config_entry_us
        if self.last_contact_us is not None:
            anchor = max(anchor, self.last_contact_us)
        return anchor + timeout * 1_000_000

    def check_silence(self, t_us: int) -> tuple[int, int] | None:
        """Apply the silence transition if it is due; returns (from, to)."""
        deadline = self.silence_deadline_us()
        if deadline is None or t_us < deadline:
            return None
        rule = None
        for t in self.definition.transitions:
            if t.from_config == self.config_index and t.trigger == "silence":
                if rule is None or t.argument < rule.argument:
                    rule = t
        if rule is None:
            return None
        before = self.config_index
        self._enter_config(rule.to_config, t_us)
        return before, rule.to_config

    # -- reporting ------------------------------------------------------------------

    def valid_item_addresses(self) -> list[int]:
        """Addresses a reader of the quiesced medium would classify valid."""
        if self.log is not None:
            self.log.flush()
        scan = flashlog.scan_log(self.media, self._lss)
        return [it.address for it in scan.items if it.validity == flashlog.VALID]
