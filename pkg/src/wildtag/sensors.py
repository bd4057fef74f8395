"""Sensor simulation, sample packing, and the on-log measurement item codecs.

Measurement items keep per-sample overhead at zero: a one-shot accumulation
item is a 32-bit start timestamp followed by packed samples; a burst fragment
adds a one-byte fragment index after the timestamp. Sample rate and scaling
live in the per-boot sensor-configuration items, not in the data items.

Sample encodings (little-endian):

  * pressure-temperature: 4 bytes/sample - pressure in Pa as u24, air
    temperature in whole degC as i8.
  * acceleration: 6 bytes/sample - three i16 axis readings.

The simulated sensors are pure integer functions of (seed, time), so a run
is reproducible bit for bit and a test can recompute ground truth directly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from .errors import WildtagError
from .flashlog import MAX_PAYLOAD

ONESHOT_TS_OVERHEAD = 4       # u32 start timestamp
BURST_OVERHEAD = 5            # u32 start timestamp + u8 fragment index


@dataclass(frozen=True)
class SensorKind:
    name: str
    code: int
    sample_size: int
    channels: int


SENSOR_KINDS = {
    "pressure-temperature": SensorKind("pressure-temperature", 0, 4, 2),
    "acceleration": SensorKind("acceleration", 1, 6, 3),
}

_BY_CODE = {k.code: k for k in SENSOR_KINDS.values()}


def sensor_kind_by_code(code: int) -> SensorKind:
    try:
        return _BY_CODE[code]
    except KeyError:
        raise WildtagError(f"unknown sensor kind code {code}") from None


def item_type_for(kind: SensorKind, burst: bool) -> int:
    """Log item type for a sensor's data items (16 + 2*kind, +1 for bursts)."""
    return 16 + 2 * kind.code + (1 if burst else 0)


def sensor_kind_for_item_type(type_code: int) -> tuple[SensorKind, bool] | None:
    if type_code < 16:
        return None
    code, burst = divmod(type_code - 16, 2)
    kind = _BY_CODE.get(code)
    return (kind, bool(burst)) if kind else None


def max_samples_per_item(kind_name: str, burst: bool) -> int:
    kind = SENSOR_KINDS[kind_name]
    overhead = BURST_OVERHEAD if burst else ONESHOT_TS_OVERHEAD
    return (MAX_PAYLOAD - overhead) // kind.sample_size


# -- deterministic waveforms --------------------------------------------------

_M64 = (1 << 64) - 1


def _mix(value: int) -> int:
    # splitmix64 finalizer; plenty for reproducible pseudo-measurements.
    value = (value + 0x9E3779B97F4A7C15) & _M64
    value = ((value ^ (value >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    value = ((value ^ (value >> 27)) * 0x94D049BB133111EB) & _M64
    return value ^ (value >> 31)


def sample_at(seed: int, kind: SensorKind, t_us: int) -> tuple[int, ...]:
    """Simulated reading of one sensor at an absolute simulation time."""
    h = _mix((seed << 8) ^ kind.code ^ (t_us * 2654435761))
    if kind.name == "pressure-temperature":
        pressure = 95_000 + h % 10_001          # Pa, fits u24
        temperature = -20 + (h >> 24) % 61      # degC
        return pressure, temperature
    if kind.name == "acceleration":
        return tuple(((h >> (16 * axis)) & 0xFFFF) - 0x8000 for axis in range(3))
    raise WildtagError(f"no waveform for sensor {kind.name}")


# -- sample packing ------------------------------------------------------------

def encode_samples(kind: SensorKind, samples) -> bytes:
    out = bytearray()
    for sample in samples:
        if kind.name == "pressure-temperature":
            pressure, temperature = sample
            out += struct.pack("<I", pressure)[:3]
            out += struct.pack("<b", temperature)
        else:
            out += struct.pack("<hhh", *sample)
    return bytes(out)


def decode_samples(kind: SensorKind, blob: bytes) -> list[tuple[int, ...]]:
    if len(blob) % kind.sample_size:
        raise WildtagError(
            f"{kind.name} sample blob of {len(blob)} bytes is not a multiple "
            f"of {kind.sample_size}")
    samples = []
    for pos in range(0, len(blob), kind.sample_size):
        chunk = blob[pos:pos + kind.sample_size]
        if kind.name == "pressure-temperature":
            pressure = int.from_bytes(chunk[:3], "little")
            temperature = struct.unpack("<b", chunk[3:4])[0]
            samples.append((pressure, temperature))
        else:
            samples.append(struct.unpack("<hhh", chunk))
    return samples


def build_oneshot_item(kind: SensorKind, start_ts: int, samples) -> bytes:
    return struct.pack("<I", start_ts & 0xFFFFFFFF) + encode_samples(kind, samples)


def parse_oneshot_item(kind: SensorKind, payload: bytes) -> tuple[int, list]:
    if len(payload) < ONESHOT_TS_OVERHEAD:
        raise WildtagError("one-shot item too short")
    ts = struct.unpack_from("<I", payload)[0]
    return ts, decode_samples(kind, payload[ONESHOT_TS_OVERHEAD:])


def build_burst_fragments(kind: SensorKind, start_ts: int, samples,
                          samples_per_item: int) -> list[bytes]:
    """Split one burst into indexed fragment payloads."""
    if samples_per_item <= 0:
        samples_per_item = max_samples_per_item(kind.name, burst=True)
    fragments = []
    for index, pos in enumerate(range(0, len(samples), samples_per_item)):
        chunk = samples[pos:pos + samples_per_item]
        fragments.append(struct.pack("<IB", start_ts & 0xFFFFFFFF, index)
                         + encode_samples(kind, chunk))
    return fragments


def parse_burst_fragment(kind: SensorKind, payload: bytes) -> tuple[int, int, list]:
    if len(payload) < BURST_OVERHEAD:
        raise WildtagError("burst fragment too short")
    ts, index = struct.unpack_from("<IB", payload)
    return ts, index, decode_samples(kind, payload[BURST_OVERHEAD:])


# -- sensor configuration items --------------------------------------------------

SENSOR_CONFIG_PAYLOAD = 10


def pack_sensor_config(kind: SensorKind, every: int, burst: bool, rate_hz: int,
                       duration_s: int, samples_per_item: int) -> bytes:
    return struct.pack("<BHBHHBB", kind.code, every, 1 if burst else 0,
                       rate_hz, duration_s, kind.sample_size,
                       samples_per_item & 0xFF)


def parse_sensor_config(payload: bytes):
    code, every, burst, rate_hz, duration_s, sample_size, per_item = \
        struct.unpack("<BHBHHBB", payload)
    kind = sensor_kind_by_code(code)
    if sample_size != kind.sample_size:
        raise WildtagError(
            f"sensor config for {kind.name} declares {sample_size}-byte samples")
    return kind, every, bool(burst), rate_hz, duration_s, per_item
