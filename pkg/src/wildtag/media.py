"""Simulated nonvolatile page-write devices (NOR-flash-like and SD-like).

Both profiles behave like flash from the log layer's point of view: every
byte starts in the erased state (0xFF) and a write can only clear bits,
never set them. Writes land one whole page at a time.

A :class:`FaultPlan` injects a power loss at a chosen write ordinal. The
faulted page keeps a committed prefix of random length; the rest of that
page is AND-masked with random bytes; the device then refuses further
writes. Corruption is confined to the faulted page, which is what the log
layer's recovery and integrity rules are designed around.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

from .errors import MediaError, MediaFailedError, PowerLossError

ERASED = 0xFF


@dataclass(frozen=True)
class MediaGeometry:
    """Page/sector layout of one device."""

    page_size: int
    sector_size: int
    sector_count: int

    def __post_init__(self):
        if self.page_size <= 0 or self.sector_size <= 0 or self.sector_count <= 0:
            raise MediaError("geometry fields must be positive")
        if self.sector_size % self.page_size:
            raise MediaError("sector_size must be a multiple of page_size")

    @property
    def capacity(self) -> int:
        return self.sector_size * self.sector_count

    @property
    def page_count(self) -> int:
        return self.capacity // self.page_size

    @property
    def pages_per_sector(self) -> int:
        return self.sector_size // self.page_size


#: 8 MB SPI NOR flash: 256-byte pages, 4 KB sectors.
NOR_8MB = MediaGeometry(page_size=256, sector_size=4096, sector_count=2048)
#: Raw SD card profile: 512-byte pages, 64 KB logical sectors, 16 MB total.
SD_CARD = MediaGeometry(page_size=512, sector_size=65536, sector_count=256)

PROFILES = {"nor8mb": NOR_8MB, "sd": SD_CARD}


@dataclass(frozen=True)
class FaultPlan:
    """Power loss at the page write with 1-based ordinal ``fail_at_write``."""

    fail_at_write: int
    seed: int = 0


class Media:
    """One simulated device. Single owner; no internal locking."""

    def __init__(self, geometry: MediaGeometry, fault_plan: FaultPlan | None = None):
        self.geometry = geometry
        self.data = bytearray(b"\xff" * geometry.capacity)
        self.fault_plan = fault_plan
        self.write_count = 0
        self.failed = False
        self.failed_page: int | None = None

    # -- writes ----------------------------------------------------------

    def page_write(self, page_index: int, data: bytes) -> None:
        g = self.geometry
        if self.failed:
            raise MediaFailedError("write to failed device")
        if not 0 <= page_index < g.page_count:
            raise MediaError(f"page index {page_index} out of range")
        if len(data) != g.page_size:
            raise MediaError(f"page write needs {g.page_size} bytes, got {len(data)}")
        self.write_count += 1
        base = page_index * g.page_size
        plan = self.fault_plan
        if plan is not None and self.write_count == plan.fail_at_write:
            rng = random.Random(plan.seed)
            cut = rng.randint(0, g.page_size)
            scramble = rng.randbytes(g.page_size - cut)
            self._and_range(base, data[:cut] + scramble)
            self.failed = True
            self.failed_page = page_index
            raise PowerLossError(f"power lost during write #{self.write_count} (page {page_index})")
        self._and_range(base, data)

    def _and_range(self, base: int, data: bytes) -> None:
        # Flash semantics: new value = old AND written. Big-int AND keeps
        # this fast enough for fuzzing.
        end = base + len(data)
        old = int.from_bytes(self.data[base:end], "little")
        new = old & int.from_bytes(data, "little")
        if new != old:
            self.data[base:end] = new.to_bytes(len(data), "little")

    def power_cycle(self, fault_plan: FaultPlan | None = None) -> None:
        """Bring a failed device back up, optionally arming a new fault plan."""
        self.failed = False
        self.failed_page = None
        self.fault_plan = fault_plan
        self.write_count = 0

    def erase_sector(self, sector_index: int) -> None:
        """Return one geometry sector to the erased state (unused by the log)."""
        g = self.geometry
        if self.failed:
            raise MediaFailedError("erase on failed device")
        if not 0 <= sector_index < g.sector_count:
            raise MediaError(f"sector index {sector_index} out of range")
        base = sector_index * g.sector_size
        self.data[base:base + g.sector_size] = b"\xff" * g.sector_size

    # -- reads (allowed even after failure, for post-mortem analysis) -----

    def read(self, offset: int, length: int) -> bytes:
        if length < 0 or offset < 0 or offset + length > self.geometry.capacity:
            raise MediaError(f"read [{offset}, {offset + length}) out of range")
        return bytes(self.data[offset:offset + length])

    def is_sector_erased(self, sector_index: int) -> bool:
        g = self.geometry
        if not 0 <= sector_index < g.sector_count:
            raise MediaError(f"sector index {sector_index} out of range")
        base = sector_index * g.sector_size
        return self.is_range_erased(base, base + g.sector_size)

    def is_range_erased(self, start: int, end: int) -> bool:
        return not bytes(self.data[start:end]).strip(b"\xff")

    def last_data_before(self, end: int) -> int | None:
        """Index of the last non-erased byte below ``end``, or None."""
        view = self.data
        pos = min(end, self.geometry.capacity)
        step = 4096
        while pos > 0:
            start = max(0, pos - step)
            chunk = bytes(view[start:pos])
            stripped = chunk.rstrip(b"\xff")
            if stripped:
                return start + len(stripped) - 1
            pos = start
        return None

    # -- image interchange -------------------------------------------------

    def to_bytes(self) -> bytes:
        return bytes(self.data)

    @classmethod
    def from_bytes(cls, image: bytes, geometry: MediaGeometry) -> "Media":
        if len(image) != geometry.capacity:
            raise MediaError(
                f"image is {len(image)} bytes, geometry expects {geometry.capacity}")
        media = cls(geometry)
        media.data[:] = image
        return media

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.data)

    @classmethod
    def load(cls, path, geometry: MediaGeometry) -> "Media":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read(), geometry)
