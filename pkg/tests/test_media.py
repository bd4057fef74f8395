import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wildtag.errors import MediaError, MediaFailedError, PowerLossError
from wildtag.media import ERASED, FaultPlan, Media, MediaGeometry, NOR_8MB, SD_CARD

from conftest import SMALL_NOR


def test_profiles():
    assert NOR_8MB.capacity == 8 * 1024 * 1024
    assert NOR_8MB.page_size == 256
    assert SD_CARD.page_size == 512
    assert SD_CARD.sector_size % SD_CARD.page_size == 0


def test_geometry_validation():
    with pytest.raises(MediaError):
        MediaGeometry(256, 1000, 4)  # sector not a page multiple
    with pytest.raises(MediaError):
        MediaGeometry(0, 4096, 4)


def test_fresh_media_reads_erased(small_media):
    assert small_media.read(0, 64) == b"\xff" * 64
    assert all(small_media.is_sector_erased(s) for s in range(16))


def test_write_zero_page_over_erased(small_media):
    small_media.page_write(0, b"\x00" * 256)
    assert small_media.read(0, 256) == b"\x00" * 256


def test_write_is_bitwise_and(small_media):
    small_media.page_write(2, b"\x0f" * 256)
    small_media.page_write(2, b"\xf0" * 256)
    assert small_media.read(512, 256) == b"\x00" * 256


def test_read_round_trip_and_spanning(small_media):
    a = bytes(range(256))
    b = bytes(reversed(range(256)))
    small_media.page_write(0, a)
    small_media.page_write(1, b)
    assert small_media.read(0, 256) == a
    assert small_media.read(128, 256) == a[128:] + b[:128]


def test_out_of_range():
    media = Media(SMALL_NOR)
    with pytest.raises(MediaError):
        media.page_write(SMALL_NOR.page_count, b"\x00" * 256)
    with pytest.raises(MediaError):
        media.page_write(0, b"\x00" * 255)
    with pytest.raises(MediaError):
        media.read(SMALL_NOR.capacity - 1, 2)
    with pytest.raises(MediaError):
        media.is_sector_erased(16)


def test_sector_erased_predicate(small_media):
    page = bytearray(b"\xff" * 256)
    page[17] = 0x7F
    base_page = 5 * SMALL_NOR.pages_per_sector
    small_media.page_write(base_page, bytes(page))
    assert not small_media.is_sector_erased(5)
    assert small_media.is_sector_erased(4)


def test_no_op_writes_preserve_erasure(small_media):
    small_media.page_write(0, b"\xff" * 256)
    assert small_media.is_sector_erased(0)


def test_erase_sector(small_media):
    small_media.page_write(0, b"\x00" * 256)
    small_media.erase_sector(0)
    assert small_media.is_sector_erased(0)


def test_fault_confined_to_one_page():
    media = Media(SMALL_NOR, FaultPlan(fail_at_write=3, seed=99))
    payload = bytes(range(256))
    media.page_write(0, payload)
    media.page_write(1, payload)
    with pytest.raises(PowerLossError):
        media.page_write(2, payload)
    assert media.failed
    assert media.failed_page == 2
    # Intact pages keep their committed contents; the rest stays erased.
    assert media.read(0, 256) == payload
    assert media.read(256, 256) == payload
    assert media.read(768, SMALL_NOR.capacity - 768) == \
        b"\xff" * (SMALL_NOR.capacity - 768)
    # The faulted page holds a committed prefix of the requested data.
    faulted = media.read(512, 256)
    cut = 0
    while cut < 256 and faulted[cut] == payload[cut]:
        cut += 1
    assert faulted[:cut] == payload[:cut]


def test_write_after_fault_rejected():
    media = Media(SMALL_NOR, FaultPlan(fail_at_write=1, seed=0))
    with pytest.raises(PowerLossError):
        media.page_write(0, b"\x00" * 256)
    with pytest.raises(MediaFailedError):
        media.page_write(1, b"\x00" * 256)
    media.power_cycle()
    media.page_write(1, b"\x00" * 256)  # powered again


def test_fault_determinism():
    def image(seed):
        media = Media(SMALL_NOR, FaultPlan(fail_at_write=2, seed=seed))
        media.page_write(4, bytes(range(256)))
        try:
            media.page_write(5, bytes(reversed(range(256))))
        except PowerLossError:
            pass
        return media.to_bytes()

    assert image(7) == image(7)
    assert image(7) != image(8)


def test_image_round_trip(tmp_path, small_media):
    small_media.page_write(3, bytes(range(256)))
    path = tmp_path / "img.bin"
    small_media.save(path)
    loaded = Media.load(path, SMALL_NOR)
    assert loaded.to_bytes() == small_media.to_bytes()
    with pytest.raises(MediaError):
        Media.load(path, NOR_8MB)


def test_last_data_before(small_media):
    assert small_media.last_data_before(SMALL_NOR.capacity) is None
    page = bytearray(b"\xff" * 256)
    page[100] = 0
    small_media.page_write(0, bytes(page))
    assert small_media.last_data_before(SMALL_NOR.capacity) == 100
    assert small_media.last_data_before(100) is None
    assert small_media.last_data_before(101) == 100


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 7), st.binary(min_size=64, max_size=64)),
                max_size=12),
       st.integers(0, 63))
def test_monotone_bit_clearing(writes, offset):
    geometry = MediaGeometry(page_size=64, sector_size=256, sector_count=8)
    media = Media(geometry)
    shadow = [0xFF] * geometry.capacity
    for page, data in writes:
        media.page_write(page, data)
        base = page * 64
        for i, b in enumerate(data):
            shadow[base + i] &= b
    assert media.to_bytes() == bytes(shadow)


def test_failed_page_known_after_fuzzed_faults():
    rng = random.Random(5)
    for trial in range(25):
        media = Media(SMALL_NOR, FaultPlan(fail_at_write=rng.randint(1, 10), seed=trial))
        wrote = 0
        try:
            for _ in range(12):
                media.page_write(rng.randrange(SMALL_NOR.page_count),
                                 rng.randbytes(256))
                wrote += 1
        except PowerLossError:
            assert media.failed_page is not None
            assert wrote + 1 == media.fault_plan.fail_at_write
