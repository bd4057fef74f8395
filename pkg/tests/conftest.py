import pytest

from wildtag.media import Media, MediaGeometry

SMALL_NOR = MediaGeometry(page_size=256, sector_size=4096, sector_count=16)


@pytest.fixture
def small_media():
    return Media(SMALL_NOR)


FIG_TAGDEF = """\
[tag]
id = 42
period_ms = 500
initial_config = 0
upload_threshold = 4096

[setup ATLAS_433]
kind = atlas-ping
bitrate = 1000000
ping_bits = 8192

[setup DATA_433]
kind = data-shortrange
bitrate = 500000

[config 0]
cycle = 16
slot ATLAS_433 = every 2 from 0, tx
slot DATA_433 = every 16 from 15, txrx

[config 1]
cycle = 8
slot ATLAS_433 = every 4 from 0, tx
slot DATA_433 = every 8 from 7, txrx

[transitions]
on wakeup 1 -> config 1
on wakeup 0 -> config 0
on silence 10s -> config 0

[sensor pressure-temperature]
every = 2
mode = oneshot

[sensor acceleration]
every = 4
mode = burst
rate_hz = 25
duration_s = 2
"""


@pytest.fixture
def fig_tagdef_text():
    return FIG_TAGDEF
