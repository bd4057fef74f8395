import pytest

from wildtag.errors import DefinitionError
from wildtag.tagdef import (Configuration, SlotAllocation, TagDefinition,
                            compile_config_block, decompile_config_block,
                            default_pinger_definition, format_tagdef,
                            parse_tagdef, slot_action)


def test_parse_reference_definition(fig_tagdef_text):
    d = parse_tagdef(fig_tagdef_text)
    assert d.tag_id == 42
    assert d.period_ms == 500
    assert d.highest_config == 1
    config1 = d.config(1)
    assert config1.cycle == 8
    atlas = [a for a in config1.allocations if a.setup == "ATLAS_433"][0]
    assert (atlas.every, atlas.start, atlas.mode) == (4, 0, "tx")
    data = [a for a in config1.allocations if a.setup == "DATA_433"][0]
    assert (data.every, data.start, data.mode) == (8, 7, "txrx")
    assert d.transition_for(0, "wakeup", 1).to_config == 1
    assert d.silence_timeout(1) == 10


def test_slot_action_reference_values(fig_tagdef_text):
    config1 = parse_tagdef(fig_tagdef_text).config(1)
    assert slot_action(config1, 12) == ("ATLAS_433", "tx")
    assert slot_action(config1, 15) == ("DATA_433", "txrx")
    assert slot_action(config1, 2) is None


def test_slot_action_periodicity(fig_tagdef_text):
    d = parse_tagdef(fig_tagdef_text)
    for config in d.configurations:
        pattern = [slot_action(config, k) for k in range(config.cycle)]
        for k in range(3 * config.cycle):
            assert slot_action(config, k) == pattern[k % config.cycle]
        tx_per_cycle = sum(1 for p in pattern if p)
        assert tx_per_cycle == sum(config.cycle // a.every
                                   for a in config.allocations)


def test_slot_conflict_rejected():
    with pytest.raises(DefinitionError, match="claimed by both"):
        Configuration(0, 8, (
            SlotAllocation("A", 4, 0, "tx"),
            SlotAllocation("B", 8, 4, "tx"),
        )).validate({"A", "B"})


def test_cycle_must_be_common_multiple():
    with pytest.raises(DefinitionError, match="not a multiple"):
        Configuration(0, 6, (SlotAllocation("A", 4, 0, "tx"),)).validate({"A"})


def test_sensor_grid_must_be_whole_seconds(fig_tagdef_text):
    bad = fig_tagdef_text.replace("every = 2", "every = 1.5", 1)
    with pytest.raises(DefinitionError, match="integer"):
        parse_tagdef(bad)


def test_unknown_setup_reference(fig_tagdef_text):
    bad = fig_tagdef_text.replace("slot ATLAS_433 = every 4", "slot NOPE = every 4")
    with pytest.raises(DefinitionError, match="unknown setup"):
        parse_tagdef(bad)


def test_syntax_error_reports_line():
    text = "[tag]\nid = 1\nperiod_ms = 500\nwat?\n[config 0]\ncycle = 1\n"
    with pytest.raises(DefinitionError) as err:
        parse_tagdef(text)
    assert err.value.line == 4


def test_duplicate_transition_rejected(fig_tagdef_text):
    bad = fig_tagdef_text + "\n[transitions]\non wakeup 1 from 0 -> config 1\n"
    with pytest.raises(DefinitionError, match="duplicate transition"):
        parse_tagdef(bad)


def test_burst_rate_must_divide_microseconds(fig_tagdef_text):
    bad = fig_tagdef_text.replace("rate_hz = 25", "rate_hz = 33")
    with pytest.raises(DefinitionError, match="divide 1 MHz"):
        parse_tagdef(bad)


def test_compile_is_byte_stable(fig_tagdef_text):
    d = parse_tagdef(fig_tagdef_text)
    assert compile_config_block(d) == compile_config_block(d)


def test_compile_decompile_round_trip(fig_tagdef_text):
    d = parse_tagdef(fig_tagdef_text)
    block = compile_config_block(d)
    assert decompile_config_block(block) == d


def test_round_trip_through_text(fig_tagdef_text):
    d = parse_tagdef(fig_tagdef_text)
    rendered = format_tagdef(d)
    assert parse_tagdef(rendered) == d


def test_block_grows_with_configs(fig_tagdef_text):
    d = parse_tagdef(fig_tagdef_text)
    small = TagDefinition(
        tag_id=d.tag_id, period_ms=d.period_ms, setups=d.setups,
        configurations=d.configurations[:1],
        transitions=(), sensors=d.sensors,
        initial_config=0).validate()
    assert len(compile_config_block(small)) < len(compile_config_block(d))


def test_decompile_rejects_bad_blocks(fig_tagdef_text):
    block = compile_config_block(parse_tagdef(fig_tagdef_text))
    with pytest.raises(DefinitionError):
        decompile_config_block(b"")
    with pytest.raises(DefinitionError):
        decompile_config_block(bytes([99]) + block[1:])
    with pytest.raises(DefinitionError):
        decompile_config_block(block[:-3])


def test_round_trip_corpus(fig_tagdef_text):
    corpus = [
        fig_tagdef_text,
        # pinger-only
        "[tag]\nid = 9\nperiod_ms = 8000\n"
        "[setup P]\nkind = atlas-ping\nbitrate = 1000000\nping_bits = 8192\n"
        "[config 0]\ncycle = 1\nslot P = every 1 from 0, tx\n",
        # long-range beacon with actuator
        "[tag]\nid = 10\nperiod_ms = 1000\nactuator_config = 1\n"
        "[setup LR]\nkind = data-longrange\nbitrate = 31500\n"
        "[config 0]\ncycle = 4\nslot LR = every 4 from 1, txrx\n"
        "[config 1]\ncycle = 2\nslot LR = every 2 from 0, txrx\n"
        "[transitions]\non wakeup 1 from 0 -> config 1\n",
    ]
    for text in corpus:
        d = parse_tagdef(text)
        assert decompile_config_block(compile_config_block(d)) == d
        assert parse_tagdef(format_tagdef(d)) == d


def test_default_pinger():
    d = default_pinger_definition(5, 8.0)
    assert d.period_ms == 8000
    assert slot_action(d.config(0), 0)[0] == "PING"


def test_initial_config_must_exist(fig_tagdef_text):
    bad = fig_tagdef_text.replace("initial_config = 0", "initial_config = 9")
    with pytest.raises(DefinitionError, match="initial config"):
        parse_tagdef(bad)
