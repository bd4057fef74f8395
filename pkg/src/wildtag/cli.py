"""Command-line entry points: compile, simulate, decode, ingest, extract, lifespan.

Exit codes: 0 success, 1 validation error, 2 I/O error, 3 format/corruption.
All outputs are deterministic for a fixed scenario seed.
"""

from __future__ import annotations

import argparse
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import flashlog, pipeline, sim
from .basestation import SdLogStore, TetheredStore
from .errors import (DefinitionError, LogError, MediaError, ScenarioError,
                     StoreError, WildtagError, WireError)
from .lifespan import (DEFAULT_ENERGY, Battery, battery_by_name,
                       estimate_lifespan_days)
from .media import Media, MediaGeometry, PROFILES
from .tagdef import (compile_config_block, decompile_config_block,
                     format_tagdef, parse_tagdef)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2
EXIT_FORMAT = 3


def _geometry_from_args(args) -> MediaGeometry:
    if args.profile:
        return PROFILES[args.profile]
    return MediaGeometry(args.page_size, args.sector_size, args.sector_count)


def cmd_compile(args) -> int:
    definition = parse_tagdef(Path(args.tagdef).read_text())
    block = compile_config_block(definition)
    Path(args.out).write_bytes(block)
    print(f"compiled {args.tagdef}: {len(block)} bytes -> {args.out}")
    return EXIT_OK


def cmd_decompile(args) -> int:
    definition = decompile_config_block(Path(args.block).read_bytes())
    text = format_tagdef(definition)
    if args.out:
        Path(args.out).write_text(text)
        print(f"decompiled {args.block} -> {args.out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _run_one(scenario_path: str, trace_out: str | None, media_dir: str | None) -> str:
    scenario = sim.load_scenario(scenario_path)
    result = sim.run(scenario)
    lines = [f"{scenario_path}: {len(result.trace)} events"]
    if trace_out:
        Path(trace_out).write_text(result.trace_text())
        lines.append(f"  trace -> {trace_out}")
    if media_dir:
        out_dir = Path(media_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for sim_tag in result.tags.values():
            if sim_tag.runtime.log is not None:
                sim_tag.runtime.log.flush()
            path = out_dir / f"tag_{sim_tag.spec.definition.tag_id}.bin"
            sim_tag.media.save(path)
            lines.append(f"  media -> {path}")
        for sim_station in result.stations.values():
            sid = sim_station.spec.station_id
            store = sim_station.station.store
            if isinstance(store, TetheredStore):
                path = out_dir / f"station_{sid}.records"
                store.save(path)
            else:
                path = out_dir / f"station_{sid}.sd"
                sim_station.media.save(path)
            lines.append(f"  store -> {path}")
    return "\n".join(lines)


def cmd_simulate(args) -> int:
    jobs = args.jobs
    if len(args.scenario) == 1:
        print(_run_one(args.scenario[0], args.trace, args.media_dir))
        return EXIT_OK
    if args.trace or args.media_dir:
        raise ScenarioError(
            "--trace/--media-dir apply to a single scenario; with several, "
            "use per-scenario defaults")
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for line in pool.map(_run_one, args.scenario,
                                 [None] * len(args.scenario),
                                 [None] * len(args.scenario)):
                print(line)
    else:
        for path in args.scenario:
            print(_run_one(path, None, None))
    return EXIT_OK


def cmd_decode_log(args) -> int:
    geometry = _geometry_from_args(args)
    media = Media.load(args.image, geometry)
    scan = flashlog.scan_log(media, args.logical_sector or None)
    print(f"log of tag {scan.tag_id}, created {scan.creation_time}, "
          f"registry {scan.registry_id}")
    print(f"write_addr={scan.write_addr} ack_cursor={scan.ack_cursor} "
          f"boots={scan.boot_count}")
    for item in scan.items:
        print(f"{item.address:8d}  type={item.type_code:3d} "
              f"len={len(item.payload):3d}  {item.validity}")
    for gap in scan.gaps:
        print(f"{gap.start:8d}  gap -> {gap.end} ({gap.kind})")
    if scan.truncated:
        print("warning: scan truncated by unreadable structure")
    return EXIT_OK


def cmd_ingest(args) -> int:
    store = pipeline.ItemStore.load(args.store) if Path(args.store).exists() \
        else pipeline.ItemStore()
    total = pipeline.IngestReport()
    for source in args.sources:
        path = Path(source)
        if path.suffix == ".records":
            records = TetheredStore.load(path).records
        elif path.suffix == ".sd":
            geometry = _geometry_from_args(args)
            from .basestation import records_from_station_log
            records = records_from_station_log(Media.load(path, geometry), 0)
        else:
            geometry = _geometry_from_args(args)
            records = pipeline.records_from_media(
                Media.load(path, geometry), args.logical_sector or None)
        report = store.ingest(records)
        total.inserted += report.inserted
        total.duplicates += report.duplicates
        total.conflicts.extend(report.conflicts)
        print(f"{source}: +{report.inserted} ({report.duplicates} duplicates, "
              f"{len(report.conflicts)} conflicts)")
    store.save(args.store)
    print(f"store {args.store}: {len(store)} records")
    if total.conflicts:
        print(f"warning: {len(total.conflicts)} keys had conflicting bytes")
    return EXIT_OK


def cmd_extract(args) -> int:
    store = pipeline.ItemStore.load(args.store)
    creation = args.creation
    if creation is None:
        creations = store.creations_for(args.tag)
        if len(creations) != 1:
            raise StoreError(
                f"tag {args.tag} has {len(creations)} logs in the store; "
                "pass --creation")
        creation = creations[0]
    definition = None
    if args.tagdef:
        definition = parse_tagdef(Path(args.tagdef).read_text())
    series = pipeline.extract_series(store, args.tag, creation, args.sensor,
                                     definition)
    text = pipeline.export_series_text(series)
    if args.out:
        Path(args.out).write_text(text)
        print(f"{len(series.samples)} samples, {len(series.gaps)} gaps "
              f"-> {args.out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_report(args) -> int:
    store = pipeline.ItemStore.load(args.store)
    for report in pipeline.session_report(store, args.tag, args.creation,
                                          args.logical_sector or 4096):
        sys.stdout.write(report.format_text())
    return EXIT_OK


def cmd_lifespan(args) -> int:
    definition = parse_tagdef(Path(args.tagdef).read_text())
    if args.battery:
        battery = battery_by_name(args.battery)
        if args.usable != 1.0:
            battery = Battery(battery.name, battery.capacity_mah, args.usable)
    elif args.capacity_mah:
        battery = Battery("custom", args.capacity_mah, args.usable)
    else:
        raise WildtagError("pass --battery NAME or --capacity-mah MAH")
    days = estimate_lifespan_days(definition, battery, DEFAULT_ENERGY,
                                  args.config if args.config >= 0 else None)
    print(f"{battery.name} ({battery.capacity_mah:g} mAh): {days:.1f} days")
    return EXIT_OK


def _add_geometry_args(parser) -> None:
    parser.add_argument("--profile", choices=sorted(PROFILES),
                        help="use a named media profile")
    parser.add_argument("--page-size", type=int, default=256)
    parser.add_argument("--sector-size", type=int, default=4096)
    parser.add_argument("--sector-count", type=int, default=2048)
    parser.add_argument("--logical-sector", type=int, default=0,
                        help="log-level sector size (default: media sector)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wildtag",
        description="Wildlife tag telemetry stack: log, protocol, simulator, "
                    "and data pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compile", help="compile a tag definition to a config block")
    p.add_argument("tagdef")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_compile)

    p = sub.add_parser("decompile", help="recover definition text from a block")
    p.add_argument("block")
    p.add_argument("-o", "--out")
    p.set_defaults(func=cmd_decompile)

    p = sub.add_parser("simulate", help="run scenarios")
    p.add_argument("scenario", nargs="+")
    p.add_argument("--trace", help="trace output file (single scenario)")
    p.add_argument("--media-dir", help="directory for media images and stores")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("decode-log", help="list the items of a log image")
    p.add_argument("image")
    _add_geometry_args(p)
    p.set_defaults(func=cmd_decode_log)

    p = sub.add_parser("ingest", help="ingest station stores or media images")
    p.add_argument("--store", required=True)
    p.add_argument("sources", nargs="+",
                   help=".records (tethered), .sd (station image), "
                        "or raw tag media image")
    _add_geometry_args(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("extract", help="extract a sensor series from a store")
    p.add_argument("--store", required=True)
    p.add_argument("--tag", type=int, required=True)
    p.add_argument("--creation", type=int)
    p.add_argument("--sensor", required=True)
    p.add_argument("--tagdef", help="definition file for sensor parameters")
    p.add_argument("-o", "--out")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("report", help="session report for a tag")
    p.add_argument("--store", required=True)
    p.add_argument("--tag", type=int, required=True)
    p.add_argument("--creation", type=int)
    p.add_argument("--logical-sector", type=int, default=4096)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("lifespan", help="estimate tag lifespan on a battery")
    p.add_argument("tagdef")
    p.add_argument("--battery")
    p.add_argument("--capacity-mah", type=float)
    p.add_argument("--usable", type=float, default=1.0)
    p.add_argument("--config", type=int, default=-1,
                   help="configuration index (default: initial)")
    p.set_defaults(func=cmd_lifespan)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DefinitionError, ScenarioError, WireError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (LogError, MediaError, StoreError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except WildtagError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
