"""Command-line front end: ``disruptkit <command> ...``.

Exit status is 0 on success, 1 on an unexpected runtime failure and 2 on
invalid input or configuration. Relative output paths are resolved against
``$DISRUPTKIT_OUTPUT_DIR`` when that variable is set.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .association import (
    associate_all,
    build_road_graph,
    load_associations_csv,
    load_polylines,
    snap_entities,
    write_associations_csv,
)
from .data import SLOTS_PER_DAY, DropReport, ValidationError, load_incidents_csv, load_speed_csv, load_stations_csv
from .metrics import METRICS
from .prediction import MODEL_REGISTRY, Dataset, run_comparison
from .profiling import build_monthly_profile, load_profiles_csv, profile_before, tile_profile, write_profiles_csv
from .segmentation import (
    SegmentationConfig,
    extract_disruption_shape,
    load_intervals_csv,
    segment_series,
    write_intervals_csv,
    write_intervals_json,
    write_shapes_csv,
)
from .streaming import NotCalibratedError, StreamingDetector, calibrate_bounds, write_events
from .synth import ScenarioSpec, generate_scenario

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("disruptkit")

OUTPUT_DIR_ENV = "DISRUPTKIT_OUTPUT_DIR"
EXIT_OK, EXIT_RUNTIME, EXIT_INVALID = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def out_path(p) -> Path:
    path = Path(p)
    base = os.environ.get(OUTPUT_DIR_ENV)
    if base and not path.is_absolute():
        path = Path(base) / path
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _dir(p) -> Path:
    path = out_path(Path(p) / "_")
    return path.parent


def _seg_config(args) -> SegmentationConfig:
    return SegmentationConfig(
        selectivity=args.selectivity,
        p_threshold=args.pthr,
        n_threshold=args.nthr,
        window_size=args.window,
        metric=args.metric,
        minkowski_p=args.minkowski_p,
        lag_correction=not args.no_lag_correction,
    )


def _pool_map(fn, items, threads: int):
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _profiles_for(series, profiles):
    missing = [s.station_id for s in series if s.station_id not in profiles]
    if missing:
        raise ValidationError(f"no profile for station(s): {', '.join(missing[:10])}")
    return [profiles[s.station_id] for s in series]


# ---------------------------------------------------------------------------
# Subcommands


def cmd_profile(args) -> int:
    series = load_speed_csv(args.speed, args.day_offset)
    profiles = []
    for s in series:
        if args.before:
            day = s.day_of(_parse_date(args.before, s.day_offset_minutes))
            profiles.append(profile_before(s, day, args.days))
        else:
            if args.start_day + args.days > s.n_days:
                raise ValidationError(
                    f"station {s.station_id}: need {args.days} days from day {args.start_day}, series has {s.n_days}"
                )
            profiles.append(build_monthly_profile(s.days(args.start_day, args.days)))
    write_profiles_csv(out_path(args.out), profiles)
    log.info("wrote %d profile(s) to %s", len(profiles), args.out)
    return EXIT_OK


def _parse_date(text: str, offset_minutes: int):
    try:
        d = datetime.strptime(text, "%Y-%m-%d")
    except ValueError:
        raise ValidationError(f"--before expects YYYY-MM-DD, got {text!r}") from None
    return d.replace(tzinfo=timezone.utc) - timedelta(minutes=offset_minutes)


def cmd_segment(args) -> int:
    cfg = _seg_config(args)
    series = load_speed_csv(args.speed, args.day_offset)
    profiles = _profiles_for(series, load_profiles_csv(args.profile))
    results = _pool_map(lambda sp: segment_series(sp[0], sp[1], cfg), list(zip(series, profiles)), args.threads)
    rows = [r for res in results for r in res.rows()]
    write_intervals_csv(out_path(args.out), rows)
    if args.json:
        write_intervals_json(out_path(args.json), rows, cfg)
    if args.emit_diff:
        with out_path(args.emit_diff).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["station_id", "slot_index", "value", "normalized", "cts"])
            for res in results:
                for k, (x, n, c) in enumerate(zip(res.difference.values, res.pre.nts, res.pre.cts)):
                    writer.writerow([res.station_id, k, repr(float(x)), repr(float(n)), repr(float(c))])
    shapes = []
    if args.shapes or args.figures:
        for res, prof in zip(results, profiles):
            for iv in res.intervals:
                shapes.append((res.station_id, iv.day_index, iv, extract_disruption_shape(res.series, prof, iv)))
    if args.shapes:
        write_shapes_csv(out_path(args.shapes), shapes)
    if args.figures:
        _segment_figures(_dir(args.figures), results, profiles, shapes, cfg)
    log.info("%d interval(s) over %d station(s)", len(rows), len(results))
    return EXIT_OK


def _segment_figures(fig_dir: Path, results, profiles, shapes, cfg) -> None:
    from .plotting import plot_segmentation_day, plot_shapes

    for res, prof in zip(results, profiles):
        days = sorted({iv.day_index for iv in res.intervals})
        values = np.where(res.series.missing_mask, np.nan, res.series.values)
        for d in days:
            sl = slice(d * SLOTS_PER_DAY, (d + 1) * SLOTS_PER_DAY)
            plot_segmentation_day(
                fig_dir / f"segment_{res.station_id}_day{d:03d}.png",
                values[sl],
                prof.slots,
                res.pre.nts[sl],
                res.pre.cts[sl],
                [iv for iv in res.intervals if iv.day_index == d],
                title=f"{res.station_id} {res.series.day_date(d).isoformat()}",
                p_threshold=cfg.p_threshold,
                n_threshold=cfg.n_threshold,
            )
    if shapes:
        plot_shapes(fig_dir / "shapes.png", [(f"{sid} d{iv.day_index}", sh.values) for sid, _, iv, sh in shapes])


def cmd_associate(args) -> int:
    polylines = load_polylines(args.roads)
    graph = build_road_graph(polylines, geographic=not args.planar, spacing=args.spacing)
    stations = load_stations_csv(args.stations)
    incidents = load_incidents_csv(args.incidents)
    snapped_st = snap_entities(graph, stations, args.max_snap)
    snapped_inc = snap_entities(graph, incidents, args.max_snap)
    for key, dist in list(snapped_st.dropped.items()) + list(snapped_inc.dropped.items()):
        log.debug("dropped %s: %.1f m from the nearest road point", key, dist)
    results = associate_all(
        graph,
        snapped_st,
        snapped_inc,
        jump_radius=args.jump,
        max_hops=args.max_hops,
        collect_radius=args.collect_radius,
        spacing=args.spacing,
        threads=args.threads,
    )
    write_associations_csv(out_path(args.out), results)
    log.info(
        "%d of %d incident(s) associated; %d station(s) and %d incident(s) off-road",
        len(results),
        len(incidents),
        len(snapped_st.dropped),
        len(snapped_inc.dropped),
    )
    return EXIT_OK


def build_dataset(incidents, associations, intervals, day_offset_minutes: int = 0):
    """Join incidents with their station's largest interval on the reported day."""
    by_day: dict[tuple[str, str], list[dict]] = {}
    for r in intervals:
        by_day.setdefault((r["station_id"], r["date"]), []).append(r)
    drops = DropReport()
    X, y_rep, y_est, ids = [], [], [], []
    names = None
    for inc in incidents:
        a = associations.get(inc.incident_id)
        if a is None:
            drops.add(inc.incident_id, "not associated")
            continue
        date = (inc.reported_start + timedelta(minutes=day_offset_minutes)).date().isoformat()
        cands = by_day.get((a.station_id, date), [])
        if not cands:
            drops.add(inc.incident_id, f"no disruption at {a.station_id} on {date}")
            continue
        best = sorted(cands, key=lambda r: (-r["area"], r["enter_idx"]))[0]
        if names is None:
            names = inc.feature_names
        elif inc.feature_names != names:
            raise ValidationError("incidents disagree on feature columns")
        X.append(inc.features)
        y_rep.append(inc.reported_duration_min)
        y_est.append(best["est_duration_min"])
        ids.append(inc.incident_id)
    if not X:
        raise ValidationError("no incident has both an association and a disruption interval")
    if not names:
        raise ValidationError("incidents carry no feature columns")
    ds = Dataset(np.array(X), np.array(y_rep), np.array(y_est), names, ids)
    return ds, drops


def cmd_evaluate(args) -> int:
    models = args.models if isinstance(args.models, list) else [m for m in str(args.models).split(",") if m.strip()]
    models = [m.strip() for m in models]
    if not models:
        raise ValidationError("--models must name at least one model")
    incidents = load_incidents_csv(args.incidents)
    assoc = load_associations_csv(args.assoc)
    intervals = load_intervals_csv(args.intervals)
    ds, drops = build_dataset(incidents, assoc, intervals, args.day_offset)
    for key, why in drops.dropped.items():
        log.debug("skipped %s: %s", key, why)
    log.info("dataset: %d incident(s), %d skipped", len(ds), len(drops))
    report = run_comparison(ds, models, k=args.folds, seed=args.seed, nested=args.nested, threads=args.threads)
    out = out_path(args.out)
    out.write_text(report.to_json(), encoding="utf-8")
    table = out_path(args.table) if args.table else out.with_suffix(".csv")
    report.write_table(table)
    if args.figures:
        from .plotting import plot_scores

        fig_dir = _dir(args.figures)
        plot_scores(fig_dir / "rmse.png", report.table_rows(), "RMSE")
        plot_scores(fig_dir / "mape.png", report.table_rows(), "MAPE")
    for r in report.table_rows():
        log.info(
            "%-8s RMSE est %.2f rep %.2f | MAPE est %.2f rep %.2f",
            r["model"], r["RMSE_est"], r["RMSE_rep"], r["MAPE_est"], r["MAPE_rep"],
        )
    return EXIT_OK


def _parse_bounds(text):
    try:
        lo, hi = (float(v) for v in str(text).split(","))
    except ValueError:
        raise ValidationError(f"--bounds expects LO,HI, got {text!r}") from None
    return lo, hi


def cmd_stream(args) -> int:
    cfg = _seg_config(args)
    series = load_speed_csv(args.speed, args.day_offset)
    profiles = load_profiles_csv(args.profile)
    _profiles_for(series, profiles)
    calib = {}
    if args.calibration:
        calib = {s.station_id: s for s in load_speed_csv(args.calibration, args.day_offset)}
    events = []
    for s in series:
        prof = profiles[s.station_id]
        if args.bounds:
            bounds = _parse_bounds(args.bounds)
        elif args.calibration:
            if s.station_id not in calib:
                raise NotCalibratedError(f"calibration file has no readings for station {s.station_id}")
            bounds = calibrate_bounds(prof, calib[s.station_id], cfg)
        else:
            if s.n_days < args.calibration_days:
                raise ValidationError(
                    f"station {s.station_id}: {s.n_days} day(s) cannot supply {args.calibration_days} calibration days"
                )
            bounds = calibrate_bounds(prof, s.days(0, args.calibration_days), cfg)
        if not bounds[1] > bounds[0]:
            log.warning("station %s: calibration shows no deviation; detector will stay silent", s.station_id)
        if not s.is_day_aligned:
            raise ValidationError(f"station {s.station_id}: series must start at a local day boundary")
        det = StreamingDetector(prof, cfg, bounds, station_id=s.station_id)
        tiled = tile_profile(prof, s.n_days) if len(s) else ()
        for x, ref in zip(s.values, tiled):
            ev = det.push(x, ref)
            if ev is not None:
                events.append(ev)
        ev = det.finish()
        if ev is not None:
            events.append(ev)
    write_events(out_path(args.out), events)
    log.info("%d event(s)", len(events))
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = ScenarioSpec.from_json(args.spec) if args.spec else ScenarioSpec()
    if args.no_series:
        spec = ScenarioSpec.from_dict({**spec.to_dict(), "with_series": False})
    scenario = generate_scenario(spec, args.seed)
    scenario.write(_dir(args.out))
    log.info(
        "scenario: %d station(s), %d incident(s), %d associated by construction",
        len(scenario.stations), len(scenario.incidents), sum(1 for t in scenario.truth if t.station_id),
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser


def _add_seg_options(p):
    p.add_argument("--metric", default="chebyshev", choices=[*METRICS, "manhattan"])
    p.add_argument("--selectivity", type=float, default=2.0)
    p.add_argument("--pthr", type=float, default=0.3, help="positive threshold on the dilated derivative")
    p.add_argument("--nthr", type=float, default=-0.3, help="negative threshold on the dilated derivative")
    p.add_argument("--window", type=int, default=12, help="moving-window length in slots")
    p.add_argument("--minkowski-p", type=float, default=3.0)
    p.add_argument("--no-lag-correction", action="store_true", help="report raw Chebyshev exit peaks")


def _add_day_offset(p):
    p.add_argument("--day-offset", type=int, default=0, metavar="MIN", help="UTC offset of local days in minutes")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="disruptkit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help="TOML or JSON file supplying option defaults")
    parser.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("-q", "--quiet", action="store_true")
    # global options are also accepted after the subcommand name
    common = _Parser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help=argparse.SUPPRESS)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help=argparse.SUPPRESS)
    common.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS, help=argparse.SUPPRESS)
    common.add_argument("-q", "--quiet", action="store_true", default=argparse.SUPPRESS, help=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("profile", parents=[common], help="build 288-slot monthly profiles")
    p.add_argument("speed")
    p.add_argument("--out", default="profile.csv")
    p.add_argument("--days", type=int, default=28)
    p.add_argument("--start-day", type=int, default=0, help="first day (index) of the profile window")
    p.add_argument("--before", metavar="YYYY-MM-DD", help="use the --days days preceding this date instead")
    _add_day_offset(p)
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("segment", parents=[common], help="segment disruptions against profiles")
    p.add_argument("speed")
    p.add_argument("profile")
    p.add_argument("--out", default="intervals.csv")
    _add_seg_options(p)
    p.add_argument("--emit-diff", metavar="CSV", help="also write the difference, normalised and dilated series")
    p.add_argument("--json", metavar="PATH", help="also write intervals as JSON")
    p.add_argument("--shapes", metavar="CSV", help="also write per-interval Wasserstein shapes")
    p.add_argument("--figures", metavar="DIR", help="render PNG figures into DIR")
    _add_day_offset(p)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("associate", parents=[common], help="assign incidents to hop-nearest stations along the road")
    p.add_argument("roads")
    p.add_argument("stations")
    p.add_argument("incidents")
    p.add_argument("--out", default="assoc.csv")
    p.add_argument("--planar", action="store_true", help="coordinates are planar meters (x=lon, y=lat columns)")
    p.add_argument("--spacing", type=float, default=2.0)
    p.add_argument("--jump", type=float, default=3.0)
    p.add_argument("--max-hops", type=int, default=250)
    p.add_argument("--max-snap", type=float, default=10.0)
    p.add_argument("--collect-radius", type=float, default=None)
    p.set_defaults(func=cmd_associate)

    p = sub.add_parser("evaluate", parents=[common], help="cross-validate duration models on both targets")
    p.add_argument("incidents")
    p.add_argument("assoc")
    p.add_argument("intervals")
    p.add_argument("--models", default="knn,linear,tree", help=f"comma list from: {', '.join(sorted(MODEL_REGISTRY))}")
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--nested", action="store_true", help="inner k-fold instead of a hold-out for tuning")
    p.add_argument("--out", default="report.json")
    p.add_argument("--table", metavar="CSV", help="score table path (default: --out with .csv)")
    p.add_argument("--figures", metavar="DIR", help="render score bar charts into DIR")
    _add_day_offset(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("stream", parents=[common], help="replay readings through the online detector")
    p.add_argument("speed")
    p.add_argument("profile")
    p.add_argument("--out", default="events.ndjson")
    p.add_argument("--calibration", metavar="CSV", help="readings used to freeze normalisation bounds")
    p.add_argument("--calibration-days", type=int, default=28, help="else: leading days of the input used")
    p.add_argument("--bounds", metavar="LO,HI", help="explicit frozen bounds of the powered difference")
    _add_seg_options(p)
    _add_day_offset(p)
    p.set_defaults(func=cmd_stream)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic scenario")
    p.add_argument("--spec", metavar="JSON")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", default="scenario")
    p.add_argument("--no-series", action="store_true", help="skip speed series generation")
    p.set_defaults(func=cmd_synth)
    return parser


def load_config(path) -> dict:
    path = Path(path)
    try:
        text = path.read_bytes()
    except OSError as exc:
        raise ValidationError(f"{path}: {exc.strerror}") from None
    try:
        if path.suffix.lower() == ".json":
            doc = json.loads(text)
        else:
            doc = tomllib.loads(text.decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise ValidationError(f"{path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ValidationError(f"{path}: top level must be a table/object")
    return doc


def _subparsers(parser):
    for a in parser._actions:
        if isinstance(a, argparse._SubParsersAction):
            return a.choices
    return {}


def _apply_config(parser, doc: dict) -> None:
    subs = _subparsers(parser)
    glob = {a.dest for a in parser._actions} - {"help", "version", "config", "command"}
    top = {}
    for key, val in doc.items():
        if key in subs:
            if not isinstance(val, dict):
                raise ValidationError(f"config section [{key}] must be a table")
            sp = subs[key]
            allowed = {a.dest: a for a in sp._actions if a.option_strings and a.dest not in glob | {"help", "config"}}
            section = {}
            for k, v in val.items():
                dest = k.replace("-", "_")
                if dest not in allowed:
                    raise ValidationError(f"config: unknown option {k!r} for {key}")
                section[dest] = v
            sp.set_defaults(**section)
        else:
            dest = key.replace("-", "_")
            if dest not in glob:
                raise ValidationError(f"config: unknown key {key!r}")
            top[dest] = val
    parser.set_defaults(**top)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        pre = _Parser(add_help=False)
        pre.add_argument("--config")
        known, _ = pre.parse_known_args(argv)
        if known.config:
            _apply_config(parser, load_config(known.config))
    except ValidationError as exc:
        print(f"disruptkit: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    level = logging.WARNING if args.quiet else (logging.DEBUG if args.verbose > 1 else logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(message)s", stream=sys.stderr)
    if args.threads < 1:
        print("disruptkit: error: --threads must be positive", file=sys.stderr)
        return EXIT_INVALID
    try:
        return args.func(args)
    except (ValidationError, NotCalibratedError, ValueError) as exc:
        print(f"disruptkit: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - last-resort reporting
        log.debug("traceback", exc_info=True)
        print(f"disruptkit: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
