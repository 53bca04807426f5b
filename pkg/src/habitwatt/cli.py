"""Command-line pipeline: ingest, detect, mine, simulate, report.

Each command reads and writes plain-text artifacts inside a run directory
and records them, with sha256 digests, in ``manifest.json``. Nothing
time-dependent is written, so rerunning a command on unchanged inputs
reproduces its outputs byte for byte.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

from . import eventdetect as ed
from .errors import DependencyError, HabitWattError, ParameterError, ValidationError
from .habitmine import DEFAULT_MIN_CONFIDENCE, DEFAULT_MIN_SUPPORT, filter_device, mine_habits, write_rules
from .ingest import (
    UCI_FORMAT,
    LogFormat,
    PowerSample,
    PowerSeries,
    format_context_log,
    parse_consumption_log,
    parse_context_log,
    sample_watts,
)
from .micromoment import DEFAULT_GRACE_MIN, build_transactions, contextualize, write_transactions

log = logging.getLogger("habitwatt")

OUT_ENV = "HABITWATT_OUT"
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


# -- artifact plumbing ----------------------------------------------------------

def default_out_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))


def digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def write_all(run_dir: Path, files: dict) -> list[Path]:
    """Write every (relative path -> text) entry; all content is built before the first write."""
    written = []
    for rel, text in sorted(files.items()):
        p = run_dir / rel
        write_atomic(p, text)
        written.append(p)
    return written


def record_stage(run_dir: Path, stage: str, inputs: Sequence[Path], outputs: Sequence[Path],
                 config: dict) -> None:
    path = run_dir / "manifest.json"
    manifest = {"run_id": run_dir.name, "stages": {}}
    if path.exists():
        try:
            manifest = json.loads(path.read_text())
        except json.JSONDecodeError:
            pass
    cfg_text = json.dumps(config, sort_keys=True)

    def rel(p: Path) -> str:
        p = Path(p)
        try:
            return str(p.resolve().relative_to(run_dir.resolve()))
        except ValueError:
            return p.name

    manifest["stages"][stage] = {
        "inputs": {rel(p): digest(p) for p in inputs},
        "outputs": {rel(p): digest(p) for p in outputs},
        "config": config,
        "config_digest": hashlib.sha256(cfg_text.encode()).hexdigest(),
        "output_count": len(outputs),
    }
    write_atomic(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise DependencyError(stage, str(path))
    return path


def _ts(t: datetime) -> str:
    return t.strftime("%Y-%m-%dT%H:%M:%SZ")


def series_to_text(series: PowerSeries) -> str:
    lines = ["timestamp,watts"]
    for s in series.samples:
        w = sample_watts(s, series.source)
        lines.append(f"{_ts(s.timestamp)},{'' if w is None else repr(w)}")
    return "\n".join(lines) + "\n"


def series_from_text(line_id: str, text: str) -> PowerSeries:
    samples = []
    for row in text.splitlines()[1:]:
        if not row.strip():
            continue
        ts_s, _, w = row.partition(",")
        ts = datetime.strptime(ts_s, "%Y-%m-%dT%H:%M:%SZ").replace(tzinfo=timezone.utc)
        samples.append(PowerSample(ts, float(w)) if w else PowerSample.missing_at(ts))
    return PowerSeries(line_id, tuple(samples), "watts")


def load_series(run_dir: Path) -> dict[str, PowerSeries]:
    sdir = require(run_dir / "series", "ingest")
    return {p.stem: series_from_text(p.stem, p.read_text()) for p in sorted(sdir.glob("*.csv"))}


def resolve_format(name: Optional[str]) -> LogFormat:
    if name in (None, "uci"):
        return UCI_FORMAT
    if name == "sim":
        from .simulate import SIM_FORMAT
        return SIM_FORMAT
    return LogFormat.load(name)


# -- ingest ---------------------------------------------------------------------

def ingest_files(log_text: str, fmt: LogFormat, context_text: Optional[str] = None) -> dict:
    """Build the ingest artifacts in memory (raises before anything is written)."""
    if log_text == "":
        from .ingest import ParseReport
        series, report = {lid: PowerSeries(lid, (), src) for lid, src in fmt.lines}, ParseReport()
    else:
        series, report = parse_consumption_log(log_text.splitlines(True), fmt)
    files = {"parse_report.txt": report.to_text(), "format.json": fmt.to_json() + "\n"}
    for lid, s in series.items():
        files[f"series/{lid}.csv"] = series_to_text(s)
    if context_text is not None:
        files["context.csv"] = format_context_log(parse_context_log(context_text.splitlines(True)))
    return files


def cmd_ingest(args) -> int:
    src = Path(args.log)
    fmt = resolve_format(args.format)
    ctx = Path(args.context).read_text() if args.context else None
    files = ingest_files(src.read_text(), fmt, ctx)
    out = Path(args.out) if args.out else default_out_root() / src.stem
    inputs = [src] + ([Path(args.context)] if args.context else [])
    record_stage(out, "ingest", inputs, write_all(out, files), {"format": fmt.to_json()})
    print(f"ingest: {files['parse_report.txt'].splitlines()[1]} -> {out}")
    return EXIT_OK


# -- detect ---------------------------------------------------------------------

def detect_files(series: dict, sigs: list, k: Optional[int], seed: int) -> dict:
    events, periods, lines = [], [], []
    for lid, s in sorted(series.items()):
        det = ed.detect_events(s, sigs, k=k, seed=seed)
        events.extend(det.events)
        if s.samples:
            ps, rep = ed.derive_usage_periods(det.events, sigs, s.end)
            periods.extend(ps)
            lines.append(f"{lid}.orphan_offs={len(rep.orphans)}")
            lines.append(f"{lid}.dropped_ons={len(rep.dropped)}")
        lines.append(f"{lid}.events={len(det.events)}")
        lines.append(f"{lid}.ambiguous={len(det.ambiguous)}")
        lines.append(f"{lid}.unmapped_clusters={len(det.unmapped)}")
        for window, clusters in sorted(det.clusters.items()):
            cents = ";".join(repr(c.centroid) for c in clusters)
            lines.append(f"{lid}.{window}.centroids={cents}")
    events.sort(key=lambda e: (e.timestamp, e.appliance_id))
    periods = ed.characterize_usage(periods) if periods else []
    periods.sort(key=lambda p: (p.start, p.appliance_id))
    return {"events.csv": ed.write_events(events), "periods.csv": ed.write_periods(periods),
            "detect_report.txt": "\n".join(lines) + "\n"}


def cmd_detect(args) -> int:
    run_dir = Path(args.run)
    series = load_series(run_dir)
    sig_path = Path(args.signatures) if args.signatures else run_dir / "signatures.csv"
    if not sig_path.exists():
        raise ValidationError(f"no signature table at {sig_path} (pass --signatures)")
    sigs = ed.read_signatures(sig_path.read_text())
    files = detect_files(series, sigs, args.k, args.seed)
    inputs = [sig_path] + sorted((run_dir / "series").glob("*.csv"))
    record_stage(run_dir, "detect", inputs, write_all(run_dir, files), {"k": args.k, "seed": args.seed})
    n = len(files["events.csv"].splitlines()) - 1
    print(f"detect: {n} events -> {run_dir}")
    return EXIT_OK


# -- mine -----------------------------------------------------------------------

def format_habits(habits) -> str:
    lines = ["device,action,antecedent,support,confidence"]
    for h in habits:
        lines.append(f"{h.device_id or '-'},{h.action},{';'.join(h.rule.antecedent.items)},"
                     f"{h.rule.support!r},{h.rule.confidence!r}")
    return "\n".join(lines) + "\n"


def mine_files(run_dir: Path, min_support: float, min_confidence: float, grace_min: int,
               device: Optional[str]) -> dict:
    events = ed.read_events(require(run_dir / "events.csv", "detect").read_text())
    periods = ed.read_periods(require(run_dir / "periods.csv", "detect").read_text())
    ctx_path = run_dir / "context.csv"
    context = parse_context_log(ctx_path.read_text().splitlines(True)) if ctx_path.exists() else None
    txs = build_transactions(contextualize(events, context, periods, grace_min))
    if device:
        txs = filter_device(txs, device)
    itemsets, rules, habits = mine_habits(txs, min_support, min_confidence)
    items = ["items,count,total"] + [f"{';'.join(s.items)},{s.count},{s.total}" for s in itemsets]
    return {"transactions.txt": write_transactions(txs), "itemsets.csv": "\n".join(items) + "\n",
            "rules.txt": write_rules(rules), "habits.csv": format_habits(habits)}


def cmd_mine(args) -> int:
    run_dir = Path(args.run)
    files = mine_files(run_dir, args.min_support, args.min_confidence, args.grace_min, args.device)
    inputs = [p for p in (run_dir / "events.csv", run_dir / "periods.csv", run_dir / "context.csv") if p.exists()]
    config = {"min_support": args.min_support, "min_confidence": args.min_confidence,
              "grace_min": args.grace_min, "device": args.device}
    record_stage(run_dir, "mine", inputs, write_all(run_dir, files), config)
    n_rules = len(files["rules.txt"].splitlines())
    n_habits = len(files["habits.csv"].splitlines()) - 1
    print(f"mine: {n_rules} rules, {n_habits} habits -> {run_dir}")
    return EXIT_OK


# -- simulate -------------------------------------------------------------------

def parse_seeds(text: str) -> list[int]:
    a, sep, b = text.partition("..")
    try:
        lo, hi = int(a), int(b) if sep else int(a)
    except ValueError:
        raise ParameterError(f"--seeds expects a..b, got {text!r}") from None
    if hi < lo:
        raise ParameterError(f"empty seed range {text!r}")
    return list(range(lo, hi + 1))


def simulate_files(raw: dict) -> dict:
    from .simulate import SIM_FORMAT, ScenarioConfig, office_signatures, run

    cfg = ScenarioConfig.from_dict(raw)
    result = run(cfg)
    m = result.metrics
    files = ingest_files(result.consumption_log(), SIM_FORMAT, None)
    files.update({
        "scenario.json": json.dumps(raw, indent=2, sort_keys=True) + "\n",
        "consumption.txt": result.consumption_log(),
        "context.csv": result.context_log(),
        "audit.txt": "".join(line + "\n" for line in result.audit),
        "metrics.csv": m.to_csv(),
        "summary.txt": m.summary(),
        "hourly.csv": m.hourly_csv(),
        "presence.csv": m.presence_csv(),
        "signatures.csv": ed.write_signatures(office_signatures(cfg)),
    })
    return files


def _simulate_one(raw: dict, out: str) -> str:
    run_dir = Path(out)
    files = simulate_files(raw)
    record_stage(run_dir, "simulate", [], write_all(run_dir, files),
                 {"scenario": raw.get("name"), "seed": raw.get("seed")})
    return out


def cmd_simulate(args) -> int:
    from .simulate import ScenarioConfig, load_scenario_dict

    raw = load_scenario_dict(args.scenario)
    name = raw.get("name") or Path(args.scenario).stem
    root = Path(args.out) if args.out else default_out_root()
    seeds = parse_seeds(args.seeds) if args.seeds else [args.seed if args.seed is not None else raw.get("seed", 0)]
    jobs = []
    for seed in seeds:
        r = dict(raw, seed=seed)
        if "policy" in r:
            r["policy"] = dict(r["policy"], seed=seed)
        ScenarioConfig.from_dict(r).validate()  # fail before any run starts
        out = root / name / f"seed-{seed}" if args.seeds else root / name
        jobs.append((r, str(out)))
    if len(jobs) > 1 and args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            done = list(pool.map(_simulate_one, *zip(*jobs)))
    else:
        done = [_simulate_one(r, o) for r, o in jobs]
    for d in done:
        print(f"simulate: {d}")
    return EXIT_OK


# -- report ---------------------------------------------------------------------

def _weeks(text: Optional[str]) -> Optional[list[int]]:
    if not text:
        return None
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ParameterError(f"week list must be comma-separated integers: {text!r}") from None


def report_files(run_dir: Path, weeks_a=None, weeks_b=None) -> dict:
    from .simulate import Metrics, compare, format_comparison

    metrics = Metrics.from_csv(require(run_dir / "metrics.csv", "simulate").read_text())
    hourly = require(run_dir / "hourly.csv", "simulate").read_text().splitlines()
    presence = require(run_dir / "presence.csv", "simulate").read_text()
    raw = json.loads(require(run_dir / "scenario.json", "simulate").read_text())
    all_weeks = sorted({d.week for d in metrics.days})
    if weeks_a is None:
        on = sorted({w for ws in raw.get("rule_weeks", {}).values() for w in ws} & set(all_weeks))
        weeks_a = on or all_weeks
    if weeks_b is None:
        weeks_b = [w for w in all_weeks if w not in weeks_a] or list(weeks_a)

    lights_rows = ["date,hour,lights_minutes,luminosity"]
    monitor_rows = ["date,hour,monitor_w"]
    for row in hourly[1:]:
        d, h, n, lum, mon = row.split(",")
        lights_rows.append(f"{d},{h},{n},{lum}")
        monitor_rows.append(f"{d},{h},{mon}")
    weekly = ["week,appliance,mean_weekday_usage_h,energy_wh"]
    for w in all_weeks:
        for a in metrics.appliances:
            weekly.append(f"{w},{a},{metrics.mean_daily_usage(a, [w])!r},{metrics.weekly_energy_wh(a, w)!r}")
    files = {
        "report/lights_hourly.csv": "\n".join(lights_rows) + "\n",
        "report/presence.csv": presence,
        "report/monitor_watts.csv": "\n".join(monitor_rows) + "\n",
        "report/weekly.csv": "\n".join(weekly) + "\n",
    }
    if metrics.days:
        rows = compare(metrics, weeks_a, weeks_b)
        head = f"# group A weeks {','.join(map(str, weeks_a))}; group B weeks {','.join(map(str, weeks_b))}\n"
        files["report/comparison.csv"] = head + format_comparison(rows)
    return files


def cmd_report(args) -> int:
    run_dir = Path(args.run)
    files = report_files(run_dir, _weeks(args.weeks_a), _weeks(args.weeks_b))
    inputs = [run_dir / n for n in ("metrics.csv", "hourly.csv", "presence.csv", "scenario.json")]
    record_stage(run_dir, "report", inputs, write_all(run_dir, files),
                 {"weeks_a": args.weeks_a, "weeks_b": args.weeks_b})
    if "report/comparison.csv" in files:
        sys.stdout.write(files["report/comparison.csv"])
    return EXIT_OK


# -- entry point ----------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="habitwatt", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("ingest", help="parse a consumption log into per-line series")
    s.add_argument("log")
    s.add_argument("--format", help="'uci' (default), 'sim' or a format descriptor JSON file")
    s.add_argument("--context", help="optional context log to normalize alongside")
    s.add_argument("--out", help=f"run directory (default ${OUT_ENV}/<log stem>)")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("detect", help="cluster power changes into appliance events and periods")
    s.add_argument("run")
    s.add_argument("--signatures", help="signature table (default <run>/signatures.csv)")
    s.add_argument("--k", type=int, default=None, help="clusters per window (default 2n+1)")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("mine", help="mine habit rules from detected events")
    s.add_argument("run")
    s.add_argument("--min-support", type=float, default=DEFAULT_MIN_SUPPORT)
    s.add_argument("--min-confidence", type=float, default=DEFAULT_MIN_CONFIDENCE)
    s.add_argument("--grace-min", type=int, default=DEFAULT_GRACE_MIN)
    s.add_argument("--device", help="mine only this device's transactions")
    s.set_defaults(func=cmd_mine)

    s = sub.add_parser("simulate", help="run an office scenario")
    s.add_argument("scenario", help="scenario JSON file or shipped scenario name")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--seeds", help="seed range a..b, one run directory per seed")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--out", help=f"output root (default ${OUT_ENV} or ./runs)")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("report", help="emit figure tables and week-group comparison")
    s.add_argument("run")
    s.add_argument("--weeks-a", help="comma-separated weeks (default: automation weeks)")
    s.add_argument("--weeks-b", help="comma-separated weeks (default: the rest)")
    s.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except HabitWattError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
