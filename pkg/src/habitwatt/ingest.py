"""Parsing and alignment of minute-resolution consumption and context logs.

The consumption reader is driven by a :class:`LogFormat` descriptor so that
layouts other than the household-power default need no code change. Every
data record becomes exactly one :class:`PowerSample`; a record with an
unparseable field becomes a ``missing`` sample rather than being dropped, so
gaps stay visible to downstream stages.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field, asdict
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence, Union

from .errors import AlignmentError, FormatError, OrderingError

PERIOD = timedelta(minutes=1)

VALID = "valid"
MISSING = "missing"

UCI_COLUMNS = (
    "Date",
    "Time",
    "Global_active_power",
    "Global_reactive_power",
    "Voltage",
    "Global_intensity",
    "Sub_metering_1",
    "Sub_metering_2",
    "Sub_metering_3",
)

CONTEXT_HEADER = ("timestamp", "temperature", "humidity", "luminosity", "occupancy")


@dataclass(frozen=True)
class LogFormat:
    """Declarative description of a consumption log layout.

    ``lines`` maps a metered line id to its source: ``"active_power"`` for the
    whole-meter line or ``"submeter:<i>"`` for the i-th sub-meter (0-based).
    """

    separator: str = ";"
    missing: str = "?"
    date_column: str = "Date"
    time_column: str = "Time"
    date_format: str = "%d/%m/%Y"
    time_format: str = "%H:%M:%S"
    active_power: str = "Global_active_power"
    reactive_power: str = "Global_reactive_power"
    voltage: str = "Voltage"
    submeters: tuple = ("Sub_metering_1", "Sub_metering_2", "Sub_metering_3")
    columns: tuple = UCI_COLUMNS
    lines: tuple = (
        ("global", "active_power"),
        ("kitchen", "submeter:0"),
        ("laundry", "submeter:1"),
        ("heater_ac", "submeter:2"),
    )

    @property
    def line_ids(self) -> list[str]:
        return [name for name, _ in self.lines]

    def source_of(self, line_id: str) -> str:
        for name, source in self.lines:
            if name == line_id:
                return source
        raise KeyError(line_id)

    def to_json(self) -> str:
        d = asdict(self)
        d["lines"] = dict(self.lines)
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "LogFormat":
        d = json.loads(text)
        if "lines" in d and isinstance(d["lines"], dict):
            d["lines"] = tuple(d["lines"].items())
        for key in ("submeters", "columns", "lines"):
            if key in d:
                d[key] = tuple(tuple(x) if isinstance(x, list) else x for x in d[key])
        try:
            return cls(**d)
        except TypeError as exc:
            raise FormatError(f"bad format descriptor: {exc}") from None

    @classmethod
    def load(cls, path) -> "LogFormat":
        return cls.from_json(Path(path).read_text())


UCI_FORMAT = LogFormat()


@dataclass(frozen=True, slots=True)
class PowerSample:
    timestamp: datetime
    active_power: Optional[float] = None  # kW
    reactive_power: Optional[float] = None  # kW
    voltage: Optional[float] = None  # V
    submeter_energy: Optional[tuple] = None  # Wh per minute, one per sub-meter
    quality: str = VALID

    @classmethod
    def missing_at(cls, timestamp: datetime) -> "PowerSample":
        return cls(timestamp, quality=MISSING)

    @property
    def valid(self) -> bool:
        return self.quality == VALID


@dataclass(frozen=True)
class PowerSeries:
    """One metered line on a fixed 60 s grid."""

    line_id: str
    samples: tuple
    source: str = "active_power"

    def __post_init__(self):
        for prev, cur in zip(self.samples, self.samples[1:]):
            if cur.timestamp - prev.timestamp != PERIOD:
                raise OrderingError(
                    f"series {self.line_id}: non-contiguous step at {cur.timestamp.isoformat()}"
                )

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def timestamps(self) -> list[datetime]:
        return [s.timestamp for s in self.samples]

    def watts(self) -> list[Optional[float]]:
        """Line power in watts per sample; ``None`` for missing samples."""
        return [sample_watts(s, self.source) for s in self.samples]

    @property
    def start(self) -> Optional[datetime]:
        return self.samples[0].timestamp if self.samples else None

    @property
    def end(self) -> Optional[datetime]:
        return self.samples[-1].timestamp if self.samples else None


def sample_watts(sample: PowerSample, source: str) -> Optional[float]:
    if not sample.valid:
        return None
    if source == "active_power":
        return sample.active_power * 1000.0
    if source == "watts":
        # normalized stage files keep watts in the active-power slot
        return sample.active_power
    if source.startswith("submeter:"):
        # Wh consumed during one minute -> mean W over that minute
        return sample.submeter_energy[int(source.split(":", 1)[1])] * 60.0
    raise ValueError(f"unknown line source {source!r}")


@dataclass(frozen=True)
class ContextSample:
    timestamp: datetime
    temperature: float
    humidity: float
    luminosity: float
    occupancy: bool

    def __post_init__(self):
        if not 0.0 <= self.luminosity <= 1.0:
            raise ValueError(f"luminosity {self.luminosity} outside [0, 1]")
        if not 0.0 <= self.humidity <= 100.0:
            raise ValueError(f"humidity {self.humidity} outside [0, 100]")


@dataclass
class ParseReport:
    data_lines: int = 0
    records: int = 0
    skipped: int = 0
    missing: int = 0
    gap_filled: int = 0
    record_errors: list = field(default_factory=list)  # (line_no, reason)
    ordering_errors: list = field(default_factory=list)  # line_no

    def to_text(self) -> str:
        out = [
            f"data_lines={self.data_lines}",
            f"records={self.records}",
            f"skipped={self.skipped}",
            f"missing={self.missing}",
            f"gap_filled={self.gap_filled}",
            f"record_errors={len(self.record_errors)}",
            f"ordering_errors={len(self.ordering_errors)}",
        ]
        for line_no, reason in self.record_errors:
            out.append(f"record_error.{line_no}={reason}")
        for line_no in self.ordering_errors:
            out.append(f"ordering_error.{line_no}=timestamp not after previous record")
        return "\n".join(out) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ParseReport":
        rep = cls()
        for line in text.splitlines():
            key, _, value = line.partition("=")
            if key.startswith("record_error."):
                rep.record_errors.append((int(key.split(".", 1)[1]), value))
            elif key.startswith("ordering_error."):
                rep.ordering_errors.append(int(key.split(".", 1)[1]))
            elif key in ("data_lines", "records", "skipped", "missing", "gap_filled"):
                setattr(rep, key, int(value))
        return rep


Source = Union[str, bytes, Path, io.IOBase, Iterable[str]]


def _iter_lines(stream: Source) -> Iterator[str]:
    if isinstance(stream, Path):
        with open(stream, encoding="utf-8") as fh:
            yield from fh
        return
    if isinstance(stream, bytes):
        stream = stream.decode("utf-8")
    if isinstance(stream, str):
        yield from io.StringIO(stream)
        return
    for line in stream:
        yield line.decode("utf-8") if isinstance(line, bytes) else line


def _to_float(text: str, missing: str) -> float:
    text = text.strip()
    if text == missing or text == "":
        raise ValueError("missing")
    value = float(text)
    if not math.isfinite(value):
        raise ValueError("non-finite")
    return value


def fill_gaps(samples: Sequence[PowerSample]) -> tuple[list[PowerSample], int]:
    """Insert missing-quality samples so consecutive timestamps differ by one period."""
    out: list[PowerSample] = []
    inserted = 0
    for s in samples:
        if out:
            t = out[-1].timestamp + PERIOD
            while t < s.timestamp:
                out.append(PowerSample.missing_at(t))
                inserted += 1
                t += PERIOD
        out.append(s)
    return out, inserted


def parse_consumption_log(
    stream: Source, fmt: LogFormat = UCI_FORMAT, strict_order: bool = False
) -> tuple[dict[str, PowerSeries], ParseReport]:
    """Parse a consumption log into one gap-free series per configured line.

    Records with the wrong field count or an unreadable timestamp are skipped
    and listed in the report. Records whose timestamp does not advance are
    rejected as ordering errors (or raise, with ``strict_order``).
    """
    lines = _iter_lines(stream)
    report = ParseReport()
    try:
        header_line = next(lines)
    except StopIteration:
        raise FormatError("empty log: no header line") from None
    header = [h.strip() for h in header_line.rstrip("\r\n").split(fmt.separator)]
    required = [fmt.date_column, fmt.time_column, fmt.active_power, fmt.reactive_power,
                fmt.voltage, *fmt.submeters]
    absent = [c for c in required if c not in header]
    if absent or len(set(header)) != len(header):
        raise FormatError(f"malformed header, missing columns {absent}: {header_line.strip()!r}")
    idx = {name: i for i, name in enumerate(header)}
    i_date, i_time = idx[fmt.date_column], idx[fmt.time_column]
    i_ap, i_rp, i_v = idx[fmt.active_power], idx[fmt.reactive_power], idx[fmt.voltage]
    i_sub = [idx[c] for c in fmt.submeters]
    ts_format = f"{fmt.date_format} {fmt.time_format}"
    n_fields = len(header)

    samples: list[PowerSample] = []
    last_ts: Optional[datetime] = None
    for line_no, raw in enumerate(lines, start=2):
        raw = raw.rstrip("\r\n")
        if not raw.strip():
            continue
        report.data_lines += 1
        parts = raw.split(fmt.separator)
        if len(parts) != n_fields:
            report.skipped += 1
            report.record_errors.append((line_no, f"expected {n_fields} fields, got {len(parts)}"))
            continue
        try:
            ts = datetime.strptime(f"{parts[i_date].strip()} {parts[i_time].strip()}", ts_format)
        except ValueError:
            report.skipped += 1
            report.record_errors.append((line_no, "unparseable timestamp"))
            continue
        ts = ts.replace(second=0, microsecond=0, tzinfo=timezone.utc)
        if last_ts is not None and ts <= last_ts:
            if strict_order:
                raise OrderingError(f"line {line_no}: timestamp {ts.isoformat()} does not advance")
            report.skipped += 1
            report.ordering_errors.append(line_no)
            continue
        try:
            ap = _to_float(parts[i_ap], fmt.missing)
            rp = _to_float(parts[i_rp], fmt.missing)
            v = _to_float(parts[i_v], fmt.missing)
            subs = tuple(_to_float(parts[i], fmt.missing) for i in i_sub)
            if ap < 0 or v <= 0 or rp < 0 or any(x < 0 for x in subs):
                raise ValueError("out of range")
            sample = PowerSample(ts, ap, rp, v, subs)
        except ValueError:
            sample = PowerSample.missing_at(ts)
            report.missing += 1
        samples.append(sample)
        report.records += 1
        last_ts = ts

    filled, report.gap_filled = fill_gaps(samples)
    frozen = tuple(filled)
    series = {
        line_id: PowerSeries(line_id, frozen, source) for line_id, source in fmt.lines
    }
    return series, report


def _fmt_num(x: float) -> str:
    return repr(float(x))


def format_consumption_log(samples: Iterable[PowerSample], fmt: LogFormat = UCI_FORMAT) -> str:
    """Serialize samples in ``fmt``; columns the sample does not carry are written as missing."""
    sep = fmt.separator
    out = [sep.join(fmt.columns)]
    for s in samples:
        row = {
            fmt.date_column: s.timestamp.strftime(fmt.date_format),
            fmt.time_column: s.timestamp.strftime(fmt.time_format),
        }
        if s.valid:
            row[fmt.active_power] = _fmt_num(s.active_power)
            row[fmt.reactive_power] = _fmt_num(s.reactive_power)
            row[fmt.voltage] = _fmt_num(s.voltage)
            for col, val in zip(fmt.submeters, s.submeter_energy):
                row[col] = _fmt_num(val)
        out.append(sep.join(row.get(c, fmt.missing) for c in fmt.columns))
    return "\n".join(out) + "\n"


def _parse_iso(text: str) -> datetime:
    ts = datetime.fromisoformat(text.strip().replace("Z", "+00:00"))
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc).replace(second=0, microsecond=0)


def parse_context_log(stream: Source) -> list[ContextSample]:
    lines = _iter_lines(stream)
    try:
        header = next(lines)
    except StopIteration:
        raise FormatError("empty context log: no header line") from None
    if tuple(h.strip() for h in header.strip().split(",")) != CONTEXT_HEADER:
        raise FormatError(f"malformed context header: {header.strip()!r}")
    out: list[ContextSample] = []
    for line_no, raw in enumerate(lines, start=2):
        if not raw.strip():
            continue
        parts = raw.strip().split(",")
        if len(parts) != 5:
            raise FormatError(f"context line {line_no}: expected 5 fields")
        try:
            occ = parts[4].strip()
            if occ not in ("0", "1"):
                raise ValueError(f"occupancy {occ!r} not in {{0,1}}")
            sample = ContextSample(
                _parse_iso(parts[0]), float(parts[1]), float(parts[2]), float(parts[3]), occ == "1"
            )
        except ValueError as exc:
            raise FormatError(f"context line {line_no}: {exc}") from None
        if out and sample.timestamp <= out[-1].timestamp:
            raise OrderingError(f"context line {line_no}: timestamp does not advance")
        out.append(sample)
    return out


def format_context_log(samples: Iterable[ContextSample]) -> str:
    out = [",".join(CONTEXT_HEADER)]
    for c in samples:
        out.append(
            f"{c.timestamp.strftime('%Y-%m-%dT%H:%M:%SZ')},{_fmt_num(c.temperature)},"
            f"{_fmt_num(c.humidity)},{_fmt_num(c.luminosity)},{int(c.occupancy)}"
        )
    return "\n".join(out) + "\n"


def align_and_fill(
    series: PowerSeries, context: Sequence[ContextSample]
) -> tuple[PowerSeries, list[ContextSample]]:
    """Put a power series and a context stream on one shared minute grid.

    The grid runs from the later of the two starts to the end of the power
    series. Context values are step-held from the latest prior observation;
    power gaps become missing samples.
    """
    if not series.samples or not context:
        return PowerSeries(series.line_id, (), series.source), []
    for a, b in zip(context, context[1:]):
        if b.timestamp <= a.timestamp:
            raise OrderingError("context stream not time-ordered")
    filled, _ = fill_gaps(series.samples)
    if context[0].timestamp > filled[-1].timestamp or context[-1].timestamp < filled[0].timestamp:
        raise AlignmentError("power series and context stream do not overlap")
    start = max(filled[0].timestamp, context[0].timestamp)
    power = [s for s in filled if s.timestamp >= start]

    held: list[ContextSample] = []
    j = 0
    for s in power:
        while j + 1 < len(context) and context[j + 1].timestamp <= s.timestamp:
            j += 1
        c = context[j]
        held.append(c if c.timestamp == s.timestamp else
                    ContextSample(s.timestamp, c.temperature, c.humidity, c.luminosity, c.occupancy))
    return PowerSeries(series.line_id, tuple(power), series.source), held
