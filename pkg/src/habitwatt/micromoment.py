"""Context stamping of appliance events and itemization into transactions."""

from __future__ import annotations

import math
from dataclasses import dataclass
from datetime import datetime, timedelta
from typing import Iterable, Optional, Sequence

from .errors import BucketingError, CoverageError
from .eventdetect import EXCESSIVE, OFF, ON, ApplianceEvent, UsagePeriod
from .ingest import ContextSample

SWITCH_ON = "switch_on"
SWITCH_OFF = "switch_off"
EXCESSIVE_USE = "excessive_use"
USE_WHILE_ABSENT = "use_while_absent"
MOMENT_CLASSES = (SWITCH_ON, SWITCH_OFF, EXCESSIVE_USE, USE_WHILE_ABSENT)

WEEKDAY = "weekday"
WEEKEND = "weekend"
PRESENT = "present"
ABSENT = "absent"

DEFAULT_GRACE_MIN = 15


@dataclass(frozen=True)
class Bucket:
    name: str
    low: float
    high: float
    closed_high: bool = False

    def contains(self, value: float) -> bool:
        if self.closed_high:
            return self.low <= value <= self.high
        return self.low <= value < self.high


@dataclass(frozen=True)
class BucketingConfig:
    luminosity: tuple = (
        Bucket("dark", 0.0, 0.2),
        Bucket("dim", 0.2, 0.5),
        Bucket("bright", 0.5, 1.0, closed_high=True),
    )
    temperature: tuple = (
        Bucket("cold", -math.inf, 15.0),
        Bucket("mild", 15.0, 26.0),
        Bucket("hot", 26.0, math.inf),
    )

    def luminosity_bucket(self, value: float) -> str:
        return _bucket(self.luminosity, value, "luminosity")

    def temperature_bucket(self, value: float) -> str:
        return _bucket(self.temperature, value, "temperature")

    def lower_edge(self, kind: str, name: str) -> float:
        for b in getattr(self, kind):
            if b.name == name:
                return b.low
        raise KeyError(name)


def _bucket(buckets, value, what) -> str:
    for b in buckets:
        if b.contains(value):
            return b.name
    raise BucketingError(f"{what} value {value} outside configured buckets")


DEFAULT_BUCKETS = BucketingConfig()


@dataclass(frozen=True)
class ContextSnapshot:
    """Context at one minute. Sensor fields are ``None`` for calendar-only context."""

    hour: int
    day_type: str
    occupancy: Optional[str] = None
    luminosity: Optional[float] = None
    temperature: Optional[float] = None


@dataclass(frozen=True)
class MicroMoment:
    timestamp: datetime
    appliance_id: str
    moment_class: str
    action: str  # "on" | "off": the action taken, or called for
    context: ContextSnapshot
    event: Optional[ApplianceEvent] = None


@dataclass(frozen=True)
class Transaction:
    items: tuple  # sorted "key:value" strings

    def __post_init__(self):
        keys = [i.split(":", 1)[0] for i in self.items]
        if len(keys) != len(set(keys)):
            raise ValueError(f"duplicate key in transaction {self.items}")
        if keys.count("action") != 1:
            raise ValueError(f"transaction needs exactly one action item: {self.items}")

    @property
    def as_dict(self) -> dict:
        return dict(i.split(":", 1) for i in self.items)

    def to_line(self) -> str:
        return " ".join(self.items)

    @classmethod
    def from_line(cls, line: str) -> "Transaction":
        return cls(tuple(sorted(line.split(), key=lambda i: i.split(":", 1)[0])))


def snapshot(ts: datetime, sample: Optional[ContextSample]) -> ContextSnapshot:
    day = WEEKEND if ts.weekday() >= 5 else WEEKDAY
    if sample is None:
        return ContextSnapshot(ts.hour, day)
    return ContextSnapshot(ts.hour, day, PRESENT if sample.occupancy else ABSENT,
                           sample.luminosity, sample.temperature)


def contextualize(
    events: Sequence[ApplianceEvent],
    context: Optional[Sequence[ContextSample]],
    periods: Sequence[UsagePeriod] = (),
    grace_min: int = DEFAULT_GRACE_MIN,
) -> list[MicroMoment]:
    """Turn events and usage periods into context-stamped micro-moments.

    With ``context=None`` moments carry calendar context only and no
    absence moments are produced.
    """
    by_minute = {c.timestamp: c for c in context} if context is not None else None
    moments: list[MicroMoment] = []

    def ctx_at(ts):
        return None if by_minute is None else by_minute.get(ts)

    uncovered = [e for e in events if by_minute is not None and e.timestamp not in by_minute]
    if uncovered:
        listed = ", ".join(f"{e.appliance_id}@{e.timestamp.isoformat()}" for e in uncovered[:10])
        raise CoverageError(f"{len(uncovered)} event(s) outside context coverage: {listed}")

    off_events = {(e.appliance_id, e.timestamp): e for e in events if e.action == OFF}
    for e in events:
        cls = SWITCH_ON if e.action == ON else SWITCH_OFF
        moments.append(MicroMoment(e.timestamp, e.appliance_id, cls, e.action.lower(),
                                   snapshot(e.timestamp, ctx_at(e.timestamp)), e))

    for p in periods:
        if p.usage_class == EXCESSIVE:
            closing = off_events.get((p.appliance_id, p.end))
            moments.append(MicroMoment(p.end, p.appliance_id, EXCESSIVE_USE, "off",
                                       snapshot(p.end, ctx_at(p.end)), closing))
        if by_minute is None:
            continue
        run = 0
        t = p.start
        while t < p.end:
            c = by_minute.get(t)
            run = run + 1 if c is not None and not c.occupancy else 0
            if run == grace_min:
                # stamped at grace expiry with the last observed (absent) context
                at = t + timedelta(minutes=1)
                moments.append(MicroMoment(at, p.appliance_id, USE_WHILE_ABSENT, "off",
                                           snapshot(at, c)))
            t += timedelta(minutes=1)

    order = {c: i for i, c in enumerate(MOMENT_CLASSES)}
    moments.sort(key=lambda m: (m.timestamp, m.appliance_id, order[m.moment_class]))
    return moments


def build_transactions(moments: Iterable[MicroMoment],
                       buckets: BucketingConfig = DEFAULT_BUCKETS) -> list[Transaction]:
    out = []
    for m in moments:
        c = m.context
        items = {
            "device": m.appliance_id,
            "action": m.action,
            "hour": str(c.hour),
            "day": c.day_type,
        }
        if c.occupancy is not None:
            items["occ"] = c.occupancy
        if c.luminosity is not None:
            items["lum"] = buckets.luminosity_bucket(c.luminosity)
        if c.temperature is not None:
            items["temp"] = buckets.temperature_bucket(c.temperature)
        out.append(Transaction(tuple(f"{k}:{v}" for k, v in sorted(items.items()))))
    return out


def write_transactions(txs: Iterable[Transaction]) -> str:
    return "".join(t.to_line() + "\n" for t in txs)


def read_transactions(text: str) -> list[Transaction]:
    return [Transaction.from_line(line) for line in text.splitlines() if line.strip()]
