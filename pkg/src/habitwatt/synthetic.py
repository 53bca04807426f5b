"""Synthetic metered data with known ground truth.

``schedule_series`` builds one line with non-overlapping switching events for
recovery checks. ``uci_household`` writes a household log in the UCI minute
layout with daily routines on each sub-meter, for exercising the full
ingest/detect/mine pipeline offline.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from datetime import datetime, timedelta
from typing import Sequence

from .eventdetect import OFF, ON, ApplianceSignature
from .ingest import UCI_COLUMNS, PowerSample, PowerSeries

DEFAULT_APPLIANCES = (("kettle", 500.0), ("iron", 1200.0), ("heater", 2500.0))


@dataclass(frozen=True)
class TrueEvent:
    timestamp: datetime
    appliance_id: str
    action: str


def schedule_series(
    appliances: Sequence[tuple] = DEFAULT_APPLIANCES,
    days: int = 7,
    seed: int = 0,
    noise_w: float = 0.0,
    base_w: float = 100.0,
    runs_per_day: int = 3,
    line_id: str = "house",
    start: datetime = datetime(2020, 3, 2),
) -> tuple[PowerSeries, list[TrueEvent], list[ApplianceSignature]]:
    """Random on/off runs for each appliance, no two switching events in one minute.

    Noise is zero-mean Gaussian with standard deviation ``noise_w`` per sample.
    """
    rng = random.Random(seed)
    n = days * 24 * 60
    level = [base_w] * n
    taken: set[int] = set()
    truth: list[TrueEvent] = []
    for app_id, watts in appliances:
        busy: list[tuple[int, int]] = []
        for day in range(days):
            placed = 0
            while placed < runs_per_day:
                on = day * 1440 + rng.randrange(0, 1440 - 130)
                off = on + rng.randrange(10, 120)
                if off >= n or on in taken or off in taken:
                    continue
                if any(on <= b + 1 and a <= off + 1 for a, b in busy):
                    continue
                busy.append((on, off))
                taken.update((on, off))
                placed += 1
                for i in range(on, off):
                    level[i] += watts
                truth.append(TrueEvent(start + timedelta(minutes=on), app_id, ON))
                truth.append(TrueEvent(start + timedelta(minutes=off), app_id, OFF))
    samples = []
    for i, w in enumerate(level):
        if noise_w:
            w += rng.gauss(0.0, noise_w)
        samples.append(PowerSample(start + timedelta(minutes=i), w / 1000.0, 0.0, 230.0, (0.0, 0.0, 0.0)))
    series = PowerSeries(line_id, tuple(samples), "active_power")
    sigs = [ApplianceSignature(a, w, max(25.0, 0.1 * w), line_id) for a, w in appliances]
    truth.sort(key=lambda e: (e.timestamp, e.appliance_id))
    return series, truth, sigs


# -- UCI-layout household -----------------------------------------------------

UCI_START = datetime(2006, 12, 16, 17, 24)

# (line, appliance, watts); watts are multiples of 60 so Wh/min stays integral
UCI_APPLIANCES = (
    ("kitchen", "dishwasher", 2040.0),
    ("kitchen", "oven", 1200.0),
    ("laundry", "washing_machine", 2160.0),
    ("heater_ac", "water_heater", 1020.0),
)


def uci_signatures() -> list[ApplianceSignature]:
    return [ApplianceSignature(app, w, max(45.0, 0.08 * w), line) for line, app, w in UCI_APPLIANCES]


def _routines(rng: random.Random, day: datetime) -> list[tuple]:
    """(appliance, start minute of day, duration) runs for one calendar day."""
    weekend = day.weekday() >= 5
    runs = [("water_heater", rng.randint(6 * 60 + 5, 6 * 60 + 50), rng.randint(40, 60))]
    if not weekend:
        runs.append(("water_heater", rng.randint(18 * 60 + 5, 18 * 60 + 40), rng.randint(30, 45)))
    if rng.random() < 0.8:
        runs.append(("dishwasher", rng.randint(20 * 60 + 10, 21 * 60), rng.randint(60, 90)))
    if weekend:
        runs.append(("washing_machine", rng.randint(9 * 60 + 5, 10 * 60), rng.randint(60, 100)))
        runs.append(("oven", rng.randint(12 * 60 + 5, 12 * 60 + 40), rng.randint(40, 70)))
    elif rng.random() < 0.3:
        runs.append(("oven", rng.randint(19 * 60 + 5, 19 * 60 + 30), rng.randint(30, 50)))
    return runs


def uci_household(days: int = 60, seed: int = 0, start: datetime = UCI_START,
                  missing_blocks: int = 3) -> str:
    """A household log in the UCI layout; returns the file text.

    Sub-meters carry Wh per minute as whole numbers like the original
    dataset; the global line adds a background load on top of them.
    """
    rng = random.Random(seed)
    n = days * 1440
    watts = {app: w for _, app, w in UCI_APPLIANCES}
    line_of = {app: line for line, app, _ in UCI_APPLIANCES}
    lines = {"kitchen": [0.0] * n, "laundry": [0.0] * n, "heater_ac": [0.0] * n}
    first_midnight = datetime(start.year, start.month, start.day)
    for d in range(days + 1):
        day = first_midnight + timedelta(days=d)
        base = int((day - start).total_seconds() // 60)
        for app, s, dur in _routines(rng, day):
            arr = lines[line_of[app]]
            for i in range(max(0, base + s), min(n, base + s + dur)):
                arr[i] += watts[app]
    gaps: set[int] = set()
    for _ in range(missing_blocks):
        at = rng.randrange(1440, n - 1440)
        gaps.update(range(at, at + rng.randint(2, 40)))

    out = [";".join(UCI_COLUMNS)]
    for i in range(n):
        ts = start + timedelta(minutes=i)
        stamp = f"{ts:%d/%m/%Y};{ts:%H:%M:%S}"
        if i in gaps:
            out.append(stamp + ";?;?;?;?;?;?;")
            continue
        subs = [int(round(lines[k][i] / 60.0)) for k in ("kitchen", "laundry", "heater_ac")]
        hour = ts.hour
        background = 300.0 + (500.0 if 18 <= hour < 23 else 0.0) + rng.uniform(-40.0, 40.0)
        total_w = background + sum(subs) * 60.0
        voltage = 240.0 + rng.uniform(-3.0, 3.0)
        reactive = 0.1 + rng.uniform(0.0, 0.1)
        intensity = total_w / voltage
        out.append(f"{stamp};{total_w / 1000.0:.3f};{reactive:.3f};{voltage:.2f};{intensity:.1f};"
                   f"{subs[0]:.3f};{subs[1]:.3f};{subs[2]:.3f}")
    return "\n".join(out) + "\n"
