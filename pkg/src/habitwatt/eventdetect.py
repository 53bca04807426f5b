"""Appliance on/off detection from per-line power series.

Pipeline: power deltas over 1-minute and 5-minute windows, 1-D k-means over
the delta magnitudes, cluster-to-signature matching, then pairing of ON/OFF
events into usage periods.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigError, FormatError, ParameterError
from .ingest import PowerSeries, _parse_iso

log = logging.getLogger(__name__)

ONE_MINUTE = "one_minute"
FIVE_MINUTE = "five_minute"
WINDOWS = (ONE_MINUTE, FIVE_MINUTE)

ON = "ON"
OFF = "OFF"

NORMAL = "normal"
EXCESSIVE = "excessive"
OPEN_ENDED = "open_ended"

DEFAULT_RESTARTS = 10
TIE_WATTS = 1.0


@dataclass(frozen=True)
class ChangePoint:
    timestamp: datetime
    delta_power: float  # W, signed
    window: str = ONE_MINUTE


@dataclass(frozen=True)
class ChangeCluster:
    """A k-means cluster of power changes.

    Ranges are ``(lower_limit, upper_limit]`` except the lowest cluster,
    which is closed at its lower limit (the smallest observed value).
    """

    centroid: float
    member_count: int
    lower_limit: float
    upper_limit: float


@dataclass(frozen=True)
class ApplianceSignature:
    appliance_id: str
    nominal_power: float
    tolerance: float
    room: str
    slow_ramp: bool = False

    def __post_init__(self):
        if self.nominal_power <= 0:
            raise ConfigError(f"{self.appliance_id}: nominal power must be > 0")
        if self.tolerance < 0:
            raise ConfigError(f"{self.appliance_id}: tolerance must be >= 0")


@dataclass(frozen=True)
class ApplianceEvent:
    timestamp: datetime
    appliance_id: str
    action: str
    matched_delta: float
    confidence: float


@dataclass(frozen=True)
class UsagePeriod:
    appliance_id: str
    start: datetime
    end: datetime
    energy: float  # Wh
    usage_class: str = NORMAL

    @property
    def duration_min(self) -> float:
        return (self.end - self.start).total_seconds() / 60.0


# -- deltas -------------------------------------------------------------------

def compute_deltas(series: PowerSeries) -> list[ChangePoint]:
    """1-minute deltas between adjacent valid samples, then 5-minute deltas
    between adjacent complete clock-aligned 5-minute blocks."""
    watts = series.watts()
    stamps = series.timestamps
    out: list[ChangePoint] = []
    for i in range(1, len(watts)):
        a, b = watts[i - 1], watts[i]
        if a is not None and b is not None:
            out.append(ChangePoint(stamps[i], b - a, ONE_MINUTE))

    blocks: dict[datetime, list[float]] = {}
    for ts, w in zip(stamps, watts):
        start = ts - timedelta(minutes=ts.minute % 5)
        blocks.setdefault(start, []).append(w)
    prev_start, prev_mean = None, None
    for start in sorted(blocks):
        vals = blocks[start]
        if len(vals) == 5 and all(v is not None for v in vals):
            mean = sum(vals) / 5.0
            if prev_start is not None and start - prev_start == timedelta(minutes=5):
                out.append(ChangePoint(start, mean - prev_mean, FIVE_MINUTE))
            prev_start, prev_mean = start, mean
        else:
            prev_start, prev_mean = None, None
    return out


# -- clustering ---------------------------------------------------------------

def _assign(x_sorted: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    bounds = (centroids[1:] + centroids[:-1]) / 2.0
    return np.searchsorted(bounds, x_sorted, side="left")


def _plusplus_init(distinct: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    chosen = [distinct[rng.integers(len(distinct))]]
    for _ in range(1, k):
        d2 = np.min((distinct[:, None] - np.asarray(chosen)[None, :]) ** 2, axis=1)
        total = d2.sum()
        if total <= 0:
            break
        chosen.append(distinct[rng.choice(len(distinct), p=d2 / total)])
    return np.sort(np.asarray(chosen, dtype=float))


class _Sorted:
    """Sorted values with prefix sums so cluster moments are O(1) per range."""

    def __init__(self, x: np.ndarray):
        self.x = x
        self.s1 = np.concatenate([[0.0], np.cumsum(x)])
        self.s2 = np.concatenate([[0.0], np.cumsum(x * x)])

    def cuts(self, centroids: np.ndarray) -> np.ndarray:
        bounds = (centroids[1:] + centroids[:-1]) / 2.0
        inner = np.searchsorted(self.x, bounds, side="right")
        return np.concatenate([[0], inner, [len(self.x)]])

    def moments(self, cuts: np.ndarray):
        n = np.diff(cuts)
        s = self.s1[cuts[1:]] - self.s1[cuts[:-1]]
        q = self.s2[cuts[1:]] - self.s2[cuts[:-1]]
        return n, s, q


def _lloyd(data: _Sorted, centroids: np.ndarray, max_iter: int = 500) -> tuple[np.ndarray, float]:
    x = data.x
    for _ in range(max_iter):
        n, s, _ = data.moments(data.cuts(centroids))
        new = centroids.copy()
        nz = n > 0
        new[nz] = s[nz] / n[nz]
        if not nz.all():
            # reseed each empty cluster at the point worst served by the current centroids
            err = np.min((x[:, None] - new[nz][None, :]) ** 2, axis=1)
            for j in np.flatnonzero(~nz):
                cand = int(np.argmax(err))
                new[j] = x[cand]
                err[x == x[cand]] = -1.0
        new = np.sort(new)
        if np.array_equal(new, centroids):
            break
        centroids = new
    n, s, q = data.moments(data.cuts(centroids))
    nz = n > 0
    w = float(np.sum(q[nz] - s[nz] ** 2 / n[nz]))
    return centroids, max(w, 0.0)


def _partition_wcss(data: _Sorted, cents: np.ndarray) -> np.ndarray:
    """WCSS of the nearest-centroid partition for each row of sorted centroid sets."""
    m, k = cents.shape
    bounds = (cents[:, 1:] + cents[:, :-1]) / 2.0
    inner = np.searchsorted(data.x, bounds.ravel(), side="right").reshape(m, k - 1)
    cuts = np.hstack([np.zeros((m, 1), dtype=int), inner, np.full((m, 1), len(data.x))])
    n = np.diff(cuts, axis=1)
    s = data.s1[cuts[:, 1:]] - data.s1[cuts[:, :-1]]
    q = data.s2[cuts[:, 1:]] - data.s2[cuts[:, :-1]]
    with np.errstate(divide="ignore", invalid="ignore"):
        within = np.where(n > 0, q - s * s / np.maximum(n, 1), 0.0)
    return within.sum(axis=1)


def _relocate_refine(data: _Sorted, centroids: np.ndarray, w: float) -> tuple[np.ndarray, float]:
    """Escape Lloyd local minima by moving one centroid onto some data point.

    Every (dropped centroid, data point) pair is scored at once; the best
    move is polished with Lloyd and kept only if the WCSS drops.
    """
    k = len(centroids)
    if k < 2:
        return centroids, w
    pts = np.unique(data.x)
    for _ in range(100):
        rows = []
        for j in range(k):
            rest = np.delete(centroids, j)
            rows.append(np.hstack([np.tile(rest, (len(pts), 1)), pts[:, None]]))
        cand = np.sort(np.vstack(rows), axis=1)
        scores = _partition_wcss(data, cand)
        best = int(np.argmin(scores))
        if not scores[best] < w * (1 - 1e-12):
            break
        c2, w2 = _lloyd(data, cand[best])
        if not w2 < w * (1 - 1e-12):
            break
        centroids, w = c2, w2
    return centroids, w


def kmeans_1d(values: Sequence[float], k: int, seed: int = 0,
              restarts: int = DEFAULT_RESTARTS) -> tuple[np.ndarray, float]:
    """Best-of-``restarts`` Lloyd k-means on a line; returns sorted centroids and WCSS."""
    x = np.sort(np.asarray(values, dtype=float))
    if x.size == 0:
        raise ParameterError("cannot cluster an empty value list")
    distinct = np.unique(x)
    if k < 1 or k > len(distinct):
        raise ParameterError(f"k={k} must be in [1, {len(distinct)}] (distinct values)")
    data = _Sorted(x)
    best_c, best_w = None, math.inf
    for r in range(restarts):
        rng = np.random.default_rng(seed + r)
        init = _plusplus_init(distinct, k, rng)
        if len(init) < k:
            continue
        c, w = _relocate_refine(data, *_lloyd(data, init))
        if w < best_w:
            best_c, best_w = c, w
    return best_c, best_w


def cluster_changes(values: Sequence[float], k: int, seed: int = 0,
                    restarts: int = DEFAULT_RESTARTS) -> list[ChangeCluster]:
    centroids, _ = kmeans_1d(values, k, seed, restarts)
    x = np.sort(np.asarray(values, dtype=float))
    labels = _assign(x, centroids)
    counts = np.bincount(labels, minlength=len(centroids))
    bounds = list((centroids[1:] + centroids[:-1]) / 2.0)
    lowers = [float(x[0])] + bounds
    uppers = bounds + [float(x[-1])]
    return [
        ChangeCluster(float(c), int(n), float(lo), float(hi))
        for c, n, lo, hi in zip(centroids, counts, lowers, uppers)
    ]


def cluster_index(value: float, clusters: Sequence[ChangeCluster]) -> int:
    for i, c in enumerate(clusters[:-1]):
        if value <= c.upper_limit:
            return i
    return len(clusters) - 1


def wcss(values: Sequence[float], clusters: Sequence[ChangeCluster]) -> float:
    return float(sum((v - clusters[cluster_index(v, clusters)].centroid) ** 2 for v in values))


def near_zero_index(clusters: Sequence[ChangeCluster]) -> int:
    return min(range(len(clusters)), key=lambda i: abs(clusters[i].centroid))


# -- mapping ------------------------------------------------------------------

@dataclass
class MappingResult:
    events: list = field(default_factory=list)
    ambiguous: list = field(default_factory=list)  # (ChangePoint, [appliance ids])
    unmapped: list = field(default_factory=list)  # ChangeCluster with no signature


def _confidence(delta: float, sig: ApplianceSignature) -> float:
    err = abs(abs(delta) - sig.nominal_power)
    if sig.tolerance == 0:
        return 1.0 if err == 0 else 0.0
    return min(1.0, max(0.0, 1.0 - err / sig.tolerance))


def match_signature(magnitude: float, signatures: Sequence[ApplianceSignature]):
    """Return the matching signature, ``None`` for no match, or a list of tied candidates."""
    cands = sorted(
        (abs(magnitude - s.nominal_power), s.appliance_id, s)
        for s in signatures
        if abs(magnitude - s.nominal_power) <= s.tolerance
    )
    if not cands:
        return None
    if len(cands) > 1 and cands[1][0] - cands[0][0] <= TIE_WATTS:
        return [c[2] for c in cands if c[0] - cands[0][0] <= TIE_WATTS]
    return cands[0][2]


def map_changes_to_actions(
    changes: Sequence[ChangePoint],
    clusters: Sequence[ChangeCluster],
    signatures: Sequence[ApplianceSignature],
) -> MappingResult:
    result = MappingResult()
    if not clusters:
        return result
    zero = near_zero_index(clusters)
    matches = {}
    for i, c in enumerate(clusters):
        if i == zero:
            continue
        m = match_signature(abs(c.centroid), signatures)
        matches[i] = m
        if m is None:
            result.unmapped.append(c)
    for cp in changes:
        i = cluster_index(cp.delta_power, clusters)
        if i == zero:
            continue
        m = matches[i]
        if m is None:
            continue
        if isinstance(m, list):
            result.ambiguous.append((cp, [s.appliance_id for s in m]))
            continue
        result.events.append(
            ApplianceEvent(cp.timestamp, m.appliance_id, ON if cp.delta_power > 0 else OFF,
                           cp.delta_power, _confidence(cp.delta_power, m))
        )
    return result


@dataclass
class Detection:
    events: list
    clusters: dict  # window -> list[ChangeCluster]
    ambiguous: list
    unmapped: list


def default_k(n_appliances: int) -> int:
    return 2 * n_appliances + 1


def detect_events(series: PowerSeries, signatures: Sequence[ApplianceSignature],
                  k: Optional[int] = None, seed: int = 0) -> Detection:
    """Run deltas, clustering and mapping for one metered line.

    Signatures whose ``room`` equals the series' line id take part; slow-ramp
    appliances are matched on 5-minute deltas, the rest on 1-minute deltas.
    """
    sigs = [s for s in signatures if s.room == series.line_id]
    changes = compute_deltas(series)
    det = Detection([], {}, [], [])
    for window in WINDOWS:
        wsigs = [s for s in sigs if s.slow_ramp == (window == FIVE_MINUTE)]
        wchanges = [c for c in changes if c.window == window]
        if not wsigs or not wchanges:
            continue
        values = [c.delta_power for c in wchanges]
        kk = min(k if k is not None else default_k(len(wsigs)), len(set(values)))
        clusters = cluster_changes(values, kk, seed)
        det.clusters[window] = clusters
        res = map_changes_to_actions(wchanges, clusters, wsigs)
        det.events.extend(res.events)
        det.ambiguous.extend(res.ambiguous)
        det.unmapped.extend(res.unmapped)
    det.events.sort(key=lambda e: (e.timestamp, e.appliance_id))
    return det


# -- usage periods ------------------------------------------------------------

@dataclass
class PeriodReport:
    orphans: list = field(default_factory=list)  # OFF events with no open ON
    dropped: list = field(default_factory=list)  # repeated ON events while open


def derive_usage_periods(
    events: Iterable[ApplianceEvent],
    nominal: dict,
    log_end: datetime,
) -> tuple[list[UsagePeriod], PeriodReport]:
    """Pair each ON with the next OFF of the same appliance.

    ``nominal`` maps appliance id to nominal watts (a signature list works
    too). An ON still open at ``log_end`` yields an ``open_ended`` period.
    """
    if not isinstance(nominal, dict):
        nominal = {s.appliance_id: s.nominal_power for s in nominal}
    report = PeriodReport()
    open_on: dict[str, ApplianceEvent] = {}
    periods: list[UsagePeriod] = []

    def close(on: ApplianceEvent, end: datetime, cls: str):
        minutes = (end - on.timestamp).total_seconds() / 60.0
        if minutes <= 0:
            return
        periods.append(UsagePeriod(on.appliance_id, on.timestamp, end,
                                   nominal[on.appliance_id] * minutes / 60.0, cls))

    for ev in sorted(events, key=lambda e: e.timestamp):
        if ev.action == ON:
            if ev.appliance_id in open_on:
                report.dropped.append(ev)
                log.debug("dropping repeated ON for %s at %s", ev.appliance_id, ev.timestamp)
            else:
                open_on[ev.appliance_id] = ev
        else:
            on = open_on.pop(ev.appliance_id, None)
            if on is None:
                report.orphans.append(ev)
            else:
                close(on, ev.timestamp, NORMAL)
    for on in open_on.values():
        close(on, log_end, OPEN_ENDED)
    periods.sort(key=lambda p: (p.start, p.appliance_id))
    return periods, report


def percentile_threshold(durations: Sequence[float], q: float = 90.0) -> float:
    return float(np.percentile(np.asarray(durations, dtype=float), q))


def characterize_usage(
    periods: Sequence[UsagePeriod],
    thresholds: Optional[dict] = None,
    history: Optional[dict] = None,
    q: float = 90.0,
) -> list[UsagePeriod]:
    """Mark closed periods longer than their appliance's threshold (minutes) as excessive.

    Thresholds come from ``thresholds``, else the q-th percentile of
    ``history`` durations, else of the closed periods given here.
    """
    thresholds = dict(thresholds or {})
    history = history or {}
    own: dict[str, list[float]] = {}
    for p in periods:
        if p.usage_class != OPEN_ENDED:
            own.setdefault(p.appliance_id, []).append(p.duration_min)
    out = []
    for p in periods:
        if p.usage_class == OPEN_ENDED:
            out.append(p)
            continue
        app = p.appliance_id
        if app not in thresholds:
            durations = history.get(app) or own.get(app)
            if not durations:
                raise ConfigError(f"no duration threshold or history for {app}")
            thresholds[app] = percentile_threshold(durations, q)
        out.append(replace(p, usage_class=EXCESSIVE if p.duration_min > thresholds[app] else NORMAL))
    return out


# -- text formats -------------------------------------------------------------

SIGNATURE_HEADER = ["appliance_id", "room", "nominal_power_w", "tolerance_w", "slow_ramp"]


def read_signatures(text: str) -> list[ApplianceSignature]:
    rows = list(csv.reader(io.StringIO(text), skipinitialspace=True))
    rows = [r for r in rows if r and not r[0].startswith("#")]
    if not rows or [h.strip() for h in rows[0]] != SIGNATURE_HEADER:
        raise FormatError("signature table header must be " + ",".join(SIGNATURE_HEADER))
    sigs = []
    for r in rows[1:]:
        if len(r) != 5:
            raise FormatError(f"signature row has {len(r)} fields: {r}")
        sigs.append(ApplianceSignature(r[0].strip(), float(r[2]), float(r[3]), r[1].strip(),
                                       r[4].strip().lower() in ("1", "true", "yes")))
    return sigs


def write_signatures(sigs: Iterable[ApplianceSignature]) -> str:
    lines = [",".join(SIGNATURE_HEADER)]
    for s in sigs:
        lines.append(f"{s.appliance_id},{s.room},{s.nominal_power!r},{s.tolerance!r},"
                     f"{'true' if s.slow_ramp else 'false'}")
    return "\n".join(lines) + "\n"


def _ts(t: datetime) -> str:
    return t.strftime("%Y-%m-%dT%H:%M:%SZ")


def _parse_ts(s: str) -> datetime:
    return _parse_iso(s)


def write_events(events: Iterable[ApplianceEvent]) -> str:
    lines = ["timestamp,appliance,action,delta_w,confidence"]
    for e in events:
        lines.append(f"{_ts(e.timestamp)},{e.appliance_id},{e.action},"
                     f"{e.matched_delta!r},{e.confidence!r}")
    return "\n".join(lines) + "\n"


def read_events(text: str) -> list[ApplianceEvent]:
    rows = list(csv.reader(io.StringIO(text)))
    return [ApplianceEvent(_parse_ts(r[0]), r[1], r[2], float(r[3]), float(r[4]))
            for r in rows[1:] if r]


def write_periods(periods: Iterable[UsagePeriod]) -> str:
    lines = ["appliance,start,end,energy_wh,usage_class"]
    for p in periods:
        lines.append(f"{p.appliance_id},{_ts(p.start)},{_ts(p.end)},{p.energy!r},{p.usage_class}")
    return "\n".join(lines) + "\n"


def read_periods(text: str) -> list[UsagePeriod]:
    rows = list(csv.reader(io.StringIO(text)))
    return [UsagePeriod(r[0], _parse_ts(r[1]), _parse_ts(r[2]), float(r[3]), r[4])
            for r in rows[1:] if r]
