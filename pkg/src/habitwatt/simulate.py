"""Minute-tick office world: occupant, daylight, metered appliances, automations.

The world publishes its sensors and meters on the bus, the automation engine
reacts, and every minute's power is integrated into :class:`Metrics`. The
power and context traces are written in the same formats ``ingest`` reads,
so a run doubles as input data for the detection and mining stages.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta, timezone
from pathlib import Path
from typing import Optional, Sequence

from .autobus import Bus, DeviceRegistry, Message
from .automation import (
    CAUSE_USER,
    CLOCK_TOPIC,
    AutomationEngine,
    SimClock,
    UserResponsePolicy,
    clock_payload,
    rule_from_record,
)
from .errors import ValidationError
from .ingest import ContextSample, LogFormat, PowerSample, format_consumption_log, format_context_log

SIM_FORMAT = LogFormat(lines=(
    ("global", "active_power"),
    ("office_lights", "submeter:0"),
    ("office_monitors", "submeter:1"),
    ("office_ac", "submeter:2"),
))

SCENARIO_DIR = Path(__file__).with_name("scenarios")
MINUTES_PER_DAY = 24 * 60
VOLTAGE = 230.0


def _hm(text) -> int:
    if isinstance(text, (int, float)):
        return int(text)
    h, m = text.split(":")
    return int(h) * 60 + int(m)


# -- configuration ----------------------------------------------------------------

@dataclass(frozen=True)
class ApplianceModel:
    appliance_id: str
    nominal_power: float
    standby_power: float = 0.0
    auto_standby_after: Optional[int] = None  # minutes of disuse before standby
    relay: str = ""  # registry device switching this appliance
    line: int = 0  # sub-meter index in the power trace
    uses: str = "always"  # "always" | "computer" | "cooling"

    def __post_init__(self):
        if self.nominal_power < 0 or self.standby_power < 0:
            raise ValidationError(f"{self.appliance_id}: power values must be >= 0")
        if self.standby_power > self.nominal_power:
            raise ValidationError(f"{self.appliance_id}: standby above nominal")


@dataclass(frozen=True)
class DaylightParams:
    sunrise: int = 7 * 60
    sunset: int = 19 * 60
    peak: float = 1.0
    cloud_min: float = 1.0  # per-day peak scale drawn from [cloud_min, 1]


@dataclass(frozen=True)
class WeatherParams:
    temp_min: float = 18.0
    temp_max: float = 24.0
    temp_day_jitter: float = 1.5
    humidity: float = 55.0


@dataclass(frozen=True)
class Block:
    present: bool
    duration_mean: float
    duration_jitter: float = 0.0
    computer_min: float = 0.0  # minutes of computer work at the start of a present block
    computer_jitter: float = 0.0


@dataclass(frozen=True)
class OccupantParams:
    present_days: tuple = (0, 1, 2, 3, 4)  # Monday = 0
    arrival_mean: int = 8 * 60
    arrival_jitter: float = 15.0
    departure_mean: int = 17 * 60
    departure_jitter: float = 20.0
    blocks: tuple = ()  # alternating present/absent blocks after arrival
    final_computer_min: float = 0.0
    final_computer_jitter: float = 0.0
    forget_lights_prob: float = 0.7  # leaving mid-day
    forget_lights_final_prob: float = 0.0  # leaving for the day
    light_on_prob: float = 0.5  # switch lights on at arrival despite enough daylight
    dim_threshold: float = 0.2
    hot_threshold: float = 26.0
    forget_ac_prob: float = 0.5


@dataclass(frozen=True)
class ScenarioConfig:
    name: str = "scenario"
    weeks: int = 1
    seed: int = 0
    start: date = date(2019, 10, 7)  # a Monday
    occupant: Optional[OccupantParams] = None  # None = nobody ever comes in
    daylight: DaylightParams = DaylightParams()
    weather: WeatherParams = WeatherParams()
    appliances: tuple = ()
    relays: tuple = ()  # (device id, initial state)
    rules: tuple = ()  # rule records (see automation.rule_from_record)
    rule_weeks: tuple = ()  # (rule id, (week numbers enabled)); unlisted rules always on
    policy: dict = field(default_factory=lambda: {"accept_probability": 1.0, "latency_min": 2})
    expiry_min: float = 30.0

    def validate(self) -> None:
        if self.weeks < 0:
            raise ValidationError("duration must be >= 0 weeks")
        ids = {r["id"] for r in self.rules}
        for rule_id, _ in self.rule_weeks:
            if rule_id not in ids:
                raise ValidationError(f"enablement references unknown automation {rule_id!r}")
        relays = {d for d, _ in self.relays}
        for a in self.appliances:
            if a.relay not in relays:
                raise ValidationError(f"{a.appliance_id}: unknown relay {a.relay!r}")

    def with_(self, **changes) -> "ScenarioConfig":
        from dataclasses import replace
        return replace(self, **changes)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        if "start" in d:
            d["start"] = date.fromisoformat(d["start"])
        if d.get("occupant") is not None:
            occ = dict(d["occupant"])
            for key in ("arrival_mean", "departure_mean"):
                if key in occ:
                    occ[key] = _hm(occ[key])
            occ["blocks"] = tuple(Block(**b) for b in occ.get("blocks", ()))
            if "present_days" in occ:
                occ["present_days"] = tuple(occ["present_days"])
            d["occupant"] = OccupantParams(**occ)
        if "daylight" in d:
            dl = dict(d["daylight"])
            for key in ("sunrise", "sunset"):
                if key in dl:
                    dl[key] = _hm(dl[key])
            d["daylight"] = DaylightParams(**dl)
        if "weather" in d:
            d["weather"] = WeatherParams(**d["weather"])
        d["appliances"] = tuple(ApplianceModel(**a) for a in d.get("appliances", ()))
        d["relays"] = tuple((k, v) for k, v in dict(d.get("relays", {})).items())
        d["rules"] = tuple(d.get("rules", ()))
        d["rule_weeks"] = tuple((k, tuple(v)) for k, v in dict(d.get("rule_weeks", {})).items())
        try:
            cfg = cls(**d)
        except TypeError as exc:
            raise ValidationError(f"bad scenario: {exc}") from None
        return cfg

    @classmethod
    def load(cls, path_or_name) -> "ScenarioConfig":
        return cls.from_dict(load_scenario_dict(path_or_name))


def load_scenario_dict(path_or_name) -> dict:
    """Raw scenario mapping from a JSON file path or a shipped scenario name."""
    path = Path(path_or_name)
    if not path.is_file():
        path = SCENARIO_DIR / f"{path_or_name}.json"
    if not path.is_file():
        raise ValidationError(f"no scenario file or shipped scenario named {path_or_name!r}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: {exc}") from None


# -- world models -----------------------------------------------------------------

def daylight(minute_of_day: float, params: DaylightParams = DaylightParams()) -> float:
    """Half-sine between sunrise and sunset peaking at ``params.peak``; 0 at night."""
    if params.sunrise >= params.sunset:
        raise ValueError("sunrise must precede sunset")
    if minute_of_day <= params.sunrise or minute_of_day >= params.sunset:
        return 0.0
    phase = (minute_of_day - params.sunrise) / (params.sunset - params.sunrise)
    return min(1.0, max(0.0, params.peak * math.sin(math.pi * phase)))


def temperature(minute_of_day: float, day_offset: float, w: WeatherParams) -> float:
    # coolest near 05:00, warmest near 17:00
    mid = (w.temp_min + w.temp_max) / 2.0
    amp = (w.temp_max - w.temp_min) / 2.0
    return mid + day_offset - amp * math.cos(2 * math.pi * (minute_of_day - 5 * 60) / MINUTES_PER_DAY)


@dataclass
class Session:
    arrive: int  # minute of day
    leave: int
    computer_end: int  # computer in use over [arrive, computer_end)
    light_coin: float
    forget_coin: float
    final: bool = False


@dataclass
class DayPlan:
    sessions: list
    cloud: float
    temp_offset: float
    ac_forget_coin: float


def plan_day(cfg: ScenarioConfig, day_index: int, day: date) -> DayPlan:
    """Draw one day's occupant schedule and decision coins.

    All draws happen unconditionally and from a per-day stream, so the plan
    does not depend on what the automations do.
    """
    rng = random.Random(f"{cfg.seed}:{day_index}:day")
    cloud = rng.uniform(cfg.daylight.cloud_min, 1.0)
    temp_offset = rng.gauss(0.0, cfg.weather.temp_day_jitter)
    ac_coin = rng.random()
    occ = cfg.occupant
    if occ is None or day.weekday() not in occ.present_days:
        return DayPlan([], cloud, temp_offset, ac_coin)

    def draw(mean, jitter, lo=1.0):
        return max(lo, rng.gauss(mean, jitter)) if jitter else max(lo, mean)

    t = int(round(draw(occ.arrival_mean, occ.arrival_jitter)))
    departure = int(round(draw(occ.departure_mean, occ.departure_jitter)))
    sessions: list[Session] = []
    present = True
    blocks = list(occ.blocks)
    coins = [(rng.random(), rng.random()) for _ in range(len(blocks) + 1)]
    comps = [int(round(draw(b.computer_min, b.computer_jitter, 0.0))) for b in blocks]
    final_comp = int(round(draw(occ.final_computer_min, occ.final_computer_jitter, 0.0)))
    durations = [int(round(draw(b.duration_mean, b.duration_jitter, 5.0))) for b in blocks]
    for i, b in enumerate(blocks):
        end = t + durations[i]
        if end >= departure - 5:
            break
        if b.present:
            sessions.append(Session(t, end, min(end, t + comps[i]), *coins[i]))
        t = end
        present = not b.present
    if not present or not sessions or sessions[-1].leave != t:
        # the day ends with a present stretch running until departure
        start = t
        sessions.append(Session(start, max(departure, start + 5), 0, *coins[len(blocks)]))
        sessions[-1].computer_end = min(sessions[-1].leave, start + final_comp)
    sessions[-1].final = True
    if sessions[-1].leave < departure:
        sessions[-1].leave = departure
    return DayPlan(sessions, cloud, temp_offset, ac_coin)


# -- metrics ----------------------------------------------------------------------

@dataclass
class DayMetrics:
    day: date
    week: int  # 1-based
    occupancy_min: int = 0
    usage_min: dict = field(default_factory=dict)  # appliance -> minutes in use
    energy_wmin: dict = field(default_factory=dict)  # appliance -> watt-minutes

    @property
    def weekday(self) -> bool:
        return self.day.weekday() < 5

    def usage_hours(self, appliance: str) -> float:
        return self.usage_min.get(appliance, 0) / 60.0

    def energy_wh(self, appliance: str) -> float:
        return self.energy_wmin.get(appliance, 0.0) / 60.0


@dataclass
class Metrics:
    appliances: tuple = ()
    days: list = field(default_factory=list)
    hourly_lights_min: list = field(default_factory=list)  # (day, hour, minutes)
    hourly_luminosity: list = field(default_factory=list)  # (day, hour, mean)
    hourly_monitor_w: list = field(default_factory=list)  # (day, hour, mean W)
    presence: list = field(default_factory=list)  # (day, start minute, end minute)

    def select(self, weeks: Optional[Sequence[int]] = None, weekdays_only: bool = True) -> list:
        return [d for d in self.days
                if (weeks is None or d.week in weeks) and (d.weekday or not weekdays_only)]

    def mean_daily_usage(self, appliance: str, weeks=None, weekdays_only: bool = True) -> float:
        days = self.select(weeks, weekdays_only)
        return sum(d.usage_hours(appliance) for d in days) / len(days) if days else 0.0

    def mean_daily_energy(self, appliance: str, weeks=None, weekdays_only: bool = True) -> float:
        days = self.select(weeks, weekdays_only)
        return sum(d.energy_wh(appliance) for d in days) / len(days) if days else 0.0

    def weekly_energy_wh(self, appliance: str, week: int) -> float:
        return sum(d.energy_wmin.get(appliance, 0.0) for d in self.days if d.week == week) / 60.0

    def total_energy_wh(self) -> float:
        return sum(sum(d.energy_wmin.values()) for d in self.days) / 60.0

    def to_csv(self) -> str:
        lines = ["date,week,appliance,usage_hours,energy_wh,occupancy_min"]
        for d in self.days:
            for a in self.appliances:
                lines.append(f"{d.day.isoformat()},{d.week},{a},{d.usage_hours(a)!r},"
                             f"{d.energy_wh(a)!r},{d.occupancy_min}")
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        weeks = sorted({d.week for d in self.days})
        out = [f"days={len(self.days)}", f"weeks={len(weeks)}",
               f"total_energy_wh={self.total_energy_wh()!r}"]
        for w in weeks:
            for a in self.appliances:
                out.append(f"week{w}.{a}.mean_weekday_usage_h={self.mean_daily_usage(a, [w])!r}")
                out.append(f"week{w}.{a}.energy_wh={self.weekly_energy_wh(a, w)!r}")
        return "\n".join(out) + "\n"

    def hourly_csv(self) -> str:
        lines = ["date,hour,lights_min,luminosity,monitor_w"]
        for (d, h, n), (_, _, lum), (_, _, mon) in zip(self.hourly_lights_min, self.hourly_luminosity,
                                                      self.hourly_monitor_w):
            lines.append(f"{d.isoformat()},{h},{n},{lum!r},{mon!r}")
        return "\n".join(lines) + "\n"

    def presence_csv(self) -> str:
        lines = ["date,arrive,leave"]
        for d, a, b in self.presence:
            lines.append(f"{d.isoformat()},{a // 60:02d}:{a % 60:02d},{b // 60:02d}:{b % 60:02d}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "Metrics":
        by_day: dict = {}
        apps: list = []
        for line in text.splitlines()[1:]:
            if not line.strip():
                continue
            day_s, week, app, hours, energy, occ = line.split(",")
            d = by_day.get(day_s)
            if d is None:
                d = by_day[day_s] = DayMetrics(date.fromisoformat(day_s), int(week), int(occ))
            d.usage_min[app] = float(hours) * 60.0
            d.energy_wmin[app] = float(energy) * 60.0
            if app not in apps:
                apps.append(app)
        return cls(tuple(apps), list(by_day.values()))


@dataclass
class Comparison:
    appliance: str
    mean_a: float
    mean_b: float
    ratio: Optional[float]  # None when group A has zero usage
    pct_change: Optional[float]
    energy_a: float
    energy_b: float
    energy_pct_change: Optional[float]


def compare(metrics: Metrics, weeks_a: Sequence[int], weeks_b: Sequence[int],
            appliances: Optional[Sequence[str]] = None, weekdays_only: bool = True) -> list[Comparison]:
    """Mean daily usage of group B relative to group A, per appliance."""
    if not weeks_a or not weeks_b:
        raise ValidationError("both week groups must be non-empty")
    out = []
    for a in appliances or metrics.appliances:
        ma = metrics.mean_daily_usage(a, weeks_a, weekdays_only)
        mb = metrics.mean_daily_usage(a, weeks_b, weekdays_only)
        ea = metrics.mean_daily_energy(a, weeks_a, weekdays_only)
        eb = metrics.mean_daily_energy(a, weeks_b, weekdays_only)
        ratio = mb / ma if ma else None
        out.append(Comparison(a, ma, mb, ratio, (ratio - 1.0) * 100.0 if ratio is not None else None,
                              ea, eb, (eb / ea - 1.0) * 100.0 if ea else None))
    return out


def format_comparison(rows: Sequence[Comparison]) -> str:
    lines = ["appliance,mean_a_h,mean_b_h,ratio,pct_change,energy_a_wh,energy_b_wh,energy_pct_change"]
    for c in rows:
        fmt = lambda v: "undefined" if v is None else repr(v)
        lines.append(f"{c.appliance},{c.mean_a!r},{c.mean_b!r},{fmt(c.ratio)},{fmt(c.pct_change)},"
                     f"{c.energy_a!r},{c.energy_b!r},{fmt(c.energy_pct_change)}")
    return "\n".join(lines) + "\n"


# -- the run ----------------------------------------------------------------------

@dataclass
class SimResult:
    metrics: Metrics
    samples: list
    context: list
    audit: list
    recommendations: list
    bus_trace: list

    def consumption_log(self) -> str:
        return format_consumption_log(self.samples, SIM_FORMAT)

    def context_log(self) -> str:
        return format_context_log(self.context)

    def trace_bytes(self) -> bytes:
        return (self.consumption_log() + self.context_log() + "\n".join(self.audit) + "\n").encode()


class OfficeWorld:
    MOTION = "motion"
    SENSOR = "multisensor"
    ROOM = "office"

    def __init__(self, cfg: ScenarioConfig, trace_bus: bool = False):
        cfg.validate()
        self.cfg = cfg
        self.start = datetime(cfg.start.year, cfg.start.month, cfg.start.day, tzinfo=timezone.utc)
        self.clock = SimClock(self.start)
        self.bus = Bus(trace=trace_bus, clock=lambda: self.clock.now)
        self.bus.start()
        self.registry = DeviceRegistry(self.bus)
        for dev, state in cfg.relays:
            kind = "switch" if dev == "lights" else "power_meter"
            self.registry.register(dev, kind, self.ROOM, power_state=state)
        self.registry.register(self.MOTION, "motion_sensor", self.ROOM)
        self.registry.register(self.SENSOR, "multi_sensor", self.ROOM)
        p = cfg.policy
        self.engine = AutomationEngine(
            self.bus, self.registry, self.clock,
            UserResponsePolicy(p.get("accept_probability", 1.0), p.get("latency_min", 2),
                               p.get("latency_jitter", 0), p.get("seed", cfg.seed)),
            expiry_min=cfg.expiry_min,
        )
        for rec in cfg.rules:
            self.engine.add_rule(rule_from_record(rec))
        self.rule_weeks = dict(cfg.rule_weeks)

    def _user(self, device: str, cmd: str) -> None:
        if self.registry.get(device).power_state != cmd:
            self.engine.command(device, cmd, CAUSE_USER)

    def run(self) -> SimResult:
        cfg = self.cfg
        apps = cfg.appliances
        metrics = Metrics(tuple(a.appliance_id for a in apps))
        samples: list[PowerSample] = []
        context: list[ContextSample] = []
        last_use: dict[str, Optional[int]] = {a.appliance_id: None for a in apps}
        last_power: dict[str, float] = {}
        occ = cfg.occupant
        n_days = cfg.weeks * 7
        abs_min = 0
        for day_index in range(n_days):
            day = cfg.start + timedelta(days=day_index)
            week = day_index // 7 + 1
            if day_index % 7 == 0:
                for rule_id, rule in self.engine.rules.items():
                    if rule_id in self.rule_weeks:
                        self.engine.set_enabled(rule_id, week in self.rule_weeks[rule_id])
            plan = plan_day(cfg, day_index, day)
            dm = DayMetrics(day, week)
            metrics.days.append(dm)
            for s in plan.sessions:
                metrics.presence.append((day, s.arrive, s.leave))
            arrivals = {s.arrive: s for s in plan.sessions}
            departures = {s.leave: s for s in plan.sessions}
            present_now = None
            session = None
            hour_lights = [0] * 24
            hour_lum = [0.0] * 24
            hour_mon = [0.0] * 24
            scale = DaylightParams(cfg.daylight.sunrise, cfg.daylight.sunset,
                                   cfg.daylight.peak * plan.cloud, cfg.daylight.cloud_min)
            for m in range(MINUTES_PER_DAY):
                now = self.start + timedelta(minutes=abs_min)
                self.clock.advance_to(now)
                lum = daylight(m, scale)
                temp = temperature(m, plan.temp_offset, cfg.weather)

                # occupant
                if m in departures and session is departures[m]:
                    s = session
                    forget = occ.forget_lights_final_prob if s.final else occ.forget_lights_prob
                    if s.forget_coin >= forget:
                        self._user("lights", "off")
                    if s.final and plan.ac_forget_coin >= occ.forget_ac_prob:
                        self._user("ac", "off")
                    session = None
                if m in arrivals:
                    session = arrivals[m]
                present = session is not None
                if present != present_now:
                    # the sensor sees the occupant before any switch is touched
                    self.registry.update_device(self.MOTION, telemetry={"motion": "on" if present else "off"},
                                                timestamp=now)
                    present_now = present
                if m in arrivals:
                    if self.registry.get("lights").power_state == "off" and (
                            lum < occ.dim_threshold or session.light_coin < occ.light_on_prob):
                        self._user("lights", "on")
                    if session is plan.sessions[0] and temp >= occ.hot_threshold:
                        self._user("ac", "on")
                at_computer = present and m < session.computer_end
                if at_computer:
                    for a in apps:
                        if a.uses == "computer":
                            self._user(a.relay, "on")
                self.registry.update_device(
                    self.SENSOR, telemetry={"luminosity": lum, "temperature": round(temp, 2),
                                            "humidity": cfg.weather.humidity},
                    timestamp=now)
                self.bus.publish(Message(CLOCK_TOPIC, clock_payload(now).encode(), publisher="clock"))

                # appliances
                relay_power: dict[str, float] = {}
                subs = [0.0, 0.0, 0.0]
                for a in apps:
                    relay_on = self.registry.get(a.relay).power_state == "on"
                    if a.uses == "computer":
                        if at_computer:
                            last_use[a.appliance_id] = abs_min
                        lu = last_use[a.appliance_id]
                        active = relay_on and lu is not None and abs_min - lu < (a.auto_standby_after or 0) + 1
                    else:
                        active = relay_on
                    watts = a.nominal_power if active else (a.standby_power if relay_on else 0.0)
                    if active:
                        dm.usage_min[a.appliance_id] = dm.usage_min.get(a.appliance_id, 0) + 1
                    dm.energy_wmin[a.appliance_id] = dm.energy_wmin.get(a.appliance_id, 0.0) + watts
                    relay_power[a.relay] = relay_power.get(a.relay, 0.0) + watts
                    subs[a.line] += watts
                    if a.appliance_id == "lights" and active:
                        hour_lights[m // 60] += 1
                    if a.uses == "computer":
                        hour_mon[m // 60] += watts
                for relay, watts in relay_power.items():
                    if last_power.get(relay) != watts:
                        self.registry.update_device(relay, telemetry={"power": watts}, timestamp=now)
                        last_power[relay] = watts
                hour_lum[m // 60] += lum
                if present:
                    dm.occupancy_min += 1
                total = sum(subs)
                samples.append(PowerSample(now, total / 1000.0, 0.0, VOLTAGE,
                                           tuple(w / 60.0 for w in subs)))
                context.append(ContextSample(now, round(temp, 2), cfg.weather.humidity, lum, present))
                abs_min += 1
            for h in range(24):
                metrics.hourly_lights_min.append((day, h, hour_lights[h]))
                metrics.hourly_luminosity.append((day, h, hour_lum[h] / 60.0))
                metrics.hourly_monitor_w.append((day, h, hour_mon[h] / 60.0))
        self.clock.advance_to(self.start + timedelta(minutes=abs_min))
        return SimResult(metrics, samples, context, self.engine.audit_lines(),
                         list(self.engine.recommendations), self.bus.trace_lines())


def run(scenario: ScenarioConfig, trace_bus: bool = False) -> SimResult:
    return OfficeWorld(scenario, trace_bus).run()


LINE_IDS = ("office_lights", "office_monitors", "office_ac")


def office_signatures(cfg: ScenarioConfig, tolerance_frac: float = 0.2):
    """One signature per metered line: the step seen when its whole relay group switches."""
    from .eventdetect import ApplianceSignature

    groups: dict[int, list[ApplianceModel]] = {}
    for a in cfg.appliances:
        groups.setdefault(a.line, []).append(a)
    sigs = []
    for line, apps in sorted(groups.items()):
        step = sum(a.nominal_power - a.standby_power for a in apps)
        name = apps[0].relay if len(apps) > 1 else apps[0].appliance_id
        sigs.append(ApplianceSignature(name, step, max(5.0, tolerance_frac * step), LINE_IDS[line]))
    return sigs
