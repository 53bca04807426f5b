"""TRIGGER -> CONDITION -> ACTION rules driven by bus messages.

Actions are recommendation-mediated unless a rule is marked ``direct``: the
engine issues a :class:`Recommendation`, a :class:`UserResponsePolicy` stands
in for the person answering it, and the device command is sent only on
acceptance. Every device command is audited with exactly one cause.
"""

from __future__ import annotations

import heapq
import itertools
import json
import logging
import random
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from typing import Any, Callable, Iterable, Optional, Sequence

from .autobus import Bus, DeviceRegistry, Message, topic_matches, validate_filter
from .errors import LifecycleError, RegistryError, RuleConfigError

log = logging.getLogger(__name__)

CLOCK_TOPIC = "system/clock/minute"

CAUSE_USER = "user"
CAUSE_RECOMMENDATION = "recommendation"
CAUSE_AUTOMATION = "automation"
CAUSES = (CAUSE_USER, CAUSE_RECOMMENDATION, CAUSE_AUTOMATION)

PENDING = "pending"
ACCEPTED = "accepted"
REJECTED = "rejected"
EXPIRED = "expired"

NO_OP = "no_op"
ARMED = "armed"
FIRED = "fired"

DEFAULT_EXPIRY_MIN = 30
DEFAULT_LEAD_MIN = 5

OPS = ("==", "!=", ">=", "<=", ">", "<", "any", "startswith")


def clock_payload(ts: datetime) -> str:
    return f"{ts:%H:%M} {'weekend' if ts.weekday() >= 5 else 'weekday'}"


def _compare(actual: Any, op: str, expected: Any) -> bool:
    if op == "any":
        return True
    if actual is None:
        return False
    if op == "startswith":
        return str(actual).startswith(str(expected))
    try:
        a, b = float(actual), float(expected)
    except (TypeError, ValueError):
        a, b = str(actual), str(expected)
    if op == "==":
        return a == b
    if op == "!=":
        return a != b
    if isinstance(a, str) != isinstance(b, str):
        return False
    return {">=": a >= b, "<=": a <= b, ">": a > b, "<": a < b}[op]


@dataclass(frozen=True)
class Trigger:
    topic: str
    op: str = "any"
    value: Any = None

    def matches(self, message: Message) -> bool:
        return topic_matches(self.topic, message.topic) and _compare(message.text, self.op, self.value)


@dataclass(frozen=True)
class Condition:
    device: str
    channel: str
    op: str
    value: Any
    duration_min: float = 0.0

    def holds(self, registry: DeviceRegistry) -> bool:
        return _compare(self.state(registry).value(self.channel), self.op, self.value)

    def state(self, registry: DeviceRegistry):
        try:
            return registry.get(self.device)
        except RegistryError:
            raise RuleConfigError(f"condition references unknown device {self.device!r}") from None

    def held_for(self, registry: DeviceRegistry, now: datetime) -> float:
        """Minutes the current value has been in place (inf if it never changed)."""
        since = self.state(registry).changed_at.get(self.channel)
        if since is None:
            return float("inf")
        return (now - since).total_seconds() / 60.0

    def to_text(self) -> str:
        text = f"{self.device}.{self.channel} {self.op} {self.value}"
        return text + (f" for {self.duration_min:g}m" if self.duration_min else "")

    @classmethod
    def from_text(cls, text: str) -> "Condition":
        parts = text.split()
        duration = 0.0
        if len(parts) == 5 and parts[3] == "for":
            duration = float(parts[4].rstrip("m"))
            parts = parts[:3]
        if len(parts) != 3 or parts[1] not in OPS or "." not in parts[0]:
            raise RuleConfigError(f"bad condition {text!r}")
        device, channel = parts[0].split(".", 1)
        return cls(device, channel, parts[1], parts[2], duration)


@dataclass(frozen=True)
class Action:
    kind: str  # "command" | "notify"
    target: str  # device id
    command: str  # "on" | "off"


@dataclass
class AutomationRule:
    rule_id: str
    trigger: Trigger
    conditions: tuple = ()
    action: Optional[Action] = None
    direct: bool = False
    enabled: bool = True
    cooldown_min: float = 0.0

    def __post_init__(self):
        if not self.conditions and self.action is None:
            raise RuleConfigError(f"rule {self.rule_id}: needs conditions or an action")
        if any(c.duration_min < 0 for c in self.conditions):
            raise RuleConfigError(f"rule {self.rule_id}: negative duration")
        if self.action is not None and self.action.kind == "notify":
            self.direct = False
        validate_filter(self.trigger.topic)

    @property
    def sustained(self) -> list:
        return [c for c in self.conditions if c.duration_min > 0]


@dataclass(frozen=True)
class Outcome:
    kind: str
    fire_at: Optional[datetime] = None


def evaluate(rule: AutomationRule, message: Optional[Message], registry: DeviceRegistry,
             now: datetime) -> Outcome:
    """Decide what ``message`` (``None`` for a timer expiry) does to ``rule``."""
    if not rule.enabled:
        return Outcome(NO_OP)
    if message is not None and not rule.trigger.matches(message):
        return Outcome(NO_OP)
    wait = 0.0
    for c in rule.conditions:
        if not c.holds(registry):
            return Outcome(NO_OP)
        if c.duration_min > 0:
            wait = max(wait, c.duration_min - c.held_for(registry, now))
    if wait > 1e-9:
        return Outcome(ARMED, now + timedelta(minutes=wait))
    return Outcome(FIRED, now)


# -- scheduling -----------------------------------------------------------------

class SimClock:
    """Single logical clock with cancellable callbacks."""

    def __init__(self, now: datetime):
        self.now = now
        self._queue: list = []
        self._seq = itertools.count()
        self._cancelled: set = set()

    def call_at(self, when: datetime, fn: Callable[[], None]) -> int:
        handle = next(self._seq)
        heapq.heappush(self._queue, (when, handle, fn))
        return handle

    def cancel(self, handle: int) -> None:
        self._cancelled.add(handle)

    def advance_to(self, when: datetime) -> None:
        while self._queue and self._queue[0][0] <= when:
            t, handle, fn = heapq.heappop(self._queue)
            if handle in self._cancelled:
                self._cancelled.discard(handle)
                continue
            self.now = max(self.now, t)
            fn()
        self.now = max(self.now, when)


# -- recommendations ------------------------------------------------------------

@dataclass
class Recommendation:
    rec_id: str
    action: Action
    rationale: str
    issued_at: datetime
    expires_at: datetime
    status: str = PENDING
    resolved_at: Optional[datetime] = None

    def resolve(self, status: str, at: datetime) -> None:
        if self.status != PENDING or status not in (ACCEPTED, REJECTED, EXPIRED):
            raise LifecycleError(f"{self.rec_id}: cannot go {self.status} -> {status}")
        self.status = status
        self.resolved_at = at


@dataclass
class UserResponsePolicy:
    """Seeded stand-in for the person answering recommendations."""

    accept_probability: float = 1.0
    latency_min: int = 2
    latency_jitter: int = 0
    seed: int = 0
    _rng: random.Random = field(init=False, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.accept_probability <= 1.0:
            raise ValueError("accept_probability must be in [0, 1]")
        self._rng = random.Random(self.seed)

    def decide(self) -> tuple[bool, int]:
        accept = self._rng.random() < self.accept_probability
        jitter = self._rng.randint(-self.latency_jitter, self.latency_jitter) if self.latency_jitter else 0
        return accept, max(0, self.latency_min + jitter)


def dispatch_recommendation(rec: Recommendation, policy: UserResponsePolicy, clock: SimClock,
                            send: Callable[[Recommendation], None]) -> Recommendation:
    """Draw the user's answer and schedule its consequence on ``clock``.

    The command is sent (via ``send``) at the moment of acceptance; a reply
    that would land at or after expiry resolves as expired with no dispatch.
    """
    if rec.status != PENDING:
        raise LifecycleError(f"{rec.rec_id} is {rec.status}, not pending")
    accept, latency = policy.decide()
    reply_at = rec.issued_at + timedelta(minutes=latency)
    if reply_at >= rec.expires_at:
        clock.call_at(rec.expires_at, lambda: rec.resolve(EXPIRED, rec.expires_at))
    elif accept:
        def do_accept():
            send(rec)
            rec.resolve(ACCEPTED, reply_at)
        clock.call_at(reply_at, do_accept)
    else:
        clock.call_at(reply_at, lambda: rec.resolve(REJECTED, reply_at))
    return rec


# -- audit ----------------------------------------------------------------------

@dataclass(frozen=True)
class AuditRecord:
    timestamp: datetime
    cause: str
    rule_id: str
    device: str
    command: str

    def to_line(self) -> str:
        return f"{self.timestamp:%Y-%m-%dT%H:%M:%SZ} {self.cause} {self.rule_id} {self.device} {self.command}"


# -- engine ---------------------------------------------------------------------

class AutomationEngine:
    def __init__(self, bus: Bus, registry: DeviceRegistry, clock: SimClock,
                 policy: Optional[UserResponsePolicy] = None,
                 expiry_min: float = DEFAULT_EXPIRY_MIN,
                 notify: Optional[Callable[[Recommendation], None]] = None):
        self.bus = bus
        self.registry = registry
        self.clock = clock
        self.policy = policy or UserResponsePolicy()
        self.expiry_min = expiry_min
        self.notify = notify
        self.rules: dict[str, AutomationRule] = {}
        self.timers: dict[str, tuple[int, datetime]] = {}
        self.recommendations: list[Recommendation] = []
        self.audit: list[AuditRecord] = []
        self.config_errors: list[tuple[str, str]] = []
        self._pending: dict[str, Recommendation] = {}
        self._quiet_until: dict[str, datetime] = {}
        self._rec_ids = itertools.count(1)
        self._sub = bus.subscribe("#", self._on_message, subscriber_id="automation-engine")

    def add_rule(self, rule: AutomationRule) -> None:
        self.rules[rule.rule_id] = rule

    def set_enabled(self, rule_id: str, enabled: bool) -> None:
        rule = self.rules[rule_id]
        rule.enabled = enabled
        if not enabled:
            self._cancel(rule_id)

    def command(self, device: str, cmd: str, cause: str, rule_id: str = "-") -> None:
        if cause not in CAUSES:
            raise ValueError(f"unknown cause {cause!r}")
        self.audit.append(AuditRecord(self.clock.now, cause, rule_id, device, cmd))
        self.registry.update_device(device, command=cmd, timestamp=self.clock.now)

    # message handling
    def _on_message(self, message: Message) -> None:
        now = self.clock.now
        for rule_id in list(self.timers):
            rule = self.rules[rule_id]
            if not self._conditions_hold(rule):
                self._cancel(rule_id)
        for rule in list(self.rules.values()):
            if rule.enabled and rule.trigger.matches(message):
                self._apply(rule, message, now)

    def _conditions_hold(self, rule: AutomationRule) -> bool:
        try:
            return all(c.holds(self.registry) for c in rule.conditions)
        except RuleConfigError:
            return False

    def _apply(self, rule: AutomationRule, message: Optional[Message], now: datetime) -> Outcome:
        try:
            out = evaluate(rule, message, self.registry, now)
        except RuleConfigError as exc:
            rule.enabled = False
            self._cancel(rule.rule_id)
            self.config_errors.append((rule.rule_id, str(exc)))
            log.warning("rule %s disabled: %s", rule.rule_id, exc)
            return Outcome(NO_OP)
        if out.kind == ARMED:
            current = self.timers.get(rule.rule_id)
            if current is None or current[1] != out.fire_at:
                self._cancel(rule.rule_id)
                handle = self.clock.call_at(out.fire_at, lambda r=rule: self._expire(r))
                self.timers[rule.rule_id] = (handle, out.fire_at)
        elif out.kind == FIRED:
            self._cancel(rule.rule_id)
            self._fire(rule, now)
        return out

    def _expire(self, rule: AutomationRule) -> None:
        self.timers.pop(rule.rule_id, None)
        if rule.enabled:
            self._apply(rule, None, self.clock.now)

    def _cancel(self, rule_id: str) -> None:
        entry = self.timers.pop(rule_id, None)
        if entry is not None:
            self.clock.cancel(entry[0])

    def _fire(self, rule: AutomationRule, now: datetime) -> None:
        if rule.action is None:
            return
        if rule.direct:
            self.command(rule.action.target, rule.action.command, CAUSE_AUTOMATION, rule.rule_id)
            return
        pending = self._pending.get(rule.rule_id)
        if pending is not None and pending.status == PENDING:
            return
        if now < self._quiet_until.get(rule.rule_id, now):
            return
        rec = Recommendation(f"rec-{next(self._rec_ids)}", rule.action, rule.rule_id,
                             now, now + timedelta(minutes=self.expiry_min))
        self.recommendations.append(rec)
        self._pending[rule.rule_id] = rec
        if rule.cooldown_min:
            self._quiet_until[rule.rule_id] = now + timedelta(minutes=rule.cooldown_min)
        if self.notify is not None:
            self.notify(rec)
        dispatch_recommendation(rec, self.policy, self.clock, self._send)

    def _send(self, rec: Recommendation) -> None:
        self.command(rec.action.target, rec.action.command, CAUSE_RECOMMENDATION, rec.rationale)

    def audit_lines(self) -> list[str]:
        return [a.to_line() for a in self.audit]


# -- rule files -----------------------------------------------------------------

def rule_to_record(rule: AutomationRule) -> dict:
    return {
        "id": rule.rule_id,
        "trigger.topic": rule.trigger.topic,
        "trigger.predicate": f"{rule.trigger.op} {rule.trigger.value}" if rule.trigger.op != "any" else "any",
        "conditions": [c.to_text() for c in rule.conditions],
        "duration_min": max((c.duration_min for c in rule.conditions), default=0),
        "action.kind": rule.action.kind if rule.action else None,
        "action.target": f"{rule.action.target}:{rule.action.command}" if rule.action else None,
        "direct": rule.direct,
        "enabled": rule.enabled,
        "cooldown_min": rule.cooldown_min,
    }


def rule_from_record(rec: dict) -> AutomationRule:
    try:
        pred = rec.get("trigger.predicate", "any") or "any"
        op, _, value = pred.partition(" ")
        if op not in OPS:
            raise RuleConfigError(f"bad trigger predicate {pred!r}")
        conditions = [Condition.from_text(c) for c in rec.get("conditions", [])]
        dur = float(rec.get("duration_min") or 0)
        if dur and conditions and not any(c.duration_min for c in conditions):
            c0 = conditions[0]
            conditions[0] = Condition(c0.device, c0.channel, c0.op, c0.value, dur)
        action = None
        if rec.get("action.kind"):
            target, _, cmd = rec["action.target"].partition(":")
            action = Action(rec["action.kind"], target, cmd)
        return AutomationRule(rec["id"], Trigger(rec["trigger.topic"], op, value or None),
                              tuple(conditions), action, bool(rec.get("direct", False)),
                              bool(rec.get("enabled", True)), float(rec.get("cooldown_min", 0)))
    except KeyError as exc:
        raise RuleConfigError(f"rule record missing field {exc}") from None


def write_rules_file(rules: Iterable[AutomationRule]) -> str:
    return "".join(json.dumps(rule_to_record(r), sort_keys=True) + "\n" for r in rules)


def read_rules_file(text: str) -> list[AutomationRule]:
    return [rule_from_record(json.loads(line)) for line in text.splitlines() if line.strip()]


# -- habit compilation ----------------------------------------------------------

@dataclass(frozen=True)
class HabitTemplates:
    """Where compiled rules look for context and which device a habit targets."""

    clock_topic: str = CLOCK_TOPIC
    occupancy: tuple = ("motion", "motion")  # (device, channel); payload on/off
    luminosity: tuple = ("multisensor", "luminosity")
    temperature: tuple = ("multisensor", "temperature")
    devices: tuple = ()  # (habit device id, registry device id) pairs
    lead_min: int = DEFAULT_LEAD_MIN


@dataclass
class CompileReport:
    skipped: list = field(default_factory=list)  # (habit, reason)


def compile_habits_to_automations(habits: Sequence, templates: HabitTemplates = HabitTemplates(),
                                  buckets=None) -> tuple[list[AutomationRule], CompileReport]:
    """One recommendation rule per habit, firing ``lead_min`` before the habitual hour."""
    from .micromoment import DEFAULT_BUCKETS

    buckets = buckets or DEFAULT_BUCKETS
    devmap = dict(templates.devices)
    report = CompileReport()
    rules = []
    for n, h in enumerate(habits):
        ctx = h.context
        if "hour" not in ctx:
            report.skipped.append((h, "no temporal antecedent"))
            continue
        if h.device_id is None:
            report.skipped.append((h, "no device"))
            continue
        at = datetime(2000, 1, 3, int(ctx["hour"])) - timedelta(minutes=templates.lead_min)
        hhmm = f"{at:%H:%M}"
        trigger = (Trigger(templates.clock_topic, "==", f"{hhmm} {ctx['day']}") if "day" in ctx
                   else Trigger(templates.clock_topic, "startswith", hhmm))
        conds = []
        if "occ" in ctx:
            dev, ch = templates.occupancy
            conds.append(Condition(dev, ch, "==", "off" if ctx["occ"] == "absent" else "on"))
        for key, kind, (dev, ch) in (("lum", "luminosity", templates.luminosity),
                                     ("temp", "temperature", templates.temperature)):
            if key in ctx:
                for b in getattr(buckets, kind):
                    if b.name == ctx[key]:
                        if b.low != float("-inf"):
                            conds.append(Condition(dev, ch, ">=", b.low))
                        if b.high != float("inf") and not b.closed_high:
                            conds.append(Condition(dev, ch, "<", b.high))
        target = devmap.get(h.device_id, h.device_id)
        rules.append(AutomationRule(
            f"habit-{n}-{h.device_id}-{h.action}-h{ctx['hour']}",
            trigger, tuple(conds), Action("notify", target, h.action), direct=False,
        ))
    return rules, report
