"""In-process publish/subscribe bus with MQTT-style QoS 0 and QoS 2 semantics.

Nothing goes over a socket. Each delivery hop consults a :class:`FaultPlan`
that decides which transmitted copies survive, so loss and duplication can
be injected deterministically. QoS 2 keeps a persistent exchange record per
(publisher, message id, subscriber); a copy arriving after the first never
reaches the handler again.
"""

from __future__ import annotations

import itertools
import json
import logging
import random
import threading
from collections import deque
from dataclasses import dataclass, field, replace
from datetime import datetime
from typing import Callable, Optional

from .errors import FilterError, LifecycleError, RegistryError

log = logging.getLogger(__name__)

QOS_AT_MOST_ONCE = 0
QOS_EXACTLY_ONCE = 2
CHANNELS = ("state", "power", "motion", "temperature", "humidity", "luminosity")

# exchange record states on the receiving side
RECEIVED = "received"  # PUBLISH seen, handler invoked, PUBREC sent
RELEASED = "released"  # PUBREL seen
COMPLETE = "complete"  # PUBCOMP sent


@dataclass(frozen=True)
class Message:
    topic: str
    payload: bytes
    qos: int = QOS_AT_MOST_ONCE
    message_id: Optional[int] = None
    publisher: str = ""
    retain: bool = False
    timestamp: Optional[datetime] = None

    def __post_init__(self):
        if not self.topic:
            raise ValueError("topic must be non-empty")
        if self.qos not in (0, 2):
            raise ValueError(f"unsupported QoS {self.qos}")

    @property
    def text(self) -> str:
        return self.payload.decode("utf-8")


def validate_filter(flt: str) -> None:
    if not flt:
        raise FilterError("empty topic filter")
    levels = flt.split("/")
    for i, level in enumerate(levels):
        if "#" in level and (level != "#" or i != len(levels) - 1):
            raise FilterError(f"'#' must be a whole, final level: {flt!r}")
        if "+" in level and level != "+":
            raise FilterError(f"'+' must occupy a whole level: {flt!r}")


def topic_matches(flt: str, topic: str) -> bool:
    f_levels = flt.split("/")
    t_levels = topic.split("/")
    for i, f in enumerate(f_levels):
        if f == "#":
            return True
        if i >= len(t_levels):
            return False
        if f != "+" and f != t_levels[i]:
            return False
    return len(f_levels) == len(t_levels)


# -- fault injection ------------------------------------------------------------

class FaultPlan:
    """Decides the fate of each transmitted copy on one delivery hop.

    ``copies`` returns one bool per copy put on the wire (True = arrives).
    The first entry is the original transmission; later entries are
    duplicates or retransmissions.
    """

    def copies(self, message: Message, subscriber_id: str) -> list[bool]:
        return [True]


NO_FAULTS = FaultPlan()


class RandomFaults(FaultPlan):
    def __init__(self, seed: int = 0, drop_prob: float = 0.1, max_duplicates: int = 5):
        self.rng = random.Random(seed)
        self.drop_prob = drop_prob
        self.max_duplicates = max_duplicates

    def copies(self, message, subscriber_id):
        n = 1 + self.rng.randint(0, self.max_duplicates)
        return [self.rng.random() >= self.drop_prob for _ in range(n)]


class ScriptedFaults(FaultPlan):
    """Fixed fates keyed by (message_id, subscriber_id); unlisted hops are clean."""

    def __init__(self, script: dict, default=(True,)):
        self.script = script
        self.default = list(default)

    def copies(self, message, subscriber_id):
        return list(self.script.get((message.message_id, subscriber_id), self.default))


# -- subscriptions and receipts ------------------------------------------------

@dataclass
class Subscription:
    subscriber_id: str
    topic_filter: str
    handler: Callable[[Message], None]
    active: bool = True


@dataclass
class DeliveryReceipt:
    message_id: Optional[int]
    deliveries: int = 0
    dropped: int = 0
    suppressed_duplicates: int = 0
    deferred: bool = False


class ExchangeStore:
    """Persistent QoS 2 exchange records; survives bus stop/start."""

    def __init__(self):
        self.records: dict[tuple, str] = {}
        self.outbound: dict[tuple, Message] = {}  # (publisher, id, subscriber) awaiting PUBREC

    def to_json(self) -> str:
        return json.dumps({
            "records": [[p, m, s, st] for (p, m, s), st in sorted(self.records.items())],
            "outbound": [[p, m, s, msg.topic, msg.payload.hex(), msg.retain]
                         for (p, m, s), msg in sorted(self.outbound.items(), key=lambda kv: kv[0])],
        })

    @classmethod
    def from_json(cls, text: str) -> "ExchangeStore":
        d = json.loads(text)
        store = cls()
        store.records = {(p, m, s): st for p, m, s, st in d["records"]}
        store.outbound = {
            (p, m, s): Message(topic, bytes.fromhex(hx), QOS_EXACTLY_ONCE, m, p, retain)
            for p, m, s, topic, hx, retain in d["outbound"]
        }
        return store


class Bus:
    def __init__(self, store: Optional[ExchangeStore] = None, trace: bool = False,
                 clock: Optional[Callable[[], datetime]] = None):
        self.store = store or ExchangeStore()
        self.running = False
        self.trace_enabled = trace
        self.trace: list[tuple] = []
        self.clock = clock
        self._subs: dict[tuple, Subscription] = {}
        self._match_cache: dict[str, list[Subscription]] = {}
        self._retained: dict[str, Message] = {}
        self._ids: dict[str, itertools.count] = {}
        self._lock = threading.RLock()
        self._delivering = False
        self._deferred: deque = deque()
        self._anon = itertools.count(1)

    # lifecycle
    def start(self, resume: bool = True) -> None:
        self.running = True
        if resume and self.store.outbound:
            pending = sorted(self.store.outbound.items(), key=lambda kv: kv[0])
            for (pub, mid, sub), msg in pending:
                s = next((x for x in self._subs.values() if x.subscriber_id == sub and x.active), None)
                if s is not None:
                    self._qos2_hop(msg, s, [True], DeliveryReceipt(mid))

    def stop(self) -> None:
        self.running = False

    # subscriptions
    def subscribe(self, topic_filter: str, handler: Callable[[Message], None],
                  subscriber_id: Optional[str] = None) -> Subscription:
        validate_filter(topic_filter)
        with self._lock:
            sid = subscriber_id or f"anon-{next(self._anon)}"
            key = (sid, topic_filter)
            if key in self._subs:
                self._subs[key].handler = handler
                return self._subs[key]
            sub = Subscription(sid, topic_filter, handler)
            self._subs[key] = sub
            self._match_cache.clear()
            retained = [m for t, m in sorted(self._retained.items()) if topic_matches(topic_filter, t)]
        for m in retained:
            self._invoke(sub, m)
        return sub

    def unsubscribe(self, sub: Subscription) -> None:
        with self._lock:
            sub.active = False
            self._subs.pop((sub.subscriber_id, sub.topic_filter), None)
            self._match_cache.clear()

    def _matching(self, topic: str) -> list[Subscription]:
        subs = self._match_cache.get(topic)
        if subs is None:
            seen: dict[str, Subscription] = {}
            for s in self._subs.values():
                if s.subscriber_id not in seen and topic_matches(s.topic_filter, topic):
                    seen[s.subscriber_id] = s
            subs = self._match_cache[topic] = list(seen.values())
        return subs

    def retained(self, topic: str) -> Optional[Message]:
        return self._retained.get(topic)

    # publishing
    def next_id(self, publisher: str) -> int:
        return next(self._ids.setdefault(publisher, itertools.count(1)))

    def publish(self, message: Message, faults: FaultPlan = NO_FAULTS) -> DeliveryReceipt:
        if not self.running:
            raise LifecycleError("publish on a stopped bus")
        with self._lock:
            if message.message_id is None:
                message = replace(message, message_id=self.next_id(message.publisher))
            if message.timestamp is None and self.clock is not None:
                message = replace(message, timestamp=self.clock())
            if self._delivering:
                # a handler is publishing; finish the current delivery first
                self._deferred.append((message, faults))
                return DeliveryReceipt(message.message_id, deferred=True)
            self._delivering = True
            try:
                receipt = self._route(message, faults)
                while self._deferred:
                    self._route(*self._deferred.popleft())
            finally:
                self._delivering = False
            return receipt

    def _route(self, message: Message, faults: FaultPlan) -> DeliveryReceipt:
        if self.trace_enabled:
            self.trace.append((message.timestamp, message.topic, message.qos, message.payload))
        if message.retain:
            if message.payload:
                self._retained[message.topic] = message
            else:
                self._retained.pop(message.topic, None)
        receipt = DeliveryReceipt(message.message_id)
        for sub in list(self._matching(message.topic)):
            fates = faults.copies(message, sub.subscriber_id)
            if message.qos == QOS_AT_MOST_ONCE:
                # fire-and-forget: one transmission, never retried
                if fates and fates[0]:
                    self._invoke(sub, message)
                    receipt.deliveries += 1
                else:
                    receipt.dropped += 1
            else:
                self._qos2_hop(message, sub, fates, receipt)
        return receipt

    def _qos2_hop(self, message: Message, sub: Subscription, fates: list, receipt: DeliveryReceipt):
        key = (message.publisher, message.message_id, sub.subscriber_id)
        self.store.outbound[key] = message
        for arrives in fates:
            if not arrives:
                receipt.dropped += 1
                continue
            state = self.store.records.get(key)
            if state is None:
                self.store.records[key] = RECEIVED
                self._invoke(sub, message)
                receipt.deliveries += 1
            else:
                receipt.suppressed_duplicates += 1
            # PUBREC reached the sender: release and complete the exchange
            self.store.outbound.pop(key, None)
            if self.store.records[key] == RECEIVED:
                self.store.records[key] = RELEASED
                self.store.records[key] = COMPLETE

    def _invoke(self, sub: Subscription, message: Message) -> None:
        if not sub.active:
            return
        outer = self._delivering
        self._delivering = True
        try:
            sub.handler(message)
        finally:
            self._delivering = outer
        if not outer:
            while self._deferred:
                m, f = self._deferred.popleft()
                self._delivering = True
                try:
                    self._route(m, f)
                finally:
                    self._delivering = False

    def trace_lines(self) -> list[str]:
        out = []
        for ts, topic, qos, payload in self.trace:
            stamp = ts.strftime("%Y-%m-%dT%H:%M:%SZ") if ts else "-"
            out.append(f"{stamp} {topic} {qos} {payload.decode('utf-8', 'replace')}")
        return out


# -- device registry ------------------------------------------------------------

SWITCH = "switch"
POWER_METER = "power_meter"
MOTION_SENSOR = "motion_sensor"
MULTI_SENSOR = "multi_sensor"
KINDS = (SWITCH, POWER_METER, MOTION_SENSOR, MULTI_SENSOR)

POWER_ON = "on"
POWER_OFF = "off"
NOT_APPLICABLE = "not_applicable"


@dataclass(frozen=True)
class QosPolicy:
    """Switch state travels exactly-once; measurements are fire-and-forget."""

    state: int = QOS_EXACTLY_ONCE
    measurement: int = QOS_AT_MOST_ONCE

    def for_channel(self, channel: str) -> int:
        return self.state if channel == "state" else self.measurement


@dataclass
class DeviceState:
    device_id: str
    kind: str
    room: str
    power_state: str = NOT_APPLICABLE
    live_power: float = 0.0
    last_seen: Optional[datetime] = None
    values: dict = field(default_factory=dict)  # channel -> latest value
    changed_at: dict = field(default_factory=dict)  # channel -> when the value last changed

    def value(self, channel: str):
        if channel == "state":
            return self.power_state
        return self.values.get(channel)


def _payload(value) -> bytes:
    return (repr(float(value)) if isinstance(value, (int, float)) and not isinstance(value, bool)
            else str(value)).encode("utf-8")


class DeviceRegistry:
    def __init__(self, bus: Bus, policy: QosPolicy = QosPolicy(), publisher: str = "registry"):
        self.bus = bus
        self.policy = policy
        self.publisher = publisher
        self.devices: dict[str, DeviceState] = {}

    def register(self, device_id: str, kind: str, room: str,
                 power_state: Optional[str] = None) -> DeviceState:
        if kind not in KINDS:
            raise RegistryError(f"unknown device kind {kind!r}")
        if power_state is None:
            power_state = POWER_OFF if kind in (SWITCH, POWER_METER) else NOT_APPLICABLE
        st = DeviceState(device_id, kind, room, power_state)
        self.devices[device_id] = st
        return st

    def get(self, device_id: str) -> DeviceState:
        try:
            return self.devices[device_id]
        except KeyError:
            raise RegistryError(f"unknown device {device_id!r}") from None

    def topic(self, device_id: str, channel: str) -> str:
        st = self.get(device_id)
        return f"{st.room}/{device_id}/{channel}"

    def update_device(self, device_id: str, command: Optional[str] = None,
                      telemetry: Optional[dict] = None, timestamp: Optional[datetime] = None,
                      faults: FaultPlan = NO_FAULTS) -> DeviceState:
        """Apply a switch command and/or telemetry, then publish the changed channels (retained)."""
        st = self.get(device_id)
        outgoing = []
        if command is not None:
            if st.kind not in (SWITCH, POWER_METER):
                raise RegistryError(f"{device_id} ({st.kind}) cannot be switched")
            if command not in (POWER_ON, POWER_OFF):
                raise RegistryError(f"unknown command {command!r}")
            if st.power_state != command:
                st.changed_at["state"] = timestamp
            st.power_state = command
            outgoing.append(("state", command))
        for channel, value in (telemetry or {}).items():
            if channel not in CHANNELS or channel == "state":
                raise RegistryError(f"unknown telemetry channel {channel!r}")
            if channel == "power":
                if value < 0:
                    raise RegistryError(f"negative power from {device_id}")
                st.live_power = float(value)
            if st.values.get(channel) != value or channel not in st.values:
                st.changed_at[channel] = timestamp
            st.values[channel] = value
            outgoing.append((channel, value))
        st.last_seen = timestamp
        for channel, value in outgoing:
            self.bus.publish(Message(f"{st.room}/{device_id}/{channel}", _payload(value),
                                     self.policy.for_channel(channel), publisher=self.publisher,
                                     retain=True, timestamp=timestamp), faults)
        return st
