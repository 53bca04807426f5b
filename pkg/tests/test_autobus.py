from __future__ import annotations

from collections import Counter
from datetime import datetime, timezone

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from habitwatt.autobus import (
    Bus,
    DeviceRegistry,
    ExchangeStore,
    Message,
    QosPolicy,
    RandomFaults,
    ScriptedFaults,
    topic_matches,
    validate_filter,
)
from habitwatt.errors import FilterError, LifecycleError, RegistryError


def started(**kw) -> Bus:
    bus = Bus(**kw)
    bus.start()
    return bus


def collector(bus, flt="#", sid="s1"):
    got = []
    bus.subscribe(flt, got.append, sid)
    return got


def test_qos2_duplicates_delivered_once():
    bus = started()
    got = collector(bus)
    faults = ScriptedFaults({(7, "s1"): (True, True, True)})
    r = bus.publish(Message("office/lights/state", b"on", 2, 7, "p"), faults)
    assert len(got) == 1 and r.deliveries == 1 and r.suppressed_duplicates == 2


def test_qos2_first_copy_lost_retransmission_arrives():
    bus = started()
    got = collector(bus)
    bus.publish(Message("a/b/state", b"on", 2, 1, "p"), ScriptedFaults({(1, "s1"): (False, True, True)}))
    assert len(got) == 1


def test_qos0_drop_still_succeeds():
    bus = started()
    got = collector(bus)
    r = bus.publish(Message("a/b/power", b"38", 0, 1, "p"), ScriptedFaults({(1, "s1"): (False,)}))
    assert got == [] and r.dropped == 1


def test_qos0_ignores_duplicate_copies():
    bus = started()
    got = collector(bus)
    bus.publish(Message("a/b/power", b"38", 0, 1, "p"), ScriptedFaults({(1, "s1"): (True, True, True)}))
    assert len(got) == 1


def test_no_audience():
    bus = started()
    assert bus.publish(Message("x/y/z", b"1")).deliveries == 0


def test_stopped_bus_rejects_publish():
    bus = Bus()
    with pytest.raises(LifecycleError):
        bus.publish(Message("x", b""))


def test_wildcards():
    assert topic_matches("office/+/state", "office/lights/state")
    assert not topic_matches("office/+/state", "office/lights/power/state")
    assert topic_matches("office/#", "office/lights/power/state")
    assert topic_matches("office/lights/state", "office/lights/state")
    assert not topic_matches("office/lights/state", "office/lights/power")
    for bad in ("office/#/x", "office/li+", "a/#b", ""):
        with pytest.raises(FilterError):
            validate_filter(bad)


def test_resubscribe_replaces_handler():
    bus = started()
    first, second = [], []
    bus.subscribe("a/#", first.append, "s")
    bus.subscribe("a/#", second.append, "s")
    bus.publish(Message("a/b", b"1"))
    assert first == [] and len(second) == 1


def test_unsubscribe_stops_delivery():
    bus = started()
    got = []
    sub = bus.subscribe("a/#", got.append, "s")
    bus.unsubscribe(sub)
    bus.publish(Message("a/b", b"1"))
    assert got == []


def test_retained_state_for_new_subscriber():
    bus = started()
    bus.publish(Message("office/lights/state", b"off", 2, 1, "p", retain=True))
    bus.publish(Message("office/lights/state", b"on", 2, 2, "p", retain=True))
    got = collector(bus, "office/+/state", "late")
    assert [m.payload for m in got] == [b"on"]


def test_handler_publish_is_deferred():
    bus = started()
    order = []

    def echo(m):
        order.append(m.topic)
        if m.topic == "a/1":
            bus.publish(Message("a/2", b""))
    bus.subscribe("a/#", echo, "s")
    bus.subscribe("a/#", lambda m: order.append("other:" + m.topic), "t")
    bus.publish(Message("a/1", b""))
    assert order == ["a/1", "other:a/1", "a/2", "other:a/2"]


def test_inflight_exchange_resumes_after_restart():
    store = ExchangeStore()
    bus = started(store=store)
    got = collector(bus)
    bus.publish(Message("a/b/state", b"on", 2, 1, "p"), ScriptedFaults({(1, "s1"): (False,)}))
    assert got == [] and store.outbound
    bus.stop()
    restored = ExchangeStore.from_json(store.to_json())
    bus2 = Bus(store=restored)
    got2 = collector(bus2)
    bus2.start()
    assert [m.payload for m in got2] == [b"on"] and not restored.outbound
    # the completed record suppresses any later copy
    bus2.publish(Message("a/b/state", b"on", 2, 1, "p"), ScriptedFaults({(1, "s1"): (True, True)}))
    assert len(got2) == 1


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 200), st.floats(0.0, 0.9))
def test_delivery_guarantees_under_random_faults(seed, n, drop):
    bus = started()
    got = {"s1": [], "s2": []}
    bus.subscribe("dev/#", got["s1"].append, "s1")
    bus.subscribe("dev/+/state", got["s2"].append, "s2")
    faults = RandomFaults(seed, drop, 5)
    fates = {}

    class Recording(RandomFaults):
        def copies(self, message, sid):
            f = faults.copies(message, sid)
            fates[(message.message_id, sid)] = f
            return f
    rec = Recording()
    for i in range(n):
        qos = 2 if i % 2 else 0
        bus.publish(Message("dev/x/state", str(i).encode(), qos, publisher="p"), rec)
    for sid, msgs in got.items():
        counts = Counter(m.message_id for m in msgs)
        ids = [m.message_id for m in msgs]
        assert ids == sorted(ids)  # FIFO per publisher/subscriber pair
        for i in range(1, n + 1):
            f = fates[(i, sid)]
            if i % 2 == 0:  # id i carries loop index i - 1, so even ids are QoS 2
                assert counts[i] == (1 if any(f) else 0)
            else:
                assert counts[i] == (1 if f[0] else 0)


# -- registry ---------------------------------------------------------------------

T = datetime(2020, 3, 2, 9, tzinfo=timezone.utc)


def test_command_publishes_state():
    bus = started(trace=True)
    reg = DeviceRegistry(bus)
    reg.register("lights", "switch", "office", "on")
    got = collector(bus, "office/lights/state")
    got.clear()
    st_ = reg.update_device("lights", command="off", timestamp=T)
    assert st_.power_state == "off" and st_.last_seen == T
    assert [(m.payload, m.qos, m.retain) for m in got] == [(b"off", 2, True)]
    assert bus.trace_lines() == ["2020-03-02T09:00:00Z office/lights/state 2 off"]


def test_meter_telemetry():
    bus = started()
    reg = DeviceRegistry(bus)
    reg.register("monitor_1", "power_meter", "office")
    got = collector(bus, "office/monitor_1/power")
    st_ = reg.update_device("monitor_1", telemetry={"power": 38}, timestamp=T)
    assert st_.live_power == 38 and got[0].qos == 0


def test_unknown_device_no_publish():
    bus = started(trace=True)
    reg = DeviceRegistry(bus)
    with pytest.raises(RegistryError):
        reg.update_device("ghost", telemetry={"power": 1})
    assert bus.trace == []


def test_registry_guards():
    reg = DeviceRegistry(started())
    reg.register("motion", "motion_sensor", "office")
    with pytest.raises(RegistryError):
        reg.update_device("motion", command="on")
    reg.register("m", "power_meter", "office")
    with pytest.raises(RegistryError):
        reg.update_device("m", telemetry={"power": -1})
    with pytest.raises(RegistryError):
        reg.register("x", "toaster", "office")


def test_policy_default():
    p = QosPolicy()
    assert p.for_channel("state") == 2 and p.for_channel("power") == 0 and p.for_channel("luminosity") == 0
