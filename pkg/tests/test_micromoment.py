from __future__ import annotations

from datetime import datetime, timedelta, timezone

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from habitwatt.errors import BucketingError, CoverageError
from habitwatt.eventdetect import EXCESSIVE, OFF, ON, ApplianceEvent, UsagePeriod
from habitwatt.ingest import ContextSample
from habitwatt.micromoment import (
    EXCESSIVE_USE,
    SWITCH_OFF,
    SWITCH_ON,
    USE_WHILE_ABSENT,
    Bucket,
    BucketingConfig,
    ContextSnapshot,
    MicroMoment,
    Transaction,
    build_transactions,
    contextualize,
    read_transactions,
    write_transactions,
)

MON = datetime(2020, 3, 2, tzinfo=timezone.utc)


def context(start, minutes, occ=lambda m: True, lum=0.5, temp=20.0):
    return [ContextSample(start + timedelta(minutes=m), temp, 50.0, lum, occ(m)) for m in range(minutes)]


def test_switch_on_context_lookup():
    at = MON.replace(hour=8)
    e = ApplianceEvent(at, "lights", ON, 80.0, 1.0)
    ctx = context(at - timedelta(minutes=5), 10, lum=0.2)
    (m,) = contextualize([e], ctx)
    assert m.moment_class == SWITCH_ON and m.action == "on"
    assert m.context == ContextSnapshot(8, "weekday", "present", 0.2, 20.0)
    (tx,) = build_transactions([m])
    assert tx.as_dict["lum"] == "dim"  # 0.2 is the dark/dim cut point


def test_absence_grace_yields_one_moment():
    start = MON.replace(hour=12)
    period = UsagePeriod("lights", start, start + timedelta(minutes=20), 26.7)
    ctx = context(start, 30, occ=lambda m: False)
    moments = contextualize([], ctx, [period], grace_min=15)
    absent = [m for m in moments if m.moment_class == USE_WHILE_ABSENT]
    assert len(absent) == 1
    assert absent[0].timestamp == start + timedelta(minutes=15)
    assert absent[0].context.occupancy == "absent" and absent[0].action == "off"


def test_short_absence_yields_nothing():
    start = MON.replace(hour=12)
    period = UsagePeriod("lights", start, start + timedelta(minutes=30), 40.0)
    ctx = context(start, 30, occ=lambda m: not (5 <= m < 19))
    assert not contextualize([], ctx, [period], grace_min=15)


def test_excessive_period_adds_moment():
    on = ApplianceEvent(MON.replace(hour=9), "tv", ON, 100.0, 1.0)
    off = ApplianceEvent(MON.replace(hour=13), "tv", OFF, -100.0, 1.0)
    period = UsagePeriod("tv", on.timestamp, off.timestamp, 400.0, EXCESSIVE)
    moments = contextualize([on, off], context(MON, 24 * 60), [period])
    assert [m.moment_class for m in moments] == [SWITCH_ON, SWITCH_OFF, EXCESSIVE_USE]
    assert moments[2].event == off and moments[2].timestamp == off.timestamp


def test_uncovered_event_listed():
    e = ApplianceEvent(MON.replace(hour=23), "tv", ON, 100.0, 1.0)
    with pytest.raises(CoverageError, match="tv@"):
        contextualize([e], context(MON, 60))


def test_calendar_only_context():
    e = ApplianceEvent(MON.replace(day=7, hour=10), "oven", ON, 1200.0, 1.0)
    (m,) = contextualize([e], None)
    assert m.context == ContextSnapshot(10, "weekend")
    (tx,) = build_transactions([m])
    assert tx.items == ("action:on", "day:weekend", "device:oven", "hour:10")


def test_direct_item_mapping():
    snap = ContextSnapshot(9, "weekday", "present", 0.7, 21.0)
    m = MicroMoment(MON.replace(hour=9), "monitor", SWITCH_ON, "on", snap)
    (tx,) = build_transactions([m])
    assert set(tx.items) == {"device:monitor", "action:on", "hour:9", "day:weekday", "occ:present",
                             "lum:bright", "temp:mild"}


def test_half_open_cut_points():
    cfg = BucketingConfig()
    assert cfg.luminosity_bucket(0.5) == "bright"
    assert cfg.luminosity_bucket(0.4999) == "dim"
    assert cfg.luminosity_bucket(1.0) == "bright"
    assert cfg.temperature_bucket(26.0) == "hot"
    assert cfg.temperature_bucket(15.0) == "mild"


def test_value_outside_buckets():
    cfg = BucketingConfig(temperature=(Bucket("ok", 0.0, 30.0),))
    snap = ContextSnapshot(9, "weekday", "present", 0.5, 35.0)
    with pytest.raises(BucketingError):
        build_transactions([MicroMoment(MON, "ac", SWITCH_ON, "on", snap)], cfg)


def test_duplicates_preserved():
    snap = ContextSnapshot(9, "weekday", "present", 0.7, 21.0)
    ms = [MicroMoment(MON + timedelta(days=d), "lamp", SWITCH_ON, "on", snap) for d in range(2)]
    txs = build_transactions(ms)
    assert len(txs) == 2 and txs[0] == txs[1]


def test_transaction_invariants():
    with pytest.raises(ValueError):
        Transaction(("action:on", "action:off"))
    with pytest.raises(ValueError):
        Transaction(("device:x",))


moments_st = st.builds(
    lambda h, wk, occ, lum, temp, dev, act: MicroMoment(
        MON, dev, SWITCH_ON if act == "on" else SWITCH_OFF, act,
        ContextSnapshot(h, "weekend" if wk else "weekday", occ, lum, temp)),
    st.integers(0, 23), st.booleans(), st.sampled_from([None, "present", "absent"]),
    st.one_of(st.none(), st.floats(0, 1)), st.one_of(st.none(), st.floats(-20, 45)),
    st.sampled_from(["lights", "ac", "monitor"]), st.sampled_from(["on", "off"]))


@settings(max_examples=80, deadline=None)
@given(st.lists(moments_st, max_size=30))
def test_transaction_properties(moments):
    txs = build_transactions(moments)
    assert len(txs) == len(moments)
    for m, t in zip(moments, txs):
        d = t.as_dict
        keys = [i.split(":", 1)[0] for i in t.items]
        assert len(keys) == len(set(keys))
        assert (d["device"], d["action"], int(d["hour"]), d["day"]) == \
               (m.appliance_id, m.action, m.context.hour, m.context.day_type)
    assert read_transactions(write_transactions(txs)) == txs
