import numpy as np
import pandas as pd
import pytest

from two_settle.empirics import (
    IngestError,
    StudyWindow,
    demand_ratio_table,
    hourly_aggregate,
    ingest_csv,
    spread_table,
)


@pytest.fixture
def fixture_frames():
    hours = pd.date_range("2010-06-01", periods=48, freq="h")
    golive = pd.Timestamp("2010-06-02")
    rows = []
    for ts in hours:
        pre = ts < golive
        da, rt = (10.0, 12.0) if pre else (11.0, 11.0)
        rows.append((ts, "DA", "Z", da))
        for j in range(12):
            rows.append((ts + pd.Timedelta(minutes=5 * j), "RT", "Z", rt))
    prices = pd.DataFrame(rows, columns=["timestamp", "market", "zone", "value"])
    window = StudyWindow.around(golive, hours[0], hours[-1] + pd.Timedelta(hours=1))
    return prices, window


def test_ingest_valid_fixture(tmp_path):
    path = tmp_path / "p.csv"
    path.write_text(
        "timestamp,market,zone,value\n"
        "2010-01-01 00:00,DA,Z1,25.0\n"
        "2010-01-01 01:00,da,Z1,26.5\n"
        "2010-01-01 00:05,RT,Z1,-3.0\n"
    )
    records, rejects = ingest_csv(path)
    assert len(records) == 3 and len(rejects) == 0
    assert set(records["market"]) == {"DA", "RT"}
    assert (records["value"] < 0).any()  # negative raw prices are kept


def test_ingest_rejects_bad_rows(tmp_path):
    path = tmp_path / "p.csv"
    path.write_text(
        "timestamp,market,zone,value\n"
        "2010-01-01 00:00,DA,Z1,25.0\n"
        "2010-01-01 01:00,DA,Z1,\n"
        "not-a-time,RT,Z1,10.0\n"
        "2010-01-01 00:05,XX,Z1,10.0\n"
    )
    with pytest.warns(UserWarning):
        records, rejects = ingest_csv(path)
    assert len(records) == 1
    assert sorted(rejects["reason"]) == ["bad timestamp", "bad value", "unknown market"]
    with pytest.raises(IngestError):
        ingest_csv(path, strict=True)


def test_ingest_missing_header(tmp_path):
    path = tmp_path / "p.csv"
    path.write_text("when,market,value\n2010-01-01,DA,1\n")
    with pytest.raises(IngestError):
        ingest_csv(path)
    # a column map repairs it
    path2 = tmp_path / "q.csv"
    path2.write_text("when,market,zone,value\n2010-01-01 00:00,DA,Z,1\n")
    records, _ = ingest_csv(path2, column_map={"when": "timestamp"})
    assert len(records) == 1


def test_hourly_aggregate_examples():
    base = pd.Timestamp("2011-03-01 07:00")
    rows = [(base + pd.Timedelta(minutes=5 * j), "RT", "Z", float(j + 1)) for j in range(12)]
    df = pd.DataFrame(rows, columns=["timestamp", "market", "zone", "value"])
    out = hourly_aggregate(df)
    assert out["value"].iloc[0] == pytest.approx(6.5)  # mean of 1..12
    assert not out["low_coverage"].iloc[0]
    out8 = hourly_aggregate(df.head(8))
    assert out8["low_coverage"].iloc[0]
    # constant values aggregate to the constant
    dfc = df.assign(value=3.25)
    assert hourly_aggregate(dfc)["value"].iloc[0] == 3.25


def test_hourly_idempotence(fixture_frames):
    prices, _ = fixture_frames
    once = hourly_aggregate(prices)
    again = hourly_aggregate(once.drop(columns=["obs_count", "low_coverage"]))
    assert np.array_equal(once["value"].to_numpy(), again["value"].to_numpy())


def test_spread_fixture(fixture_frames):
    prices, window = fixture_frames
    table, summary = spread_table(prices, window)
    assert np.allclose(table["pre_mean"], 2.0)
    assert np.allclose(table["post_mean"], 0.0)
    assert summary["pre_hours_positive"] == 24
    # identical series spread exactly zero post
    assert summary["post_mean_gap"] == 0.0
    # summary recomputes from the emitted table
    pre = (table["pre_mean"] * table["pre_n"]).sum() / table["pre_n"].sum()
    assert abs(pre - summary["pre_mean_gap"]) <= 1e-9


def test_windows_do_not_overlap(fixture_frames):
    prices, window = fixture_frames
    per = window.period(prices["timestamp"])
    pre_ts = prices.loc[per == "pre", "timestamp"]
    post_ts = prices.loc[per == "post", "timestamp"]
    assert pre_ts.max() < post_ts.min()
    with pytest.raises(ValueError):
        StudyWindow(
            pd.Timestamp("2011-01-01"),
            pd.Timestamp("2010-01-01"),
            pd.Timestamp("2011-02-01"),
            pd.Timestamp("2012-01-01"),
            pd.Timestamp("2011-02-01"),
        )


def test_ratio_fixture():
    hours = pd.date_range("2010-06-01", periods=24, freq="h")
    rows = []
    for ts in hours:
        rows.append((ts, "DA", "Z", 50.0))
        for j in range(12):
            rows.append((ts + pd.Timedelta(minutes=5 * j), "RT", "Z", 100.0))
    # one zero-RT hour gets excluded
    extra = pd.Timestamp("2010-06-02 01:00")
    rows.append((extra, "DA", "Z", 10.0))
    for j in range(12):
        rows.append((extra + pd.Timedelta(minutes=5 * j), "RT", "Z", 0.0))
    loads = pd.DataFrame(rows, columns=["timestamp", "market", "zone", "value"])
    window = StudyWindow.around(
        "2010-06-01 12:00", hours[0], extra + pd.Timedelta(hours=1)
    )
    table, summary = demand_ratio_table(loads, window)
    pre = table["pre_mean"].dropna()
    post = table["post_mean"].dropna()
    assert np.allclose(pre, 0.5) and np.allclose(post, 0.5)
    assert summary["excluded_zero_rt_hours"] == 1


def test_dst_duplicated_hours_average_together():
    ts = pd.Timestamp("2010-11-07 01:00")  # occurs twice on fall-back day
    df = pd.DataFrame(
        {
            "timestamp": [ts, ts],
            "market": ["DA", "DA"],
            "zone": ["Z", "Z"],
            "value": [10.0, 20.0],
        }
    )
    out = hourly_aggregate(df)
    assert len(out) == 1 and out["value"].iloc[0] == 15.0


def test_ingest_timezone_normalization(tmp_path):
    path = tmp_path / "p.csv"
    path.write_text(
        "timestamp,market,zone,value\n"
        "2010-06-01 08:00:00+00:00,DA,Z,10\n"
        "2010-06-01 09:00:00+00:00,DA,Z,11\n"
    )
    records, rejects = ingest_csv(path, tz="America/Los_Angeles")
    assert len(rejects) == 0
    assert records["timestamp"].iloc[0] == pd.Timestamp("2010-06-01 01:00")  # PDT
    assert records["timestamp"].dt.tz is None
