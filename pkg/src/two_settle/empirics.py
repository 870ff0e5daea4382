"""Pre/post virtual-trading analysis of ISO price and load extracts.

Input files are long-format CSVs with columns (timestamp, market, zone,
value); market is DA or RT, timestamps are market-local, DA cadence is
hourly and RT cadence five minutes.  The pipeline aggregates RT series to
hourly means, splits the sample around the virtual-trading go-live date,
and reproduces the hour-of-day spread and demand-ratio tables.

Raw prices may be negative (real LMP data); they are kept as-is here even
though the solver's domain is nonnegative.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

__all__ = [
    "GOLIVE",
    "StudyWindow",
    "IngestError",
    "ingest_csv",
    "hourly_aggregate",
    "spread_table",
    "demand_ratio_table",
]

GOLIVE = {"caiso": pd.Timestamp("2011-02-01"), "nyiso": pd.Timestamp("2001-11-01")}
REQUIRED_COLUMNS = ("timestamp", "market", "zone", "value")
MIN_COVERAGE = 9  # of 12 five-minute observations per hour


class IngestError(ValueError):
    pass


@dataclass(frozen=True)
class StudyWindow:
    """Half-open pre/post windows around the virtual-trading go-live."""

    pre_start: pd.Timestamp
    pre_end: pd.Timestamp
    post_start: pd.Timestamp
    post_end: pd.Timestamp
    golive: pd.Timestamp

    def __post_init__(self):
        if not (self.pre_start < self.pre_end <= self.golive <= self.post_start < self.post_end):
            raise ValueError("windows must satisfy pre < golive <= post")

    @classmethod
    def around(cls, golive, pre_start, post_end):
        golive = pd.Timestamp(golive)
        return cls(pd.Timestamp(pre_start), golive, golive, pd.Timestamp(post_end), golive)

    def period(self, ts: pd.Series) -> pd.Series:
        out = pd.Series(pd.NA, index=ts.index, dtype="object")
        out[(ts >= self.pre_start) & (ts < self.pre_end)] = "pre"
        out[(ts >= self.post_start) & (ts < self.post_end)] = "post"
        return out


def ingest_csv(path, column_map=None, tz=None, strict=False):
    """Parse and validate a long-format CSV; malformed rows go to rejects.

    Returns (records, rejects): records has parsed timestamps, upper-cased
    market labels, float values; rejects carries a reason column.  More
    than 1% rejected rows raises under strict mode.
    """
    raw = pd.read_csv(path, dtype=str, comment="#", skipinitialspace=True)
    if column_map:
        raw = raw.rename(columns=column_map)
    raw.columns = [c.strip().lower() for c in raw.columns]
    missing = [c for c in REQUIRED_COLUMNS if c not in raw.columns]
    if missing:
        raise IngestError(f"unparseable header: missing columns {missing}")
    reasons = pd.Series("", index=raw.index)
    ts = pd.to_datetime(raw["timestamp"], errors="coerce", utc=tz is not None)
    reasons[ts.isna()] = "bad timestamp"
    if tz is not None:
        ts = ts.dt.tz_convert(tz).dt.tz_localize(None)  # market-local, naive
    market = raw["market"].str.strip().str.upper()
    reasons[(reasons == "") & ~market.isin(["DA", "RT"])] = "unknown market"
    value = pd.to_numeric(raw["value"], errors="coerce")
    reasons[(reasons == "") & value.isna()] = "bad value"
    zone = raw["zone"].fillna("")
    reasons[(reasons == "") & (zone.str.strip() == "")] = "missing zone"
    bad = reasons != ""
    rejects = raw[bad].assign(reason=reasons[bad])
    records = pd.DataFrame(
        {
            "timestamp": ts[~bad],
            "market": market[~bad],
            "zone": zone[~bad].str.strip(),
            "value": value[~bad],
        }
    ).reset_index(drop=True)
    frac = len(rejects) / max(len(raw), 1)
    if frac > 0.01:
        msg = f"{len(rejects)}/{len(raw)} rows rejected ({frac:.1%})"
        if strict:
            raise IngestError(msg)
        import warnings

        warnings.warn(msg)
    records = records.sort_values(["zone", "market", "timestamp"], kind="stable").reset_index(
        drop=True
    )
    return records, rejects.reset_index(drop=True)


def hourly_aggregate(records: pd.DataFrame) -> pd.DataFrame:
    """Mean of intra-hour observations per (zone, market, hour).

    Hours with fewer than 9 of 12 five-minute observations are flagged.
    Applying it to already-hourly data is the identity on values.
    """
    df = records.copy()
    df["hour"] = df["timestamp"].dt.floor("h")
    out = (
        df.groupby(["zone", "market", "hour"], as_index=False)
        .agg(value=("value", "mean"), obs_count=("value", "size"))
        .rename(columns={"hour": "timestamp"})
    )
    out["low_coverage"] = out["obs_count"] < MIN_COVERAGE
    return out


def _hourly_both_markets(records: pd.DataFrame) -> pd.DataFrame:
    hourly = hourly_aggregate(records)
    da = hourly[hourly["market"] == "DA"]
    rt = hourly[hourly["market"] == "RT"]
    merged = da.merge(
        rt, on=["zone", "timestamp"], suffixes=("_da", "_rt"), how="inner"
    )
    return merged


def _hour_of_day_stats(df: pd.DataFrame, col: str) -> pd.DataFrame:
    """24 x 2 table of per-hour-of-day means for the pre and post periods."""
    rows = []
    for hod in range(24):
        row = {"hour": hod}
        sel_h = df[df["hour_of_day"] == hod]
        for period in ("pre", "post"):
            x = sel_h.loc[sel_h["period"] == period, col]
            n = len(x)
            row[f"{period}_mean"] = float(x.mean()) if n else np.nan
            row[f"{period}_se"] = float(x.std(ddof=1) / np.sqrt(n)) if n > 1 else np.nan
            row[f"{period}_n"] = n
        rows.append(row)
    return pd.DataFrame(rows)


def _weighted_period_mean(table: pd.DataFrame, period: str) -> float:
    w = table[f"{period}_n"].to_numpy(dtype=float)
    m = table[f"{period}_mean"].to_numpy(dtype=float)
    ok = (w > 0) & np.isfinite(m)
    return float((m[ok] * w[ok]).sum() / w[ok].sum()) if ok.any() else np.nan


def spread_table(prices: pd.DataFrame, window: StudyWindow):
    """Hour-of-day mean RT - DA spreads, pre and post virtual trading.

    Returns (table, summary).  The headline percent decrease uses the
    post-period absolute mean gap as the denominator, the only convention
    consistent with a >100% "decrease"; the pre-based alternative is also
    reported.
    """
    merged = _hourly_both_markets(prices)
    merged["spread"] = merged["value_rt"] - merged["value_da"]
    merged["period"] = window.period(merged["timestamp"])
    merged = merged.dropna(subset=["period"])
    merged["hour_of_day"] = merged["timestamp"].dt.hour
    table = _hour_of_day_stats(merged, "spread")
    pre_gap = _weighted_period_mean(table, "pre")
    post_gap = _weighted_period_mean(table, "post")
    abs_change = abs(pre_gap) - abs(post_gap)
    summary = {
        "pre_mean_gap": pre_gap,
        "post_mean_gap": post_gap,
        "mean_abs_gap_change": abs_change,
        "pct_decrease_post_base": 100.0 * abs_change / abs(post_gap) if post_gap else np.inf,
        "pct_decrease_pre_base": 100.0 * abs_change / abs(pre_gap) if pre_gap else np.inf,
        "pre_hours_positive": int((table["pre_mean"] > 0).sum()),
        "pre_hours_nonpositive": [int(h) for h in table.loc[table["pre_mean"] <= 0, "hour"]],
    }
    return table, summary


def demand_ratio_table(loads: pd.DataFrame, window: StudyWindow):
    """Hour-of-day mean DA/RT cleared-demand ratios, pre and post.

    Hours with zero RT demand are excluded and counted in the summary.
    """
    merged = _hourly_both_markets(loads)
    zero_rt = merged["value_rt"] == 0.0
    excluded = int(zero_rt.sum())
    merged = merged[~zero_rt].copy()
    merged["ratio"] = merged["value_da"] / merged["value_rt"]
    merged["period"] = window.period(merged["timestamp"])
    merged = merged.dropna(subset=["period"])
    merged["hour_of_day"] = merged["timestamp"].dt.hour
    table = _hour_of_day_stats(merged, "ratio")
    pre_mean = _weighted_period_mean(table, "pre")
    post_mean = _weighted_period_mean(table, "post")
    decline = table["pre_mean"] - table["post_mean"]
    summary = {
        "pre_mean_ratio": pre_mean,
        "post_mean_ratio": post_mean,
        "mean_decline": pre_mean - post_mean,
        "min_hourly_decline": float(decline.min()),
        "max_hourly_decline": float(decline.max()),
        "pre_ratio_band": [float(table["pre_mean"].min()), float(table["pre_mean"].max())],
        "excluded_zero_rt_hours": excluded,
    }
    return table, summary
