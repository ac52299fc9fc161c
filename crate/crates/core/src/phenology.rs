//! Frozen-area time series and ice-on / ice-off detection.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use chrono::{NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::dataset::legend::{CLUTTER, ICE, SNOW, WATER};
use crate::dataset::{SegmentationMask, IGNORE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClutterPolicy {
    /// Clutter stands on the ice and counts as frozen.
    #[default]
    Frozen,
    /// Clutter pixels are removed from the lake area.
    Excluded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhenologyConfig {
    /// Frozen fraction at or above which a day counts as frozen.
    pub tau_on: f64,
    /// Liquid fraction at or above which a frozen lake counts as open.
    pub tau_off: f64,
    /// Consecutive observed days needed to confirm a transition.
    pub confirm_days: usize,
    pub clutter_policy: ClutterPolicy,
    pub smooth_window_days: usize,
}

impl Default for PhenologyConfig {
    fn default() -> Self {
        Self {
            tau_on: 0.9,
            tau_off: 0.1,
            confirm_days: 2,
            clutter_policy: ClutterPolicy::Frozen,
            smooth_window_days: 3,
        }
    }
}

impl PhenologyConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, t) in [("tau_on", self.tau_on), ("tau_off", self.tau_off)] {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::Config(format!("{name} must be in (0, 1), got {t}")));
            }
        }
        if self.confirm_days < 2 {
            return Err(Error::Config(format!(
                "confirm_days must be at least 2, got {}",
                self.confirm_days
            )));
        }
        if self.smooth_window_days % 2 == 0 {
            return Err(Error::Config(format!(
                "smooth_window_days must be odd, got {}",
                self.smooth_window_days
            )));
        }
        Ok(())
    }
}

/// Share of the lake region classified as frozen. Pixels of `lake_region`
/// other than 0 and [`IGNORE`] belong to the lake.
pub fn frozen_fraction(
    mask: &SegmentationMask,
    lake_region: &SegmentationMask,
    policy: ClutterPolicy,
) -> Result<f64> {
    mask.ensure_same_dims(lake_region, "frozen_fraction (mask vs lake region)")?;
    let (mut lake, mut frozen, mut clutter) = (0u64, 0u64, 0u64);
    for (&m, &r) in mask.labels().iter().zip(lake_region.labels()) {
        if r == 0 || r == IGNORE {
            continue;
        }
        lake += 1;
        match m {
            ICE | SNOW => frozen += 1,
            CLUTTER => clutter += 1,
            _ => {}
        }
    }
    if lake == 0 {
        return Err(Error::Validation("lake region is empty".into()));
    }
    match policy {
        ClutterPolicy::Frozen => Ok((frozen + clutter) as f64 / lake as f64),
        ClutterPolicy::Excluded => {
            if clutter == lake {
                return Err(Error::Validation(
                    "lake region is entirely clutter; excluded policy leaves no pixels".into(),
                ));
            }
            Ok(frozen as f64 / (lake - clutter) as f64)
        }
    }
}

/// Per-class pixel counts inside the lake region, for diagnostics.
pub fn lake_composition(mask: &SegmentationMask, lake_region: &SegmentationMask) -> Result<[u64; 4]> {
    mask.ensure_same_dims(lake_region, "lake_composition")?;
    let mut counts = [0u64; 4];
    for (&m, &r) in mask.labels().iter().zip(lake_region.labels()) {
        if r == 0 || r == IGNORE {
            continue;
        }
        if let Some(i) = [WATER, ICE, SNOW, CLUTTER].iter().position(|&c| c == m) {
            counts[i] += 1;
        }
    }
    Ok(counts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesEntry {
    pub date: NaiveDate,
    pub fraction: f64,
    pub n_frames: usize,
}

/// Observed days in date order, plus the unobserved days between the first
/// and last observation.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FrozenAreaSeries {
    pub entries: Vec<SeriesEntry>,
    pub gaps: BTreeSet<NaiveDate>,
}

impl FrozenAreaSeries {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn get(&self, date: NaiveDate) -> Option<&SeriesEntry> {
        self.entries
            .binary_search_by_key(&date, |e| e.date)
            .ok()
            .map(|i| &self.entries[i])
    }

    pub fn fractions(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.fraction).collect()
    }

    /// Builds a series from consecutive daily values starting at `start`;
    /// `None` marks a gap.
    pub fn from_daily(start: NaiveDate, values: &[Option<f64>]) -> Self {
        let mut s = Self::default();
        for (d, v) in start.iter_days().zip(values) {
            match v {
                Some(f) => s.entries.push(SeriesEntry {
                    date: d,
                    fraction: *f,
                    n_frames: 1,
                }),
                None => {
                    s.gaps.insert(d);
                }
            }
        }
        if let (Some(first), Some(last)) = (s.entries.first(), s.entries.last()) {
            let (a, b) = (first.date, last.date);
            s.gaps.retain(|g| *g > a && *g < b);
        } else {
            s.gaps.clear();
        }
        s
    }
}

/// Median; an even count averages the two middle values.
pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    })
}

/// Daily median of per-frame fractions; non-finite samples are dropped.
pub fn daily_aggregate(samples: &[(NaiveDateTime, f64)]) -> FrozenAreaSeries {
    let mut by_day: BTreeMap<NaiveDate, Vec<f64>> = BTreeMap::new();
    for (t, f) in samples {
        if f.is_finite() {
            by_day.entry(t.date()).or_default().push(*f);
        }
    }
    let mut series = FrozenAreaSeries::default();
    for (date, mut values) in by_day {
        let n = values.len();
        series.entries.push(SeriesEntry {
            date,
            fraction: median(&mut values).unwrap(),
            n_frames: n,
        });
    }
    if let (Some(first), Some(last)) = (series.entries.first(), series.entries.last()) {
        let observed: BTreeSet<NaiveDate> = series.entries.iter().map(|e| e.date).collect();
        series.gaps = first
            .date
            .iter_days()
            .take_while(|d| *d <= last.date)
            .filter(|d| !observed.contains(d))
            .collect();
    }
    series
}

/// Replaces each observed value by the median of the observed values within
/// `+-window/2` calendar days. Gaps contribute nothing and stay gaps.
pub fn median_smooth(series: &FrozenAreaSeries, window_days: usize) -> Result<FrozenAreaSeries> {
    if window_days == 0 || window_days % 2 == 0 {
        return Err(Error::Config(format!(
            "smoothing window must be a positive odd number of days, got {window_days}"
        )));
    }
    let half = (window_days / 2) as i64;
    let e = &series.entries;
    let mut lo = 0;
    let mut hi = 0;
    let mut out = Vec::with_capacity(e.len());
    for cur in e {
        while (cur.date - e[lo].date).num_days() > half {
            lo += 1;
        }
        while hi < e.len() && (e[hi].date - cur.date).num_days() <= half {
            hi += 1;
        }
        let mut window: Vec<f64> = e[lo..hi].iter().map(|x| x.fraction).collect();
        out.push(SeriesEntry {
            fraction: median(&mut window).unwrap(),
            ..*cur
        });
    }
    Ok(FrozenAreaSeries {
        entries: out,
        gaps: series.gaps.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IceEvent {
    pub ice_on: NaiveDate,
    /// `None` when the lake is still frozen at the end of the series.
    pub ice_off: Option<NaiveDate>,
}

/// Scans the (smoothed) series for alternating ice-on / ice-off dates. A
/// transition is accepted on an observed day when that day and the next
/// `confirm_days - 1` observed days all satisfy its condition.
pub fn detect_events(series: &FrozenAreaSeries, cfg: &PhenologyConfig) -> Result<Vec<IceEvent>> {
    cfg.validate()?;
    let e = &series.entries;
    let n = cfg.confirm_days;
    let confirmed = |i: usize, cond: &dyn Fn(f64) -> bool| i + n <= e.len() && e[i..i + n].iter().all(|x| cond(x.fraction));
    let frozen = |f: f64| f >= cfg.tau_on;
    let open = |f: f64| 1.0 - f >= cfg.tau_off;
    let mut events = Vec::new();
    let mut i = 0;
    while i < e.len() {
        let Some(on) = (i..e.len()).find(|&j| confirmed(j, &frozen)) else {
            break;
        };
        match (on + 1..e.len()).find(|&j| confirmed(j, &open)) {
            Some(off) => {
                events.push(IceEvent {
                    ice_on: e[on].date,
                    ice_off: Some(e[off].date),
                });
                i = off + 1;
            }
            None => {
                events.push(IceEvent {
                    ice_on: e[on].date,
                    ice_off: None,
                });
                break;
            }
        }
    }
    Ok(events)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DateFormat {
    /// `2017-01-29`
    #[default]
    Iso,
    /// `29.01.17` (day.month.two-digit year).
    Paper,
}

impl DateFormat {
    pub fn format(&self, d: NaiveDate) -> String {
        match self {
            DateFormat::Iso => d.format("%Y-%m-%d").to_string(),
            DateFormat::Paper => d.format("%d.%m.%y").to_string(),
        }
    }
}

impl std::str::FromStr for DateFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iso" => Ok(DateFormat::Iso),
            "paper" => Ok(DateFormat::Paper),
            other => Err(Error::Config(format!(
                "unknown date format `{other}` (expected iso or paper)"
            ))),
        }
    }
}

/// `date,frozen_fraction_raw,frozen_fraction_smoothed,n_frames`, one row per
/// calendar day from the first to the last observation; gap days have empty
/// fraction cells and 0 frames.
pub fn series_csv(raw: &FrozenAreaSeries, smoothed: &FrozenAreaSeries, format: DateFormat) -> String {
    let mut out = String::from("date,frozen_fraction_raw,frozen_fraction_smoothed,n_frames\n");
    let (Some(first), Some(last)) = (raw.entries.first(), raw.entries.last()) else {
        return out;
    };
    for d in first.date.iter_days().take_while(|d| *d <= last.date) {
        let date = format.format(d);
        match (raw.get(d), smoothed.get(d)) {
            (Some(r), Some(s)) => writeln!(out, "{date},{},{},{}", r.fraction, s.fraction, r.n_frames).unwrap(),
            (Some(r), None) => writeln!(out, "{date},{},,{}", r.fraction, r.n_frames).unwrap(),
            _ => writeln!(out, "{date},,,0").unwrap(),
        }
    }
    out
}

/// JSON list of `{"ice_on": date, "ice_off": date | null}`.
pub fn events_json(events: &[IceEvent], format: DateFormat) -> String {
    #[derive(Serialize)]
    struct Row {
        ice_on: String,
        ice_off: Option<String>,
    }
    let rows: Vec<Row> = events
        .iter()
        .map(|e| Row {
            ice_on: format.format(e.ice_on),
            ice_off: e.ice_off.map(|d| format.format(d)),
        })
        .collect();
    let mut s = serde_json::to_string_pretty(&rows).expect("json");
    s.push('\n');
    s
}

/// Daily median, smoothing and event detection in one go.
#[derive(Debug, Clone, PartialEq)]
pub struct PhenologyResult {
    pub raw: FrozenAreaSeries,
    pub smoothed: FrozenAreaSeries,
    pub events: Vec<IceEvent>,
}

pub fn analyze(samples: &[(NaiveDateTime, f64)], cfg: &PhenologyConfig) -> Result<PhenologyResult> {
    cfg.validate()?;
    let raw = daily_aggregate(samples);
    let smoothed = median_smooth(&raw, cfg.smooth_window_days)?;
    let events = detect_events(&smoothed, cfg)?;
    Ok(PhenologyResult { raw, smoothed, events })
}
