//! Data ingestion and covariate engineering.
//!
//! Turns 15-minute observation records into the extended design matrix:
//! traffic variables plus a four-level regime factor, seasonal Fourier
//! components, circular wind-direction terms, meteorological main
//! effects, wind-speed interactions and squares, and lagged
//! concentrations of the three pollutants. With the default
//! [`FeatureSpec`] the covariate count is 7 + 18 + 15 + 12 = 52.

use std::collections::HashMap;
use std::path::Path;

use chrono::{NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Observation grid resolution.
pub const GRID_SECONDS: i64 = 900;

/// Phase reference for the periodic components: a Monday midnight, so the
/// weekly phase is zero at the start of a week and the daily phase at
/// midnight.
const EPOCH: &str = "2000-01-03T00:00:00";

const DAY_SECONDS: f64 = 86_400.0;
const WEEK_SECONDS: f64 = 604_800.0;
/// Fixed 365.25-day cycle, so yearly terms are exactly periodic.
const YEAR_SECONDS: f64 = 31_557_600.0;

pub const CSV_COLUMNS: [&str; 13] = [
    "timestamp", "no", "no2", "o3", "tf_ldv", "tf_hgv", "ts_ldv", "ts_hgv", "rh", "sr", "ws",
    "wd", "temp",
];

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("header mismatch: expected columns {expected:?}, found {found:?}")]
    Header { expected: Vec<String>, found: Vec<String> },
    #[error("line {line}: cannot parse field `{field}`: {message}")]
    Parse { line: usize, field: String, message: String },
    #[error("line {line}: duplicated timestamp {timestamp}")]
    DuplicateTimestamp { line: usize, timestamp: String },
    #[error("line {line}: timestamp {timestamp} not increasing")]
    NonMonotoneTimestamp { line: usize, timestamp: String },
    #[error("line {line}: timestamp {timestamp} is not on the 15-minute grid")]
    GridMisaligned { line: usize, timestamp: String },
    #[error("feature spec invalid: {0}")]
    InvalidSpec(String),
    #[error("all rows were dropped; no usable design rows")]
    EmptyDesign,
    #[error("empty input sequence")]
    EmptyInput,
    #[error("quantile must lie strictly inside (0, 1)")]
    InvalidQuantile,
    #[error("no non-missing values for pollutant {0:?}")]
    NoResponseValues(Pollutant),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pollutant {
    No,
    No2,
    O3,
}

impl Pollutant {
    pub const ALL: [Pollutant; 3] = [Pollutant::No, Pollutant::No2, Pollutant::O3];

    pub fn name(&self) -> &'static str {
        match self {
            Pollutant::No => "no",
            Pollutant::No2 => "no2",
            Pollutant::O3 => "o3",
        }
    }
}

/// One 15-minute observation row; every measurement may be missing.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationRecord {
    pub timestamp: NaiveDateTime,
    pub no: Option<f64>,
    pub no2: Option<f64>,
    pub o3: Option<f64>,
    pub tf_ldv: Option<f64>,
    pub tf_hgv: Option<f64>,
    pub ts_ldv: Option<f64>,
    pub ts_hgv: Option<f64>,
    pub rh: Option<f64>,
    pub sr: Option<f64>,
    pub ws: Option<f64>,
    pub wd: Option<f64>,
    pub temp: Option<f64>,
}

impl ObservationRecord {
    pub fn empty(timestamp: NaiveDateTime) -> Self {
        Self {
            timestamp,
            no: None,
            no2: None,
            o3: None,
            tf_ldv: None,
            tf_hgv: None,
            ts_ldv: None,
            ts_hgv: None,
            rh: None,
            sr: None,
            ws: None,
            wd: None,
            temp: None,
        }
    }

    pub fn pollutant(&self, p: Pollutant) -> Option<f64> {
        match p {
            Pollutant::No => self.no,
            Pollutant::No2 => self.no2,
            Pollutant::O3 => self.o3,
        }
    }
}

/// Four-level traffic regime from total flow (vehicles / 15 min) and
/// average speed (kph): congested below 30 kph, otherwise quiet / free /
/// busy by the 200 and 300 vehicle cutoffs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrafficRegime {
    Quiet,
    Free,
    Busy,
    Congested,
}

pub fn classify_traffic_regime(tf_total: f64, ts_avg: f64) -> TrafficRegime {
    if ts_avg < 30.0 {
        TrafficRegime::Congested
    } else if tf_total <= 200.0 {
        TrafficRegime::Quiet
    } else if tf_total <= 300.0 {
        TrafficRegime::Free
    } else {
        TrafficRegime::Busy
    }
}

/// Covariate composition. Defaults reproduce the 52-covariate set:
/// 7 traffic, 18 composite (14 seasonal Fourier + 4 circular
/// wind-direction terms), 15 meteorological, 12 lagged concentrations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureSpec {
    pub fourier_daily: usize,
    pub fourier_weekly: usize,
    pub fourier_yearly: usize,
    pub wd_orders: usize,
    pub lag_count: usize,
    pub include_traffic_regime: bool,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        Self {
            fourier_daily: 3,
            fourier_weekly: 2,
            fourier_yearly: 2,
            wd_orders: 2,
            lag_count: 4,
            include_traffic_regime: true,
        }
    }
}

impl FeatureSpec {
    pub fn validate(&self) -> Result<(), FeatureError> {
        if self.fourier_daily < 1 || self.fourier_weekly < 1 || self.fourier_yearly < 1 {
            return Err(FeatureError::InvalidSpec(
                "fourier orders must be >= 1 per cycle".into(),
            ));
        }
        if self.wd_orders < 1 {
            return Err(FeatureError::InvalidSpec("wd_orders must be >= 1".into()));
        }
        Ok(())
    }

    pub fn traffic_count(&self) -> usize {
        4 + if self.include_traffic_regime { 3 } else { 0 }
    }

    /// Seasonal Fourier terms plus the circular wind-direction pairs.
    pub fn composite_count(&self) -> usize {
        2 * (self.fourier_daily + self.fourier_weekly + self.fourier_yearly) + 2 * self.wd_orders
    }

    /// rh, sr, ws, temp, the ws interactions with rh/sr/temp and each
    /// wind-direction pair, and the four squares.
    pub fn met_count(&self) -> usize {
        4 + (3 + 2 * self.wd_orders) + 4
    }

    pub fn lag_total(&self) -> usize {
        3 * self.lag_count
    }

    /// Total covariate count m.
    pub fn covariate_count(&self) -> usize {
        self.traffic_count() + self.composite_count() + self.met_count() + self.lag_total()
    }

    /// Names of the m covariate columns, in design order.
    pub fn covariate_names(&self) -> Vec<String> {
        let mut names = vec![
            "tf_ldv".to_string(),
            "tf_hgv".to_string(),
            "ts_ldv".to_string(),
            "ts_hgv".to_string(),
        ];
        if self.include_traffic_regime {
            for r in ["free", "busy", "congested"] {
                names.push(format!("tr_{r}"));
            }
        }
        for (cycle, orders) in [
            ("day", self.fourier_daily),
            ("week", self.fourier_weekly),
            ("year", self.fourier_yearly),
        ] {
            for k in 1..=orders {
                names.push(format!("{cycle}_sin{k}"));
                names.push(format!("{cycle}_cos{k}"));
            }
        }
        for k in 1..=self.wd_orders {
            names.push(format!("wd_sin{k}"));
            names.push(format!("wd_cos{k}"));
        }
        for v in ["rh", "sr", "ws", "temp"] {
            names.push(v.to_string());
        }
        for v in ["rh", "sr", "temp"] {
            names.push(format!("ws_x_{v}"));
        }
        for k in 1..=self.wd_orders {
            names.push(format!("ws_x_wd_sin{k}"));
            names.push(format!("ws_x_wd_cos{k}"));
        }
        for v in ["rh", "sr", "temp", "ws"] {
            names.push(format!("{v}_sq"));
        }
        for p in Pollutant::ALL {
            for j in 1..=self.lag_count {
                names.push(format!("{}_lag{j}", p.name()));
            }
        }
        debug_assert_eq!(names.len(), self.covariate_count());
        names
    }
}

fn epoch() -> NaiveDateTime {
    EPOCH.parse().expect("valid epoch literal")
}

/// Seasonal Fourier terms: for each cycle (day, week, year) and order k
/// up to the configured order, `sin(2πkφ)` and `cos(2πkφ)` with φ the fractional
/// position of the timestamp within the cycle. 14 terms by default.
pub fn fourier_features(timestamp: NaiveDateTime, spec: &FeatureSpec) -> Vec<f64> {
    let dt = (timestamp - epoch()).num_seconds() as f64;
    let mut out = Vec::with_capacity(2 * (spec.fourier_daily + spec.fourier_weekly + spec.fourier_yearly));
    for (period, orders) in [
        (DAY_SECONDS, spec.fourier_daily),
        (WEEK_SECONDS, spec.fourier_weekly),
        (YEAR_SECONDS, spec.fourier_yearly),
    ] {
        let phase = (dt.rem_euclid(period)) / period;
        for k in 1..=orders {
            let ang = std::f64::consts::TAU * k as f64 * phase;
            out.push(ang.sin());
            out.push(ang.cos());
        }
    }
    out
}

/// One usable design row: response, extended covariate vector
/// `c̃ = (1, c_1, …, c_m)`, and the exceedance bookkeeping at the
/// dataset's threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignRow {
    pub timestamp: NaiveDateTime,
    pub response: f64,
    pub c_tilde: Vec<f64>,
    pub exceeds: bool,
    pub exceedance: Option<f64>,
}

/// Centring/scaling transform over the covariate columns (the intercept
/// slot is untouched). Kept with a fitted model so coefficients can be
/// mapped back to raw covariate scales and new rows transformed
/// consistently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[DesignRow]) -> Self {
        let n_cols = rows[0].c_tilde.len();
        let n = rows.len() as f64;
        let mut means = vec![0.0; n_cols];
        let mut scales = vec![1.0; n_cols];
        for j in 1..n_cols {
            let mean = rows.iter().map(|r| r.c_tilde[j]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r.c_tilde[j] - mean).powi(2)).sum::<f64>() / n;
            means[j] = mean;
            // a column constant up to rounding has sd at the noise floor;
            // scaling by it would amplify rounding error enormously
            let sd = var.sqrt();
            let floor = 1e-10 * mean.abs().max(1.0);
            scales[j] = if sd > floor { sd } else { 1.0 };
        }
        Self { means, scales }
    }

    pub fn apply_vec(&self, c_tilde: &mut [f64]) {
        for j in 1..c_tilde.len() {
            c_tilde[j] = (c_tilde[j] - self.means[j]) / self.scales[j];
        }
    }

    pub fn apply_value(&self, col: usize, raw: f64) -> f64 {
        (raw - self.means[col]) / self.scales[col]
    }

    /// Maps one coefficient block fitted on standardized covariates back
    /// to the raw covariate scale.
    pub fn coefficients_to_raw(&self, coefs: &[f64]) -> Vec<f64> {
        let mut raw = coefs.to_vec();
        for j in 1..coefs.len() {
            raw[j] = coefs[j] / self.scales[j];
            raw[0] -= coefs[j] * self.means[j] / self.scales[j];
        }
        raw
    }
}

/// Design rows plus the threshold, column names and (after
/// [`standardize`](Self::standardize)) the stored transform.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub rows: Vec<DesignRow>,
    pub threshold: f64,
    pub names: Vec<String>,
    pub standardizer: Option<Standardizer>,
}

impl DesignMatrix {
    pub fn m(&self) -> usize {
        self.names.len() - 1
    }

    /// Centre and scale covariates in place, keeping the transform.
    pub fn standardize(&mut self) {
        let st = Standardizer::fit(&self.rows);
        for row in &mut self.rows {
            st.apply_vec(&mut row.c_tilde);
        }
        self.standardizer = Some(st);
    }

    /// Design-column indices (into c̃) of lags 1..=lag_count of a pollutant.
    pub fn lag_columns(&self, target: Pollutant, lag_count: usize) -> Vec<usize> {
        (1..=lag_count)
            .map(|j| {
                let name = format!("{}_lag{j}", target.name());
                self.names
                    .iter()
                    .position(|n| *n == name)
                    .expect("lag column present")
            })
            .collect()
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

fn check_grid(records: &[ObservationRecord]) -> Result<(), FeatureError> {
    for w in records.windows(2) {
        let dt = (w[1].timestamp - w[0].timestamp).num_seconds();
        if dt == 0 {
            return Err(FeatureError::DuplicateTimestamp {
                line: 0,
                timestamp: w[1].timestamp.to_string(),
            });
        }
        if dt < 0 {
            return Err(FeatureError::NonMonotoneTimestamp {
                line: 0,
                timestamp: w[1].timestamp.to_string(),
            });
        }
        if dt % GRID_SECONDS != 0 {
            return Err(FeatureError::GridMisaligned {
                line: 0,
                timestamp: w[1].timestamp.to_string(),
            });
        }
    }
    Ok(())
}

/// Builds the design matrix at threshold `u`. Rows are dropped when the
/// response or any required covariate (including any of the lags) is
/// missing; a gap in the 15-minute grid invalidates the lags that fall in
/// it.
pub fn build_design_matrix(
    records: &[ObservationRecord],
    target: Pollutant,
    u: f64,
    spec: &FeatureSpec,
) -> Result<DesignMatrix, FeatureError> {
    spec.validate()?;
    if records.is_empty() {
        return Err(FeatureError::EmptyInput);
    }
    check_grid(records)?;

    let t0 = records[0].timestamp;
    let slot_of = |ts: NaiveDateTime| (ts - t0).num_seconds() / GRID_SECONDS;
    let by_slot: HashMap<i64, usize> = records
        .iter()
        .enumerate()
        .map(|(i, r)| (slot_of(r.timestamp), i))
        .collect();

    let names: Vec<String> = std::iter::once("intercept".to_string())
        .chain(spec.covariate_names())
        .collect();

    let mut rows = Vec::new();
    'rec: for rec in records {
        let response = match rec.pollutant(target) {
            Some(v) => v,
            None => continue,
        };
        let (tf_ldv, tf_hgv) = match (rec.tf_ldv, rec.tf_hgv) {
            (Some(a), Some(b)) => (a, b),
            _ => continue,
        };
        let (ts_ldv, ts_hgv) = match (rec.ts_ldv, rec.ts_hgv) {
            (Some(a), Some(b)) => (a, b),
            _ => continue,
        };
        let (rh, sr, ws, wd, temp) = match (rec.rh, rec.sr, rec.ws, rec.wd, rec.temp) {
            (Some(a), Some(b), Some(c), Some(d), Some(e)) => (a, b, c, d, e),
            _ => continue,
        };

        // lagged concentrations on the 15-minute grid
        let slot = slot_of(rec.timestamp);
        let mut lags: Vec<f64> = Vec::with_capacity(spec.lag_total());
        for p in Pollutant::ALL {
            for j in 1..=spec.lag_count {
                match by_slot
                    .get(&(slot - j as i64))
                    .and_then(|&i| records[i].pollutant(p))
                {
                    Some(v) => lags.push(v),
                    None => continue 'rec,
                }
            }
        }

        let mut c = Vec::with_capacity(names.len());
        c.push(1.0);
        // traffic
        c.extend([tf_ldv, tf_hgv, ts_ldv, ts_hgv]);
        if spec.include_traffic_regime {
            let regime = classify_traffic_regime(tf_ldv + tf_hgv, 0.5 * (ts_ldv + ts_hgv));
            c.push((regime == TrafficRegime::Free) as u8 as f64);
            c.push((regime == TrafficRegime::Busy) as u8 as f64);
            c.push((regime == TrafficRegime::Congested) as u8 as f64);
        }
        // composite
        c.extend(fourier_features(rec.timestamp, spec));
        let wd_rad = wd.to_radians();
        let mut wd_terms = Vec::with_capacity(2 * spec.wd_orders);
        for k in 1..=spec.wd_orders {
            wd_terms.push((k as f64 * wd_rad).sin());
            wd_terms.push((k as f64 * wd_rad).cos());
        }
        c.extend(wd_terms.iter().copied());
        // meteorological
        c.extend([rh, sr, ws, temp]);
        c.extend([ws * rh, ws * sr, ws * temp]);
        for t in &wd_terms {
            c.push(ws * t);
        }
        c.extend([rh * rh, sr * sr, temp * temp, ws * ws]);
        // lags
        c.extend(lags);

        debug_assert_eq!(c.len(), names.len());
        let exceeds = response > u;
        rows.push(DesignRow {
            timestamp: rec.timestamp,
            response,
            c_tilde: c,
            exceeds,
            exceedance: if exceeds { Some(response - u) } else { None },
        });
    }

    if rows.is_empty() {
        return Err(FeatureError::EmptyDesign);
    }
    Ok(DesignMatrix {
        rows,
        threshold: u,
        names,
        standardizer: None,
    })
}

/// The ⌈qn⌉-th order statistic of the sample (no interpolation), so the
/// threshold is always an attainable data value.
pub fn empirical_quantile_threshold(values: &[f64], q: f64) -> Result<f64, FeatureError> {
    if values.is_empty() {
        return Err(FeatureError::EmptyInput);
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(FeatureError::InvalidQuantile);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let k = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    Ok(sorted[k - 1])
}

/// All non-missing values of one pollutant, in time order.
pub fn pollutant_values(records: &[ObservationRecord], target: Pollutant) -> Vec<f64> {
    records.iter().filter_map(|r| r.pollutant(target)).collect()
}

/// Whether a local clock time falls in the daylight window (7am–8pm);
/// the complement is night-time (8pm–7am).
pub fn is_daylight(ts: NaiveDateTime) -> bool {
    let h = ts.hour();
    (7..20).contains(&h)
}

fn parse_opt_f64(raw: &str, line: usize, field: &str) -> Result<Option<f64>, FeatureError> {
    let raw = raw.trim();
    if raw.is_empty() {
        return Ok(None);
    }
    raw.parse::<f64>()
        .map(Some)
        .map_err(|e| FeatureError::Parse {
            line,
            field: field.to_string(),
            message: e.to_string(),
        })
}

fn require_nonneg(
    v: Option<f64>,
    line: usize,
    field: &str,
) -> Result<Option<f64>, FeatureError> {
    if let Some(x) = v {
        if !(x >= 0.0) {
            return Err(FeatureError::Parse {
                line,
                field: field.to_string(),
                message: format!("value {x} must be non-negative"),
            });
        }
    }
    Ok(v)
}

/// Reads the observation CSV (header row required, empty cell = missing).
/// Timestamps must be strictly increasing on the 15-minute grid; errors
/// carry 1-based line numbers.
pub fn ingest_csv(path: &Path) -> Result<Vec<ObservationRecord>, FeatureError> {
    let file = std::fs::File::open(path).map_err(|source| FeatureError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);

    let headers: Vec<String> = reader.headers()?.iter().map(|s| s.trim().to_string()).collect();
    let expected: Vec<String> = CSV_COLUMNS.iter().map(|s| s.to_string()).collect();
    let mut index = HashMap::new();
    for (i, h) in headers.iter().enumerate() {
        index.insert(h.as_str().to_string(), i);
    }
    if headers.len() != CSV_COLUMNS.len() || CSV_COLUMNS.iter().any(|c| !index.contains_key(*c)) {
        return Err(FeatureError::Header { expected, found: headers });
    }

    let mut records = Vec::new();
    for (row_i, result) in reader.records().enumerate() {
        let line = row_i + 2; // header is line 1
        let record = result?;
        let get = |name: &str| record.get(index[name]).unwrap_or("");

        let ts_raw = get("timestamp").trim();
        let timestamp: NaiveDateTime =
            ts_raw.parse().map_err(|e: chrono::ParseError| FeatureError::Parse {
                line,
                field: "timestamp".into(),
                message: e.to_string(),
            })?;
        if let Some(prev) = records.last().map(|r: &ObservationRecord| r.timestamp) {
            let dt = (timestamp - prev).num_seconds();
            if dt == 0 {
                return Err(FeatureError::DuplicateTimestamp { line, timestamp: ts_raw.into() });
            }
            if dt < 0 {
                return Err(FeatureError::NonMonotoneTimestamp { line, timestamp: ts_raw.into() });
            }
            if dt % GRID_SECONDS != 0 {
                return Err(FeatureError::GridMisaligned { line, timestamp: ts_raw.into() });
            }
        }

        let wd = parse_opt_f64(get("wd"), line, "wd")?;
        if let Some(w) = wd {
            if !(0.0..360.0).contains(&w) {
                return Err(FeatureError::Parse {
                    line,
                    field: "wd".into(),
                    message: format!("wind direction {w} outside [0, 360)"),
                });
            }
        }

        records.push(ObservationRecord {
            timestamp,
            no: require_nonneg(parse_opt_f64(get("no"), line, "no")?, line, "no")?,
            no2: require_nonneg(parse_opt_f64(get("no2"), line, "no2")?, line, "no2")?,
            o3: require_nonneg(parse_opt_f64(get("o3"), line, "o3")?, line, "o3")?,
            tf_ldv: require_nonneg(parse_opt_f64(get("tf_ldv"), line, "tf_ldv")?, line, "tf_ldv")?,
            tf_hgv: require_nonneg(parse_opt_f64(get("tf_hgv"), line, "tf_hgv")?, line, "tf_hgv")?,
            ts_ldv: require_nonneg(parse_opt_f64(get("ts_ldv"), line, "ts_ldv")?, line, "ts_ldv")?,
            ts_hgv: require_nonneg(parse_opt_f64(get("ts_hgv"), line, "ts_hgv")?, line, "ts_hgv")?,
            rh: parse_opt_f64(get("rh"), line, "rh")?,
            sr: require_nonneg(parse_opt_f64(get("sr"), line, "sr")?, line, "sr")?,
            ws: require_nonneg(parse_opt_f64(get("ws"), line, "ws")?, line, "ws")?,
            wd,
            temp: parse_opt_f64(get("temp"), line, "temp")?,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use chrono::Duration;
    use proptest::prelude::*;
    use std::io::Write;

    fn ts(s: &str) -> NaiveDateTime {
        s.parse().unwrap()
    }

    fn full_record(t: NaiveDateTime, conc: f64) -> ObservationRecord {
        ObservationRecord {
            timestamp: t,
            no: Some(conc),
            no2: Some(conc + 1.0),
            o3: Some(conc + 2.0),
            tf_ldv: Some(150.0),
            tf_hgv: Some(30.0),
            ts_ldv: Some(42.0),
            ts_hgv: Some(38.0),
            rh: Some(70.0),
            sr: Some(120.0),
            ws: Some(3.5),
            wd: Some(190.0),
            temp: Some(11.0),
        }
    }

    fn grid(n: usize, start: &str) -> Vec<ObservationRecord> {
        let t0 = ts(start);
        (0..n)
            .map(|i| full_record(t0 + Duration::minutes(15 * i as i64), i as f64))
            .collect()
    }

    #[test]
    fn regime_cutoffs() {
        assert_eq!(classify_traffic_regime(150.0, 40.0), TrafficRegime::Quiet);
        assert_eq!(classify_traffic_regime(250.0, 35.0), TrafficRegime::Free);
        assert_eq!(classify_traffic_regime(400.0, 50.0), TrafficRegime::Busy);
        assert_eq!(classify_traffic_regime(100.0, 20.0), TrafficRegime::Congested);
        // boundaries
        assert_eq!(classify_traffic_regime(200.0, 30.0), TrafficRegime::Quiet);
        assert_eq!(classify_traffic_regime(300.0, 30.0), TrafficRegime::Free);
    }

    #[test]
    fn fourier_daily_phase() {
        let spec = FeatureSpec::default();
        let f = fourier_features(ts("2008-06-02T00:00:00"), &spec);
        assert_relative_eq!(f[0], 0.0, epsilon = 1e-9); // day sin1
        assert_relative_eq!(f[1], 1.0, epsilon = 1e-9); // day cos1
        let f = fourier_features(ts("2008-06-02T06:00:00"), &spec);
        assert_relative_eq!(f[0], 1.0, epsilon = 1e-9);
        assert_relative_eq!(f[1], 0.0, epsilon = 1e-9);
        assert_eq!(f.len(), 14);
    }

    #[test]
    fn default_counts() {
        let spec = FeatureSpec::default();
        assert_eq!(spec.traffic_count(), 7);
        assert_eq!(spec.composite_count(), 18);
        assert_eq!(spec.met_count(), 15);
        assert_eq!(spec.lag_total(), 12);
        assert_eq!(spec.covariate_count(), 52);
        assert_eq!(spec.covariate_names().len(), 52);
    }

    #[test]
    fn design_matrix_defaults() {
        let records = grid(10, "2008-01-01T00:00:00");
        let dm = build_design_matrix(&records, Pollutant::No, 5.0, &FeatureSpec::default()).unwrap();
        // first 4 records lack lags
        assert_eq!(dm.rows.len(), 6);
        assert_eq!(dm.rows[0].c_tilde.len(), 53);
        assert_eq!(dm.names.len(), 53);
        assert_eq!(dm.rows[0].c_tilde[0], 1.0);
    }

    #[test]
    fn lag_values_follow_grid_index() {
        let records = grid(12, "2008-01-01T00:00:00");
        let spec = FeatureSpec::default();
        let dm = build_design_matrix(&records, Pollutant::No, 100.0, &spec).unwrap();
        let cols = dm.lag_columns(Pollutant::No, spec.lag_count);
        for row in &dm.rows {
            for (j, &col) in cols.iter().enumerate() {
                assert_relative_eq!(row.c_tilde[col], row.response - (j + 1) as f64);
            }
        }
    }

    #[test]
    fn missing_field_drops_row_only() {
        let mut records = grid(10, "2008-01-01T00:00:00");
        records[6].sr = None;
        let dm = build_design_matrix(&records, Pollutant::No, 5.0, &FeatureSpec::default()).unwrap();
        assert_eq!(dm.rows.len(), 5);
        assert!(dm.rows.iter().all(|r| r.timestamp != records[6].timestamp));
    }

    #[test]
    fn missing_pollutant_invalidates_lags() {
        let mut records = grid(12, "2008-01-01T00:00:00");
        // breaks the o3 lag for rows 7..=10; row 6 itself only needs its
        // own pollutants as lag sources, so it survives
        records[6].o3 = None;
        let dm = build_design_matrix(&records, Pollutant::No, 5.0, &FeatureSpec::default()).unwrap();
        assert_eq!(dm.rows.len(), 12 - 4 - 4);
    }

    #[test]
    fn grid_gap_invalidates_lags() {
        let mut records = grid(12, "2008-01-01T00:00:00");
        records.remove(6);
        let dm = build_design_matrix(&records, Pollutant::No, 5.0, &FeatureSpec::default()).unwrap();
        // rows at former indices 7..=10 need the removed slot
        assert_eq!(dm.rows.len(), 11 - 4 - 4);
    }

    #[test]
    fn quantile_order_statistic() {
        let v: Vec<f64> = (1..=10).map(|i| i as f64).collect();
        assert_eq!(empirical_quantile_threshold(&v, 0.9).unwrap(), 9.0);
        let c = vec![4.2; 17];
        for q in [0.1, 0.5, 0.9] {
            assert_eq!(empirical_quantile_threshold(&c, q).unwrap(), 4.2);
        }
        assert!(empirical_quantile_threshold(&[], 0.5).is_err());
    }

    #[test]
    fn threshold_exceedance_count() {
        let v: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        for q in [0.5, 0.8, 0.9, 0.95] {
            let u = empirical_quantile_threshold(&v, q).unwrap();
            let above = v.iter().filter(|&&x| x > u).count();
            let n = v.len() as f64;
            let lo = ((1.0 - q) * n).floor() as usize;
            let hi = ((1.0 - q) * n).ceil() as usize;
            assert!(above == lo || above == hi, "q={q} above={above}");
        }
    }

    #[test]
    fn standardizer_round_trip() {
        let records = grid(20, "2008-01-01T00:00:00");
        let mut dm = build_design_matrix(&records, Pollutant::No, 5.0, &FeatureSpec::default()).unwrap();
        let raw_first = dm.rows[0].c_tilde.clone();
        dm.standardize();
        let st = dm.standardizer.clone().unwrap();
        for (j, &v) in dm.rows[0].c_tilde.iter().enumerate().skip(1) {
            assert_relative_eq!(v, st.apply_value(j, raw_first[j]), epsilon = 1e-12);
        }
        // coefficient back-mapping: beta_std . c_std == raw(beta) . c_raw
        let beta_std: Vec<f64> = (0..raw_first.len()).map(|i| 0.1 * i as f64 - 1.0).collect();
        let beta_raw = st.coefficients_to_raw(&beta_std);
        let dot_std: f64 = beta_std.iter().zip(&dm.rows[0].c_tilde).map(|(a, b)| a * b).sum();
        let dot_raw: f64 = beta_raw.iter().zip(&raw_first).map(|(a, b)| a * b).sum();
        assert_relative_eq!(dot_std, dot_raw, epsilon = 1e-9, max_relative = 1e-9);
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("obs.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "timestamp,no,no2,o3,tf_ldv,tf_hgv,ts_ldv,ts_hgv,rh,sr,ws,wd,temp").unwrap();
        writeln!(f, "2008-01-01T00:00:00,1.0,2.0,3.0,10,2,40,35,70,100,3.2,180,9").unwrap();
        writeln!(f, "2008-01-01T00:15:00,1.5,2.5,3.5,11,3,41,36,71,101,,181,9.5").unwrap();
        writeln!(f, "2008-01-01T00:45:00,2.0,3.0,4.0,12,4,42,37,72,102,3.4,182,10").unwrap();
        drop(f);
        let records = ingest_csv(&path).unwrap();
        assert_eq!(records.len(), 3);
        assert_eq!(records[1].ws, None);
        assert_eq!(records[2].no, Some(2.0));

        let dup = dir.path().join("dup.csv");
        let mut f = std::fs::File::create(&dup).unwrap();
        writeln!(f, "timestamp,no,no2,o3,tf_ldv,tf_hgv,ts_ldv,ts_hgv,rh,sr,ws,wd,temp").unwrap();
        writeln!(f, "2008-01-01T00:00:00,1,2,3,10,2,40,35,70,100,3,180,9").unwrap();
        writeln!(f, "2008-01-01T00:00:00,1,2,3,10,2,40,35,70,100,3,180,9").unwrap();
        drop(f);
        match ingest_csv(&dup) {
            Err(FeatureError::DuplicateTimestamp { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected duplicate timestamp error, got {other:?}"),
        }

        let bad = dir.path().join("bad_header.csv");
        let mut f = std::fs::File::create(&bad).unwrap();
        writeln!(f, "time,no,no2").unwrap();
        drop(f);
        assert!(matches!(ingest_csv(&bad), Err(FeatureError::Header { .. })));
    }

    proptest! {
        #[test]
        fn fourier_is_periodic(offset_minutes in 0i64..2_000_000) {
            let spec = FeatureSpec::default();
            let t = ts("2008-01-01T00:00:00") + Duration::minutes(offset_minutes);
            let base = fourier_features(t, &spec);
            for (period, idx) in [
                (Duration::seconds(DAY_SECONDS as i64), 0usize..6),
                (Duration::seconds(WEEK_SECONDS as i64), 6..10),
                (Duration::seconds(YEAR_SECONDS as i64), 10..14),
            ] {
                let shifted = fourier_features(t + period, &spec);
                for i in idx {
                    prop_assert!((base[i] - shifted[i]).abs() < 1e-9);
                }
            }
            // unit circle per pair
            for pair in base.chunks(2) {
                prop_assert!((pair[0] * pair[0] + pair[1] * pair[1] - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn missingness_never_adds_rows(kill in 0usize..15, field in 0usize..3) {
            let mut records = grid(15, "2008-01-01T00:00:00");
            let spec = FeatureSpec::default();
            let before = build_design_matrix(&records, Pollutant::No, 5.0, &spec)
                .map_or(0, |d| d.rows.len());
            match field {
                0 => records[kill].ws = None,
                1 => records[kill].no2 = None,
                _ => records[kill].no = None,
            }
            let after = build_design_matrix(&records, Pollutant::No, 5.0, &spec)
                .map_or(0, |d| d.rows.len());
            prop_assert!(after <= before);
        }
    }
}
