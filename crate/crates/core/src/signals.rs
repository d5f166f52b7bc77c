//! Uniformly sampled signals and the preprocessing chain applied to them:
//! synchronization, smoothing, zero-phase low-pass filtering, mean removal,
//! min-max scaling, the logarithmic output transform and fit metrics.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sampling period of the melt-pool and process channels, seconds.
pub const DEFAULT_SAMPLE_DT: f64 = 0.03;
/// Smoothing window applied to melt-pool signatures.
pub const DEFAULT_SMOOTHING_WINDOW: usize = 8;
/// Low-pass cutoff used before multi-layer identification, Hz.
pub const DEFAULT_LOWPASS_HZ: f64 = 13.0;

/// A uniformly sampled scalar signal. Sample `k` sits at `t0 + k * dt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    t0: f64,
    dt: f64,
    values: Vec<f64>,
    unit: String,
}

impl TimeSeries {
    pub fn new(t0: f64, dt: f64, values: Vec<f64>, unit: impl Into<String>) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::invalid(format!("sample period must be positive, got {dt}")));
        }
        if !t0.is_finite() {
            return Err(Error::invalid("start time must be finite"));
        }
        if values.is_empty() {
            return Err(Error::invalid("a time series needs at least one sample"));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("sample {k} is not finite")));
        }
        Ok(Self { t0, dt, values, unit: unit.into() })
    }

    /// Same grid and unit as `self`, new samples.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.values.len() {
            return Err(Error::invalid("replacement samples must keep the series length"));
        }
        Self::new(self.t0, self.dt, values, self.unit.clone())
    }

    pub fn constant(t0: f64, dt: f64, len: usize, value: f64, unit: &str) -> Result<Self> {
        Self::new(t0, dt, vec![value; len], unit)
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn unit(&self) -> &str {
        &self.unit
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }

    pub fn end_time(&self) -> f64 {
        self.time(self.values.len() - 1)
    }

    pub fn mean(&self) -> f64 {
        mean(&self.values)
    }

    /// True when `other` lives on exactly the same sample grid.
    pub fn same_grid(&self, other: &TimeSeries) -> bool {
        self.t0 == other.t0 && self.dt == other.dt && self.len() == other.len()
    }

    /// Sub-series `[start, end)` with the start time moved accordingly.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(Error::invalid(format!(
                "slice {start}..{end} out of range for length {}",
                self.len()
            )));
        }
        Self::new(self.time(start), self.dt, self.values[start..end].to_vec(), self.unit.clone())
    }

    /// Linear interpolation at time `t`, clamped to the end samples.
    pub fn interpolate(&self, t: f64) -> f64 {
        let pos = (t - self.t0) / self.dt;
        if pos <= 0.0 {
            return self.values[0];
        }
        let last = self.values.len() - 1;
        if pos >= last as f64 {
            return self.values[last];
        }
        let i = pos.floor() as usize;
        let frac = pos - i as f64;
        if frac == 0.0 {
            return self.values[i];
        }
        self.values[i] + frac * (self.values[i + 1] - self.values[i])
    }
}

pub(crate) fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Centered moving average with truncated windows at both edges.
///
/// A window of `w` samples spans `(w - 1) / 2` samples before the center and
/// `w / 2` after it, so even windows lean one sample forward.
pub fn moving_average(s: &TimeSeries, window: usize) -> Result<TimeSeries> {
    if window < 1 || window > s.len() {
        return Err(Error::invalid(format!(
            "window {window} must lie in 1..={}",
            s.len()
        )));
    }
    let before = (window - 1) / 2;
    let after = window / 2;
    let v = s.values();
    let mut prefix = Vec::with_capacity(v.len() + 1);
    prefix.push(0.0);
    for x in v {
        prefix.push(prefix.last().unwrap() + x);
    }
    let out = (0..v.len())
        .map(|k| {
            let lo = k.saturating_sub(before);
            let hi = (k + after).min(v.len() - 1);
            // Summing directly keeps constant series exact; prefix sums are used for long windows.
            if hi - lo < 32 {
                v[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
            } else {
                (prefix[hi + 1] - prefix[lo]) / (hi - lo + 1) as f64
            }
        })
        .collect();
    s.with_values(out)
}

/// Smoothing coefficient of the one-pole section whose forward-backward
/// magnitude response is -3 dB at `cutoff_hz`.
fn one_pole_alpha(cutoff_hz: f64, dt: f64) -> f64 {
    let omega = 2.0 * std::f64::consts::PI * cutoff_hz * dt;
    // Each pass contributes |H|^2 = 1/sqrt(2) at the cutoff.
    let g = std::f64::consts::FRAC_1_SQRT_2;
    let c = 1.0 - g * omega.cos();
    let pole = (c - (c * c - (1.0 - g) * (1.0 - g)).sqrt()) / (1.0 - g);
    1.0 - pole
}

/// Zero-phase low-pass: a one-pole exponential filter run forward then backward.
pub fn lowpass(s: &TimeSeries, cutoff_hz: f64) -> Result<TimeSeries> {
    let nyquist = 0.5 / s.dt();
    if !(cutoff_hz > 0.0) || cutoff_hz >= nyquist {
        return Err(Error::invalid(format!(
            "cutoff {cutoff_hz} Hz must lie in (0, {nyquist}) Hz"
        )));
    }
    let alpha = one_pole_alpha(cutoff_hz, s.dt());
    let mut out = s.values().to_vec();
    let mut state = out[0];
    for x in out.iter_mut() {
        state += alpha * (*x - state);
        *x = state;
    }
    let mut state = *out.last().unwrap();
    for x in out.iter_mut().rev() {
        state += alpha * (*x - state);
        *x = state;
    }
    s.with_values(out)
}

/// Resamples every series onto a shared grid covering their common time span.
pub fn resample_sync(series: &[TimeSeries], dt_target: f64) -> Result<Vec<TimeSeries>> {
    if series.is_empty() {
        return Err(Error::invalid("nothing to synchronize"));
    }
    if !(dt_target > 0.0) {
        return Err(Error::invalid("target sample period must be positive"));
    }
    let start = series.iter().map(TimeSeries::t0).fold(f64::NEG_INFINITY, f64::max);
    let end = series.iter().map(TimeSeries::end_time).fold(f64::INFINITY, f64::min);
    if end < start {
        return Err(Error::EmptyOverlap);
    }
    let len = ((end - start) / dt_target * (1.0 + 1e-12)).floor() as usize + 1;
    series
        .iter()
        .map(|s| {
            let values = (0..len).map(|k| s.interpolate(start + k as f64 * dt_target)).collect();
            TimeSeries::new(start, dt_target, values, s.unit())
        })
        .collect()
}

/// Subtracts the sample mean; adding the returned mean back restores the input.
pub fn remove_mean(s: &TimeSeries) -> (TimeSeries, f64) {
    let m = s.mean();
    let mut centered: Vec<f64> = s.values().iter().map(|x| x - m).collect();
    // A second pass removes the rounding residue of the first.
    let residue = mean(&centered);
    centered.iter_mut().for_each(|x| *x -= residue);
    (s.with_values(centered).expect("same length"), m + residue)
}

/// Affine map of a channel onto [0, 1], recorded so it can be undone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinMax {
    pub min: f64,
    pub max: f64,
}

impl MinMax {
    pub fn fit(values: &[f64]) -> Self {
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self { min, max }
    }

    pub fn identity() -> Self {
        Self { min: 0.0, max: 1.0 }
    }

    pub fn is_degenerate(&self) -> bool {
        self.min == self.max
    }

    pub fn range(&self) -> f64 {
        self.max - self.min
    }

    pub fn apply(&self, x: f64) -> f64 {
        if self.is_degenerate() {
            0.0
        } else {
            (x - self.min) / (self.max - self.min)
        }
    }

    pub fn invert(&self, z: f64) -> f64 {
        self.min + z * (self.max - self.min)
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.min && x <= self.max
    }
}

pub fn normalize_minmax(s: &TimeSeries) -> (TimeSeries, f64, f64) {
    let mm = MinMax::fit(s.values());
    let out = s.values().iter().map(|&x| mm.apply(x)).collect();
    (s.with_values(out).expect("same length"), mm.min, mm.max)
}

pub fn denormalize_minmax(s: &TimeSeries, min: f64, max: f64) -> TimeSeries {
    let mm = MinMax { min, max };
    let out = s.values().iter().map(|&z| mm.invert(z)).collect();
    s.with_values(out).expect("same length")
}

pub fn log_transform(s: &TimeSeries) -> Result<TimeSeries> {
    let out = log_values(s.values())?;
    s.with_values(out)
}

pub(crate) fn log_values(values: &[f64]) -> Result<Vec<f64>> {
    values
        .iter()
        .enumerate()
        .map(|(index, &value)| {
            if value > 0.0 {
                Ok(value.ln())
            } else {
                Err(Error::Domain { index, value })
            }
        })
        .collect()
}

pub fn exp_transform(s: &TimeSeries) -> TimeSeries {
    let out = s.values().iter().map(|x| x.exp()).collect();
    s.with_values(out).expect("same length")
}

/// Goodness-of-fit summary. `bf_percent` is the coefficient of determination
/// expressed in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitMetrics {
    pub rmse: f64,
    pub mae: f64,
    pub r2: f64,
    pub bf_percent: f64,
}

pub fn fit_metrics(predicted: &TimeSeries, actual: &TimeSeries) -> Result<FitMetrics> {
    metrics_from_slices(predicted.values(), actual.values())
}

pub fn metrics_from_slices(predicted: &[f64], actual: &[f64]) -> Result<FitMetrics> {
    if predicted.len() != actual.len() {
        return Err(Error::invalid(format!(
            "prediction has {} samples, target has {}",
            predicted.len(),
            actual.len()
        )));
    }
    if actual.len() < 2 {
        return Err(Error::invalid("fit metrics need at least two samples"));
    }
    let n = actual.len() as f64;
    let target_mean = mean(actual);
    let (mut sse, mut sae, mut sst) = (0.0, 0.0, 0.0);
    for (p, a) in predicted.iter().zip(actual) {
        let e = a - p;
        sse += e * e;
        sae += e.abs();
        sst += (a - target_mean) * (a - target_mean);
    }
    if sst == 0.0 {
        return Err(Error::UndefinedR2);
    }
    let r2 = 1.0 - sse / sst;
    Ok(FitMetrics {
        rmse: (sse / n).sqrt(),
        mae: sae / n,
        r2,
        bf_percent: 100.0 * r2,
    })
}

/// Writes `t,<name>[unit]` followed by one row per sample.
pub fn write_series_csv<W: Write>(s: &TimeSeries, name: &str, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["t".to_string(), format!("{name}[{}]", s.unit())])
        .map_err(csv_error)?;
    for (k, v) in s.values().iter().enumerate() {
        w.write_record([s.time(k).to_string(), v.to_string()]).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a two-column series file, returning the channel name and the series.
pub fn read_series_csv<R: Read>(reader: R) -> Result<(String, TimeSeries)> {
    let table = read_table(reader)?;
    if table.headers.len() != 2 {
        return Err(Error::Parse(format!(
            "expected 2 columns, found {}",
            table.headers.len()
        )));
    }
    let (name, unit) = split_header(&table.headers[1]);
    let series = table.series(1, &unit)?;
    Ok((name, series))
}

/// Splits `mpw[mm]` into (`mpw`, `mm`); headers without brackets get an empty unit.
pub fn split_header(header: &str) -> (String, String) {
    match (header.find('['), header.ends_with(']')) {
        (Some(open), true) => (
            header[..open].trim().to_string(),
            header[open + 1..header.len() - 1].to_string(),
        ),
        _ => (header.trim().to_string(), String::new()),
    }
}

pub(crate) fn csv_error(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}

/// Column-oriented numeric CSV with a leading `t` column.
#[derive(Debug, Clone)]
pub struct Table {
    pub headers: Vec<String>,
    pub columns: Vec<Vec<f64>>,
}

impl Table {
    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.headers
            .iter()
            .position(|h| h == name || split_header(h).0 == name)
            .map(|i| self.columns[i].as_slice())
    }

    /// Start time and sample period implied by the `t` column.
    pub fn grid(&self) -> Result<(f64, f64)> {
        let t = &self.columns[0];
        if t.len() < 2 {
            return Err(Error::Parse("need at least two rows to infer the sample period".into()));
        }
        let dt = (t[t.len() - 1] - t[0]) / (t.len() - 1) as f64;
        if !(dt > 0.0) {
            return Err(Error::Parse("time column must be increasing".into()));
        }
        for (k, pair) in t.windows(2).enumerate() {
            let step = pair[1] - pair[0];
            if ((step - dt) / dt).abs() > 1e-9 && (step - dt).abs() > 1e-9 * t[k + 1].abs().max(1.0) {
                return Err(Error::Parse(format!("non-uniform sampling at row {}", k + 2)));
            }
        }
        Ok((t[0], dt))
    }

    pub fn series(&self, index: usize, unit: &str) -> Result<TimeSeries> {
        let (t0, dt) = self.grid()?;
        TimeSeries::new(t0, dt, self.columns[index].clone(), unit)
    }

    pub fn series_by_name(&self, name: &str) -> Result<TimeSeries> {
        let index = self
            .headers
            .iter()
            .position(|h| split_header(h).0 == name)
            .ok_or_else(|| Error::Parse(format!("missing column `{name}`")))?;
        let unit = split_header(&self.headers[index]).1;
        self.series(index, &unit)
    }
}

pub fn read_table<R: Read>(reader: R) -> Result<Table> {
    let mut r = csv::Reader::from_reader(reader);
    let headers: Vec<String> = r.headers().map_err(csv_error)?.iter().map(str::to_string).collect();
    if headers.first().map(String::as_str) != Some("t") {
        return Err(Error::Parse("first column must be `t`".into()));
    }
    let mut columns = vec![Vec::new(); headers.len()];
    for (row, record) in r.records().enumerate() {
        let record = record.map_err(csv_error)?;
        for (col, field) in record.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::Parse(format!("row {}, column `{}`: `{field}` is not a number", row + 2, headers[col]))
            })?;
            columns[col].push(v);
        }
    }
    if columns[0].is_empty() {
        return Err(Error::Parse("no data rows".into()));
    }
    Ok(Table { headers, columns })
}

/// Writes synchronized series as one CSV with a shared `t` column.
pub fn write_table<W: Write>(headers: &[&str], series: &[&TimeSeries], writer: W) -> Result<()> {
    if headers.len() != series.len() {
        return Err(Error::invalid("one header per column required"));
    }
    let first = series.first().ok_or_else(|| Error::invalid("no columns to write"))?;
    if series.iter().any(|s| !s.same_grid(first)) {
        return Err(Error::invalid("columns must share one sample grid"));
    }
    let mut w = csv::Writer::from_writer(writer);
    let mut head = vec!["t".to_string()];
    head.extend(headers.iter().map(|h| h.to_string()));
    w.write_record(&head).map_err(csv_error)?;
    for k in 0..first.len() {
        let mut row = vec![first.time(k).to_string()];
        row.extend(series.iter().map(|s| s.values()[k].to_string()));
        w.write_record(&row).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn ts(values: &[f64]) -> TimeSeries {
        TimeSeries::new(0.0, 0.03, values.to_vec(), "mm").unwrap()
    }

    fn naive_moving_average(v: &[f64], w: usize) -> Vec<f64> {
        let before = (w - 1) as isize / 2;
        let after = (w / 2) as isize;
        (0..v.len() as isize)
            .map(|k| {
                let mut sum = 0.0;
                let mut count = 0;
                for j in (k - before)..=(k + after) {
                    if j >= 0 && (j as usize) < v.len() {
                        sum += v[j as usize];
                        count += 1;
                    }
                }
                sum / count as f64
            })
            .collect()
    }

    #[test]
    fn rejects_bad_series() {
        assert!(TimeSeries::new(0.0, 0.0, vec![1.0], "").is_err());
        assert!(TimeSeries::new(0.0, 0.1, vec![], "").is_err());
        assert!(TimeSeries::new(0.0, 0.1, vec![f64::NAN], "").is_err());
    }

    #[test]
    fn moving_average_constant_and_impulse() {
        let c = moving_average(&ts(&[5.0; 4]), 3).unwrap();
        assert_eq!(c.values(), &[5.0; 4]);
        let imp = moving_average(&ts(&[0.0, 0.0, 1.0, 0.0, 0.0]), 3).unwrap();
        let third = 1.0 / 3.0;
        for (got, want) in imp.values().iter().zip([0.0, third, third, third, 0.0]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-15);
        }
    }

    #[test]
    fn moving_average_window_bounds() {
        assert!(moving_average(&ts(&[1.0, 2.0]), 0).is_err());
        assert!(moving_average(&ts(&[1.0, 2.0]), 3).is_err());
        assert_eq!(DEFAULT_SMOOTHING_WINDOW, 8);
    }

    #[test]
    fn moving_average_long_window_matches_naive() {
        let v: Vec<f64> = (0..200).map(|k| ((k * 37 % 101) as f64).sin()).collect();
        for w in [1, 2, 8, 33, 64, 200] {
            let got = moving_average(&ts(&v), w).unwrap();
            for (g, e) in got.values().iter().zip(naive_moving_average(&v, w)) {
                assert_abs_diff_eq!(*g, e, epsilon = 1e-12);
            }
        }
    }

    fn sinusoid_amplitude_ratio(freq: f64, cutoff: f64, dt: f64) -> f64 {
        let n = 20_000;
        let input: Vec<f64> = (0..n)
            .map(|k| (2.0 * std::f64::consts::PI * freq * k as f64 * dt).sin())
            .collect();
        let out = lowpass(&TimeSeries::new(0.0, dt, input.clone(), "").unwrap(), cutoff).unwrap();
        // RMS over the middle half avoids edge transients.
        let mid = n / 4..3 * n / 4;
        let rms = |v: &[f64]| (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
        rms(&out.values()[mid.clone()]) / rms(&input[mid])
    }

    #[test]
    fn lowpass_passes_dc_and_attenuates_high_band() {
        let dc = lowpass(&ts(&[2.0; 50]), DEFAULT_LOWPASS_HZ).unwrap();
        for v in dc.values() {
            assert_abs_diff_eq!(*v, 2.0, epsilon = 1e-9);
        }
        let (cutoff, dt) = (10.0, 0.001);
        assert!(sinusoid_amplitude_ratio(0.1 * cutoff, cutoff, dt) > 0.95);
        assert!(sinusoid_amplitude_ratio(10.0 * cutoff, cutoff, dt) < 0.2);
        let at_cutoff = sinusoid_amplitude_ratio(cutoff, cutoff, dt);
        assert_abs_diff_eq!(at_cutoff, std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-2);
    }

    #[test]
    fn lowpass_rejects_cutoff_at_nyquist() {
        let s = ts(&[1.0; 10]);
        assert!(lowpass(&s, 0.5 / 0.03).is_err());
        assert!(lowpass(&s, 0.0).is_err());
        assert!(lowpass(&s, DEFAULT_LOWPASS_HZ).is_ok());
    }

    #[test]
    fn lowpass_has_no_phase_lag() {
        let dt = 0.001;
        let n = 4000;
        let input: Vec<f64> = (0..n).map(|k| (2.0 * std::f64::consts::PI * 3.0 * k as f64 * dt).sin()).collect();
        let out = lowpass(&TimeSeries::new(0.0, dt, input.clone(), "").unwrap(), 10.0).unwrap();
        let xcorr = |lag: isize| {
            (1000..3000)
                .map(|k| input[k] * out.values()[(k as isize + lag) as usize])
                .sum::<f64>()
        };
        let best = (-50..=50).max_by(|a, b| xcorr(*a).total_cmp(&xcorr(*b))).unwrap();
        assert_eq!(best, 0);
    }

    #[test]
    fn resample_identity_and_interpolation() {
        let a = ts(&[1.0, 2.0, 4.0, 8.0]);
        let out = resample_sync(&[a.clone(), a.clone()], a.dt()).unwrap();
        assert_eq!(out[0], a);
        assert_eq!(out[1], a);

        let fine_vals: Vec<f64> = (0..301).map(|k| (k as f64 * 0.01).powi(2)).collect();
        let fine = TimeSeries::new(0.0, 0.01, fine_vals, "W").unwrap();
        let other = TimeSeries::new(0.5, 0.02, vec![0.0; 50], "W").unwrap();
        let out = resample_sync(&[fine.clone(), other], DEFAULT_SAMPLE_DT).unwrap();
        assert_eq!(out[0].t0(), 0.5);
        assert!(out[0].same_grid(&out[1]));
        for k in 0..out[0].len() {
            let t = 0.5 + k as f64 * 0.03;
            let pos = t / 0.01;
            let i = pos.floor() as usize;
            let f = pos - i as f64;
            let v = fine.values();
            let want = if i + 1 < v.len() { v[i] * (1.0 - f) + v[i + 1] * f } else { v[i] };
            assert_abs_diff_eq!(out[0].values()[k], want, epsilon = 1e-12);
        }
    }

    #[test]
    fn resample_without_overlap_fails() {
        let a = TimeSeries::new(0.0, 0.1, vec![0.0; 10], "").unwrap();
        let b = TimeSeries::new(5.0, 0.1, vec![0.0; 10], "").unwrap();
        assert!(matches!(resample_sync(&[a, b], 0.1), Err(Error::EmptyOverlap)));
    }

    #[test]
    fn mean_removal() {
        let (c, m) = remove_mean(&ts(&[1.0, 2.0, 3.0]));
        assert_eq!(c.values(), &[-1.0, 0.0, 1.0]);
        assert_eq!(m, 2.0);
        let (z, m0) = remove_mean(&ts(&[-1.0, 0.0, 1.0]));
        assert_eq!(z.values(), &[-1.0, 0.0, 1.0]);
        assert_eq!(m0, 0.0);
    }

    #[test]
    fn normalization_cases() {
        let (n, lo, hi) = normalize_minmax(&ts(&[2.0, 4.0, 6.0]));
        assert_eq!(n.values(), &[0.0, 0.5, 1.0]);
        assert_eq!((lo, hi), (2.0, 6.0));
        let (n, lo, hi) = normalize_minmax(&ts(&[7.0, 7.0]));
        assert_eq!(n.values(), &[0.0, 0.0]);
        assert_eq!(lo, hi);
    }

    #[test]
    fn log_pair() {
        let e = std::f64::consts::E;
        let l = log_transform(&ts(&[1.0, e, e * e])).unwrap();
        for (g, w) in l.values().iter().zip([0.0, 1.0, 2.0]) {
            assert_abs_diff_eq!(*g, w, epsilon = 1e-15);
        }
        match log_transform(&ts(&[1.0, 0.0, 2.0])) {
            Err(Error::Domain { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected domain error, got {other:?}"),
        }
    }

    #[test]
    fn metrics_edge_cases() {
        let a = ts(&[1.0, 2.0, 4.0]);
        let m = fit_metrics(&a, &a).unwrap();
        assert_eq!((m.rmse, m.mae, m.r2, m.bf_percent), (0.0, 0.0, 1.0, 100.0));
        let flat = ts(&[7.0 / 3.0; 3]);
        let m = fit_metrics(&flat, &a).unwrap();
        assert_abs_diff_eq!(m.r2, 0.0, epsilon = 1e-15);
        assert!(matches!(fit_metrics(&a, &ts(&[3.0; 3])), Err(Error::UndefinedR2)));
        assert!(fit_metrics(&a, &ts(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let s = TimeSeries::new(1.5, 0.03, vec![1.25, -3.0, 7.5], "W").unwrap();
        let mut buf = Vec::new();
        write_series_csv(&s, "lp", &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,lp[W]\n"));
        let (name, back) = read_series_csv(buf.as_slice()).unwrap();
        assert_eq!(name, "lp");
        assert_eq!(back.unit(), "W");
        assert_eq!(back.values(), s.values());
        assert!((back.dt() - s.dt()).abs() < 1e-12);
    }

    #[test]
    fn csv_rejects_irregular_sampling() {
        let text = "t,x[mm]\n0,1\n0.1,2\n0.25,3\n";
        assert!(matches!(read_series_csv(text.as_bytes()), Err(Error::Parse(_))));
    }
}
