//! Virtual deposition process used as ground truth: protocol-driven open-loop
//! experiments and a stepwise interface for closed-loop simulation.
//!
//! Sensor noise is drawn from a counter-based generator keyed by
//! (seed, channel, sample index), so a sample's noise does not depend on how
//! the simulation was driven.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signals::{moving_average, read_table, write_table, TimeSeries, DEFAULT_SMOOTHING_WINDOW};
use crate::surrogate::Dataset;
use crate::sysid::{FirstOrderDelayModel, FirstOrderFilter};

/// Pyrometer reading used for samples below the measurable range.
pub const INVALID_MPT: f64 = 0.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineMap {
    pub intercept: f64,
    pub slope: f64,
}

impl AffineMap {
    pub fn apply(&self, x: f64) -> f64 {
        self.intercept + self.slope * x
    }
}

/// Melt-pool temperature: a thermal lag toward a layer- and power-dependent
/// level plus a slow correlated disturbance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MptModel {
    pub base: f64,
    pub per_layer: f64,
    /// °C per W of laser power away from `lp_reference`.
    pub lp_coupling: f64,
    pub lp_reference: f64,
    pub lag_s: f64,
    pub disturbance_std: f64,
    pub disturbance_correlation_s: f64,
    /// Temperature drop when printing directly on a cold substrate.
    pub cold_substrate_drop: f64,
}

impl Default for MptModel {
    fn default() -> Self {
        Self {
            base: 1000.0,
            per_layer: 60.0,
            lp_coupling: 0.375,
            lp_reference: 3000.0,
            lag_s: 0.5,
            disturbance_std: 120.0,
            disturbance_correlation_s: 1.5,
            cold_substrate_drop: 700.0,
        }
    }
}

/// Latent bead width: lagged MPW plus melt-pool-length and layer terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatentBw {
    pub lag_s: f64,
    pub mpw_weight: f64,
    pub mpl_weight: f64,
    pub layer_weight: f64,
    pub offset: f64,
}

impl Default for LatentBw {
    fn default() -> Self {
        Self { lag_s: 0.1, mpw_weight: 1.0, mpl_weight: 0.25, layer_weight: -0.05, offset: -2.3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseStd {
    pub mpw: f64,
    pub mpl: f64,
    pub mpt: f64,
    pub bw: f64,
}

impl Default for NoiseStd {
    fn default() -> Self {
        Self { mpw: 0.03, mpl: 0.6, mpt: 5.0, bw: 0.01 }
    }
}

impl NoiseStd {
    pub fn zero() -> Self {
        Self { mpw: 0.0, mpl: 0.0, mpt: 0.0, bw: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantConfig {
    pub dt: f64,
    pub seed: u64,
    /// Laser power (W) to MPW (mm).
    pub true_g_lp: FirstOrderDelayModel,
    /// mm per layer.
    pub true_g_n: f64,
    /// Travel speed (mm/s) to MPW (mm), acting on the absolute speed.
    pub ts_channel: FirstOrderDelayModel,
    pub mpw_offset: f64,
    pub mpt: MptModel,
    /// MPT (°C) to MPL (mm).
    pub mpl_model: AffineMap,
    pub pyrometer_floor: f64,
    pub pyrometer_ceiling: f64,
    pub latent_bw: LatentBw,
    pub noise_std: NoiseStd,
}

impl Default for PlantConfig {
    fn default() -> Self {
        Self {
            dt: 0.03,
            seed: 1,
            true_g_lp: FirstOrderDelayModel { k_gain: 2.5e-3, tw: 0.3, td: 0.06 },
            true_g_n: -0.11,
            ts_channel: FirstOrderDelayModel { k_gain: -0.25, tw: 0.8, td: 0.3 },
            mpw_offset: 0.0,
            mpt: MptModel::default(),
            mpl_model: AffineMap { intercept: 4.0, slope: 0.006 },
            pyrometer_floor: 500.0,
            pyrometer_ceiling: 2500.0,
            latent_bw: LatentBw::default(),
            noise_std: NoiseStd::default(),
        }
    }
}

impl PlantConfig {
    /// Default dynamics without sensor noise or thermal disturbance.
    pub fn noise_free() -> Self {
        Self::default().without_noise()
    }

    /// Same dynamics with sensor noise and the thermal disturbance removed.
    pub fn without_noise(mut self) -> Self {
        self.noise_std = NoiseStd::zero();
        self.mpt.disturbance_std = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let n = &self.noise_std;
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::invalid("plant dt must be positive"));
        }
        if [n.mpw, n.mpl, n.mpt, n.bw, self.mpt.disturbance_std].iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::invalid("noise standard deviations must be non-negative"));
        }
        for (name, m) in [("true_g_lp", &self.true_g_lp), ("ts_channel", &self.ts_channel)] {
            FirstOrderDelayModel::new(m.k_gain, m.tw, m.td).map_err(|e| Error::invalid(format!("{name}: {e}")))?;
        }
        if !(self.mpt.lag_s > 0.0) || !(self.latent_bw.lag_s > 0.0) || !(self.mpt.disturbance_correlation_s > 0.0) {
            return Err(Error::invalid("lag and correlation times must be positive"));
        }
        if !(self.pyrometer_floor < self.pyrometer_ceiling) {
            return Err(Error::invalid("pyrometer floor must lie below its ceiling"));
        }
        Ok(())
    }

    /// Noise-free MPL at steady state for a layer printed at `lp`.
    pub fn nominal_mpl(&self, lp: f64, layer: f64) -> f64 {
        self.mpl_model.apply(self.mpt_target(lp, layer, false))
    }

    fn mpt_target(&self, lp: f64, layer: f64, cold: bool) -> f64 {
        let m = &self.mpt;
        let drop = if cold { m.cold_substrate_drop } else { 0.0 };
        m.base + m.per_layer * (layer - 1.0).max(0.0) + m.lp_coupling * (lp - m.lp_reference) - drop
    }
}

/// One protocol segment: its extent along the path (or in time) and the process parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    #[serde(default)]
    pub length_mm: Option<f64>,
    #[serde(default)]
    pub duration_s: Option<f64>,
    /// Laser power, W.
    pub lp: f64,
    /// Travel speed, mm/s.
    pub ts: f64,
    /// Electrical pre-heat power, W.
    pub ep: f64,
    /// Wire feed speed, m/min.
    pub wfs: f64,
}

impl Segment {
    pub fn duration(&self) -> Result<f64> {
        let d = match (self.duration_s, self.length_mm) {
            (Some(d), _) => d,
            (None, Some(l)) => l / self.ts,
            (None, None) => return Err(Error::invalid("segment needs `length_mm` or `duration_s`")),
        };
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::invalid(format!("segment duration must be positive (got {d})")));
        }
        Ok(d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentProtocol {
    #[serde(default)]
    pub name: String,
    pub segments: Vec<Segment>,
    #[serde(default = "one")]
    pub layers: usize,
    /// Layer duration; defaults to the summed segment durations. A shorter
    /// value truncates the schedule, a longer one holds the last segment.
    #[serde(default)]
    pub seconds_per_layer: Option<f64>,
    #[serde(default)]
    pub cold_substrate: bool,
}

fn one() -> usize {
    1
}

impl ExperimentProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::invalid("protocol needs at least one segment"));
        }
        if self.layers == 0 {
            return Err(Error::invalid("protocol needs at least one layer"));
        }
        for (i, s) in self.segments.iter().enumerate() {
            s.duration().map_err(|e| Error::invalid(format!("segment {i}: {e}")))?;
            if ![s.lp, s.ts, s.ep, s.wfs].iter().all(|v| v.is_finite()) {
                return Err(Error::invalid(format!("segment {i}: parameters must be finite")));
            }
        }
        if let Some(t) = self.seconds_per_layer {
            if !(t > 0.0) {
                return Err(Error::invalid("seconds_per_layer must be positive"));
            }
        }
        Ok(())
    }

    pub fn layer_duration(&self) -> Result<f64> {
        match self.seconds_per_layer {
            Some(t) => Ok(t),
            None => self.segments.iter().map(Segment::duration).sum(),
        }
    }

    /// Process parameters and layer number at time `t` from the start of the print.
    pub fn input_at(&self, t: f64) -> Result<PlantInput> {
        let layer_time = self.layer_duration()?;
        let layer = ((t / layer_time).floor() as usize).min(self.layers - 1);
        let mut tau = t - layer as f64 * layer_time;
        let mut seg = self.segments[self.segments.len() - 1];
        for s in &self.segments {
            let d = s.duration()?;
            if tau < d {
                seg = *s;
                break;
            }
            tau -= d;
        }
        Ok(PlantInput { lp: seg.lp, ts: seg.ts, ep: seg.ep, wfs: seg.wfs, layer: (layer + 1) as f64 })
    }

    pub fn sample_count(&self, dt: f64) -> Result<usize> {
        Ok(((self.layers as f64 * self.layer_duration()?) / dt).round() as usize)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantInput {
    pub lp: f64,
    pub ts: f64,
    pub ep: f64,
    pub wfs: f64,
    pub layer: f64,
}

/// Measured signatures and the latent bead width at one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantOutput {
    pub mpw: f64,
    pub mpl: f64,
    pub mpt: f64,
    pub bw: f64,
}

#[derive(Clone, Copy)]
pub(crate) enum Channel {
    Mpw = 1,
    Mpl = 2,
    Mpt = 3,
    Bw = 4,
    Disturbance = 5,
}

/// Standard normal draw for (seed, channel, sample).
pub(crate) fn gaussian(seed: u64, channel: Channel, k: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(channel as u64);
    rng.set_word_pos(4 * k as u128);
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Stepwise virtual plant.
#[derive(Debug, Clone)]
pub struct Plant {
    cfg: PlantConfig,
    cold: bool,
    k: usize,
    lp_path: FirstOrderFilter,
    ts_path: FirstOrderFilter,
    mpt_state: f64,
    disturbance: f64,
    bw_state: f64,
}

impl Plant {
    /// Plant in equilibrium with `initial`.
    pub fn new(cfg: PlantConfig, cold_substrate: bool, initial: PlantInput) -> Result<Self> {
        cfg.validate()?;
        check_input(&initial)?;
        let lp_path = FirstOrderFilter::steady(&cfg.true_g_lp, cfg.dt, initial.lp);
        let ts_path = FirstOrderFilter::steady(&cfg.ts_channel, cfg.dt, initial.ts);
        let mpt_state = cfg.mpt_target(initial.lp, initial.layer, cold_substrate);
        let mut p = Self { cfg, cold: cold_substrate, k: 0, lp_path, ts_path, mpt_state, disturbance: 0.0, bw_state: 0.0 };
        p.bw_state = p.true_mpw(initial.layer);
        Ok(p)
    }

    pub fn config(&self) -> &PlantConfig {
        &self.cfg
    }

    pub fn sample_index(&self) -> usize {
        self.k
    }

    fn true_mpw(&self, layer: f64) -> f64 {
        self.cfg.mpw_offset + self.lp_path.output() + self.ts_path.output() + self.cfg.true_g_n * layer
    }

    fn noise(&self, channel: Channel, std: f64) -> f64 {
        if std == 0.0 {
            0.0
        } else {
            std * gaussian(self.cfg.seed, channel, self.k)
        }
    }

    /// Outputs at the current sample; EP and WFS do not enter.
    pub fn output(&self, input: &PlantInput) -> PlantOutput {
        let c = &self.cfg;
        let mpw_true = self.true_mpw(input.layer);
        let mpt_true = self.mpt_state + self.disturbance;
        let mpl_true = c.mpl_model.apply(mpt_true);
        let reading = mpt_true + self.noise(Channel::Mpt, c.noise_std.mpt);
        let mpt = if reading < c.pyrometer_floor { INVALID_MPT } else { reading.min(c.pyrometer_ceiling) };
        let b = &c.latent_bw;
        PlantOutput {
            mpw: mpw_true + self.noise(Channel::Mpw, c.noise_std.mpw),
            mpl: mpl_true + self.noise(Channel::Mpl, c.noise_std.mpl),
            mpt,
            bw: b.mpw_weight * self.bw_state
                + b.mpl_weight * mpl_true
                + b.layer_weight * input.layer
                + b.offset
                + self.noise(Channel::Bw, c.noise_std.bw),
        }
    }

    /// Outputs at the current sample, then advances one sample with `input` held.
    pub fn step(&mut self, input: &PlantInput) -> Result<PlantOutput> {
        check_input(input)?;
        let out = self.output(input);
        let c = &self.cfg;
        let mpw_true = self.true_mpw(input.layer);
        let a_bw = (-c.dt / c.latent_bw.lag_s).exp();
        self.bw_state = a_bw * self.bw_state + (1.0 - a_bw) * mpw_true;
        let a_t = (-c.dt / c.mpt.lag_s).exp();
        self.mpt_state = a_t * self.mpt_state + (1.0 - a_t) * c.mpt_target(input.lp, input.layer, self.cold);
        let phi = (-c.dt / c.mpt.disturbance_correlation_s).exp();
        let shock = self.noise(Channel::Disturbance, c.mpt.disturbance_std * (1.0 - phi * phi).sqrt());
        self.disturbance = phi * self.disturbance + shock;
        self.lp_path.step(input.lp);
        self.ts_path.step(input.ts);
        self.k += 1;
        Ok(out)
    }
}

fn check_input(input: &PlantInput) -> Result<()> {
    if ![input.lp, input.ts, input.ep, input.wfs, input.layer].iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("plant inputs must be finite"));
    }
    Ok(())
}

/// One closed-loop step: laser power command with the remaining inputs given.
pub fn plant_step(plant: &mut Plant, lp_command: f64, others: PlantInput, dt: f64) -> Result<PlantOutput> {
    if !(dt > 0.0) {
        return Err(Error::invalid("dt must be positive"));
    }
    if (dt - plant.cfg.dt).abs() > 1e-12 * plant.cfg.dt {
        return Err(Error::invalid(format!("dt {dt} does not match the plant's {}", plant.cfg.dt)));
    }
    if !lp_command.is_finite() {
        return Err(Error::invalid("laser power command must be finite"));
    }
    plant.step(&PlantInput { lp: lp_command, ..others })
}

/// Synchronized channels of one print.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRecord {
    pub lp: TimeSeries,
    pub ts: TimeSeries,
    pub ep: TimeSeries,
    pub wfs: TimeSeries,
    pub mpw: TimeSeries,
    pub mpl: TimeSeries,
    pub mpt: TimeSeries,
    pub layer: TimeSeries,
    pub bw: TimeSeries,
}

pub const RECORD_HEADERS: [&str; 9] =
    ["lp[W]", "ts[mm_s]", "ep[W]", "wfs[m_min]", "mpw[mm]", "mpl[mm]", "mpt[C]", "n", "bw[mm]"];

impl ExperimentRecord {
    pub fn len(&self) -> usize {
        self.lp.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lp.is_empty()
    }

    fn channels(&self) -> [&TimeSeries; 9] {
        [&self.lp, &self.ts, &self.ep, &self.wfs, &self.mpw, &self.mpl, &self.mpt, &self.layer, &self.bw]
    }

    /// Channel by short name (`lp`, `ts`, `ep`, `wfs`, `mpw`, `mpl`, `mpt`, `n`, `bw`).
    pub fn channel(&self, name: &str) -> Option<&TimeSeries> {
        let i = RECORD_HEADERS.iter().position(|h| crate::signals::split_header(h).0 == name)?;
        Some(self.channels()[i])
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_table(&RECORD_HEADERS, &self.channels(), writer)
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let table = read_table(reader)?;
        let get = |name: &str| table.series_by_name(name);
        let r = Self {
            lp: get("lp")?,
            ts: get("ts")?,
            ep: get("ep")?,
            wfs: get("wfs")?,
            mpw: get("mpw")?,
            mpl: get("mpl")?,
            mpt: get("mpt")?,
            layer: get("n")?,
            bw: get("bw")?,
        };
        Ok(r)
    }
}

/// Drives the plant through `proto` from equilibrium with its first sample.
pub fn run_open_loop(cfg: &PlantConfig, proto: &ExperimentProtocol) -> Result<ExperimentRecord> {
    proto.validate()?;
    let n = proto.sample_count(cfg.dt)?;
    if n == 0 {
        return Err(Error::invalid("protocol is shorter than one sample"));
    }
    let inputs: Vec<PlantInput> = (0..n).map(|k| proto.input_at(k as f64 * cfg.dt)).collect::<Result<_>>()?;
    let mut plant = Plant::new(cfg.clone(), proto.cold_substrate, inputs[0])?;
    let outputs: Vec<PlantOutput> = inputs.iter().map(|u| plant.step(u)).collect::<Result<_>>()?;
    let series = |f: &dyn Fn(usize) -> f64, unit: &str| TimeSeries::new(0.0, cfg.dt, (0..n).map(f).collect(), unit);
    Ok(ExperimentRecord {
        lp: series(&|k| inputs[k].lp, "W")?,
        ts: series(&|k| inputs[k].ts, "mm_s")?,
        ep: series(&|k| inputs[k].ep, "W")?,
        wfs: series(&|k| inputs[k].wfs, "m_min")?,
        mpw: series(&|k| outputs[k].mpw, "mm")?,
        mpl: series(&|k| outputs[k].mpl, "mm")?,
        mpt: series(&|k| outputs[k].mpt, "C")?,
        layer: series(&|k| inputs[k].layer, "")?,
        bw: series(&|k| outputs[k].bw, "mm")?,
    })
}

/// Samples whose whole smoothing window has a valid pyrometer reading.
pub fn valid_rows(record: &ExperimentRecord) -> Result<Vec<usize>> {
    let w = DEFAULT_SMOOTHING_WINDOW;
    let (before, after) = ((w - 1) / 2, w / 2);
    let mpt = record.mpt.values();
    let n = mpt.len();
    let rows: Vec<usize> = (0..n)
        .filter(|&k| {
            let lo = k.saturating_sub(before);
            let hi = (k + after).min(n - 1);
            mpt[lo..=hi].iter().all(|&v| v != INVALID_MPT)
        })
        .collect();
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(rows)
}

fn unit_of(name: &str) -> &'static str {
    match name {
        "lp" | "ep" => "W",
        "ts" => "mm_s",
        "wfs" => "m_min",
        "mpw" | "mpl" | "bw" => "mm",
        "mpt" => "C",
        _ => "",
    }
}

/// Rows of the named channels at every valid sample. Continuous channels are
/// smoothed with the default moving-average window; the layer number is used as is.
pub fn make_dataset(record: &ExperimentRecord, features: &[&str]) -> Result<Dataset> {
    let rows = valid_rows(record)?;
    let columns: Vec<Vec<f64>> = features
        .iter()
        .map(|&name| {
            let s = record.channel(name).ok_or_else(|| Error::invalid(format!("record has no channel `{name}`")))?;
            if name == "n" {
                Ok(s.values().to_vec())
            } else {
                Ok(moving_average(s, DEFAULT_SMOOTHING_WINDOW)?.into_values())
            }
        })
        .collect::<Result<_>>()?;
    let inputs = rows.iter().map(|&k| columns.iter().map(|c| c[k]).collect()).collect();
    let target = rows.iter().map(|&k| record.bw.values()[k]).collect();
    Dataset::new(
        features.iter().map(|s| s.to_string()).collect(),
        features.iter().map(|s| unit_of(s).to_string()).collect(),
        inputs,
        target,
    )
}

/// (MPW, MPL, MPT, n) to BW rows.
pub fn make_f2_training_set(record: &ExperimentRecord) -> Result<Dataset> {
    make_dataset(record, &["mpw", "mpl", "mpt", "n"])
}
