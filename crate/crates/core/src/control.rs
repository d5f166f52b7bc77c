//! Discrete PID control of laser power, tuned on the linearized loop and run
//! in two arrangements: feeding back the predicted bead width (property
//! control) or the melt-pool width alone (signature control).

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{nelder_mead, SimplexOptions};
use crate::plant::{self, Plant, PlantConfig, PlantInput};
use crate::signals::{write_table, TimeSeries};
use crate::surrogate::RsmModel;
use crate::sysid::{CompositeF1, FirstOrderDelayModel, FirstOrderFilter, FittedCompositeF1};

/// Parallel-form gains: `u = kp*e + ki*∫e + kd*de/dt`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
}

impl PidGains {
    pub fn validate(&self) -> Result<()> {
        if ![self.kp, self.ki, self.kd].iter().all(|g| g.is_finite() && *g >= 0.0) {
            return Err(Error::invalid(format!("PID gains must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }

    /// Time constant of the measurement filter in the derivative path.
    pub fn derivative_filter(&self, dt: f64) -> f64 {
        let td = if self.kp > 0.0 { self.kd / self.kp } else { 0.0 };
        (td / 10.0).max(dt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActuatorLimits {
    pub min: f64,
    pub max: f64,
}

impl Default for ActuatorLimits {
    fn default() -> Self {
        Self { min: 2000.0, max: 4000.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PidState {
    /// Command produced with zero error and zero integral.
    pub bias: f64,
    pub integral: f64,
    prev_error: Option<f64>,
    filtered: Option<f64>,
}

impl PidState {
    pub fn new(bias: f64) -> Self {
        Self { bias, integral: 0.0, prev_error: None, filtered: None }
    }
}

/// One controller update. The derivative acts on the filtered measurement,
/// the integral is trapezoidal and is held while the output is clamped.
pub fn pid_step(
    state: &PidState,
    setpoint: f64,
    measurement: f64,
    gains: &PidGains,
    dt: f64,
    limits: ActuatorLimits,
) -> Result<(PidState, f64)> {
    if !(dt > 0.0) {
        return Err(Error::invalid("dt must be positive"));
    }
    if !setpoint.is_finite() || !measurement.is_finite() {
        return Err(Error::invalid("setpoint and measurement must be finite"));
    }
    let e = setpoint - measurement;
    let e_prev = state.prev_error.unwrap_or(e);
    let integral = state.integral + 0.5 * dt * (e + e_prev);

    let tf = gains.derivative_filter(dt);
    let prev_f = state.filtered.unwrap_or(measurement);
    let filtered = prev_f + dt / (tf + dt) * (measurement - prev_f);
    let derivative = -(filtered - prev_f) / dt;

    let unclamped = state.bias + gains.kp * e + gains.ki * integral + gains.kd * derivative;
    let command = unclamped.clamp(limits.min, limits.max);
    let integral = if command != unclamped { state.integral } else { integral };
    Ok((PidState { bias: state.bias, integral, prev_error: Some(e), filtered: Some(filtered) }, command))
}

/// Local sensitivities of a response surface at an operating point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linearization {
    pub point: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    /// Some coordinate lies outside the range the surface was fitted on.
    pub extrapolating: bool,
}

/// Central differences with a step of 1e-4 on the normalized scale of each feature.
pub fn linearize_f2(f2: &RsmModel, point: &[f64]) -> Result<Linearization> {
    let value = f2.predict(point)?;
    let h = 1e-4;
    let gradient = (0..point.len())
        .map(|j| {
            let range = f2.normalizers[j].range();
            if range == 0.0 {
                return Ok(0.0);
            }
            let mut up = point.to_vec();
            let mut down = point.to_vec();
            up[j] += h * range;
            down[j] -= h * range;
            Ok((f2.predict(&up)? - f2.predict(&down)?) / (2.0 * h * range))
        })
        .collect::<Result<_>>()?;
    Ok(Linearization { point: point.to_vec(), value, gradient, extrapolating: f2.is_extrapolating(point) })
}

/// MPW at which the surface predicts `target` with MPL and layer held fixed.
pub fn mpw_for_bw(f2: &RsmModel, target: f64, mpl: f64, layer: f64) -> Result<f64> {
    let range = f2.normalizers[0];
    let span = range.range().max(1e-6);
    let (mut lo, mut hi) = (range.min - span, range.max + span);
    let f = |m: f64| f2.predict(&[m, mpl, layer]).map(|v| v - target);
    let (mut flo, fhi) = (f(lo)?, f(hi)?);
    if flo.signum() == fhi.signum() {
        return Err(Error::invalid(format!("bead width {target} mm is not reachable by varying MPW")));
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        let fm = f(mid)?;
        if fm.signum() == flo.signum() {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// First-order-plus-dead-time loop seen by the controller: command in W,
/// controlled variable in mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoopModel {
    pub gain: f64,
    pub tw: f64,
    pub td: f64,
    pub dt: f64,
}

impl LoopModel {
    /// Laser-power transfer function scaled by the sensitivity of the
    /// controlled variable to MPW.
    pub fn new(g_lp: &FirstOrderDelayModel, sensitivity: f64, dt: f64) -> Result<Self> {
        let m = Self { gain: g_lp.k_gain * sensitivity, tw: g_lp.tw, td: g_lp.td, dt };
        if !(m.gain.is_finite() && m.gain > 0.0) || !(dt > 0.0) {
            return Err(Error::invalid("loop model needs a positive gain and dt"));
        }
        Ok(m)
    }
}

/// Features of the bead-width surface used inside the loop.
pub const LOOP_F2_INPUTS: [&str; 3] = ["mpw", "mpl", "n"];

/// Operating point where the controlled variable equals `target` at layer 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub scenario: Scenario,
    pub target: f64,
    pub linearization: Linearization,
    pub loop_model: LoopModel,
}

/// Linearizes the loop for `scenario`: the controller sees F2's MPW
/// sensitivity when it feeds back bead width and unit sensitivity otherwise.
pub fn operating_point(
    scenario: Scenario,
    g_lp: &FirstOrderDelayModel,
    f2: &RsmModel,
    mpl_layer1: f64,
    target: f64,
    dt: f64,
) -> Result<OperatingPoint> {
    let mpw = match scenario {
        Scenario::PropertyControlled => mpw_for_bw(f2, target, mpl_layer1, 1.0)?,
        Scenario::SignatureControlled => target,
    };
    let linearization = linearize_f2(f2, &[mpw, mpl_layer1, 1.0])?;
    let sensitivity = match scenario {
        Scenario::PropertyControlled => linearization.gradient[0],
        Scenario::SignatureControlled => 1.0,
    };
    let loop_model = LoopModel::new(g_lp, sensitivity, dt)?;
    Ok(OperatingPoint { scenario, target, linearization, loop_model })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveWeights {
    /// Per percent of overshoot.
    pub overshoot: f64,
    /// Per second of 10-90 % rise time.
    pub rise_time: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self { overshoot: 1.0, rise_time: 10.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub overshoot_pct: f64,
    pub rise_time_s: f64,
    /// Within ±5 % of the final value over the last fifth of the horizon.
    pub settled: bool,
    pub peak_abs: f64,
}

const STEP_HORIZON_S: f64 = 5.0;

/// Unit setpoint step on the linearized loop without actuator limits.
pub fn step_response(model: &LoopModel, gains: &PidGains) -> Result<Vec<f64>> {
    gains.validate()?;
    let n = (STEP_HORIZON_S / model.dt).round() as usize;
    let g = FirstOrderDelayModel::new(model.gain, model.tw, model.td)?;
    let mut plant = FirstOrderFilter::at_rest(&g, model.dt, 0.0);
    let mut state = PidState::new(0.0);
    let unlimited = ActuatorLimits { min: f64::NEG_INFINITY, max: f64::INFINITY };
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let out = plant.output();
        let (next, u) = pid_step(&state, 1.0, out, gains, model.dt, unlimited)?;
        state = next;
        y.push(plant.step(u));
        if !out.is_finite() || out.abs() > 1e6 {
            break;
        }
    }
    Ok(y)
}

pub fn step_metrics(y: &[f64], dt: f64) -> StepMetrics {
    let peak_abs = y.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let peak = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let crossing = |level: f64| {
        y.iter().position(|&v| v >= level).map(|k| {
            if k == 0 {
                0.0
            } else {
                let frac = (level - y[k - 1]) / (y[k] - y[k - 1]);
                (k as f64 - 1.0 + frac) * dt
            }
        })
    };
    let rise_time_s = match (crossing(0.1), crossing(0.9)) {
        (Some(a), Some(b)) => b - a,
        _ => f64::INFINITY,
    };
    let tail = &y[y.len() - y.len() / 5..];
    let settled = y.iter().all(|v| v.is_finite()) && tail.iter().all(|v| (v - 1.0).abs() <= 0.05);
    StepMetrics { overshoot_pct: 100.0 * (peak - 1.0).max(0.0), rise_time_s, settled, peak_abs }
}

/// Tuning objective; unstable or unsettled responses score infinity.
pub fn tuning_objective(model: &LoopModel, gains: &PidGains, w: &ObjectiveWeights) -> f64 {
    match step_response(model, gains) {
        Ok(y) => {
            let m = step_metrics(&y, model.dt);
            if !m.settled || !m.rise_time_s.is_finite() {
                f64::INFINITY
            } else {
                w.overshoot * m.overshoot_pct + w.rise_time * m.rise_time_s
            }
        }
        Err(_) => f64::INFINITY,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningReport {
    pub gains: PidGains,
    pub objective: f64,
    pub overshoot_pct: f64,
    pub rise_time_s: f64,
    pub loop_model: LoopModel,
    /// Best objective reached from each start.
    pub start_objectives: Vec<f64>,
}

pub const TUNING_STARTS: usize = 5;

/// Multi-start simplex search over log-gains. The first start is the SIMC
/// PI rule with a small derivative action; the rest are seeded perturbations of it.
pub fn tune_pid(model: &LoopModel, weights: &ObjectiveWeights, seed: u64) -> Result<(PidGains, TuningReport)> {
    let tc = model.td.max(model.dt);
    let kp0 = model.tw / (model.gain * (tc + model.td.max(model.dt)));
    let ki0 = kp0 / model.tw.min(4.0 * (tc + model.td));
    let kd0 = kp0 * 0.25 * model.td.max(model.dt);
    let base = [kp0.ln(), ki0.ln(), kd0.ln()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut starts = vec![base];
    for _ in 1..TUNING_STARTS {
        starts.push([
            base[0] + rng.gen_range(-1.0..1.0),
            base[1] + rng.gen_range(-1.0..1.0),
            base[2] + rng.gen_range(-1.5..1.5),
        ]);
    }
    let cost = |p: &[f64]| {
        let g = PidGains { kp: p[0].exp(), ki: p[1].exp(), kd: p[2].exp() };
        tuning_objective(model, &g, weights)
    };
    let mut best: Option<(PidGains, f64)> = None;
    let mut start_objectives = Vec::new();
    for s in &starts {
        let m = nelder_mead(cost, s, &[0.3, 0.3, 0.5], SimplexOptions { max_evaluations: 400, point_tolerance: 1e-6 });
        start_objectives.push(m.value);
        if m.value.is_finite() && best.as_ref().is_none_or(|b| m.value < b.1) {
            best = Some((PidGains { kp: m.x[0].exp(), ki: m.x[1].exp(), kd: m.x[2].exp() }, m.value));
        }
    }
    let (gains, objective) = best.ok_or_else(|| {
        Error::TuningFailure(format!(
            "no start produced a settling step response (loop gain {:.3e}, tw {:.3}, td {:.3})",
            model.gain, model.tw, model.td
        ))
    })?;
    let metrics = step_metrics(&step_response(model, &gains)?, model.dt);
    Ok((
        gains,
        TuningReport {
            gains,
            objective,
            overshoot_pct: metrics.overshoot_pct,
            rise_time_s: metrics.rise_time_s,
            loop_model: *model,
            start_objectives,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// Feedback is the surface's bead-width prediction.
    PropertyControlled,
    /// Feedback is the melt-pool width.
    SignatureControlled,
}

/// How the signature-controlled loop interprets the bead-width schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MpwSetpointMode {
    /// The schedule value is used directly as the MPW setpoint.
    Direct,
    /// The MPW that the surface maps to the desired width at layer 1.
    Translated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetpointStep {
    pub start: f64,
    /// mm
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopConfig {
    pub scenario: Scenario,
    pub setpoints: Vec<SetpointStep>,
    pub duration: f64,
    pub seconds_per_layer: f64,
    pub print_start: f64,
    pub layers: usize,
    pub limits: ActuatorLimits,
    pub dt: f64,
    pub initial_lp: f64,
    pub mpw_setpoint: MpwSetpointMode,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::PropertyControlled,
            setpoints: vec![SetpointStep { start: 1.0, value: 5.0 }, SetpointStep { start: 6.0, value: 4.7 }],
            duration: 11.0,
            seconds_per_layer: 2.0,
            print_start: 1.0,
            layers: 5,
            limits: ActuatorLimits::default(),
            dt: 0.01,
            initial_lp: 3000.0,
            mpw_setpoint: MpwSetpointMode::Direct,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        if self.setpoints.is_empty() {
            return Err(Error::invalid("setpoint schedule is empty"));
        }
        if self.setpoints.windows(2).any(|w| !(w[1].start > w[0].start)) {
            return Err(Error::invalid("setpoint times must be strictly increasing"));
        }
        if !(self.duration > self.print_start) || !(self.dt > 0.0) || !(self.seconds_per_layer > 0.0) {
            return Err(Error::invalid("need duration > print_start, dt > 0 and seconds_per_layer > 0"));
        }
        if self.layers == 0 {
            return Err(Error::invalid("need at least one layer"));
        }
        if !(self.limits.min < self.limits.max) || !self.limits.min.is_finite() || !self.limits.max.is_finite() {
            return Err(Error::invalid("actuator limits must be finite with min < max"));
        }
        if !(self.initial_lp >= self.limits.min && self.initial_lp <= self.limits.max) {
            return Err(Error::invalid("initial laser power must lie within the actuator limits"));
        }
        Ok(())
    }

    /// 0 before the print starts, then 1, 2, ... capped at `layers`.
    pub fn layer_at(&self, t: f64) -> f64 {
        if t < self.print_start {
            0.0
        } else {
            (1.0 + ((t - self.print_start) / self.seconds_per_layer).floor()).min(self.layers as f64)
        }
    }

    /// Desired bead width at `t` (the first value applies before the first step).
    pub fn desired_at(&self, t: f64) -> f64 {
        self.setpoints.iter().rev().find(|s| s.start <= t).unwrap_or(&self.setpoints[0]).value
    }

    pub fn steps(&self) -> usize {
        (self.duration / self.dt).round() as usize
    }
}

/// Measurements available to the loop at one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopSample {
    pub mpw: f64,
    pub mpl: f64,
    /// Latent bead width when the plant exposes it.
    pub bw_true: Option<f64>,
}

pub trait LoopPlant {
    /// Measurements at the current sample for the given layer.
    fn measure(&self, layer: f64) -> LoopSample;
    /// Applies `lp` over the next sample interval.
    fn advance(&mut self, lp: f64, layer: f64) -> Result<()>;
}

/// Identified composite model with MPL taken from a per-layer table.
#[derive(Debug, Clone)]
pub struct F1Plant {
    f1: FittedCompositeF1,
    filter: FirstOrderFilter,
    lp_mean: f64,
    layer_mean: f64,
    mpl_by_layer: Vec<f64>,
    noise_std: f64,
    seed: u64,
    k: usize,
}

impl F1Plant {
    pub fn new(f1: &FittedCompositeF1, mpl_by_layer: Vec<f64>, dt: f64, initial_lp: f64) -> Result<Self> {
        if mpl_by_layer.is_empty() {
            return Err(Error::invalid("MPL table needs at least one layer"));
        }
        let (lp_mean, layer_mean) = match f1.preprocessing.input_means.as_slice() {
            [a, b] => (*a, *b),
            _ => (0.0, 0.0),
        };
        Ok(Self {
            filter: FirstOrderFilter::steady(&f1.model.g_lp, dt, initial_lp - lp_mean),
            f1: f1.clone(),
            lp_mean,
            layer_mean,
            mpl_by_layer,
            noise_std: 0.0,
            seed: 0,
            k: 0,
        })
    }

    /// Adds seeded Gaussian noise of `std` mm to the MPW measurement.
    pub fn with_noise(mut self, std: f64, seed: u64) -> Self {
        self.noise_std = std;
        self.seed = seed;
        self
    }

    pub fn raw(model: CompositeF1, mpl_by_layer: Vec<f64>, dt: f64, initial_lp: f64) -> Result<Self> {
        Self::new(&FittedCompositeF1::raw(model), mpl_by_layer, dt, initial_lp)
    }
}

impl LoopPlant for F1Plant {
    fn measure(&self, layer: f64) -> LoopSample {
        let noise = if self.noise_std > 0.0 {
            self.noise_std * plant::gaussian(self.seed, plant::Channel::Mpw, self.k)
        } else {
            0.0
        };
        let mpw = self.f1.preprocessing.output_mean
            + self.filter.output()
            + self.f1.model.g_n * (layer - self.layer_mean)
            + noise;
        let idx = (layer.max(1.0) as usize - 1).min(self.mpl_by_layer.len() - 1);
        LoopSample { mpw, mpl: self.mpl_by_layer[idx], bw_true: None }
    }

    fn advance(&mut self, lp: f64, _layer: f64) -> Result<()> {
        if !lp.is_finite() {
            return Err(Error::invalid("laser power command must be finite"));
        }
        self.filter.step(lp - self.lp_mean);
        self.k += 1;
        Ok(())
    }
}

/// The virtual process itself, run at the loop's sample period.
#[derive(Debug, Clone)]
pub struct VirtualPlant {
    plant: Plant,
    nominal: PlantInput,
}

impl VirtualPlant {
    pub fn new(mut cfg: PlantConfig, dt: f64, initial_lp: f64, ts: f64) -> Result<Self> {
        cfg.dt = dt;
        let nominal = PlantInput { lp: initial_lp, ts, ep: 100.0, wfs: 2.0, layer: 1.0 };
        Ok(Self { plant: Plant::new(cfg, false, nominal)?, nominal })
    }
}

impl LoopPlant for VirtualPlant {
    fn measure(&self, layer: f64) -> LoopSample {
        let out = self.plant.output(&PlantInput { layer: layer.max(1.0), ..self.nominal });
        LoopSample { mpw: out.mpw, mpl: out.mpl, bw_true: Some(out.bw) }
    }

    fn advance(&mut self, lp: f64, layer: f64) -> Result<()> {
        let dt = self.plant.config().dt;
        plant::plant_step(&mut self.plant, lp, PlantInput { layer: layer.max(1.0), ..self.nominal }, dt).map(|_| ())
    }
}

/// Per-layer MPL table from the plant's steady state at `lp`.
pub fn nominal_mpl_table(cfg: &PlantConfig, lp: f64, layers: usize) -> Vec<f64> {
    (1..=layers).map(|n| cfg.nominal_mpl(lp, n as f64)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopTrace {
    pub setpoint: TimeSeries,
    pub controlled: TimeSeries,
    pub mpw: TimeSeries,
    /// Surface prediction of the bead width.
    pub bw: TimeSeries,
    pub lp: TimeSeries,
    pub layer: TimeSeries,
    pub error: TimeSeries,
    pub bw_true: Option<TimeSeries>,
}

impl ClosedLoopTrace {
    /// `t,setpoint,controlled,mpw[mm],bw[mm],lp[W],n,error`
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_table(
            &["setpoint", "controlled", "mpw[mm]", "bw[mm]", "lp[W]", "n", "error"],
            &[&self.setpoint, &self.controlled, &self.mpw, &self.bw, &self.lp, &self.layer, &self.error],
            writer,
        )
    }
}

/// Setpoint of the controlled variable for a desired bead width.
fn controlled_setpoint(cfg: &LoopConfig, f2: &RsmModel, desired: f64, mpl_layer1: f64) -> Result<f64> {
    match (cfg.scenario, cfg.mpw_setpoint) {
        (Scenario::PropertyControlled, _) | (Scenario::SignatureControlled, MpwSetpointMode::Direct) => Ok(desired),
        (Scenario::SignatureControlled, MpwSetpointMode::Translated) => mpw_for_bw(f2, desired, mpl_layer1, 1.0),
    }
}

/// Simulates the loop; the controller holds the initial laser power until the print starts.
pub fn run_closed_loop(
    cfg: &LoopConfig,
    plant: &mut dyn LoopPlant,
    f2: &RsmModel,
    gains: &PidGains,
) -> Result<ClosedLoopTrace> {
    cfg.validate()?;
    gains.validate()?;
    if f2.input_dim() != 3 {
        return Err(Error::invalid("the bead-width surface must take (MPW, MPL, n)"));
    }
    let mpl_layer1 = plant.measure(1.0).mpl;
    let translated: Vec<f64> = cfg
        .setpoints
        .iter()
        .map(|s| controlled_setpoint(cfg, f2, s.value, mpl_layer1))
        .collect::<Result<_>>()?;
    let setpoint_at = |t: f64| {
        let i = cfg.setpoints.iter().rposition(|s| s.start <= t).unwrap_or(0);
        translated[i]
    };

    let n = cfg.steps();
    let mut ch: [Vec<f64>; 7] = Default::default();
    let mut bw_true = Vec::new();
    let mut state = PidState::new(cfg.initial_lp);
    let mut lp = cfg.initial_lp;
    for k in 0..n {
        let t = k as f64 * cfg.dt;
        let layer = cfg.layer_at(t);
        let s = plant.measure(layer);
        let bw = f2.predict(&[s.mpw, s.mpl, layer.max(1.0)])?;
        let controlled = match cfg.scenario {
            Scenario::PropertyControlled => bw,
            Scenario::SignatureControlled => s.mpw,
        };
        let sp = setpoint_at(t);
        if t >= cfg.print_start {
            let (next, u) = pid_step(&state, sp, controlled, gains, cfg.dt, cfg.limits)?;
            state = next;
            lp = u;
        }
        for (c, v) in ch.iter_mut().zip([sp, controlled, s.mpw, bw, lp, layer, sp - controlled]) {
            c.push(v);
        }
        if let Some(b) = s.bw_true {
            bw_true.push(b);
        }
        plant.advance(lp, layer)?;
    }
    let series = |v: Vec<f64>, unit: &str| TimeSeries::new(0.0, cfg.dt, v, unit);
    let [setpoint, controlled, mpw, bw, lp_ch, layer, error] = ch;
    Ok(ClosedLoopTrace {
        setpoint: series(setpoint, "mm")?,
        controlled: series(controlled, "mm")?,
        mpw: series(mpw, "mm")?,
        bw: series(bw, "mm")?,
        lp: series(lp_ch, "W")?,
        layer: series(layer, "")?,
        error: series(error, "mm")?,
        bw_true: if bw_true.len() == n { Some(series(bw_true, "mm")?) } else { None },
    })
}

/// Window evaluation: the last `SETTLE_WINDOW_S` seconds before each setpoint change.
pub const SETTLE_WINDOW_S: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowError {
    pub start: f64,
    pub end: f64,
    pub desired_bw: f64,
    /// Mean |BW - desired| over the settle window.
    pub bw_error: f64,
    /// Mean |controlled - setpoint| over the settle window.
    pub tracking_error: f64,
}

/// Per-window steady-state errors of a trace.
pub fn window_errors(cfg: &LoopConfig, trace: &ClosedLoopTrace) -> Vec<WindowError> {
    let bw = trace.bw.values();
    cfg.setpoints
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let end = cfg.setpoints.get(i + 1).map_or(cfg.duration, |n| n.start);
            let from = ((end - SETTLE_WINDOW_S) / cfg.dt).round() as usize;
            let to = ((end / cfg.dt).round() as usize).min(bw.len());
            let from = from.min(to.saturating_sub(1));
            let mean = |f: &dyn Fn(usize) -> f64| (from..to).map(f).sum::<f64>() / (to - from).max(1) as f64;
            WindowError {
                start: s.start,
                end,
                desired_bw: s.value,
                bw_error: mean(&|k| (bw[k] - s.value).abs()),
                tracking_error: mean(&|k| trace.error.values()[k].abs()),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub scenario: Scenario,
    pub gains: PidGains,
    pub windows: Vec<WindowError>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioComparison {
    pub scenarios: Vec<ScenarioResult>,
    /// Scenario 2 minus scenario 1 BW error, per window.
    pub bw_error_difference: Vec<f64>,
    /// True when the signature-controlled loop misses the desired width by more in every window.
    pub signature_control_worse_everywhere: bool,
}

/// Runs both scenarios on freshly built, identical plants.
pub fn compare_scenarios(
    cfg: &LoopConfig,
    make_plant: &dyn Fn() -> Result<Box<dyn LoopPlant>>,
    f2: &RsmModel,
    property_gains: &PidGains,
    signature_gains: &PidGains,
) -> Result<(ScenarioComparison, [ClosedLoopTrace; 2])> {
    let run = |scenario: Scenario, gains: &PidGains| -> Result<(ScenarioResult, ClosedLoopTrace)> {
        let c = LoopConfig { scenario, ..cfg.clone() };
        let mut plant = make_plant()?;
        let trace = run_closed_loop(&c, plant.as_mut(), f2, gains)?;
        Ok((ScenarioResult { scenario, gains: *gains, windows: window_errors(&c, &trace) }, trace))
    };
    let (r1, t1) = run(Scenario::PropertyControlled, property_gains)?;
    let (r2, t2) = run(Scenario::SignatureControlled, signature_gains)?;
    let diff: Vec<f64> = r1.windows.iter().zip(&r2.windows).map(|(a, b)| b.bw_error - a.bw_error).collect();
    let worse = diff.iter().all(|d| *d > 0.0);
    Ok((
        ScenarioComparison { scenarios: vec![r1, r2], bw_error_difference: diff, signature_control_worse_everywhere: worse },
        [t1, t2],
    ))
}
