//! Dynamic models from process parameters to melt-pool signatures, and the
//! routines that identify them from sampled data.
//!
//! All continuous-time structures are simulated with an exact zero-order-hold
//! discretization; dead time is rounded to whole samples. Fits minimize the
//! free-run simulation error, except ARX which is solved in its one-step
//! regression form and reported free-run.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector, Matrix3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{nelder_mead, SimplexOptions};
use crate::signals::{self, metrics_from_slices, FitMetrics, TimeSeries};

/// `K * exp(-td * s) / (1 + tw * s)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FirstOrderDelayModel {
    pub k_gain: f64,
    pub tw: f64,
    pub td: f64,
}

impl FirstOrderDelayModel {
    pub fn new(k_gain: f64, tw: f64, td: f64) -> Result<Self> {
        if !k_gain.is_finite() || !(tw > 0.0) || !tw.is_finite() || !(td >= 0.0) || !td.is_finite() {
            return Err(Error::invalid(format!(
                "first-order model needs finite K, tw > 0, td >= 0 (got {k_gain}, {tw}, {td})"
            )));
        }
        Ok(Self { k_gain, tw, td })
    }

    pub fn delay_samples(&self, dt: f64) -> usize {
        (self.td / dt).round() as usize
    }
}

/// Discrete state of a first-order-plus-dead-time block driven one sample at a time.
#[derive(Debug, Clone)]
pub struct FirstOrderFilter {
    pole: f64,
    input_gain: f64,
    pending: VecDeque<f64>,
    state: f64,
}

impl FirstOrderFilter {
    /// Block at rest with output `y0` and zero input history.
    pub fn at_rest(m: &FirstOrderDelayModel, dt: f64, y0: f64) -> Self {
        Self::with_history(m, dt, 0.0, y0)
    }

    /// Block in equilibrium with a constant input `u0`.
    pub fn steady(m: &FirstOrderDelayModel, dt: f64, u0: f64) -> Self {
        Self::with_history(m, dt, u0, m.k_gain * u0)
    }

    fn with_history(m: &FirstOrderDelayModel, dt: f64, u_past: f64, y0: f64) -> Self {
        let pole = (-dt / m.tw).exp();
        Self {
            pole,
            input_gain: m.k_gain * (1.0 - pole),
            pending: std::iter::repeat_n(u_past, m.delay_samples(dt)).collect(),
            state: y0,
        }
    }

    pub fn output(&self) -> f64 {
        self.state
    }

    /// Returns the output at the current sample, then applies `u` over the next interval.
    pub fn step(&mut self, u: f64) -> f64 {
        let y = self.state;
        let applied = if self.pending.is_empty() {
            u
        } else {
            self.pending.push_back(u);
            self.pending.pop_front().unwrap()
        };
        self.state = self.pole * self.state + self.input_gain * applied;
        y
    }
}

/// Response from rest (zero input before the first sample) starting at `y0`.
pub fn simulate_first_order(m: &FirstOrderDelayModel, u: &TimeSeries, y0: f64) -> TimeSeries {
    let mut f = FirstOrderFilter::at_rest(m, u.dt(), y0);
    let out = u.values().iter().map(|&x| f.step(x)).collect();
    TimeSeries::new(u.t0(), u.dt(), out, "").expect("finite response")
}

/// Response of a block that was in equilibrium with the first input sample.
pub fn simulate_first_order_steady(m: &FirstOrderDelayModel, u: &TimeSeries) -> TimeSeries {
    let values = first_order_steady(m, u.dt(), u.values());
    TimeSeries::new(u.t0(), u.dt(), values, "").expect("finite response")
}

fn first_order_steady(m: &FirstOrderDelayModel, dt: f64, u: &[f64]) -> Vec<f64> {
    let mut f = FirstOrderFilter::steady(m, dt, u[0]);
    u.iter().map(|&x| f.step(x)).collect()
}

/// Unit-gain equilibrium-start response written into `out`.
fn unit_response(tw: f64, delay: usize, dt: f64, u: &[f64], out: &mut Vec<f64>) {
    out.clear();
    let pole = (-dt / tw).exp();
    let gain = 1.0 - pole;
    let mut y = u[0];
    for k in 0..u.len() {
        out.push(y);
        let applied = if k >= delay { u[k - delay] } else { u[0] };
        y = pole * y + gain * applied;
    }
}

/// `(b1 * s + b0) * exp(-td * s) / (s^2 + a1 * s + a2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SecondOrderDelayModel {
    pub b0: f64,
    pub b1: f64,
    pub a1: f64,
    pub a2: f64,
    pub td: f64,
}

impl SecondOrderDelayModel {
    /// Both poles in the open left half-plane.
    pub fn is_stable(&self) -> bool {
        self.a1 > 0.0 && self.a2 > 0.0
    }

    pub fn dc_gain(&self) -> f64 {
        self.b0 / self.a2
    }

    fn from_shape(k: f64, wn: f64, zeta: f64, tz: f64, td: f64) -> Self {
        let a2 = wn * wn;
        Self { b0: k * a2, b1: k * a2 * tz, a1: 2.0 * zeta * wn, a2, td }
    }

    /// Zero-order-hold discretization: (Phi, Gamma) of the controllable canonical form.
    fn discretize(&self, dt: f64) -> ([[f64; 2]; 2], [f64; 2]) {
        let m = Matrix3::new(0.0, 1.0, 0.0, -self.a2, -self.a1, 1.0, 0.0, 0.0, 0.0) * dt;
        let e = m.exp();
        ([[e[(0, 0)], e[(0, 1)]], [e[(1, 0)], e[(1, 1)]]], [e[(0, 2)], e[(1, 2)]])
    }
}

/// Equilibrium-start simulation of the second-order structure.
pub fn simulate_second_order_steady(m: &SecondOrderDelayModel, u: &TimeSeries) -> TimeSeries {
    let values = second_order_steady(m, u.dt(), u.values());
    TimeSeries::new(u.t0(), u.dt(), values, "").unwrap_or_else(|_| {
        TimeSeries::new(u.t0(), u.dt(), vec![0.0; u.len()], "").unwrap()
    })
}

fn second_order_steady(m: &SecondOrderDelayModel, dt: f64, u: &[f64]) -> Vec<f64> {
    let (phi, gamma) = m.discretize(dt);
    let delay = (m.td / dt).round() as usize;
    let mut x = [u[0] / m.a2, 0.0];
    let mut out = Vec::with_capacity(u.len());
    for k in 0..u.len() {
        out.push(m.b0 * x[0] + m.b1 * x[1]);
        let applied = if k >= delay { u[k - delay] } else { u[0] };
        x = [
            phi[0][0] * x[0] + phi[0][1] * x[1] + gamma[0] * applied,
            phi[1][0] * x[0] + phi[1][1] * x[1] + gamma[1] * applied,
        ];
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArxModel {
    pub na: usize,
    pub nb: usize,
    pub nk: usize,
    /// `y[t] + a1*y[t-1] + ... = b1*u[t-nk] + b2*u[t-nk-1] + ...`
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl ArxModel {
    pub fn new(na: usize, nb: usize, nk: usize, a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if na < 1 || nb < 1 || a.len() != na || b.len() != nb {
            return Err(Error::invalid("ARX orders must be >= 1 and match the coefficient counts"));
        }
        Ok(Self { na, nb, nk, a, b })
    }

    fn first_predicted(&self) -> usize {
        self.na.max(self.nb + self.nk - 1).max(self.nk)
    }

    fn predict_one(&self, y: &[f64], u: &[f64], t: usize) -> f64 {
        let mut acc = 0.0;
        for (i, a) in self.a.iter().enumerate() {
            acc -= a * y[t - i - 1];
        }
        for (j, b) in self.b.iter().enumerate() {
            acc += b * u[t - self.nk - j];
        }
        acc
    }

    /// Free-run simulation seeded with the measured outputs before the first predictable sample.
    pub fn simulate(&self, u: &[f64], y_measured: &[f64]) -> Vec<f64> {
        let start = self.first_predicted().min(u.len());
        let mut y: Vec<f64> = y_measured[..start].to_vec();
        for t in start..u.len() {
            let next = self.predict_one(&y, u, t);
            y.push(next);
        }
        y
    }
}

/// Monotone piecewise-linear map, extrapolated linearly past its end breakpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseLinear {
    pub breakpoints: Vec<f64>,
    pub values: Vec<f64>,
}

impl PiecewiseLinear {
    pub fn new(breakpoints: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if breakpoints.len() < 2 || breakpoints.len() != values.len() {
            return Err(Error::invalid("a piecewise-linear map needs >= 2 breakpoints and one value each"));
        }
        if breakpoints.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("breakpoints must be strictly increasing"));
        }
        Ok(Self { breakpoints, values })
    }

    /// Identity map on `count` evenly spaced breakpoints over [lo, hi].
    pub fn identity(lo: f64, hi: f64, count: usize) -> Self {
        let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
        let bp: Vec<f64> = (0..count).map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64).collect();
        Self { values: bp.clone(), breakpoints: bp }
    }

    fn segment(&self, x: f64) -> usize {
        let n = self.breakpoints.len();
        match self.breakpoints.partition_point(|&b| b <= x) {
            0 => 0,
            i if i >= n => n - 2,
            i => i - 1,
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let i = self.segment(x);
        let (x0, x1) = (self.breakpoints[i], self.breakpoints[i + 1]);
        let t = (x - x0) / (x1 - x0);
        self.values[i] + t * (self.values[i + 1] - self.values[i])
    }

    /// Interpolation weights of `x` on each breakpoint (hat basis, extrapolating at the ends).
    fn basis(&self, x: f64, out: &mut [f64]) {
        out.iter_mut().for_each(|w| *w = 0.0);
        let i = self.segment(x);
        let t = (x - self.breakpoints[i]) / (self.breakpoints[i + 1] - self.breakpoints[i]);
        out[i] = 1.0 - t;
        out[i + 1] = t;
    }

    /// Inverse of a strictly increasing map.
    pub fn invert(&self, y: f64) -> f64 {
        let n = self.values.len();
        let i = match self.values.partition_point(|&v| v <= y) {
            0 => 0,
            i if i >= n => n - 2,
            i => i - 1,
        };
        let (v0, v1) = (self.values[i], self.values[i + 1]);
        let t = (y - v0) / (v1 - v0);
        self.breakpoints[i] + t * (self.breakpoints[i + 1] - self.breakpoints[i])
    }

    fn is_increasing(&self) -> bool {
        self.values.windows(2).all(|w| w[1] > w[0])
    }
}

/// Pool-adjacent-violators projection onto non-decreasing sequences.
fn isotonic(values: &[f64]) -> Vec<f64> {
    let mut blocks: Vec<(f64, usize)> = Vec::new();
    for &v in values {
        blocks.push((v, 1));
        while blocks.len() > 1 && blocks[blocks.len() - 2].0 > blocks[blocks.len() - 1].0 {
            let (m2, c2) = blocks.pop().unwrap();
            let (m1, c1) = blocks.pop().unwrap();
            blocks.push(((m1 * c1 as f64 + m2 * c2 as f64) / (c1 + c2) as f64, c1 + c2));
        }
    }
    blocks.into_iter().flat_map(|(m, c)| std::iter::repeat_n(m, c)).collect()
}

/// Non-decreasing projection nudged to strictly increasing.
fn strictly_increasing(values: &[f64]) -> Vec<f64> {
    let mut v = isotonic(values);
    let span = (v[v.len() - 1] - v[0]).abs().max(1e-9);
    for i in 1..v.len() {
        if v[i] <= v[i - 1] {
            v[i] = v[i - 1] + 1e-6 * span;
        }
    }
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HammersteinWienerModel {
    pub input_nl: PiecewiseLinear,
    pub linear_block: FirstOrderDelayModel,
    pub output_nl: PiecewiseLinear,
}

impl HammersteinWienerModel {
    pub fn simulate(&self, u: &TimeSeries) -> Vec<f64> {
        let v: Vec<f64> = u.values().iter().map(|&x| self.input_nl.eval(x)).collect();
        first_order_steady(&self.linear_block, u.dt(), &v)
            .into_iter()
            .map(|w| self.output_nl.eval(w))
            .collect()
    }
}

/// Multi-layer MPW model: a laser-power transfer function plus a static
/// per-layer gain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompositeF1 {
    pub g_lp: FirstOrderDelayModel,
    pub g_n: f64,
}

/// MPW = G_LP(LP) + g_n * n, with G_LP starting in equilibrium with the first LP sample.
pub fn simulate_composite_f1(m: &CompositeF1, lp: &TimeSeries, layer: &TimeSeries) -> Result<TimeSeries> {
    if !lp.same_grid(layer) {
        return Err(Error::invalid("laser power and layer series must share one sample grid"));
    }
    let mut f = FirstOrderFilter::steady(&m.g_lp, lp.dt(), lp.values()[0]);
    let values = lp
        .values()
        .iter()
        .zip(layer.values())
        .map(|(&p, &n)| f.step(p) + m.g_n * n)
        .collect();
    TimeSeries::new(lp.t0(), lp.dt(), values, "mm")
}

/// Fit metrics, except that an exact reproduction of a constant output scores
/// as a perfect fit instead of leaving R² undefined.
fn fit_report(simulated: &[f64], actual: &[f64]) -> Result<FitMetrics> {
    match metrics_from_slices(simulated, actual) {
        Err(Error::UndefinedR2) if simulated == actual => {
            Ok(FitMetrics { rmse: 0.0, mae: 0.0, r2: 1.0, bf_percent: 100.0 })
        }
        other => other,
    }
}

fn check_pair(u: &TimeSeries, y: &TimeSeries) -> Result<()> {
    if !u.same_grid(y) {
        return Err(Error::invalid("input and output must share one sample grid"));
    }
    if u.len() < 4 {
        return Err(Error::invalid("need at least four samples to identify a model"));
    }
    Ok(())
}

fn is_constant(v: &[f64]) -> bool {
    v.iter().all(|x| *x == v[0])
}

fn max_delay(n: usize, dt: f64) -> usize {
    ((2.0 / dt).round() as usize).min(n / 4)
}

/// Time for the averaged, normalized step response to reach 63.2 %, or None
/// when the input has no clear steps.
fn step_time_constant(u: &[f64], y: &[f64], dt: f64) -> Option<f64> {
    let (lo, hi) = u.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let threshold = 0.5 * (hi - lo);
    let steps: Vec<usize> = (1..u.len()).filter(|&k| (u[k] - u[k - 1]).abs() > threshold).collect();
    if steps.is_empty() {
        return None;
    }
    let mut responses: Vec<Vec<f64>> = Vec::new();
    for (i, &s) in steps.iter().enumerate() {
        let end = steps.get(i + 1).copied().unwrap_or(u.len());
        if end - s < 8 {
            continue;
        }
        let before = y[s - 1];
        let tail = &y[s + (end - s) * 4 / 5..end];
        let after = tail.iter().sum::<f64>() / tail.len() as f64;
        if (after - before).abs() < 1e-12 {
            continue;
        }
        responses.push(y[s..end].iter().map(|v| (v - before) / (after - before)).collect());
    }
    let len = responses.iter().map(Vec::len).min()?;
    let crossing = (0..len).find(|&k| {
        responses.iter().map(|r| r[k]).sum::<f64>() / responses.len() as f64 >= 1.0 - (-1.0f64).exp()
    })?;
    Some((crossing as f64 + 1.0) * dt)
}

/// Least-squares coefficients of `y ~ sum c_i * cols[i]` via the normal equations.
fn linear_coefficients(cols: &[&[f64]], y: &[f64]) -> Option<Vec<f64>> {
    let p = cols.len();
    let mut gram = DMatrix::<f64>::zeros(p, p);
    let mut rhs = DVector::<f64>::zeros(p);
    for i in 0..p {
        for j in 0..=i {
            let v: f64 = cols[i].iter().zip(cols[j]).map(|(a, b)| a * b).sum();
            gram[(i, j)] = v;
            gram[(j, i)] = v;
        }
        rhs[i] = cols[i].iter().zip(y).map(|(a, b)| a * b).sum();
    }
    gram.cholesky().map(|c| c.solve(&rhs).iter().copied().collect())
}

struct FirstOrderFit {
    k: f64,
    tw: f64,
    delay: usize,
    layer_gain: f64,
    sse: f64,
}

/// Searches the integer delay grid; at each delay refines (K, ln tw[, g_n]) by simplex.
fn search_first_order(
    u: &[f64],
    y: &[f64],
    layer: Option<&[f64]>,
    dt: f64,
    delays: std::ops::RangeInclusive<usize>,
) -> FirstOrderFit {
    let tw_guess = step_time_constant(u, y, dt);
    let span = u.len() as f64 * dt;
    let mut best = FirstOrderFit { k: 0.0, tw: 1.0, delay: 0, layer_gain: 0.0, sse: f64::INFINITY };
    let mut x = Vec::with_capacity(u.len());
    for delay in delays {
        let tw0 = tw_guess
            .map(|t| (t - delay as f64 * dt).max(2.0 * dt))
            .unwrap_or(10.0 * dt);
        unit_response(tw0, delay, dt, u, &mut x);
        let start = match layer {
            Some(n) => linear_coefficients(&[&x, n], y).unwrap_or(vec![0.0, 0.0]),
            None => linear_coefficients(&[&x], y).unwrap_or(vec![0.0]),
        };
        let mut x0 = vec![start[0], tw0.ln()];
        let mut steps = vec![0.1 * start[0].abs().max(1e-6), 0.3];
        if layer.is_some() {
            x0.push(start[1]);
            steps.push(0.1 * start[1].abs().max(1e-3));
        }
        let mut buf = Vec::with_capacity(u.len());
        let cost = |p: &[f64]| {
            let tw = p[1].exp();
            if !(tw > 1e-3 * dt) || tw > 100.0 * span {
                return f64::INFINITY;
            }
            unit_response(tw, delay, dt, u, &mut buf);
            let g = if layer.is_some() { p[2] } else { 0.0 };
            let mut sse = 0.0;
            for k in 0..y.len() {
                let n = layer.map_or(0.0, |l| l[k]);
                let e = y[k] - p[0] * buf[k] - g * n;
                sse += e * e;
            }
            sse
        };
        let m = nelder_mead(cost, &x0, &steps, SimplexOptions { max_evaluations: 800, ..Default::default() });
        if m.value < best.sse {
            best = FirstOrderFit {
                k: m.x[0],
                tw: m.x[1].exp(),
                delay,
                layer_gain: if layer.is_some() { m.x[2] } else { 0.0 },
                sse: m.value,
            };
        }
    }
    best
}

/// Fits `K e^{-td s} / (1 + tw s)` by simulation-error minimization.
pub fn fit_first_order(u: &TimeSeries, y: &TimeSeries) -> Result<(FirstOrderDelayModel, FitMetrics)> {
    check_pair(u, y)?;
    if is_constant(u.values()) {
        return Err(Error::Unidentifiable("input is constant".into()));
    }
    let dt = u.dt();
    let fit = search_first_order(u.values(), y.values(), None, dt, 0..=max_delay(u.len(), dt));
    let model = FirstOrderDelayModel::new(fit.k, fit.tw, fit.delay as f64 * dt)?;
    let sim = first_order_steady(&model, dt, u.values());
    Ok((model, fit_report(&sim, y.values())?))
}

/// Fits the second-order structure, parameterized by gain, natural
/// frequency, damping and a zero time constant.
pub fn fit_second_order(u: &TimeSeries, y: &TimeSeries) -> Result<(SecondOrderDelayModel, FitMetrics)> {
    check_pair(u, y)?;
    if is_constant(u.values()) {
        return Err(Error::Unidentifiable("input is constant".into()));
    }
    let dt = u.dt();
    let (uv, yv) = (u.values(), y.values());
    let first = search_first_order(uv, yv, None, dt, 0..=max_delay(u.len(), dt));
    let span = u.len() as f64 * dt;
    let mut best: Option<(SecondOrderDelayModel, f64)> = None;
    let lo = first.delay.saturating_sub(6);
    let hi = (first.delay + 2).min(max_delay(u.len(), dt));
    for delay in lo..=hi {
        let td = delay as f64 * dt;
        let cost = |p: &[f64]| {
            let (wn, zeta) = (p[1].exp(), p[2].exp());
            if !(wn * span > 1e-3) || wn * dt > 50.0 || zeta > 1e3 {
                return f64::INFINITY;
            }
            let m = SecondOrderDelayModel::from_shape(p[0], wn, zeta, p[3], td);
            second_order_steady(&m, dt, uv).iter().zip(yv).map(|(a, b)| (a - b) * (a - b)).sum()
        };
        // One start reproduces the first-order fit (overdamped, fast second pole); one is underdamped.
        let starts = [
            [first.k, (1.0 / (0.1716 * first.tw)).ln(), 3.0f64.ln(), 0.0],
            [first.k, (1.0 / first.tw).ln(), 0.5f64.ln(), 0.0],
        ];
        for s in starts {
            let m = nelder_mead(
                cost,
                &s,
                &[0.1 * first.k.abs().max(1e-6), 0.3, 0.3, 0.2 * first.tw],
                SimplexOptions { max_evaluations: 1500, ..Default::default() },
            );
            if best.as_ref().is_none_or(|b| m.value < b.1) {
                let model = SecondOrderDelayModel::from_shape(m.x[0], m.x[1].exp(), m.x[2].exp(), m.x[3], td);
                best = Some((model, m.value));
            }
        }
    }
    let (model, _) = best.expect("delay range is never empty");
    let sim = second_order_steady(&model, dt, uv);
    Ok((model, fit_report(&sim, yv)?))
}

/// Least-squares ARX estimate from the one-step-ahead regression.
///
/// Regressor columns that are identically zero carry no information and are
/// pinned to a zero coefficient; any other rank deficiency is an error.
pub fn fit_arx(u: &TimeSeries, y: &TimeSeries, na: usize, nb: usize, nk: usize) -> Result<(ArxModel, FitMetrics)> {
    if !u.same_grid(y) {
        return Err(Error::invalid("input and output must share one sample grid"));
    }
    if na < 1 || nb < 1 {
        return Err(Error::invalid("ARX orders must be at least 1"));
    }
    if u.len() <= na + nb + nk + 1 {
        return Err(Error::invalid("series too short for the requested ARX orders"));
    }
    let shell = ArxModel { na, nb, nk, a: vec![0.0; na], b: vec![0.0; nb] };
    let start = shell.first_predicted();
    let (uv, yv) = (u.values(), y.values());
    let rows = uv.len() - start;
    let p = na + nb;
    let phi = DMatrix::from_fn(rows, p, |r, c| {
        let t = r + start;
        if c < na { -yv[t - c - 1] } else { uv[t - nk - (c - na)] }
    });
    let target = DVector::from_iterator(rows, yv[start..].iter().copied());
    let active: Vec<usize> = (0..p).filter(|&c| phi.column(c).iter().any(|v| *v != 0.0)).collect();
    if active.is_empty() {
        return Err(Error::Unidentifiable("all regressors are zero".into()));
    }
    let reduced = phi.select_columns(&active);
    let sv = reduced.clone().svd(false, false).singular_values;
    let (smax, smin) = (sv.max(), sv.min());
    if !(smin > smax * 1e-10) {
        return Err(Error::Unidentifiable("ARX regressor matrix is rank deficient".into()));
    }
    let gram = reduced.transpose() * &reduced;
    let rhs = reduced.transpose() * target;
    let theta = gram
        .cholesky()
        .ok_or_else(|| Error::Unidentifiable("ARX normal equations are singular".into()))?
        .solve(&rhs);
    let mut full = vec![0.0; p];
    for (i, &c) in active.iter().enumerate() {
        full[c] = theta[i];
    }
    let model = ArxModel::new(na, nb, nk, full[..na].to_vec(), full[na..].to_vec())?;
    let sim = model.simulate(uv, yv);
    Ok((model, fit_report(&sim, yv)?))
}

#[derive(Debug, Clone, Copy)]
pub struct HwOptions {
    pub breakpoint_count: usize,
    /// Keep both nonlinearities at their identity initialization.
    pub fixed_nonlinearities: bool,
    pub max_rounds: usize,
    pub tolerance: f64,
}

impl Default for HwOptions {
    fn default() -> Self {
        Self { breakpoint_count: 5, fixed_nonlinearities: false, max_rounds: 50, tolerance: 1e-6 }
    }
}

fn hw_sse(model: &HammersteinWienerModel, u: &TimeSeries, y: &[f64]) -> f64 {
    model.simulate(u).iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Alternating fit of the input map, the linear block and the output map.
pub fn fit_hammerstein_wiener(
    u: &TimeSeries,
    y: &TimeSeries,
    opts: HwOptions,
) -> Result<(HammersteinWienerModel, FitMetrics)> {
    check_pair(u, y)?;
    if opts.breakpoint_count < 2 {
        return Err(Error::invalid("need at least two breakpoints"));
    }
    if is_constant(u.values()) {
        return Err(Error::Unidentifiable("input is constant".into()));
    }
    let dt = u.dt();
    let (uv, yv) = (u.values(), y.values());
    let nbp = opts.breakpoint_count;
    let (ulo, uhi) = uv.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let (ylo, yhi) = yv.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let mut model = HammersteinWienerModel {
        input_nl: PiecewiseLinear::identity(ulo, uhi, nbp),
        linear_block: FirstOrderDelayModel { k_gain: 1.0, tw: 10.0 * dt, td: 0.0 },
        output_nl: PiecewiseLinear::identity(ylo, yhi, nbp),
    };
    let sst: f64 = {
        let m = signals::mean(yv);
        yv.iter().map(|v| (v - m) * (v - m)).sum()
    };
    let scale = sst.max(1e-300);
    let dmax = max_delay(uv.len(), dt);
    let mut delay_range = 0..=dmax;
    let mut best: Option<(HammersteinWienerModel, f64)> = None;
    let mut previous = f64::INFINITY;
    let mut increases = 0;
    for round in 0..opts.max_rounds {
        // Linear block with both maps fixed.
        let v: Vec<f64> = uv.iter().map(|&x| model.input_nl.eval(x)).collect();
        let z: Vec<f64> = yv.iter().map(|&x| model.output_nl.invert(x)).collect();
        let lin = search_first_order(&v, &z, None, dt, delay_range.clone());
        model.linear_block = FirstOrderDelayModel::new(lin.k, lin.tw, lin.delay as f64 * dt)?;
        delay_range = lin.delay.saturating_sub(3)..=(lin.delay + 3).min(dmax);

        if !opts.fixed_nonlinearities {
            // Fold the linear gain into the input map so the block stays unit-gain.
            let k = model.linear_block.k_gain;
            model.input_nl.values.iter_mut().for_each(|x| *x *= k);
            model.linear_block.k_gain = 1.0;
            if !model.input_nl.is_increasing() {
                model.input_nl.values.reverse();
                model.input_nl.values.iter_mut().for_each(|x| *x = -*x);
                model.input_nl.values.reverse();
                // A decreasing map is represented as an increasing one with a negative block gain.
                let mirrored: Vec<f64> = model.input_nl.breakpoints.iter().map(|&b| -(-model.input_nl.eval(b))).collect();
                model.input_nl.values = mirrored;
            }

            // Output map by least squares on the hat basis of the block output.
            let v: Vec<f64> = uv.iter().map(|&x| model.input_nl.eval(x)).collect();
            let w = first_order_steady(&model.linear_block, dt, &v);
            let (wlo, whi) = w.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
            let template = PiecewiseLinear::identity(wlo, whi, nbp);
            let prior: Vec<f64> = template.breakpoints.iter().map(|&b| model.output_nl.eval(b)).collect();
            let values = regularized_hat_fit(&template, &w, yv, &prior);
            model.output_nl = PiecewiseLinear { breakpoints: template.breakpoints, values: strictly_increasing(&values) };

            // Input map through the linear block against the inverted output.
            let z: Vec<f64> = yv.iter().map(|&x| model.output_nl.invert(x)).collect();
            let mut columns = vec![Vec::with_capacity(uv.len()); nbp];
            let mut weights = vec![0.0; nbp];
            for &x in uv {
                model.input_nl.basis(x, &mut weights);
                for (c, wt) in columns.iter_mut().zip(&weights) {
                    c.push(*wt);
                }
            }
            let filtered: Vec<Vec<f64>> =
                columns.iter().map(|c| first_order_steady(&model.linear_block, dt, c)).collect();
            let values = ridge_solve(&filtered, &z, &model.input_nl.values);
            model.input_nl.values = isotonic(&values);
        }

        let loss = hw_sse(&model, u, yv) / scale;
        if best.as_ref().is_none_or(|b| loss < b.1) {
            best = Some((model.clone(), loss));
        }
        if loss > previous {
            increases += 1;
            if increases >= 3 {
                let (m, _) = best.unwrap();
                let sim = m.simulate(u);
                let metrics = fit_report(&sim, yv)?;
                return Err(Error::NonConvergence { rounds: round + 1, best: Box::new((m, metrics)) });
            }
        } else {
            increases = 0;
        }
        if opts.fixed_nonlinearities || (previous - loss).abs() < opts.tolerance {
            break;
        }
        previous = loss;
    }
    let (m, _) = best.expect("at least one round runs");
    let sim = m.simulate(u);
    let metrics = fit_report(&sim, yv)?;
    Ok((m, metrics))
}

/// Least squares on the hat basis of `x`, lightly pulled toward `prior`
/// so empty segments stay determined.
fn regularized_hat_fit(map: &PiecewiseLinear, x: &[f64], y: &[f64], prior: &[f64]) -> Vec<f64> {
    let n = map.breakpoints.len();
    let mut columns = vec![Vec::with_capacity(x.len()); n];
    let mut weights = vec![0.0; n];
    for &xi in x {
        map.basis(xi, &mut weights);
        for (c, w) in columns.iter_mut().zip(&weights) {
            c.push(*w);
        }
    }
    ridge_solve(&columns, y, prior)
}

fn ridge_solve(columns: &[Vec<f64>], y: &[f64], prior: &[f64]) -> Vec<f64> {
    let p = columns.len();
    let mut gram = DMatrix::<f64>::zeros(p, p);
    let mut rhs = DVector::<f64>::zeros(p);
    for i in 0..p {
        for j in 0..=i {
            let v: f64 = columns[i].iter().zip(&columns[j]).map(|(a, b)| a * b).sum();
            gram[(i, j)] = v;
            gram[(j, i)] = v;
        }
        rhs[i] = columns[i].iter().zip(y).map(|(a, b)| a * b).sum();
    }
    let ridge = 1e-8 * (0..p).map(|i| gram[(i, i)]).sum::<f64>().max(1e-12);
    for i in 0..p {
        gram[(i, i)] += ridge;
        rhs[i] += ridge * prior[i];
    }
    match gram.cholesky() {
        Some(c) => c.solve(&rhs).iter().copied().collect(),
        None => prior.to_vec(),
    }
}

/// Record of the preprocessing applied before a fit, so predictions can be
/// mapped back to engineering units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Preprocessing {
    pub dropped_zero_samples: usize,
    pub lowpass_hz: Option<f64>,
    pub input_means: Vec<f64>,
    pub output_mean: f64,
}

/// Multi-layer preprocessing: drop laser-off samples and concatenate the rest,
/// low-pass the MPW, then remove the mean of every channel.
pub fn preprocess_multilayer(
    lp: &TimeSeries,
    layer: &TimeSeries,
    mpw: &TimeSeries,
    cutoff_hz: f64,
) -> Result<([TimeSeries; 3], Preprocessing)> {
    if !lp.same_grid(layer) || !lp.same_grid(mpw) {
        return Err(Error::invalid("laser power, layer and MPW must share one sample grid"));
    }
    let keep: Vec<usize> = (0..lp.len()).filter(|&k| lp.values()[k] != 0.0).collect();
    if keep.len() < 4 {
        return Err(Error::invalid("fewer than four laser-on samples"));
    }
    let pick = |s: &TimeSeries| {
        TimeSeries::new(lp.t0(), lp.dt(), keep.iter().map(|&k| s.values()[k]).collect(), s.unit())
    };
    let (lp_on, layer_on, mpw_on) = (pick(lp)?, pick(layer)?, pick(mpw)?);
    let mpw_smooth = signals::lowpass(&mpw_on, cutoff_hz)?;
    let (lp_c, lp_mean) = signals::remove_mean(&lp_on);
    let (n_c, n_mean) = signals::remove_mean(&layer_on);
    let (mpw_c, mpw_mean) = signals::remove_mean(&mpw_smooth);
    Ok((
        [lp_c, n_c, mpw_c],
        Preprocessing {
            dropped_zero_samples: lp.len() - keep.len(),
            lowpass_hz: Some(cutoff_hz),
            input_means: vec![lp_mean, n_mean],
            output_mean: mpw_mean,
        },
    ))
}

/// Joint fit of the laser-power transfer function and the layer gain.
/// Inputs are expected in preprocessed (mean-removed) form.
pub fn fit_composite_f1(lp: &TimeSeries, layer: &TimeSeries, mpw: &TimeSeries) -> Result<(CompositeF1, FitMetrics)> {
    check_pair(lp, mpw)?;
    if !lp.same_grid(layer) {
        return Err(Error::invalid("layer series must share the laser-power grid"));
    }
    if is_constant(layer.values()) {
        return Err(Error::Unidentifiable("layer number never changes, so g_n is unidentifiable".into()));
    }
    if is_constant(lp.values()) {
        return Err(Error::Unidentifiable("laser power is constant".into()));
    }
    let dt = lp.dt();
    let fit = search_first_order(lp.values(), mpw.values(), Some(layer.values()), dt, 0..=max_delay(lp.len(), dt));
    let model = CompositeF1 {
        g_lp: FirstOrderDelayModel::new(fit.k, fit.tw, fit.delay as f64 * dt)?,
        g_n: fit.layer_gain,
    };
    let sim = simulate_composite_f1(&model, lp, layer)?;
    Ok((model, fit_report(sim.values(), mpw.values())?))
}

/// A composite model together with the operating point it was fitted around.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedCompositeF1 {
    pub model: CompositeF1,
    pub preprocessing: Preprocessing,
    pub metrics: Option<FitMetrics>,
}

impl FittedCompositeF1 {
    /// Identity operating point: the model works directly in engineering units.
    pub fn raw(model: CompositeF1) -> Self {
        Self {
            model,
            preprocessing: Preprocessing { input_means: vec![0.0, 0.0], ..Default::default() },
            metrics: None,
        }
    }

    /// MPW in millimetres for absolute laser-power and layer series.
    pub fn predict(&self, lp: &TimeSeries, layer: &TimeSeries) -> Result<TimeSeries> {
        let (lp_mean, n_mean) = match self.preprocessing.input_means.as_slice() {
            [a, b] => (*a, *b),
            _ => (0.0, 0.0),
        };
        let lp_c = lp.with_values(lp.values().iter().map(|v| v - lp_mean).collect())?;
        let n_c = layer.with_values(layer.values().iter().map(|v| v - n_mean).collect())?;
        let dev = simulate_composite_f1(&self.model, &lp_c, &n_c)?;
        dev.with_values(dev.values().iter().map(|v| v + self.preprocessing.output_mean).collect())
    }

    /// Steady-state MPW for constant inputs.
    pub fn steady_mpw(&self, lp: f64, layer: f64) -> f64 {
        let (lp_mean, n_mean) = match self.preprocessing.input_means.as_slice() {
            [a, b] => (*a, *b),
            _ => (0.0, 0.0),
        };
        self.preprocessing.output_mean + self.model.g_lp.k_gain * (lp - lp_mean) + self.model.g_n * (layer - n_mean)
    }
}

/// Preprocesses a multi-layer record, fits on the leading `1 - validation_fraction`
/// share and reports metrics on the trailing share.
pub fn identify_composite(
    lp: &TimeSeries,
    layer: &TimeSeries,
    mpw: &TimeSeries,
    cutoff_hz: f64,
    validation_fraction: f64,
) -> Result<(FittedCompositeF1, FitMetrics)> {
    if !(validation_fraction > 0.0 && validation_fraction < 1.0) {
        return Err(Error::invalid("validation fraction must lie in (0, 1)"));
    }
    let ([lp_c, n_c, mpw_c], pre) = preprocess_multilayer(lp, layer, mpw, cutoff_hz)?;
    let split = ((1.0 - validation_fraction) * lp_c.len() as f64).round() as usize;
    let (model, train_metrics) =
        fit_composite_f1(&lp_c.slice(0, split)?, &n_c.slice(0, split)?, &mpw_c.slice(0, split)?)?;
    let sim = simulate_composite_f1(&model, &lp_c, &n_c)?;
    let validation = fit_report(&sim.values()[split..], &mpw_c.values()[split..])?;
    Ok((FittedCompositeF1 { model, preprocessing: pre, metrics: Some(train_metrics) }, validation))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Structure {
    FirstOrder,
    SecondOrder,
    Arx,
    HammersteinWiener,
}

impl Structure {
    pub const ALL: [Structure; 4] =
        [Structure::FirstOrder, Structure::SecondOrder, Structure::Arx, Structure::HammersteinWiener];

    pub fn name(self) -> &'static str {
        match self {
            Structure::FirstOrder => "first-order",
            Structure::SecondOrder => "second-order",
            Structure::Arx => "arx",
            Structure::HammersteinWiener => "hammerstein-wiener",
        }
    }
}

/// One fitted dynamic model of any supported structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "structure", content = "parameters", rename_all = "kebab-case")]
pub enum DynamicModel {
    FirstOrder(FirstOrderDelayModel),
    SecondOrder(SecondOrderDelayModel),
    Arx(ArxModel),
    HammersteinWiener(HammersteinWienerModel),
    Composite(CompositeF1),
}

impl DynamicModel {
    /// Free-run response to `u`; ARX is seeded with the first measured outputs.
    pub fn simulate(&self, u: &TimeSeries, y_measured: &[f64]) -> Vec<f64> {
        match self {
            DynamicModel::FirstOrder(m) => first_order_steady(m, u.dt(), u.values()),
            DynamicModel::SecondOrder(m) => second_order_steady(m, u.dt(), u.values()),
            DynamicModel::Arx(m) => m.simulate(u.values(), y_measured),
            DynamicModel::HammersteinWiener(m) => m.simulate(u),
            DynamicModel::Composite(m) => first_order_steady(&m.g_lp, u.dt(), u.values()),
        }
    }
}

/// Fits one structure with its default settings. ARX uses orders (2, 2) and
/// the dead time found by a first-order fit.
pub fn fit_structure(structure: Structure, u: &TimeSeries, y: &TimeSeries) -> Result<(DynamicModel, FitMetrics)> {
    match structure {
        Structure::FirstOrder => fit_first_order(u, y).map(|(m, f)| (DynamicModel::FirstOrder(m), f)),
        Structure::SecondOrder => fit_second_order(u, y).map(|(m, f)| (DynamicModel::SecondOrder(m), f)),
        Structure::Arx => {
            let nk = fit_first_order(u, y).map(|(m, _)| m.delay_samples(u.dt()) + 1).unwrap_or(1);
            fit_arx(u, y, 2, 2, nk).map(|(m, f)| (DynamicModel::Arx(m), f))
        }
        Structure::HammersteinWiener => fit_hammerstein_wiener(u, y, HwOptions::default())
            .map(|(m, f)| (DynamicModel::HammersteinWiener(m), f)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonEntry {
    pub structure: Structure,
    pub model: Option<DynamicModel>,
    pub training: Option<FitMetrics>,
    pub validation: Option<FitMetrics>,
    pub error: Option<String>,
}

impl ComparisonEntry {
    pub fn validation_bf(&self) -> f64 {
        self.validation.map_or(f64::NEG_INFINITY, |m| m.bf_percent)
    }
}

fn validation_split(u: &TimeSeries, y: &TimeSeries, validation_fraction: f64) -> Result<usize> {
    check_pair(u, y)?;
    if !(validation_fraction > 0.0 && validation_fraction < 1.0) {
        return Err(Error::invalid("validation fraction must lie in (0, 1)"));
    }
    let split = ((1.0 - validation_fraction) * u.len() as f64).round() as usize;
    if split < 4 || u.len() - split < 2 {
        return Err(Error::invalid("split leaves too few samples on one side"));
    }
    Ok(split)
}

fn evaluate_structure(structure: Structure, u: &TimeSeries, y: &TimeSeries, split: usize) -> Result<ComparisonEntry> {
    let (model, training) = fit_structure(structure, &u.slice(0, split)?, &y.slice(0, split)?)?;
    let sim = model.simulate(u, y.values());
    let (validation, error) = match fit_report(&sim[split..], &y.values()[split..]) {
        Ok(v) => (Some(v), None),
        Err(e) => (None, Some(e.to_string())),
    };
    Ok(ComparisonEntry { structure, model: Some(model), training: Some(training), validation, error })
}

/// Fits one structure on the leading share of the data and scores it on the
/// trailing `validation_fraction`. Fitting errors are returned as such.
pub fn identify_structure(
    structure: Structure,
    u: &TimeSeries,
    y: &TimeSeries,
    validation_fraction: f64,
) -> Result<ComparisonEntry> {
    let split = validation_split(u, y, validation_fraction)?;
    evaluate_structure(structure, u, y, split)
}

/// Fits every structure on the leading share of the data and ranks them by
/// best fit on the trailing `validation_fraction`.
pub fn compare_models(u: &TimeSeries, y: &TimeSeries, validation_fraction: f64) -> Result<Vec<ComparisonEntry>> {
    let split = validation_split(u, y, validation_fraction)?;
    let mut entries: Vec<ComparisonEntry> = Structure::ALL
        .iter()
        .map(|&structure| {
            evaluate_structure(structure, u, y, split).unwrap_or_else(|e| ComparisonEntry {
                structure,
                model: None,
                training: None,
                validation: None,
                error: Some(e.to_string()),
            })
        })
        .collect();
    entries.sort_by(|a, b| b.validation_bf().total_cmp(&a.validation_bf()));
    Ok(entries)
}
