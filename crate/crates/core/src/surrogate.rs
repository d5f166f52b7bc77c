//! Signature-to-property surrogates: the multilayer perceptron trained with
//! Levenberg-Marquardt, the cubic response surface used inside the control
//! loop, and the comparison harnesses built on them.

use std::io::{Read, Write};

use faer::linalg::matmul::triangular::{self, BlockStructure};
use faer::linalg::solvers::Cholesky;
use faer::prelude::*;
use faer::{Mat, Parallelism, Side};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plant::{self, ExperimentRecord};
use crate::signals::{csv_error, log_values, metrics_from_slices, split_header, FitMetrics, MinMax};
use crate::sysid::FittedCompositeF1;

pub const DEFAULT_TRAIN_FRACTION: f64 = 0.8;
pub const DEFAULT_HIDDEN: [usize; 6] = [8, 16, 32, 16, 8, 4];
pub const MAX_EPOCHS: usize = 200;

/// Feature subsets compared in the signature ablation, richest first.
pub const ABLATION_INPUTS: [&[&str]; 3] = [&["mpw", "mpl", "mpt", "n"], &["mpw", "mpl", "n"], &["mpw", "n"]];

/// Rows of named features with a positive bead-width target in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    feature_names: Vec<String>,
    feature_units: Vec<String>,
    inputs: Vec<Vec<f64>>,
    target: Vec<f64>,
}

impl Dataset {
    pub fn new(
        feature_names: Vec<String>,
        feature_units: Vec<String>,
        inputs: Vec<Vec<f64>>,
        target: Vec<f64>,
    ) -> Result<Self> {
        if feature_names.is_empty() || feature_units.len() != feature_names.len() {
            return Err(Error::invalid("need at least one feature and one unit per feature"));
        }
        if inputs.len() != target.len() {
            return Err(Error::invalid("input and target row counts differ"));
        }
        if inputs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if inputs.len() < feature_names.len() + 1 {
            return Err(Error::invalid(format!(
                "{} rows cannot support {} features",
                inputs.len(),
                feature_names.len()
            )));
        }
        for (i, row) in inputs.iter().enumerate() {
            if row.len() != feature_names.len() {
                return Err(Error::invalid(format!("row {i} has {} values, expected {}", row.len(), feature_names.len())));
            }
            if row.iter().any(|v| !v.is_finite()) || !target[i].is_finite() {
                return Err(Error::invalid(format!("row {i} has a non-finite entry")));
            }
        }
        Ok(Self { feature_names, feature_units, inputs, target })
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn feature_units(&self) -> &[String] {
        &self.feature_units
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn target(&self) -> &[f64] {
        &self.target
    }

    pub fn rows(&self) -> usize {
        self.target.len()
    }

    pub fn dim(&self) -> usize {
        self.feature_names.len()
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.feature_names.iter().position(|f| f == name)?;
        Some(self.inputs.iter().map(|r| r[j]).collect())
    }

    /// Projection onto the named features, in the order given.
    pub fn select(&self, names: &[&str]) -> Result<Self> {
        let idx: Vec<usize> = names
            .iter()
            .map(|n| {
                self.feature_names
                    .iter()
                    .position(|f| f == n)
                    .ok_or_else(|| Error::invalid(format!("dataset has no feature `{n}`")))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            feature_names: idx.iter().map(|&j| self.feature_names[j].clone()).collect(),
            feature_units: idx.iter().map(|&j| self.feature_units[j].clone()).collect(),
            inputs: self.inputs.iter().map(|r| idx.iter().map(|&j| r[j]).collect()).collect(),
            target: self.target.clone(),
        })
    }

    /// Rows at `indices`, without the minimum-size check (validation parts may be small).
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            feature_names: self.feature_names.clone(),
            feature_units: self.feature_units.clone(),
            inputs: indices.iter().map(|&i| self.inputs[i].clone()).collect(),
            target: indices.iter().map(|&i| self.target[i]).collect(),
        }
    }

    /// Stacks datasets with identical feature lists.
    pub fn concat(parts: &[Dataset]) -> Result<Self> {
        let first = parts.first().ok_or(Error::EmptyDataset)?;
        if parts.iter().any(|p| p.feature_names != first.feature_names) {
            return Err(Error::invalid("datasets have different feature lists"));
        }
        let mut out = first.clone();
        for p in &parts[1..] {
            out.inputs.extend(p.inputs.iter().cloned());
            out.target.extend_from_slice(&p.target);
        }
        Ok(out)
    }

    /// CSV with one `name[unit]` column per feature and a trailing `bw[mm]` target.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut head: Vec<String> = self
            .feature_names
            .iter()
            .zip(&self.feature_units)
            .map(|(n, u)| if u.is_empty() { n.clone() } else { format!("{n}[{u}]") })
            .collect();
        head.push("bw[mm]".into());
        w.write_record(&head).map_err(csv_error)?;
        for (row, y) in self.inputs.iter().zip(&self.target) {
            let mut rec: Vec<String> = row.iter().map(f64::to_string).collect();
            rec.push(y.to_string());
            w.write_record(&rec).map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let headers: Vec<String> = r.headers().map_err(csv_error)?.iter().map(str::to_string).collect();
        let target_col = headers
            .iter()
            .position(|h| split_header(h).0 == "bw")
            .ok_or_else(|| Error::Parse("dataset needs a `bw[mm]` target column".into()))?;
        let mut names = Vec::new();
        let mut units = Vec::new();
        for (j, h) in headers.iter().enumerate() {
            if j != target_col {
                let (n, u) = split_header(h);
                names.push(n);
                units.push(u);
            }
        }
        let mut inputs = Vec::new();
        let mut target = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(csv_error)?;
            let mut row = Vec::with_capacity(names.len());
            for (j, field) in rec.iter().enumerate() {
                let v: f64 = field.trim().parse().map_err(|_| {
                    Error::Parse(format!("row {}, column `{}`: `{field}` is not a number", line + 2, headers[j]))
                })?;
                if j == target_col {
                    target.push(v);
                } else {
                    row.push(v);
                }
            }
            inputs.push(row);
        }
        Dataset::new(names, units, inputs, target)
    }
}

/// Seeded random partition of `0..n` into sorted train and validation index sets.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid("train fraction must lie in (0, 1)"));
    }
    let n_train = (train_fraction * n as f64).round() as usize;
    if n_train < 1 || n - n_train.min(n) < 2 {
        return Err(Error::invalid(format!("split of {n} rows leaves fewer than 2 validation rows")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (a, b) = idx.split_at(n_train);
    let (mut train, mut validation) = (a.to_vec(), b.to_vec());
    train.sort_unstable();
    validation.sort_unstable();
    Ok((train, validation))
}

pub fn split_dataset(d: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, validation) = split_indices(d.rows(), train_fraction, seed)?;
    Ok((d.subset(&train), d.subset(&validation)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Linear,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
            Activation::Linear => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn slope(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Linear => 1.0,
        }
    }
}

/// Transform between the target in millimetres and the space the model regresses in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputTransform {
    Identity,
    NaturalLog,
}

impl OutputTransform {
    fn forward(self, values: &[f64]) -> Result<Vec<f64>> {
        match self {
            OutputTransform::Identity => Ok(values.to_vec()),
            OutputTransform::NaturalLog => log_values(values),
        }
    }

    fn inverse(self, z: f64) -> f64 {
        match self {
            OutputTransform::Identity => z,
            OutputTransform::NaturalLog => z.exp(),
        }
    }
}

/// Fully connected feed-forward network. Weights are stored per layer in
/// row-major (output, input) order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub feature_names: Vec<String>,
    pub layer_sizes: Vec<usize>,
    pub activations: Vec<Activation>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub normalizers: Vec<MinMax>,
    pub transform: OutputTransform,
    pub seed: u64,
}

impl MlpModel {
    /// Glorot-uniform initialized network. The first hidden layer is rectified,
    /// later hidden layers are sigmoid and the output is linear.
    pub fn new(
        feature_names: Vec<String>,
        hidden: &[usize],
        normalizers: Vec<MinMax>,
        transform: OutputTransform,
        seed: u64,
    ) -> Result<Self> {
        let d = feature_names.len();
        if d == 0 || normalizers.len() != d {
            return Err(Error::invalid("one normalizer per feature is required"));
        }
        if hidden.contains(&0) {
            return Err(Error::invalid("hidden layers must be non-empty"));
        }
        let mut layer_sizes = vec![d];
        layer_sizes.extend_from_slice(hidden);
        layer_sizes.push(1);
        let activations: Vec<Activation> = (0..layer_sizes.len() - 1)
            .map(|l| {
                if l + 2 == layer_sizes.len() {
                    Activation::Linear
                } else if l == 0 {
                    Activation::Relu
                } else {
                    Activation::Sigmoid
                }
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            weights.push((0..fan_in * fan_out).map(|_| rng.gen_range(-limit..limit)).collect());
            biases.push(vec![0.0; fan_out]);
        }
        Ok(Self { feature_names, layer_sizes, activations, weights, biases, normalizers, transform, seed })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// All parameters, layer by layer: weights then biases.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            p.extend_from_slice(w);
            p.extend_from_slice(b);
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.param_count());
        let mut at = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let (nw, nb) = (w.len(), b.len());
            w.copy_from_slice(&p[at..at + nw]);
            at += nw;
            b.copy_from_slice(&p[at..at + nb]);
            at += nb;
        }
    }

    fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.normalizers).map(|(v, n)| n.apply(*v)).collect()
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::invalid(format!("expected {} features, got {}", self.input_dim(), x.len())));
        }
        Ok(())
    }

    /// True when any feature lies outside the range seen in training.
    pub fn is_extrapolating(&self, x: &[f64]) -> bool {
        x.iter().zip(&self.normalizers).any(|(v, n)| !n.contains(*v))
    }

    /// Network output (in the transformed target space) for an already-normalized input.
    fn raw(&self, z: &[f64], ws: &mut Workspace) -> f64 {
        ws.post[0].copy_from_slice(z);
        for l in 0..self.weights.len() {
            let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let w = &self.weights[l];
            for o in 0..n_out {
                let row = &w[o * n_in..(o + 1) * n_in];
                let s: f64 = row.iter().zip(&ws.post[l]).map(|(a, b)| a * b).sum::<f64>() + self.biases[l][o];
                ws.pre[l][o] = s;
                ws.post[l + 1][o] = self.activations[l].apply(s);
            }
        }
        ws.post[self.weights.len()][0]
    }

    /// Network output and its gradient with respect to every parameter.
    fn raw_with_gradient(&self, z: &[f64], ws: &mut Workspace, grad: &mut [f64]) -> f64 {
        let out = self.raw(z, ws);
        let last = self.weights.len() - 1;
        ws.delta[last][0] = self.activations[last].slope(ws.pre[last][0], out);
        let mut end = grad.len();
        for l in (0..=last).rev() {
            let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let b_start = end - n_out;
            let w_start = b_start - n_out * n_in;
            for o in 0..n_out {
                let d = ws.delta[l][o];
                grad[b_start + o] = d;
                let g = &mut grad[w_start + o * n_in..w_start + (o + 1) * n_in];
                for (gi, a) in g.iter_mut().zip(&ws.post[l]) {
                    *gi = d * a;
                }
            }
            if l > 0 {
                let w = &self.weights[l];
                let (before, after) = ws.delta.split_at_mut(l);
                let (prev, cur) = (&mut before[l - 1], &after[0]);
                for i in 0..n_in {
                    let s: f64 = (0..n_out).map(|o| w[o * n_in + i] * cur[o]).sum();
                    prev[i] = s * self.activations[l - 1].slope(ws.pre[l - 1][i], ws.post[l][i]);
                }
            }
            end = w_start;
        }
        out
    }

    /// Output of the network before the inverse target transform.
    pub fn network_output(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        Ok(self.raw(&self.normalize(x), &mut Workspace::new(&self.layer_sizes)))
    }

    /// Gradient of the network output with respect to the parameter vector.
    pub fn output_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_dim(x)?;
        let mut g = vec![0.0; self.param_count()];
        let y = self.raw_with_gradient(&self.normalize(x), &mut Workspace::new(&self.layer_sizes), &mut g);
        Ok((y, g))
    }

    /// Bead width in millimetres.
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        mlp_forward(self, x)
    }

    pub fn predict_rows(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
        let mut ws = Workspace::new(&self.layer_sizes);
        rows.iter()
            .map(|x| {
                self.check_dim(x)?;
                Ok(self.transform.inverse(self.raw(&self.normalize(x), &mut ws)))
            })
            .collect()
    }
}

struct Workspace {
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
    delta: Vec<Vec<f64>>,
}

impl Workspace {
    fn new(sizes: &[usize]) -> Self {
        Self {
            pre: sizes[1..].iter().map(|&n| vec![0.0; n]).collect(),
            post: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            delta: sizes[1..].iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// Normalize, run the network, undo the target transform.
pub fn mlp_forward(m: &MlpModel, x: &[f64]) -> Result<f64> {
    Ok(m.transform.inverse(m.network_output(x)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub max_epochs: usize,
    pub seed: u64,
    pub train_fraction: f64,
    pub initial_damping: f64,
    pub max_damping: f64,
    /// Stop once the loss falls by less than this fraction over `patience` accepted steps.
    pub tolerance: f64,
    pub patience: usize,
    /// Min-max normalize inputs; when false the normalizers are the identity.
    pub normalize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: DEFAULT_HIDDEN.to_vec(),
            max_epochs: MAX_EPOCHS,
            seed: 7,
            train_fraction: DEFAULT_TRAIN_FRACTION,
            initial_damping: 1e-3,
            max_damping: 1e10,
            tolerance: 1e-2,
            patience: 20,
            normalize: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    EpochLimit,
    DampingLimit,
    Converged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Validation metrics in millimetres.
    pub metrics: FitMetrics,
    pub epochs_run: usize,
    pub final_loss: f64,
    pub split_seed: u64,
    pub stop_reason: StopReason,
    /// Training loss after initialization and after every accepted step.
    pub loss_history: Vec<f64>,
}

/// Splits `d`, trains on the training part and reports on the validation part.
pub fn mlp_train_lm(d: &Dataset, cfg: &TrainConfig) -> Result<(MlpModel, TrainReport)> {
    let (train, validation) = split_dataset(d, cfg.train_fraction, cfg.seed)?;
    train_on_split(&train, &validation, cfg)
}

/// Trains on `train` and reports metrics on `validation`.
pub fn train_on_split(train: &Dataset, validation: &Dataset, cfg: &TrainConfig) -> Result<(MlpModel, TrainReport)> {
    if cfg.max_epochs > MAX_EPOCHS {
        return Err(Error::invalid(format!("at most {MAX_EPOCHS} epochs")));
    }
    if train.rows() == 0 {
        return Err(Error::EmptyDataset);
    }
    let normalizers: Vec<MinMax> = (0..train.dim())
        .map(|j| {
            if cfg.normalize {
                MinMax::fit(&train.inputs.iter().map(|r| r[j]).collect::<Vec<_>>())
            } else {
                MinMax::identity()
            }
        })
        .collect();
    let mut model =
        MlpModel::new(train.feature_names.clone(), &cfg.hidden, normalizers, OutputTransform::NaturalLog, cfg.seed)?;
    let z: Vec<Vec<f64>> = train.inputs.iter().map(|r| model.normalize(r)).collect();
    let y = model.transform.forward(&train.target)?;
    // Start from the constant predictor so the first steps shape the response, not the offset.
    *model.biases.last_mut().unwrap().first_mut().unwrap() = y.iter().sum::<f64>() / y.len() as f64;
    let outcome = levenberg_marquardt(&mut model, &z, &y, cfg);
    let metrics = |m: &MlpModel| -> Result<FitMetrics> {
        let predicted = m.predict_rows(&validation.inputs)?;
        metrics_from_slices(&predicted, &validation.target)
    };
    match outcome {
        Ok(o) => {
            let report = TrainReport {
                metrics: metrics(&model)?,
                epochs_run: o.epochs,
                final_loss: *o.history.last().unwrap(),
                split_seed: cfg.seed,
                stop_reason: o.stop,
                loss_history: o.history,
            };
            Ok((model, report))
        }
        Err((reason, o)) => {
            let report = TrainReport {
                metrics: metrics(&model).unwrap_or(FitMetrics {
                    rmse: f64::NAN,
                    mae: f64::NAN,
                    r2: f64::NAN,
                    bf_percent: f64::NAN,
                }),
                epochs_run: o.epochs,
                final_loss: *o.history.last().unwrap(),
                split_seed: cfg.seed,
                stop_reason: o.stop,
                loss_history: o.history,
            };
            Err(Error::TrainingFailure { reason, best: Box::new((model, report)) })
        }
    }
}

struct LmOutcome {
    epochs: usize,
    history: Vec<f64>,
    stop: StopReason,
}

fn half_sse(model: &MlpModel, z: &[Vec<f64>], y: &[f64], ws: &mut Workspace) -> f64 {
    0.5 * z.iter().zip(y).map(|(x, t)| (model.raw(x, ws) - t).powi(2)).sum::<f64>()
}

/// Full-batch Levenberg-Marquardt on half the sum of squared residuals.
/// On failure the model holds the best accepted iterate.
fn levenberg_marquardt(
    model: &mut MlpModel,
    z: &[Vec<f64>],
    y: &[f64],
    cfg: &TrainConfig,
) -> std::result::Result<LmOutcome, (String, LmOutcome)> {
    let p = model.param_count();
    let n = z.len();
    let mut ws = Workspace::new(&model.layer_sizes);
    let mut theta = model.params();
    let mut loss = half_sse(model, z, y, &mut ws);
    let mut out = LmOutcome { epochs: 0, history: vec![loss], stop: StopReason::EpochLimit };
    if !loss.is_finite() {
        return Err(("initial loss is not finite".into(), out));
    }
    let mut lambda = cfg.initial_damping;
    let mut jt = Mat::<f64>::zeros(p, n);
    let mut hessian = Mat::<f64>::zeros(p, p);
    let mut residual = Col::<f64>::zeros(n);
    let mut grad = vec![0.0; p];
    'epochs: while out.epochs < cfg.max_epochs {
        for (j, (x, t)) in z.iter().zip(y).enumerate() {
            let f = model.raw_with_gradient(x, &mut ws, &mut grad);
            residual.write(j, f - t);
            let col = jt.col_mut(j).try_as_slice_mut().expect("columns are contiguous");
            col.copy_from_slice(&grad);
        }
        triangular::matmul(
            hessian.as_mut(),
            BlockStructure::TriangularLower,
            jt.as_ref(),
            BlockStructure::Rectangular,
            jt.transpose(),
            BlockStructure::Rectangular,
            None,
            1.0,
            Parallelism::None,
        );
        let gradient: Col<f64> = &jt * &residual;
        if (0..p).any(|i| !gradient.read(i).is_finite()) {
            return Err(("non-finite gradient".into(), out));
        }
        loop {
            let mut damped = hessian.clone();
            for i in 0..p {
                damped.write(i, i, damped.read(i, i) + lambda);
            }
            // An indefinite factorization from rounding is treated like a rejected step.
            let accepted = match Cholesky::try_new(damped.as_ref(), Side::Lower) {
                Ok(chol) => {
                    let step = chol.solve(&gradient);
                    let candidate: Vec<f64> = theta.iter().enumerate().map(|(i, t)| t - step.read(i)).collect();
                    model.set_params(&candidate);
                    let trial = half_sse(model, z, y, &mut ws);
                    if trial < loss {
                        theta = candidate;
                        loss = trial;
                        true
                    } else {
                        false
                    }
                }
                Err(_) => false,
            };
            if accepted {
                lambda /= 10.0;
                out.epochs += 1;
                out.history.push(loss);
                if let Some(&old) = out.history.len().checked_sub(cfg.patience + 1).map(|i| &out.history[i]) {
                    if old - loss <= cfg.tolerance * old {
                        out.stop = StopReason::Converged;
                        break 'epochs;
                    }
                }
                continue 'epochs;
            }
            lambda *= 10.0;
            if lambda > cfg.max_damping {
                model.set_params(&theta);
                out.stop = StopReason::DampingLimit;
                break 'epochs;
            }
        }
    }
    model.set_params(&theta);
    Ok(out)
}

/// Complete polynomial of total degree three in the normalized features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RsmModel {
    pub feature_names: Vec<String>,
    pub degree: u32,
    pub exponents: Vec<Vec<u32>>,
    pub coefficients: Vec<f64>,
    pub normalizers: Vec<MinMax>,
    pub transform: OutputTransform,
}

/// Exponent vectors of every monomial of total degree <= `degree`,
/// ordered by degree and then lexicographically from the first feature.
pub fn monomial_exponents(dim: usize, degree: u32) -> Vec<Vec<u32>> {
    fn rec(prefix: &mut Vec<u32>, dim: usize, left: u32, out: &mut Vec<Vec<u32>>) {
        if prefix.len() == dim {
            if left == 0 {
                out.push(prefix.clone());
            }
            return;
        }
        for e in (0..=left).rev() {
            prefix.push(e);
            rec(prefix, dim, left - e, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    for total in 0..=degree {
        rec(&mut Vec::new(), dim, total, &mut out);
    }
    out
}

pub fn monomial_name(names: &[String], exponents: &[u32]) -> String {
    let parts: Vec<String> = names
        .iter()
        .zip(exponents)
        .filter(|(_, &e)| e > 0)
        .map(|(n, &e)| if e == 1 { n.clone() } else { format!("{n}^{e}") })
        .collect();
    if parts.is_empty() {
        "1".into()
    } else {
        parts.join("*")
    }
}

fn monomial_values(z: &[f64], exponents: &[Vec<u32>]) -> Vec<f64> {
    exponents
        .iter()
        .map(|e| z.iter().zip(e).map(|(v, &k)| v.powi(k as i32)).product())
        .collect()
}

impl RsmModel {
    pub const DEGREE: u32 = 3;

    /// Least-squares fit on every row of `d`.
    pub fn fit(d: &Dataset, transform: OutputTransform) -> Result<Self> {
        let exponents = monomial_exponents(d.dim(), Self::DEGREE);
        let m = exponents.len();
        if d.rows() < m {
            return Err(Error::invalid(format!("{} rows cannot determine {m} cubic coefficients", d.rows())));
        }
        let normalizers: Vec<MinMax> = (0..d.dim())
            .map(|j| MinMax::fit(&d.inputs.iter().map(|r| r[j]).collect::<Vec<_>>()))
            .collect();
        let phi = DMatrix::from_fn(d.rows(), m, |_, _| 0.0);
        let mut phi = phi;
        for (i, row) in d.inputs.iter().enumerate() {
            let z: Vec<f64> = row.iter().zip(&normalizers).map(|(v, n)| n.apply(*v)).collect();
            for (j, v) in monomial_values(&z, &exponents).into_iter().enumerate() {
                phi[(i, j)] = v;
            }
        }
        let collinear = collinear_columns(&phi);
        if !collinear.is_empty() {
            return Err(Error::RankDeficient(
                collinear.iter().map(|&j| monomial_name(&d.feature_names, &exponents[j])).collect(),
            ));
        }
        let y = DVector::from_vec(transform.forward(&d.target)?);
        let qr = phi.qr();
        let rhs = qr.q().transpose() * y;
        let coefficients = qr
            .r()
            .solve_upper_triangular(&rhs)
            .ok_or_else(|| Error::RankDeficient(vec!["(triangular factor is singular)".into()]))?;
        Ok(Self {
            feature_names: d.feature_names.clone(),
            degree: Self::DEGREE,
            exponents,
            coefficients: coefficients.iter().copied().collect(),
            normalizers,
            transform,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.normalizers.len()
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.normalizers).map(|(v, n)| n.apply(*v)).collect()
    }

    /// Polynomial value in the transformed target space for a normalized input.
    pub fn eval_normalized(&self, z: &[f64]) -> f64 {
        monomial_values(z, &self.exponents).iter().zip(&self.coefficients).map(|(a, b)| a * b).sum()
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.input_dim() {
            return Err(Error::invalid(format!("expected {} features, got {}", self.input_dim(), x.len())));
        }
        Ok(self.transform.inverse(self.eval_normalized(&self.normalize(x))))
    }

    pub fn is_extrapolating(&self, x: &[f64]) -> bool {
        x.iter().zip(&self.normalizers).any(|(v, n)| !n.contains(*v))
    }

    /// Design-matrix row of the normalized input (exposed for residual checks).
    pub fn basis(&self, x: &[f64]) -> Vec<f64> {
        monomial_values(&self.normalize(x), &self.exponents)
    }
}

/// Columns that modified Gram-Schmidt finds to lie in the span of earlier ones.
fn collinear_columns(phi: &DMatrix<f64>) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut out = Vec::new();
    for j in 0..phi.ncols() {
        let original = phi.column(j).into_owned();
        let norm0 = original.norm();
        let mut v = original;
        for _ in 0..2 {
            for q in &basis {
                let c = q.dot(&v);
                v.axpy(-c, q, 1.0);
            }
        }
        let norm = v.norm();
        if norm0 == 0.0 || norm <= 1e-9 * norm0 {
            out.push(j);
        } else {
            basis.push(v / norm);
        }
    }
    out
}

/// Fits on a seeded 80 % split and reports metrics (in mm) on the remaining 20 %.
pub fn rsm_fit(d: &Dataset, transform: OutputTransform, seed: u64) -> Result<(RsmModel, FitMetrics)> {
    let (train, validation) = split_dataset(d, DEFAULT_TRAIN_FRACTION, seed)?;
    let model = RsmModel::fit(&train, transform)?;
    let predicted = validation.inputs.iter().map(|x| model.predict(x)).collect::<Result<Vec<_>>>()?;
    Ok((model, metrics_from_slices(&predicted, &validation.target)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub metrics: FitMetrics,
}

#[derive(Debug, Clone)]
pub struct AblationEntry {
    pub inputs: Vec<String>,
    pub model: MlpModel,
    pub report: TrainReport,
}

impl AblationEntry {
    pub fn label(&self) -> String {
        format!("F2({})", self.inputs.iter().map(|s| s.to_uppercase()).collect::<Vec<_>>().join(", "))
    }
}

/// Trains one network per feature subset in [`ABLATION_INPUTS`] with a shared
/// split and seed.
pub fn f2_ablation(d: &Dataset, cfg: &TrainConfig) -> Result<Vec<AblationEntry>> {
    ABLATION_INPUTS
        .iter()
        .map(|names| {
            let sub = d.select(names)?;
            let (model, report) = mlp_train_lm(&sub, cfg)?;
            Ok(AblationEntry { inputs: names.iter().map(|s| s.to_string()).collect(), model, report })
        })
        .collect()
}

pub fn ablation_table(entries: &[AblationEntry]) -> Vec<ComparisonRow> {
    entries.iter().map(|e| ComparisonRow { label: e.label(), metrics: e.report.metrics }).collect()
}

pub const F3_INPUTS: [&str; 3] = ["ts", "lp", "n"];

#[derive(Debug, Clone)]
pub struct F3Comparison {
    pub f3: (MlpModel, TrainReport),
    pub f2: (MlpModel, TrainReport),
    pub rows: Vec<ComparisonRow>,
}

/// Direct parameter-to-property network against the composed chain.
///
/// Both networks share one random split of the record's valid rows. F3 maps
/// (TS, LP, n) to BW. F2 maps measured (MPW, MPL, MPT, n) to BW; the chain is
/// evaluated on validation rows with MPW replaced by the F1 simulation of the
/// record's laser-power and layer channels.
pub fn f3_vs_composed(record: &ExperimentRecord, f1: &FittedCompositeF1, cfg: &TrainConfig) -> Result<F3Comparison> {
    let f3_data = plant::make_dataset(record, &F3_INPUTS)?;
    let f2_data = plant::make_f2_training_set(record)?;
    let (train, validation) = split_indices(f2_data.rows(), cfg.train_fraction, cfg.seed)?;

    let f3 = train_on_split(&f3_data.subset(&train), &f3_data.subset(&validation), cfg)?;
    let f2 = train_on_split(&f2_data.subset(&train), &f2_data.subset(&validation), cfg)?;

    let simulated = f1.predict(&record.lp, &record.layer)?;
    let with_sim = plant::ExperimentRecord { mpw: simulated, ..record.clone() };
    let chain_data = plant::make_f2_training_set(&with_sim)?;
    let chain_validation = chain_data.subset(&validation);
    let predicted = f2.0.predict_rows(&chain_validation.inputs)?;
    let chain_metrics = metrics_from_slices(&predicted, &chain_validation.target)?;

    let rows = vec![
        ComparisonRow { label: "F3(TS, LP, n)".into(), metrics: f3.1.metrics },
        ComparisonRow { label: "F2(F1(TS, LP, n))".into(), metrics: chain_metrics },
    ];
    Ok(F3Comparison { f3, f2, rows })
}

/// `model,rmse,mae,r2` table.
pub fn write_comparison_csv<W: Write>(rows: &[ComparisonRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["model", "rmse", "mae", "r2"]).map_err(csv_error)?;
    for r in rows {
        w.write_record([
            r.label.clone(),
            r.metrics.rmse.to_string(),
            r.metrics.mae.to_string(),
            r.metrics.r2.to_string(),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}
