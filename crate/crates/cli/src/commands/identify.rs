use std::path::PathBuf;

use clap::{Args, ValueEnum};
use dedtwin_core::plant::ExperimentRecord;
use dedtwin_core::signals::{remove_mean, write_table, FitMetrics, TimeSeries, DEFAULT_LOWPASS_HZ};
use dedtwin_core::sysid::{compare_models, identify_composite, identify_structure, Structure};
use serde::Serialize;

use crate::{CliError, CliResult, Run};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StructureArg {
    FirstOrder,
    SecondOrder,
    Arx,
    HammersteinWiener,
    /// Laser-power transfer function plus a static layer gain.
    Composite,
}

#[derive(Debug, Args)]
pub struct IdentifyArgs {
    /// Record CSV written by `generate` (or measured data in the same layout).
    #[arg(long)]
    pub record: PathBuf,
    #[arg(long, value_enum, default_value = "first-order")]
    pub structure: StructureArg,
    /// Fit every single-input structure and rank them on the validation share.
    #[arg(long, conflicts_with = "structure")]
    pub all: bool,
    /// Trailing share of the record held out for validation
    /// [default: 0.3 for composite, 0.5 otherwise].
    #[arg(long)]
    pub validation: Option<f64>,
    /// Input channel for single-input structures.
    #[arg(long, default_value = "lp")]
    pub input: String,
    /// Output channel.
    #[arg(long, default_value = "mpw")]
    pub output: String,
    /// Low-pass cutoff applied to the output before a composite fit, Hz.
    #[arg(long, default_value_t = DEFAULT_LOWPASS_HZ)]
    pub cutoff: f64,
}

#[derive(Serialize)]
struct MetricsReport<'a> {
    structure: &'a str,
    input: &'a str,
    output: &'a str,
    validation_fraction: f64,
    /// Means removed from the input and output before fitting.
    input_mean: Option<f64>,
    output_mean: Option<f64>,
    training: Option<FitMetrics>,
    validation: Option<FitMetrics>,
}

#[derive(Serialize)]
struct RankedRow<'a> {
    rank: usize,
    structure: &'a str,
    training_bf: Option<f64>,
    validation_bf: Option<f64>,
    error: Option<&'a str>,
}

fn channel<'a>(record: &'a ExperimentRecord, name: &str) -> CliResult<&'a TimeSeries> {
    record.channel(name).ok_or_else(|| CliError::Input(format!("record has no channel `{name}`")))
}

/// 1 on validation samples, 0 on training samples.
fn validation_flags(like: &TimeSeries, fraction: f64) -> CliResult<TimeSeries> {
    let split = ((1.0 - fraction) * like.len() as f64).round() as usize;
    Ok(like.with_values((0..like.len()).map(|k| if k >= split { 1.0 } else { 0.0 }).collect())?)
}

pub fn run(run: &mut Run, args: &IdentifyArgs) -> CliResult<()> {
    run.seed_or(0);
    let bytes = run.read_input(&args.record)?;
    let record = ExperimentRecord::read_csv(bytes.as_slice())
        .map_err(|e| CliError::Input(format!("{}: {e}", args.record.display())))?;
    let composite = !args.all && args.structure == StructureArg::Composite;
    let fraction = args.validation.unwrap_or(if composite { 0.3 } else { 0.5 });
    let y_raw = channel(&record, &args.output)?;
    let flags = validation_flags(y_raw, fraction)?;
    // Single-input structures work on deviations from the record means.
    let (y, y_mean) = remove_mean(y_raw);
    let (u, u_mean) = remove_mean(channel(&record, &args.input)?);
    let restore = |v: Vec<f64>| y.with_values(v.into_iter().map(|x| x + y_mean).collect());

    if args.all {
        let entries = compare_models(&u, &y, fraction)?;
        let rows: Vec<RankedRow> = entries
            .iter()
            .enumerate()
            .map(|(i, e)| RankedRow {
                rank: i + 1,
                structure: e.structure.name(),
                training_bf: e.training.map(|m| m.bf_percent),
                validation_bf: e.validation.map(|m| m.bf_percent),
                error: e.error.as_deref(),
            })
            .collect();
        run.write_json("comparison.json", &rows)?;
        run.write_json("models.json", &entries)?;
        let mut headers = vec!["actual".to_string()];
        let mut columns = vec![y_raw.clone()];
        for e in &entries {
            if let Some(m) = &e.model {
                headers.push(e.structure.name().to_string());
                columns.push(restore(m.simulate(&u, y.values()))?);
            }
        }
        headers.push("validation".into());
        columns.push(flags);
        let h: Vec<&str> = headers.iter().map(String::as_str).collect();
        let c: Vec<&TimeSeries> = columns.iter().collect();
        run.write_csv("prediction.csv", |w| write_table(&h, &c, w))?;
        if entries.iter().all(|e| e.validation.is_none()) {
            return Err(CliError::Numerical("no structure could be fitted".into()));
        }
        return Ok(());
    }

    let (name, training, validation, predicted) = match args.structure {
        StructureArg::Composite => {
            let lp = channel(&record, "lp")?;
            let layer = channel(&record, "n")?;
            let (f1, validation) = identify_composite(lp, layer, y_raw, args.cutoff, fraction)?;
            run.write_json("model.json", &f1)?;
            ("composite", f1.metrics, Some(validation), f1.predict(lp, layer)?)
        }
        s => {
            let structure = match s {
                StructureArg::FirstOrder => Structure::FirstOrder,
                StructureArg::SecondOrder => Structure::SecondOrder,
                StructureArg::Arx => Structure::Arx,
                _ => Structure::HammersteinWiener,
            };
            let entry = identify_structure(structure, &u, &y, fraction)?;
            let model = entry.model.expect("successful fit carries its model");
            run.write_json("model.json", &model)?;
            let predicted = restore(model.simulate(&u, y.values()))?;
            (structure.name(), entry.training, entry.validation, predicted)
        }
    };
    run.write_json(
        "metrics.json",
        &MetricsReport {
            structure: name,
            input: if composite { "lp,n" } else { &args.input },
            output: &args.output,
            validation_fraction: fraction,
            input_mean: (!composite).then_some(u_mean),
            output_mean: (!composite).then_some(y_mean),
            training,
            validation,
        },
    )?;
    run.write_csv("prediction.csv", |w| {
        write_table(&["actual", "predicted", "validation"], &[y_raw, &predicted, &flags], w)
    })
}
