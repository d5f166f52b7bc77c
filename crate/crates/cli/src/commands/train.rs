use std::path::PathBuf;

use clap::{Args, ValueEnum};
use dedtwin_core::plant::{make_dataset, make_f2_training_set, ExperimentRecord};
use dedtwin_core::signals::{FitMetrics, DEFAULT_LOWPASS_HZ};
use dedtwin_core::surrogate::{
    ablation_table, f2_ablation, f3_vs_composed, mlp_train_lm, rsm_fit, write_comparison_csv, ComparisonRow,
    Dataset, MlpModel, OutputTransform, TrainConfig, TrainReport, DEFAULT_HIDDEN, F3_INPUTS, MAX_EPOCHS,
};
use dedtwin_core::sysid::{identify_composite, FittedCompositeF1};
use dedtwin_core::Error;
use serde::Serialize;

use crate::{CliError, CliResult, Run};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    /// Network on the dataset's feature columns.
    Mlp,
    /// Cubic response surface on the dataset's feature columns.
    Rsm,
    /// Direct (TS, LP, n) to bead-width network.
    F3,
    /// One network per signature subset.
    Ablation,
    /// Direct network against the identified chain.
    CompareF3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TransformArg {
    Identity,
    Log,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub model: ModelKind,
    /// Dataset CSVs (`name[unit]` feature columns then `bw[mm]`); concatenated.
    #[arg(long = "dataset", conflicts_with = "records")]
    pub datasets: Vec<PathBuf>,
    /// Record CSVs from `generate`; datasets are built from their valid rows.
    #[arg(long = "records")]
    pub records: Vec<PathBuf>,
    /// Restrict the dataset to these columns, in this order.
    #[arg(long, value_delimiter = ',')]
    pub features: Vec<String>,
    #[arg(long, default_value_t = MAX_EPOCHS)]
    pub epochs: usize,
    /// Hidden layer widths.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Vec<usize>,
    #[arg(long, value_enum, default_value = "identity")]
    pub transform: TransformArg,
    /// Identified composite model for `compare-f3`; fitted from the record when absent.
    #[arg(long)]
    pub f1: Option<PathBuf>,
}

#[derive(Serialize)]
struct RsmReport {
    validation: FitMetrics,
    split_seed: u64,
    rows: usize,
}

#[derive(Serialize)]
struct TrainedNetwork<'a> {
    label: String,
    model: &'a MlpModel,
    report: &'a TrainReport,
}

fn read_records(run: &mut Run, paths: &[PathBuf]) -> CliResult<Vec<ExperimentRecord>> {
    paths
        .iter()
        .map(|p| {
            let bytes = run.read_input(p)?;
            ExperimentRecord::read_csv(bytes.as_slice()).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))
        })
        .collect()
}

fn load_dataset(run: &mut Run, args: &TrainArgs, from_record: fn(&ExperimentRecord) -> dedtwin_core::Result<Dataset>) -> CliResult<Dataset> {
    let parts: Vec<Dataset> = if !args.records.is_empty() {
        let records = read_records(run, &args.records)?;
        records.iter().map(from_record).collect::<dedtwin_core::Result<_>>()?
    } else if !args.datasets.is_empty() {
        let mut parts = Vec::new();
        for p in &args.datasets {
            let bytes = run.read_input(p)?;
            parts.push(Dataset::read_csv(bytes.as_slice()).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?);
        }
        parts
    } else {
        return Err(CliError::Input("pass --dataset or --records".into()));
    };
    let d = Dataset::concat(&parts)?;
    if args.features.is_empty() {
        Ok(d)
    } else {
        let names: Vec<&str> = args.features.iter().map(String::as_str).collect();
        Ok(d.select(&names)?)
    }
}

fn f3_dataset(r: &ExperimentRecord) -> dedtwin_core::Result<Dataset> {
    make_dataset(r, &F3_INPUTS)
}

/// Writes the best iterate of a failed training before reporting the failure.
fn train_network(run: &mut Run, d: &Dataset, cfg: &TrainConfig) -> CliResult<()> {
    match mlp_train_lm(d, cfg) {
        Ok((model, report)) => {
            run.write_json("model.json", &model)?;
            run.write_json("report.json", &report)
        }
        Err(Error::TrainingFailure { reason, best }) => {
            run.write_json("model.json", &best.0)?;
            run.write_json("report.json", &best.1)?;
            Err(CliError::Numerical(format!("training failed: {reason}; best iterate written")))
        }
        Err(e) => Err(e.into()),
    }
}

pub fn run(run: &mut Run, args: &TrainArgs) -> CliResult<()> {
    let seed = run.seed_or(TrainConfig::default().seed);
    let cfg = TrainConfig {
        hidden: if args.hidden.is_empty() { DEFAULT_HIDDEN.to_vec() } else { args.hidden.clone() },
        max_epochs: args.epochs,
        seed,
        ..TrainConfig::default()
    };
    let transform = match args.transform {
        TransformArg::Identity => OutputTransform::Identity,
        TransformArg::Log => OutputTransform::NaturalLog,
    };
    match args.model {
        ModelKind::Mlp => {
            let d = load_dataset(run, args, make_f2_training_set)?;
            train_network(run, &d, &cfg)
        }
        ModelKind::F3 => {
            let d = load_dataset(run, args, f3_dataset)?;
            train_network(run, &d, &cfg)
        }
        ModelKind::Rsm => {
            let d = load_dataset(run, args, make_f2_training_set)?;
            let (model, validation) = rsm_fit(&d, transform, seed)?;
            run.write_json("model.json", &model)?;
            run.write_json("report.json", &RsmReport { validation, split_seed: seed, rows: d.rows() })
        }
        ModelKind::Ablation => {
            let d = load_dataset(run, args, make_f2_training_set)?;
            let entries = f2_ablation(&d, &cfg)?;
            let networks: Vec<TrainedNetwork> = entries
                .iter()
                .map(|e| TrainedNetwork { label: e.label(), model: &e.model, report: &e.report })
                .collect();
            run.write_json("models.json", &networks)?;
            let rows = ablation_table(&entries);
            run.write_csv("table2.csv", |w| write_comparison_csv(&rows, w))
        }
        ModelKind::CompareF3 => {
            if args.records.len() != 1 {
                return Err(CliError::Input("compare-f3 needs exactly one --records file".into()));
            }
            let record = read_records(run, &args.records)?.remove(0);
            let f1: FittedCompositeF1 = match &args.f1 {
                Some(p) => run.read_json(p)?,
                None => {
                    let (f1, _) = identify_composite(&record.lp, &record.layer, &record.mpw, DEFAULT_LOWPASS_HZ, 0.3)?;
                    run.write_json("f1.json", &f1)?;
                    f1
                }
            };
            let cmp = f3_vs_composed(&record, &f1, &cfg)?;
            let networks = [
                TrainedNetwork { label: cmp.rows[0].label.clone(), model: &cmp.f3.0, report: &cmp.f3.1 },
                TrainedNetwork { label: "F2(MPW, MPL, MPT, n)".into(), model: &cmp.f2.0, report: &cmp.f2.1 },
            ];
            run.write_json("models.json", &networks)?;
            let rows: Vec<ComparisonRow> = cmp.rows.clone();
            run.write_csv("table3.csv", |w| write_comparison_csv(&rows, w))
        }
    }
}
