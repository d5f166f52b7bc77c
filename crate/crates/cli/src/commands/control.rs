use std::path::PathBuf;

use clap::{Args, ValueEnum};
use dedtwin_core::control::{
    compare_scenarios, nominal_mpl_table, operating_point, step_metrics, step_response, tune_pid, F1Plant,
    LoopConfig, LoopPlant, ObjectiveWeights, OperatingPoint, PidGains, Scenario, StepMetrics, TuningReport,
    VirtualPlant, LOOP_F2_INPUTS,
};
use dedtwin_core::plant::{make_dataset, ExperimentRecord, PlantConfig};
use dedtwin_core::surrogate::{Dataset, OutputTransform, RsmModel};
use dedtwin_core::sysid::FittedCompositeF1;
use serde::{Deserialize, Serialize};

use crate::{CliError, CliResult, Run};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PlantKind {
    /// The virtual process the records were generated from.
    Virtual,
    /// The identified composite model with a per-layer MPL table.
    F1,
}

#[derive(Debug, Args)]
pub struct ControlArgs {
    /// Bead-width response surface over (mpw, mpl, n) from `train --model rsm`.
    #[arg(long, required_unless_present = "records")]
    pub f2: Option<PathBuf>,
    /// Records to fit the bead-width surface from when no --f2 is given.
    #[arg(long = "records", conflicts_with = "f2")]
    pub records: Vec<PathBuf>,
    /// Identified composite model; defaults to the plant's own laser-power dynamics.
    #[arg(long)]
    pub f1: Option<PathBuf>,
    /// Plant configuration; defaults to the built-in plant without noise.
    #[arg(long)]
    pub plant_config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "virtual")]
    pub plant: PlantKind,
    /// Fixed gains for both scenarios instead of tuning.
    #[arg(long)]
    pub gains_from: Option<PathBuf>,
    /// Travel speed held during the loop, mm/s.
    #[arg(long, default_value_t = 10.0)]
    pub ts: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainSets {
    pub property_controlled: PidGains,
    pub signature_controlled: PidGains,
}

#[derive(Serialize)]
struct ScenarioDesign {
    operating_point: OperatingPoint,
    gains: PidGains,
    tuning: Option<TuningReport>,
    /// Unit-step check of the gains on the linearized loop.
    step: StepMetrics,
}

fn fit_surface(run: &mut Run, paths: &[PathBuf]) -> CliResult<RsmModel> {
    let mut parts = Vec::new();
    for p in paths {
        let bytes = run.read_input(p)?;
        let r = ExperimentRecord::read_csv(bytes.as_slice())
            .map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?;
        parts.push(make_dataset(&r, &LOOP_F2_INPUTS)?);
    }
    Ok(RsmModel::fit(&Dataset::concat(&parts)?, OutputTransform::Identity)?)
}

pub fn run(run: &mut Run, args: &ControlArgs) -> CliResult<()> {
    let seed = run.seed_or(1);
    let cfg: LoopConfig = run.config()?;
    cfg.validate()?;
    let mut plant_cfg = match &args.plant_config {
        Some(p) => run.read_json::<PlantConfig>(p)?,
        None => PlantConfig::noise_free(),
    };
    plant_cfg.validate()?;
    plant_cfg.seed = seed;

    let f2: RsmModel = match &args.f2 {
        Some(p) => run.read_json(p)?,
        None => fit_surface(run, &args.records)?,
    };
    if f2.feature_names.iter().map(String::as_str).ne(LOOP_F2_INPUTS) {
        return Err(CliError::Input(format!(
            "the bead-width surface must take ({}), got ({})",
            LOOP_F2_INPUTS.join(", "),
            f2.feature_names.join(", ")
        )));
    }
    let f1: Option<FittedCompositeF1> = match &args.f1 {
        Some(p) => Some(run.read_json(p)?),
        None => None,
    };
    if args.plant == PlantKind::F1 && f1.is_none() {
        return Err(CliError::Input("--plant f1 needs --f1".into()));
    }
    let g_lp = f1.as_ref().map_or(plant_cfg.true_g_lp, |f| f.model.g_lp);

    let make_plant = || -> dedtwin_core::Result<Box<dyn LoopPlant>> {
        match (&args.plant, &f1) {
            (PlantKind::F1, Some(f1)) => {
                let table = nominal_mpl_table(&plant_cfg, cfg.initial_lp, cfg.layers);
                let p = F1Plant::new(f1, table, cfg.dt, cfg.initial_lp)?.with_noise(plant_cfg.noise_std.mpw, seed);
                Ok(Box::new(p))
            }
            _ => Ok(Box::new(VirtualPlant::new(plant_cfg.clone(), cfg.dt, cfg.initial_lp, args.ts)?)),
        }
    };
    let mpl_layer1 = make_plant()?.measure(1.0).mpl;
    let target = cfg.setpoints[0].value;

    let fixed: Option<GainSets> = match &args.gains_from {
        Some(p) => Some(run.read_json(p)?),
        None => None,
    };
    let mut designs = Vec::new();
    for (i, scenario) in [Scenario::PropertyControlled, Scenario::SignatureControlled].into_iter().enumerate() {
        let op = operating_point(scenario, &g_lp, &f2, mpl_layer1, target, cfg.dt)?;
        let (gains, tuning) = match fixed {
            Some(g) => {
                let gains = if i == 0 { g.property_controlled } else { g.signature_controlled };
                gains.validate()?;
                (gains, None)
            }
            None => {
                let (gains, report) = tune_pid(&op.loop_model, &ObjectiveWeights::default(), seed)?;
                (gains, Some(report))
            }
        };
        let step = step_metrics(&step_response(&op.loop_model, &gains)?, cfg.dt);
        designs.push(ScenarioDesign { operating_point: op, gains, tuning, step });
    }
    run.write_json("design.json", &designs)?;

    let (report, traces) = compare_scenarios(&cfg, &make_plant, &f2, &designs[0].gains, &designs[1].gains)?;
    run.write_json("comparison.json", &report)?;
    for (scenario, trace) in ["property-controlled", "signature-controlled"].iter().zip(&traces) {
        run.write_csv(&format!("trace_{scenario}.csv"), |w| trace.write_csv(w))?;
    }
    if let Some(d) = designs.iter().find(|d| !d.step.settled) {
        return Err(CliError::Numerical(format!(
            "gains {:?} do not settle on the linearized {:?} loop",
            d.gains, d.operating_point.scenario
        )));
    }
    Ok(())
}
