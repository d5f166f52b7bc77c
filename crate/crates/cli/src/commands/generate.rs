use std::path::PathBuf;

use clap::Args;
use dedtwin_core::plant::{run_open_loop, ExperimentProtocol, PlantConfig};

use super::stem;
use crate::{CliError, CliResult, Run};

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Protocol JSON files; one record `<stem>.csv` is written per protocol.
    #[arg(long = "protocol", required = true)]
    pub protocols: Vec<PathBuf>,
    /// Disable sensor noise and the thermal disturbance.
    #[arg(long)]
    pub noise_free: bool,
}

pub fn run(run: &mut Run, args: &GenerateArgs) -> CliResult<()> {
    let mut cfg: PlantConfig = run.config()?;
    cfg.seed = run.seed_or(cfg.seed);
    if args.noise_free {
        cfg = cfg.without_noise();
    }
    cfg.validate()?;
    let mut names = Vec::new();
    for path in &args.protocols {
        let proto: ExperimentProtocol = run.read_json(path)?;
        proto.validate().map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        let name = format!("{}.csv", stem(path)?);
        if names.contains(&name) {
            return Err(CliError::Input(format!("two protocols would both write {name}")));
        }
        let record = run_open_loop(&cfg, &proto)?;
        run.write_csv(&name, |w| record.write_csv(w))?;
        names.push(name);
    }
    Ok(())
}
