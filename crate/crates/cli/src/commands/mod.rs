pub mod control;
pub mod generate;
pub mod identify;
pub mod train;
pub mod vision;

use std::path::Path;

use crate::{CliError, CliResult};

/// File stem used to name per-input outputs.
pub(crate) fn stem(path: &Path) -> CliResult<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_string)
        .ok_or_else(|| CliError::Input(format!("cannot derive a name from {}", path.display())))
}
