use std::path::PathBuf;

use clap::Args;
use dedtwin_core::vision::{extract_geometry, read_pgm, CropRect, MeltPoolGeometry};

use crate::{CliError, CliResult, Run};

#[derive(Debug, Args)]
pub struct VisionArgs {
    /// Directory of `.pgm` frames, processed in file-name order.
    #[arg(long)]
    pub frames: PathBuf,
    /// Region of interest as `x0,y0,width,height`; the whole frame by default.
    #[arg(long, value_delimiter = ',', num_args = 4)]
    pub crop: Vec<usize>,
    /// Millimetres per pixel.
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
}

pub fn run(run: &mut Run, args: &VisionArgs) -> CliResult<()> {
    if !(args.scale > 0.0) {
        return Err(CliError::Input("--scale must be positive".into()));
    }
    let entries = std::fs::read_dir(&args.frames)
        .map_err(|e| CliError::Input(format!("cannot list {}: {e}", args.frames.display())))?;
    let mut frames: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("pgm")))
        .collect();
    frames.sort();
    if frames.is_empty() {
        return Err(CliError::Input(format!("no .pgm frames in {}", args.frames.display())));
    }

    let mut out = String::from("frame_index,mpw_mm,mpl_mm,valid,file,area_px,note\n");
    let mut warnings = 0;
    for (i, path) in frames.iter().enumerate() {
        let file = path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
        let result = run.read_input(path).and_then(|bytes| {
            let img = read_pgm(bytes.as_slice())?;
            let crop = match args.crop.as_slice() {
                [x0, y0, w, h] => CropRect { x0: *x0, y0: *y0, w: *w, h: *h },
                _ => img.full_rect(),
            };
            Ok(extract_geometry(&img, crop, args.scale)?)
        });
        let (g, note) = match result {
            Ok(g) if g.valid => (g, String::new()),
            Ok(g) => (g, "no melt pool".to_string()),
            Err(e) => (MeltPoolGeometry::invalid(), e.to_string()),
        };
        if !g.valid {
            warnings += 1;
            eprintln!("warning: frame {i} ({file}): {note}");
        }
        out.push_str(&format!(
            "{i},{},{},{},{file},{},{}\n",
            g.mpw,
            g.mpl,
            g.valid as u8,
            g.area_px,
            note.replace([',', '\n'], ";")
        ));
    }
    run.write_output("geometry.csv", out.as_bytes())?;
    if warnings > 0 {
        eprintln!("{warnings} of {} frames flagged invalid", frames.len());
    }
    Ok(())
}
