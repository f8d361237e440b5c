use std::path::Path;

use anyhow::Context;
use serde::Deserialize;

use shapeflow::cohort::SimConfig;
use shapeflow::pipeline::{write_summary_csv, EvalTable, ExperimentConfig};

/// Config of `report --config`: a simulated cohort and the protocol run on it.
#[derive(Debug, Deserialize)]
pub struct ExperimentFile {
    /// Stem of the files written to the output directory.
    pub name: String,
    #[serde(default)]
    pub simulation: SimConfig,
    #[serde(default)]
    pub experiment: ExperimentConfig,
}

/// Writes `<name>.csv` (cell summaries), `<name>.txt` and `<name>_rows.csv`.
pub fn write(table: &EvalTable, baseline: &str, name: &str, out: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_summary_csv(&table.summarize(baseline), out.join(format!("{name}.csv")))?;
    table.write_csv(out.join(format!("{name}_rows.csv")))?;
    let text = table.render_text(baseline, name);
    std::fs::write(out.join(format!("{name}.txt")), &text)?;
    print!("{text}");
    Ok(())
}
