//! Plot-ready CSV bundles collected from a finished run directory.
//!
//! Bundles go to `<run>/plots/`: `decay.csv` from the fit, `flow.csv` with one
//! row per scale `k = 1..N`, and `frd_profiles.csv` from the saved layers.
//! Each bundle is written when its stage output exists.

use std::fs;
use std::path::{Path, PathBuf};

use gradphi::gibbs::FitResult;
use gradphi::rgflow::FlowResult;
use gradphi::FrdStack;
use serde_json::Value;

use crate::commands::{flow_table, frd_profiles, header};
use crate::error::{io_context, CliError, CliResult};
use crate::run::{csv_string, read_json, Cell};

fn write(dir: &Path, name: &str, text: &str) -> CliResult<PathBuf> {
    let p = dir.join(name);
    fs::write(&p, text).map_err(io_context(p.display().to_string()))?;
    Ok(p)
}

/// Write every available bundle; fails when `dir` is missing or holds no stage output.
pub fn emit_plot_data(dir: &Path) -> CliResult<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(CliError::MissingOutput(format!(
            "run directory {}",
            dir.display()
        )));
    }
    let fit_path = dir.join("fit.json");
    let flow_path = dir.join("flow.json");
    let frd_path = dir.join("frd");
    if !fit_path.exists() && !flow_path.exists() && !frd_path.join("manifest.jsonl").exists() {
        return Err(CliError::MissingOutput(format!(
            "no fit, flow or frd output in {}",
            dir.display()
        )));
    }
    let out = dir.join("plots");
    fs::create_dir_all(&out).map_err(io_context(out.display().to_string()))?;
    let mut written = Vec::new();

    if fit_path.exists() {
        let fit: FitResult = read_json(&fit_path)?;
        let mut rows: Vec<_> = fit.residuals.iter().collect();
        rows.sort_by(|a, b| a.separation.total_cmp(&b.separation));
        let table: Vec<Vec<Cell>> = rows
            .iter()
            .map(|r| {
                vec![
                    r.separation.into(),
                    (r.i + 1).into(),
                    (r.j + 1).into(),
                    r.measured.into(),
                    r.model.into(),
                    r.residual.into(),
                    r.se.into(),
                ]
            })
            .collect();
        let h = header(&[
            "separation",
            "i",
            "j",
            "value",
            "prediction",
            "residual",
            "se",
        ]);
        written.push(write(&out, "decay.csv", &csv_string(&h, &table))?);
    }
    if flow_path.exists() {
        let v: Value = read_json(&flow_path)?;
        let res: FlowResult = serde_json::from_value(v["result"].clone())?;
        let (h, rows) = flow_table(&res, 1);
        written.push(write(&out, "flow.csv", &csv_string(&h, &rows))?);
    }
    if frd_path.join("manifest.jsonl").exists() {
        let stack = FrdStack::load(&frd_path)?;
        let (h, rows) = frd_profiles(&stack);
        written.push(write(&out, "frd_profiles.csv", &csv_string(&h, &rows))?);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_and_empty_directories_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            emit_plot_data(&dir.path().join("absent")),
            Err(CliError::MissingOutput(_))
        ));
        assert!(matches!(
            emit_plot_data(dir.path()),
            Err(CliError::MissingOutput(_))
        ));
    }
}
