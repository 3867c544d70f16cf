use std::path::{Path, PathBuf};

use gdm::datagen::{load_series_csv, CsvSchema, Standardizer};
use gdm::model::ObsSeries;

use crate::{CliError, CliResult, SchemaArgs};

/// Expands each pattern, sorted within a pattern; a pattern matching
/// nothing is an error.
pub fn expand(patterns: &[String]) -> CliResult<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = Vec::new();
    for p in patterns {
        let mut hits: Vec<PathBuf> = glob::glob(p)
            .map_err(|e| CliError::usage(format!("bad pattern '{p}': {e}")))?
            .filter_map(|r| r.ok())
            .filter(|p| p.is_file())
            .collect();
        if hits.is_empty() {
            return Err(CliError::Failed(format!("no data file matches '{p}'")));
        }
        hits.sort();
        for h in hits {
            if !out.contains(&h) {
                out.push(h);
            }
        }
    }
    Ok(out)
}

pub fn schema(a: &SchemaArgs) -> CsvSchema {
    CsvSchema {
        time_column: Some(a.time_column.clone()),
        label_column: Some(a.label_column.clone()),
        columns: None,
        classes: a.classes.clone(),
    }
}

pub fn load_all(patterns: &[String], a: &SchemaArgs) -> CliResult<Vec<ObsSeries>> {
    let schema = schema(a);
    let series = expand(patterns)?
        .iter()
        .map(|p| load_series_csv(p, &schema))
        .collect::<gdm::Result<Vec<_>>>()?;
    let n = series[0].dim();
    if series.iter().any(|s| s.dim() != n) {
        return Err(CliError::Failed(
            "data files differ in their number of observation columns".into(),
        ));
    }
    Ok(series)
}

pub fn standardize(series: Vec<ObsSeries>, st: Option<&Standardizer>) -> CliResult<Vec<ObsSeries>> {
    match st {
        None => Ok(series),
        Some(st) => Ok(series.iter().map(|s| st.apply(s)).collect::<gdm::Result<_>>()?),
    }
}

pub fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Failed(format!("{}: {e}", dir.display())))
}

pub fn create_file(path: &Path) -> CliResult<std::io::BufWriter<std::fs::File>> {
    std::fs::File::create(path)
        .map(std::io::BufWriter::new)
        .map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))
}

/// Refuses to write over an input file.
pub fn check_not_input(out: &Path, inputs: &[PathBuf]) -> CliResult<()> {
    let canon = |p: &Path| std::fs::canonicalize(p).ok();
    if let Some(o) = canon(out) {
        if inputs.iter().any(|i| canon(i).as_ref() == Some(&o)) {
            return Err(CliError::usage(format!("output {} would overwrite an input file", out.display())));
        }
    }
    Ok(())
}
