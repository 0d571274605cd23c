//! CSV ingestion. Comma separated, header row required, `.` decimals; missing
//! values (empty, NA, NaN) are hard errors.

use std::path::Path;

use camm::Dataset;

use crate::config::RunConfig;
use crate::CliError;

const MISSING: [&str; 5] = ["", "na", "nan", "null", "n/a"];

pub struct Table {
    pub source: String,
    pub headers: Vec<String>,
    rows: Vec<csv::StringRecord>,
    /// File line of each row, for diagnostics.
    lines: Vec<u64>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Table, CliError> {
        let source = path.display().to_string();
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(|e| CliError::Input(format!("cannot open {source}: {e}")))?;
        let headers: Vec<String> = rdr
            .headers()
            .map_err(|e| CliError::Input(format!("{source}: bad header: {e}")))?
            .iter()
            .map(|h| h.trim().to_string())
            .collect();
        if headers.is_empty() || headers.iter().all(|h| h.is_empty()) {
            return Err(CliError::Input(format!("{source}: header row required")));
        }
        let mut rows = Vec::new();
        let mut lines = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                CliError::Input(format!("{source}: line {line}: {e}"))
            })?;
            lines.push(rec.position().map(|p| p.line()).unwrap_or(0));
            rows.push(rec);
        }
        if rows.is_empty() {
            return Err(CliError::Input(format!("{source}: no data rows")));
        }
        Ok(Table {
            source,
            headers,
            rows,
            lines,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn has(&self, name: &str) -> bool {
        self.headers.iter().any(|h| h == name)
    }

    fn index(&self, name: &str) -> Result<usize, CliError> {
        self.headers.iter().position(|h| h == name).ok_or_else(|| {
            CliError::Input(format!(
                "{}: column '{name}' not found (columns: {})",
                self.source,
                self.headers.join(", ")
            ))
        })
    }

    fn cell<'a>(&'a self, r: usize, c: usize, name: &str) -> Result<&'a str, CliError> {
        let v = self.rows[r].get(c).map(str::trim).unwrap_or("");
        if MISSING.contains(&v.to_ascii_lowercase().as_str()) {
            return Err(CliError::Input(format!(
                "{}: line {}, column '{name}': missing value",
                self.source, self.lines[r]
            )));
        }
        Ok(v)
    }

    pub fn numeric(&self, name: &str) -> Result<Vec<f64>, CliError> {
        let c = self.index(name)?;
        (0..self.len())
            .map(|r| {
                let v = self.cell(r, c, name)?;
                match v.parse::<f64>() {
                    Ok(x) if x.is_finite() => Ok(x),
                    _ => Err(CliError::Input(format!(
                        "{}: line {}, column '{name}': '{v}' is not a finite number",
                        self.source, self.lines[r]
                    ))),
                }
            })
            .collect()
    }

    pub fn strings(&self, name: &str) -> Result<Vec<String>, CliError> {
        let c = self.index(name)?;
        (0..self.len())
            .map(|r| self.cell(r, c, name).map(str::to_string))
            .collect()
    }
}

/// Builds a dataset from the configured column roles. Without `response` the
/// `y` vector is left empty.
pub fn dataset(cfg: &RunConfig, table: &Table, response: Option<&str>) -> Result<Dataset, CliError> {
    let y = match response {
        Some(r) => table.numeric(r)?,
        None => Vec::new(),
    };
    let covariates = cfg
        .covariates
        .iter()
        .map(|c| table.numeric(c))
        .collect::<Result<Vec<_>, _>>()?;
    let mut data = Dataset::new(y, cfg.covariates.clone(), covariates);
    if data.covariates.is_empty() && data.y.is_empty() {
        // keeps `n()` meaningful for intercept-only prediction
        data.y = vec![0.0; table.len()];
    }
    if let Some(coords) = &cfg.coords {
        if coords.len() != 2 {
            return Err(CliError::Input(format!(
                "coords needs exactly two columns, got {}",
                coords.len()
            )));
        }
        let xs = table.numeric(&coords[0])?;
        let ys = table.numeric(&coords[1])?;
        data = data.with_coords(xs.into_iter().zip(ys).map(|(a, b)| [a, b]).collect());
    }
    if let Some(id) = &cfg.location_id {
        data = data.with_location_ids(table.strings(id)?);
    }
    for g in cfg.all_groups() {
        let ids = table.strings(&g)?;
        data = data.with_group(&g, ids);
    }
    Ok(data)
}
