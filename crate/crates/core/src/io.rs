//! On-disk formats: dataset and truth JSON, response-table ingestion into
//! covariance descriptors, and atomic file writes.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dataset, Params, ParamsRecord};
use crate::numcore::SpdMatrix;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetFile {
    pub schema_version: u32,
    pub p: usize,
    pub n: usize,
    pub matrices: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub covariates: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub covariate_names: Option<Vec<String>>,
}

impl From<&Dataset> for DatasetFile {
    fn from(data: &Dataset) -> Self {
        let covariates = data
            .covariates()
            .map(|x| (0..x.nrows()).map(|i| x.row(i).iter().copied().collect()).collect());
        DatasetFile {
            schema_version: SCHEMA_VERSION,
            p: data.p(),
            n: data.n(),
            matrices: data.matrices().iter().map(|m| m.to_row_major()).collect(),
            covariates,
            covariate_names: data.covariate_names().map(|s| s.to_vec()),
        }
    }
}

impl DatasetFile {
    /// Validate lengths, symmetry and positive definiteness, reporting the
    /// first offending position.
    pub fn to_dataset(&self) -> Result<Dataset> {
        let bad = |msg: String| Error::MalformedDataset(msg);
        if self.schema_version != SCHEMA_VERSION {
            return Err(bad(format!("unsupported schema_version {}", self.schema_version)));
        }
        if self.p == 0 {
            return Err(bad("p must be positive".into()));
        }
        if self.matrices.len() != self.n {
            return Err(bad(format!("n = {} but {} matrices given", self.n, self.matrices.len())));
        }
        let p2 = self.p * self.p;
        let mut mats = Vec::with_capacity(self.n);
        for (i, m) in self.matrices.iter().enumerate() {
            if m.len() != p2 {
                return Err(bad(format!("matrices[{i}] has {} entries, expected p^2 = {p2}", m.len())));
            }
            if let Some(j) = m.iter().position(|v| !v.is_finite()) {
                return Err(bad(format!("matrices[{i}][{j}] is not finite")));
            }
            let spd = SpdMatrix::from_row_slice(self.p, m).map_err(|e| bad(format!("matrices[{i}]: {e}")))?;
            if spd.was_jittered() {
                return Err(bad(format!("matrices[{i}] is not positive definite")));
            }
            mats.push(spd);
        }
        let data = Dataset::new(mats).map_err(|e| bad(e.to_string()))?;
        match (&self.covariates, &self.covariate_names) {
            (None, None) => Ok(data),
            (None, Some(_)) => Err(bad("covariate_names given without covariates".into())),
            (Some(rows), names) => {
                if rows.len() != self.n {
                    return Err(bad(format!("covariates has {} rows, expected n = {}", rows.len(), self.n)));
                }
                let q = rows.first().map_or(0, |r| r.len());
                if q == 0 {
                    return Err(bad("covariates[0] is empty".into()));
                }
                for (i, r) in rows.iter().enumerate() {
                    if r.len() != q {
                        return Err(bad(format!("covariates[{i}] has {} entries, expected q = {q}", r.len())));
                    }
                    if let Some(j) = r.iter().position(|v| !v.is_finite()) {
                        return Err(bad(format!("covariates[{i}][{j}] is not finite")));
                    }
                }
                if let Some(names) = names {
                    if names.len() != q {
                        return Err(bad(format!("covariate_names has {} entries, expected q = {q}", names.len())));
                    }
                    if names[0] != "intercept" {
                        return Err(bad(format!("covariate_names[0] is {:?}, expected \"intercept\"", names[0])));
                    }
                }
                if let Some(i) = rows.iter().position(|r| r[0] != 1.0) {
                    return Err(bad(format!("covariates[{i}][0] must be 1 (intercept column)")));
                }
                let x = DMatrix::from_fn(self.n, q, |i, j| rows[i][j]);
                match data.with_covariates(x, names.clone()) {
                    Err(Error::RankDeficientDesign) => Err(bad("covariate design is rank deficient".into())),
                    other => other,
                }
            }
        }
    }
}

/// Generating parameters written next to a simulated dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthFile {
    pub schema_version: u32,
    pub design: String,
    pub seed: u64,
    pub params: ParamsRecord,
    /// One-based true component of each observation.
    pub labels: Vec<usize>,
}

impl TruthFile {
    pub fn new(design: &str, seed: u64, params: &Params, labels: &[usize]) -> Self {
        TruthFile {
            schema_version: SCHEMA_VERSION,
            design: design.to_string(),
            seed,
            params: ParamsRecord::from(params),
            labels: labels.iter().map(|z| z + 1).collect(),
        }
    }
}

/// Write `bytes` to a sibling temporary file and rename it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    let file: DatasetFile = serde_json::from_str(&text).map_err(|e| Error::MalformedDataset(e.to_string()))?;
    file.to_dataset()
}

pub fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    write_json_atomic(path, &DatasetFile::from(data))
}

#[derive(Debug, Clone, Deserialize)]
struct ResponseRow {
    item_id: String,
    replicate_id: String,
    dose_index: usize,
    response: f64,
}

/// Long-format replicate responses grouped by item, then replicate.
#[derive(Debug, Clone, Default)]
pub struct ResponseTable {
    pub items: BTreeMap<String, BTreeMap<String, BTreeMap<usize, f64>>>,
}

impl ResponseTable {
    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let expected = ["item_id", "replicate_id", "dose_index", "response"];
        let headers = rdr.headers().map_err(|e| Error::MalformedTable(e.to_string()))?;
        if headers.iter().ne(expected.iter().copied()) {
            return Err(Error::MalformedTable(format!("header must be {}", expected.join(","))));
        }
        let mut table = ResponseTable::default();
        for (line, rec) in rdr.deserialize::<ResponseRow>().enumerate() {
            let row = rec.map_err(|e| Error::MalformedTable(format!("data row {}: {e}", line + 1)))?;
            if row.dose_index == 0 {
                return Err(Error::MalformedTable(format!("data row {}: dose_index starts at 1", line + 1)));
            }
            if !row.response.is_finite() {
                return Err(Error::MalformedTable(format!("data row {}: response is not finite", line + 1)));
            }
            let doses = table.items.entry(row.item_id.clone()).or_default().entry(row.replicate_id.clone()).or_default();
            if doses.insert(row.dose_index, row.response).is_some() {
                return Err(Error::MalformedTable(format!(
                    "data row {}: duplicate dose {} for item {:?}, replicate {:?}",
                    line + 1,
                    row.dose_index,
                    row.item_id,
                    row.replicate_id
                )));
            }
        }
        if table.items.is_empty() {
            return Err(Error::MalformedTable("table has no data rows".into()));
        }
        Ok(table)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_reader(fs::File::open(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemOutcome {
    pub item_id: String,
    pub replicates: usize,
    pub retained: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExclusionReport {
    pub p: usize,
    pub min_replicates: usize,
    pub retained: usize,
    pub excluded: usize,
    pub items: Vec<ItemOutcome>,
}

#[derive(Debug, Clone)]
pub struct CovDesc {
    pub dataset: DatasetFile,
    pub item_ids: Vec<String>,
    pub report: ExclusionReport,
}

/// Sample covariance `(1/(n−1)) Σ (r_i − r̄)(r_i − r̄)ᵀ` of the rows.
pub fn sample_covariance(rows: &[DVector<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let p = rows[0].len();
    let mean = rows.iter().fold(DVector::zeros(p), |acc, r| acc + r) / n as f64;
    let mut s = DMatrix::zeros(p, p);
    for r in rows {
        let d = r - &mean;
        s += &d * d.transpose();
    }
    s /= (n - 1) as f64;
    DMatrix::from_fn(p, p, |i, j| if i <= j { s[(i, j)] } else { s[(j, i)] })
}

/// Turn each item's replicate response vectors into a dose-dose covariance
/// matrix. `min_replicates` defaults to `p + 1`. Replicates missing any dose
/// are dropped; items with too few complete replicates or a singular
/// covariance are excluded and listed in the report.
pub fn covdesc(table: &ResponseTable, min_replicates: Option<usize>) -> Result<CovDesc> {
    let p = table
        .items
        .values()
        .flat_map(|reps| reps.values())
        .flat_map(|doses| doses.keys().copied())
        .max()
        .ok_or_else(|| Error::MalformedTable("table has no data rows".into()))?;
    let min_rep = min_replicates.unwrap_or(p + 1).max(2);
    let mut matrices = Vec::new();
    let mut item_ids = Vec::new();
    let mut outcomes = Vec::with_capacity(table.items.len());
    for (item, reps) in &table.items {
        let complete: Vec<DVector<f64>> = reps
            .values()
            .filter(|doses| doses.len() == p)
            .map(|doses| DVector::from_iterator(p, doses.values().copied()))
            .collect();
        let dropped = reps.len() - complete.len();
        if dropped > 0 {
            log::warn!("item {item:?}: {dropped} incomplete replicate(s) ignored");
        }
        let reason = if complete.len() < min_rep {
            Some(format!("{} complete replicates, need at least {min_rep}", complete.len()))
        } else {
            let s = sample_covariance(&complete);
            match SpdMatrix::new(s.clone()) {
                Ok(m) if !m.was_jittered() => {
                    matrices.push(s.transpose().as_slice().to_vec());
                    item_ids.push(item.clone());
                    None
                }
                _ => Some("degenerate covariance".to_string()),
            }
        };
        if let Some(r) = &reason {
            log::warn!("item {item:?} excluded: {r}");
        }
        outcomes.push(ItemOutcome { item_id: item.clone(), replicates: complete.len(), retained: reason.is_none(), reason });
    }
    let excluded = outcomes.iter().filter(|o| !o.retained).count();
    if matrices.is_empty() {
        return Err(Error::NoItemsRetained { excluded });
    }
    let n = matrices.len();
    Ok(CovDesc {
        dataset: DatasetFile { schema_version: SCHEMA_VERSION, p, n, matrices, covariates: None, covariate_names: None },
        item_ids,
        report: ExclusionReport { p, min_replicates: min_rep, retained: n, excluded, items: outcomes },
    })
}

/// Read a trace CSV (a header of parameter names, one row per draw) into
/// named columns.
pub fn read_traces<R: Read>(reader: R) -> Result<Vec<(String, Vec<f64>)>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let names: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if names.is_empty() {
        return Err(Error::DegenerateData("trace file has no columns".into()));
    }
    let mut cols = vec![Vec::new(); names.len()];
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        for (j, field) in rec.iter().enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::DegenerateData(format!("draw {}, column {:?}: {field:?} is not a number", line + 1, names[j])))?;
            cols[j].push(v);
        }
    }
    Ok(names.into_iter().zip(cols).collect())
}

pub fn write_trace<W: Write>(name: &str, values: &[f64], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["draw", name])?;
    for (t, v) in values.iter().enumerate() {
        out.write_record([(t + 1).to_string(), format!("{v:.17e}")])?;
    }
    out.flush()?;
    Ok(())
}
