//! Contract between the upstream ECG interpretation model and the rest of
//! the pipeline: the canonical 71-statement predictor catalog, probability
//! matrix ingestion, and orientation of predictor values.
//!
//! Predictors whose probability is inversely associated with reduced
//! ejection fraction (normal ECG, sinus rhythm) are scored as `1 - PV` so a
//! higher oriented score always means higher risk.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

pub const CATALOG_VERSION: &str = "ptbxl-71/v1";
pub const N_PREDICTORS: usize = 71;

/// The 71 diagnostic statement codes in canonical column order, with display
/// names. This order is a fixed artifact constant so that model files and
/// predictor CSVs stay portable.
const CANONICAL_CODES: [(&str, &str); N_PREDICTORS] = [
    ("NORM", "normal ECG"),
    ("ILBBB", "incomplete left bundle branch block"),
    ("INJAL", "subendocardial injury in anterolateral leads"),
    ("ISCLA", "ischemic in lateral leads"),
    ("ANEUR", "ST-T changes compatible with ventricular aneurysm"),
    ("ISCAL", "ischemic in anterolateral leads"),
    ("ASMI", "anteroseptal myocardial infarction"),
    ("SVARR", "supraventricular arrhythmia"),
    ("INJIL", "subendocardial injury in inferolateral leads"),
    ("CRBBB", "complete right bundle branch block"),
    ("LAFB", "left anterior fascicular block"),
    ("ALMI", "anterolateral myocardial infarction"),
    ("ABQRS", "abnormal QRS"),
    ("CLBBB", "complete left bundle branch block"),
    ("ILMI", "inferolateral myocardial infarction"),
    ("INJAS", "subendocardial injury in anteroseptal leads"),
    ("INVT", "inverted T-waves"),
    ("PVC", "ventricular premature complex"),
    ("ISCIL", "ischemic in inferolateral leads"),
    ("1AVB", "first degree AV block"),
    ("ISC_", "non-specific ischemic"),
    ("IVCD", "non-specific intraventricular conduction disturbance (block)"),
    ("LAO/LAE", "left atrial overload/enlargement"),
    ("ISCAN", "ischemic in anterior leads"),
    ("ISCAS", "ischemic in anteroseptal leads"),
    ("AFIB", "atrial fibrillation"),
    ("BIGU", "bigeminal pattern (unknown origin, SV or ventricular)"),
    ("SVTAC", "supraventricular tachycardia"),
    ("AMI", "anterior myocardial infarction"),
    ("NST_", "non-specific ST changes"),
    ("3AVB", "third degree AV block"),
    ("IMI", "inferior myocardial infarction"),
    ("LPR", "prolonged PR interval"),
    ("2AVB", "second degree AV block"),
    ("DIG", "digitalis-effect"),
    ("LMI", "lateral myocardial infarction"),
    ("LOWT", "low amplitude T-waves"),
    ("SR", "sinus rhythm"),
    ("STACH", "sinus tachycardia"),
    ("LPFB", "left posterior fascicular block"),
    ("PACE", "normal functioning artificial pacemaker"),
    ("WPW", "Wolff-Parkinson-White syndrome"),
    ("ISCIN", "ischemic in inferior leads"),
    ("PRC(S)", "premature complex(es)"),
    ("AFLT", "atrial flutter"),
    ("INJIN", "subendocardial injury in inferior leads"),
    ("PAC", "atrial premature complex"),
    ("IPMI", "inferoposterior myocardial infarction"),
    ("STD_", "non-specific ST depression"),
    ("LNGQT", "long QT interval"),
    ("TRIGU", "trigeminal pattern (unknown origin, SV or ventricular)"),
    ("NDT", "non-diagnostic T abnormalities"),
    ("LVH", "left ventricular hypertrophy"),
    ("PSVT", "paroxysmal supraventricular tachycardia"),
    ("INJLA", "subendocardial injury in lateral leads"),
    ("PMI", "posterior myocardial infarction"),
    ("STE_", "non-specific ST elevation"),
    ("SEHYP", "septal hypertrophy"),
    ("SBRAD", "sinus bradycardia"),
    ("RAO/RAE", "right atrial overload/enlargement"),
    ("VCLVH", "voltage criteria (QRS) for left ventricular hypertrophy"),
    ("IRBBB", "incomplete right bundle branch block"),
    ("QWAVE", "Q waves present"),
    ("NT_", "non-specific T-wave changes"),
    ("EL", "electrolytic disturbance or drug (former EDIS)"),
    ("HVOLT", "high QRS voltage"),
    ("RVH", "right ventricular hypertrophy"),
    ("LVOLT", "low QRS voltages in the frontal and horizontal leads"),
    ("SARRH", "sinus arrhythmia"),
    ("IPLMI", "inferoposterolateral myocardial infarction"),
    ("TAB_", "T-wave abnormality"),
];

/// Codes scored as `1 - PV` by default.
const DEFAULT_INVERTED: [&str; 2] = ["NORM", "SR"];

/// Positivity thresholds of the upstream diagnosis model, where known. These
/// are catalog metadata ingested from the upstream model release; they are
/// never computed here.
const DEFAULT_DIAGNOSIS_THRESHOLDS: [(&str, f64); 10] = [
    ("NORM", 0.370),
    ("ILBBB", 0.163),
    ("INJAL", 0.500),
    ("ISCLA", 0.248),
    ("ANEUR", 0.294),
    ("ISCAL", 0.315),
    ("ASMI", 0.300),
    ("SVARR", 0.061),
    ("INJIL", 0.012),
    ("CRBBB", 0.144),
];

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("catalog must contain exactly {expected} unique codes, found {found}")]
    BadCatalogSize { expected: usize, found: usize },
    #[error("duplicate code in catalog: {0}")]
    DuplicateCode(String),
    #[error("inverted code not present in catalog: {0}")]
    InvertedNotInCatalog(String),
    #[error("unknown statement code: {0}")]
    UnknownCode(String),
    #[error("header mismatch: expected {expected}, found {found}")]
    HeaderMismatch { expected: String, found: String },
    #[error("value out of [0,1] for record {record_id}, code {code}: {value}")]
    OutOfRangeValue {
        record_id: String,
        code: String,
        value: f64,
    },
    #[error("duplicate record id: {0}")]
    DuplicateRecordId(String),
    #[error("record {record_id} has {found} values, expected {expected}")]
    BadRowLength {
        record_id: String,
        expected: usize,
        found: usize,
    },
    #[error("row {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub code: String,
    pub display: String,
    pub inverted: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diagnosis_threshold: Option<f64>,
}

/// Ordered catalog of the 71 statement codes plus orientation and upstream
/// diagnosis-threshold metadata.
#[derive(Debug, Clone)]
pub struct PredictorCatalog {
    pub version: String,
    entries: Vec<CatalogEntry>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct CatalogFile {
    version: String,
    codes: Vec<CatalogEntry>,
}

impl PredictorCatalog {
    /// The shipped catalog: canonical order, `{NORM, SR}` inverted, known
    /// diagnosis thresholds attached.
    pub fn default_71() -> Self {
        let thresholds: HashMap<&str, f64> = DEFAULT_DIAGNOSIS_THRESHOLDS.iter().copied().collect();
        let entries = CANONICAL_CODES
            .iter()
            .map(|&(code, display)| CatalogEntry {
                code: code.to_string(),
                display: display.to_string(),
                inverted: DEFAULT_INVERTED.contains(&code),
                diagnosis_threshold: thresholds.get(code).copied(),
            })
            .collect();
        Self::from_entries(CATALOG_VERSION.to_string(), entries)
            .expect("canonical catalog is valid")
    }

    pub fn from_entries(version: String, entries: Vec<CatalogEntry>) -> Result<Self, GatewayError> {
        if entries.len() != N_PREDICTORS {
            return Err(GatewayError::BadCatalogSize {
                expected: N_PREDICTORS,
                found: entries.len(),
            });
        }
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if index.insert(e.code.clone(), i).is_some() {
                return Err(GatewayError::DuplicateCode(e.code.clone()));
            }
        }
        Ok(Self { version, entries, index })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn codes(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.code.clone()).collect()
    }

    pub fn entries(&self) -> &[CatalogEntry] {
        &self.entries
    }

    pub fn position(&self, code: &str) -> Result<usize, GatewayError> {
        self.index
            .get(code)
            .copied()
            .ok_or_else(|| GatewayError::UnknownCode(code.to_string()))
    }

    pub fn contains(&self, code: &str) -> bool {
        self.index.contains_key(code)
    }

    pub fn is_inverted(&self, code: &str) -> Result<bool, GatewayError> {
        Ok(self.entries[self.position(code)?].inverted)
    }

    pub fn display(&self, code: &str) -> Result<&str, GatewayError> {
        Ok(&self.entries[self.position(code)?].display)
    }

    pub fn diagnosis_threshold(&self, code: &str) -> Result<Option<f64>, GatewayError> {
        Ok(self.entries[self.position(code)?].diagnosis_threshold)
    }

    pub fn save_json(&self, path: &Path) -> Result<(), GatewayError> {
        let file = CatalogFile {
            version: self.version.clone(),
            codes: self.entries.clone(),
        };
        let w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(w, &file)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self, GatewayError> {
        let r = BufReader::new(File::open(path)?);
        let file: CatalogFile = serde_json::from_reader(r)?;
        Self::from_entries(file.version, file.codes)
    }
}

/// One record's 71 probabilities, ordered per catalog.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorVector(Vec<f64>);

impl PredictorVector {
    pub fn new(values: Vec<f64>) -> Result<Self, GatewayError> {
        for &v in &values {
            if !(0.0..=1.0).contains(&v) || v.is_nan() {
                return Err(GatewayError::OutOfRangeValue {
                    record_id: String::new(),
                    code: String::new(),
                    value: v,
                });
            }
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Immutable record-by-predictor probability matrix; row order follows the
/// source file.
#[derive(Debug, Clone)]
pub struct PredictorMatrix {
    pub codes: Vec<String>,
    rows: Vec<(String, PredictorVector)>,
    index: HashMap<String, usize>,
}

impl PredictorMatrix {
    pub fn new(codes: Vec<String>) -> Self {
        Self {
            codes,
            rows: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn push_row(&mut self, record_id: String, v: PredictorVector) -> Result<(), GatewayError> {
        if v.len() != self.codes.len() {
            return Err(GatewayError::BadRowLength {
                record_id,
                expected: self.codes.len(),
                found: v.len(),
            });
        }
        if self.index.contains_key(&record_id) {
            return Err(GatewayError::DuplicateRecordId(record_id));
        }
        self.index.insert(record_id.clone(), self.rows.len());
        self.rows.push((record_id, v));
        Ok(())
    }

    pub fn n_records(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> impl Iterator<Item = (&str, &PredictorVector)> {
        self.rows.iter().map(|(id, v)| (id.as_str(), v))
    }

    pub fn get(&self, record_id: &str) -> Option<&PredictorVector> {
        self.index.get(record_id).map(|&i| &self.rows[i].1)
    }

    pub fn value(&self, record_id: &str, code_pos: usize) -> Option<f64> {
        self.get(record_id).map(|v| v.values()[code_pos])
    }
}

/// Oriented score for one code: `1 - PV` for inverted codes, `PV` otherwise.
/// Higher oriented score means higher LEF risk.
pub fn oriented_score(
    v: &PredictorVector,
    code: &str,
    catalog: &PredictorCatalog,
) -> Result<f64, GatewayError> {
    let pos = catalog.position(code)?;
    let pv = v.values()[pos];
    Ok(if catalog.entries[pos].inverted { 1.0 - pv } else { pv })
}

/// Load a predictor CSV whose header is `record_id` followed by the catalog
/// codes in catalog order, exactly.
pub fn load_predictor_matrix(
    path: &Path,
    catalog: &PredictorCatalog,
) -> Result<PredictorMatrix, GatewayError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let expected: Vec<String> = std::iter::once("record_id".to_string())
        .chain(catalog.codes())
        .collect();
    let header: Vec<String> = reader.headers()?.iter().map(|s| s.to_string()).collect();
    if header != expected {
        return Err(GatewayError::HeaderMismatch {
            expected: expected.join(","),
            found: header.join(","),
        });
    }

    let mut matrix = PredictorMatrix::new(catalog.codes());
    for (line0, rec) in reader.records().enumerate() {
        let line = line0 + 2; // 1-based, accounting for the header row
        let rec = rec?;
        if rec.len() != expected.len() {
            return Err(GatewayError::MalformedRow {
                line,
                reason: format!("expected {} fields, found {}", expected.len(), rec.len()),
            });
        }
        let record_id = rec[0].to_string();
        let mut values = Vec::with_capacity(catalog.len());
        for (j, field) in rec.iter().skip(1).enumerate() {
            let v: f64 = field.parse().map_err(|_| GatewayError::MalformedRow {
                line,
                reason: format!("cannot parse '{}' as a probability", field),
            })?;
            if !(0.0..=1.0).contains(&v) || v.is_nan() {
                return Err(GatewayError::OutOfRangeValue {
                    record_id,
                    code: matrix.codes[j].clone(),
                    value: v,
                });
            }
            values.push(v);
        }
        matrix.push_row(record_id, PredictorVector(values))?;
    }
    Ok(matrix)
}

/// Write a predictor CSV in the exact format `load_predictor_matrix` reads.
/// Values are written in shortest round-trip form, so reloading reproduces
/// the matrix bit-exactly.
pub fn write_predictor_matrix(path: &Path, matrix: &PredictorMatrix) -> Result<(), GatewayError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "record_id,{}", matrix.codes.join(","))?;
    for (id, v) in matrix.rows() {
        write!(w, "{id}")?;
        for x in v.values() {
            write!(w, ",{x}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}
