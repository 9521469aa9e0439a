//! Data model, file ingestion, and outcome labeling for ECG cohorts.
//!
//! The positive class is ejection fraction <= 45%. An ECG is labeled positive
//! when an echo with EF <= 45 follows it within the labeling window
//! (inclusive on both ends); ECGs of patients whose every echo shows EF > 45
//! are labeled negative up to the latest echo; everything else is excluded
//! rather than defaulted.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use thiserror::Error;

pub const LEF_EF_THRESHOLD: f64 = 45.0;
pub const DEFAULT_WINDOW_DAYS: i64 = 365;
const SECONDS_PER_DAY: i64 = 86_400;

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("row {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("duplicate record id: {0}")]
    DuplicateRecordId(String),
    #[error("label/EF mismatch for record {0}: label must equal (ef <= 45.0)")]
    LabelEfMismatch(String),
    #[error("empty input")]
    EmptyInput,
    #[error("empty cohort")]
    EmptyCohort,
    #[error("labeling window must be positive, got {0} days")]
    NegativeWindow(i64),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    InternalTest,
    ExternalTest,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::InternalTest => "internal_test",
            Split::ExternalTest => "external_test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "validation" => Some(Split::Validation),
            "internal_test" => Some(Split::InternalTest),
            "external_test" => Some(Split::ExternalTest),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sex {
    Female,
    Male,
}

impl Sex {
    pub fn as_str(&self) -> &'static str {
        match self {
            Sex::Female => "female",
            Sex::Male => "male",
        }
    }

    pub fn parse(s: &str) -> Option<Sex> {
        match s {
            "female" => Some(Sex::Female),
            "male" => Some(Sex::Male),
            _ => None,
        }
    }
}

/// One labeled ECG record. `label == true` means low ejection fraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledRecord {
    pub record_id: String,
    pub patient_id: String,
    pub label: bool,
    pub ef_percent: Option<f64>,
    /// UTC seconds.
    pub ecg_time: i64,
    /// Time of the paired echo or note, UTC seconds.
    pub echo_or_note_time: Option<i64>,
    pub age_years: u32,
    pub sex: Sex,
    pub race_raw: String,
    pub context_raw: String,
    pub split: Split,
}

/// Binary echocardiographic findings. Absent source fields are ingested as
/// false and counted per field.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EchoFindings {
    pub lvwt_ge_13mm: bool,
    pub aortic_stenosis: bool,
    pub aortic_regurgitation: bool,
    pub mitral_regurgitation: bool,
    pub tricuspid_regurgitation: bool,
    pub pulmonary_regurgitation: bool,
    pub rv_systolic_dysfunction: bool,
    pub pericardial_effusion: bool,
    pub pasp_ge_45: bool,
    pub tr_vmax_ge_32: bool,
}

pub const ECHO_FINDING_FIELDS: [&str; 10] = [
    "lvwt_ge_13mm",
    "aortic_stenosis",
    "aortic_regurgitation",
    "mitral_regurgitation",
    "tricuspid_regurgitation",
    "pulmonary_regurgitation",
    "rv_systolic_dysfunction",
    "pericardial_effusion",
    "pasp_ge_45",
    "tr_vmax_ge_32",
];

/// Per-field count of findings ingested as false because the source cell was
/// empty.
#[derive(Debug, Clone, Default, Serialize)]
pub struct FindingsImputation {
    pub imputed: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Default)]
pub struct CohortTable {
    pub records: Vec<LabeledRecord>,
    pub echo_findings: Option<BTreeMap<String, EchoFindings>>,
}

impl CohortTable {
    pub fn records_in_split(&self, split: Split) -> Vec<&LabeledRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }
}

const COHORT_HEADER: [&str; 11] = [
    "record_id",
    "patient_id",
    "label",
    "ef_percent",
    "ecg_time",
    "ref_time",
    "age_years",
    "sex",
    "race_raw",
    "context_raw",
    "split",
];

fn parse_opt_f64(field: &str, line: usize, name: &str) -> Result<Option<f64>, CohortError> {
    if field.is_empty() {
        return Ok(None);
    }
    field
        .parse::<f64>()
        .map(Some)
        .map_err(|_| CohortError::MalformedRow {
            line,
            reason: format!("cannot parse {name} '{field}'"),
        })
}

fn parse_opt_i64(field: &str, line: usize, name: &str) -> Result<Option<i64>, CohortError> {
    if field.is_empty() {
        return Ok(None);
    }
    field
        .parse::<i64>()
        .map(Some)
        .map_err(|_| CohortError::MalformedRow {
            line,
            reason: format!("cannot parse {name} '{field}'"),
        })
}

/// Load a cohort CSV, validating record-id uniqueness, the age floor, and
/// the label/EF consistency rule. Row order is preserved.
pub fn load_cohort(path: &Path) -> Result<CohortTable, CohortError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(|s| s.to_string()).collect();
    if header != COHORT_HEADER {
        return Err(CohortError::MalformedRow {
            line: 1,
            reason: format!(
                "bad header: expected '{}', found '{}'",
                COHORT_HEADER.join(","),
                header.join(",")
            ),
        });
    }

    let mut seen = std::collections::HashSet::new();
    let mut records = Vec::new();
    for (line0, rec) in reader.records().enumerate() {
        let line = line0 + 2;
        let rec = rec?;
        if rec.len() != COHORT_HEADER.len() {
            return Err(CohortError::MalformedRow {
                line,
                reason: format!("expected {} fields, found {}", COHORT_HEADER.len(), rec.len()),
            });
        }
        let record_id = rec[0].to_string();
        if !seen.insert(record_id.clone()) {
            return Err(CohortError::DuplicateRecordId(record_id));
        }
        let label = match &rec[2] {
            "0" => false,
            "1" => true,
            other => {
                return Err(CohortError::MalformedRow {
                    line,
                    reason: format!("label must be 0 or 1, found '{other}'"),
                })
            }
        };
        let ef_percent = parse_opt_f64(&rec[3], line, "ef_percent")?;
        if let Some(ef) = ef_percent {
            if !(0.0..=100.0).contains(&ef) {
                return Err(CohortError::MalformedRow {
                    line,
                    reason: format!("ef_percent out of [0,100]: {ef}"),
                });
            }
            if label != (ef <= LEF_EF_THRESHOLD) {
                return Err(CohortError::LabelEfMismatch(record_id));
            }
        }
        let ecg_time = parse_opt_i64(&rec[4], line, "ecg_time")?.ok_or_else(|| {
            CohortError::MalformedRow {
                line,
                reason: "ecg_time is required".to_string(),
            }
        })?;
        let echo_or_note_time = parse_opt_i64(&rec[5], line, "ref_time")?;
        let age_years: u32 = rec[6].parse().map_err(|_| CohortError::MalformedRow {
            line,
            reason: format!("cannot parse age_years '{}'", &rec[6]),
        })?;
        if age_years < 18 {
            return Err(CohortError::MalformedRow {
                line,
                reason: format!("age_years must be >= 18, found {age_years}"),
            });
        }
        let sex = Sex::parse(&rec[7]).ok_or_else(|| CohortError::MalformedRow {
            line,
            reason: format!("sex must be female|male, found '{}'", &rec[7]),
        })?;
        let split = Split::parse(&rec[10]).ok_or_else(|| CohortError::MalformedRow {
            line,
            reason: format!("unknown split '{}'", &rec[10]),
        })?;
        records.push(LabeledRecord {
            record_id,
            patient_id: rec[1].to_string(),
            label,
            ef_percent,
            ecg_time,
            echo_or_note_time,
            age_years,
            sex,
            race_raw: rec[8].to_string(),
            context_raw: rec[9].to_string(),
            split,
        });
    }
    Ok(CohortTable {
        records,
        echo_findings: None,
    })
}

/// Write a cohort CSV in the exact format `load_cohort` reads.
pub fn write_cohort(path: &Path, table: &CohortTable) -> Result<(), CohortError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", COHORT_HEADER.join(","))?;
    for r in &table.records {
        let ef = r.ef_percent.map(|v| v.to_string()).unwrap_or_default();
        let ref_time = r.echo_or_note_time.map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.record_id,
            r.patient_id,
            r.label as u8,
            ef,
            r.ecg_time,
            ref_time,
            r.age_years,
            r.sex.as_str(),
            r.race_raw,
            r.context_raw,
            r.split.as_str()
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Load the echo-findings CSV (`record_id` plus the ten 0/1 finding columns).
/// Empty cells are imputed as false and counted per field.
pub fn load_echo_findings(
    path: &Path,
) -> Result<(BTreeMap<String, EchoFindings>, FindingsImputation), CohortError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let expected: Vec<String> = std::iter::once("record_id".to_string())
        .chain(ECHO_FINDING_FIELDS.iter().map(|s| s.to_string()))
        .collect();
    let header: Vec<String> = reader.headers()?.iter().map(|s| s.to_string()).collect();
    if header != expected {
        return Err(CohortError::MalformedRow {
            line: 1,
            reason: format!(
                "bad header: expected '{}', found '{}'",
                expected.join(","),
                header.join(",")
            ),
        });
    }

    let mut out = BTreeMap::new();
    let mut imputation = FindingsImputation::default();
    for (line0, rec) in reader.records().enumerate() {
        let line = line0 + 2;
        let rec = rec?;
        let record_id = rec[0].to_string();
        let mut flags = [false; 10];
        for (j, field_name) in ECHO_FINDING_FIELDS.iter().enumerate() {
            match &rec[j + 1] {
                "" => {
                    *imputation.imputed.entry(field_name.to_string()).or_insert(0) += 1;
                }
                "0" => {}
                "1" => flags[j] = true,
                other => {
                    return Err(CohortError::MalformedRow {
                        line,
                        reason: format!("{field_name} must be 0/1/empty, found '{other}'"),
                    })
                }
            }
        }
        let f = EchoFindings {
            lvwt_ge_13mm: flags[0],
            aortic_stenosis: flags[1],
            aortic_regurgitation: flags[2],
            mitral_regurgitation: flags[3],
            tricuspid_regurgitation: flags[4],
            pulmonary_regurgitation: flags[5],
            rv_systolic_dysfunction: flags[6],
            pericardial_effusion: flags[7],
            pasp_ge_45: flags[8],
            tr_vmax_ge_32: flags[9],
        };
        if out.insert(record_id.clone(), f).is_some() {
            return Err(CohortError::DuplicateRecordId(record_id));
        }
    }
    Ok((out, imputation))
}

/// An echocardiogram event used by the labeling rule.
#[derive(Debug, Clone, PartialEq)]
pub struct EchoEvent {
    pub patient_id: String,
    pub echo_time: i64,
    pub ef_percent: f64,
}

/// An ECG acquisition event used by the labeling rule.
#[derive(Debug, Clone, PartialEq)]
pub struct EcgEvent {
    pub patient_id: String,
    pub record_id: String,
    pub ecg_time: i64,
}

/// Result of applying the labeling rule to one ECG.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelAssignment {
    pub record_id: String,
    pub patient_id: String,
    pub label: bool,
    /// EF of the echo that determined the label.
    pub ef_percent: f64,
    pub ecg_time: i64,
    /// Time of the determining echo (nearest in-window low echo for
    /// positives, latest echo for negatives).
    pub ref_time: i64,
}

#[derive(Debug, Clone, Default)]
pub struct LabelOutcome {
    /// Sorted by (patient_id, ecg_time, record_id).
    pub labeled: Vec<LabelAssignment>,
    /// ECGs matching neither the positive nor the negative rule.
    pub unlabeled: Vec<EcgEvent>,
}

/// Apply the outcome rule: an ECG is positive iff an echo with EF <= 45
/// satisfies `0 <= echo_time - ecg_time <= window_days * 86400`; for patients
/// whose every echo has EF > 45, ECGs at or before the latest echo are
/// negative; all other ECGs are excluded. Deterministic and independent of
/// input ordering.
pub fn assign_labels(
    echo_events: &[EchoEvent],
    ecg_events: &[EcgEvent],
    window_days: i64,
) -> Result<LabelOutcome, CohortError> {
    if window_days <= 0 {
        return Err(CohortError::NegativeWindow(window_days));
    }
    if echo_events.is_empty() || ecg_events.is_empty() {
        return Err(CohortError::EmptyInput);
    }
    let window_secs = window_days * SECONDS_PER_DAY;

    let mut by_patient: BTreeMap<&str, Vec<&EchoEvent>> = BTreeMap::new();
    for e in echo_events {
        by_patient.entry(e.patient_id.as_str()).or_default().push(e);
    }
    for echoes in by_patient.values_mut() {
        echoes.sort_by(|a, b| {
            a.echo_time
                .cmp(&b.echo_time)
                .then(a.ef_percent.partial_cmp(&b.ef_percent).unwrap())
        });
    }

    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    for ecg in ecg_events {
        let Some(echoes) = by_patient.get(ecg.patient_id.as_str()) else {
            unlabeled.push(ecg.clone());
            continue;
        };
        // nearest in-window echo with EF <= 45
        let mut best: Option<&EchoEvent> = None;
        for e in echoes {
            let delta = e.echo_time - ecg.ecg_time;
            if e.ef_percent <= LEF_EF_THRESHOLD && (0..=window_secs).contains(&delta) {
                let better = match best {
                    None => true,
                    Some(b) => {
                        let bd = b.echo_time - ecg.ecg_time;
                        delta < bd || (delta == bd && e.ef_percent < b.ef_percent)
                    }
                };
                if better {
                    best = Some(e);
                }
            }
        }
        if let Some(e) = best {
            labeled.push(LabelAssignment {
                record_id: ecg.record_id.clone(),
                patient_id: ecg.patient_id.clone(),
                label: true,
                ef_percent: e.ef_percent,
                ecg_time: ecg.ecg_time,
                ref_time: e.echo_time,
            });
            continue;
        }
        let all_above = echoes.iter().all(|e| e.ef_percent > LEF_EF_THRESHOLD);
        let latest = echoes.last().expect("non-empty");
        if all_above && ecg.ecg_time <= latest.echo_time {
            labeled.push(LabelAssignment {
                record_id: ecg.record_id.clone(),
                patient_id: ecg.patient_id.clone(),
                label: false,
                ef_percent: latest.ef_percent,
                ecg_time: ecg.ecg_time,
                ref_time: latest.echo_time,
            });
        } else {
            unlabeled.push(ecg.clone());
        }
    }

    labeled.sort_by(|a, b| {
        (&a.patient_id, a.ecg_time, &a.record_id).cmp(&(&b.patient_id, b.ecg_time, &b.record_id))
    });
    unlabeled.sort_by(|a, b| {
        (&a.patient_id, a.ecg_time, &a.record_id).cmp(&(&b.patient_id, b.ecg_time, &b.record_id))
    });
    Ok(LabelOutcome { labeled, unlabeled })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitSummary {
    pub split: Split,
    pub n: usize,
    pub n_pos: usize,
    pub prevalence: f64,
}

/// Counts and positive fraction per split, in canonical split order.
pub fn summarize_cohort(table: &CohortTable) -> Result<Vec<SplitSummary>, CohortError> {
    if table.records.is_empty() {
        return Err(CohortError::EmptyCohort);
    }
    let mut counts: BTreeMap<Split, (usize, usize)> = BTreeMap::new();
    for r in &table.records {
        let e = counts.entry(r.split).or_insert((0, 0));
        e.0 += 1;
        if r.label {
            e.1 += 1;
        }
    }
    Ok(counts
        .into_iter()
        .map(|(split, (n, n_pos))| SplitSummary {
            split,
            n,
            n_pos,
            prevalence: n_pos as f64 / n as f64,
        })
        .collect())
}
