//! Cohort partitioning by age, sex, race/ethnicity grouping, clinical
//! context, and the structural/valvular heart-disease composites, with
//! per-stratum metric reports under a globally frozen decision threshold.

use crate::cohort::{EchoFindings, LabeledRecord};
use crate::metrics::{self, Direction, MetricReport, MetricSpec, MetricsError};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SubgroupError {
    #[error("age below cohort floor: {0}")]
    UnderAge(u32),
    #[error("scores and records are misaligned: {scores} scores for {records} records")]
    AlignmentMismatch { scores: usize, records: usize },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    Age,
    Sex,
    Race,
    Context,
    Shd,
    Vhd,
}

impl Dimension {
    pub fn as_str(&self) -> &'static str {
        match self {
            Dimension::Age => "age",
            Dimension::Sex => "sex",
            Dimension::Race => "race",
            Dimension::Context => "context",
            Dimension::Shd => "shd",
            Dimension::Vhd => "vhd",
        }
    }

    pub fn parse(s: &str) -> Option<Dimension> {
        match s {
            "age" => Some(Dimension::Age),
            "sex" => Some(Dimension::Sex),
            "race" => Some(Dimension::Race),
            "context" => Some(Dimension::Context),
            "shd" => Some(Dimension::Shd),
            "vhd" => Some(Dimension::Vhd),
            _ => None,
        }
    }
}

/// Half-open age bins: [18,60), [60,70), [70,80), [80,inf).
pub fn age_bin(age_years: u32) -> Result<&'static str, SubgroupError> {
    if age_years < 18 {
        return Err(SubgroupError::UnderAge(age_years));
    }
    Ok(match age_years {
        18..=59 => "18-59",
        60..=69 => "60-69",
        70..=79 => "70-79",
        _ => "80+",
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RaceGroup {
    Asian,
    Black,
    Hispanic,
    White,
    Other,
    Unknown,
}

impl RaceGroup {
    pub fn as_str(&self) -> &'static str {
        match self {
            RaceGroup::Asian => "Asian",
            RaceGroup::Black => "Black",
            RaceGroup::Hispanic => "Hispanic",
            RaceGroup::White => "White",
            RaceGroup::Other => "Other",
            RaceGroup::Unknown => "Unknown",
        }
    }
}

/// Original race/ethnicity category to aggregated group, matched
/// case-insensitively on the exact string.
pub const RACE_MAPPING: [(&str, RaceGroup); 33] = [
    ("ASIAN", RaceGroup::Asian),
    ("ASIAN - ASIAN INDIAN", RaceGroup::Asian),
    ("ASIAN - CHINESE", RaceGroup::Asian),
    ("ASIAN - KOREAN", RaceGroup::Asian),
    ("ASIAN - SOUTH EAST ASIAN", RaceGroup::Asian),
    ("BLACK/AFRICAN", RaceGroup::Black),
    ("BLACK/AFRICAN AMERICAN", RaceGroup::Black),
    ("BLACK/CAPE VERDEAN", RaceGroup::Black),
    ("BLACK/CARIBBEAN ISLAND", RaceGroup::Black),
    ("HISPANIC OR LATINO", RaceGroup::Hispanic),
    ("CENTRAL AMERICAN", RaceGroup::Hispanic),
    ("COLUMBIAN", RaceGroup::Hispanic),
    ("CUBAN", RaceGroup::Hispanic),
    ("DOMINICAN", RaceGroup::Hispanic),
    ("GUATEMALAN", RaceGroup::Hispanic),
    ("HONDURAN", RaceGroup::Hispanic),
    ("MEXICAN", RaceGroup::Hispanic),
    ("PUERTO RICAN", RaceGroup::Hispanic),
    ("SALVADORAN", RaceGroup::Hispanic),
    ("SOUTH AMERICAN", RaceGroup::Hispanic),
    ("WHITE", RaceGroup::White),
    ("WHITE - BRAZILIAN", RaceGroup::White),
    ("EASTERN EUROPEAN", RaceGroup::White),
    ("OTHER EUROPEAN", RaceGroup::White),
    ("RUSSIAN", RaceGroup::White),
    ("PORTUGUESE", RaceGroup::White),
    ("OTHER", RaceGroup::Other),
    ("AMERICAN INDIAN/ALASKA NATIVE", RaceGroup::Other),
    ("MULTIPLE RACE/ETHNICITY", RaceGroup::Other),
    ("PACIFIC ISLANDER", RaceGroup::Other),
    ("UNKNOWN", RaceGroup::Unknown),
    ("UNABLE TO OBTAIN", RaceGroup::Unknown),
    ("DECLINED", RaceGroup::Unknown),
];

/// Case-insensitive exact lookup; unmatched strings sink to Unknown. The
/// boolean reports whether the string matched a known category.
pub fn map_race(raw: &str) -> (RaceGroup, bool) {
    let needle = raw.trim().to_uppercase();
    for (original, group) in RACE_MAPPING {
        if original == needle {
            return (group, true);
        }
    }
    (RaceGroup::Unknown, false)
}

/// Race mapper with a counter for strings that fell through to Unknown.
#[derive(Debug, Default)]
pub struct RaceMapper {
    pub unmatched: usize,
}

impl RaceMapper {
    pub fn map(&mut self, raw: &str) -> RaceGroup {
        let (group, matched) = map_race(raw);
        if !matched {
            self.unmatched += 1;
        }
        group
    }
}

/// Structural heart disease composite: wall thickness, any moderate+ valve
/// lesion, RV systolic dysfunction, pericardial effusion, or pulmonary
/// hypertension by PASP or TR Vmax.
pub fn shd_flag(f: &EchoFindings) -> bool {
    f.lvwt_ge_13mm
        || vhd_flag(f)
        || f.rv_systolic_dysfunction
        || f.pericardial_effusion
        || f.pasp_ge_45
        || f.tr_vmax_ge_32
}

/// Valvular heart disease composite: any moderate+ aortic, mitral,
/// tricuspid, or pulmonary lesion.
pub fn vhd_flag(f: &EchoFindings) -> bool {
    f.aortic_stenosis
        || f.aortic_regurgitation
        || f.mitral_regurgitation
        || f.tricuspid_regurgitation
        || f.pulmonary_regurgitation
}

/// Canonical context display order; anything else follows alphabetically.
const CONTEXT_ORDER: [&str; 8] = [
    "Emergency",
    "Inpatient",
    "Outpatient",
    "Procedural",
    "Urgent",
    "Observation",
    "Surgical Same Day",
    "Elective",
];

/// Partition record indices into labeled strata. Strata are disjoint and
/// cover the cohort within each dimension.
pub fn stratify(
    records: &[&LabeledRecord],
    dimension: Dimension,
    findings: Option<&BTreeMap<String, EchoFindings>>,
) -> Result<Vec<(String, Vec<usize>)>, SubgroupError> {
    let mut strata: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        let label = match dimension {
            Dimension::Age => age_bin(r.age_years)?.to_string(),
            Dimension::Sex => r.sex.as_str().to_string(),
            Dimension::Race => map_race(&r.race_raw).0.as_str().to_string(),
            Dimension::Context => {
                if r.context_raw.is_empty() {
                    "Unknown".to_string()
                } else {
                    r.context_raw.clone()
                }
            }
            Dimension::Shd => {
                let flag = findings
                    .and_then(|m| m.get(&r.record_id))
                    .map(shd_flag)
                    .unwrap_or(false);
                if flag { "SHD" } else { "no SHD" }.to_string()
            }
            Dimension::Vhd => {
                let flag = findings
                    .and_then(|m| m.get(&r.record_id))
                    .map(vhd_flag)
                    .unwrap_or(false);
                if flag { "VHD" } else { "no VHD" }.to_string()
            }
        };
        strata.entry(label).or_default().push(i);
    }

    let mut out: Vec<(String, Vec<usize>)> = Vec::with_capacity(strata.len());
    match dimension {
        Dimension::Age => {
            for label in ["18-59", "60-69", "70-79", "80+"] {
                if let Some(v) = strata.remove(label) {
                    out.push((label.to_string(), v));
                }
            }
        }
        Dimension::Context => {
            for label in CONTEXT_ORDER {
                if let Some(v) = strata.remove(label) {
                    out.push((label.to_string(), v));
                }
            }
        }
        _ => {}
    }
    out.extend(strata);
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct SubgroupRow {
    pub dimension: Dimension,
    pub stratum: String,
    pub n: usize,
    pub n_pos: usize,
    pub prevalence: f64,
    /// None when the stratum has a single class.
    pub auroc: Option<MetricReport>,
    pub auprc: Option<MetricReport>,
    pub f1: Option<MetricReport>,
}

/// Evaluate scores per stratum with bootstrap CIs. The decision threshold is
/// frozen globally, never re-tuned inside a stratum; single-class strata get
/// counts only.
#[allow(clippy::too_many_arguments)]
pub fn subgroup_report(
    records: &[&LabeledRecord],
    scores: &[f64],
    dimensions: &[Dimension],
    findings: Option<&BTreeMap<String, EchoFindings>>,
    threshold: f64,
    direction: Direction,
    n_resamples: usize,
    seed: u64,
) -> Result<Vec<SubgroupRow>, SubgroupError> {
    if records.len() != scores.len() {
        return Err(SubgroupError::AlignmentMismatch {
            scores: scores.len(),
            records: records.len(),
        });
    }
    let mut rows = Vec::new();
    for &dim in dimensions {
        let strata = stratify(records, dim, findings)?;
        for (stratum, idx) in strata {
            let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
            let l: Vec<bool> = idx.iter().map(|&i| records[i].label).collect();
            let n = l.len();
            let n_pos = l.iter().filter(|&&y| y).count();
            let degenerate = n_pos == 0 || n_pos == n;
            // a stratum too small for stable resampling is reported as
            // unavailable, like a single-class stratum
            let run = |spec: MetricSpec| -> Result<Option<MetricReport>, SubgroupError> {
                match metrics::bootstrap_ci(&s, &l, spec, n_resamples, seed) {
                    Ok(m) => Ok(Some(m)),
                    Err(MetricsError::TooManyDegenerateResamples { .. }) => Ok(None),
                    Err(e) => Err(e.into()),
                }
            };
            let (auroc, auprc, f1) = if degenerate {
                (None, None, None)
            } else {
                (
                    run(MetricSpec::Auroc)?,
                    run(MetricSpec::Auprc)?,
                    run(MetricSpec::F1 { threshold, direction })?,
                )
            };
            rows.push(SubgroupRow {
                dimension: dim,
                stratum,
                n,
                n_pos,
                prevalence: n_pos as f64 / n as f64,
                auroc,
                auprc,
                f1,
            });
        }
    }
    Ok(rows)
}

/// Long-form CSV: one row per stratum-metric; unavailable metrics leave the
/// value columns empty.
pub fn write_subgroups_csv(path: &Path, rows: &[SubgroupRow]) -> Result<(), SubgroupError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "dimension,stratum,n,prevalence,metric,point,ci_lo,ci_hi")?;
    for r in rows {
        for (name, report) in [("auroc", &r.auroc), ("auprc", &r.auprc), ("f1", &r.f1)] {
            match report {
                Some(m) => writeln!(
                    w,
                    "{},{},{},{},{},{},{},{}",
                    r.dimension.as_str(),
                    r.stratum,
                    r.n,
                    r.prevalence,
                    name,
                    m.point,
                    m.ci_low,
                    m.ci_high
                )?,
                None => writeln!(
                    w,
                    "{},{},{},{},{},,,",
                    r.dimension.as_str(),
                    r.stratum,
                    r.n,
                    r.prevalence,
                    name
                )?,
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{Sex, Split};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn age_bins_and_boundaries() {
        assert_eq!(age_bin(59).unwrap(), "18-59");
        assert_eq!(age_bin(60).unwrap(), "60-69");
        assert_eq!(age_bin(69).unwrap(), "60-69");
        assert_eq!(age_bin(70).unwrap(), "70-79");
        assert_eq!(age_bin(80).unwrap(), "80+");
        assert_eq!(age_bin(18).unwrap(), "18-59");
        assert!(matches!(age_bin(17), Err(SubgroupError::UnderAge(17))));
    }

    #[test]
    fn race_mapping_examples() {
        assert_eq!(map_race("WHITE - BRAZILIAN"), (RaceGroup::White, true));
        assert_eq!(map_race("PUERTO RICAN"), (RaceGroup::Hispanic, true));
        assert_eq!(map_race("puerto rican"), (RaceGroup::Hispanic, true));
        assert_eq!(map_race("ZZZ"), (RaceGroup::Unknown, false));
        let mut mapper = RaceMapper::default();
        mapper.map("ZZZ");
        mapper.map("WHITE");
        assert_eq!(mapper.unmatched, 1);
    }

    #[test]
    fn race_mapping_is_total_over_all_known_rows() {
        for (raw, expected) in RACE_MAPPING {
            let (got, matched) = map_race(raw);
            assert!(matched, "{raw} must match");
            assert_eq!(got, expected, "{raw}");
        }
    }

    #[test]
    fn shd_criteria() {
        let mut f = EchoFindings::default();
        assert!(!shd_flag(&f));
        f.lvwt_ge_13mm = true;
        assert!(shd_flag(&f));
        let f = EchoFindings {
            tr_vmax_ge_32: true,
            ..Default::default()
        };
        assert!(shd_flag(&f));
        let f = EchoFindings {
            mitral_regurgitation: true,
            ..Default::default()
        };
        assert!(shd_flag(&f));
    }

    #[test]
    fn vhd_criteria() {
        let f = EchoFindings {
            mitral_regurgitation: true,
            ..Default::default()
        };
        assert!(vhd_flag(&f));
        let f = EchoFindings {
            lvwt_ge_13mm: true,
            ..Default::default()
        };
        assert!(!vhd_flag(&f), "wall thickness is not a valve criterion");
        assert!(!vhd_flag(&EchoFindings::default()));
    }

    fn record(i: usize, label: bool, age: u32, sex: Sex, race: &str, context: &str) -> LabeledRecord {
        LabeledRecord {
            record_id: format!("r{i}"),
            patient_id: format!("p{i}"),
            label,
            ef_percent: None,
            ecg_time: 0,
            echo_or_note_time: None,
            age_years: age,
            sex,
            race_raw: race.to_string(),
            context_raw: context.to_string(),
            split: Split::InternalTest,
        }
    }

    #[test]
    fn strata_partition_every_dimension() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let races = ["WHITE", "ASIAN", "PUERTO RICAN", "ZZZ", "DECLINED"];
        let contexts = ["Emergency", "Inpatient", "Outpatient", "Procedural"];
        let records: Vec<LabeledRecord> = (0..200)
            .map(|i| {
                record(
                    i,
                    rng.gen_bool(0.3),
                    rng.gen_range(18..95),
                    if rng.gen_bool(0.5) { Sex::Female } else { Sex::Male },
                    races[rng.gen_range(0..races.len())],
                    contexts[rng.gen_range(0..contexts.len())],
                )
            })
            .collect();
        let refs: Vec<&LabeledRecord> = records.iter().collect();
        for dim in [
            Dimension::Age,
            Dimension::Sex,
            Dimension::Race,
            Dimension::Context,
            Dimension::Shd,
            Dimension::Vhd,
        ] {
            let strata = stratify(&refs, dim, None).unwrap();
            let total: usize = strata.iter().map(|(_, v)| v.len()).sum();
            assert_eq!(total, records.len(), "{dim:?} covers the cohort");
            let mut seen = std::collections::HashSet::new();
            for (_, idx) in &strata {
                for &i in idx {
                    assert!(seen.insert(i), "{dim:?} strata must be disjoint");
                }
            }
        }
    }

    #[test]
    fn subgroup_metrics_equal_filtered_whole_computation() {
        let mut rng = ChaCha8Rng::seed_from_u64(56);
        let records: Vec<LabeledRecord> = (0..300)
            .map(|i| {
                record(
                    i,
                    rng.gen_bool(0.35),
                    rng.gen_range(18..95),
                    if rng.gen_bool(0.5) { Sex::Female } else { Sex::Male },
                    "WHITE",
                    "Emergency",
                )
            })
            .collect();
        let scores: Vec<f64> = records
            .iter()
            .map(|r| rng.gen::<f64>() * 0.7 + if r.label { 0.3 } else { 0.0 })
            .collect();
        let refs: Vec<&LabeledRecord> = records.iter().collect();
        let rows = subgroup_report(
            &refs,
            &scores,
            &[Dimension::Age],
            None,
            0.5,
            Direction::ScoreGe,
            100,
            9,
        )
        .unwrap();

        for row in &rows {
            // filter-then-metric oracle
            let idx: Vec<usize> = refs
                .iter()
                .enumerate()
                .filter(|(_, r)| age_bin(r.age_years).unwrap() == row.stratum)
                .map(|(i, _)| i)
                .collect();
            assert_eq!(idx.len(), row.n);
            let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
            let l: Vec<bool> = idx.iter().map(|&i| records[i].label).collect();
            if let Some(auroc) = &row.auroc {
                let direct =
                    metrics::bootstrap_ci(&s, &l, MetricSpec::Auroc, 100, 9).unwrap();
                assert_eq!(auroc, &direct);
            }
        }
        let total: usize = rows.iter().map(|r| r.n).sum();
        assert_eq!(total, records.len());
    }

    #[test]
    fn single_class_stratum_marks_metrics_unavailable() {
        let mut records = vec![
            record(0, true, 25, Sex::Female, "WHITE", "Emergency"),
            record(1, true, 30, Sex::Female, "WHITE", "Emergency"),
        ];
        for i in 2..10 {
            records.push(record(i, i % 2 == 0, 65, Sex::Male, "WHITE", "Emergency"));
        }
        let scores: Vec<f64> = records
            .iter()
            .map(|r| if r.label { 0.8 } else { 0.3 })
            .collect();
        let refs: Vec<&LabeledRecord> = records.iter().collect();
        let rows = subgroup_report(
            &refs,
            &scores,
            &[Dimension::Age],
            None,
            0.5,
            Direction::ScoreGe,
            50,
            1,
        )
        .unwrap();
        let young = rows.iter().find(|r| r.stratum == "18-59").unwrap();
        assert!(young.auroc.is_none() && young.auprc.is_none() && young.f1.is_none());
        let older = rows.iter().find(|r| r.stratum == "60-69").unwrap();
        assert!(older.auroc.is_some());
    }

    #[test]
    fn demographic_dimensions_span_sixteen_strata() {
        // a cohort covering every demographic bin yields 4 + 2 + 6 + 4 rows
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let races = [
            "ASIAN", "BLACK/AFRICAN AMERICAN", "HISPANIC OR LATINO", "WHITE", "OTHER", "UNKNOWN",
        ];
        let contexts = ["Emergency", "Inpatient", "Outpatient", "Procedural"];
        let ages = [30u32, 65, 75, 85];
        let mut records = Vec::new();
        let mut i = 0;
        for race in races {
            for context in contexts {
                for age in ages {
                    for sex in [Sex::Female, Sex::Male] {
                        records.push(record(i, rng.gen_bool(0.5), age, sex, race, context));
                        i += 1;
                    }
                }
            }
        }
        let refs: Vec<&LabeledRecord> = records.iter().collect();
        let scores: Vec<f64> = (0..records.len()).map(|_| rng.gen()).collect();
        let rows = subgroup_report(
            &refs,
            &scores,
            &[Dimension::Age, Dimension::Sex, Dimension::Race, Dimension::Context],
            None,
            0.5,
            Direction::ScoreGe,
            0,
            1,
        )
        .unwrap();
        assert_eq!(rows.len(), 16);
    }

    #[test]
    fn alignment_mismatch_is_rejected() {
        let records = [record(0, true, 25, Sex::Female, "WHITE", "Emergency")];
        let refs: Vec<&LabeledRecord> = records.iter().collect();
        assert!(matches!(
            subgroup_report(
                &refs,
                &[0.9, 0.8],
                &[Dimension::Sex],
                None,
                0.5,
                Direction::ScoreGe,
                10,
                1
            ),
            Err(SubgroupError::AlignmentMismatch { .. })
        ));
    }
}
