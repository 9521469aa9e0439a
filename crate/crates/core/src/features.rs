//! Baseline tabular features derived from machine measurements (wave onsets
//! and offsets plus the RR interval): PR interval, QRS duration, Bazett QTc,
//! and ventricular rate with the ventricular rate reused as the atrial-rate
//! proxy. These feed third-party comparison models; no waveform delineation
//! happens here.

use crate::cohort::Sex;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("wave timings out of order: p_onset {p_onset}, qrs_onset {qrs_onset}, qrs_end {qrs_end}, t_end {t_end}")]
    OrderingViolation {
        p_onset: f64,
        qrs_onset: f64,
        qrs_end: f64,
        t_end: f64,
    },
    #[error("RR interval must be positive, got {0}")]
    NonPositiveRR(f64),
    #[error("row {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Wave timings in milliseconds relative to a common origin, plus the RR
/// interval in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MachineMeasurements {
    pub t_p_onset: f64,
    pub t_qrs_onset: f64,
    pub t_qrs_end: f64,
    pub t_t_end: f64,
    pub rr: f64,
}

impl MachineMeasurements {
    pub fn validate(&self) -> Result<(), FeatureError> {
        if !(self.t_p_onset <= self.t_qrs_onset
            && self.t_qrs_onset <= self.t_qrs_end
            && self.t_qrs_end <= self.t_t_end)
        {
            return Err(FeatureError::OrderingViolation {
                p_onset: self.t_p_onset,
                qrs_onset: self.t_qrs_onset,
                qrs_end: self.t_qrs_end,
                t_end: self.t_t_end,
            });
        }
        if self.rr <= 0.0 || self.rr.is_nan() {
            return Err(FeatureError::NonPositiveRR(self.rr));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineFeatures {
    pub pr_interval_ms: f64,
    pub qrs_duration_ms: f64,
    pub qtc_ms: f64,
    pub ventricular_rate_bpm: f64,
    pub atrial_rate_bpm: f64,
    pub age_years: u32,
    pub sex: Sex,
}

/// PR = QRS onset - P onset; QRS = QRS end - QRS onset; QTc by Bazett,
/// (T end - QRS onset) / sqrt(RR/1000); rate = 60000/RR, with the
/// ventricular rate used as the atrial-rate proxy.
pub fn derive_baseline_features(
    m: &MachineMeasurements,
    age_years: u32,
    sex: Sex,
) -> Result<BaselineFeatures, FeatureError> {
    m.validate()?;
    let qt = m.t_t_end - m.t_qrs_onset;
    let qtc = qt / (m.rr / 1000.0).sqrt();
    let vrate = 60_000.0 / m.rr;
    Ok(BaselineFeatures {
        pr_interval_ms: m.t_qrs_onset - m.t_p_onset,
        qrs_duration_ms: m.t_qrs_end - m.t_qrs_onset,
        qtc_ms: qtc,
        ventricular_rate_bpm: vrate,
        atrial_rate_bpm: vrate,
        age_years,
        sex,
    })
}

const MEASUREMENTS_HEADER: [&str; 8] = [
    "record_id",
    "age_years",
    "sex",
    "t_p_onset",
    "t_qrs_onset",
    "t_qrs_end",
    "t_t_end",
    "rr",
];

/// Read a machine-measurements CSV (`record_id,age_years,sex,t_p_onset,
/// t_qrs_onset,t_qrs_end,t_t_end,rr`).
pub fn load_measurements(
    path: &Path,
) -> Result<Vec<(String, u32, Sex, MachineMeasurements)>, FeatureError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(|s| s.to_string()).collect();
    if header != MEASUREMENTS_HEADER {
        return Err(FeatureError::MalformedRow {
            line: 1,
            reason: format!(
                "bad header: expected '{}', found '{}'",
                MEASUREMENTS_HEADER.join(","),
                header.join(",")
            ),
        });
    }
    let mut out = Vec::new();
    for (line0, rec) in reader.records().enumerate() {
        let line = line0 + 2;
        let rec = rec?;
        let parse_f = |idx: usize, name: &str| -> Result<f64, FeatureError> {
            rec[idx].parse().map_err(|_| FeatureError::MalformedRow {
                line,
                reason: format!("cannot parse {name} '{}'", &rec[idx]),
            })
        };
        let age: u32 = rec[1].parse().map_err(|_| FeatureError::MalformedRow {
            line,
            reason: format!("cannot parse age_years '{}'", &rec[1]),
        })?;
        let sex = Sex::parse(&rec[2]).ok_or_else(|| FeatureError::MalformedRow {
            line,
            reason: format!("sex must be female|male, found '{}'", &rec[2]),
        })?;
        out.push((
            rec[0].to_string(),
            age,
            sex,
            MachineMeasurements {
                t_p_onset: parse_f(3, "t_p_onset")?,
                t_qrs_onset: parse_f(4, "t_qrs_onset")?,
                t_qrs_end: parse_f(5, "t_qrs_end")?,
                t_t_end: parse_f(6, "t_t_end")?,
                rr: parse_f(7, "rr")?,
            },
        ))
    }
    Ok(out)
}

/// Fixed export order: `record_id,age,sex,pr_ms,qrs_ms,qtc_ms,atrial_rate,
/// ventricular_rate`.
pub fn write_features_csv(
    path: &Path,
    rows: &[(String, BaselineFeatures)],
) -> Result<(), FeatureError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "record_id,age,sex,pr_ms,qrs_ms,qtc_ms,atrial_rate,ventricular_rate")?;
    for (id, f) in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            id,
            f.age_years,
            f.sex.as_str(),
            f.pr_interval_ms,
            f.qrs_duration_ms,
            f.qtc_ms,
            f.atrial_rate_bpm,
            f.ventricular_rate_bpm
        )?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn measurements(rr: f64, qt: f64) -> MachineMeasurements {
        MachineMeasurements {
            t_p_onset: 0.0,
            t_qrs_onset: 160.0,
            t_qrs_end: 250.0,
            t_t_end: 160.0 + qt,
            rr,
        }
    }

    #[test]
    fn bazett_identity_at_1000ms() {
        let f = derive_baseline_features(&measurements(1000.0, 400.0), 60, Sex::Male).unwrap();
        assert_eq!(f.qtc_ms, 400.0);
        assert_eq!(f.pr_interval_ms, 160.0);
        assert_eq!(f.qrs_duration_ms, 90.0);
    }

    #[test]
    fn bazett_hand_example_rr_640() {
        let f = derive_baseline_features(&measurements(640.0, 400.0), 60, Sex::Male).unwrap();
        assert!((f.qtc_ms - 500.0).abs() < 1e-12, "400 / 0.8 = 500");
    }

    #[test]
    fn rate_and_atrial_proxy() {
        let f = derive_baseline_features(&measurements(800.0, 400.0), 60, Sex::Female).unwrap();
        assert_eq!(f.ventricular_rate_bpm, 75.0);
        assert_eq!(f.atrial_rate_bpm, 75.0);
    }

    #[test]
    fn qtc_strictly_decreasing_in_rr() {
        let mut prev = f64::INFINITY;
        for k in 0..1000 {
            let rr = 400.0 + k as f64 * 2.0;
            let f = derive_baseline_features(&measurements(rr, 400.0), 60, Sex::Male).unwrap();
            assert!(f.qtc_ms < prev, "qtc must fall as rr grows");
            prev = f.qtc_ms;
        }
    }

    #[test]
    fn validation_errors() {
        let bad = MachineMeasurements {
            t_p_onset: 100.0,
            t_qrs_onset: 50.0,
            t_qrs_end: 250.0,
            t_t_end: 500.0,
            rr: 800.0,
        };
        assert!(matches!(
            derive_baseline_features(&bad, 60, Sex::Male),
            Err(FeatureError::OrderingViolation { .. })
        ));
        let bad = MachineMeasurements {
            rr: 0.0,
            ..measurements(800.0, 400.0)
        };
        assert!(matches!(
            derive_baseline_features(&bad, 60, Sex::Male),
            Err(FeatureError::NonPositiveRR(_))
        ));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("m.csv");
        std::fs::write(
            &input,
            "record_id,age_years,sex,t_p_onset,t_qrs_onset,t_qrs_end,t_t_end,rr\n\
             r1,64,female,0,160,250,560,1000\n",
        )
        .unwrap();
        let rows = load_measurements(&input).unwrap();
        assert_eq!(rows.len(), 1);
        let (id, age, sex, m) = &rows[0];
        let f = derive_baseline_features(m, *age, *sex).unwrap();
        let out = dir.path().join("f.csv");
        write_features_csv(&out, &[(id.clone(), f)]).unwrap();
        let text = std::fs::read_to_string(&out).unwrap();
        assert!(text.starts_with(
            "record_id,age,sex,pr_ms,qrs_ms,qtc_ms,atrial_rate,ventricular_rate"
        ));
        assert!(text.contains("r1,64,female,160,90,400,60,60"));
    }
}
