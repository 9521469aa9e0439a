//! Seeded synthetic cohort generator with known ground truth, used as the
//! desk-scale oracle for end-to-end checks.
//!
//! Design: labels are Bernoulli(prevalence); each signal code carries a
//! Gaussian latent `z ~ N(label * effect, noise_scale^2)` squashed through a
//! sigmoid into [0,1] (and flipped for inverted codes). Under this
//! conditional-Gaussian design the posterior risk is exactly logistic in the
//! latents, and the oriented single-predictor AUROC has the closed form
//! `Phi(effect / (sqrt(2) * noise_scale))`, returned alongside the data.
//! Generation is counter-seeded per record, so values do not depend on
//! generation order.

use crate::cohort::{CohortTable, LabeledRecord, Sex, Split};
use crate::predictors::{PredictorCatalog, PredictorMatrix, PredictorVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SignalCode {
    pub code: String,
    /// Gaussian mean shift between classes, in latent units.
    pub effect_size: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DemographicMix {
    pub female_fraction: f64,
    /// (raw race string, weight); weights must sum to 1.
    pub race_weights: Vec<(String, f64)>,
    /// (context string, weight); weights must sum to 1.
    pub context_weights: Vec<(String, f64)>,
}

impl Default for DemographicMix {
    fn default() -> Self {
        DemographicMix {
            female_fraction: 0.5,
            race_weights: vec![
                ("WHITE".to_string(), 0.30),
                ("PUERTO RICAN".to_string(), 0.25),
                ("BLACK/AFRICAN AMERICAN".to_string(), 0.15),
                ("ASIAN".to_string(), 0.05),
                ("AMERICAN INDIAN/ALASKA NATIVE".to_string(), 0.10),
                ("UNKNOWN".to_string(), 0.15),
            ],
            context_weights: vec![
                ("Emergency".to_string(), 0.35),
                ("Inpatient".to_string(), 0.40),
                ("Outpatient".to_string(), 0.20),
                ("Procedural".to_string(), 0.05),
            ],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test: usize,
    pub prevalence: f64,
    pub signal: Vec<SignalCode>,
    pub noise_scale: f64,
    pub seed: u64,
    pub demographics: DemographicMix,
}

impl SyntheticSpec {
    pub fn validate(&self, catalog: &PredictorCatalog) -> Result<(), SynthError> {
        if self.n_train + self.n_validation + self.n_test == 0 {
            return Err(SynthError::InvalidSpec("no records requested".to_string()));
        }
        if !(self.prevalence > 0.0 && self.prevalence < 1.0) {
            return Err(SynthError::InvalidSpec(format!(
                "prevalence must be in (0,1), got {}",
                self.prevalence
            )));
        }
        if self.noise_scale <= 0.0 || self.noise_scale.is_nan() {
            return Err(SynthError::InvalidSpec("noise_scale must be > 0".to_string()));
        }
        for s in &self.signal {
            if !catalog.contains(&s.code) {
                return Err(SynthError::InvalidSpec(format!(
                    "signal code not in catalog: {}",
                    s.code
                )));
            }
            if !s.effect_size.is_finite() {
                return Err(SynthError::InvalidSpec("non-finite effect size".to_string()));
            }
        }
        let check_weights = |name: &str, w: &[(String, f64)]| -> Result<(), SynthError> {
            if w.is_empty() {
                return Err(SynthError::InvalidSpec(format!("{name} weights empty")));
            }
            let sum: f64 = w.iter().map(|(_, p)| p).sum();
            if (sum - 1.0).abs() > 1e-9 || w.iter().any(|(_, p)| *p < 0.0) {
                return Err(SynthError::InvalidSpec(format!(
                    "{name} weights must be non-negative and sum to 1 (sum {sum})"
                )));
            }
            Ok(())
        };
        check_weights("race", &self.demographics.race_weights)?;
        check_weights("context", &self.demographics.context_weights)?;
        if !(0.0..=1.0).contains(&self.demographics.female_fraction) {
            return Err(SynthError::InvalidSpec("female_fraction out of [0,1]".to_string()));
        }
        Ok(())
    }
}

fn phi_normal(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Box-Muller standard normal draw.
fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn pick_weighted<'a>(rng: &mut ChaCha8Rng, weights: &'a [(String, f64)]) -> &'a str {
    let draw: f64 = rng.gen();
    let mut acc = 0.0;
    for (value, w) in weights {
        acc += w;
        if draw < acc {
            return value;
        }
    }
    &weights.last().expect("non-empty weights").0
}

#[derive(Debug, Clone, Serialize)]
pub struct SyntheticTruth {
    /// Closed-form oriented single-predictor AUROC per signal code.
    pub analytic_auroc: Vec<(String, f64)>,
    pub prevalence_target: f64,
    pub seed: u64,
}

pub struct SyntheticCohort {
    pub matrix: PredictorMatrix,
    pub cohort: CohortTable,
    pub truth: SyntheticTruth,
}

/// Generate the matrix and cohort files-worth of data. Record `i` draws from
/// an independent RNG stream `i` over the spec seed.
pub fn generate(spec: &SyntheticSpec, catalog: &PredictorCatalog) -> Result<SyntheticCohort, SynthError> {
    spec.validate(catalog)?;
    let codes = catalog.codes();
    let n_total = spec.n_train + spec.n_validation + spec.n_test;

    let mut effects = vec![0.0f64; codes.len()];
    for s in &spec.signal {
        effects[catalog.position(&s.code).expect("validated")] = s.effect_size;
    }
    let inverted: Vec<bool> = codes
        .iter()
        .map(|c| catalog.is_inverted(c).expect("validated"))
        .collect();

    let mut matrix = PredictorMatrix::new(codes.clone());
    let mut records = Vec::with_capacity(n_total);
    let base_time: i64 = 1_600_000_000;

    for i in 0..n_total {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(i as u64 + 1);

        let label = rng.gen::<f64>() < spec.prevalence;
        let mut values = Vec::with_capacity(codes.len());
        for f in 0..codes.len() {
            let z = spec.noise_scale * standard_normal(&mut rng)
                + if label { effects[f] } else { 0.0 };
            let oriented = sigmoid(z);
            values.push(if inverted[f] { 1.0 - oriented } else { oriented });
        }

        let ef_percent = if label {
            20.0 + rng.gen::<f64>() * 25.0 // (20, 45]
        } else {
            50.0 + rng.gen::<f64>() * 20.0 // (50, 70]
        };
        let age_years = 18 + rng.gen_range(0..72) as u32;
        let sex = if rng.gen::<f64>() < spec.demographics.female_fraction {
            Sex::Female
        } else {
            Sex::Male
        };
        let race_raw = pick_weighted(&mut rng, &spec.demographics.race_weights).to_string();
        let context_raw = pick_weighted(&mut rng, &spec.demographics.context_weights).to_string();
        let split = if i < spec.n_train {
            Split::Train
        } else if i < spec.n_train + spec.n_validation {
            Split::Validation
        } else {
            Split::InternalTest
        };

        let record_id = format!("synth-{i:06}");
        let ecg_time = base_time + i as i64 * 3600;
        matrix
            .push_row(record_id.clone(), PredictorVector::new(values).expect("sigmoid output in [0,1]"))
            .expect("unique synthetic ids");
        records.push(LabeledRecord {
            record_id,
            patient_id: format!("synthp-{i:06}"),
            label,
            ef_percent: Some((ef_percent * 100.0).round() / 100.0),
            ecg_time,
            echo_or_note_time: Some(ecg_time + 86_400),
            age_years,
            sex,
            race_raw,
            context_raw,
            split,
        });
    }

    let analytic_auroc = spec
        .signal
        .iter()
        .map(|s| {
            (
                s.code.clone(),
                phi_normal(s.effect_size / (std::f64::consts::SQRT_2 * spec.noise_scale)),
            )
        })
        .collect();

    Ok(SyntheticCohort {
        matrix,
        cohort: CohortTable {
            records,
            echo_findings: None,
        },
        truth: SyntheticTruth {
            analytic_auroc,
            prevalence_target: spec.prevalence,
            seed: spec.seed,
        },
    })
}
