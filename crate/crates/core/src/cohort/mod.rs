//! Synthetic paired OCT/CFP cohort with class-conditional biomarkers.

mod io;
mod render;
mod schema;

pub use io::{export_cohort, import_cohort, read_cohort, write_cohort};
pub use render::{disc_region_mean, invert_oct, render_scan, SCAN_SIDE};
pub use schema::{
    BiomarkerSchema, BiomarkerSpec, Domain, Modality, Unit, NUM_BIOMARKERS, NUM_CFP, NUM_OCT,
};

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::report::ReportAst;
use crate::rng::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DiagnosisLabel {
    Normal,
    Hypertension,
    Diabetes,
    Glaucoma,
    #[serde(rename = "DR")]
    Dr,
    #[serde(rename = "AMD")]
    Amd,
    Alzheimer,
}

impl DiagnosisLabel {
    pub const ALL: [DiagnosisLabel; 7] = [
        DiagnosisLabel::Normal,
        DiagnosisLabel::Hypertension,
        DiagnosisLabel::Diabetes,
        DiagnosisLabel::Glaucoma,
        DiagnosisLabel::Dr,
        DiagnosisLabel::Amd,
        DiagnosisLabel::Alzheimer,
    ];

    /// Class shares of the reference population, in percent.
    pub const PRIOR_PERCENT: [f64; 7] = [38.40, 36.05, 19.95, 3.40, 1.16, 0.86, 0.18];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn prior(self) -> f64 {
        Self::PRIOR_PERCENT[self.index()] / 100.0
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DiagnosisLabel::Normal => "Normal",
            DiagnosisLabel::Hypertension => "Hypertension",
            DiagnosisLabel::Diabetes => "Diabetes",
            DiagnosisLabel::Glaucoma => "Glaucoma",
            DiagnosisLabel::Dr => "DR",
            DiagnosisLabel::Amd => "AMD",
            DiagnosisLabel::Alzheimer => "Alzheimer",
        }
    }
}

impl fmt::Display for DiagnosisLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DiagnosisLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::Validation(format!("unknown diagnosis label {s:?}")))
    }
}

/// The 37 biomarker values in schema order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct BiomarkerVector(Vec<f64>);

impl TryFrom<Vec<f64>> for BiomarkerVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        BiomarkerVector::new(v)
    }
}

impl From<BiomarkerVector> for Vec<f64> {
    fn from(b: BiomarkerVector) -> Self {
        b.0
    }
}

impl BiomarkerVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let b = Self(values);
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.len() != NUM_BIOMARKERS {
            return Err(Error::Validation(format!(
                "biomarker vector has {} entries, expected {NUM_BIOMARKERS}",
                self.0.len()
            )));
        }
        let schema = BiomarkerSchema::standard();
        for (i, &v) in self.0.iter().enumerate() {
            let name = &schema.get(i).name;
            if !v.is_finite() {
                return Err(Error::Validation(format!("{name} is not finite")));
            }
            if v <= 0.0 {
                return Err(Error::Validation(format!("{name} must be positive, got {v}")));
            }
        }
        let cdr = self.get("vertical_cup_disc_ratio");
        if cdr >= 1.0 {
            return Err(Error::Validation(format!(
                "vertical cup-to-disc ratio must lie in (0, 1), got {cdr}"
            )));
        }
        Ok(())
    }

    /// Every biomarker at the midpoint of its reference range.
    pub fn reference_midpoints() -> Self {
        let schema = BiomarkerSchema::standard();
        Self(schema.entries().iter().map(BiomarkerSpec::mean).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn oct(&self) -> &[f64] {
        &self.0[..NUM_OCT]
    }

    pub fn cfp(&self) -> &[f64] {
        &self.0[NUM_OCT..]
    }

    /// Value by schema name. Panics on unknown names.
    pub fn get(&self, name: &str) -> f64 {
        let i = BiomarkerSchema::standard()
            .index_of(name)
            .unwrap_or_else(|| panic!("unknown biomarker {name}"));
        self.0[i]
    }

    /// Returns a copy with `name` replaced; the result is re-validated.
    pub fn with(&self, name: &str, value: f64) -> Result<Self> {
        let i = BiomarkerSchema::standard()
            .index_of(name)
            .ok_or_else(|| Error::Validation(format!("unknown biomarker {name}")))?;
        let mut v = self.0.clone();
        v[i] = value;
        Self::new(v)
    }

    /// Per-biomarker z-scores against the schema's baseline distribution.
    pub fn z_scores(&self) -> Vec<f64> {
        let schema = BiomarkerSchema::standard();
        self.0
            .iter()
            .zip(schema.entries())
            .map(|(v, e)| (v - e.mean()) / e.sd())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScan {
    pub modality: Modality,
    pub side: usize,
    /// Row-major pixel grid, every value in [0, 1].
    pub pixels: Vec<f32>,
    pub source_biomarkers: BiomarkerVector,
}

impl SyntheticScan {
    pub fn pixels_f64(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| f64::from(p)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CohortSample {
    pub eid: u64,
    pub oct: SyntheticScan,
    pub cfp: SyntheticScan,
    pub biomarkers: BiomarkerVector,
    pub label: DiagnosisLabel,
    pub report: Option<ReportAst>,
}

/// Per-class counts closest to `n * prior`, by largest remainder.
pub fn class_quota(n: usize) -> [usize; 7] {
    let mut counts = [0usize; 7];
    let mut remainders = Vec::with_capacity(7);
    for label in DiagnosisLabel::ALL {
        let exact = n as f64 * label.prior();
        counts[label.index()] = exact.floor() as usize;
        remainders.push((exact - exact.floor(), label.index()));
    }
    let assigned: usize = counts.iter().sum();
    remainders.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in remainders.iter().take(n - assigned) {
        counts[i] += 1;
    }
    counts
}

/// Labels for an `n`-sample cohort: exact class quotas in a seeded order.
pub fn assign_labels(n: usize, seed: u64) -> Vec<DiagnosisLabel> {
    let quota = class_quota(n);
    let mut labels: Vec<DiagnosisLabel> = DiagnosisLabel::ALL
        .into_iter()
        .flat_map(|l| std::iter::repeat_n(l, quota[l.index()]))
        .collect();
    labels.shuffle(&mut stream_rng(seed, "labels", 0));
    labels
}

/// Draws one class-conditional biomarker vector.
pub fn sample_biomarkers(label: DiagnosisLabel, seed: u64, index: u64) -> BiomarkerVector {
    let schema = BiomarkerSchema::standard();
    let mut rng = stream_rng(seed, "biomarkers", index);
    let values = schema
        .entries()
        .iter()
        .map(|e| {
            let noise: f64 = StandardNormal.sample(&mut rng);
            let v = e.mean() + e.sd() * (e.shift(label) + noise);
            if e.name == "vertical_cup_disc_ratio" {
                v.clamp(0.02, 0.98)
            } else {
                v.max(0.05 * e.mean())
            }
        })
        .collect();
    BiomarkerVector(values)
}

pub const EID_BASE: u64 = 1_000_000;

/// One fully rendered sample; a pure function of `(label, seed, index)`.
pub fn generate_sample(label: DiagnosisLabel, seed: u64, index: u64) -> Result<CohortSample> {
    let biomarkers = sample_biomarkers(label, seed, index);
    let scan_seed = crate::rng::derive_seed(seed, "scan", index);
    let oct = render_scan(&biomarkers, Modality::Oct, scan_seed)?;
    let cfp = render_scan(&biomarkers, Modality::Cfp, scan_seed)?;
    Ok(CohortSample {
        eid: EID_BASE + index,
        oct,
        cfp,
        biomarkers,
        label,
        report: None,
    })
}

pub fn sample_cohort(n: usize, seed: u64) -> Result<Vec<CohortSample>> {
    if n == 0 {
        return Err(Error::EmptyCohort);
    }
    assign_labels(n, seed)
        .into_iter()
        .enumerate()
        .map(|(i, label)| generate_sample(label, seed, i as u64))
        .collect()
}

/// Partitions by eid: a seeded shuffle of the distinct eids, the first
/// `round(ratio * n)` of which form the training side.
pub fn split_by_eid(
    cohort: &[CohortSample],
    ratio: f64,
    seed: u64,
) -> Result<(Vec<CohortSample>, Vec<CohortSample>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Split(format!("ratio must lie in (0, 1), got {ratio}")));
    }
    let eids: BTreeSet<u64> = cohort.iter().map(|s| s.eid).collect();
    if eids.len() != cohort.len() {
        return Err(Error::Split("cohort contains duplicate eids".into()));
    }
    if cohort.len() < 2 {
        return Err(Error::Split(format!(
            "need at least 2 samples to split, got {}",
            cohort.len()
        )));
    }
    let mut order: Vec<u64> = eids.into_iter().collect();
    order.shuffle(&mut stream_rng(seed, "split", 0));
    let n_train = ((ratio * cohort.len() as f64).round() as usize).clamp(1, cohort.len() - 1);
    let train_ids: BTreeSet<u64> = order[..n_train].iter().copied().collect();
    let (train, test) = cohort
        .iter()
        .cloned()
        .partition(|s| train_ids.contains(&s.eid));
    Ok((train, test))
}
