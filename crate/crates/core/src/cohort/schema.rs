//! The 37-slot biomarker schema: 31 OCT structural metrics and 6 CFP
//! vascular/disc metrics, each with a unit, a reference range and the
//! per-disease mean shift (in standard deviations) used by the generator.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use super::DiagnosisLabel;
use crate::error::{Error, Result};

pub const SCHEMA_CSV: &str = include_str!("../../data/biomarker_schema.csv");

pub const NUM_BIOMARKERS: usize = 37;
pub const NUM_OCT: usize = 31;
pub const NUM_CFP: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Oct,
    Cfp,
}

/// Anatomical grouping used for coverage grading.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Macula,
    NerveFiber,
    OpticDisc,
    Vasculature,
}

impl Domain {
    pub const ALL: [Domain; 4] = [
        Domain::Macula,
        Domain::NerveFiber,
        Domain::OpticDisc,
        Domain::Vasculature,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Unit {
    #[serde(rename = "um")]
    Micrometre,
    #[serde(rename = "mm3")]
    CubicMillimetre,
    #[serde(rename = "mm2")]
    SquareMillimetre,
    #[serde(rename = "ratio")]
    Ratio,
    #[serde(rename = "index")]
    Index,
}

impl Unit {
    pub const ALL: [Unit; 5] = [
        Unit::Micrometre,
        Unit::CubicMillimetre,
        Unit::SquareMillimetre,
        Unit::Ratio,
        Unit::Index,
    ];

    pub fn symbol(self) -> &'static str {
        match self {
            Unit::Micrometre => "um",
            Unit::CubicMillimetre => "mm3",
            Unit::SquareMillimetre => "mm2",
            Unit::Ratio => "ratio",
            Unit::Index => "index",
        }
    }
}

impl fmt::Display for Unit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

impl FromStr for Unit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Unit::ALL
            .into_iter()
            .find(|u| u.symbol() == s)
            .ok_or_else(|| Error::Validation(format!("unknown unit {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiomarkerSpec {
    pub name: String,
    pub modality: Modality,
    pub domain: Domain,
    pub unit: Unit,
    pub ref_low: f64,
    pub ref_high: f64,
    /// Mean shift in SD units, indexed by `DiagnosisLabel::index()`.
    /// The `Normal` entry is always zero.
    pub shifts: [f64; 7],
}

impl BiomarkerSpec {
    /// Reference ranges are mean ± 2 SD.
    pub fn mean(&self) -> f64 {
        0.5 * (self.ref_low + self.ref_high)
    }

    pub fn sd(&self) -> f64 {
        0.25 * (self.ref_high - self.ref_low)
    }

    pub fn range_width(&self) -> f64 {
        self.ref_high - self.ref_low
    }

    pub fn shift(&self, label: DiagnosisLabel) -> f64 {
        self.shifts[label.index()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiomarkerSchema {
    entries: Vec<BiomarkerSpec>,
}

#[derive(Debug, Deserialize)]
struct SchemaRow {
    name: String,
    modality: Modality,
    domain: Domain,
    unit: Unit,
    ref_low: f64,
    ref_high: f64,
    #[serde(rename = "shift_Hypertension")]
    hypertension: f64,
    #[serde(rename = "shift_Diabetes")]
    diabetes: f64,
    #[serde(rename = "shift_Glaucoma")]
    glaucoma: f64,
    #[serde(rename = "shift_DR")]
    dr: f64,
    #[serde(rename = "shift_AMD")]
    amd: f64,
    #[serde(rename = "shift_Alzheimer")]
    alzheimer: f64,
}

impl BiomarkerSchema {
    /// The schema shipped with the crate.
    pub fn standard() -> &'static BiomarkerSchema {
        static SCHEMA: OnceLock<BiomarkerSchema> = OnceLock::new();
        SCHEMA.get_or_init(|| {
            BiomarkerSchema::from_csv(SCHEMA_CSV).expect("bundled biomarker schema is valid")
        })
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let mut entries = Vec::new();
        for row in reader.deserialize() {
            let r: SchemaRow = row?;
            if !(r.ref_low < r.ref_high) {
                return Err(Error::Validation(format!(
                    "biomarker {}: reference low {} must be below high {}",
                    r.name, r.ref_low, r.ref_high
                )));
            }
            entries.push(BiomarkerSpec {
                name: r.name,
                modality: r.modality,
                domain: r.domain,
                unit: r.unit,
                ref_low: r.ref_low,
                ref_high: r.ref_high,
                shifts: [0.0, r.hypertension, r.diabetes, r.glaucoma, r.dr, r.amd, r.alzheimer],
            });
        }
        if entries.len() != NUM_BIOMARKERS {
            return Err(Error::Validation(format!(
                "schema lists {} biomarkers, expected {NUM_BIOMARKERS}",
                entries.len()
            )));
        }
        let oct = entries.iter().take_while(|e| e.modality == Modality::Oct).count();
        if oct != NUM_OCT || entries[NUM_OCT..].iter().any(|e| e.modality != Modality::Cfp) {
            return Err(Error::Validation(
                "schema must list the 31 OCT biomarkers before the 6 CFP biomarkers".into(),
            ));
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[BiomarkerSpec] {
        &self.entries
    }

    pub fn get(&self, index: usize) -> &BiomarkerSpec {
        &self.entries[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
