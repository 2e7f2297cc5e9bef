use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cohort::{BiomarkerSchema, DiagnosisLabel, Unit};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flag {
    Low,
    Normal,
    High,
}

impl Flag {
    pub const ALL: [Flag; 3] = [Flag::Low, Flag::Normal, Flag::High];

    pub fn as_str(self) -> &'static str {
        match self {
            Flag::Low => "low",
            Flag::Normal => "normal",
            Flag::High => "high",
        }
    }

    pub fn is_abnormal(self) -> bool {
        self != Flag::Normal
    }

    /// Position of `value` relative to the closed range `[low, high]`.
    pub fn classify(value: f64, low: f64, high: f64) -> Flag {
        if value < low {
            Flag::Low
        } else if value > high {
            Flag::High
        } else {
            Flag::Normal
        }
    }
}

impl fmt::Display for Flag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Flag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Flag::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::Validation(format!("unknown flag {s:?}")))
    }
}

/// The conclusion a sub-inference draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Template {
    /// Every reported measurement lies inside its reference range.
    WithinNormalLimits,
    /// Abnormal measurements without a disease-level interpretation.
    IsolatedAbnormality,
    /// Abnormal measurements outside the pattern of the stated disease.
    IncidentalFinding,
    /// The stated disease's measurement pattern is present.
    Disease(DiagnosisLabel),
    /// The diagnosis rests on the label alone; imaging is silent.
    LabelDriven(DiagnosisLabel),
}

const DISEASE_IDS: [(DiagnosisLabel, &str); 6] = [
    (DiagnosisLabel::Hypertension, "hypertensive_vasculopathy"),
    (DiagnosisLabel::Diabetes, "diabetic_microangiopathy"),
    (DiagnosisLabel::Glaucoma, "glaucomatous_optic_neuropathy"),
    (DiagnosisLabel::Dr, "diabetic_retinopathy_edema"),
    (DiagnosisLabel::Amd, "macular_degeneration"),
    (DiagnosisLabel::Alzheimer, "neurodegenerative_thinning"),
];

const LABEL_DRIVEN_IDS: [(DiagnosisLabel, &str); 6] = [
    (DiagnosisLabel::Hypertension, "label_driven_hypertension"),
    (DiagnosisLabel::Diabetes, "label_driven_diabetes"),
    (DiagnosisLabel::Glaucoma, "label_driven_glaucoma"),
    (DiagnosisLabel::Dr, "label_driven_dr"),
    (DiagnosisLabel::Amd, "label_driven_amd"),
    (DiagnosisLabel::Alzheimer, "label_driven_alzheimer"),
];

impl Template {
    pub fn all() -> Vec<Template> {
        let mut v = vec![
            Template::WithinNormalLimits,
            Template::IsolatedAbnormality,
            Template::IncidentalFinding,
        ];
        v.extend(DISEASE_IDS.iter().map(|(l, _)| Template::Disease(*l)));
        v.extend(LABEL_DRIVEN_IDS.iter().map(|(l, _)| Template::LabelDriven(*l)));
        v
    }

    pub fn disease(label: DiagnosisLabel) -> Result<Template> {
        if label == DiagnosisLabel::Normal {
            return Err(Error::Rule("Normal has no disease template".into()));
        }
        Ok(Template::Disease(label))
    }

    pub fn label_driven(label: DiagnosisLabel) -> Result<Template> {
        if label == DiagnosisLabel::Normal {
            return Err(Error::Rule("Normal has no label-driven template".into()));
        }
        Ok(Template::LabelDriven(label))
    }

    pub fn id(self) -> &'static str {
        let lookup = |table: &[(DiagnosisLabel, &'static str)], l: DiagnosisLabel| {
            table
                .iter()
                .find(|(k, _)| *k == l)
                .map(|(_, id)| *id)
                .expect("templates exist for every disease")
        };
        match self {
            Template::WithinNormalLimits => "within_normal_limits",
            Template::IsolatedAbnormality => "isolated_abnormality",
            Template::IncidentalFinding => "incidental_finding",
            Template::Disease(l) => lookup(&DISEASE_IDS, l),
            Template::LabelDriven(l) => lookup(&LABEL_DRIVEN_IDS, l),
        }
    }

    /// Narrative templates may cite findings regardless of their flags.
    pub fn is_narrative(self) -> bool {
        matches!(
            self,
            Template::WithinNormalLimits | Template::LabelDriven(_)
        )
    }

    /// The disease this template asserts, if any.
    pub fn asserted_disease(self) -> Option<DiagnosisLabel> {
        match self {
            Template::Disease(l) | Template::LabelDriven(l) => Some(l),
            _ => None,
        }
    }

    /// Whether a report concluding `diagnosis` may contain this inference.
    pub fn compatible_with(self, diagnosis: DiagnosisLabel) -> bool {
        match self {
            Template::WithinNormalLimits | Template::IsolatedAbnormality => {
                diagnosis == DiagnosisLabel::Normal
            }
            Template::IncidentalFinding => diagnosis != DiagnosisLabel::Normal,
            Template::Disease(l) | Template::LabelDriven(l) => diagnosis == l,
        }
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Template {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Template::all()
            .into_iter()
            .find(|t| t.id() == s)
            .ok_or_else(|| Error::Validation(format!("unknown template {s:?}")))
    }
}

/// A stated measurement. Values are held in hundredths so that the printed
/// two-decimal form is exact.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Finding {
    pub biomarker: String,
    pub value_centi: i64,
    pub unit: Unit,
    pub flag: Flag,
}

impl Finding {
    pub fn new(biomarker: impl Into<String>, value: f64, unit: Unit, flag: Flag) -> Self {
        Self {
            biomarker: biomarker.into(),
            value_centi: to_centi(value),
            unit,
            flag,
        }
    }

    pub fn value(&self) -> f64 {
        self.value_centi as f64 / 100.0
    }
}

pub fn to_centi(value: f64) -> i64 {
    (value * 100.0).round() as i64
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Inference {
    pub template: Template,
    /// Zero-based indices into the report's findings.
    pub citations: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportAst {
    pub findings: Vec<Finding>,
    pub inferences: Vec<Inference>,
    pub diagnosis: DiagnosisLabel,
    pub note: Option<String>,
}

impl ReportAst {
    pub fn diagnosis_only(diagnosis: DiagnosisLabel) -> Self {
        Self {
            findings: Vec::new(),
            inferences: Vec::new(),
            diagnosis,
            note: None,
        }
    }

    /// Checks the structural invariants: known biomarkers with their schema
    /// units, at least one in-range citation per inference, and a note drawn
    /// from the free-text alphabet.
    pub fn validate(&self) -> Result<()> {
        let schema = BiomarkerSchema::standard();
        for (i, f) in self.findings.iter().enumerate() {
            let idx = schema.index_of(&f.biomarker).ok_or_else(|| {
                Error::Validation(format!("finding {i}: unknown biomarker {:?}", f.biomarker))
            })?;
            let unit = schema.get(idx).unit;
            if unit != f.unit {
                return Err(Error::Validation(format!(
                    "finding {i}: {} is measured in {unit}, not {}",
                    f.biomarker, f.unit
                )));
            }
        }
        for (i, inf) in self.inferences.iter().enumerate() {
            if inf.citations.is_empty() {
                return Err(Error::Validation(format!("inference {i} cites no finding")));
            }
            if let Some(&bad) = inf.citations.iter().find(|&&c| c >= self.findings.len()) {
                return Err(Error::Validation(format!(
                    "inference {i} cites finding {bad}, but only {} exist",
                    self.findings.len()
                )));
            }
        }
        if let Some(note) = &self.note {
            if let Some(c) = note.chars().find(|c| !is_note_char(*c)) {
                return Err(Error::Validation(format!("note contains {c:?}")));
            }
        }
        Ok(())
    }
}

pub(crate) fn is_note_char(c: char) -> bool {
    c.is_ascii_lowercase() || c.is_ascii_digit() || matches!(c, ' ' | '.' | ',' | '-' | '_')
}
