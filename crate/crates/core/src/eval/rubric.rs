//! Deterministic six-metric rubric over parsed reports.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::cohort::{BiomarkerSchema, BiomarkerVector, DiagnosisLabel, Domain};
use crate::error::{Error, Result};
use crate::report::{EyeGuidelineRules, Flag, ReportAst};

/// Per-report quality scores. The six rubric metrics lie in `[0, 100]`,
/// `semantic_overlap` in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RubricScore {
    pub quantitative_accuracy: f64,
    pub qualitative_accuracy: f64,
    pub evidence_grounding: f64,
    pub reasoning_consistency: f64,
    pub coverage_completeness: f64,
    pub error_severity_penalty: f64,
    pub semantic_overlap: f64,
}

impl RubricScore {
    pub const METRICS: [&'static str; 6] = [
        "quantitative_accuracy",
        "qualitative_accuracy",
        "evidence_grounding",
        "reasoning_consistency",
        "coverage_completeness",
        "error_severity_penalty",
    ];

    pub fn zero() -> Self {
        Self {
            quantitative_accuracy: 0.0,
            qualitative_accuracy: 0.0,
            evidence_grounding: 0.0,
            reasoning_consistency: 0.0,
            coverage_completeness: 0.0,
            error_severity_penalty: 0.0,
            semantic_overlap: 0.0,
        }
    }

    /// The six rubric metrics in declaration order.
    pub fn metrics(&self) -> [f64; 6] {
        [
            self.quantitative_accuracy,
            self.qualitative_accuracy,
            self.evidence_grounding,
            self.reasoning_consistency,
            self.coverage_completeness,
            self.error_severity_penalty,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in Self::METRICS.iter().zip(self.metrics()) {
            if !(0.0..=100.0).contains(&v) {
                return Err(Error::Validation(format!("{name} = {v} is outside [0, 100]")));
            }
        }
        if !(0.0..=1.0).contains(&self.semantic_overlap) {
            return Err(Error::Validation(format!(
                "semantic_overlap = {} is outside [0, 1]",
                self.semantic_overlap
            )));
        }
        Ok(())
    }
}

/// Ground truth a candidate report is graded against.
#[derive(Debug, Clone, Copy)]
pub struct GradingTruth<'a> {
    pub biomarkers: &'a BiomarkerVector,
    pub label: DiagnosisLabel,
    pub rules: &'a EyeGuidelineRules,
}

/// Largest accepted deviation of a stated value from the true value.
pub fn value_tolerance(schema: &BiomarkerSchema, index: usize) -> f64 {
    (0.05 * schema.get(index).range_width()).max(0.01)
}

pub const SEVERE_ERROR_POINTS: f64 = 25.0;

fn percent(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * hits as f64 / total as f64
    }
}

/// Severe errors: concluding `Normal` when the true disease shows at least
/// two pattern flags, and each distinct asserted disease other than the true
/// label whose pattern is entirely absent.
pub fn severe_errors(candidate: &ReportAst, truth: &GradingTruth<'_>) -> usize {
    let flags = truth.rules.flags(truth.biomarkers.values());
    let mut count = 0;
    if candidate.diagnosis == DiagnosisLabel::Normal
        && truth.label != DiagnosisLabel::Normal
        && truth.rules.pattern_hits(truth.label, &flags).len() >= 2
    {
        count += 1;
    }
    let mut asserted: BTreeSet<DiagnosisLabel> = candidate
        .inferences
        .iter()
        .filter_map(|i| i.template.asserted_disease())
        .collect();
    if candidate.diagnosis != DiagnosisLabel::Normal {
        asserted.insert(candidate.diagnosis);
    }
    for d in asserted {
        if d != truth.label && truth.rules.pattern_hits(d, &flags).is_empty() {
            count += 1;
        }
    }
    count
}

/// Scores the six rubric metrics; `semantic_overlap` is left at zero for
/// the caller to fill from the texts.
pub fn rubric_score(candidate: &ReportAst, truth: &GradingTruth<'_>) -> Result<RubricScore> {
    let schema = BiomarkerSchema::standard();
    let values = truth.biomarkers.values();
    if truth.rules.ranges().len() != values.len() || schema.len() != values.len() {
        return Err(Error::Config(format!(
            "rules cover {} biomarkers, schema {} and truth {}",
            truth.rules.ranges().len(),
            schema.len(),
            values.len()
        )));
    }
    let mut indices = Vec::with_capacity(candidate.findings.len());
    for f in &candidate.findings {
        let i = schema
            .index_of(&f.biomarker)
            .ok_or_else(|| Error::Evaluation(format!("unknown biomarker {:?}", f.biomarker)))?;
        indices.push(i);
    }
    let n = candidate.findings.len();
    let quantitative = candidate
        .findings
        .iter()
        .zip(&indices)
        .filter(|(f, &i)| (f.value() - values[i]).abs() <= value_tolerance(schema, i) + 1e-9)
        .count();
    let qualitative = candidate
        .findings
        .iter()
        .zip(&indices)
        .filter(|(f, &i)| f.flag == truth.rules.flag(i, values[i]))
        .count();

    let grounded = candidate
        .inferences
        .iter()
        .filter(|inf| {
            !inf.citations.is_empty()
                && inf.citations.iter().all(|&c| {
                    c < n && (inf.template.is_narrative() || candidate.findings[c].flag != Flag::Normal)
                })
        })
        .count();
    let consistent = candidate
        .inferences
        .iter()
        .filter(|inf| inf.template.compatible_with(candidate.diagnosis))
        .count();

    let covered: BTreeSet<Domain> = indices.iter().map(|&i| truth.rules.domain(i)).collect();
    let required = Domain::ALL.len() + 1;
    // the diagnosis statement is mandatory in every parsed report
    let coverage = percent(covered.len() + 1, required);

    let severe = severe_errors(candidate, truth) as f64;
    Ok(RubricScore {
        quantitative_accuracy: percent(quantitative, n),
        qualitative_accuracy: percent(qualitative, n),
        evidence_grounding: percent(grounded, candidate.inferences.len()),
        reasoning_consistency: percent(consistent, candidate.inferences.len()),
        coverage_completeness: coverage,
        error_severity_penalty: (100.0 - SEVERE_ERROR_POINTS * severe).max(0.0),
        semantic_overlap: 0.0,
    })
}
