//! Report grading: the rubric, corruption operators, token-overlap
//! similarity, macro-F1 and an optional external judge.

mod corrupt;
mod judge;
mod rubric;

pub use corrupt::{
    citation_delete, diagnosis_swap, domain_delete, flag_flip, perturb_all_values, severe_claim_insert,
    value_perturb, Corruption,
};
pub use judge::ExternalJudge;
pub use rubric::{rubric_score, severe_errors, value_tolerance, GradingTruth, RubricScore, SEVERE_ERROR_POINTS};

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::cohort::{CohortSample, DiagnosisLabel};
use crate::error::{Error, Result};
use crate::report::{parse_report, report_to_text, EyeGuidelineRules, Vocabulary};

/// F1 over the multisets of non-whitespace tokens of both texts.
/// Untokenizable input scores 0.
pub fn semantic_overlap(candidate: &str, reference: &str) -> f64 {
    let vocab = Vocabulary::standard();
    let bag = |text: &str| -> Option<HashMap<u32, usize>> {
        let mut m = HashMap::new();
        for t in vocab.tokenize(text).ok()? {
            if vocab.symbol(t).is_some_and(|s| !s.trim().is_empty()) {
                *m.entry(t.0).or_insert(0) += 1;
            }
        }
        Some(m)
    };
    let (Some(c), Some(r)) = (bag(candidate), bag(reference)) else {
        return 0.0;
    };
    let (nc, nr): (usize, usize) = (c.values().sum(), r.values().sum());
    if nc == 0 && nr == 0 {
        return 1.0;
    }
    let matched: usize = c.iter().map(|(t, n)| (*n).min(*r.get(t).unwrap_or(&0))).sum();
    if matched == 0 {
        return 0.0;
    }
    let p = matched as f64 / nc as f64;
    let rc = matched as f64 / nr as f64;
    2.0 * p * rc / (p + rc)
}

/// `2 tp / (2 tp + fp + fn)`, zero when the class never occurs.
pub fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Counts indexed by `(true label, predicted label)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[usize; 7]; 7],
}

impl ConfusionMatrix {
    pub fn from_pairs(pairs: &[(DiagnosisLabel, DiagnosisLabel)]) -> Self {
        let mut counts = [[0; 7]; 7];
        for (t, p) in pairs {
            counts[t.index()][p.index()] += 1;
        }
        Self { counts }
    }

    pub fn support(&self, class: usize) -> usize {
        self.counts[class].iter().sum()
    }

    pub fn precision(&self, class: usize) -> f64 {
        let predicted: usize = (0..7).map(|t| self.counts[t][class]).sum();
        if predicted == 0 {
            0.0
        } else {
            self.counts[class][class] as f64 / predicted as f64
        }
    }

    pub fn recall(&self, class: usize) -> f64 {
        let s = self.support(class);
        if s == 0 {
            0.0
        } else {
            self.counts[class][class] as f64 / s as f64
        }
    }

    pub fn per_class_f1(&self) -> [f64; 7] {
        let mut out = [0.0; 7];
        for (c, o) in out.iter_mut().enumerate() {
            let tp = self.counts[c][c];
            let fp: usize = (0..7).filter(|&t| t != c).map(|t| self.counts[t][c]).sum();
            let fn_: usize = (0..7).filter(|&p| p != c).map(|p| self.counts[c][p]).sum();
            *o = f1_from_counts(tp, fp, fn_);
        }
        out
    }
}

/// Unweighted mean of the seven per-class F1 scores. Classes absent from
/// both truth and prediction count as 0.
pub fn macro_f1(pairs: &[(DiagnosisLabel, DiagnosisLabel)]) -> Result<(f64, ConfusionMatrix)> {
    if pairs.is_empty() {
        return Err(Error::Evaluation("macro F1 of an empty set".into()));
    }
    let cm = ConfusionMatrix::from_pairs(pairs);
    let f1 = cm.per_class_f1();
    Ok((f1.iter().sum::<f64>() / 7.0, cm))
}

/// Per-sample evaluation row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub eid: u64,
    pub quantitative_accuracy: f64,
    pub qualitative_accuracy: f64,
    pub evidence_grounding: f64,
    pub reasoning_consistency: f64,
    pub coverage_completeness: f64,
    pub error_severity_penalty: f64,
    pub semantic_overlap: f64,
    pub predicted_label: DiagnosisLabel,
    pub true_label: DiagnosisLabel,
    pub malformed: bool,
}

impl EvalRecord {
    pub fn score(&self) -> RubricScore {
        RubricScore {
            quantitative_accuracy: self.quantitative_accuracy,
            qualitative_accuracy: self.qualitative_accuracy,
            evidence_grounding: self.evidence_grounding,
            reasoning_consistency: self.reasoning_consistency,
            coverage_completeness: self.coverage_completeness,
            error_severity_penalty: self.error_severity_penalty,
            semantic_overlap: self.semantic_overlap,
        }
    }
}

/// Grades one generated text. Text that does not parse scores zero and is
/// classified as `Normal`.
pub fn evaluate_text(text: &str, sample: &CohortSample, rules: &EyeGuidelineRules) -> Result<EvalRecord> {
    let reference = match &sample.report {
        Some(r) => report_to_text(r),
        None => report_to_text(&crate::report::eye_guideline_report(&sample.biomarkers, sample.label, rules)?),
    };
    let truth = GradingTruth {
        biomarkers: &sample.biomarkers,
        label: sample.label,
        rules,
    };
    let (score, predicted, malformed) = match parse_report(text) {
        Ok(ast) => {
            let mut s = rubric_score(&ast, &truth)?;
            s.semantic_overlap = semantic_overlap(text, &reference);
            (s, ast.diagnosis, false)
        }
        Err(_) => (RubricScore::zero(), DiagnosisLabel::Normal, true),
    };
    Ok(EvalRecord {
        eid: sample.eid,
        quantitative_accuracy: score.quantitative_accuracy,
        qualitative_accuracy: score.qualitative_accuracy,
        evidence_grounding: score.evidence_grounding,
        reasoning_consistency: score.reasoning_consistency,
        coverage_completeness: score.coverage_completeness,
        error_severity_penalty: score.error_severity_penalty,
        semantic_overlap: score.semantic_overlap,
        predicted_label: predicted,
        true_label: sample.label,
        malformed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalAggregate {
    pub samples: usize,
    pub malformed: usize,
    pub parse_rate: f64,
    pub macro_f1: f64,
    pub per_class_f1: [f64; 7],
    /// Means over all samples, malformed ones included as zeros.
    pub means: RubricScore,
    pub confusion: ConfusionMatrix,
}

pub fn aggregate(records: &[EvalRecord]) -> Result<EvalAggregate> {
    if records.is_empty() {
        return Err(Error::Evaluation("no evaluation records".into()));
    }
    let pairs: Vec<_> = records.iter().map(|r| (r.true_label, r.predicted_label)).collect();
    let (f1, cm) = macro_f1(&pairs)?;
    let n = records.len() as f64;
    let mean = |f: fn(&EvalRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
    let malformed = records.iter().filter(|r| r.malformed).count();
    Ok(EvalAggregate {
        samples: records.len(),
        malformed,
        parse_rate: 1.0 - malformed as f64 / n,
        macro_f1: f1,
        per_class_f1: cm.per_class_f1(),
        means: RubricScore {
            quantitative_accuracy: mean(|r| r.quantitative_accuracy),
            qualitative_accuracy: mean(|r| r.qualitative_accuracy),
            evidence_grounding: mean(|r| r.evidence_grounding),
            reasoning_consistency: mean(|r| r.reasoning_consistency),
            coverage_completeness: mean(|r| r.coverage_completeness),
            error_severity_penalty: mean(|r| r.error_severity_penalty),
            semantic_overlap: mean(|r| r.semantic_overlap),
        },
        confusion: cm,
    })
}

pub fn records_csv(records: &[EvalRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
