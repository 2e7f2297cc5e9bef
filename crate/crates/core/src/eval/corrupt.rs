//! Targeted corruptions of a correct report, one per rubric metric.

use serde::{Deserialize, Serialize};

use super::rubric::{rubric_score, value_tolerance, GradingTruth};
use crate::cohort::{BiomarkerSchema, DiagnosisLabel, Domain};
use crate::error::{Error, Result};
use crate::report::{to_centi, Flag, Inference, ReportAst, Template};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corruption {
    ValuePerturb,
    FlagFlip,
    CitationDelete,
    DiagnosisSwap,
    DomainDelete,
    SevereClaimInsert,
}

impl Corruption {
    pub const ALL: [Corruption; 6] = [
        Corruption::ValuePerturb,
        Corruption::FlagFlip,
        Corruption::CitationDelete,
        Corruption::DiagnosisSwap,
        Corruption::DomainDelete,
        Corruption::SevereClaimInsert,
    ];

    /// Index into `RubricScore::metrics` of the metric this corruption
    /// degrades.
    pub fn target_metric(self) -> usize {
        match self {
            Corruption::ValuePerturb => 0,
            Corruption::FlagFlip => 1,
            Corruption::CitationDelete => 2,
            Corruption::DiagnosisSwap => 3,
            Corruption::DomainDelete => 4,
            Corruption::SevereClaimInsert => 5,
        }
    }

    /// Applies the corruption, choosing the affected element with `pick`
    /// where there is a choice. `None` means the report offers nothing to
    /// corrupt in this way.
    pub fn apply(self, report: &ReportAst, truth: &GradingTruth<'_>, pick: usize) -> Result<Option<ReportAst>> {
        match self {
            Corruption::ValuePerturb => value_perturb(report, pick),
            Corruption::FlagFlip => Ok(flag_flip(report, pick)),
            Corruption::CitationDelete => Ok(citation_delete(report, pick)),
            Corruption::DiagnosisSwap => diagnosis_swap(report, truth),
            Corruption::DomainDelete => domain_delete(report, truth),
            Corruption::SevereClaimInsert => Ok(severe_claim_insert(report, truth)),
        }
    }
}

fn schema_index(name: &str) -> Result<usize> {
    BiomarkerSchema::standard()
        .index_of(name)
        .ok_or_else(|| Error::Evaluation(format!("unknown biomarker {name:?}")))
}

/// Shifts one stated value by four tolerances, keeping its flag.
pub fn value_perturb(report: &ReportAst, pick: usize) -> Result<Option<ReportAst>> {
    if report.findings.is_empty() {
        return Ok(None);
    }
    let mut out = report.clone();
    let k = pick % out.findings.len();
    perturb_finding(&mut out, k)?;
    Ok(Some(out))
}

/// Shifts every stated value beyond tolerance.
pub fn perturb_all_values(report: &ReportAst) -> Result<ReportAst> {
    let mut out = report.clone();
    for k in 0..out.findings.len() {
        perturb_finding(&mut out, k)?;
    }
    Ok(out)
}

fn perturb_finding(report: &mut ReportAst, k: usize) -> Result<()> {
    let f = &mut report.findings[k];
    let tol = value_tolerance(BiomarkerSchema::standard(), schema_index(&f.biomarker)?);
    f.value_centi += to_centi(4.0 * tol).max(1);
    Ok(())
}

/// Low and high swap; a normal flag becomes high.
pub fn flag_flip(report: &ReportAst, pick: usize) -> Option<ReportAst> {
    if report.findings.is_empty() {
        return None;
    }
    let mut out = report.clone();
    let k = pick % out.findings.len();
    let f = &mut out.findings[k];
    f.flag = match f.flag {
        Flag::Low => Flag::High,
        Flag::High => Flag::Low,
        Flag::Normal => Flag::High,
    };
    Some(out)
}

/// Removes every citation of one inference. The result is deliberately
/// outside the grammar.
pub fn citation_delete(report: &ReportAst, pick: usize) -> Option<ReportAst> {
    if report.inferences.is_empty() {
        return None;
    }
    let mut out = report.clone();
    let k = pick % out.inferences.len();
    out.inferences[k].citations.clear();
    Some(out)
}

fn collateral(before: &[f64; 6], after: &[f64; 6], target: usize) -> f64 {
    (0..6).filter(|&m| m != target).map(|m| (before[m] - after[m]).abs()).sum()
}

/// Replaces the diagnosis with the label that leaves the other metrics
/// least disturbed among those that lower consistency; ties take the
/// earlier label.
pub fn diagnosis_swap(report: &ReportAst, truth: &GradingTruth<'_>) -> Result<Option<ReportAst>> {
    let target = Corruption::DiagnosisSwap.target_metric();
    let base = rubric_score(report, truth)?.metrics();
    let mut best: Option<(f64, ReportAst)> = None;
    for label in DiagnosisLabel::ALL {
        if label == report.diagnosis {
            continue;
        }
        let mut cand = report.clone();
        cand.diagnosis = label;
        let after = rubric_score(&cand, truth)?.metrics();
        if after[target] >= base[target] {
            continue;
        }
        let cost = collateral(&base, &after, target);
        if best.as_ref().is_none_or(|(c, _)| cost < *c) {
            best = Some((cost, cand));
        }
    }
    Ok(best.map(|(_, r)| r))
}

/// Drops every finding of one anatomical domain and renumbers citations.
/// Domains whose removal leaves every inference with a citation are
/// preferred.
pub fn domain_delete(report: &ReportAst, truth: &GradingTruth<'_>) -> Result<Option<ReportAst>> {
    let domains = report
        .findings
        .iter()
        .map(|f| schema_index(&f.biomarker).map(|i| truth.rules.domain(i)))
        .collect::<Result<Vec<Domain>>>()?;
    let mut fallback = None;
    for d in Domain::ALL {
        if !domains.contains(&d) {
            continue;
        }
        let cand = remove_domain(report, &domains, d);
        if cand.inferences.iter().all(|i| !i.citations.is_empty()) {
            return Ok(Some(cand));
        }
        fallback.get_or_insert(cand);
    }
    Ok(fallback)
}

fn remove_domain(report: &ReportAst, domains: &[Domain], d: Domain) -> ReportAst {
    let mut remap = vec![None; report.findings.len()];
    let mut findings = Vec::new();
    for (k, f) in report.findings.iter().enumerate() {
        if domains[k] != d {
            remap[k] = Some(findings.len());
            findings.push(f.clone());
        }
    }
    let inferences = report
        .inferences
        .iter()
        .map(|inf| Inference {
            template: inf.template,
            citations: inf
                .citations
                .iter()
                .filter_map(|&c| remap.get(c).copied().flatten())
                .collect(),
        })
        .collect();
    ReportAst {
        findings,
        inferences,
        diagnosis: report.diagnosis,
        note: report.note.clone(),
    }
}

/// Adds a label-driven claim for a disease that is neither the true label
/// nor supported by any of its pattern flags, citing the first finding.
pub fn severe_claim_insert(report: &ReportAst, truth: &GradingTruth<'_>) -> Option<ReportAst> {
    if report.findings.is_empty() {
        return None;
    }
    let flags = truth.rules.flags(truth.biomarkers.values());
    let asserted: Vec<DiagnosisLabel> = report
        .inferences
        .iter()
        .filter_map(|i| i.template.asserted_disease())
        .chain(std::iter::once(report.diagnosis))
        .collect();
    let claim = DiagnosisLabel::ALL[1..].iter().copied().find(|&d| {
        d != truth.label && !asserted.contains(&d) && truth.rules.pattern_hits(d, &flags).is_empty()
    })?;
    let mut out = report.clone();
    out.inferences.push(Inference {
        template: Template::LabelDriven(claim),
        citations: vec![0],
    });
    Some(out)
}
