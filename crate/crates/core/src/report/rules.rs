//! The executable guideline: reference ranges, per-disease flag patterns and
//! the deterministic report builder.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use serde::Deserialize;

use super::ast::{Finding, Flag, Inference, ReportAst, Template};
use crate::cohort::{BiomarkerSchema, BiomarkerVector, DiagnosisLabel, Domain};
use crate::error::{Error, Result};

pub const RULES_JSON: &str = include_str!("../../data/eye_guideline_rules.json");

#[derive(Debug, Clone, PartialEq)]
pub struct RangeRule {
    pub biomarker: String,
    pub low: f64,
    pub high: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiseaseRule {
    pub label: DiagnosisLabel,
    /// Cited when the label is given but the pattern is silent.
    pub primary: usize,
    /// `(biomarker index, required flag)` pairs.
    pub pattern: Vec<(usize, Flag)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EyeGuidelineRules {
    ranges: Vec<RangeRule>,
    domains: Vec<Domain>,
    diseases: Vec<DiseaseRule>,
    priority: Vec<DiagnosisLabel>,
    sentinels: BTreeMap<Domain, usize>,
}

#[derive(Deserialize)]
struct RawDisease {
    label: DiagnosisLabel,
    primary: String,
    pattern: Vec<(String, Flag)>,
}

#[derive(Deserialize)]
struct RawRules {
    priority: Vec<DiagnosisLabel>,
    coverage_sentinels: BTreeMap<Domain, String>,
    diseases: Vec<RawDisease>,
}

impl EyeGuidelineRules {
    pub fn standard() -> &'static EyeGuidelineRules {
        static RULES: OnceLock<EyeGuidelineRules> = OnceLock::new();
        RULES.get_or_init(|| {
            EyeGuidelineRules::from_json(RULES_JSON, BiomarkerSchema::standard())
                .expect("bundled guideline rules are valid")
        })
    }

    /// Builds the rule table, taking reference ranges from `schema`.
    pub fn from_json(text: &str, schema: &BiomarkerSchema) -> Result<Self> {
        let raw: RawRules = serde_json::from_str(text)?;
        let index = |name: &str| {
            schema
                .index_of(name)
                .ok_or_else(|| Error::Rule(format!("biomarker {name:?} is not in the schema")))
        };
        let ranges: Vec<RangeRule> = schema
            .entries()
            .iter()
            .map(|e| RangeRule {
                biomarker: e.name.clone(),
                low: e.ref_low,
                high: e.ref_high,
            })
            .collect();
        for r in &ranges {
            if !(r.low < r.high) {
                return Err(Error::Rule(format!("{}: range low must be below high", r.biomarker)));
            }
        }
        let mut diseases = Vec::new();
        for d in raw.diseases {
            if d.label == DiagnosisLabel::Normal {
                return Err(Error::Rule("Normal cannot carry a disease rule".into()));
            }
            if d.pattern.is_empty() {
                return Err(Error::Rule(format!("{} has an empty pattern", d.label)));
            }
            let mut pattern = Vec::new();
            for (name, flag) in &d.pattern {
                if *flag == Flag::Normal {
                    return Err(Error::Rule(format!("{}: pattern flags must be abnormal", d.label)));
                }
                pattern.push((index(name)?, *flag));
            }
            diseases.push(DiseaseRule {
                label: d.label,
                primary: index(&d.primary)?,
                pattern,
            });
        }
        for label in DiagnosisLabel::ALL.into_iter().skip(1) {
            if diseases.iter().filter(|d| d.label == label).count() != 1 {
                return Err(Error::Rule(format!("{label} needs exactly one rule")));
            }
            if !raw.priority.contains(&label) {
                return Err(Error::Rule(format!("{label} is missing from the priority order")));
            }
        }
        if raw.priority.len() != 6 {
            return Err(Error::Rule("priority must list each disease once".into()));
        }
        let mut sentinels = BTreeMap::new();
        for domain in Domain::ALL {
            let name = raw
                .coverage_sentinels
                .get(&domain)
                .ok_or_else(|| Error::Rule(format!("no coverage sentinel for {domain:?}")))?;
            let i = index(name)?;
            if schema.get(i).domain != domain {
                return Err(Error::Rule(format!("sentinel {name} is not in domain {domain:?}")));
            }
            sentinels.insert(domain, i);
        }
        Ok(Self {
            ranges,
            domains: schema.entries().iter().map(|e| e.domain).collect(),
            diseases,
            priority: raw.priority,
            sentinels,
        })
    }

    pub fn ranges(&self) -> &[RangeRule] {
        &self.ranges
    }

    pub fn domain(&self, index: usize) -> Domain {
        self.domains[index]
    }

    pub fn sentinel(&self, domain: Domain) -> usize {
        self.sentinels[&domain]
    }

    pub fn disease(&self, label: DiagnosisLabel) -> Option<&DiseaseRule> {
        self.diseases.iter().find(|d| d.label == label)
    }

    pub fn priority(&self) -> &[DiagnosisLabel] {
        &self.priority
    }

    pub fn flag(&self, index: usize, value: f64) -> Flag {
        let r = &self.ranges[index];
        Flag::classify(value, r.low, r.high)
    }

    pub fn flags(&self, values: &[f64]) -> Vec<Flag> {
        values.iter().enumerate().map(|(i, &v)| self.flag(i, v)).collect()
    }

    /// Pattern entries of `label` that fire under `flags`.
    pub fn pattern_hits(&self, label: DiagnosisLabel, flags: &[Flag]) -> Vec<usize> {
        self.disease(label)
            .map(|d| {
                d.pattern
                    .iter()
                    .filter(|(i, f)| flags[*i] == *f)
                    .map(|(i, _)| *i)
                    .collect()
            })
            .unwrap_or_default()
    }

    /// The disease whose pattern fires most often (at least twice), ties
    /// broken by priority; `Normal` otherwise.
    pub fn strongest_pattern(&self, flags: &[Flag]) -> DiagnosisLabel {
        let mut best = (1, DiagnosisLabel::Normal);
        for &label in &self.priority {
            let hits = self.pattern_hits(label, flags).len();
            if hits > best.0 {
                best = (hits, label);
            }
        }
        best.1
    }

    fn check_vector(&self, b: &BiomarkerVector) -> Result<()> {
        if b.values().len() != self.ranges.len() {
            return Err(Error::Rule(format!(
                "rules cover {} biomarkers, vector has {}",
                self.ranges.len(),
                b.values().len()
            )));
        }
        Ok(())
    }
}

/// Builds the grounded report for `(b, g)`.
///
/// Findings are every abnormal measurement plus one reference measurement
/// for each anatomical domain that would otherwise go unmentioned, in schema
/// order. A disease label yields its pattern inference (or a label-driven
/// marker when the pattern is silent) and an incidental inference for the
/// remaining abnormalities; `Normal` yields a single narrative.
pub fn eye_guideline_report(
    b: &BiomarkerVector,
    g: DiagnosisLabel,
    rules: &EyeGuidelineRules,
) -> Result<ReportAst> {
    rules.check_vector(b)?;
    let schema = BiomarkerSchema::standard();
    let values = b.values();
    let flags = rules.flags(values);
    let mut selected: Vec<bool> = flags.iter().map(|f| f.is_abnormal()).collect();
    for domain in Domain::ALL {
        let covered = (0..values.len()).any(|i| selected[i] && rules.domain(i) == domain);
        if !covered {
            selected[rules.sentinel(domain)] = true;
        }
    }
    let disease = if g == DiagnosisLabel::Normal {
        None
    } else {
        Some(
            rules
                .disease(g)
                .ok_or_else(|| Error::Rule(format!("no rule for {g}")))?,
        )
    };
    let hits = disease.map(|d| rules.pattern_hits(d.label, &flags)).unwrap_or_default();
    if let Some(d) = disease {
        if hits.is_empty() {
            selected[d.primary] = true;
        }
    }

    let mut findings = Vec::new();
    let mut position = vec![usize::MAX; values.len()];
    for i in (0..values.len()).filter(|&i| selected[i]) {
        position[i] = findings.len();
        let spec = schema.get(i);
        findings.push(Finding::new(spec.name.clone(), values[i], spec.unit, flags[i]));
    }
    let abnormal: Vec<usize> = (0..values.len()).filter(|&i| flags[i].is_abnormal()).collect();

    let mut inferences = Vec::new();
    match disease {
        None if abnormal.is_empty() => inferences.push(Inference {
            template: Template::WithinNormalLimits,
            citations: (0..findings.len()).collect(),
        }),
        None => inferences.push(Inference {
            template: Template::IsolatedAbnormality,
            citations: abnormal.iter().map(|&i| position[i]).collect(),
        }),
        Some(d) => {
            if hits.is_empty() {
                inferences.push(Inference {
                    template: Template::label_driven(g)?,
                    citations: vec![position[d.primary]],
                });
            } else {
                let mut cited: Vec<usize> = hits.iter().map(|&i| position[i]).collect();
                cited.sort_unstable();
                inferences.push(Inference {
                    template: Template::disease(g)?,
                    citations: cited,
                });
            }
            let rest: Vec<usize> = abnormal
                .iter()
                .filter(|i| !hits.contains(i))
                .map(|&i| position[i])
                .collect();
            if !rest.is_empty() {
                inferences.push(Inference {
                    template: Template::IncidentalFinding,
                    citations: rest,
                });
            }
        }
    }
    Ok(ReportAst {
        findings,
        inferences,
        diagnosis: g,
        note: None,
    })
}
