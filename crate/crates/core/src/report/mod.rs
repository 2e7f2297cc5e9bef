//! Grounded report generation: the report AST and its text form, the
//! tokenizer, the guideline rule engine, and an optional external generator.

mod ast;
mod dsl;
mod rules;
mod tokenizer;

pub use ast::{to_centi, Finding, Flag, Inference, ReportAst, Template};
pub use dsl::{format_centi, parse_report, report_to_text, DIAGNOSIS, FINDING, INFER, NOTE};
pub use rules::{eye_guideline_report, DiseaseRule, EyeGuidelineRules, RangeRule, RULES_JSON};
pub use tokenizer::{prompt_text, TokenId, Vocabulary, EOS, PROMPT_TASK, QUERY};

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::cohort::{BiomarkerSchema, BiomarkerVector, CohortSample, DiagnosisLabel};
use crate::error::{Error, Result};
use crate::http::{EndpointConfig, JsonEndpoint};

/// The plain-text request sent to an external report generator.
pub fn guideline_prompt(b: &BiomarkerVector, g: DiagnosisLabel) -> String {
    let schema = BiomarkerSchema::standard();
    let mut out = String::from(
        "Write a report in the FINDING / INFER / DIAGNOSIS format. \
         Flag each measurement against its reference range, derive inferences \
         only from abnormal findings, and conclude with the given diagnosis.\n",
    );
    for (spec, v) in schema.entries().iter().zip(b.values()) {
        let _ = writeln!(
            out,
            "{} {:.2} {} [{}, {}]",
            spec.name, v, spec.unit, spec.ref_low, spec.ref_high
        );
    }
    let _ = write!(out, "diagnosis {g}");
    out
}

/// HTTP client for a generator that answers `{prompt}` with `{text}`.
#[derive(Debug)]
pub struct ExternalGenerator {
    endpoint: JsonEndpoint,
}

impl ExternalGenerator {
    pub fn new(config: EndpointConfig) -> Self {
        Self {
            endpoint: JsonEndpoint::new(config),
        }
    }

    /// Raw reply text; callers must parse it.
    pub fn generate(&self, prompt: &str) -> Result<String> {
        let reply = self.endpoint.post(&json!({ "prompt": prompt }))?;
        reply
            .get("text")
            .and_then(|t| t.as_str())
            .map(str::to_string)
            .ok_or_else(|| Error::Validation("generator reply lacks a string \"text\" field".into()))
    }

    /// Generates and parses a report for `(b, g)`.
    pub fn report(&self, b: &BiomarkerVector, g: DiagnosisLabel) -> Result<ReportAst> {
        let text = self.generate(&guideline_prompt(b, g))?;
        let ast = parse_report(&text)
            .map_err(|e| Error::Validation(format!("generator reply is not a valid report: {e}")))?;
        ast.validate()?;
        Ok(ast)
    }
}

/// External generation with an optional fallback to the rule engine.
pub fn generate_report(
    b: &BiomarkerVector,
    g: DiagnosisLabel,
    rules: &EyeGuidelineRules,
    external: Option<&ExternalGenerator>,
    fallback: bool,
) -> Result<ReportAst> {
    match external {
        None => eye_guideline_report(b, g, rules),
        Some(client) => match client.report(b, g) {
            Ok(ast) => Ok(ast),
            Err(_) if fallback => eye_guideline_report(b, g, rules),
            Err(e) => Err(e),
        },
    }
}

/// Attaches a rule-engine report to every sample.
pub fn annotate_cohort(cohort: &mut [CohortSample], rules: &EyeGuidelineRules) -> Result<()> {
    for s in cohort.iter_mut() {
        s.report = Some(eye_guideline_report(&s.biomarkers, s.label, rules)?);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionPair {
    pub eid: u64,
    pub prompt: String,
    pub report: String,
}

pub fn instruction_pairs(cohort: &[CohortSample]) -> Result<Vec<InstructionPair>> {
    cohort
        .iter()
        .map(|s| {
            let report = s.report.as_ref().ok_or_else(|| {
                Error::Validation(format!("sample {} has no report", s.eid))
            })?;
            Ok(InstructionPair {
                eid: s.eid,
                prompt: prompt_text(),
                report: report_to_text(report),
            })
        })
        .collect()
}

pub fn write_instruction_pairs<W: Write>(pairs: &[InstructionPair], mut w: W) -> Result<()> {
    for p in pairs {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_instruction_pairs<R: BufRead>(r: R) -> Result<Vec<InstructionPair>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let pair: InstructionPair = serde_json::from_str(&line).map_err(|e| Error::Record {
            record: i + 1,
            message: e.to_string(),
        })?;
        parse_report(&pair.report).map_err(|e| Error::Record {
            record: i + 1,
            message: e.to_string(),
        })?;
        out.push(pair);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::http::stub;

    fn glaucoma_case() -> (BiomarkerVector, ReportAst) {
        let b = BiomarkerVector::reference_midpoints()
            .with("vertical_cup_disc_ratio", 0.8)
            .unwrap();
        let ast = eye_guideline_report(&b, DiagnosisLabel::Glaucoma, EyeGuidelineRules::standard()).unwrap();
        (b, ast)
    }

    #[test]
    fn stub_echoing_a_valid_report_parses_to_it() {
        let (b, ast) = glaucoma_case();
        let body = json!({ "text": report_to_text(&ast) }).to_string();
        let (url, h) = stub::serve(vec![(200, body)]);
        let client = ExternalGenerator::new(EndpointConfig::new(url));
        assert_eq!(client.report(&b, DiagnosisLabel::Glaucoma).unwrap(), ast);
        let seen = h.join().unwrap();
        assert!(seen[0].contains("vertical_cup_disc_ratio 0.80 ratio"));
    }

    #[test]
    fn malformed_reply_is_a_validation_error() {
        let (b, _) = glaucoma_case();
        let (url, h) = stub::serve(vec![(200, json!({"text": "DIAGNOSIS Cataract"}).to_string())]);
        let client = ExternalGenerator::new(EndpointConfig::new(url));
        let got = generate_report(&b, DiagnosisLabel::Glaucoma, EyeGuidelineRules::standard(), Some(&client), false);
        assert!(matches!(got, Err(Error::Validation(_))));
        h.join().unwrap();
    }

    #[test]
    fn unreachable_endpoint_falls_back_to_rules() {
        let (b, ast) = glaucoma_case();
        let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let mut cfg = EndpointConfig::new(format!("http://127.0.0.1:{port}/"));
        cfg.timeout_ms = 200;
        cfg.max_retries = 1;
        let client = ExternalGenerator::new(cfg);
        let rules = EyeGuidelineRules::standard();
        assert!(matches!(
            generate_report(&b, DiagnosisLabel::Glaucoma, rules, Some(&client), false),
            Err(Error::Transport(_))
        ));
        assert_eq!(
            generate_report(&b, DiagnosisLabel::Glaucoma, rules, Some(&client), true).unwrap(),
            ast
        );
    }

    #[test]
    fn instruction_pairs_round_trip_through_ndjson() {
        let mut cohort = crate::cohort::sample_cohort(5, 3).unwrap();
        annotate_cohort(&mut cohort, EyeGuidelineRules::standard()).unwrap();
        let pairs = instruction_pairs(&cohort).unwrap();
        let mut buf = Vec::new();
        write_instruction_pairs(&pairs, &mut buf).unwrap();
        assert_eq!(read_instruction_pairs(&buf[..]).unwrap(), pairs);
        assert_eq!(pairs[0].prompt, "QUERY interpret_retina");
    }
}
