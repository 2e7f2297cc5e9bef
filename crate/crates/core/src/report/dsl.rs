//! Line-oriented report text. See `docs/report_grammar.ebnf` for the grammar.
//!
//! ```text
//! FINDING vertical_cup_disc_ratio 0.71 ratio high
//! FINDING rnfl_average 70.12 um low
//! INFER glaucomatous_optic_neuropathy 0,1
//! DIAGNOSIS Glaucoma
//! ```

use std::fmt::Write as _;

use super::ast::{is_note_char, Finding, Flag, Inference, ReportAst, Template};
use crate::cohort::{BiomarkerSchema, DiagnosisLabel, Unit};
use crate::error::ParseError;

pub const FINDING: &str = "FINDING";
pub const INFER: &str = "INFER";
pub const DIAGNOSIS: &str = "DIAGNOSIS";
pub const NOTE: &str = "NOTE";

const MAX_INTEGER_DIGITS: usize = 12;

pub fn format_centi(v: i64) -> String {
    let sign = if v < 0 { "-" } else { "" };
    let a = v.unsigned_abs();
    format!("{sign}{}.{:02}", a / 100, a % 100)
}

pub fn report_to_text(ast: &ReportAst) -> String {
    let mut lines = Vec::with_capacity(ast.findings.len() + ast.inferences.len() + 2);
    for f in &ast.findings {
        lines.push(format!(
            "{FINDING} {} {} {} {}",
            f.biomarker,
            format_centi(f.value_centi),
            f.unit,
            f.flag
        ));
    }
    for inf in &ast.inferences {
        let mut line = format!("{INFER} {} ", inf.template);
        for (i, c) in inf.citations.iter().enumerate() {
            if i > 0 {
                line.push(',');
            }
            let _ = write!(line, "{c}");
        }
        lines.push(line);
    }
    lines.push(format!("{DIAGNOSIS} {}", ast.diagnosis));
    if let Some(note) = &ast.note {
        lines.push(format!("{NOTE} {note}"));
    }
    lines.join("\n")
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Phase {
    Findings,
    Inferences,
    Closed,
    Noted,
}

struct Line<'a> {
    number: usize,
    text: &'a str,
    pos: usize,
}

impl<'a> Line<'a> {
    fn column(&self) -> usize {
        self.text[..self.pos].chars().count() + 1
    }

    fn error(&self, expected: &[&str], message: impl Into<String>) -> ParseError {
        ParseError {
            line: self.number,
            column: self.column(),
            expected: expected.iter().map(|s| s.to_string()).collect(),
            message: message.into(),
        }
    }

    fn error_at(&self, pos: usize, expected: &[&str], message: impl Into<String>) -> ParseError {
        let column = self.text[..pos].chars().count() + 1;
        ParseError {
            line: self.number,
            column,
            expected: expected.iter().map(|s| s.to_string()).collect(),
            message: message.into(),
        }
    }

    fn at_end(&self) -> bool {
        self.pos == self.text.len()
    }

    /// The next run of non-space characters; may be empty.
    fn word(&mut self) -> (usize, &'a str) {
        let start = self.pos;
        let len = self.text[start..].find(' ').unwrap_or(self.text.len() - start);
        self.pos += len;
        (start, &self.text[start..start + len])
    }

    fn space(&mut self, expected_after: &str) -> Result<(), ParseError> {
        if self.text[self.pos..].starts_with(' ') {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.error(&["' '"], format!("expected a single space before {expected_after}")))
        }
    }

    fn end(&self) -> Result<(), ParseError> {
        if self.at_end() {
            Ok(())
        } else {
            Err(self.error(&["end of line"], "unexpected trailing text"))
        }
    }
}

fn parse_number(line: &Line, start: usize, word: &str) -> Result<i64, ParseError> {
    let bad = |msg: &str| line.error_at(start, &["number with two decimals"], msg.to_string());
    let (negative, body) = match word.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, word),
    };
    let (int, frac) = body
        .split_once('.')
        .ok_or_else(|| bad("number must have exactly two decimals"))?;
    if int.is_empty() || !int.bytes().all(|b| b.is_ascii_digit()) {
        return Err(bad("malformed integer part"));
    }
    if int.len() > 1 && int.starts_with('0') {
        return Err(bad("leading zeros are not allowed"));
    }
    if int.len() > MAX_INTEGER_DIGITS {
        return Err(bad("number too large"));
    }
    if frac.len() != 2 || !frac.bytes().all(|b| b.is_ascii_digit()) {
        return Err(bad("number must have exactly two decimals"));
    }
    let magnitude: i64 = int.parse::<i64>().expect("digits") * 100 + frac.parse::<i64>().expect("digits");
    if negative && magnitude == 0 {
        return Err(bad("negative zero is not allowed"));
    }
    Ok(if negative { -magnitude } else { magnitude })
}

fn parse_finding(line: &mut Line) -> Result<Finding, ParseError> {
    let schema = BiomarkerSchema::standard();
    line.space("a biomarker name")?;
    let (start, name) = line.word();
    let idx = schema
        .index_of(name)
        .ok_or_else(|| line.error_at(start, &["biomarker name"], format!("unknown biomarker {name:?}")))?;
    line.space("a value")?;
    let (start, number) = line.word();
    let value_centi = parse_number(line, start, number)?;
    line.space("a unit")?;
    let (start, unit_text) = line.word();
    let expected_unit = schema.get(idx).unit;
    let unit: Unit = unit_text.parse().map_err(|_| {
        line.error_at(start, &[expected_unit.symbol()], format!("unknown unit {unit_text:?}"))
    })?;
    if unit != expected_unit {
        return Err(line.error_at(
            start,
            &[expected_unit.symbol()],
            format!("{name} is measured in {expected_unit}"),
        ));
    }
    line.space("a flag")?;
    let (start, flag_text) = line.word();
    let flag: Flag = flag_text
        .parse()
        .map_err(|_| line.error_at(start, &["low", "normal", "high"], format!("unknown flag {flag_text:?}")))?;
    line.end()?;
    Ok(Finding {
        biomarker: name.to_string(),
        value_centi,
        unit,
        flag,
    })
}

fn parse_inference(line: &mut Line, findings: usize) -> Result<Inference, ParseError> {
    line.space("a template")?;
    let (start, id) = line.word();
    let template: Template = id
        .parse()
        .map_err(|_| line.error_at(start, &["template id"], format!("unknown template {id:?}")))?;
    line.space("citations")?;
    let (start, list) = line.word();
    line.end()?;
    let mut citations = Vec::new();
    let mut offset = start;
    for part in list.split(',') {
        if part.is_empty() || !part.bytes().all(|b| b.is_ascii_digit()) || part.len() > 9 {
            return Err(line.error_at(offset, &["finding index"], "malformed citation"));
        }
        if part.len() > 1 && part.starts_with('0') {
            return Err(line.error_at(offset, &["finding index"], "leading zeros are not allowed"));
        }
        let index: usize = part.parse().expect("digits");
        if index >= findings {
            return Err(line.error_at(
                offset,
                &["finding index"],
                format!("dangling citation index {index}: only {findings} findings precede this line"),
            ));
        }
        citations.push(index);
        offset += part.len() + 1;
    }
    Ok(Inference { template, citations })
}

/// Parses report text; the inverse of [`report_to_text`].
pub fn parse_report(text: &str) -> Result<ReportAst, ParseError> {
    let mut findings = Vec::new();
    let mut inferences = Vec::new();
    let mut diagnosis = None;
    let mut note = None;
    let mut phase = Phase::Findings;
    let mut last_line = 1;
    for (i, raw) in text.split('\n').enumerate() {
        last_line = i + 1;
        let mut line = Line {
            number: i + 1,
            text: raw,
            pos: 0,
        };
        let allowed: &[&str] = match phase {
            Phase::Findings => &[FINDING, INFER, DIAGNOSIS],
            Phase::Inferences => &[INFER, DIAGNOSIS],
            Phase::Closed => &[NOTE, "end of input"],
            Phase::Noted => &["end of input"],
        };
        let (_, keyword) = line.word();
        match keyword {
            FINDING if phase == Phase::Findings => findings.push(parse_finding(&mut line)?),
            INFER if phase <= Phase::Inferences => {
                phase = Phase::Inferences;
                inferences.push(parse_inference(&mut line, findings.len())?);
            }
            DIAGNOSIS if phase <= Phase::Inferences => {
                phase = Phase::Closed;
                line.space("a diagnosis")?;
                let (start, label) = line.word();
                let parsed: DiagnosisLabel = label.parse().map_err(|_| {
                    let names: Vec<&str> = DiagnosisLabel::ALL.iter().map(|l| l.as_str()).collect();
                    line.error_at(start, &names, format!("unknown diagnosis {label:?}"))
                })?;
                line.end()?;
                diagnosis = Some(parsed);
            }
            NOTE if phase == Phase::Closed => {
                phase = Phase::Noted;
                line.space("note text")?;
                let rest = &raw[line.pos..];
                if let Some((off, c)) = rest.char_indices().find(|(_, c)| !is_note_char(*c)) {
                    return Err(line.error_at(
                        line.pos + off,
                        &["lowercase letter", "digit", "' ' . , - _"],
                        format!("character {c:?} is not allowed in a note"),
                    ));
                }
                note = Some(rest.to_string());
            }
            _ => {
                let line0 = Line { pos: 0, ..line };
                let message = if keyword.is_empty() {
                    "empty line".to_string()
                } else {
                    format!("unexpected {keyword:?}")
                };
                return Err(line0.error(allowed, message));
            }
        }
    }
    let diagnosis = diagnosis.ok_or_else(|| ParseError {
        line: last_line,
        column: text.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1,
        expected: vec![DIAGNOSIS.into()],
        message: "report ends without a diagnosis".into(),
    })?;
    Ok(ReportAst {
        findings,
        inferences,
        diagnosis,
        note,
    })
}
