//! NDJSON cohort files.
//!
//! The first line is a header `{"format", "version", "count"}`; each further
//! line holds one sample with its pixel grids as base64 little-endian `f32`
//! arrays. The header count lets a reader detect truncation at a line
//! boundary.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::render::SCAN_SIDE;
use super::{BiomarkerVector, CohortSample, DiagnosisLabel, Modality, SyntheticScan};
use crate::error::{Error, Result};
use crate::report::{parse_report, report_to_text};

const FORMAT: &str = "oculus-cohort";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    count: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    eid: u64,
    label: DiagnosisLabel,
    biomarkers: BiomarkerVector,
    oct: String,
    cfp: String,
    report: Option<String>,
}

fn encode_pixels(p: &[f32]) -> String {
    let bytes: Vec<u8> = p.iter().flat_map(|v| v.to_le_bytes()).collect();
    BASE64.encode(bytes)
}

fn decode_pixels(text: &str, what: &str) -> std::result::Result<Vec<f32>, String> {
    let bytes = BASE64.decode(text).map_err(|e| format!("{what}: {e}"))?;
    let expected = SCAN_SIDE * SCAN_SIDE * 4;
    if bytes.len() != expected {
        return Err(format!("{what}: {} bytes, expected {expected}", bytes.len()));
    }
    let px: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if px.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(format!("{what}: pixel outside [0, 1]"));
    }
    Ok(px)
}

pub fn write_cohort<W: Write>(cohort: &[CohortSample], mut w: W) -> Result<()> {
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        count: cohort.len(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for s in cohort {
        let rec = Record {
            eid: s.eid,
            label: s.label,
            biomarkers: s.biomarkers.clone(),
            oct: encode_pixels(&s.oct.pixels),
            cfp: encode_pixels(&s.cfp.pixels),
            report: s.report.as_ref().map(report_to_text),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn parse_record(line: &str) -> std::result::Result<CohortSample, String> {
    let rec: Record = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let report = match rec.report {
        Some(text) => {
            let ast = parse_report(&text).map_err(|e| format!("report: {e}"))?;
            ast.validate().map_err(|e| format!("report: {e}"))?;
            Some(ast)
        }
        None => None,
    };
    let scan = |modality, pixels| SyntheticScan {
        modality,
        side: SCAN_SIDE,
        pixels,
        source_biomarkers: rec.biomarkers.clone(),
    };
    Ok(CohortSample {
        eid: rec.eid,
        oct: scan(Modality::Oct, decode_pixels(&rec.oct, "oct")?),
        cfp: scan(Modality::Cfp, decode_pixels(&rec.cfp, "cfp")?),
        biomarkers: rec.biomarkers.clone(),
        label: rec.label,
        report,
    })
}

/// Reads a whole cohort; any defect fails the read with its line number.
pub fn read_cohort<R: BufRead>(r: R) -> Result<Vec<CohortSample>> {
    let mut lines = r.lines();
    let first = lines.next().transpose()?.ok_or(Error::Record {
        record: 1,
        message: "missing header".into(),
    })?;
    let header: Header = serde_json::from_str(&first).map_err(|e| Error::Record {
        record: 1,
        message: format!("bad header: {e}"),
    })?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(Error::Record {
            record: 1,
            message: format!("unsupported format {} v{}", header.format, header.version),
        });
    }
    let mut out = Vec::with_capacity(header.count);
    let mut seen = std::collections::BTreeSet::new();
    for (i, line) in lines.enumerate() {
        let record = i + 2;
        let line = line?;
        let sample = parse_record(&line).map_err(|message| Error::Record { record, message })?;
        if !seen.insert(sample.eid) {
            return Err(Error::Record {
                record,
                message: format!("duplicate eid {}", sample.eid),
            });
        }
        out.push(sample);
    }
    if out.len() != header.count {
        return Err(Error::Record {
            record: out.len() + 2,
            message: format!("file is truncated: header promises {} samples, found {}", header.count, out.len()),
        });
    }
    Ok(out)
}

/// Writes via a temporary sibling and renames into place.
pub fn export_cohort(cohort: &[CohortSample], path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let f = File::create(&tmp)?;
        write_cohort(cohort, BufWriter::new(f))?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn import_cohort(path: &Path) -> Result<Vec<CohortSample>> {
    read_cohort(BufReader::new(File::open(path)?))
}
