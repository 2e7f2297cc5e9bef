//! The pipeline stages. Each reads its inputs from the artifact directory,
//! writes its outputs there and finishes with a manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::BufReader;
use std::path::Path;

use oculus::align::{
    evaluate_retrieval, linear_probe_regression, loss_curve_csv, train_alignment, AlignConfig, AlignedEncoders,
    ImageEncoder, ProbeMetrics,
};
use oculus::checkpoint::{load_checkpoint, Checkpoint};
use oculus::cohort::{export_cohort, import_cohort, sample_cohort, CohortSample, DiagnosisLabel, Modality};
use oculus::eval::{aggregate, evaluate_text, records_csv, EvalAggregate, RubricScore};
use oculus::lm::{
    build_examples, generate_reports, sft_curve_csv, teacher_forced_stats, train_sft, PrefixMode, ReportModel,
    SftExample, TeacherForcedStats,
};
use oculus::report::{
    annotate_cohort, instruction_pairs, read_instruction_pairs, write_instruction_pairs, EyeGuidelineRules,
    Vocabulary,
};
use oculus::tensor::Parameters;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::artifacts::{Manifest, Session};
use crate::config::RunConfig;
use crate::error::CliError;

pub const COHORT: &str = "cohort.ndjson";
pub const INSTRUCTIONS: &str = "instructions.ndjson";
pub const SPLIT: &str = "split.json";
pub const ALIGN_OCT: &str = "align_oct.json";
pub const ALIGN_CFP: &str = "align_cfp.json";
pub const ALIGN_REPORT: &str = "align_report.json";
pub const SFT: &str = "sft.json";
pub const EVAL_SAMPLES: &str = "eval_samples.csv";
pub const EVAL_REPORTS: &str = "eval_reports.ndjson";
pub const EVAL_AGGREGATE: &str = "eval_aggregate.json";
pub const ABLATION: &str = "ablation.json";

const TF_BATCH: usize = 32;

fn align_module(m: Modality) -> &'static str {
    match m {
        Modality::Oct => "align_oct",
        Modality::Cfp => "align_cfp",
    }
}

fn align_file(m: Modality) -> &'static str {
    match m {
        Modality::Oct => ALIGN_OCT,
        Modality::Cfp => ALIGN_CFP,
    }
}

fn modality_name(m: Modality) -> &'static str {
    match m {
        Modality::Oct => "oct",
        Modality::Cfp => "cfp",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitFile {
    pub seed: u64,
    pub split_ratio: f64,
    pub train: Vec<u64>,
    pub test: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityRetrieval {
    pub modality: String,
    /// `k` to held-out image-to-biomarker top-k accuracy.
    pub top_k: BTreeMap<usize, f64>,
    pub chance_top1: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeComparison {
    pub aligned: ProbeMetrics,
    pub random: ProbeMetrics,
    pub delta_r2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignReport {
    pub seed: u64,
    pub retrieval: Vec<ModalityRetrieval>,
    /// OCT biomarker probe from the aligned OCT encoder against the same
    /// architecture at its initial weights.
    pub probe: ProbeComparison,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherForcedPair {
    pub full: TeacherForcedStats,
    pub zero_cfp: TeacherForcedStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub seed: u64,
    pub aggregate: EvalAggregate,
    pub teacher_forced: TeacherForcedPair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub name: String,
    pub retrieval_top1: Option<f64>,
    pub probe: Option<ProbeMetrics>,
    pub aggregate: Option<EvalAggregate>,
    pub teacher_forced: Option<TeacherForcedStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub variants: Vec<AblationVariant>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Csv,
}

fn load_cohort(s: &Session) -> Result<Vec<CohortSample>, CliError> {
    Ok(import_cohort(&s.path(COHORT))?)
}

fn load_split(s: &Session, cohort: &[CohortSample]) -> Result<(Vec<CohortSample>, Vec<CohortSample>), CliError> {
    let split: SplitFile = serde_json::from_str(&s.read_string(SPLIT)?)?;
    let by_eid: BTreeMap<u64, &CohortSample> = cohort.iter().map(|c| (c.eid, c)).collect();
    let pick = |ids: &[u64]| {
        ids.iter()
            .map(|id| {
                by_eid.get(id).map(|c| (*c).clone()).ok_or_else(|| {
                    CliError::Config(format!("split refers to eid {id}, which is not in the cohort; rerun `oculus gen`"))
                })
            })
            .collect::<Result<Vec<_>, _>>()
    };
    Ok((pick(&split.train)?, pick(&split.test)?))
}

fn load_encoders(s: &Session, m: Modality) -> Result<AlignedEncoders, CliError> {
    Ok(load_checkpoint::<AlignedEncoders>(&s.path(align_file(m)), align_module(m))?.model)
}

fn load_pairs(s: &Session) -> Result<Vec<oculus::report::InstructionPair>, CliError> {
    let f = std::fs::File::open(s.path(INSTRUCTIONS))?;
    Ok(read_instruction_pairs(BufReader::new(f))?)
}

fn held_out_examples(
    s: &Session,
    test: &[CohortSample],
    oct: &ImageEncoder,
    cfp: &ImageEncoder,
) -> Result<Vec<SftExample>, CliError> {
    Ok(build_examples(test, &load_pairs(s)?, oct, cfp, Vocabulary::standard())?)
}

fn eval_limit(cfg: &RunConfig, n: usize) -> usize {
    match cfg.eval.max_samples {
        0 => n,
        m => m.min(n),
    }
}

/// Synthesizes and annotates the cohort, writes the instruction pairs and
/// fixes the train/held-out split.
pub fn gen(cfg: &RunConfig, dir: &Path) -> Result<Manifest, CliError> {
    let mut s = Session::open(dir, "gen", cfg)?;
    let mut cohort = sample_cohort(cfg.cohort_size, cfg.seed)?;
    annotate_cohort(&mut cohort, EyeGuidelineRules::standard())?;
    export_cohort(&cohort, &s.path(COHORT))?;
    s.record_output(COHORT)?;
    let mut buf = Vec::new();
    write_instruction_pairs(&instruction_pairs(&cohort)?, &mut buf)?;
    s.write(INSTRUCTIONS, &buf)?;
    let (train, test) = oculus::cohort::split_by_eid(&cohort, cfg.split_ratio, cfg.seed)?;
    let split = SplitFile {
        seed: cfg.seed,
        split_ratio: cfg.split_ratio,
        train: train.iter().map(|c| c.eid).collect(),
        test: test.iter().map(|c| c.eid).collect(),
    };
    s.write_json(SPLIT, &split)?;
    s.finish()
}

fn probe_pair(cfg: &RunConfig, aligned: &ImageEncoder, random: &ImageEncoder, train: &[CohortSample], test: &[CohortSample]) -> Result<ProbeComparison, CliError> {
    let a = linear_probe_regression(aligned, train, test, cfg.eval.probe_lambda)?.aggregate;
    let r = linear_probe_regression(random, train, test, cfg.eval.probe_lambda)?.aggregate;
    Ok(ProbeComparison {
        delta_r2: a.r2 - r.r2,
        aligned: a,
        random: r,
    })
}

/// Contrastive alignment of the OCT and CFP encoders.
pub fn align(cfg: &RunConfig, dir: &Path) -> Result<Manifest, CliError> {
    let mut s = Session::open(dir, "align", cfg)?;
    s.require(&[(COHORT, "gen"), (SPLIT, "gen")])?;
    let cohort = load_cohort(&s)?;
    let (train, test) = load_split(&s, &cohort)?;
    let mut retrieval = Vec::new();
    let mut oct = None;
    for m in [Modality::Oct, Modality::Cfp] {
        let run = train_alignment(&train, m, &cfg.align, cfg.seed)?;
        let mut top_k = BTreeMap::new();
        for &k in &cfg.eval.retrieval_k {
            top_k.insert(k, evaluate_retrieval(&run.encoders, &test, k)?);
        }
        retrieval.push(ModalityRetrieval {
            modality: modality_name(m).into(),
            top_k,
            chance_top1: 1.0 / test.len() as f64,
            final_loss: run.curve.last().map_or(f64::NAN, |e| e.total),
        });
        s.write(&format!("align_loss_{}.csv", modality_name(m)), loss_curve_csv(&run.curve)?.as_bytes())?;
        let ck = Checkpoint::new(align_module(m), run.encoders.clone(), run.optimizers, cfg.seed)
            .with_metadata(json!({ "seed": cfg.seed, "config": cfg.align }));
        s.write(align_file(m), ck.to_json()?.as_bytes())?;
        if m == Modality::Oct {
            oct = Some(run.encoders);
        }
    }
    let oct = oct.expect("OCT alignment ran");
    let random = AlignedEncoders::init(&train, Modality::Oct, cfg.align.embed_dim, cfg.seed)?;
    let probe = probe_pair(cfg, &oct.image, &random.image, &train, &test)?;
    s.write_json(
        ALIGN_REPORT,
        &AlignReport {
            seed: cfg.seed,
            retrieval,
            probe,
        },
    )?;
    s.finish()
}

/// Instruction tuning of projectors and decoder over frozen encoders.
pub fn sft(cfg: &RunConfig, dir: &Path) -> Result<Manifest, CliError> {
    let mut s = Session::open(dir, "sft", cfg)?;
    s.require(&[
        (COHORT, "gen"),
        (INSTRUCTIONS, "gen"),
        (SPLIT, "gen"),
        (ALIGN_OCT, "align"),
        (ALIGN_CFP, "align"),
    ])?;
    let cohort = load_cohort(&s)?;
    let (train, _) = load_split(&s, &cohort)?;
    let oct = load_encoders(&s, Modality::Oct)?.image;
    let cfp = load_encoders(&s, Modality::Cfp)?.image;
    let vocab = Vocabulary::standard();
    let examples = build_examples(&train, &load_pairs(&s)?, &oct, &cfp, vocab)?;
    let model = ReportModel::init(vocab.clone(), oct.embed_dim(), cfg.sft.mapper_dim, cfg.sft.decoder, cfg.seed)?;
    let run = train_sft(&examples, &oct, &cfp, model, &cfg.sft, cfg.seed)?;
    let encoders = json!({
        "oct": { "checkpoint_sha256": s.input_hash(ALIGN_OCT), "fingerprint": oct.fingerprint() },
        "cfp": { "checkpoint_sha256": s.input_hash(ALIGN_CFP), "fingerprint": cfp.fingerprint() },
    });
    let ck = Checkpoint::new("sft", run.model, run.optimizers, cfg.seed)
        .with_metadata(json!({ "seed": cfg.seed, "config": cfg.sft, "frozen_encoders": encoders }));
    s.write(SFT, ck.to_json()?.as_bytes())?;
    s.write("sft_loss.csv", sft_curve_csv(&run.curve)?.as_bytes())?;
    s.finish()
}

/// Fails unless the encoders in the artifact directory are the ones the
/// fine-tuned model was trained against.
fn check_frozen(ck: &Checkpoint<ReportModel>, oct: &ImageEncoder, cfp: &ImageEncoder) -> Result<(), CliError> {
    for (name, enc) in [("oct", oct), ("cfp", cfp)] {
        let recorded = ck.metadata["frozen_encoders"][name]["fingerprint"].as_str();
        if recorded != Some(enc.fingerprint().as_str()) {
            return Err(CliError::Evaluation(format!(
                "{name} encoder differs from the one used for fine-tuning; rerun `oculus sft`"
            )));
        }
    }
    Ok(())
}

struct EvalInputs {
    model: ReportModel,
    examples: Vec<SftExample>,
    test: Vec<CohortSample>,
    train: Vec<CohortSample>,
}

fn eval_inputs(s: &mut Session) -> Result<EvalInputs, CliError> {
    s.require(&[
        (COHORT, "gen"),
        (INSTRUCTIONS, "gen"),
        (SPLIT, "gen"),
        (ALIGN_OCT, "align"),
        (ALIGN_CFP, "align"),
        (SFT, "sft"),
    ])?;
    let cohort = load_cohort(s)?;
    let (train, test) = load_split(s, &cohort)?;
    let oct = load_encoders(s, Modality::Oct)?.image;
    let cfp = load_encoders(s, Modality::Cfp)?.image;
    let ck: Checkpoint<ReportModel> = load_checkpoint(&s.path(SFT), "sft")?;
    check_frozen(&ck, &oct, &cfp)?;
    let examples = held_out_examples(s, &test, &oct, &cfp)?;
    Ok(EvalInputs {
        model: ck.model,
        examples,
        test,
        train,
    })
}

fn generate_and_grade(
    cfg: &RunConfig,
    inputs: &EvalInputs,
    mode: PrefixMode,
) -> Result<(Vec<String>, Vec<oculus::eval::EvalRecord>), CliError> {
    let n = eval_limit(cfg, inputs.examples.len());
    let texts = generate_reports(&inputs.model, &inputs.examples[..n], mode, cfg.sft.max_report_tokens)?;
    let records = texts
        .iter()
        .zip(&inputs.test)
        .map(|(t, sample)| evaluate_text(t, sample, EyeGuidelineRules::standard()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((texts, records))
}

/// Greedy held-out reports, graded against the rule-engine reference.
pub fn eval(cfg: &RunConfig, dir: &Path) -> Result<Manifest, CliError> {
    let mut s = Session::open(dir, "eval", cfg)?;
    let inputs = eval_inputs(&mut s)?;
    let (texts, records) = generate_and_grade(cfg, &inputs, PrefixMode::Full)?;
    let teacher_forced = TeacherForcedPair {
        full: teacher_forced_stats(&inputs.model, &inputs.examples, PrefixMode::Full, TF_BATCH)?,
        zero_cfp: teacher_forced_stats(&inputs.model, &inputs.examples, PrefixMode::ZeroCfp, TF_BATCH)?,
    };
    let mut ndjson = String::new();
    for (r, t) in records.iter().zip(&texts) {
        ndjson.push_str(&serde_json::to_string(&json!({ "eid": r.eid, "text": t }))?);
        ndjson.push('\n');
    }
    s.write(EVAL_REPORTS, ndjson.as_bytes())?;
    s.write(EVAL_SAMPLES, records_csv(&records)?.as_bytes())?;
    s.write_json(
        EVAL_AGGREGATE,
        &EvalSummary {
            seed: cfg.seed,
            aggregate: aggregate(&records)?,
            teacher_forced,
        },
    )?;
    s.finish()
}

/// Side-by-side comparison of the full model with the enabled ablations.
pub fn ablate(cfg: &RunConfig, dir: &Path) -> Result<Manifest, CliError> {
    let mut s = Session::open(dir, "ablate", cfg)?;
    s.require(&[(EVAL_AGGREGATE, "eval"), (ALIGN_REPORT, "align")])?;
    let inputs = eval_inputs(&mut s)?;
    let full: EvalSummary = serde_json::from_str(&s.read_string(EVAL_AGGREGATE)?)?;
    let align: AlignReport = serde_json::from_str(&s.read_string(ALIGN_REPORT)?)?;
    let oct_top1 = align
        .retrieval
        .iter()
        .find(|r| r.modality == "oct")
        .and_then(|r| r.top_k.get(&1).copied());
    let mut variants = vec![AblationVariant {
        name: "full".into(),
        retrieval_top1: oct_top1,
        probe: Some(align.probe.aligned.clone()),
        aggregate: Some(full.aggregate),
        teacher_forced: Some(full.teacher_forced.full),
    }];
    if cfg.ablation.oct_only {
        let (_, records) = generate_and_grade(cfg, &inputs, PrefixMode::ZeroCfp)?;
        variants.push(AblationVariant {
            name: "oct_only".into(),
            retrieval_top1: None,
            probe: None,
            aggregate: Some(aggregate(&records)?),
            teacher_forced: Some(full.teacher_forced.zero_cfp),
        });
    }
    let lambda = cfg.eval.probe_lambda;
    if cfg.ablation.standard_infonce {
        let variant_cfg = AlignConfig {
            include_positive_in_denominator: true,
            ..cfg.align.clone()
        };
        let run = train_alignment(&inputs.train, Modality::Oct, &variant_cfg, cfg.seed)?;
        variants.push(AblationVariant {
            name: "standard_infonce".into(),
            retrieval_top1: Some(evaluate_retrieval(&run.encoders, &inputs.test, 1)?),
            probe: Some(linear_probe_regression(&run.encoders.image, &inputs.train, &inputs.test, lambda)?.aggregate),
            aggregate: None,
            teacher_forced: None,
        });
    }
    if cfg.ablation.random_encoder {
        let random = AlignedEncoders::init(&inputs.train, Modality::Oct, cfg.align.embed_dim, cfg.seed)?;
        variants.push(AblationVariant {
            name: "random_encoder".into(),
            retrieval_top1: Some(evaluate_retrieval(&random, &inputs.test, 1)?),
            probe: Some(align.probe.random.clone()),
            aggregate: None,
            teacher_forced: None,
        });
    }
    s.write_json(
        ABLATION,
        &AblationReport {
            seed: cfg.seed,
            variants,
        },
    )?;
    s.finish()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.4}"))
}

pub fn render_text(summary: &EvalSummary, ablation: Option<&AblationReport>) -> String {
    let a = &summary.aggregate;
    let mut out = String::new();
    let _ = writeln!(out, "seed {}", summary.seed);
    let _ = writeln!(out, "samples {}  malformed {}  parse rate {:.4}", a.samples, a.malformed, a.parse_rate);
    let _ = writeln!(out, "macro F1 {:.4}", a.macro_f1);
    for (name, v) in RubricScore::METRICS.iter().zip(a.means.metrics()) {
        let _ = writeln!(out, "{name:<24}{v:>9.2}");
    }
    let _ = writeln!(out, "{:<24}{:>9.4}", "semantic_overlap", a.means.semantic_overlap);
    let tf = &summary.teacher_forced;
    let _ = writeln!(
        out,
        "teacher-forced NLL {:.4} (zero CFP {:.4}), token accuracy {:.4}, structural {:.4}",
        tf.full.mean_token_nll, tf.zero_cfp.mean_token_nll, tf.full.token_accuracy, tf.full.structural_accuracy
    );
    let _ = writeln!(out, "per-class F1");
    for (label, f1) in DiagnosisLabel::ALL.iter().zip(a.per_class_f1) {
        let _ = writeln!(out, "  {:<24}{f1:>7.4}  support {}", label.as_str(), a.confusion.support(label.index()));
    }
    if let Some(ab) = ablation {
        let _ = writeln!(out, "ablations");
        for v in &ab.variants {
            let _ = writeln!(
                out,
                "  {:<18} top1 {:>7}  probe R2 {:>7}  quantitative {:>7}  NLL {:>7}",
                v.name,
                fmt_opt(v.retrieval_top1),
                fmt_opt(v.probe.as_ref().map(|p| p.r2)),
                fmt_opt(v.aggregate.as_ref().map(|g| g.means.quantitative_accuracy)),
                fmt_opt(v.teacher_forced.map(|t| t.mean_token_nll)),
            );
        }
    }
    out
}

pub fn render_csv(summary: &EvalSummary, ablation: Option<&AblationReport>) -> String {
    let a = &summary.aggregate;
    let mut out = String::from("section,name,value\n");
    let mut row = |section: &str, name: &str, v: String| {
        let _ = writeln!(out, "{section},{name},{v}");
    };
    row("run", "seed", summary.seed.to_string());
    row("aggregate", "samples", a.samples.to_string());
    row("aggregate", "parse_rate", a.parse_rate.to_string());
    row("aggregate", "macro_f1", a.macro_f1.to_string());
    for (name, v) in RubricScore::METRICS.iter().zip(a.means.metrics()) {
        row("aggregate", name, v.to_string());
    }
    row("aggregate", "semantic_overlap", a.means.semantic_overlap.to_string());
    row("teacher_forced", "nll_full", summary.teacher_forced.full.mean_token_nll.to_string());
    row("teacher_forced", "nll_zero_cfp", summary.teacher_forced.zero_cfp.mean_token_nll.to_string());
    for (label, f1) in DiagnosisLabel::ALL.iter().zip(a.per_class_f1) {
        row("per_class_f1", label.as_str(), f1.to_string());
    }
    if let Some(ab) = ablation {
        for v in &ab.variants {
            row(&format!("ablation_{}", v.name), "retrieval_top1", fmt_opt(v.retrieval_top1));
            row(&format!("ablation_{}", v.name), "probe_r2", fmt_opt(v.probe.as_ref().map(|p| p.r2)));
            row(
                &format!("ablation_{}", v.name),
                "quantitative_accuracy",
                fmt_opt(v.aggregate.as_ref().map(|g| g.means.quantitative_accuracy)),
            );
            row(
                &format!("ablation_{}", v.name),
                "nll",
                fmt_opt(v.teacher_forced.map(|t| t.mean_token_nll)),
            );
        }
    }
    out
}

/// Renders the aggregate (and ablation table, when present) and returns
/// the rendered text.
pub fn report(cfg: &RunConfig, dir: &Path, format: ReportFormat) -> Result<(Manifest, String), CliError> {
    let mut s = Session::open(dir, "report", cfg)?;
    s.require(&[(EVAL_AGGREGATE, "eval")])?;
    let summary: EvalSummary = serde_json::from_str(&s.read_string(EVAL_AGGREGATE)?)?;
    let ablation = if s.path(ABLATION).is_file() {
        s.require(&[(ABLATION, "ablate")])?;
        Some(serde_json::from_str::<AblationReport>(&s.read_string(ABLATION)?)?)
    } else {
        None
    };
    let (name, text) = match format {
        ReportFormat::Text => ("report.txt", render_text(&summary, ablation.as_ref())),
        ReportFormat::Csv => ("report.csv", render_csv(&summary, ablation.as_ref())),
    };
    s.write(name, text.as_bytes())?;
    Ok((s.finish()?, text))
}

/// Every artifact file name in `dir`, excluding manifests and the lock.
pub fn artifact_names(dir: &Path) -> Result<BTreeSet<String>, CliError> {
    let mut out = BTreeSet::new();
    for entry in std::fs::read_dir(dir)? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if !name.starts_with("manifest_") && !name.starts_with('.') {
            out.insert(name);
        }
    }
    Ok(out)
}
