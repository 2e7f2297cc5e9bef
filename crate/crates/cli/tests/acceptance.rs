//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use oculus::align::{contrastive_loss_grad, info_nce_i2t, total_contrastive_loss, AlignedEncoders};
use oculus::checkpoint::{file_sha256, load_checkpoint, Checkpoint};
use oculus::cohort::{assign_labels, sample_cohort, DiagnosisLabel, Modality};
use oculus::eval::{macro_f1, rubric_score, Corruption, GradingTruth};
use oculus::fusion::ProjectorParams;
use oculus::lm::{sft_loss_grad, DecoderConfig, ReportModel, SftExample};
use oculus::report::{annotate_cohort, prompt_text, EyeGuidelineRules, Vocabulary};
use oculus::tensor::{finite_diff_check, finite_diff_check_at, sample_coordinates, Matrix, Parameters};
use oculus_cli::artifacts::{read_manifest, Manifest};
use oculus_cli::commands::{self, AblationReport, AlignReport, EvalSummary, ReportFormat};
use oculus_cli::{CliError, RunConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    id: usize,
    name: &'static str,
    passed: bool,
    detail: String,
}

fn outcome(id: usize, name: &'static str, passed: bool, detail: String) -> Outcome {
    Outcome {
        id,
        name,
        passed,
        detail,
    }
}

fn criterion_1() -> Outcome {
    let mut worst_identity: f64 = 0.0;
    for n in [2usize, 8, 64] {
        let row = vec![0.3, -1.2, 0.7, 2.0];
        let e = Matrix::from_rows(&vec![row; n]).unwrap();
        let expected = ((n - 1) as f64).ln();
        let l = total_contrastive_loss(&e, &e, 0.5, false).unwrap();
        worst_identity = worst_identity
            .max((l.image_to_tab - expected).abs())
            .max((l.tab_to_image - expected).abs());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_swap: f64 = 0.0;
    let mut violations = 0usize;
    let mut min_margin = f64::INFINITY;
    for trial in 0..100_000 {
        let n = rng.random_range(2..=16);
        let d = rng.random_range(2..=8);
        let a = Matrix::from_vec(n, d, (0..n * d).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
        let b = Matrix::from_vec(n, d, (0..n * d).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
        let bound = ((n - 1) as f64).ln() - 4.0;
        let it = info_nce_i2t(&a, &b, 0.5, false).unwrap();
        let ti = info_nce_i2t(&b, &a, 0.5, false).unwrap();
        for v in [it, ti] {
            min_margin = min_margin.min(v - bound);
            if v < bound {
                violations += 1;
            }
        }
        if trial % 10 == 0 {
            let ab = total_contrastive_loss(&a, &b, 0.5, false).unwrap().total;
            let ba = total_contrastive_loss(&b, &a, 0.5, false).unwrap().total;
            worst_swap = worst_swap.max((ab - ba).abs());
        }
    }
    let passed = worst_identity <= 1e-9 && worst_swap <= 1e-12 && violations == 0;
    outcome(
        1,
        "contrastive loss identities",
        passed,
        format!(
            "max |L - log(N-1)| = {worst_identity:.2e}; max swap gap = {worst_swap:.2e}; \
             bound violations = {violations} of 200000 (min margin {min_margin:.3})"
        ),
    )
}

fn random_report_model(seed: u64) -> ReportModel {
    let cfg = DecoderConfig {
        vocab: Vocabulary::standard().len(),
        d_model: 8,
        n_heads: 2,
        n_blocks: 2,
        ffn_hidden: 12,
        context: 48,
    };
    ReportModel::init(Vocabulary::standard().clone(), 6, 5, cfg, seed).unwrap()
}

fn random_examples(rng: &mut ChaCha8Rng) -> Vec<SftExample> {
    let vocab = Vocabulary::standard();
    let texts = [
        "FINDING vertical_cup_disc_ratio 0.71 ratio high",
        "INFER within_normal_limits 0,1",
        "DIAGNOSIS Glaucoma",
    ];
    texts
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let mut target = vocab.tokenize(t).unwrap();
            target.truncate(rng.random_range(3..=target.len()));
            target.push(vocab.eos());
            SftExample {
                eid: i as u64,
                z_oct: (0..6).map(|_| rng.random_range(-1.0..1.0)).collect(),
                z_cfp: (0..6).map(|_| rng.random_range(-1.0..1.0)).collect(),
                prompt: vocab.tokenize(&prompt_text()).unwrap(),
                target,
            }
        })
        .collect()
}

fn criterion_2() -> Outcome {
    const H: f64 = 1e-5;
    const TOL: f64 = 1e-4;
    let seeds = 20u64;
    let cohort = sample_cohort(64, 3).unwrap();
    let mut details = Vec::new();
    let mut passed = true;

    // contrastive loss through both encoders, for each modality
    for modality in [Modality::Oct, Modality::Cfp] {
        let (mut checked, mut failed, mut worst) = (0usize, 0usize, 0.0f64);
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let enc = AlignedEncoders::init(&cohort, modality, 8, seed).unwrap();
            let idx: Vec<usize> = rand::seq::index::sample(&mut rng, cohort.len(), 4).into_vec();
            let batch: Vec<_> = idx.iter().map(|&i| cohort[i].clone()).collect();
            let px = enc.image.sample_pixels(&batch).unwrap();
            let ft = enc.tabular.feature_matrix(&batch).unwrap();
            let (_, grad) = contrastive_loss_grad(&enc, &px, &ft, 0.5, false).unwrap();
            let coords = sample_coordinates(&enc, 24, &mut rng);
            let loss = |e: &AlignedEncoders| contrastive_loss_grad(e, &px, &ft, 0.5, false).unwrap().0.total;
            let r = finite_diff_check_at(loss, &enc, &grad, H, TOL, &coords);
            checked += r.checked;
            failed += r.failures.len();
            worst = worst.max(r.max_rel_error);
        }
        passed &= failed == 0;
        details.push(format!(
            "{modality:?} encoders: {failed} of {checked} coords fail (max rel {worst:.1e})"
        ));
    }

    // projectors and shared mapper on a random linear read-out
    let (mut checked, mut failed) = (0usize, 0usize);
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let p = ProjectorParams::init(6, 5, 7, &mut rng);
        let zo = Matrix::glorot(3, 6, &mut rng);
        let zc = Matrix::glorot(3, 6, &mut rng);
        let wc = Matrix::glorot(3, 7, &mut rng);
        let wo = Matrix::glorot(3, 7, &mut rng);
        let dot = |a: &Matrix, b: &Matrix| a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>();
        let loss = |q: &ProjectorParams| {
            let (c, o, _) = q.forward_batch(&zo, &zc).unwrap();
            dot(&c, &wc) + dot(&o, &wo)
        };
        let (_, _, tape) = p.forward_batch(&zo, &zc).unwrap();
        let g = p.backward_batch(&tape, &wc, &wo).unwrap();
        let r = finite_diff_check(loss, &p, &g, H, TOL);
        checked += r.checked;
        failed += r.failures.len();
    }
    passed &= failed == 0;
    details.push(format!("projectors: {failed} of {checked} fail"));

    // report NLL through projectors and the 2-block decoder, every parameter
    let (mut checked, mut failed, mut worst) = (0usize, 0usize, 0.0f64);
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let model = random_report_model(seed);
        let examples = random_examples(&mut rng);
        let (_, grad) = sft_loss_grad(&model, &examples).unwrap();
        let r = finite_diff_check(|m: &ReportModel| sft_loss_grad(m, &examples).unwrap().0, &model, &grad, H, TOL);
        checked += r.checked;
        failed += r.failures.len();
        worst = worst.max(r.max_rel_error);
    }
    passed &= failed == 0;
    details.push(format!("decoder NLL: {failed} of {checked} fail (max rel {worst:.1e})"));
    outcome(2, "finite-difference gradients", passed, format!("{} seeds each; {}", seeds, details.join("; ")))
}

fn criterion_7() -> Outcome {
    let rules = EyeGuidelineRules::standard();
    let mut cohort = sample_cohort(1000, 11).unwrap();
    annotate_cohort(&mut cohort, rules).unwrap();
    let mut imperfect = 0usize;
    for s in &cohort {
        let truth = GradingTruth {
            biomarkers: &s.biomarkers,
            label: s.label,
            rules,
        };
        let score = rubric_score(s.report.as_ref().unwrap(), &truth).unwrap();
        if score.metrics() != [100.0; 6] {
            imperfect += 1;
        }
    }
    let mut per_op = BTreeMap::new();
    let mut passed = imperfect == 0;
    for op in Corruption::ALL {
        let (mut trials, mut lowered, mut skipped) = (0usize, 0usize, 0usize);
        for (i, s) in cohort.iter().enumerate() {
            if trials == 100 {
                break;
            }
            let truth = GradingTruth {
                biomarkers: &s.biomarkers,
                label: s.label,
                rules,
            };
            let report = s.report.as_ref().unwrap();
            let Some(bad) = op.apply(report, &truth, i).unwrap() else {
                skipped += 1;
                continue;
            };
            trials += 1;
            let t = op.target_metric();
            let before = rubric_score(report, &truth).unwrap().metrics()[t];
            let after = rubric_score(&bad, &truth).unwrap().metrics()[t];
            if after < before {
                lowered += 1;
            }
        }
        passed &= trials == 100 && lowered == 100;
        per_op.insert(format!("{op:?}"), format!("{lowered}/{trials} (skipped {skipped})"));
    }
    outcome(
        7,
        "rubric soundness",
        passed,
        format!("oracle below 100 on {imperfect} of 1000; corruptions lowering target: {per_op:?}"),
    )
}

/// Per-class F1 from explicit loops over the pairs, then the plain mean.
fn brute_force_macro_f1(pairs: &[(DiagnosisLabel, DiagnosisLabel)]) -> f64 {
    let mut sum = 0.0;
    for c in DiagnosisLabel::ALL {
        let tp = pairs.iter().filter(|(t, p)| *t == c && *p == c).count() as f64;
        let fp = pairs.iter().filter(|(t, p)| *t != c && *p == c).count() as f64;
        let fn_ = pairs.iter().filter(|(t, p)| *t == c && *p != c).count() as f64;
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        sum += if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
    }
    sum / 7.0
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=60);
        let pairs: Vec<_> = (0..n)
            .map(|_| {
                (
                    DiagnosisLabel::ALL[rng.random_range(0..7)],
                    DiagnosisLabel::ALL[rng.random_range(0..7)],
                )
            })
            .collect();
        let (f1, _) = macro_f1(&pairs).unwrap();
        worst = worst.max((f1 - brute_force_macro_f1(&pairs)).abs());
    }
    // published class distribution, percent
    let table = [38.40, 36.05, 19.95, 3.40, 1.16, 0.86, 0.18];
    let n = 15663;
    let labels = assign_labels(n, 8);
    let mut max_dev: f64 = 0.0;
    for (i, pct) in table.iter().enumerate() {
        let got = labels.iter().filter(|l| l.index() == i).count() as f64 * 100.0 / n as f64;
        max_dev = max_dev.max((got - pct).abs());
    }
    let passed = worst <= 1e-12 && max_dev <= 0.5;
    outcome(
        8,
        "classification metrics oracle",
        passed,
        format!("max |macro_f1 - brute force| = {worst:.1e} over 1000 pairings; max prior deviation {max_dev:.3} pp at n = {n}"),
    )
}

fn run_pipeline(cfg: &RunConfig, dir: &Path) -> Vec<(String, f64)> {
    let mut times = Vec::new();
    type Step = fn(&RunConfig, &Path) -> Result<Manifest, CliError>;
    let steps: [(&str, Step); 5] = [
        ("gen", commands::gen),
        ("align", commands::align),
        ("sft", commands::sft),
        ("eval", commands::eval),
        ("ablate", commands::ablate),
    ];
    for (name, f) in steps {
        let t = Instant::now();
        f(cfg, dir).unwrap_or_else(|e| panic!("{name} failed: {e}"));
        times.push((name.to_string(), t.elapsed().as_secs_f64()));
    }
    commands::report(cfg, dir, ReportFormat::Text).unwrap();
    times
}

fn read_json<T: serde::de::DeserializeOwned>(dir: &Path, name: &str) -> T {
    serde_json::from_str(&std::fs::read_to_string(dir.join(name)).unwrap()).unwrap()
}

fn criteria_from_run(dir: &Path, times: &[(String, f64)]) -> Vec<Outcome> {
    let align: AlignReport = read_json(dir, commands::ALIGN_REPORT);
    let eval: EvalSummary = read_json(dir, commands::EVAL_AGGREGATE);
    let ablation: AblationReport = read_json(dir, commands::ABLATION);
    let mut out = Vec::new();

    let top1: Vec<(String, f64)> = align.retrieval.iter().map(|r| (r.modality.clone(), r.top_k[&1])).collect();
    let oct_top1 = top1.iter().find(|(m, _)| m == "oct").unwrap().1;
    out.push(outcome(
        3,
        "held-out retrieval",
        oct_top1 >= 0.90,
        format!(
            "OCT top-1 {oct_top1:.4} (threshold 0.90, chance {:.4}); all modalities {top1:?}",
            align.retrieval[0].chance_top1
        ),
    ));

    let p = &align.probe;
    out.push(outcome(
        4,
        "aligned vs random encoder probe",
        p.delta_r2 >= 0.2 && p.aligned.mae < p.random.mae && p.aligned.rmse < p.random.rmse,
        format!(
            "R2 {:.4} vs {:.4} (delta {:.4}); MAE {:.4} vs {:.4}; RMSE {:.4} vs {:.4}",
            p.aligned.r2, p.random.r2, p.delta_r2, p.aligned.mae, p.random.mae, p.aligned.rmse, p.random.rmse
        ),
    ));

    let agg = &eval.aggregate;
    let tf = &eval.teacher_forced;
    let align_manifest = read_manifest(dir, "align").unwrap();
    let sft_manifest = read_manifest(dir, "sft").unwrap();
    let eval_manifest = read_manifest(dir, "eval").unwrap();
    let mut freeze_ok = true;
    for (file, modality) in [(commands::ALIGN_OCT, "align_oct"), (commands::ALIGN_CFP, "align_cfp")] {
        let produced = &align_manifest.outputs[file];
        freeze_ok &= &sft_manifest.inputs[file] == produced;
        freeze_ok &= &eval_manifest.inputs[file] == produced;
        freeze_ok &= &file_sha256(&dir.join(file)).unwrap() == produced;
        let enc: Checkpoint<AlignedEncoders> = load_checkpoint(&dir.join(file), modality).unwrap();
        let sft: Checkpoint<ReportModel> = load_checkpoint(&dir.join(commands::SFT), "sft").unwrap();
        let key = &modality[6..];
        freeze_ok &= sft.metadata["frozen_encoders"][key]["fingerprint"].as_str() == Some(enc.model.image.fingerprint().as_str());
        freeze_ok &= sft.metadata["frozen_encoders"][key]["checkpoint_sha256"].as_str() == Some(produced.as_str());
    }
    out.push(outcome(
        5,
        "instruction tuning efficacy",
        agg.parse_rate >= 0.95 && tf.full.structural_accuracy >= 0.85 && freeze_ok,
        format!(
            "parse rate {:.4} over {} held-out reports; structural token accuracy {:.4} (all tokens {:.4}); encoder hashes unchanged: {freeze_ok}",
            agg.parse_rate, agg.samples, tf.full.structural_accuracy, tf.full.token_accuracy
        ),
    ));

    let variant = |name: &str| ablation.variants.iter().find(|v| v.name == name).unwrap();
    let full_q = variant("full").aggregate.as_ref().unwrap().means.quantitative_accuracy;
    let oct_q = variant("oct_only").aggregate.as_ref().unwrap().means.quantitative_accuracy;
    out.push(outcome(
        6,
        "CFP ablation direction",
        tf.zero_cfp.mean_token_nll > tf.full.mean_token_nll && full_q - oct_q >= 5.0,
        format!(
            "NLL {:.4} -> {:.4} with CFP zeroed; quantitative accuracy {full_q:.2} -> {oct_q:.2} (drop {:.2}, needs 5)",
            tf.full.mean_token_nll,
            tf.zero_cfp.mean_token_nll,
            full_q - oct_q
        ),
    ));
    let pipeline: f64 = times.iter().filter(|(n, _)| n != "ablate").map(|(_, t)| t).sum();
    println!("pipeline timings (s): {times:?}; gen..eval total {pipeline:.0}s");
    out
}

fn criterion_9(a: &Path, b: &Path) -> Outcome {
    let names_a = commands::artifact_names(a).unwrap();
    let names_b = commands::artifact_names(b).unwrap();
    let mut differing = Vec::new();
    for name in &names_a {
        if !names_b.contains(name) || file_sha256(&a.join(name)).unwrap() != file_sha256(&b.join(name)).unwrap() {
            differing.push(name.clone());
        }
    }
    let mut manifests_agree = true;
    for cmd in ["gen", "align", "sft", "eval", "ablate", "report"] {
        let (ma, mb) = (read_manifest(a, cmd).unwrap(), read_manifest(b, cmd).unwrap());
        manifests_agree &= ma.outputs == mb.outputs && ma.inputs == mb.inputs;
    }
    outcome(
        9,
        "determinism",
        differing.is_empty() && names_a == names_b && manifests_agree,
        format!(
            "{} artifacts compared, {} differ {differing:?}; manifest hashes agree: {manifests_agree}",
            names_a.len(),
            differing.len()
        ),
    )
}

/// Runs a criterion and fails it when it exceeds its runtime budget.
fn within_budget(budget_secs: f64, f: fn() -> Outcome) -> Outcome {
    let t = Instant::now();
    let mut o = f();
    let secs = t.elapsed().as_secs_f64();
    o.passed &= secs < budget_secs;
    o.detail.push_str(&format!("; runtime {secs:.1}s (budget {budget_secs:.0}s)"));
    o
}

fn main() -> ExitCode {
    let mut results = vec![within_budget(60.0, criterion_1), within_budget(300.0, criterion_2)];
    results.push(criterion_7());
    results.push(criterion_8());

    let cfg = RunConfig::default();
    let first = tempfile::tempdir().unwrap();
    let second = tempfile::tempdir().unwrap();
    let times = run_pipeline(&cfg, first.path());
    results.extend(criteria_from_run(first.path(), &times));
    run_pipeline(&cfg, second.path());
    results.push(criterion_9(first.path(), second.path()));

    results.sort_by_key(|o| o.id);
    let mut all = true;
    for o in &results {
        all &= o.passed;
        println!(
            "criterion {} [{}] {}: {}",
            o.id,
            if o.passed { "PASS" } else { "FAIL" },
            o.name,
            o.detail
        );
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
