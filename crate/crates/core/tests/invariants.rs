use std::collections::BTreeSet;

use oculus::align::{cosine_matrix, total_contrastive_loss};
use oculus::cohort::{
    assign_labels, class_quota, read_cohort, render_scan, sample_biomarkers, sample_cohort, split_by_eid, write_cohort,
    BiomarkerSchema, DiagnosisLabel, Modality, SCAN_SIDE,
};
use oculus::eval::{macro_f1, rubric_score, semantic_overlap, Corruption, GradingTruth};
use oculus::fusion::fuse_sequence;
use oculus::lm::{DecoderConfig, PrefixMode, ReportModel};
use oculus::report::{eye_guideline_report, parse_report, report_to_text, EyeGuidelineRules, TokenId, Vocabulary};
use oculus::tensor::Matrix;
use proptest::prelude::*;

fn label() -> impl Strategy<Value = DiagnosisLabel> {
    (0usize..7).prop_map(|i| DiagnosisLabel::from_index(i).unwrap())
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    proptest::collection::vec(-3.0f64..3.0, rows * cols)
        .prop_filter("rows need nonzero norm", move |v| {
            v.chunks(cols).all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-6)
        })
        .prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn drawn_biomarkers_satisfy_the_schema(l in label(), seed in any::<u64>(), index in 0u64..10_000) {
        let b = sample_biomarkers(l, seed, index);
        prop_assert_eq!(b.values().len(), BiomarkerSchema::standard().len());
        prop_assert!(b.validate().is_ok());
        let cdr = b.get("vertical_cup_disc_ratio");
        prop_assert!(cdr > 0.0 && cdr < 1.0);
    }

    #[test]
    fn guideline_reports_are_grounded_consistent_and_round_trip(l in label(), seed in any::<u64>(), index in 0u64..10_000) {
        let rules = EyeGuidelineRules::standard();
        let b = sample_biomarkers(l, seed, index);
        let ast = eye_guideline_report(&b, l, rules).unwrap();
        prop_assert_eq!(ast.diagnosis, l);
        prop_assert!(ast.validate().is_ok());
        for inf in &ast.inferences {
            prop_assert!(!inf.citations.is_empty());
            prop_assert!(inf.citations.iter().all(|&c| c < ast.findings.len()));
        }
        let text = report_to_text(&ast);
        prop_assert_eq!(parse_report(&text).unwrap(), ast);
        let vocab = Vocabulary::standard();
        let ids = vocab.tokenize(&text).unwrap();
        prop_assert!(ids.iter().all(|t| t.index() < vocab.len()));
        prop_assert_eq!(vocab.detokenize(&ids).unwrap(), text.clone());
        prop_assert!((semantic_overlap(&text, &text) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn contrastive_loss_is_symmetric_and_bounded_below(a in matrix(6, 4), b in matrix(6, 4), tau in 0.05f64..2.0) {
        let ab = total_contrastive_loss(&a, &b, tau, false).unwrap();
        let ba = total_contrastive_loss(&b, &a, tau, false).unwrap();
        prop_assert!((ab.total - ba.total).abs() <= 1e-12 * ab.total.abs().max(1.0));
        prop_assert!((ab.total - 0.5 * (ab.image_to_tab + ab.tab_to_image)).abs() < 1e-12);
        prop_assert!(ab.total >= (5.0f64).ln() - 2.0 / tau - 1e-9);
        let s = cosine_matrix(&a, &b).unwrap();
        prop_assert!(s.data().iter().all(|v| v.abs() <= 1.0 + 1e-12));
    }

    #[test]
    fn macro_f1_lies_in_unit_interval_and_confusion_rows_count_truth(
        pairs in proptest::collection::vec((label(), label()), 1..200)
    ) {
        let (f1, cm) = macro_f1(&pairs).unwrap();
        prop_assert!((0.0..=1.0).contains(&f1));
        for l in DiagnosisLabel::ALL {
            let truth = pairs.iter().filter(|(t, _)| *t == l).count();
            prop_assert_eq!(cm.support(l.index()), truth);
        }
    }

    #[test]
    fn fused_prefix_keeps_order_and_length(d in 1usize..6, n in 0usize..5, seed in any::<u64>()) {
        let mut x = seed;
        let mut next = move || { x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); (x >> 11) as f64 / (1u64 << 53) as f64 };
        let h_cfp: Vec<f64> = (0..d).map(|_| next()).collect();
        let h_oct: Vec<f64> = (0..d).map(|_| next()).collect();
        let prompt = Matrix::from_vec(n, d, (0..n * d).map(|_| next()).collect()).unwrap();
        let fused = fuse_sequence(&h_cfp, &h_oct, &prompt).unwrap();
        prop_assert_eq!(fused.total_length(), 2 + n);
        prop_assert_eq!(fused.dim(), d);
        prop_assert_eq!(fused.tokens().row(0), &h_cfp[..]);
        prop_assert_eq!(fused.tokens().row(1), &h_oct[..]);
        prop_assert_eq!(fused.prompt(), prompt);
    }

    #[test]
    fn class_quota_sums_to_cohort_size(n in 1usize..50_000) {
        let q = class_quota(n);
        prop_assert_eq!(q.iter().sum::<usize>(), n);
        for l in DiagnosisLabel::ALL {
            prop_assert!((q[l.index()] as f64 - n as f64 * l.prior()).abs() < 1.0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn rendered_scans_are_bounded_and_pure(l in label(), seed in any::<u64>()) {
        let b = sample_biomarkers(l, seed, 0);
        for m in [Modality::Oct, Modality::Cfp] {
            let a = render_scan(&b, m, seed).unwrap();
            prop_assert_eq!(a.pixels_f64().len(), SCAN_SIDE * SCAN_SIDE);
            prop_assert!(a.pixels_f64().iter().all(|p| (0.0..=1.0).contains(p)));
            prop_assert_eq!(render_scan(&b, m, seed).unwrap(), a);
        }
    }

    #[test]
    fn split_partitions_the_cohort_by_eid(n in 2usize..24, ratio in 0.05f64..0.95, seed in any::<u64>()) {
        let cohort = sample_cohort(n, seed).unwrap();
        let (train, test) = split_by_eid(&cohort, ratio, seed).unwrap();
        let a: BTreeSet<u64> = train.iter().map(|s| s.eid).collect();
        let b: BTreeSet<u64> = test.iter().map(|s| s.eid).collect();
        prop_assert!(a.is_disjoint(&b));
        prop_assert_eq!(a.len() + b.len(), n);
        prop_assert!(!a.is_empty() && !b.is_empty());
    }

    #[test]
    fn corruptions_keep_scores_in_range_and_lower_their_metric(l in label(), seed in any::<u64>(), pick in 0usize..16) {
        let rules = EyeGuidelineRules::standard();
        let b = sample_biomarkers(l, seed, 1);
        let truth = GradingTruth { biomarkers: &b, label: l, rules };
        let oracle = eye_guideline_report(&b, l, rules).unwrap();
        let base = rubric_score(&oracle, &truth).unwrap();
        prop_assert!(base.metrics().iter().all(|&m| (m - 100.0).abs() < 1e-9));
        for c in Corruption::ALL {
            if let Some(bad) = c.apply(&oracle, &truth, pick).unwrap() {
                let s = rubric_score(&bad, &truth).unwrap();
                prop_assert!(s.metrics().iter().all(|&m| (0.0..=100.0).contains(&m)));
                prop_assert!((0.0..=1.0).contains(&s.semantic_overlap));
                prop_assert!(s.metrics()[c.target_metric()] < 100.0, "{:?}", c);
            }
        }
    }
}

#[test]
fn cohort_ndjson_round_trips() {
    let cohort = sample_cohort(12, 3).unwrap();
    let mut buf = Vec::new();
    write_cohort(&cohort, &mut buf).unwrap();
    assert_eq!(read_cohort(buf.as_slice()).unwrap(), cohort);
}

#[test]
fn labels_follow_quota_exactly() {
    let labels = assign_labels(997, 4);
    let q = class_quota(997);
    for l in DiagnosisLabel::ALL {
        assert_eq!(labels.iter().filter(|&&x| x == l).count(), q[l.index()]);
    }
}

#[test]
fn decoder_rows_are_normalized_and_causal() {
    let vocab = Vocabulary::standard().clone();
    let dec = DecoderConfig {
        vocab: vocab.len(),
        d_model: 8,
        n_heads: 2,
        n_blocks: 2,
        ffn_hidden: 16,
        context: 96,
    };
    let model = ReportModel::init(vocab.clone(), 6, 5, dec, 13).unwrap();
    let prefix = model.prefix(&[0.3; 6], &[-0.2; 6], PrefixMode::Full).unwrap();
    let targets: Vec<TokenId> = (0..12).map(|i| TokenId((i * 7 % vocab.len()) as u32)).collect();
    let lp = model.decoder_forward(&prefix, &targets).unwrap();
    for r in 0..lp.rows() {
        let lse = lp.row(r).iter().map(|v| v.exp()).sum::<f64>().ln();
        assert!(lse.abs() < 1e-9, "row {r}: {lse}");
    }
    for t in 0..targets.len() {
        let mut changed = targets.clone();
        changed[t] = TokenId(((changed[t].0 as usize + 1) % vocab.len()) as u32);
        let lp2 = model.decoder_forward(&prefix, &changed).unwrap();
        for r in 0..=t {
            assert_eq!(lp.row(r), lp2.row(r), "row {r} saw target {t}");
        }
    }
}
