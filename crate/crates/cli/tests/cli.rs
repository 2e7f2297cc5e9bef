use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use oculus::report::Vocabulary;
use oculus_cli::artifacts::{read_manifest, LOCK_FILE};
use oculus_cli::commands::{artifact_names, EvalSummary};

fn tiny_config() -> String {
    format!(
        r#"seed = 5
cohort_size = 120
split_ratio = 0.75

[align]
epochs = 2
batch_size = 16
embed_dim = 8

[sft]
epochs = 1
batch_size = 8
mapper_dim = 8
max_report_tokens = 24

[sft.decoder]
vocab = {}
d_model = 8
n_heads = 2
n_blocks = 1
ffn_hidden = 16
context = 256

[eval]
max_samples = 3
"#,
        Vocabulary::standard().len()
    )
}

fn oculus(args: &[&str], env: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_oculus"));
    cmd.args(args).env_remove("OCULUS_ARTIFACTS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn tiny_pipeline_writes_complete_manifests() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, tiny_config()).unwrap();
    let out_dir = tmp.path().join("art");
    let (c, o) = (cfg.to_str().unwrap(), out_dir.to_str().unwrap());
    for cmd in ["gen", "align", "sft", "eval", "ablate"] {
        ok(&oculus(&[cmd, "--config", c, "--out", o], &[]));
    }
    let text = oculus(&["report", "--config", c, "--out", o], &[]);
    ok(&text);
    let stdout = String::from_utf8(text.stdout).unwrap();
    assert!(stdout.contains("macro F1"), "{stdout}");
    assert!(stdout.contains("oct_only"), "{stdout}");

    // every artifact is hash-listed by exactly one manifest
    let mut owners: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for cmd in ["gen", "align", "sft", "eval", "ablate", "report"] {
        let m = read_manifest(&out_dir, cmd).unwrap();
        assert_eq!(m.seed, 5);
        assert!(m.wall_time_secs >= 0.0);
        for name in m.outputs.keys() {
            owners.entry(name.clone()).or_default().push(cmd.to_string());
        }
    }
    let names = artifact_names(&out_dir).unwrap();
    for name in &names {
        assert_eq!(owners.get(name).map(Vec::len), Some(1), "{name}: {:?}", owners.get(name));
    }
    assert_eq!(owners.len(), names.len());
    assert!(!out_dir.join(LOCK_FILE).exists());

    let summary: EvalSummary =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("eval_aggregate.json")).unwrap()).unwrap();
    assert_eq!(summary.seed, 5);
    assert_eq!(summary.aggregate.samples, 3);
    let rows = std::fs::read_to_string(out_dir.join("eval_samples.csv")).unwrap();
    assert_eq!(rows.lines().count(), 4);
    assert!(rows.starts_with("eid,quantitative_accuracy"));

    let csv = oculus(&["report", "--config", c, "--out", o, "--format", "csv"], &[]);
    ok(&csv);
    assert!(String::from_utf8(csv.stdout).unwrap().starts_with("section,name,value\n"));
    assert!(read_manifest(&out_dir, "report").unwrap().outputs.contains_key("report.csv"));
}

#[test]
fn missing_upstream_artifact_names_the_producer() {
    let tmp = tempfile::tempdir().unwrap();
    let out = oculus(&["eval", "--out", tmp.path().to_str().unwrap()], &[]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("oculus gen"), "{err}");
}

#[test]
fn eval_without_checkpoint_points_to_sft() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, tiny_config()).unwrap();
    let (c, o) = (cfg.to_str().unwrap(), tmp.path().to_str().unwrap());
    ok(&oculus(&["gen", "--config", c, "--out", o], &[]));
    ok(&oculus(&["align", "--config", c, "--out", o], &[]));
    let out = oculus(&["eval", "--config", c, "--out", o], &[]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8(out.stderr).unwrap().contains("oculus sft"));
}

#[test]
fn bad_config_exits_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "split_ratio = 2.0\n").unwrap();
    let out = oculus(&["gen", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()], &[]);
    assert_eq!(out.status.code(), Some(2));
    let missing = oculus(&["gen", "--config", "/nonexistent/run.toml"], &[]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn locked_directory_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join(LOCK_FILE), "1\n").unwrap();
    let out = oculus(&["gen", "--out", tmp.path().to_str().unwrap()], &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stderr).unwrap().contains("locked"));
}

#[test]
fn environment_sets_the_artifact_root_and_seed_flag_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, tiny_config()).unwrap();
    let root = tmp.path().join("from_env");
    ok(&oculus(&["gen", "--config", cfg.to_str().unwrap(), "--seed", "9"], &[("OCULUS_ARTIFACTS", &root)]));
    let m = read_manifest(&root, "gen").unwrap();
    assert_eq!(m.seed, 9);
    assert_eq!(m.config.seed, 9);
    assert!(root.join("cohort.ndjson").is_file());
}

#[test]
fn same_seed_gives_identical_gen_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, tiny_config()).unwrap();
    let c = cfg.to_str().unwrap();
    let (a, b, other) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    ok(&oculus(&["gen", "--config", c, "--out", a.to_str().unwrap()], &[]));
    ok(&oculus(&["gen", "--config", c, "--out", b.to_str().unwrap()], &[]));
    ok(&oculus(&["gen", "--config", c, "--out", other.to_str().unwrap(), "--seed", "6"], &[]));
    let (ma, mb, mc) = (
        read_manifest(&a, "gen").unwrap(),
        read_manifest(&b, "gen").unwrap(),
        read_manifest(&other, "gen").unwrap(),
    );
    assert_eq!(ma.outputs, mb.outputs);
    assert_ne!(ma.outputs, mc.outputs);
}
