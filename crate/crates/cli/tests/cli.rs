use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use lpo_rec_cli::{cmd_ablate, cmd_train, ABLATION_HEADER};
use lpo_rec_core::catalog::head_size;
use lpo_rec_core::model::init_params;
use lpo_rec_core::{DatasetSplits, ModelDims, RunConfig, Tensor};

fn bin(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lpo-rec")).args(args).current_dir(dir).output().expect("binary runs")
}

fn prepared(dir: &Path, users: &str, items: &str) {
    let gen = bin(
        &["generate", "--users", users, "--items", items, "--per-user", "10", "--seed", "4", "--out", "raw.tsv"],
        dir,
    );
    assert!(gen.status.success(), "{}", String::from_utf8_lossy(&gen.stderr));
    let prep = bin(&["prepare", "--input", "raw.tsv", "--out", "prep"], dir);
    assert!(prep.status.success(), "{}", String::from_utf8_lossy(&prep.stderr));
}

fn small_config(dir: &Path, extra: &str) -> RunConfig {
    let text = format!(
        "data_dir = {}\nout_dir = {}\nd = 16\nk = 3\n{extra}",
        dir.join("prep").display(),
        dir.join("run").display()
    );
    RunConfig::parse(&text, None).unwrap()
}

#[test]
fn generate_is_deterministic_and_seed_defaults_to_zero() {
    let dir = tempfile::tempdir().unwrap();
    let a = bin(&["generate", "--users", "30", "--items", "20", "--per-user", "6", "--seed", "7"], dir.path());
    let b = bin(&["generate", "--users", "30", "--items", "20", "--per-user", "6", "--seed", "7"], dir.path());
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(String::from_utf8_lossy(&a.stdout).lines().count(), 180);
    let unseeded = bin(&["generate", "--users", "30", "--items", "20", "--per-user", "6"], dir.path());
    let zero = bin(&["generate", "--users", "30", "--items", "20", "--per-user", "6", "--seed", "0"], dir.path());
    assert_eq!(unseeded.stdout, zero.stdout);
    assert_ne!(unseeded.stdout, a.stdout);
}

#[test]
fn zero_items_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(&["generate", "--items", "0"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error[InvalidSpec]"), "{err}");
}

#[test]
fn prepare_round_trips_and_keeps_the_head_fraction() {
    let dir = tempfile::tempdir().unwrap();
    prepared(dir.path(), "100", "40");
    let s = DatasetSplits::load(&dir.path().join("prep")).unwrap();
    let raw = fs::File::open(dir.path().join("raw.tsv")).unwrap();
    let recs = lpo_rec_core::data::parse_interactions(std::io::BufReader::new(raw)).unwrap();
    let rebuilt = lpo_rec_core::data::build_splits(&lpo_rec_core::data::core_filter(&recs, 5), 10).unwrap();
    assert_eq!(s, rebuilt);
    let n = s.num_items();
    assert_eq!(s.catalog.head().len(), head_size(n));
    assert_eq!(s.catalog.head().len(), (0.2 * n as f64).ceil() as usize);
    assert_eq!(s.catalog.head().len() + s.catalog.num_tail(), n);
}

#[test]
fn prepare_rejects_data_with_no_five_core() {
    let dir = tempfile::tempdir().unwrap();
    let rows: String = (0..4).flat_map(|u| (0..3).map(move |t| format!("u{u}\ti{t}\t{t}\n"))).collect();
    fs::write(dir.path().join("raw.tsv"), rows).unwrap();
    let out = bin(&["prepare", "--input", "raw.tsv", "--out", "prep"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[EmptyAfterFilter]"));
}

#[test]
fn config_errors_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.cfg"), "tau = 0.1\nlearning_rat = 1\n").unwrap();
    let out = bin(&["train", "--config", "bad.cfg"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rat"));
    let out = bin(&["train", "--preset", "huge"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_inputs_are_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(&["evaluate", "--checkpoint", "none.ckpt", "--data", "prep"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[IoError]"));
}

#[test]
fn desk_training_writes_artifacts_and_echo_reproduces_them() {
    let dir = tempfile::tempdir().unwrap();
    prepared(dir.path(), "200", "60");
    fs::write(dir.path().join("run.cfg"), "preset = desk\ndata_dir = prep\nd = 16\nepochs = 2\nk = 3\n").unwrap();
    let out = bin(&["train", "--config", "run.cfg", "--out", "run", "--seed", "5"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("run");
    for f in ["best.ckpt", "epoch_001.ckpt", "epoch_002.ckpt", "history.csv", "metrics.json", "config.txt"] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    let echo = fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(echo.contains("seed = 5\n"));
    let history = fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(history.lines().next(), Some("epoch,loss,val_hr10,val_ndcg10,seconds"));
    assert_eq!(history.lines().count(), 3);

    // The echoed config alone reproduces the run.
    let again = bin(&["train", "--config", "run/config.txt", "--out", "again"], dir.path());
    assert!(again.status.success(), "{}", String::from_utf8_lossy(&again.stderr));
    let again_dir = dir.path().join("again");
    for f in ["best.ckpt", "metrics.json"] {
        assert_eq!(fs::read(run.join(f)).unwrap(), fs::read(again_dir.join(f)).unwrap(), "{f} differs");
    }

    let eval = bin(&["evaluate", "--checkpoint", "run/best.ckpt", "--data", "prep"], dir.path());
    assert!(eval.status.success());
    assert_eq!(eval.stdout, fs::read(run.join("metrics.json")).unwrap());

    let diag = bin(&["diagnose", "--checkpoint", "run/best.ckpt", "--data", "prep", "--bins", "5"], dir.path());
    let text = String::from_utf8(diag.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "bin_left,bin_right,count");
    assert_eq!(lines.len(), 7);
    assert!(lines[6].starts_with("mean_delta,"));
    let total: usize = lines[1..6].iter().map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap()).sum();
    let s = DatasetSplits::load(&dir.path().join("prep")).unwrap();
    assert_eq!(total, s.test.len());
}

#[test]
fn dpo_training_runs_against_a_saved_reference() {
    let dir = tempfile::tempdir().unwrap();
    prepared(dir.path(), "120", "50");
    let cfg = small_config(dir.path(), "loss = dpo\nepochs = 1\n");
    let out = cmd_train(&cfg).unwrap();
    assert!(out.final_params.all_finite());
    assert!(dir.path().join("run/reference.ckpt").is_file());
}

/// A checkpoint whose final layer norm has zero gain emits a constant
/// representation, which here points straight at the item every user ends on.
#[test]
fn oracle_checkpoint_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let mut rows = String::new();
    for u in 0..10 {
        let seq = [u % 5 + 1, 0, (u + 1) % 5 + 1, (u + 2) % 5 + 1, (u + 3) % 5 + 1, 0];
        for (t, item) in seq.iter().enumerate() {
            let name = if *item == 0 { "istar".to_string() } else { format!("i{item}") };
            rows.push_str(&format!("u{u}\t{name}\t{t}\n"));
        }
    }
    fs::write(dir.path().join("raw.tsv"), rows).unwrap();
    assert!(bin(&["prepare", "--input", "raw.tsv", "--out", "prep"], dir.path()).status.success());
    let s = DatasetSplits::load(&dir.path().join("prep")).unwrap();
    let star = s.item_ids.iter().position(|id| id == "istar").unwrap();
    assert!(s.test.iter().all(|e| e.target.0 == star));

    let dims = ModelDims { d: 8, heads: 2, blocks: 1, max_len: 10, num_items: s.num_items() };
    let mut p = init_params(dims, 0).unwrap();
    let last = p.blocks.last_mut().unwrap();
    last.ln2_gain = Tensor::zeros(&[8]);
    let mut bias = vec![0.0; 8];
    bias[0] = 1.0;
    last.ln2_bias = Tensor::new(vec![8], bias).unwrap();
    for i in 0..s.num_items() {
        p.item_embedding.row_mut(i)[0] = if i == star { 10.0 } else { 0.0 };
    }
    p.save(&dir.path().join("oracle.ckpt")).unwrap();

    let out = bin(&["evaluate", "--checkpoint", "oracle.ckpt", "--data", "prep"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    for n in [5, 10, 20] {
        assert_eq!(v[format!("hr@{n}")], 1.0);
        assert_eq!(v[format!("ndcg@{n}")], 1.0);
    }
}

#[test]
fn ablation_has_twelve_rows_independent_of_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    prepared(dir.path(), "120", "50");
    let cfg = small_config(dir.path(), "epochs = 1\n");
    let serial = cmd_ablate(&cfg, 1).unwrap();
    assert_eq!(serial.len(), 12);
    let table = fs::read_to_string(dir.path().join("run/ablation.csv")).unwrap();
    assert_eq!(table.lines().next(), Some(ABLATION_HEADER));
    assert_eq!(table.lines().count(), 13);
    let parallel = cmd_ablate(&cfg, 3).unwrap();
    assert_eq!(serial, parallel);
    let mut variants: Vec<String> = serial.iter().map(|r| format!("{}/{}/{}", r.loss, r.sampler, r.reweight)).collect();
    variants.sort();
    variants.dedup();
    assert_eq!(variants.len(), 12);
}
