use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use crop_cli::commands::{read_report, read_summary, Layout, STATE_FINETUNED, STATE_MIXED, STATE_PRUNED};
use crop_cli::{ExperimentConfig, Method};
use crop_core::benchmark::user_split;
use crop_core::metrics::{evaluate, MetricKind, UserComparison, STATE_CONVENTIONAL, STATE_CROP, STATE_GENERIC};
use crop_core::{delta_g, fim_trace, ModelFile, ModelParams};

const SMALL: &str = r#"
layer_dims = [6, 16, 3]
seeds = [1, 2]
out_dir = "out"

[data.synthetic]
num_generic_users = 6
num_personal_users = 2
num_classes = 3
num_features = 6
class_spread = 1.5
user_jitter = 0.8
noise_sigma = 0.6
samples_per_cell = 20
seed = 3
contexts = [{ angle = 0.0, bias_scale = 0.0 }, { angle = 2.0, bias_scale = 0.5 }]

[scenario]
available = "c0"
unseen = ["c1"]

[users]
personalize = ["p0", "p1"]

[generic_train]
learning_rate = 0.05
epochs = 15

[conventional]
learning_rate = 0.05
epochs = 10
batch_size = 8

[crop]
[crop.train_initial]
learning_rate = 0.05
epochs = 10
batch_size = 8
regularizer = "l1"
alpha = 0.01
[crop.train_final]
learning_rate = 0.05
epochs = 10
batch_size = 8
regularizer = "l1"
alpha = 0.01
"#;

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("exp.toml");
    fs::write(&path, text).unwrap();
    path
}

fn crop(args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_crop"));
    cmd.args(args).env("RUST_LOG", "warn");
    match threads {
        Some(t) => cmd.env("CROP_THREADS", t),
        None => cmd.env_remove("CROP_THREADS"),
    };
    cmd.output().unwrap()
}

fn run_all(config: &Path, out: &Path, threads: Option<&str>) {
    let (c, o) = (config.to_str().unwrap(), out.to_str().unwrap());
    for sub in ["train-generic", "personalize", "evaluate", "diagnose"] {
        let res = crop(&[sub, "--config", c, "--out", o], threads);
        assert!(res.status.success(), "{sub}: {}", String::from_utf8_lossy(&res.stderr));
    }
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn full_run_is_byte_identical_across_reruns_and_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    run_all(&config, &dir.path().join("a"), Some("1"));
    run_all(&config, &dir.path().join("b"), Some("4"));
    let a = tree(&dir.path().join("a"));
    let b = tree(&dir.path().join("b"));
    assert!(a.len() > 20, "only {} files written", a.len());
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (path, bytes) in &a {
        assert!(bytes == &b[path], "{} differs", path.display());
    }
}

fn prepared(text: &str) -> (tempfile::TempDir, ExperimentConfig) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::load(write_config(dir.path(), text)).unwrap();
    crop_cli::train_generic(&cfg).unwrap();
    crop_cli::personalize(&cfg, Method::All).unwrap();
    (dir, cfg)
}

#[test]
fn report_reparses_and_summary_matches_reloaded_models() {
    let (_dir, cfg) = prepared(SMALL);
    let report = crop_cli::evaluate(&cfg).unwrap();
    let layout = Layout::new(&cfg.out_dir);
    let reread = read_report(&layout.report(), cfg.metric).unwrap();
    assert_eq!(reread, report);

    let summary = read_summary(&layout.summary()).unwrap();
    let labels: Vec<&str> = summary.iter().map(|r| r.0.as_str()).collect();
    assert_eq!(labels, ["p0", "p1", "mean", "std"]);

    // recompute the generalization score from the files on disk alone
    let data = cfg.dataset().unwrap();
    let mut per_seed = Vec::new();
    for &seed in &cfg.seeds {
        let table: Vec<UserComparison> = cfg
            .users
            .personalize
            .iter()
            .map(|user| {
                let split = user_split(&data, user, "c0", &["c1".to_string()], cfg.test_fraction, cfg.seeded(seed).split_seed)
                    .unwrap();
                let score = |state: &str| -> Vec<(String, f64)> {
                    let m = ModelFile::load(layout.personal_model(state, user, seed)).unwrap().model;
                    split
                        .test
                        .iter()
                        .map(|(ctx, d)| (ctx.clone(), evaluate(&m, d, cfg.metric).unwrap()))
                        .collect()
                };
                UserComparison::new(user.clone(), score(STATE_CROP), score(STATE_CONVENTIONAL))
            })
            .collect();
        per_seed.push(delta_g(&table).unwrap().mean);
    }
    let expected = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
    let mean_row = summary.iter().find(|r| r.0 == "mean").unwrap();
    assert!((mean_row.2.unwrap() - expected).abs() < 1e-9);
}

#[test]
fn generic_scored_against_itself_has_zero_personalization_gain() {
    let (_dir, cfg) = prepared(SMALL);
    let layout = Layout::new(&cfg.out_dir);
    for user in &cfg.users.personalize {
        for &seed in &cfg.seeds {
            fs::copy(layout.generic_model(seed), layout.personal_model(STATE_CROP, user, seed)).unwrap();
        }
    }
    crop_cli::evaluate(&cfg).unwrap();
    for (label, dp, _) in read_summary(&layout.summary()).unwrap() {
        if label != "std" {
            assert_eq!(dp, Some(0.0), "{label}");
        }
    }
}

#[test]
fn zero_epochs_writes_the_initial_model() {
    let text = SMALL.replace("[generic_train]\nlearning_rate = 0.05\nepochs = 15", "[generic_train]\nepochs = 0");
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::load(write_config(dir.path(), &text)).unwrap();
    crop_cli::train_generic(&cfg).unwrap();
    let layout = Layout::new(&cfg.out_dir);
    for &seed in &cfg.seeds {
        let saved = ModelFile::load(layout.generic_model(seed)).unwrap().model;
        let init = ModelParams::init(&cfg.layer_dims, cfg.seeded(seed).generic_train.seed).unwrap();
        assert_eq!(saved, init);
    }
}

#[test]
fn generic_model_beats_the_majority_class() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::load(write_config(dir.path(), SMALL)).unwrap();
    crop_cli::train_generic(&cfg).unwrap();
    let data = cfg.dataset().unwrap();
    let generic = data.for_users(&cfg.generic_users(&data));
    let majority = *generic.class_counts().values().max().unwrap() as f64 / generic.len() as f64;
    let model = ModelFile::load(Layout::new(&cfg.out_dir).generic_model(1)).unwrap().model;
    assert!(evaluate(&model, &generic, MetricKind::Accuracy).unwrap() > majority);
}

#[test]
fn diagnostics_tables_have_the_expected_shape_and_values() {
    let (_dir, cfg) = prepared(SMALL);
    let dir = crop_cli::diagnose(&cfg).unwrap();
    let gip = fs::read_to_string(dir.join("gip.csv")).unwrap();
    let rows: Vec<&str> = gip.lines().skip(1).collect();
    assert_eq!(rows.len(), 4 * cfg.users.personalize.len() * cfg.seeds.len());
    assert!(rows[..4].iter().zip(["2,finetuned", "3,pruned", "4,mixed", "5,crop"]).all(|(r, s)| r.contains(s)));

    // fisher traces recomputed from the saved models
    let layout = Layout::new(&cfg.out_dir);
    let data = cfg.dataset().unwrap();
    let mut reader = csv_rows(&dir.join("fim.csv"));
    let header = reader.remove(0);
    assert_eq!(header, ["user", "seed", "model", "context", "fim_trace"]);
    for row in reader {
        let seed: u64 = row[1].parse().unwrap();
        let path = if row[2] == STATE_GENERIC {
            layout.generic_model(seed)
        } else {
            layout.personal_model(&row[2], &row[0], seed)
        };
        let model = ModelFile::load(path).unwrap().model;
        let split = user_split(&data, &row[0], "c0", &["c1".to_string()], cfg.test_fraction, cfg.seeded(seed).split_seed)
            .unwrap();
        let want = fim_trace(&model, &split.test[&row[3]]).unwrap();
        let got: f64 = row[4].parse().unwrap();
        assert_eq!(got.to_bits(), want.to_bits());
    }

    // heat maps show the layer feeding the classifier: outputs x inputs = 16 x 6
    let heat = fs::read_to_string(dir.join("heatmaps").join("p0_seed1_crop.csv")).unwrap();
    let grid: Vec<Vec<&str>> = heat.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(grid.len(), 16);
    assert!(grid.iter().all(|r| r.len() == 6));
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

#[test]
fn stage_snapshots_carry_the_crop_mask() {
    let (_dir, cfg) = prepared(SMALL);
    let layout = Layout::new(&cfg.out_dir);
    let final_file = ModelFile::load(layout.personal_model(STATE_CROP, "p0", 1)).unwrap();
    let pruned = ModelFile::load(layout.stage_model("p0", 1, STATE_PRUNED)).unwrap();
    let mixed = ModelFile::load(layout.stage_model("p0", 1, STATE_MIXED)).unwrap();
    let finetuned = ModelFile::load(layout.stage_model("p0", 1, STATE_FINETUNED)).unwrap();
    let mask = final_file.mask.clone().unwrap();
    assert_eq!(pruned.mask.as_ref(), Some(&mask));
    assert_eq!(mixed.mask.as_ref(), Some(&mask));
    assert!(finetuned.mask.is_none());
    assert_eq!(crop_core::mask_of(&pruned.model).pruned_count(), mask.pruned_count());
    assert!(final_file.metadata.contains("prune_fraction="));
}

#[test]
fn seed_flag_limits_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let out = dir.path().join("only2");
    let res = crop(
        &["train-generic", "--config", config.to_str().unwrap(), "--seed", "2", "--out", out.to_str().unwrap()],
        None,
    );
    assert!(res.status.success());
    assert!(out.join("generic/seed2.cropmdl").exists());
    assert!(!out.join("generic/seed1.cropmdl").exists());
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let c = config.to_str().unwrap();
    let empty = dir.path().join("empty");
    let e = empty.to_str().unwrap();

    // personalizing before any generic model exists
    let res = crop(&["personalize", "--config", c, "--out", e], None);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("generic model"));

    assert_eq!(crop(&["evaluate", "--config", c, "--out", e], None).status.code(), Some(2));
    assert_eq!(crop(&["train-generic", "--config", "/no/such/file.toml"], None).status.code(), Some(2));
    assert_eq!(crop(&["train-generic"], None).status.code(), Some(2));
    assert_eq!(crop(&["bogus", "--config", c], None).status.code(), Some(2));
    assert_eq!(crop(&["personalize", "--config", c, "--method", "magic"], None).status.code(), Some(2));
    assert_eq!(crop(&["train-generic", "--config", c, "--out", e], Some("zero")).status.code(), Some(2));

    let clash = SMALL.replace(r#"unseen = ["c1"]"#, r#"unseen = ["c0"]"#);
    let bad = write_config(dir.path(), &clash);
    assert_eq!(crop(&["train-generic", "--config", bad.to_str().unwrap()], None).status.code(), Some(2));

    assert_eq!(crop(&["--help"], None).status.code(), Some(0));
}

#[test]
fn missing_snapshots_exit_with_two() {
    let text = SMALL.replace("[crop]\n", "[crop]\nkeep_stages = false\n");
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &text);
    let c = config.to_str().unwrap();
    for sub in ["train-generic", "personalize", "evaluate"] {
        assert!(crop(&[sub, "--config", c], None).status.success(), "{sub}");
    }
    let res = crop(&["diagnose", "--config", c], None);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("snapshot"));
}

#[test]
fn divergence_exits_with_three() {
    let text = SMALL.replace("[generic_train]\nlearning_rate = 0.05", "[generic_train]\nlearning_rate = 1e300");
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &text);
    let res = crop(&["train-generic", "--config", config.to_str().unwrap()], None);
    assert_eq!(res.status.code(), Some(3), "{}", String::from_utf8_lossy(&res.stderr));
}
