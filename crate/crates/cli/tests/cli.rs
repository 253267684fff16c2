use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

const SUBCOMMANDS: [&str; 8] = ["tile", "synth", "train", "bootstrap", "holdout", "permtest", "heatmap", "validate"];

fn milpath(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_milpath"))
        .args(args)
        .env_remove("MILPATH_LOG")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = milpath(args);
    assert!(
        out.status.success(),
        "{args:?} exited {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    milpath(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

#[test]
fn help_matches_golden_files() {
    let update = std::env::var_os("UPDATE_GOLDEN").is_some();
    let mut names: Vec<Option<&str>> = vec![None];
    names.extend(SUBCOMMANDS.iter().map(|s| Some(*s)));
    for name in names {
        let args: Vec<&str> = name.into_iter().chain(["--help"]).collect();
        let text = ok(&args);
        let path = golden_dir().join(format!("{}.txt", name.unwrap_or("milpath")));
        if update {
            std::fs::write(&path, &text).unwrap();
        } else {
            let want = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            assert_eq!(text, want, "help for {name:?} differs from {}", path.display());
        }
    }
}

#[test]
fn help_documents_every_flag() {
    use clap::CommandFactory;
    let cli = milpath_cli::Cli::command();
    let subs: Vec<&str> = cli.get_subcommands().map(|c| c.get_name()).collect();
    assert_eq!(subs, SUBCOMMANDS);
    for sub in cli.get_subcommands() {
        assert!(sub.get_about().is_some(), "{}", sub.get_name());
        for arg in sub.get_arguments() {
            assert!(arg.get_help().is_some(), "{} --{}", sub.get_name(), arg.get_id());
        }
    }
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&["bootstrap", "--no-such-flag"]), 1);
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&[]), 1);
    assert_eq!(code(&["permtest", "--a", "x.json", "--b", "y.json", "--metric", "accuracy"]), 1);
    assert_eq!(code(&["synth", "--help"]), 0);
    assert_eq!(code(&["--version"]), 0);
    // a config without a manifest is a usage error
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&["bootstrap", "--out", s(dir.path())]), 1);
}

#[test]
fn data_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    assert_eq!(code(&["validate", "--manifest", s(&missing)]), 2);

    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, "{\n  \"model\": {\"hidden\": 3}\n}").unwrap();
    let out = milpath(&["bootstrap", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("model.hidden") && err.contains("line 2"), "{err}");

    std::fs::write(&cfg, r#"{"train": {"min_epochs": 30}}"#).unwrap();
    assert_eq!(code(&["bootstrap", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]), 2);

    let coh = dir.path().join("coh");
    ok(&["synth", "--out", s(&coh), "--cases", "2", "--dim", "4", "--bag-min", "3", "--bag-max", "5"]);
    let bag = coh.join("bags/synth-c1-0000.fbag");
    let bytes = std::fs::read(&bag).unwrap();
    std::fs::write(&bag, &bytes[..bytes.len() - 3]).unwrap();
    let out = milpath(&["validate", "--manifest", s(&coh.join("manifest.json")), "--min-cases", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stdout).contains("synth-c1-0000: truncated"));
}

#[test]
fn synth_writes_manifest_and_bags() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c");
    ok(&["synth", "--classes", "3", "--cases", "20", "--dim", "512", "--out", s(&out)]);
    let bags = std::fs::read_dir(out.join("bags")).unwrap().count();
    assert_eq!(bags, 60);
    let manifest = milpath::bagio::CohortManifest::load(out.join("manifest.json")).unwrap();
    assert_eq!(manifest.cases.len(), 60);
    let bag = milpath::bagio::read_bag(out.join(&manifest.cases[0].bag_path)).unwrap();
    assert_eq!(bag.dim(), 512);
    let signal: std::collections::BTreeMap<String, Vec<usize>> =
        serde_json::from_str(&std::fs::read_to_string(out.join("signal.json")).unwrap()).unwrap();
    assert_eq!(signal.len(), 60);
    let report = ok(&["validate", "--manifest", s(&out.join("manifest.json"))]);
    assert!(report.contains("\"problems\": []"));
}

fn small_experiment(dir: &Path) -> PathBuf {
    let coh = dir.join("coh");
    ok(&["synth", "--out", s(&coh), "--cases", "10", "--seed", "2"]);
    let cfg = dir.join("config.json");
    std::fs::write(
        &cfg,
        r#"{
  "manifest": "coh/manifest.json",
  "min_cases": 5,
  "model": {"hidden_dim": 32, "attn_dim": 16},
  "train": {"min_epochs": 2, "max_epochs": 4},
  "bootstrap": {"n_replicates": 4},
  "holdout": {"train_sites": ["A", "B"], "n_replicates": 2, "min_cases": 3}
}
"#,
    )
    .unwrap();
    cfg
}

fn digests(dir: &Path) -> Vec<(String, String)> {
    let mut files: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    files
        .iter()
        .map(|p| {
            let d = Sha256::digest(std::fs::read(p).unwrap());
            (p.file_name().unwrap().to_string_lossy().into_owned(), format!("{d:x}"))
        })
        .collect()
}

#[test]
fn bootstrap_reruns_are_hash_identical_and_flags_override_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_experiment(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["bootstrap", "--config", s(&cfg), "--out", s(&a), "--seed", "11", "--workers", "1"]);
    ok(&["bootstrap", "--config", s(&cfg), "--out", s(&b), "--seed", "11", "--workers", "2"]);
    let (da, db) = (digests(&a), digests(&b));
    let names: Vec<&str> = da.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(
        names,
        [
            "bootstrap_metrics.csv",
            "bootstrap_report.json",
            "class_f1.csv",
            "effective_config.json",
            "median_model.ckpt",
            "median_train_log.jsonl"
        ]
    );
    assert_eq!(da, db);

    let echo: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("effective_config.json")).unwrap()).unwrap();
    assert_eq!(echo["seed"], 11);
    assert_eq!(echo["bootstrap"]["n_replicates"], 4);
    let report: milpath::evalstat::BootstrapReport =
        serde_json::from_str(&std::fs::read_to_string(a.join("bootstrap_report.json")).unwrap()).unwrap();
    assert_eq!(report.protocol.base_seed, 11);
    assert_eq!(report.replicates.len(), 4);

    let c = dir.path().join("c");
    ok(&["bootstrap", "--config", s(&cfg), "--out", s(&c), "--seed", "12", "--replicates", "2"]);
    assert_ne!(digests(&c)[1], da[1]);
    let report: milpath::evalstat::BootstrapReport =
        serde_json::from_str(&std::fs::read_to_string(c.join("bootstrap_report.json")).unwrap()).unwrap();
    assert_eq!(report.replicates.len(), 2);
}

#[test]
fn permtest_reads_reports_and_applies_bonferroni() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    let xs: Vec<f64> = (0..150).map(|i| 0.5 + 0.001 * i as f64).collect();
    let ys: Vec<f64> = xs.iter().map(|x| x + 10.0).collect();
    std::fs::write(&a, serde_json::to_string(&xs).unwrap()).unwrap();
    std::fs::write(&b, serde_json::to_string(&ys).unwrap()).unwrap();
    let out = dir.path().join("p.json");
    let text = ok(&["permtest", "--a", s(&a), "--b", s(&b), "--comparisons", "3", "--out", s(&out)]);
    let r: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(r["p_value"].as_f64().unwrap(), 1.0 / 10001.0);
    assert_eq!(r["alpha_corrected"].as_f64().unwrap(), 0.05 / 3.0);
    assert_eq!(r["significant"], true);
    assert_eq!(std::fs::read_to_string(&out).unwrap().trim(), text.trim());

    let cfg = small_experiment(dir.path());
    let (ra, rb) = (dir.path().join("ra"), dir.path().join("rb"));
    ok(&["bootstrap", "--config", s(&cfg), "--out", s(&ra), "--replicates", "3"]);
    ok(&["bootstrap", "--config", s(&cfg), "--out", s(&rb), "--replicates", "3", "--mode", "clam"]);
    let text = ok(&[
        "permtest",
        "--a",
        s(&ra.join("bootstrap_report.json")),
        "--b",
        s(&rb.join("bootstrap_report.json")),
        "--metric",
        "balanced-accuracy",
    ]);
    let r: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(r["n_pairs"], 3);
    assert!(r["p_value"].as_f64().unwrap() > 0.0);

    std::fs::write(&b, "[1.0, 2.0]").unwrap();
    assert_eq!(code(&["permtest", "--a", s(&a), "--b", s(&b)]), 2);
}

#[test]
fn train_holdout_and_heatmap_write_their_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_experiment(dir.path());
    let t = dir.path().join("train");
    ok(&["train", "--config", s(&cfg), "--out", s(&t), "--mode", "clam"]);
    for f in ["model.ckpt", "train_log.jsonl", "train_report.json", "effective_config.json"] {
        assert!(t.join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(t.join("train_log.jsonl")).unwrap();
    let epochs = log.lines().filter(|l| l.contains("\"epoch\"")).count();
    assert!((2..=4).contains(&epochs), "{log}");
    let model = milpath::milnet::checkpoint::load(t.join("model.ckpt")).unwrap();
    assert_eq!(model.config.mode, milpath::milnet::MilMode::Clam);

    let h = dir.path().join("holdout");
    let out = ok(&["holdout", "--config", s(&cfg), "--out", s(&h)]);
    assert!(out.contains("mcc"));
    let csv = std::fs::read_to_string(h.join("holdout_metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(h.join("holdout_report.json")).unwrap()).unwrap();
    assert_eq!(report["roster"]["train_sites"], serde_json::json!(["A", "B"]));
    assert_eq!(report["in_site"]["protocol"]["n_replicates"], 2);

    // heatmap over a base image covering the bag's patches
    let bag_path = dir.path().join("coh/bags/synth-c2-0001.fbag");
    let bag = milpath::bagio::read_bag(&bag_path).unwrap();
    let max_x = bag.coords().iter().map(|c| c.x).max().unwrap() as u32 + 224;
    let max_y = bag.coords().iter().map(|c| c.y).max().unwrap() as u32 + 224;
    let base = image::RgbImage::from_pixel(max_x / 8, max_y / 8, image::Rgb([200, 180, 190]));
    let base_path = dir.path().join("base.png");
    base.save(&base_path).unwrap();
    let hm = dir.path().join("hm");
    let ann = dir.path().join("ann.json");
    std::fs::write(&ann, r#"[{"label": "tumor", "vertices": [[0, 0], [400, 0], [400, 400]]}]"#).unwrap();
    ok(&[
        "heatmap",
        "--model",
        s(&t.join("model.ckpt")),
        "--bag",
        s(&bag_path),
        "--out",
        s(&hm),
        "--image",
        s(&base_path),
        "--downsample",
        "8",
        "--normalization",
        "percentile",
        "--annotations",
        s(&ann),
    ]);
    let img = image::open(hm.join("heatmap_slide0.png")).unwrap().to_rgb8();
    assert_eq!(img.dimensions(), base.dimensions());
    let overlay = milpath::heatmap::AttentionOverlay::load(hm.join("overlay.json")).unwrap();
    assert_eq!(overlay.n_instances(), bag.len());

    // a base image too small for the patches is a data error
    image::RgbImage::new(10, 10).save(&base_path).unwrap();
    let code = code(&[
        "heatmap",
        "--model",
        s(&t.join("model.ckpt")),
        "--bag",
        s(&bag_path),
        "--out",
        s(&hm),
        "--image",
        s(&base_path),
    ]);
    assert_eq!(code, 2);
}

#[test]
fn tile_keeps_tissue_patches() {
    let dir = tempfile::tempdir().unwrap();
    // 896×448 image: saturated "tissue" on the left half, white background on the right
    let img = image::RgbImage::from_fn(896, 448, |x, _| {
        if x < 448 {
            image::Rgb([180, 60, 140])
        } else {
            image::Rgb([245, 245, 245])
        }
    });
    let path = dir.path().join("slide.png");
    img.save(&path).unwrap();
    let out = dir.path().join("tiles");
    ok(&["tile", "--image", s(&path), "--out", s(&out)]);
    let grid = milpath::tiler::PatchGrid::load(out.join("grid.json")).unwrap();
    assert_eq!(grid.coords, vec![(0, 0), (224, 0), (0, 224), (224, 224)]);
    assert!(out.join("mask.png").exists());
}

#[test]
fn log_level_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let run = |level: &str| {
        Command::new(env!("CARGO_BIN_EXE_milpath"))
            .args(["synth", "--out", s(&dir.path().join(level)), "--cases", "1", "--dim", "4", "--bag-min", "2", "--bag-max", "2"])
            .env("MILPATH_LOG", level)
            .output()
            .unwrap()
    };
    assert!(run("error").status.success());
    // one-patch images warn when the patch exceeds the image
    let img = dir.path().join("tiny.png");
    image::RgbImage::from_pixel(50, 50, image::Rgb([180, 60, 140])).save(&img).unwrap();
    let tile = |level: &str| {
        Command::new(env!("CARGO_BIN_EXE_milpath"))
            .args(["tile", "--image", s(&img), "--out", s(&dir.path().join("t")), "--downsample", "1"])
            .env("MILPATH_LOG", level)
            .output()
            .unwrap()
    };
    let quiet = tile("error");
    let loud = tile("warn");
    assert!(quiet.status.success() && loud.status.success());
    assert!(quiet.stderr.is_empty());
    assert!(String::from_utf8_lossy(&loud.stderr).contains("exceeds image"));
}
