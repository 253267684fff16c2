use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use milpath::bagio::{balance_subset, curate, make_site_holdout, read_bag, CohortManifest, LabelLevel};
use milpath::evalstat::{
    bootstrap_run, confusion, holdout_run, metric_vector, per_class_f1, perm_test, predict_cases, replicate_plans,
    report, retrain_replicate, train_replicate, BootstrapReport, Dataset,
};
use milpath::heatmap::{self, Normalization, RenderOptions};
use milpath::milnet::{checkpoint, MilMode};
use milpath::tiler::{extract_patches, segment_tissue, synth_cohort, SyntheticBagSpec};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::{
    BootstrapArgs, CliError, Command, ExperimentArgs, HeatmapArgs, HoldoutArgs, Norm, PermtestArgs, SynthArgs,
    TileArgs, TrainArgs, ValidateArgs,
};

type Result<T> = std::result::Result<T, CliError>;

pub(crate) fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Tile(a) => tile(a),
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Bootstrap(a) => bootstrap(a),
        Command::Holdout(a) => holdout(a),
        Command::Permtest(a) => permtest(a),
        Command::Heatmap(a) => heatmap(a),
        Command::Validate(a) => validate(a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))
}

/// `println!` that tolerates a closed stdout, e.g. when piped into `head`.
macro_rules! say {
    ($($arg:tt)*) => {
        emit(format_args!($($arg)*))
    };
}

fn emit(args: std::fmt::Arguments<'_>) {
    use std::io::Write;
    if let Err(e) = writeln!(std::io::stdout().lock(), "{args}") {
        if e.kind() != std::io::ErrorKind::BrokenPipe {
            log::warn!("cannot write to stdout: {e}");
        }
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(milpath::Error::from)?;
    say!("{text}");
    Ok(())
}

fn tile(a: TileArgs) -> Result<()> {
    let img = image::open(&a.image)
        .map_err(|e| CliError::Data(format!("{}: {e}", a.image.display())))?
        .to_rgb8();
    let mask = segment_tissue(&img, a.downsample)?;
    let grid = extract_patches(img.width(), img.height(), &mask, a.patch_size, a.min_tissue)?;
    create_dir(&a.out)?;
    grid.save(a.out.join("grid.json"))?;
    let mask_path = a.out.join("mask.png");
    mask.to_image()
        .save(&mask_path)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", mask_path.display())))?;
    log::info!("threshold {}, {} tissue cells", mask.threshold, mask.tissue_cells());
    say!("{} patches of {} px from {}", grid.len(), a.patch_size, a.image.display());
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = SyntheticBagSpec {
        n_classes: a.classes,
        dim: a.dim,
        bag_size_min: a.bag_min,
        bag_size_max: a.bag_max,
        signal_fraction: a.signal_fraction,
        separation: a.separation,
        noise_scale: a.noise_scale,
        seed: a.seed,
    };
    let cohort = synth_cohort(&spec, a.cases, &a.sites)?;
    create_dir(&a.out)?;
    cohort.write(&a.out)?;
    // ground truth: indices of the signal instances in each bag
    let signal: BTreeMap<&str, Vec<usize>> = cohort
        .cases
        .iter()
        .map(|c| {
            let idx = c.signal.iter().enumerate().filter(|(_, &s)| s).map(|(i, _)| i).collect();
            (c.bag.case_id.as_str(), idx)
        })
        .collect();
    report::write_json(&signal, a.out.join("signal.json"))?;
    report::write_json(&spec, a.out.join("synth_spec.json"))?;
    say!("{} cases written to {}", cohort.cases.len(), a.out.display());
    Ok(())
}

/// Loads the config file (if any) and applies flag overrides.
fn experiment_config(a: &ExperimentArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &a.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(m) = &a.manifest {
        cfg.manifest = Some(m.clone());
    }
    if let Some(d) = &a.bag_dir {
        cfg.bag_dir = Some(d.clone());
    }
    if let Some(o) = &a.out {
        cfg.output_dir = Some(o.clone());
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(l) = a.level {
        cfg.level = l.into();
    }
    if let Some(m) = a.mode {
        cfg.model.mode = m.into();
    }
    if let Some(k) = a.min_cases {
        cfg.min_cases = k;
    }
    cfg.train.seed = cfg.seed;
    Ok(cfg)
}

fn bag_base(cfg: &ExperimentConfig, manifest_path: &Path) -> PathBuf {
    cfg.bag_dir
        .clone()
        .unwrap_or_else(|| manifest_path.parent().unwrap_or(Path::new("")).to_path_buf())
}

/// Curated (and optionally balanced) cohort of the experiment.
fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let path = cfg.manifest_path()?;
    let manifest = CohortManifest::load(path)?;
    let (mut curated, curation) = curate(&manifest, cfg.level, cfg.min_cases)?;
    log::info!("curation: {:?}", curation.classes);
    if let Some(b) = cfg.balance {
        curated = balance_subset(&curated, cfg.level, b.mode, b.target, cfg.seed)?;
    }
    Ok(Dataset::load(&curated, &bag_base(cfg, path), cfg.level)?)
}

/// Validated config and its output directory, with the config echoed into it.
fn prepare_output(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let out = cfg.output_path()?.to_path_buf();
    create_dir(&out)?;
    report::write_json(cfg, out.join("effective_config.json"))?;
    Ok(out)
}

#[derive(Serialize)]
struct TrainReport {
    level: LabelLevel,
    classes: Vec<String>,
    train: Vec<String>,
    val: Vec<String>,
    test: Vec<String>,
    best_epoch: usize,
    epochs_run: usize,
    metrics: milpath::evalstat::MetricVector,
    per_class_f1: Vec<Option<f64>>,
    confusion: milpath::evalstat::Confusion,
    predictions: Vec<milpath::evalstat::Prediction>,
}

/// Replicate 0 of the bootstrap protocol: one split, one model.
fn train(a: TrainArgs) -> Result<()> {
    let cfg = experiment_config(&a.experiment)?;
    let out = prepare_output(&cfg)?;
    let ds = load_dataset(&cfg)?;
    let mut boot = cfg.bootstrap_config(1);
    boot.n_replicates = 1;
    let plan = replicate_plans(&ds, &boot)?.remove(0);
    let model_cfg = cfg.model.resolve(ds.dim(), ds.n_classes());
    let (net, log) = train_replicate(&ds, &plan, &model_cfg, &cfg.train)?;
    let preds = predict_cases(&net, &ds, &plan.test)?;
    let cm = confusion(&preds);
    let report = TrainReport {
        level: cfg.level,
        classes: ds.classes.clone(),
        best_epoch: log.best_epoch,
        epochs_run: log.epochs.len(),
        metrics: metric_vector(&preds)?,
        per_class_f1: per_class_f1(&cm),
        confusion: cm,
        predictions: preds.predictions,
        train: plan.train,
        val: plan.val,
        test: plan.test,
    };
    checkpoint::save(&net, out.join("model.ckpt"))?;
    log.write_jsonl(out.join("train_log.jsonl"))?;
    report::write_json(&report, out.join("train_report.json"))?;
    say!(
        "best epoch {} of {}; test mcc {:.4}",
        report.best_epoch, report.epochs_run, report.metrics.mcc
    );
    Ok(())
}

fn configuration_name(cfg: &ExperimentConfig) -> String {
    let mode = match cfg.model.mode {
        MilMode::Abmil => "abmil",
        MilMode::Clam => "clam",
    };
    format!("{mode}-{}", cfg.level)
}

fn bootstrap(a: BootstrapArgs) -> Result<()> {
    let mut cfg = experiment_config(&a.experiment)?;
    if let Some(n) = a.replicates {
        cfg.bootstrap.n_replicates = n;
    }
    let out = prepare_output(&cfg)?;
    let ds = load_dataset(&cfg)?;
    let boot = cfg.bootstrap_config(a.workers.unwrap_or(0));
    let model_cfg = cfg.model.resolve(ds.dim(), ds.n_classes());
    let report = bootstrap_run(&ds, &model_cfg, &cfg.train, &boot)?;

    report::write_json(&report, out.join("bootstrap_report.json"))?;
    report::write_text(&report::bootstrap_csv(&report, &configuration_name(&cfg)), out.join("bootstrap_metrics.csv"))?;
    report::write_text(&report::class_f1_csv(&report), out.join("class_f1.csv"))?;
    if let Some(id) = report.median_replicate {
        let (net, log) = retrain_replicate(&ds, &model_cfg, &cfg.train, &boot, id)?;
        checkpoint::save(&net, out.join("median_model.ckpt"))?;
        log.write_jsonl(out.join("median_train_log.jsonl"))?;
    }
    if let Some(s) = &report.summary {
        say!(
            "mcc {:.4} ± {:.4} [{:.4}, {:.4}] over {} replicates",
            s.mcc.mean,
            s.mcc.std,
            s.mcc.ci_low,
            s.mcc.ci_high,
            report.replicates.len() - report.n_failed
        );
    }
    if !report.complete {
        return Err(CliError::Runtime(format!(
            "{} of {} replicates failed; partial report written",
            report.n_failed,
            report.replicates.len()
        )));
    }
    Ok(())
}

fn holdout(a: HoldoutArgs) -> Result<()> {
    let mut cfg = experiment_config(&a.experiment)?;
    if let Some(sites) = &a.train_sites {
        cfg.holdout.train_sites = sites.clone();
    }
    if let Some(n) = a.replicates {
        cfg.holdout.n_replicates = n;
    }
    if cfg.holdout.train_sites.is_empty() {
        return Err(CliError::Usage("no training sites: set `holdout.train_sites` or pass --train-sites".into()));
    }
    let out = prepare_output(&cfg)?;
    let path = cfg.manifest_path()?;
    let manifest = CohortManifest::load(path)?;
    let sites: BTreeSet<String> = cfg.holdout.train_sites.iter().cloned().collect();
    let split = make_site_holdout(&manifest, &sites, cfg.level, cfg.holdout_min_cases())?;
    for w in &split.roster.warnings {
        log::warn!("{w}");
    }
    let base = bag_base(&cfg, path);
    let classes = split.train.classes(cfg.level);
    let train_ds = Dataset::load_with_classes(&split.train, &base, cfg.level, &classes)?;
    let test_ds = Dataset::load_with_classes(&split.test, &base, cfg.level, &classes)?;
    let mut boot = cfg.bootstrap_config(a.workers.unwrap_or(0));
    boot.n_replicates = cfg.holdout.n_replicates;
    let model_cfg = cfg.model.resolve(train_ds.dim(), train_ds.n_classes());
    let report = holdout_run(&train_ds, &test_ds, &model_cfg, &cfg.train, &boot, Some(split.roster))?;

    report::write_json(&report, out.join("holdout_report.json"))?;
    report::write_text(&report::holdout_csv(&report), out.join("holdout_metrics.csv"))?;
    for d in &report.drops {
        say!(
            "{:<18} in-site {:.4}  out-of-site {:.4}  {} {:+.4}",
            d.metric, d.in_site, d.out_of_site, d.direction, d.difference
        );
    }
    if !(report.in_site.complete && report.out_of_site.complete) {
        return Err(CliError::Runtime("some holdout replicates failed; partial report written".into()));
    }
    Ok(())
}

/// Per-replicate values: either a bootstrap report or a bare JSON array.
fn replicate_values(path: &Path, metric: &str) -> Result<Vec<Option<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    if value.is_array() {
        return serde_json::from_value(value).map_err(|e| CliError::Data(format!("{}: {e}", path.display())));
    }
    let report: BootstrapReport =
        serde_json::from_value(value).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(report.metric_values(metric)?)
}

fn permtest(a: PermtestArgs) -> Result<()> {
    let metric = a.metric.name();
    let va = replicate_values(&a.a, metric)?;
    let vb = replicate_values(&a.b, metric)?;
    if va.len() != vb.len() {
        return Err(CliError::Data(format!(
            "reports hold {} and {} replicates; pairing needs equal counts",
            va.len(),
            vb.len()
        )));
    }
    // a pair is usable only if both replicates were scored
    let (xs, ys): (Vec<f64>, Vec<f64>) = va.iter().zip(&vb).filter_map(|(x, y)| Some(((*x)?, (*y)?))).unzip();
    if xs.len() < va.len() {
        log::warn!("{} unpaired replicates dropped", va.len() - xs.len());
    }
    let result = perm_test(&xs, &ys, a.permutations, a.seed, a.comparisons)?;
    if let Some(out) = &a.out {
        report::write_json(&result, out)?;
    }
    print_json(&result)
}

fn heatmap(a: HeatmapArgs) -> Result<()> {
    let model = checkpoint::load(&a.model)?;
    let bag = read_bag(&a.bag)?;
    let mode = match a.normalization {
        Norm::Minmax => Normalization::MinMax,
        Norm::Percentile => Normalization::Percentile,
    };
    let overlay = heatmap::attention_scores(&model, &bag, a.patch_size, mode)?;
    let annotations = match &a.annotations {
        Some(p) => heatmap::load_annotations(p)?,
        None => Vec::new(),
    };
    let base = match &a.image {
        Some(p) => Some(
            image::open(p)
                .map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?
                .to_rgb8(),
        ),
        None => None,
    };
    create_dir(&a.out)?;
    report::write_json(&overlay, a.out.join("overlay.json"))?;
    let slides: Vec<u16> = match base {
        Some(_) => vec![a.slide],
        None => overlay.slides.iter().map(|s| s.slide).collect(),
    };
    for slide in slides {
        let opts = RenderOptions {
            slide,
            downsample: a.downsample,
            alpha: a.alpha,
            annotations: &annotations,
            ..Default::default()
        };
        let img = heatmap::render(&overlay, base.as_ref(), &opts)?;
        let path = a.out.join(format!("heatmap_slide{slide}.png"));
        heatmap::save_png(&img, &path)?;
        say!("{}", path.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct ValidationReport {
    n_cases: usize,
    n_bags_read: usize,
    dim: Option<usize>,
    problems: Vec<String>,
    curation: Option<milpath::bagio::CurationReport>,
}

fn validate(a: ValidateArgs) -> Result<()> {
    let manifest = CohortManifest::load(&a.manifest)?;
    let base = a
        .bag_dir
        .clone()
        .unwrap_or_else(|| a.manifest.parent().unwrap_or(Path::new("")).to_path_buf());
    let mut problems = Vec::new();
    let mut dim = None;
    let mut n_read = 0;
    for case in &manifest.cases {
        let path = manifest.bag_path(case, &base);
        match read_bag(&path) {
            Ok(bag) => {
                n_read += 1;
                if bag.case_id != case.case_id {
                    problems.push(format!("{}: bag holds case id {:?}", case.case_id, bag.case_id));
                }
                if let Some(n) = case.n_instances {
                    if n != bag.len() as u64 {
                        problems.push(format!("{}: manifest says {n} instances, bag has {}", case.case_id, bag.len()));
                    }
                }
                match dim {
                    None => dim = Some(bag.dim()),
                    Some(d) if d != bag.dim() => {
                        problems.push(format!("{}: feature dim {} differs from {d}", case.case_id, bag.dim()))
                    }
                    _ => {}
                }
            }
            Err(e) => problems.push(format!("{}: {e}", case.case_id)),
        }
    }
    let curation = match curate(&manifest, a.level.into(), a.min_cases) {
        Ok((_, r)) => Some(r),
        Err(e) => {
            problems.push(e.to_string());
            None
        }
    };
    let n_problems = problems.len();
    print_json(&ValidationReport {
        n_cases: manifest.cases.len(),
        n_bags_read: n_read,
        dim,
        problems,
        curation,
    })?;
    if n_problems > 0 {
        return Err(CliError::Data(format!("{n_problems} problem(s) found")));
    }
    Ok(())
}
