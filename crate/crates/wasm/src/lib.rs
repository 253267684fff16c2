//! Browser bindings for the demo page in `www/`. Every entry point returns
//! JSON so the page stays plain JavaScript.

use milpath::bagio::FeatureBag;
use milpath::evalstat::perm_test;
use milpath::heatmap::{color_of, normalize, Normalization, COOLWARM};
use milpath::milnet::{forward, MilMode, MilModel, ModelConfig};
use milpath::rng::seeded;
use milpath::tiler::{synth_cohort, SyntheticBagSpec, SyntheticCase};
use milpath::trainer::{cosine_lr, fit, EpochRecord, TrainConfig};
use rand::Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

const CASES_PER_CLASS: usize = 10;
const TRAIN_PER_CLASS: usize = 7;

#[derive(Debug, Serialize)]
pub struct BagView {
    pub label: usize,
    pub predicted: usize,
    pub probs: Vec<f64>,
    pub attention: Vec<f64>,
    pub signal: Vec<bool>,
    /// `#rrggbb` per instance after min-max normalization of the attention.
    pub colors: Vec<String>,
}

#[derive(Debug, Serialize)]
pub struct TrainDemo {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub val_accuracy: f64,
    pub bags: Vec<BagView>,
}

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn hex([r, g, b]: [u8; 3]) -> String {
    format!("#{r:02x}{g:02x}{b:02x}")
}

/// Synthesizes a small three-class cohort, trains a reduced-size model on
/// seven bags per class and reports attention on the remaining bags.
pub fn run_train_demo(separation: f64, seed: u64, epochs: usize, clam: bool) -> milpath::Result<TrainDemo> {
    let spec = SyntheticBagSpec {
        dim: 16,
        bag_size_min: 16,
        bag_size_max: 32,
        separation,
        seed,
        ..Default::default()
    };
    let sites = vec!["demo".to_string()];
    let cohort = synth_cohort(&spec, CASES_PER_CLASS, &sites)?;
    let mut seen = vec![0; spec.n_classes];
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for case in &cohort.cases {
        seen[case.label] += 1;
        let target = if seen[case.label] <= TRAIN_PER_CLASS { &mut train } else { &mut val };
        target.push(case);
    }

    let mode = if clam { MilMode::Clam } else { MilMode::Abmil };
    let mut mc = ModelConfig::new(mode, spec.dim, spec.n_classes);
    mc.hidden_dim = 32;
    mc.attn_dim = 16;
    mc.k_sample = 4;
    mc.init_seed = seed;
    let tc = TrainConfig {
        lr0: 2e-3,
        min_epochs: epochs,
        max_epochs: epochs,
        seed,
        ..Default::default()
    };
    let (model, log) = fit(MilModel::new(mc)?, &samples(&train), &samples(&val), &tc)?;

    let mut bags = Vec::new();
    for case in &val {
        let t = forward(&model, &case.bag, false, &mut seeded(0))?;
        let predicted = (0..t.probs.len()).max_by(|&a, &b| t.probs[a].total_cmp(&t.probs[b])).unwrap_or(0);
        let colors = normalize(&t.attention, Normalization::MinMax)
            .into_iter()
            .map(|v| hex(color_of(&COOLWARM, v)))
            .collect();
        bags.push(BagView {
            label: case.label,
            predicted,
            probs: t.probs,
            attention: t.attention,
            signal: case.signal.clone(),
            colors,
        });
    }
    let correct = bags.iter().filter(|b| b.label == b.predicted).count();
    Ok(TrainDemo {
        epochs: log.epochs,
        best_epoch: log.best_epoch,
        val_accuracy: correct as f64 / bags.len() as f64,
        bags,
    })
}

fn samples<'a>(cases: &[&'a SyntheticCase]) -> Vec<(&'a FeatureBag, usize)> {
    cases.iter().map(|c| (&c.bag, c.label)).collect()
}

#[wasm_bindgen]
pub fn train_demo(separation: f64, seed: u32, epochs: u32, clam: bool) -> Result<String, JsError> {
    let demo = run_train_demo(separation, seed as u64, epochs.max(1) as usize, clam).map_err(js_err)?;
    serde_json::to_string(&demo).map_err(js_err)
}

/// Learning rate of each epoch under cosine annealing.
#[wasm_bindgen]
pub fn lr_curve(lr0: f64, eta_min: f64, max_epochs: u32) -> Vec<f64> {
    (0..max_epochs as usize).map(|e| cosine_lr(e, max_epochs as usize, lr0, eta_min)).collect()
}

#[derive(Debug, Serialize)]
pub struct PermDemo {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub observed: f64,
    pub p_value: f64,
    pub alpha_corrected: f64,
    pub significant: bool,
}

/// Paired permutation test on two simulated metric series: `b` is `a` plus
/// `shift` plus independent noise of scale `noise`.
pub fn run_perm_demo(
    n_pairs: usize,
    shift: f64,
    noise: f64,
    permutations: usize,
    comparisons: usize,
    seed: u64,
) -> milpath::Result<PermDemo> {
    let mut rng = seeded(seed);
    let a: Vec<f64> = (0..n_pairs).map(|_| rng.random_range(0.6..0.9)).collect();
    let b: Vec<f64> = a.iter().map(|x| x + shift + noise * rng.random_range(-1.0..1.0)).collect();
    let r = perm_test(&a, &b, permutations, seed, comparisons)?;
    Ok(PermDemo {
        a,
        b,
        observed: r.observed,
        p_value: r.p_value,
        alpha_corrected: r.alpha_corrected,
        significant: r.significant,
    })
}

#[wasm_bindgen]
pub fn perm_demo(
    n_pairs: u32,
    shift: f64,
    noise: f64,
    permutations: u32,
    comparisons: u32,
    seed: u32,
) -> Result<String, JsError> {
    let demo = run_perm_demo(
        n_pairs as usize,
        shift,
        noise,
        permutations as usize,
        comparisons as usize,
        seed as u64,
    )
    .map_err(js_err)?;
    serde_json::to_string(&demo).map_err(js_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_demo_learns_and_reports_every_instance() {
        let d = run_train_demo(6.0, 3, 15, false).unwrap();
        assert_eq!(d.epochs.len(), 15);
        assert_eq!(d.bags.len(), 3 * (CASES_PER_CLASS - TRAIN_PER_CLASS));
        assert!(d.val_accuracy >= 0.8, "accuracy {}", d.val_accuracy);
        for b in &d.bags {
            assert_eq!(b.attention.len(), b.signal.len());
            assert_eq!(b.colors.len(), b.signal.len());
            assert!((b.attention.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn clam_demo_runs() {
        let d = run_train_demo(6.0, 1, 3, true).unwrap();
        assert!(d.bags.iter().all(|b| b.colors.iter().all(|c| c.len() == 7)));
    }

    #[test]
    fn lr_curve_starts_at_lr0_and_decays() {
        let c = lr_curve(1e-3, 0.0, 20);
        assert_eq!(c.len(), 20);
        assert_eq!(c[0], 1e-3);
        assert!(c.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn perm_demo_extremes() {
        let shifted = run_perm_demo(50, 0.1, 0.0, 999, 1, 4).unwrap();
        assert_eq!(shifted.p_value, 1.0 / 1000.0);
        assert!(shifted.significant);
        let null = run_perm_demo(50, 0.0, 0.0, 999, 1, 4).unwrap();
        assert_eq!(null.p_value, 1.0);
    }
}
