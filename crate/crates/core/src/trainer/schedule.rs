/// Cosine-annealed learning rate for `epoch ∈ [0, t_max]`:
/// `η_min + ½(lr0 − η_min)(1 + cos(π·epoch/t_max))`.
pub fn cosine_lr(epoch: usize, t_max: usize, lr0: f64, eta_min: f64) -> f64 {
    if t_max == 0 {
        return lr0;
    }
    let epoch = epoch.min(t_max) as f64;
    eta_min + 0.5 * (lr0 - eta_min) * (1.0 + (std::f64::consts::PI * epoch / t_max as f64).cos())
}

/// Patience-based early stopping on a loss that should decrease.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub min_epochs: usize,
    pub patience: usize,
    pub tolerance: f64,
    best: f64,
    best_epoch: usize,
}

impl EarlyStopping {
    pub fn new(min_epochs: usize, patience: usize, tolerance: f64) -> Self {
        EarlyStopping {
            min_epochs,
            patience,
            tolerance,
            best: f64::INFINITY,
            best_epoch: 0,
        }
    }

    /// Records the loss of 1-based `epoch`. Returns `(improved, stop)`.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> (bool, bool) {
        let improved = loss < self.best - self.tolerance;
        if improved {
            self.best = loss;
            self.best_epoch = epoch;
        }
        let stop = epoch >= self.min_epochs && epoch - self.best_epoch >= self.patience;
        (improved, stop)
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 20, 1e-4, 1e-6), 1e-4);
        assert!((cosine_lr(20, 20, 1e-4, 1e-6) - 1e-6).abs() < 1e-20);
        assert!((cosine_lr(10, 20, 1e-4, 0.0) - 5e-5).abs() < 1e-18);
    }

    #[test]
    fn cosine_is_monotone() {
        let lrs: Vec<f64> = (0..=20).map(|e| cosine_lr(e, 20, 1e-4, 1e-6)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    fn walk(losses: &[f64]) -> (usize, usize) {
        let mut es = EarlyStopping::new(10, 5, 1e-6);
        for (i, &l) in losses.iter().enumerate() {
            let (_, stop) = es.observe(i + 1, l);
            if stop {
                return (i + 1, es.best_epoch());
            }
        }
        (losses.len(), es.best_epoch())
    }

    #[test]
    fn plateau_stops_at_min_epochs() {
        let mut losses = vec![5.0, 4.0, 3.0];
        losses.extend([3.0; 17]);
        // last improvement at epoch 3; max(10, 3 + 5) = 10
        assert_eq!(walk(&losses), (10, 3));
    }

    #[test]
    fn late_plateau_waits_for_patience() {
        let mut losses: Vec<f64> = (0..12).map(|i| 10.0 - i as f64).collect();
        losses.extend([0.0; 8]);
        // best at 12 → stop at 17
        assert_eq!(walk(&losses), (17, 12));
    }

    #[test]
    fn monotone_improvement_never_stops() {
        let losses: Vec<f64> = (0..20).map(|i| 1.0 / (i + 1) as f64).collect();
        assert_eq!(walk(&losses), (20, 20));
    }

    #[test]
    fn tiny_improvements_do_not_reset_patience() {
        let mut losses = vec![1.0];
        losses.extend((1..20).map(|i| 1.0 - 1e-8 * i as f64));
        assert_eq!(walk(&losses), (10, 1));
    }
}
