/// Cosine annealing from `base` at epoch 0 to `base / 100` at the last epoch.
pub fn cosine_lr(base: f64, epoch: usize, epochs: usize) -> f64 {
    let floor = base / 100.0;
    if epochs <= 1 {
        return base;
    }
    let progress = epoch.min(epochs - 1) as f64 / (epochs - 1) as f64;
    floor + 0.5 * (base - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Continue,
    Stop,
}

/// Stops after `patience` consecutive epochs without a strictly lower validation loss.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: Option<usize>,
    stale: usize,
    seen: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping { patience: patience.max(1), best: f64::INFINITY, best_epoch: None, stale: 0, seen: 0 }
    }

    pub fn observe(&mut self, val_loss: f64) -> Verdict {
        let epoch = self.seen;
        self.seen += 1;
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = Some(epoch);
            self.stale = 0;
            return Verdict::Improved;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            Verdict::Stop
        } else {
            Verdict::Continue
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(1e-3, 0, 10), 1e-3);
        assert!((cosine_lr(1e-3, 9, 10) - 1e-5).abs() < 1e-18);
        assert!(cosine_lr(1e-3, 5, 10) < cosine_lr(1e-3, 4, 10));
        assert_eq!(cosine_lr(1e-3, 0, 1), 1e-3);
    }

    #[test]
    fn plateau_at_epoch_two_stops_at_five() {
        let mut es = EarlyStopping::new(3);
        let losses = [1.0, 0.5, 0.5, 0.5, 0.5, 0.1];
        let mut stopped = None;
        for (i, &l) in losses.iter().enumerate() {
            if es.observe(l) == Verdict::Stop {
                stopped = Some(i + 1);
                break;
            }
        }
        assert_eq!(stopped, Some(5));
        assert_eq!(es.best_epoch, Some(1));
    }
}
