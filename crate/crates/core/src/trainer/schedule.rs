//! Reduce-on-plateau learning rate with early stopping.

use serde::{Deserialize, Serialize};

/// Tracks the running minimum of per-epoch loss.
///
/// The learning rate is multiplied by `factor` whenever `patience` epochs
/// have passed without a new minimum since the last improvement or
/// reduction. Training stops once `stop_patience` consecutive epochs fail to
/// set a new minimum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauSchedule {
    lr: f64,
    factor: f64,
    patience: usize,
    stop_patience: usize,
    best: f64,
    bad_epochs: usize,
    bad_since_reduction: usize,
}

impl PlateauSchedule {
    pub fn new(lr: f64, factor: f64, patience: usize, stop_patience: usize) -> Self {
        PlateauSchedule {
            lr,
            factor,
            patience,
            stop_patience,
            best: f64::INFINITY,
            bad_epochs: 0,
            bad_since_reduction: 0,
        }
    }

    /// Learning rate for the next epoch.
    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// Records an epoch's loss. Returns `true` when training should stop.
    pub fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.bad_epochs = 0;
            self.bad_since_reduction = 0;
        } else {
            self.bad_epochs += 1;
            self.bad_since_reduction += 1;
            if self.bad_since_reduction >= self.patience {
                self.lr *= self.factor;
                self.bad_since_reduction = 0;
            }
        }
        self.bad_epochs >= self.stop_patience
    }
}
