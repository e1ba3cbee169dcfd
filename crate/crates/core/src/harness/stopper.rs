//! Patience-based early stopping on per-epoch mean student loss.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopper {
    pub patience: u64,
    pub min_epochs: u64,
    pub best: f64,
    pub stale: u64,
    pub epochs: u64,
    pub fired: bool,
}

impl EarlyStopper {
    pub fn new(patience: u64, min_epochs: u64) -> Self {
        EarlyStopper {
            patience,
            min_epochs,
            best: f64::INFINITY,
            stale: 0,
            epochs: 0,
            fired: false,
        }
    }

    /// Records one epoch's loss. Returns true once stopping has fired.
    ///
    /// Only a strict improvement resets the stale count. The check is skipped
    /// until `min_epochs` epochs have been seen.
    pub fn observe(&mut self, loss: f64) -> bool {
        self.epochs += 1;
        if loss < self.best {
            self.best = loss;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        if self.epochs >= self.min_epochs && self.stale >= self.patience {
            self.fired = true;
        }
        self.fired
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fires_after_exactly_patience_flat_epochs() {
        let mut s = EarlyStopper::new(3, 0);
        assert!(!s.observe(1.0));
        assert!(!s.observe(1.0));
        assert!(!s.observe(1.0));
        assert!(s.observe(1.0));
    }

    #[test]
    fn improvement_resets_and_minimum_gates() {
        let mut s = EarlyStopper::new(2, 0);
        s.observe(1.0);
        s.observe(1.0);
        s.observe(0.5);
        assert!(!s.observe(0.6));
        assert!(s.observe(0.5));

        let mut s = EarlyStopper::new(1, 5);
        for _ in 0..4 {
            assert!(!s.observe(1.0));
        }
        assert!(s.observe(1.0));
    }
}
