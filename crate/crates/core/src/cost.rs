//! Forward/backward pass accounting.
//!
//! One *unit* is a forward plus a backward pass over one batch at the base
//! batch size. The ledger counts half-units (one forward or one backward over a
//! base batch) so every total is an exact integer.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostLedger {
    generation_half_units: u64,
    train_forward_half_units: u64,
    train_backward_half_units: u64,
    steps: u64,
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// One attack iteration: forward and backward over the base batch.
    pub fn record_generation_pass(&mut self) {
        self.generation_half_units += 2;
    }

    /// A training forward over `batch_multiple` base batches.
    pub fn record_train_forward(&mut self, batch_multiple: u64) {
        self.train_forward_half_units += batch_multiple;
    }

    pub fn record_train_backward(&mut self, batch_multiple: u64) {
        self.train_backward_half_units += batch_multiple;
    }

    pub fn finish_step(&mut self) {
        self.steps += 1;
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn total_half_units(&self) -> u64 {
        self.generation_half_units + self.train_forward_half_units + self.train_backward_half_units
    }

    pub fn total_units(&self) -> f64 {
        self.total_half_units() as f64 / 2.0
    }

    pub fn merge(&mut self, other: &CostLedger) {
        self.generation_half_units += other.generation_half_units;
        self.train_forward_half_units += other.train_forward_half_units;
        self.train_backward_half_units += other.train_backward_half_units;
        self.steps += other.steps;
    }

    /// Per-step averages for a ledger that recorded `steps() > 0` steps of one method.
    pub fn report(&self, method: &str) -> PassCostReport {
        let steps = self.steps.max(1) as f64;
        let total = self.total_half_units() as f64 / 2.0 / steps;
        PassCostReport {
            method: method.to_string(),
            gen_passes_per_step: self.generation_half_units as f64 / 2.0 / steps,
            train_forward_units: self.train_forward_half_units as f64 / 2.0 / steps,
            train_backward_units: self.train_backward_half_units as f64 / 2.0 / steps,
            total_units_per_step: total,
            relative_cost: total,
        }
    }
}

/// Per-step pass counts of one training method, relative to clean training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PassCostReport {
    pub method: String,
    pub gen_passes_per_step: f64,
    /// Forward work of the training pass, in units (a forward alone is half a unit).
    pub train_forward_units: f64,
    pub train_backward_units: f64,
    pub total_units_per_step: f64,
    /// `total_units_per_step` divided by the one unit of clean training.
    pub relative_cost: f64,
}

impl PassCostReport {
    /// Fractional saving of `self` relative to `other`: `(other - self) / other`.
    pub fn saving_vs(&self, other: &PassCostReport) -> f64 {
        (other.total_units_per_step - self.total_units_per_step) / other.total_units_per_step
    }
}
