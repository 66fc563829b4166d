//! Exact-memorization baseline for the outcome regressor: a weighted mean
//! of observed outcomes per (prefix, intervene-now) cell. On the small
//! processes every cell is visited often enough that this converges to the
//! true conditional expectation, which makes it a reference point for the
//! sequence model's effect estimates.

use std::collections::BTreeMap;

use crate::policies::PrefixKey;
use crate::{Error, Result};

/// Conditional-mean table keyed by (prefix, whether the intervention fires
/// on the prefix's last event).
#[derive(Debug, Clone, Default)]
pub struct TabularEstimator {
    cells: BTreeMap<(PrefixKey, bool), (f64, f64)>,
}

impl TabularEstimator {
    pub fn new() -> TabularEstimator {
        TabularEstimator::default()
    }

    /// Add one observation with the given weight (use 1.0 for samples;
    /// exact enumerations pass trace probabilities).
    pub fn add(&mut self, key: PrefixKey, intervene_now: bool, outcome: f64, weight: f64) {
        let cell = self.cells.entry((key, intervene_now)).or_insert((0.0, 0.0));
        cell.0 += weight * outcome;
        cell.1 += weight;
    }

    /// Weighted mean outcome for a cell; unseen cells are an error rather
    /// than a silent zero.
    pub fn predict(&self, key: &PrefixKey, intervene_now: bool) -> Result<f64> {
        match self.cells.get(&(key.clone(), intervene_now)) {
            Some(&(sum, weight)) if weight > 0.0 => Ok(sum / weight),
            _ => Err(Error::NoData),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }
}
