//! Sliding windows over a dataset: `L` input rows followed by the next `F`
//! target values.

use drip_core::store::{Dataset, FEATURES, TARGET_FEATURE};
use serde::{Deserialize, Serialize};

use crate::scaler::Scaler;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub lookback: usize,
    pub horizon: usize,
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec {
            lookback: 60,
            horizon: 30,
        }
    }
}

impl WindowSpec {
    /// Rows needed for one window.
    pub fn min_rows(&self) -> usize {
        self.lookback + self.horizon
    }

    /// `max(0, N − L − F + 1)`.
    pub fn count(&self, n: usize) -> usize {
        (n + 1).saturating_sub(self.lookback + self.horizon)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `L` rows of features.
    pub x: Vec<[f64; FEATURES]>,
    /// `F` target values.
    pub y: Vec<f64>,
}

/// Every window of `rows` (already scaled), in start order.
pub fn make_sequences(rows: &[[f64; FEATURES]], spec: WindowSpec) -> Vec<Sample> {
    (0..spec.count(rows.len()))
        .map(|s| Sample {
            x: rows[s..s + spec.lookback].to_vec(),
            y: rows[s + spec.lookback..s + spec.min_rows()]
                .iter()
                .map(|r| r[TARGET_FEATURE])
                .collect(),
        })
        .collect()
}

/// Scales a dataset split and cuts it into windows.
pub fn scaled_sequences(ds: &Dataset, scaler: &Scaler, spec: WindowSpec) -> Vec<Sample> {
    let rows: Vec<_> = ds.rows.iter().map(|r| scaler.transform(r)).collect();
    make_sequences(&rows, spec)
}
