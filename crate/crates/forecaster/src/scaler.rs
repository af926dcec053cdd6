//! Per-feature min-max scaling fitted on training rows only.

use drip_core::store::FEATURES;
use serde::{Deserialize, Serialize};

use crate::ForecastError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub min: [f64; FEATURES],
    pub max: [f64; FEATURES],
}

impl Scaler {
    pub fn fit(rows: &[[f64; FEATURES]]) -> Result<Scaler, ForecastError> {
        let first = rows.first().ok_or(ForecastError::EmptyInput("scaler fit"))?;
        let mut s = Scaler {
            min: *first,
            max: *first,
        };
        for row in &rows[1..] {
            for k in 0..FEATURES {
                s.min[k] = s.min[k].min(row[k]);
                s.max[k] = s.max[k].max(row[k]);
            }
        }
        Ok(s)
    }

    fn span(&self, k: usize) -> f64 {
        self.max[k] - self.min[k]
    }

    /// `(x − min)/(max − min)`; a constant feature maps to 0.
    pub fn transform_value(&self, k: usize, x: f64) -> f64 {
        let span = self.span(k);
        if span == 0.0 {
            0.0
        } else {
            (x - self.min[k]) / span
        }
    }

    pub fn inverse_value(&self, k: usize, x: f64) -> f64 {
        self.min[k] + x * self.span(k)
    }

    pub fn transform(&self, row: &[f64; FEATURES]) -> [f64; FEATURES] {
        std::array::from_fn(|k| self.transform_value(k, row[k]))
    }

    pub fn inverse_transform(&self, row: &[f64; FEATURES]) -> [f64; FEATURES] {
        std::array::from_fn(|k| self.inverse_value(k, row[k]))
    }
}
