//! Trained per-pot models: end-to-end fitting from a dataset, evaluation,
//! and the forecast source the controller consults in AI mode.

use std::path::Path;

use drip_core::controller::ForecastSource;
use drip_core::domain::{PotId, SensorSnapshot, POT_COUNT};
use drip_core::store::{split, to_dataset, Dataset, FEATURES, TARGET_FEATURE};
use serde::Serialize;

use crate::checkpoint;
use crate::loss::mae;
use crate::model::{forward_with_mask, Params};
use crate::scaler::Scaler;
use crate::train::{train, History, TrainConfig};
use crate::window::{scaled_sequences, Sample, WindowSpec};
use crate::ForecastError;

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastModel {
    pub pot: PotId,
    pub params: Params,
    pub dropout: f64,
    pub scaler: Scaler,
    pub window: WindowSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalReport {
    /// Mean absolute error in scaled units.
    pub mae: f64,
    /// The same error in raw ADC counts.
    pub mae_counts: f64,
    pub windows: usize,
}

/// Outcome of [`ForecastModel::fit`].
#[derive(Debug, Clone)]
pub struct Fitted {
    pub model: ForecastModel,
    pub history: History,
    pub test: Option<EvalReport>,
    pub split_rows: (usize, usize, usize),
}

impl ForecastModel {
    /// Splits the dataset chronologically, fits the scaler on the training
    /// rows, trains, and evaluates on the test split when it holds a window.
    pub fn fit(ds: &Dataset, cfg: &TrainConfig) -> Result<Fitted, ForecastError> {
        let needed = cfg.window.min_rows();
        if ds.len() < needed {
            return Err(ForecastError::NotEnoughRows {
                needed,
                found: ds.len(),
            });
        }
        let (tr, va, te) = split(ds);
        if tr.len() < needed {
            return Err(ForecastError::NotEnoughRows {
                needed: needed * 100 / 70 + 1,
                found: ds.len(),
            });
        }
        let scaler = Scaler::fit(&tr.rows)?;
        let train_s = scaled_sequences(&tr, &scaler, cfg.window);
        let val_s = scaled_sequences(&va, &scaler, cfg.window);
        let test_s = scaled_sequences(&te, &scaler, cfg.window);
        let (params, history) = train(&train_s, &val_s, cfg)?;
        let model = ForecastModel {
            pot: ds.pot,
            params,
            dropout: cfg.dropout,
            scaler,
            window: cfg.window,
        };
        let test = if test_s.is_empty() {
            None
        } else {
            Some(model.evaluate(&test_s)?)
        };
        Ok(Fitted {
            model,
            history,
            test,
            split_rows: (tr.len(), va.len(), te.len()),
        })
    }

    /// Forecast in scaled units from a scaled window.
    pub fn predict(&self, x: &[[f64; FEATURES]]) -> Vec<f64> {
        forward_with_mask(&self.params, x, None)
    }

    /// Forecast in ADC counts from raw feature rows (the last `L` are used).
    pub fn predict_counts(&self, rows: &[[f64; FEATURES]]) -> Option<Vec<f64>> {
        let l = self.window.lookback;
        if rows.len() < l {
            return None;
        }
        let x: Vec<_> = rows[rows.len() - l..]
            .iter()
            .map(|r| self.scaler.transform(r))
            .collect();
        Some(
            self.predict(&x)
                .into_iter()
                .map(|v| self.scaler.inverse_value(TARGET_FEATURE, v))
                .collect(),
        )
    }

    /// Mean per-window MAE over scaled windows, also reported in counts.
    pub fn evaluate(&self, test: &[Sample]) -> Result<EvalReport, ForecastError> {
        if test.is_empty() {
            return Err(ForecastError::EmptyInput("evaluation"));
        }
        let inv = |v: &[f64]| -> Vec<f64> {
            v.iter()
                .map(|&x| self.scaler.inverse_value(TARGET_FEATURE, x))
                .collect()
        };
        let (mut scaled, mut counts) = (0.0, 0.0);
        for s in test {
            let y_hat = self.predict(&s.x);
            scaled += mae(&s.y, &y_hat)?;
            counts += mae(&inv(&s.y), &inv(&y_hat))?;
        }
        let n = test.len() as f64;
        Ok(EvalReport {
            mae: scaled / n,
            mae_counts: counts / n,
            windows: test.len(),
        })
    }

    /// Evaluates on the test split of a dataset, scaled with this model's
    /// scaler.
    pub fn evaluate_dataset(&self, ds: &Dataset) -> Result<EvalReport, ForecastError> {
        let (_, _, te) = split(ds);
        self.evaluate(&scaled_sequences(&te, &self.scaler, self.window))
    }

    pub fn save(&self, path: &Path) -> Result<(), ForecastError> {
        std::fs::write(path, checkpoint::to_bytes(self))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ForecastModel, ForecastError> {
        checkpoint::from_bytes(&std::fs::read(path)?)
    }
}

/// File name of a pot's checkpoint inside a models directory.
pub fn checkpoint_name(pot: PotId) -> String {
    format!("model_pot{}.bin", pot.index() + 1)
}

/// Up to one model per pot.
#[derive(Debug, Clone, Default)]
pub struct ModelSet {
    pub models: [Option<ForecastModel>; POT_COUNT],
}

impl ModelSet {
    /// Loads whichever `model_pot<k>.bin` files exist in `dir`.
    pub fn load_dir(dir: &Path) -> Result<ModelSet, ForecastError> {
        let mut set = ModelSet::default();
        for pot in PotId::ALL {
            let path = dir.join(checkpoint_name(pot));
            if path.exists() {
                let model = ForecastModel::load(&path)?;
                if model.pot != pot {
                    return Err(ForecastError::Checkpoint(format!(
                        "{} holds a model for {}",
                        path.display(),
                        model.pot
                    )));
                }
                set.models[pot.index()] = Some(model);
            }
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.models.iter().flatten().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ForecastSource for ModelSet {
    fn lookback(&self) -> usize {
        self.models
            .iter()
            .flatten()
            .map(|m| m.window.lookback)
            .max()
            .unwrap_or(0)
    }

    fn forecast(&self, pot: PotId, history: &[SensorSnapshot]) -> Option<Vec<f64>> {
        let model = self.models[pot.index()].as_ref()?;
        let l = model.window.lookback;
        if history.len() < l {
            return None;
        }
        let ds = to_dataset(&history[history.len() - l..], pot).ok()?;
        model.predict_counts(&ds.rows)
    }
}
