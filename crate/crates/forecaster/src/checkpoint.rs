//! Checkpoint layout:
//!
//! ```text
//! magic    8 bytes  "DRIPLSTM"
//! version  u32 LE   1
//! hlen     u32 LE   length of the JSON header
//! header   hlen bytes of UTF-8 JSON: pot, shapes, window, dropout, param_count
//! payload  f64 LE: scaler min (5), scaler max (5), parameters (param_count)
//! ```
//!
//! Values are stored as raw bits, so a reloaded model predicts bit-exactly.

use drip_core::domain::PotId;
use drip_core::store::FEATURES;
use serde::{Deserialize, Serialize};

use crate::model::{Params, Shapes};
use crate::predictor::ForecastModel;
use crate::scaler::Scaler;
use crate::window::WindowSpec;
use crate::ForecastError;

const MAGIC: &[u8; 8] = b"DRIPLSTM";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    pot: PotId,
    shapes: Shapes,
    window: WindowSpec,
    dropout: f64,
    param_count: usize,
}

pub fn to_bytes(m: &ForecastModel) -> Vec<u8> {
    let header = serde_json::to_vec(&Header {
        pot: m.pot,
        shapes: m.params.shapes,
        window: m.window,
        dropout: m.dropout,
        param_count: m.params.data.len(),
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(16 + header.len() + 8 * (2 * FEATURES + m.params.data.len()));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for v in m.scaler.min.iter().chain(&m.scaler.max).chain(&m.params.data) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn bad(msg: impl Into<String>) -> ForecastError {
    ForecastError::Checkpoint(msg.into())
}

pub fn from_bytes(bytes: &[u8]) -> Result<ForecastModel, ForecastError> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a model checkpoint"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if body.len() < hlen {
        return Err(bad("truncated header"));
    }
    let header: Header =
        serde_json::from_slice(&body[..hlen]).map_err(|e| bad(format!("header: {e}")))?;
    if header.shapes.features != FEATURES {
        return Err(bad(format!("{} input features, expected {FEATURES}", header.shapes.features)));
    }
    if header.shapes.param_count() != header.param_count
        || header.shapes.horizon != header.window.horizon
    {
        return Err(bad("header shapes are inconsistent"));
    }
    let payload = &body[hlen..];
    let want = 8 * (2 * FEATURES + header.param_count);
    if payload.len() != want {
        return Err(bad(format!("payload is {} bytes, expected {want}", payload.len())));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let scaler = Scaler {
        min: values[..FEATURES].try_into().unwrap(),
        max: values[FEATURES..2 * FEATURES].try_into().unwrap(),
    };
    let params = Params::from_flat(header.shapes, values[2 * FEATURES..].to_vec())?;
    Ok(ForecastModel {
        pot: header.pot,
        params,
        dropout: header.dropout,
        scaler,
        window: header.window,
    })
}
