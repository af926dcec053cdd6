//! The network: one LSTM layer unrolled over the lookback window, inverted
//! dropout on its final hidden state, a ReLU dense layer and a linear output
//! of `F` values. Forward and backward passes are written out by hand.
//!
//! All parameters live in one flat `Vec<f64>` so the optimizer, gradient
//! clipping, checkpoints and finite-difference checks can treat them
//! uniformly. Gate blocks are stacked in the order input, forget, output,
//! candidate.

use std::ops::Range;

use drip_core::store::FEATURES;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::window::Sample;
use crate::ForecastError;

const GATES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shapes {
    pub features: usize,
    pub hidden: usize,
    pub dense: usize,
    /// Output width, the forecast horizon `F`.
    pub horizon: usize,
}

impl Shapes {
    pub fn new(hidden: usize, dense: usize, horizon: usize) -> Shapes {
        Shapes {
            features: FEATURES,
            hidden,
            dense,
            horizon,
        }
    }

    fn sizes(&self) -> [usize; 7] {
        let (x, h, d, f) = (self.features, self.hidden, self.dense, self.horizon);
        [GATES * h * x, GATES * h * h, GATES * h, d * h, d, f * d, f]
    }

    fn range(&self, k: usize) -> Range<usize> {
        let sizes = self.sizes();
        let start: usize = sizes[..k].iter().sum();
        start..start + sizes[k]
    }

    pub fn param_count(&self) -> usize {
        self.sizes().iter().sum()
    }
}

/// Borrowed view of the LSTM weights: `w` is `4H×X`, `u` is `4H×H`, `b` is
/// `4H`, row-major.
#[derive(Debug, Clone, Copy)]
pub struct LstmParams<'a> {
    pub hidden: usize,
    pub features: usize,
    pub w: &'a [f64],
    pub u: &'a [f64],
    pub b: &'a [f64],
}

impl<'a> LstmParams<'a> {
    pub fn new(
        hidden: usize,
        features: usize,
        w: &'a [f64],
        u: &'a [f64],
        b: &'a [f64],
    ) -> Result<LstmParams<'a>, ForecastError> {
        let rows = GATES * hidden;
        for (name, len, want) in [
            ("W", w.len(), rows * features),
            ("U", u.len(), rows * hidden),
            ("b", b.len(), rows),
        ] {
            if len != want {
                return Err(ForecastError::Shape(format!(
                    "{name} has {len} entries, expected {want}"
                )));
            }
        }
        Ok(LstmParams {
            hidden,
            features,
            w,
            u,
            b,
        })
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One cell step. Writes activated gates (`i, f, o, g`) into `gates` and the
/// new state into `c`, `h`.
fn cell_into(p: &LstmParams, x: &[f64], h_prev: &[f64], c_prev: &[f64], gates: &mut [f64], c: &mut [f64], h: &mut [f64]) {
    let (hn, xn) = (p.hidden, p.features);
    for r in 0..GATES * hn {
        let wr = &p.w[r * xn..(r + 1) * xn];
        let ur = &p.u[r * hn..(r + 1) * hn];
        let mut a = p.b[r];
        for k in 0..xn {
            a += wr[k] * x[k];
        }
        for k in 0..hn {
            a += ur[k] * h_prev[k];
        }
        gates[r] = if r < 3 * hn { sigmoid(a) } else { a.tanh() };
    }
    for m in 0..hn {
        let (i, f, o, g) = (gates[m], gates[hn + m], gates[2 * hn + m], gates[3 * hn + m]);
        c[m] = f * c_prev[m] + i * g;
        h[m] = o * c[m].tanh();
    }
}

/// `i=σ(W_i x+U_i h+b_i)`, `f`, `o` likewise, `g=tanh(…)`,
/// `c = f⊙c_prev + i⊙g`, `h = o⊙tanh(c)`. Returns `(h, c)`.
pub fn lstm_cell(
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    p: &LstmParams,
) -> Result<(Vec<f64>, Vec<f64>), ForecastError> {
    if x.len() != p.features || h_prev.len() != p.hidden || c_prev.len() != p.hidden {
        return Err(ForecastError::Shape(format!(
            "cell inputs x={}, h={}, c={} do not fit hidden={} features={}",
            x.len(),
            h_prev.len(),
            c_prev.len(),
            p.hidden,
            p.features
        )));
    }
    let mut gates = vec![0.0; GATES * p.hidden];
    let mut c = vec![0.0; p.hidden];
    let mut h = vec![0.0; p.hidden];
    cell_into(p, x, h_prev, c_prev, &mut gates, &mut c, &mut h);
    Ok((h, c))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub shapes: Shapes,
    pub data: Vec<f64>,
}

impl Params {
    pub fn zeros(shapes: Shapes) -> Params {
        Params {
            shapes,
            data: vec![0.0; shapes.param_count()],
        }
    }

    /// Uniform `±1/√fan_in` weights, zero biases except the forget gate's,
    /// which starts at 1.
    pub fn init<R: Rng + ?Sized>(shapes: Shapes, rng: &mut R) -> Params {
        let mut p = Params::zeros(shapes);
        let Shapes {
            features,
            hidden,
            dense,
            ..
        } = shapes;
        let gate_bound = 1.0 / ((features + hidden) as f64).sqrt();
        for (k, bound) in [(0, gate_bound), (1, gate_bound), (3, 1.0 / (hidden as f64).sqrt()), (5, 1.0 / (dense as f64).sqrt())] {
            let range = shapes.range(k);
            for v in &mut p.data[range] {
                *v = rng.random_range(-bound..bound);
            }
        }
        let b = shapes.range(2);
        for v in &mut p.data[b.start + hidden..b.start + 2 * hidden] {
            *v = 1.0;
        }
        p
    }

    pub fn from_flat(shapes: Shapes, data: Vec<f64>) -> Result<Params, ForecastError> {
        if data.len() != shapes.param_count() {
            return Err(ForecastError::Shape(format!(
                "{} parameters for a model that needs {}",
                data.len(),
                shapes.param_count()
            )));
        }
        Ok(Params { shapes, data })
    }

    fn part(&self, k: usize) -> &[f64] {
        &self.data[self.shapes.range(k)]
    }

    pub fn lstm(&self) -> LstmParams<'_> {
        LstmParams {
            hidden: self.shapes.hidden,
            features: self.shapes.features,
            w: self.part(0),
            u: self.part(1),
            b: self.part(2),
        }
    }

    pub fn dense_w(&self) -> &[f64] {
        self.part(3)
    }

    pub fn dense_b(&self) -> &[f64] {
        self.part(4)
    }

    pub fn out_w(&self) -> &[f64] {
        self.part(5)
    }

    pub fn out_b(&self) -> &[f64] {
        self.part(6)
    }

    /// Index range of the output layer (weights then bias) in `data`.
    pub fn output_range(&self) -> Range<usize> {
        self.shapes.range(5).start..self.shapes.range(6).end
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Inverted-dropout mask: each unit kept with probability `1 − rate` and
/// scaled by `1/(1 − rate)`.
pub fn dropout_mask<R: Rng + ?Sized>(hidden: usize, rate: f64, rng: &mut R) -> Vec<f64> {
    if rate <= 0.0 {
        return vec![1.0; hidden];
    }
    let keep = 1.0 - rate;
    (0..hidden)
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect()
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub(crate) struct Trace {
    /// `(L+1)·H` hidden states, the first all zero.
    hs: Vec<f64>,
    cs: Vec<f64>,
    /// `L·4H` activated gates.
    gates: Vec<f64>,
    /// `L·H` values of `tanh(c_t)`.
    tc: Vec<f64>,
    mask: Option<Vec<f64>>,
    hd: Vec<f64>,
    z1: Vec<f64>,
    a1: Vec<f64>,
    pub(crate) y: Vec<f64>,
}

pub(crate) fn forward_trace(p: &Params, x: &[[f64; FEATURES]], mask: Option<&[f64]>) -> Trace {
    let Shapes {
        hidden: h,
        dense: d,
        horizon: f,
        ..
    } = p.shapes;
    let steps = x.len();
    let lstm = p.lstm();
    let mut t = Trace {
        hs: vec![0.0; (steps + 1) * h],
        cs: vec![0.0; (steps + 1) * h],
        gates: vec![0.0; steps * GATES * h],
        tc: vec![0.0; steps * h],
        mask: mask.map(<[f64]>::to_vec),
        hd: vec![0.0; h],
        z1: vec![0.0; d],
        a1: vec![0.0; d],
        y: vec![0.0; f],
    };
    for (s, row) in x.iter().enumerate() {
        let (hs_prev, hs_next) = t.hs.split_at_mut((s + 1) * h);
        let (cs_prev, cs_next) = t.cs.split_at_mut((s + 1) * h);
        cell_into(
            &lstm,
            row,
            &hs_prev[s * h..],
            &cs_prev[s * h..],
            &mut t.gates[s * GATES * h..(s + 1) * GATES * h],
            &mut cs_next[..h],
            &mut hs_next[..h],
        );
        for m in 0..h {
            t.tc[s * h + m] = cs_next[m].tanh();
        }
    }
    let last = &t.hs[steps * h..];
    for m in 0..h {
        t.hd[m] = last[m] * mask.map_or(1.0, |k| k[m]);
    }
    let (w1, b1, w2, b2) = (p.dense_w(), p.dense_b(), p.out_w(), p.out_b());
    for j in 0..d {
        let mut z = b1[j];
        for m in 0..h {
            z += w1[j * h + m] * t.hd[m];
        }
        t.z1[j] = z;
        t.a1[j] = z.max(0.0);
    }
    for k in 0..f {
        let mut y = b2[k];
        for j in 0..d {
            y += w2[k * d + j] * t.a1[j];
        }
        t.y[k] = y;
    }
    t
}

/// Runs the network on one scaled window. `mask` is the dropout mask applied
/// to the final hidden state; `None` means inference.
pub fn forward_with_mask(p: &Params, x: &[[f64; FEATURES]], mask: Option<&[f64]>) -> Vec<f64> {
    forward_trace(p, x, mask).y
}

/// Adds `d(loss)/d(params)` for one traced sample to `grad`, given
/// `dy = d(loss)/d(ŷ)`.
pub(crate) fn backward_into(p: &Params, x: &[[f64; FEATURES]], t: &Trace, dy: &[f64], grad: &mut [f64]) {
    let s = p.shapes;
    let (h, d, f, xn) = (s.hidden, s.dense, s.horizon, s.features);
    let steps = x.len();
    let ranges: Vec<Range<usize>> = (0..7).map(|k| s.range(k)).collect();
    let (w1, w2, u) = (p.dense_w(), p.out_w(), p.lstm().u);

    // output layer
    let mut da1 = vec![0.0; d];
    {
        let gw2 = ranges[5].start;
        let gb2 = ranges[6].start;
        for k in 0..f {
            grad[gb2 + k] += dy[k];
            for j in 0..d {
                grad[gw2 + k * d + j] += dy[k] * t.a1[j];
                da1[j] += w2[k * d + j] * dy[k];
            }
        }
    }
    // dense ReLU
    let mut dhd = vec![0.0; h];
    {
        let gw1 = ranges[3].start;
        let gb1 = ranges[4].start;
        for j in 0..d {
            let dz = if t.z1[j] > 0.0 { da1[j] } else { 0.0 };
            if dz == 0.0 {
                continue;
            }
            grad[gb1 + j] += dz;
            for m in 0..h {
                grad[gw1 + j * h + m] += dz * t.hd[m];
                dhd[m] += w1[j * h + m] * dz;
            }
        }
    }
    let mut dh: Vec<f64> = match &t.mask {
        Some(mask) => dhd.iter().zip(mask).map(|(g, k)| g * k).collect(),
        None => dhd,
    };
    let mut dc = vec![0.0; h];
    let mut da = vec![0.0; GATES * h];
    let (gw, gu, gb) = (ranges[0].start, ranges[1].start, ranges[2].start);

    for step in (0..steps).rev() {
        let gates = &t.gates[step * GATES * h..(step + 1) * GATES * h];
        let tc = &t.tc[step * h..(step + 1) * h];
        let c_prev = &t.cs[step * h..(step + 1) * h];
        let h_prev = &t.hs[step * h..(step + 1) * h];
        for m in 0..h {
            let (i, fg, o, g) = (gates[m], gates[h + m], gates[2 * h + m], gates[3 * h + m]);
            let d_o = dh[m] * tc[m];
            let dct = dc[m] + dh[m] * o * (1.0 - tc[m] * tc[m]);
            da[m] = dct * g * i * (1.0 - i);
            da[h + m] = dct * c_prev[m] * fg * (1.0 - fg);
            da[2 * h + m] = d_o * o * (1.0 - o);
            da[3 * h + m] = dct * i * (1.0 - g * g);
            dc[m] = dct * fg;
        }
        let xt = &x[step];
        for (r, &a) in da.iter().enumerate() {
            grad[gb + r] += a;
            let wrow = &mut grad[gw + r * xn..gw + (r + 1) * xn];
            for k in 0..xn {
                wrow[k] += a * xt[k];
            }
            let urow = &mut grad[gu + r * h..gu + (r + 1) * h];
            for k in 0..h {
                urow[k] += a * h_prev[k];
            }
        }
        for m in 0..h {
            let mut acc = 0.0;
            for r in 0..GATES * h {
                acc += u[r * h + m] * da[r];
            }
            dh[m] = acc;
        }
    }
}

/// Mean squared error over a batch (mean over samples and horizon steps),
/// with one dropout mask per sample or none.
pub fn batch_loss(p: &Params, batch: &[&Sample], masks: Option<&[Vec<f64>]>) -> f64 {
    let n = (batch.len() * p.shapes.horizon) as f64;
    let mut total = 0.0;
    for (b, s) in batch.iter().enumerate() {
        let y = forward_with_mask(p, &s.x, masks.map(|m| m[b].as_slice()));
        total += y.iter().zip(&s.y).map(|(a, t)| (a - t) * (a - t)).sum::<f64>();
    }
    total / n
}

/// Batch MSE and its exact gradient by backpropagation through time. The
/// masks, if given, are the ones the forward pass used.
pub fn loss_and_gradient(p: &Params, batch: &[&Sample], masks: Option<&[Vec<f64>]>) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; p.data.len()];
    let n = (batch.len() * p.shapes.horizon) as f64;
    let mut total = 0.0;
    let mut dy = vec![0.0; p.shapes.horizon];
    for (b, s) in batch.iter().enumerate() {
        let t = forward_trace(p, &s.x, masks.map(|m| m[b].as_slice()));
        for k in 0..dy.len() {
            let r = t.y[k] - s.y[k];
            total += r * r;
            dy[k] = 2.0 * r / n;
        }
        backward_into(p, &s.x, &t, &dy, &mut grad);
    }
    (total / n, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_cell_stays_at_rest() {
        let z = vec![0.0; 4];
        let p = LstmParams::new(1, 1, &z[..4], &z[..4], &z[..4]).unwrap();
        let (h, c) = lstm_cell(&[0.3], &[0.0], &[0.0], &p).unwrap();
        assert_eq!((h[0], c[0]), (0.0, 0.0));
    }

    #[test]
    fn scalar_cell_matches_hand_evaluation() {
        let z = [0.0; 4];
        let p = LstmParams::new(1, 1, &z, &z, &z).unwrap();
        let (h, c) = lstm_cell(&[0.7], &[0.2], &[2.0], &p).unwrap();
        // σ(0) = ½ for every gate, tanh(0) = 0 for the candidate
        let (i, f, o, g) = (0.5, 0.5, 0.5, 0.0f64);
        let c_ref = f * 2.0 + i * g;
        assert_eq!(c[0], c_ref);
        assert!((h[0] - o * c_ref.tanh()).abs() < 1e-15);
        assert!((h[0] - 0.380797).abs() < 1e-6);
    }

    #[test]
    fn saturated_gates_keep_memory() {
        let w = [0.0; 4];
        let b = [-50.0, 50.0, 0.0, 0.0];
        let p = LstmParams::new(1, 1, &w, &w, &b).unwrap();
        let (_, c) = lstm_cell(&[1.0], &[0.5], &[1.25], &p).unwrap();
        assert!((c[0] - 1.25).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let z = [0.0; 8];
        assert!(LstmParams::new(2, 1, &z[..4], &z[..8], &z[..8]).is_err());
        let p = LstmParams::new(1, 1, &z[..4], &z[..4], &z[..4]).unwrap();
        assert!(lstm_cell(&[0.0, 1.0], &[0.0], &[0.0], &p).is_err());
    }

    #[test]
    fn zero_network_outputs_its_bias() {
        let shapes = Shapes::new(4, 3, 2);
        let mut p = Params::zeros(shapes);
        let r = p.output_range();
        p.data[r.end - 2] = 0.25;
        p.data[r.end - 1] = -1.5;
        let x = vec![[0.4; FEATURES]; 5];
        assert_eq!(forward_with_mask(&p, &x, None), vec![0.25, -1.5]);
    }

    #[test]
    fn init_is_bounded_and_seeded() {
        let shapes = Shapes::new(8, 4, 3);
        let a = Params::init(shapes, &mut ChaCha8Rng::seed_from_u64(3));
        let b = Params::init(shapes, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
        assert!(a.lstm().w.iter().all(|v| v.abs() <= 1.0 / 13f64.sqrt()));
        assert_eq!(&a.lstm().b[8..16], &[1.0; 8]);
        assert_eq!(&a.lstm().b[..8], &[0.0; 8]);
    }

    #[test]
    fn dropout_mask_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = dropout_mask(1000, 0.2, &mut rng);
        assert!(m.iter().all(|&v| v == 0.0 || v == 1.25));
        let kept = m.iter().filter(|&&v| v > 0.0).count();
        assert!((700..900).contains(&kept));
        assert_eq!(dropout_mask(3, 0.0, &mut rng), vec![1.0; 3]);
    }
}
