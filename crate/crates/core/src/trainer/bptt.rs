//! Whole-sequence forward pass with cached activations, and
//! backpropagation through time.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use super::{Result, TrainError};
use crate::lstm::{sigmoid, LstmWeights};

/// Inverted-dropout masks on the outputs of every LSTM layer except the
/// last. Entries are `0` or `1 / (1 - rate)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks {
    pub masks: Vec<Array2<f64>>,
}

impl DropoutMasks {
    pub fn sample<R: Rng + ?Sized>(
        rng: &mut R,
        layers: usize,
        frames: usize,
        hidden: usize,
        rate: f64,
    ) -> Self {
        let keep = 1.0 - rate;
        let masks = (0..layers.saturating_sub(1))
            .map(|_| {
                Array2::from_shape_fn((frames, hidden), |_| {
                    if rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                })
            })
            .collect();
        Self { masks }
    }
}

#[derive(Debug, Clone)]
struct LayerTrace {
    /// Layer input, after dropout. `T x D`
    x: Array2<f64>,
    /// Gate activations `(i, f, g, o)`. `T x 4H`
    gates: Array2<f64>,
    c: Array2<f64>,
    h: Array2<f64>,
}

/// Activations of one sequence, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    layers: Vec<LayerTrace>,
    /// Sigmoid outputs, `T x O`.
    pub output: Array2<f64>,
}

/// Runs the network over a `T x D` feature sequence from a zero state.
pub fn forward_sequence(
    weights: &LstmWeights,
    features: ArrayView2<'_, f64>,
    dropout: Option<&DropoutMasks>,
) -> Result<Trace> {
    let shape = weights.shape();
    if features.ncols() != shape.input {
        return Err(TrainError::Shape(format!(
            "{} features, network expects {}",
            features.ncols(),
            shape.input
        )));
    }
    let frames = features.nrows();
    let hd = shape.hidden;
    let mut input = features.to_owned();
    let mut traces = Vec::with_capacity(shape.layers);
    for (k, layer) in weights.layers.iter().enumerate() {
        let pre = input.dot(&layer.w_x.t()) + &layer.b;
        let mut gates = Array2::zeros((frames, 4 * hd));
        let mut c = Array2::zeros((frames, hd));
        let mut h = Array2::zeros((frames, hd));
        let mut h_prev = Array1::zeros(hd);
        let mut c_prev = Array1::<f64>::zeros(hd);
        for t in 0..frames {
            let a = &pre.row(t) + &layer.w_h.dot(&h_prev);
            for j in 0..hd {
                let i = sigmoid(a[j]);
                let f = sigmoid(a[hd + j]);
                let g = a[2 * hd + j].tanh();
                let o = sigmoid(a[3 * hd + j]);
                let cn = f * c_prev[j] + i * g;
                gates[[t, j]] = i;
                gates[[t, hd + j]] = f;
                gates[[t, 2 * hd + j]] = g;
                gates[[t, 3 * hd + j]] = o;
                c[[t, j]] = cn;
                h[[t, j]] = o * cn.tanh();
            }
            h_prev = h.row(t).to_owned();
            c_prev = c.row(t).to_owned();
        }
        let next = match dropout.and_then(|d| d.masks.get(k)) {
            Some(mask) if k + 1 < shape.layers => &h * mask,
            _ => h.clone(),
        };
        traces.push(LayerTrace {
            x: input,
            gates,
            c,
            h,
        });
        input = next;
    }
    let z = input.dot(&weights.fc.w.t()) + &weights.fc.b;
    let output = z.mapv(sigmoid);
    if output.iter().any(|v| !v.is_finite()) {
        return Err(TrainError::NumericFailure(
            "non-finite network output".into(),
        ));
    }
    Ok(Trace {
        layers: traces,
        output,
    })
}

/// Accumulates into `grads` the parameter gradients for an upstream
/// gradient `dz` with respect to the pre-sigmoid outputs.
pub fn backward_sequence(
    weights: &LstmWeights,
    trace: &Trace,
    dz: ArrayView2<'_, f64>,
    dropout: Option<&DropoutMasks>,
    grads: &mut LstmWeights,
) -> Result<()> {
    let top = &trace.layers.last().expect("at least one layer").h;
    grads.fc.w += &dz.t().dot(top);
    grads.fc.b += &dz.sum_axis(Axis(0));
    let mut dh_out = dz.dot(&weights.fc.w);

    for k in (0..weights.layers.len()).rev() {
        let layer = &weights.layers[k];
        let tr = &trace.layers[k];
        let (frames, hd) = tr.h.dim();
        let mut da = Array2::zeros((frames, 4 * hd));
        let mut dh_next = Array1::<f64>::zeros(hd);
        let mut dc_next = Array1::<f64>::zeros(hd);
        for t in (0..frames).rev() {
            for j in 0..hd {
                let i = tr.gates[[t, j]];
                let f = tr.gates[[t, hd + j]];
                let g = tr.gates[[t, 2 * hd + j]];
                let o = tr.gates[[t, 3 * hd + j]];
                let c_prev = if t > 0 { tr.c[[t - 1, j]] } else { 0.0 };
                let tc = tr.c[[t, j]].tanh();
                let dh = dh_out[[t, j]] + dh_next[j];
                let dc = dc_next[j] + dh * o * (1.0 - tc * tc);
                da[[t, j]] = dc * g * i * (1.0 - i);
                da[[t, hd + j]] = dc * c_prev * f * (1.0 - f);
                da[[t, 2 * hd + j]] = dc * i * (1.0 - g * g);
                da[[t, 3 * hd + j]] = dh * tc * o * (1.0 - o);
                dc_next[j] = dc * f;
            }
            dh_next = layer.w_h.t().dot(&da.row(t));
        }
        let g = &mut grads.layers[k];
        g.w_x += &da.t().dot(&tr.x);
        if frames > 1 {
            g.w_h += &da
                .slice(s![1.., ..])
                .t()
                .dot(&tr.h.slice(s![..frames - 1, ..]));
        }
        g.b += &da.sum_axis(Axis(0));
        if k > 0 {
            let mut dx = da.dot(&layer.w_x);
            if let Some(mask) = dropout.and_then(|d| d.masks.get(k - 1)) {
                dx *= mask;
            }
            dh_out = dx;
        }
    }
    if !grads.is_finite() {
        return Err(TrainError::NumericFailure("non-finite gradient".into()));
    }
    Ok(())
}
