//! Stacked unidirectional LSTM with a sigmoid output layer.
//!
//! The mask estimator uses three 600-unit layers on 257 magnitude bins and a
//! 514-wide output: the first 257 outputs are the speech mask, the last 257
//! the noise mask. The VAD uses the same machinery with one 64-unit layer
//! and a single output.
//!
//! Gate blocks inside every `4H` dimension are ordered `(i, f, g, o)`:
//!
//! ```text
//! a = W_x x + W_h h + b
//! i = sigmoid(a_i)  f = sigmoid(a_f)  g = tanh(a_g)  o = sigmoid(a_o)
//! c' = f * c + i * g
//! h' = o * tanh(c')
//! ```
//!
//! # Weight file
//!
//! ```text
//! magic   "DRMXW1"            6 bytes
//! version u16 (= 1)
//! layers  u16                 number of LSTM layers
//! tensors, in order: for each layer W_x, W_h, b; then fc W, fc b
//!   rank u8, dims u32 x rank, row-major float32 payload
//! ```
//!
//! All integers and floats are little-endian. Parameters are held as `f64`
//! in memory and stored as `f32`.

use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LstmError {
    #[error("weight/config mismatch: {0}")]
    DimensionMismatch(String),
    #[error("numeric failure: {0}")]
    NumericFailure(String),
    #[error("unrecognized weight file")]
    UnrecognizedFile,
    #[error("corrupt weights: {0}")]
    CorruptWeights(String),
    #[error("weight file I/O: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, LstmError>;

pub const WEIGHT_MAGIC: &[u8; 6] = b"DRMXW1";
pub const WEIGHT_VERSION: u16 = 1;

/// Dimensions of a stacked LSTM + dense network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LstmShape {
    pub input: usize,
    pub hidden: usize,
    pub layers: usize,
    pub output: usize,
}

impl LstmShape {
    /// Three 600-unit layers over 257 bins, two 257-bin masks out.
    pub const REFERENCE: LstmShape = LstmShape {
        input: 257,
        hidden: 600,
        layers: 3,
        output: 514,
    };
    /// One 64-unit layer over 257 bins, one speech probability out.
    pub const VAD: LstmShape = LstmShape {
        input: 257,
        hidden: 64,
        layers: 1,
        output: 1,
    };

    pub fn param_count(&self) -> usize {
        let h = self.hidden;
        let first = 4 * h * (self.input + h + 1);
        let rest = self.layers.saturating_sub(1) * 4 * h * (h + h + 1);
        first + rest + self.output * (h + 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer {
    /// `4H x D`
    pub w_x: Array2<f64>,
    /// `4H x H`
    pub w_h: Array2<f64>,
    /// `4H`
    pub b: Array1<f64>,
}

impl LstmLayer {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_x: Array2::zeros((4 * hidden, input)),
            w_h: Array2::zeros((4 * hidden, hidden)),
            b: Array1::zeros(4 * hidden),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_x.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_h.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `O x H`
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmWeights {
    pub layers: Vec<LstmLayer>,
    pub fc: Dense,
}

impl LstmWeights {
    pub fn zeros(shape: LstmShape) -> Self {
        let layers = (0..shape.layers)
            .map(|k| {
                LstmLayer::zeros(
                    if k == 0 { shape.input } else { shape.hidden },
                    shape.hidden,
                )
            })
            .collect();
        Self {
            layers,
            fc: Dense {
                w: Array2::zeros((shape.output, shape.hidden)),
                b: Array1::zeros(shape.output),
            },
        }
    }

    /// Uniform `(-1/sqrt(H), 1/sqrt(H))` initialization with forget-gate
    /// biases set to 1.
    pub fn random<R: Rng + ?Sized>(shape: LstmShape, rng: &mut R) -> Self {
        let mut w = Self::zeros(shape);
        let k = 1.0 / (shape.hidden as f64).sqrt();
        for p in w.params_mut() {
            p.iter_mut().for_each(|v| *v = rng.random_range(-k..k));
        }
        let h = shape.hidden;
        for layer in &mut w.layers {
            layer.b.slice_mut(s![h..2 * h]).fill(1.0);
        }
        w
    }

    pub fn shape(&self) -> LstmShape {
        LstmShape {
            input: self.layers.first().map_or(0, |l| l.input_dim()),
            hidden: self.layers.first().map_or(0, |l| l.hidden_dim()),
            layers: self.layers.len(),
            output: self.fc.w.nrows(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Checks that every tensor agrees with the first layer's dimensions.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(LstmError::DimensionMismatch("no LSTM layers".into()));
        }
        let h = self.layers[0].hidden_dim();
        for (k, l) in self.layers.iter().enumerate() {
            let d = if k == 0 { l.input_dim() } else { h };
            if l.w_x.dim() != (4 * h, d) || l.w_h.dim() != (4 * h, h) || l.b.len() != 4 * h {
                return Err(LstmError::DimensionMismatch(format!(
                    "layer {k} shapes inconsistent"
                )));
            }
        }
        if self.fc.w.ncols() != h || self.fc.b.len() != self.fc.w.nrows() {
            return Err(LstmError::DimensionMismatch(
                "output layer shapes inconsistent".into(),
            ));
        }
        Ok(())
    }

    /// All parameter tensors as flat slices, in file order.
    pub fn params(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(3 * self.layers.len() + 2);
        for l in &self.layers {
            out.push(l.w_x.as_slice().expect("standard layout"));
            out.push(l.w_h.as_slice().expect("standard layout"));
            out.push(l.b.as_slice().expect("standard layout"));
        }
        out.push(self.fc.w.as_slice().expect("standard layout"));
        out.push(self.fc.b.as_slice().expect("standard layout"));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(3 * self.layers.len() + 2);
        for l in &mut self.layers {
            out.push(l.w_x.as_slice_mut().expect("standard layout"));
            out.push(l.w_h.as_slice_mut().expect("standard layout"));
            out.push(l.b.as_slice_mut().expect("standard layout"));
        }
        out.push(self.fc.w.as_slice_mut().expect("standard layout"));
        out.push(self.fc.b.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn is_finite(&self) -> bool {
        self.params()
            .iter()
            .all(|p| p.iter().all(|v| v.is_finite()))
    }

    /// Swaps the two halves of the output layer, exchanging the roles of
    /// the first and second mask.
    pub fn swap_output_halves(&mut self) {
        let o = self.fc.w.nrows();
        assert!(o % 2 == 0, "output width must be even");
        let half = o / 2;
        for r in 0..half {
            for c in 0..self.fc.w.ncols() {
                self.fc.w.swap((r, c), (r + half, c));
            }
            self.fc.b.swap(r, r + half);
        }
    }
}

/// Per-layer hidden and cell vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<Array1<f64>>,
    pub c: Vec<Array1<f64>>,
}

impl LstmState {
    pub fn zeros(shape: LstmShape) -> Self {
        Self {
            h: vec![Array1::zeros(shape.hidden); shape.layers],
            c: vec![Array1::zeros(shape.hidden); shape.layers],
        }
    }

    pub fn reset(&mut self) {
        self.h.iter_mut().for_each(|v| v.fill(0.0));
        self.c.iter_mut().for_each(|v| v.fill(0.0));
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One LSTM recurrence step for a single layer.
pub fn lstm_cell_step(
    x: ArrayView1<'_, f64>,
    h: ArrayView1<'_, f64>,
    c: ArrayView1<'_, f64>,
    layer: &LstmLayer,
) -> Result<(Array1<f64>, Array1<f64>)> {
    let hd = layer.hidden_dim();
    if x.len() != layer.input_dim() || h.len() != hd || c.len() != hd {
        return Err(LstmError::DimensionMismatch(format!(
            "input {} / state {} vs layer {}x{}",
            x.len(),
            h.len(),
            layer.input_dim(),
            hd
        )));
    }
    let a = layer.w_x.dot(&x) + layer.w_h.dot(&h) + &layer.b;
    let mut h_new = Array1::zeros(hd);
    let mut c_new = Array1::zeros(hd);
    for j in 0..hd {
        let i = sigmoid(a[j]);
        let f = sigmoid(a[hd + j]);
        let g = a[2 * hd + j].tanh();
        let o = sigmoid(a[3 * hd + j]);
        c_new[j] = f * c[j] + i * g;
        h_new[j] = o * c_new[j].tanh();
    }
    if h_new.iter().chain(c_new.iter()).any(|v| !v.is_finite()) {
        return Err(LstmError::NumericFailure("non-finite LSTM state".into()));
    }
    Ok((h_new, c_new))
}

/// Runs one frame through all layers and the sigmoid output layer,
/// updating `state` in place.
pub fn network_step(
    frame: ArrayView1<'_, f64>,
    state: &mut LstmState,
    weights: &LstmWeights,
) -> Result<Array1<f64>> {
    let shape = weights.shape();
    if frame.len() != shape.input {
        return Err(LstmError::DimensionMismatch(format!(
            "frame has {} values, network expects {}",
            frame.len(),
            shape.input
        )));
    }
    if state.h.len() != shape.layers || state.h.iter().any(|h| h.len() != shape.hidden) {
        return Err(LstmError::DimensionMismatch(
            "state does not match network".into(),
        ));
    }
    let mut input = frame.to_owned();
    for (k, layer) in weights.layers.iter().enumerate() {
        let (h, c) = lstm_cell_step(input.view(), state.h[k].view(), state.c[k].view(), layer)?;
        state.h[k] = h;
        state.c[k] = c;
        input = state.h[k].clone();
    }
    let z = weights.fc.w.dot(&input) + &weights.fc.b;
    Ok(z.mapv(sigmoid))
}

/// Speech and noise masks for one magnitude frame.
pub fn mask_forward_step(
    magnitude_frame: ArrayView1<'_, f64>,
    state: &mut LstmState,
    weights: &LstmWeights,
) -> Result<(Array1<f64>, Array1<f64>)> {
    let out = network_step(magnitude_frame, state, weights)?;
    let half = out.len() / 2;
    if out.len() != 2 * magnitude_frame.len() {
        return Err(LstmError::DimensionMismatch(format!(
            "output width {} is not twice the input width {}",
            out.len(),
            magnitude_frame.len()
        )));
    }
    Ok((
        out.slice(s![..half]).to_owned(),
        out.slice(s![half..]).to_owned(),
    ))
}

fn put_tensor(out: &mut Vec<u8>, dims: &[usize], data: &[f64]) {
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn encode_weights(weights: &LstmWeights) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + 4 * weights.param_count() + 64 * weights.layers.len());
    out.extend_from_slice(WEIGHT_MAGIC);
    out.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
    out.extend_from_slice(&(weights.layers.len() as u16).to_le_bytes());
    for l in &weights.layers {
        put_tensor(
            &mut out,
            &[l.w_x.nrows(), l.w_x.ncols()],
            l.w_x.as_slice().expect("standard layout"),
        );
        put_tensor(
            &mut out,
            &[l.w_h.nrows(), l.w_h.ncols()],
            l.w_h.as_slice().expect("standard layout"),
        );
        put_tensor(
            &mut out,
            &[l.b.len()],
            l.b.as_slice().expect("standard layout"),
        );
    }
    let fc = &weights.fc;
    put_tensor(
        &mut out,
        &[fc.w.nrows(), fc.w.ncols()],
        fc.w.as_slice().expect("standard layout"),
    );
    put_tensor(
        &mut out,
        &[fc.b.len()],
        fc.b.as_slice().expect("standard layout"),
    );
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                LstmError::CorruptWeights(format!("unexpected end of file at byte {}", self.pos))
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn tensor(&mut self) -> Result<(Vec<usize>, Vec<f64>)> {
        let rank = self.take(1)?[0] as usize;
        if rank == 0 || rank > 2 {
            return Err(LstmError::CorruptWeights(format!("tensor rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let b = self.take(4)?;
            dims.push(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize);
        }
        let count = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let count = count
            .and_then(|c| c.checked_mul(4))
            .ok_or_else(|| LstmError::CorruptWeights("tensor too large".into()))?;
        let payload = self.take(count)?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        Ok((dims, data))
    }
}

fn matrix(dims: Vec<usize>, data: Vec<f64>, what: &str) -> Result<Array2<f64>> {
    if dims.len() != 2 {
        return Err(LstmError::CorruptWeights(format!("{what} must be rank 2")));
    }
    Array2::from_shape_vec((dims[0], dims[1]), data)
        .map_err(|e| LstmError::CorruptWeights(format!("{what}: {e}")))
}

fn vector(dims: Vec<usize>, data: Vec<f64>, what: &str) -> Result<Array1<f64>> {
    if dims.len() != 1 {
        return Err(LstmError::CorruptWeights(format!("{what} must be rank 1")));
    }
    Ok(Array1::from(data))
}

pub fn decode_weights(bytes: &[u8]) -> Result<LstmWeights> {
    if bytes.len() < 8 || &bytes[..6] != WEIGHT_MAGIC {
        return Err(LstmError::UnrecognizedFile);
    }
    if u16::from_le_bytes([bytes[6], bytes[7]]) != WEIGHT_VERSION {
        return Err(LstmError::UnrecognizedFile);
    }
    let mut r = Reader { bytes, pos: 8 };
    let lb = r.take(2)?;
    let n_layers = u16::from_le_bytes([lb[0], lb[1]]) as usize;
    if n_layers == 0 {
        return Err(LstmError::CorruptWeights("zero layers".into()));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for k in 0..n_layers {
        let (d, v) = r.tensor()?;
        let w_x = matrix(d, v, "W_x")?;
        let (d, v) = r.tensor()?;
        let w_h = matrix(d, v, "W_h")?;
        let (d, v) = r.tensor()?;
        let b = vector(d, v, "b")?;
        let layer = LstmLayer { w_x, w_h, b };
        let h = layer.hidden_dim();
        if layer.w_h.nrows() != 4 * h || layer.w_x.nrows() != 4 * h || layer.b.len() != 4 * h {
            return Err(LstmError::CorruptWeights(format!(
                "layer {k} gate dimensions"
            )));
        }
        layers.push(layer);
    }
    let (d, v) = r.tensor()?;
    let w = matrix(d, v, "fc W")?;
    let (d, v) = r.tensor()?;
    let b = vector(d, v, "fc b")?;
    if r.pos != bytes.len() {
        return Err(LstmError::CorruptWeights(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    let weights = LstmWeights {
        layers,
        fc: Dense { w, b },
    };
    weights
        .validate()
        .map_err(|e| LstmError::CorruptWeights(e.to_string()))?;
    Ok(weights)
}

pub fn save_weights(weights: &LstmWeights, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_weights(weights))?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<LstmWeights> {
    decode_weights(&fs::read(path)?)
}
