//! Small dense feed-forward networks (tanh hidden layers, linear output)
//! with exact reverse-mode gradients, Adam, and a flat-vector parameter
//! layout so optimizer state and serialization stay trivial.
//!
//! The networks here are deliberately tiny (a handful of layers, widths in
//! the tens). Everything operates on row-major batches of `f64`, and the
//! dense kernels are written so rustc autovectorizes them; no BLAS needed.

pub mod math;

mod adam;
pub use adam::Adam;

use rand_core::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("flat weight vector has length {got}, architecture needs {expected}")]
    WeightLen { expected: usize, got: usize },
    #[error("snapshot is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
}

/// Network shape: `input -> width x depth (tanh) -> output (linear)`.
/// `depth` counts hidden layers; `depth = 0` is a plain linear map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub input: usize,
    pub width: usize,
    pub depth: usize,
    pub output: usize,
}

impl Arch {
    pub fn new(input: usize, width: usize, depth: usize, output: usize) -> Result<Self, NnError> {
        let arch = Arch { input, width, depth, output };
        arch.validate()?;
        Ok(arch)
    }

    fn validate(&self) -> Result<(), NnError> {
        if self.input == 0 || self.output == 0 {
            return Err(NnError::InvalidArch(format!(
                "input and output dims must be positive, got {} -> {}",
                self.input, self.output
            )));
        }
        if self.depth > 0 && self.width == 0 {
            return Err(NnError::InvalidArch(
                "hidden width must be positive when depth > 0".into(),
            ));
        }
        Ok(())
    }

    /// Per-layer dimensions: `[input, width, ..., width, output]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = Vec::with_capacity(self.depth + 2);
        d.push(self.input);
        d.extend(std::iter::repeat(self.width).take(self.depth));
        d.push(self.output);
        d
    }

    /// Total parameter count across all weight matrices and bias vectors.
    pub fn n_params(&self) -> usize {
        let d = self.dims();
        (0..d.len() - 1).map(|l| d[l] * d[l + 1] + d[l + 1]).sum()
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerView {
    w_off: usize,
    b_off: usize,
    din: usize,
    dout: usize,
}

/// Activations recorded during a batch forward pass, needed by `backward`.
pub struct BatchCache {
    rows: usize,
    /// Post-tanh activations per hidden layer, each `rows x width`.
    hidden: Vec<Vec<f64>>,
    /// Final linear outputs, `rows x output`.
    pub out: Vec<f64>,
}

/// Reusable buffers for inference-only forward passes.
#[derive(Default)]
pub struct Scratch {
    ping: Vec<f64>,
    pong: Vec<f64>,
}

/// Dense feed-forward network. Parameters live in one flat `Vec<f64>`
/// laid out layer by layer as `[W_0 row-major, b_0, W_1, b_1, ...]`.
#[derive(Clone, Debug)]
pub struct Mlp {
    arch: Arch,
    params: Vec<f64>,
    layers: Vec<LayerView>,
}

impl Mlp {
    /// Fresh network with weights uniform on `[-1/sqrt(fan_in), +1/sqrt(fan_in)]`
    /// and zero biases. Weights are drawn row-major, layer by layer, so the
    /// initialization is a pure function of the RNG stream.
    pub fn new(arch: Arch, rng: &mut impl RngCore) -> Result<Self, NnError> {
        arch.validate()?;
        let layers = Self::layer_views(&arch);
        let mut params = vec![0.0; arch.n_params()];
        for lv in &layers {
            let bound = 1.0 / (lv.din as f64).sqrt();
            for w in &mut params[lv.w_off..lv.w_off + lv.din * lv.dout] {
                *w = (unit_f64(rng) * 2.0 - 1.0) * bound;
            }
            // biases already zero
        }
        Ok(Mlp { arch, params, layers })
    }

    /// Network from an existing flat parameter vector (inverse of `flatten`).
    pub fn from_flat(arch: Arch, params: Vec<f64>) -> Result<Self, NnError> {
        arch.validate()?;
        let expected = arch.n_params();
        if params.len() != expected {
            return Err(NnError::WeightLen { expected, got: params.len() });
        }
        let layers = Self::layer_views(&arch);
        Ok(Mlp { arch, params, layers })
    }

    fn layer_views(arch: &Arch) -> Vec<LayerView> {
        let dims = arch.dims();
        let mut views = Vec::with_capacity(dims.len() - 1);
        let mut off = 0;
        for l in 0..dims.len() - 1 {
            let (din, dout) = (dims[l], dims[l + 1]);
            views.push(LayerView { w_off: off, b_off: off + din * dout, din, dout });
            off += din * dout + dout;
        }
        views
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Flat parameter vector; `Mlp::from_flat(arch, flatten())` is the
    /// bit-exact inverse.
    pub fn flatten(&self) -> Vec<f64> {
        self.params.clone()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// One dense layer over a row-major batch: `out = act(x W^T + b)`.
    fn dense(&self, lv: &LayerView, inp: &[f64], rows: usize, tanh: bool, out: &mut [f64]) {
        debug_assert_eq!(inp.len(), rows * lv.din);
        debug_assert_eq!(out.len(), rows * lv.dout);
        let w = &self.params[lv.w_off..lv.w_off + lv.din * lv.dout];
        let b = &self.params[lv.b_off..lv.b_off + lv.dout];
        for r in 0..rows {
            let x = &inp[r * lv.din..(r + 1) * lv.din];
            let o = &mut out[r * lv.dout..(r + 1) * lv.dout];
            for (j, oj) in o.iter_mut().enumerate() {
                let wrow = &w[j * lv.din..(j + 1) * lv.din];
                let mut s = b[j];
                for k in 0..lv.din {
                    s += wrow[k] * x[k];
                }
                *oj = if tanh { math::fast_tanh(s) } else { s };
            }
        }
    }

    /// Forward pass for a single input row.
    pub fn forward_one(&self, x: &[f64], out: &mut [f64]) {
        let mut scratch = Scratch::default();
        let mut o = Vec::new();
        self.forward_scratch(x, 1, &mut scratch, &mut o);
        out.copy_from_slice(&o);
    }

    /// Inference-only batch forward. `xs` is row-major `rows x input`;
    /// `out` is resized to `rows x output`. Buffers in `scratch` are reused
    /// across calls to avoid per-call allocation.
    pub fn forward_scratch(&self, xs: &[f64], rows: usize, scratch: &mut Scratch, out: &mut Vec<f64>) {
        assert_eq!(xs.len(), rows * self.arch.input, "input batch has wrong length");
        let last = self.layers.len() - 1;
        if last == 0 {
            out.resize(rows * self.arch.output, 0.0);
            self.dense(&self.layers[0], xs, rows, false, out);
            return;
        }
        scratch.ping.resize(rows * self.arch.width, 0.0);
        self.dense(&self.layers[0], xs, rows, true, &mut scratch.ping);
        for l in 1..last {
            scratch.pong.resize(rows * self.arch.width, 0.0);
            self.dense(&self.layers[l], &scratch.ping, rows, true, &mut scratch.pong);
            std::mem::swap(&mut scratch.ping, &mut scratch.pong);
        }
        out.resize(rows * self.arch.output, 0.0);
        self.dense(&self.layers[last], &scratch.ping, rows, false, out);
    }

    /// Batch forward that records hidden activations for `backward`.
    pub fn forward_cached(&self, xs: &[f64], rows: usize) -> BatchCache {
        assert_eq!(xs.len(), rows * self.arch.input, "input batch has wrong length");
        let last = self.layers.len() - 1;
        let mut hidden: Vec<Vec<f64>> = Vec::with_capacity(self.arch.depth);
        let mut prev: &[f64] = xs;
        for l in 0..last {
            let lv = &self.layers[l];
            let mut a = vec![0.0; rows * lv.dout];
            self.dense(lv, prev, rows, true, &mut a);
            hidden.push(a);
            prev = hidden.last().unwrap();
        }
        let lv = &self.layers[last];
        let mut out = vec![0.0; rows * lv.dout];
        self.dense(lv, prev, rows, false, &mut out);
        BatchCache { rows, hidden, out }
    }

    /// Exact reverse-mode gradient accumulation.
    ///
    /// `upstream` is dL/d(output), row-major `rows x output`, for the same
    /// batch `xs` that produced `cache`. Parameter gradients are **added**
    /// into `grads`, which must have `n_params()` entries and the same flat
    /// layout as `flatten()`.
    pub fn backward(&self, xs: &[f64], cache: &BatchCache, upstream: &[f64], grads: &mut [f64]) {
        let rows = cache.rows;
        assert_eq!(xs.len(), rows * self.arch.input, "input batch has wrong length");
        assert_eq!(upstream.len(), rows * self.arch.output, "upstream has wrong length");
        assert_eq!(grads.len(), self.params.len(), "grad buffer has wrong length");

        let last = self.layers.len() - 1;
        let mut delta = upstream.to_vec();
        for l in (0..=last).rev() {
            let lv = &self.layers[l];
            let prev: &[f64] = if l == 0 { xs } else { &cache.hidden[l - 1] };
            let (gw, gb) = {
                let (a, rest) = grads[lv.w_off..].split_at_mut(lv.din * lv.dout);
                (a, &mut rest[..lv.dout])
            };
            let w = &self.params[lv.w_off..lv.w_off + lv.din * lv.dout];
            let mut dprev = if l > 0 { vec![0.0; rows * lv.din] } else { Vec::new() };
            for r in 0..rows {
                let drow = &delta[r * lv.dout..(r + 1) * lv.dout];
                let prow = &prev[r * lv.din..(r + 1) * lv.din];
                for j in 0..lv.dout {
                    let d = drow[j];
                    if d == 0.0 {
                        continue;
                    }
                    gb[j] += d;
                    let gwrow = &mut gw[j * lv.din..(j + 1) * lv.din];
                    for k in 0..lv.din {
                        gwrow[k] += d * prow[k];
                    }
                    if l > 0 {
                        let wrow = &w[j * lv.din..(j + 1) * lv.din];
                        let dp = &mut dprev[r * lv.din..(r + 1) * lv.din];
                        for k in 0..lv.din {
                            dp[k] += d * wrow[k];
                        }
                    }
                }
            }
            if l > 0 {
                // chain through tanh: a' = 1 - a^2 with a the stored activation
                let a = &cache.hidden[l - 1];
                for (dp, &av) in dprev.iter_mut().zip(a.iter()) {
                    *dp *= 1.0 - av * av;
                }
                delta = dprev;
            }
        }
    }

    /// Serialize as `{"arch": {...}, "flat_weights": [...]}`.
    pub fn to_json(&self) -> String {
        let snap = Snapshot { arch: self.arch, flat_weights: self.params.clone() };
        serde_json::to_string(&snap).expect("snapshot serialization cannot fail")
    }

    /// Inverse of `to_json`; validates the weight count against the arch.
    pub fn from_json(s: &str) -> Result<Self, NnError> {
        let snap: Snapshot = serde_json::from_str(s)?;
        Mlp::from_flat(snap.arch, snap.flat_weights)
    }
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    arch: Arch,
    flat_weights: Vec<f64>,
}

/// Uniform in [0,1) with 53 random bits.
#[inline]
fn unit_f64(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
