//! NICE-style normalizing flow.
//!
//! The transform is a stack of additive coupling layers followed by one
//! diagonal scaling layer, mapping a feature vector `v` to a latent `b` with a
//! standard normal base density:
//!
//! ```text
//! log p(v) = log N(b; 0, I) + sum_i s_i
//! ```
//!
//! Couplings hold one half of the (padded) vector fixed and shift the other
//! half by an MLP of the fixed half, so they are volume preserving and the
//! whole log-determinant lives in the scaling layer.
//!
//! Odd dimensions are padded with one zero coordinate. The pad is never
//! shifted and has no scale, so it stays zero and does not enter the density.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureVector, Standardizer};
use crate::io::{decode_framed, encode_framed, read_bytes, take_f64s, write_atomic};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;
pub const MODEL_MAGIC: &str = "TRAJMINE-FLOW-1";

/// Dot product with four independent accumulators.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Two-hidden-layer tanh perceptron with a linear output.
/// Weight matrices are row-major `out x in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub w3: Vec<f64>,
    pub b3: Vec<f64>,
}

impl Mlp {
    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Mlp {
            input,
            hidden,
            output,
            w1: vec![0.0; hidden * input],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden * hidden],
            b2: vec![0.0; hidden],
            w3: vec![0.0; output * hidden],
            b3: vec![0.0; output],
        }
    }

    /// Weights drawn from `N(0, 1/fan_in)`, zero biases.
    pub fn random(input: usize, hidden: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut m = Mlp::zeros(input, hidden, output);
        let mut fill = |w: &mut [f64], fan_in: usize| {
            let dist = Normal::new(0.0, 1.0 / (fan_in.max(1) as f64).sqrt()).expect("positive std");
            for x in w {
                *x = dist.sample(rng);
            }
        };
        fill(&mut m.w1, input);
        fill(&mut m.w2, hidden);
        fill(&mut m.w3, hidden);
        m
    }

    fn param_slices(&self) -> [&[f64]; 6] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3]
    }

    fn param_slices_mut(&mut self) -> [&mut [f64]; 6] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2, &mut self.w3, &mut self.b3]
    }

    pub fn param_count(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    /// Forward pass writing hidden activations into `h1`, `h2`.
    fn run(&self, x: &[f64], h1: &mut [f64], h2: &mut [f64], out: &mut [f64]) {
        let (i, h) = (self.input, self.hidden);
        for r in 0..h {
            h1[r] = (self.b1[r] + dot(&self.w1[r * i..(r + 1) * i], x)).tanh();
        }
        for r in 0..h {
            h2[r] = (self.b2[r] + dot(&self.w2[r * h..(r + 1) * h], h1)).tanh();
        }
        for r in 0..self.output {
            out[r] = self.b3[r] + dot(&self.w3[r * h..(r + 1) * h], h2);
        }
    }

    /// Accumulates parameter gradients into `grad` and writes `dL/dx` into
    /// `d_x` (overwritten), given `dL/d out`.
    #[allow(clippy::too_many_arguments)]
    fn backward(
        &self,
        x: &[f64],
        h1: &[f64],
        h2: &[f64],
        d_out: &[f64],
        grad: &mut Mlp,
        d_x: &mut [f64],
        scratch: &mut [f64],
    ) {
        let (i, h) = (self.input, self.hidden);
        let (d_h2, d_h1) = scratch.split_at_mut(h);
        d_h2.fill(0.0);
        for r in 0..self.output {
            let g = d_out[r];
            if g == 0.0 {
                continue;
            }
            grad.b3[r] += g;
            axpy(g, h2, &mut grad.w3[r * h..(r + 1) * h]);
            axpy(g, &self.w3[r * h..(r + 1) * h], d_h2);
        }
        for r in 0..h {
            d_h2[r] *= 1.0 - h2[r] * h2[r];
        }
        d_h1.fill(0.0);
        for r in 0..h {
            let g = d_h2[r];
            grad.b2[r] += g;
            axpy(g, h1, &mut grad.w2[r * h..(r + 1) * h]);
            axpy(g, &self.w2[r * h..(r + 1) * h], d_h1);
        }
        for r in 0..h {
            d_h1[r] *= 1.0 - h1[r] * h1[r];
        }
        d_x.fill(0.0);
        for r in 0..h {
            let g = d_h1[r];
            grad.b1[r] += g;
            axpy(g, x, &mut grad.w1[r * i..(r + 1) * i]);
            axpy(g, &self.w1[r * i..(r + 1) * i], d_x);
        }
    }
}

/// Which half of the padded vector a coupling layer holds fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parity {
    /// First half fixed, second half shifted.
    Even,
    /// Second half fixed, first half shifted.
    Odd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingLayer {
    pub parity: Parity,
    pub net: Mlp,
}

impl CouplingLayer {
    fn halves(&self, padded_dim: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let half = padded_dim / 2;
        match self.parity {
            Parity::Even => (0..half, half..padded_dim),
            Parity::Odd => (half..padded_dim, 0..half),
        }
    }
}

/// Per-dimension log scales `s`; `u_i -> u_i * exp(s_i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingLayer {
    pub log_scale: Vec<f64>,
}

impl ScalingLayer {
    pub fn log_det(&self) -> f64 {
        self.log_scale.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    pub coupling_layers: usize,
    pub hidden: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig { coupling_layers: 4, hidden: 64 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    pub dim: usize,
    pub layers: Vec<CouplingLayer>,
    pub scaling: ScalingLayer,
    /// Preprocessing applied by [`FlowModel::score`].
    pub standardizer: Option<Standardizer>,
}

/// Log-density of `b` under the standard normal.
pub fn standard_normal_log_density(b: &[f64]) -> f64 {
    let sq: f64 = b.iter().map(|x| x * x).sum();
    -0.5 * (b.len() as f64 * LN_2PI + sq)
}

/// Activations kept from a forward pass for the reverse pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    fixed: Vec<Vec<f64>>,
    h1: Vec<Vec<f64>>,
    h2: Vec<Vec<f64>>,
    pub latent: Vec<f64>,
    pub log_prob: f64,
}

/// Reusable buffers for the per-sample passes.
#[derive(Debug, Clone)]
pub struct Workspace {
    u: Vec<f64>,
    shift: Vec<f64>,
    g: Vec<f64>,
    d_out: Vec<f64>,
    d_x: Vec<f64>,
    scratch: Vec<f64>,
    trace: ForwardTrace,
}

impl FlowModel {
    fn check_config(dim: usize, cfg: &FlowConfig) -> Result<()> {
        if dim == 0 {
            return Err(Error::Config("flow dimension must be positive".into()));
        }
        if cfg.coupling_layers > 0 && cfg.hidden == 0 {
            return Err(Error::Config("hidden width must be positive".into()));
        }
        Ok(())
    }

    fn build(dim: usize, cfg: &FlowConfig, mut net: impl FnMut(usize, usize, usize) -> Mlp) -> Self {
        let half = dim.div_ceil(2);
        let layers = (0..cfg.coupling_layers)
            .map(|l| CouplingLayer {
                parity: if l % 2 == 0 { Parity::Even } else { Parity::Odd },
                net: net(half, cfg.hidden, half),
            })
            .collect();
        FlowModel { dim, layers, scaling: ScalingLayer { log_scale: vec![0.0; dim] }, standardizer: None }
    }

    /// All parameters zero: the identity map.
    pub fn identity(dim: usize, cfg: &FlowConfig) -> Result<Self> {
        Self::check_config(dim, cfg)?;
        Ok(Self::build(dim, cfg, Mlp::zeros))
    }

    /// Seeded initialization: coupling weights `N(0, 1/fan_in)`, zero biases
    /// and zero log scales.
    pub fn random(dim: usize, cfg: &FlowConfig, seed: u64) -> Result<Self> {
        Self::check_config(dim, cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self::build(dim, cfg, |i, h, o| Mlp::random(i, h, o, &mut rng)))
    }

    /// Dimension after padding to an even count.
    pub fn padded_dim(&self) -> usize {
        self.dim + self.dim % 2
    }

    pub fn config(&self) -> FlowConfig {
        FlowConfig {
            coupling_layers: self.layers.len(),
            hidden: self.layers.first().map_or(0, |l| l.net.hidden),
        }
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.dim {
            return Err(Error::Config(format!("vector of length {len} given to a {}-dimensional flow", self.dim)));
        }
        Ok(())
    }

    /// `b = h(v)` and `log |det dh/dv|`.
    pub fn forward(&self, v: &[f64]) -> Result<(Vec<f64>, f64)> {
        let mut ws = self.workspace();
        self.trace_into(v, &mut ws)?;
        Ok((ws.trace.latent.clone(), self.scaling.log_det()))
    }

    /// `v = h^{-1}(b)`.
    pub fn inverse(&self, b: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(b.len())?;
        let pd = self.padded_dim();
        let mut u = vec![0.0; pd];
        for i in 0..self.dim {
            u[i] = b[i] * (-self.scaling.log_scale[i]).exp();
        }
        let h = self.layers.first().map_or(0, |l| l.net.hidden);
        let (mut h1, mut h2, mut shift) = (vec![0.0; h], vec![0.0; h], vec![0.0; pd / 2]);
        for layer in self.layers.iter().rev() {
            let (fixed, moved) = layer.halves(pd);
            layer.net.run(&u[fixed], &mut h1, &mut h2, &mut shift);
            for (j, i) in moved.enumerate() {
                if i < self.dim {
                    u[i] -= shift[j];
                }
            }
        }
        u.truncate(self.dim);
        if u.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("non-finite value in inverse flow".into()));
        }
        Ok(u)
    }

    /// Exact log-density of an already standardized vector.
    pub fn log_prob(&self, v: &[f64]) -> Result<f64> {
        let mut ws = self.workspace();
        self.trace_into(v, &mut ws)
    }

    /// Standardizes a raw feature vector (when a standardizer is attached)
    /// and returns its log-density.
    pub fn score(&self, v: &FeatureVector) -> Result<f64> {
        match &self.standardizer {
            Some(s) => self.log_prob(&s.apply(v)?),
            None => self.log_prob(&v.values),
        }
    }

    /// Draws `n` samples; returns `(samples, latents)`.
    pub fn sample_with_latents(&self, n: usize, seed: u64) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut samples = Vec::with_capacity(n);
        let mut latents = Vec::with_capacity(n);
        for _ in 0..n {
            let b: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            samples.push(self.inverse(&b)?);
            latents.push(b);
        }
        Ok((samples, latents))
    }

    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        if n == 0 {
            return Err(Error::Argument("sample count must be at least 1".into()));
        }
        Ok(self.sample_with_latents(n, seed)?.0)
    }

    pub fn workspace(&self) -> Workspace {
        let pd = self.padded_dim();
        let h = self.layers.first().map_or(0, |l| l.net.hidden);
        let nl = self.layers.len();
        Workspace {
            u: vec![0.0; pd],
            shift: vec![0.0; pd / 2],
            g: vec![0.0; pd],
            d_out: vec![0.0; pd / 2],
            d_x: vec![0.0; pd / 2],
            scratch: vec![0.0; 2 * h],
            trace: ForwardTrace {
                fixed: vec![vec![0.0; pd / 2]; nl],
                h1: vec![vec![0.0; h]; nl],
                h2: vec![vec![0.0; h]; nl],
                latent: vec![0.0; self.dim],
                log_prob: 0.0,
            },
        }
    }

    /// Forward pass recording everything the reverse pass needs. This is the
    /// only forward implementation, so training losses and `log_prob` agree
    /// bit for bit.
    pub(crate) fn trace_into(&self, v: &[f64], ws: &mut Workspace) -> Result<f64> {
        self.check_dim(v.len())?;
        let pd = self.padded_dim();
        ws.u[..self.dim].copy_from_slice(v);
        ws.u[self.dim..].fill(0.0);
        for (l, layer) in self.layers.iter().enumerate() {
            let (fixed, moved) = layer.halves(pd);
            ws.trace.fixed[l].copy_from_slice(&ws.u[fixed]);
            layer
                .net
                .run(&ws.trace.fixed[l], &mut ws.trace.h1[l], &mut ws.trace.h2[l], &mut ws.shift);
            for (j, i) in moved.enumerate() {
                if i < self.dim {
                    ws.u[i] += ws.shift[j];
                }
            }
        }
        for i in 0..self.dim {
            ws.trace.latent[i] = ws.u[i] * self.scaling.log_scale[i].exp();
        }
        let lp = standard_normal_log_density(&ws.trace.latent) + self.scaling.log_det();
        if !lp.is_finite() {
            return Err(Error::Numeric("non-finite log-density".into()));
        }
        ws.trace.log_prob = lp;
        Ok(lp)
    }

    /// Adds `weight * d(-log p(v))/d theta` to `grad` (a model of identical
    /// shape). Requires a preceding [`FlowModel::trace_into`] on `ws` for the
    /// same `v`.
    pub(crate) fn backprop_into(&self, weight: f64, ws: &mut Workspace, grad: &mut FlowModel) {
        let pd = self.padded_dim();
        let b = &ws.trace.latent;
        ws.g.fill(0.0);
        for i in 0..self.dim {
            let s = self.scaling.log_scale[i];
            grad.scaling.log_scale[i] += weight * (b[i] * b[i] - 1.0);
            ws.g[i] = weight * b[i] * s.exp();
        }
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let (fixed, moved) = layer.halves(pd);
            for (j, i) in moved.enumerate() {
                ws.d_out[j] = if i < self.dim { ws.g[i] } else { 0.0 };
            }
            layer.net.backward(
                &ws.trace.fixed[l],
                &ws.trace.h1[l],
                &ws.trace.h2[l],
                &ws.d_out,
                &mut grad.layers[l].net,
                &mut ws.d_x,
                &mut ws.scratch,
            );
            for (j, i) in fixed.enumerate() {
                ws.g[i] += ws.d_x[j];
            }
        }
    }

    /// Same architecture, all parameters zero.
    pub fn zeros_like(&self) -> FlowModel {
        FlowModel {
            dim: self.dim,
            layers: self
                .layers
                .iter()
                .map(|l| CouplingLayer { parity: l.parity, net: Mlp::zeros(l.net.input, l.net.hidden, l.net.output) })
                .collect(),
            scaling: ScalingLayer { log_scale: vec![0.0; self.dim] },
            standardizer: None,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.net.param_count()).sum::<usize>() + self.dim
    }

    /// Parameters in canonical order: per coupling layer `w1 b1 w2 b2 w3 b3`,
    /// then the log scales.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            for s in l.net.param_slices() {
                out.extend_from_slice(s);
            }
        }
        out.extend_from_slice(&self.scaling.log_scale);
        out
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::Config(format!("{} parameters given, model has {}", params.len(), self.param_count())));
        }
        let mut at = 0;
        for l in &mut self.layers {
            for s in l.net.param_slices_mut() {
                s.copy_from_slice(&params[at..at + s.len()]);
                at += s.len();
            }
        }
        self.scaling.log_scale.copy_from_slice(&params[at..]);
        Ok(())
    }

    /// Human-readable location of flat parameter `idx`, e.g. `coupling[1].w2[17]`.
    pub fn param_path(&self, mut idx: usize) -> String {
        const NAMES: [&str; 6] = ["w1", "b1", "w2", "b2", "w3", "b3"];
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, s) in NAMES.iter().zip(layer.net.param_slices()) {
                if idx < s.len() {
                    return format!("coupling[{l}].{name}[{idx}]");
                }
                idx -= s.len();
            }
        }
        format!("log_scale[{idx}]")
    }

    pub fn to_bytes(&self, config_hash: &str) -> Result<Vec<u8>> {
        let header = ModelHeader {
            dim: self.dim,
            coupling_layers: self.layers.len(),
            hidden: self.config().hidden,
            parity_order: self.layers.iter().map(|l| l.parity).collect(),
            standardizer: self.standardizer.clone(),
            config_hash: config_hash.to_string(),
        };
        encode_framed(MODEL_MAGIC, &header, &self.flat_params(), &[])
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, String)> {
        let (h, rest): (ModelHeader, _) = decode_framed(MODEL_MAGIC, bytes)?;
        if h.parity_order.len() != h.coupling_layers {
            return Err(Error::Schema(format!("{MODEL_MAGIC}: parity order does not match layer count")));
        }
        let cfg = FlowConfig { coupling_layers: h.coupling_layers, hidden: h.hidden };
        let mut model = FlowModel::identity(h.dim, &cfg)?;
        for (layer, parity) in model.layers.iter_mut().zip(&h.parity_order) {
            layer.parity = *parity;
        }
        let (params, tail) = take_f64s(rest, model.param_count())?;
        if !tail.is_empty() {
            return Err(Error::Schema(format!("{MODEL_MAGIC}: {} trailing bytes", tail.len())));
        }
        model.set_flat_params(&params)?;
        if let Some(s) = &h.standardizer {
            if s.dim() != h.dim {
                return Err(Error::Schema(format!("{MODEL_MAGIC}: standardizer dimension {} != {}", s.dim(), h.dim)));
            }
        }
        model.standardizer = h.standardizer;
        Ok((model, h.config_hash))
    }

    pub fn save(&self, path: &Path, config_hash: &str) -> Result<()> {
        write_atomic(path, &self.to_bytes(config_hash)?)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        Self::from_bytes(&read_bytes(path)?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelHeader {
    dim: usize,
    coupling_layers: usize,
    hidden: usize,
    parity_order: Vec<Parity>,
    standardizer: Option<Standardizer>,
    config_hash: String,
}

/// Applies one coupling layer on its own.
pub fn coupling_forward(layer: &CouplingLayer, v: &[f64]) -> Result<Vec<f64>> {
    coupling_apply(layer, v, 1.0)
}

/// Exact inverse of [`coupling_forward`].
pub fn coupling_inverse(layer: &CouplingLayer, u: &[f64]) -> Result<Vec<f64>> {
    coupling_apply(layer, u, -1.0)
}

fn coupling_apply(layer: &CouplingLayer, v: &[f64], sign: f64) -> Result<Vec<f64>> {
    let dim = v.len();
    let pd = dim + dim % 2;
    if layer.net.input != pd / 2 || layer.net.output != pd / 2 {
        return Err(Error::Config(format!(
            "coupling net {}->{} does not fit a {dim}-vector",
            layer.net.input, layer.net.output
        )));
    }
    let mut u = v.to_vec();
    u.resize(pd, 0.0);
    let (fixed, moved) = layer.halves(pd);
    let h = layer.net.hidden;
    let (mut h1, mut h2, mut shift) = (vec![0.0; h], vec![0.0; h], vec![0.0; pd / 2]);
    let x = u[fixed].to_vec();
    layer.net.run(&x, &mut h1, &mut h2, &mut shift);
    for (j, i) in moved.enumerate() {
        if i < dim {
            u[i] += sign * shift[j];
        }
    }
    u.truncate(dim);
    Ok(u)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(layers: usize, hidden: usize) -> FlowConfig {
        FlowConfig { coupling_layers: layers, hidden }
    }

    #[test]
    fn zero_net_coupling_is_identity() {
        let layer = CouplingLayer { parity: Parity::Even, net: Mlp::zeros(2, 8, 2) };
        let v = [0.3, -1.2, 2.0, 0.7];
        assert_eq!(coupling_forward(&layer, &v).unwrap(), v.to_vec());
        assert_eq!(coupling_inverse(&layer, &v).unwrap(), v.to_vec());
    }

    #[test]
    fn constant_net_shifts_moved_half() {
        let mut net = Mlp::zeros(1, 4, 1);
        net.b3[0] = 0.75;
        let layer = CouplingLayer { parity: Parity::Even, net };
        assert_eq!(coupling_forward(&layer, &[1.0, 2.0]).unwrap(), vec![1.0, 2.75]);
        assert_eq!(coupling_inverse(&layer, &[1.0, 2.75]).unwrap(), vec![1.0, 2.0]);
        let odd = CouplingLayer { parity: Parity::Odd, ..layer };
        assert_eq!(coupling_forward(&odd, &[1.0, 2.0]).unwrap(), vec![1.75, 2.0]);
    }

    #[test]
    fn coupling_dimension_mismatch() {
        let layer = CouplingLayer { parity: Parity::Even, net: Mlp::zeros(2, 4, 2) };
        assert!(coupling_forward(&layer, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn identity_flow_closed_forms() {
        let m = FlowModel::identity(2, &cfg(4, 8)).unwrap();
        let (b, ld) = m.forward(&[0.4, -0.1]).unwrap();
        assert_eq!((b, ld), (vec![0.4, -0.1], 0.0));
        assert!((m.log_prob(&[0.0, 0.0]).unwrap() + LN_2PI).abs() < 1e-12);
        assert!((m.log_prob(&[0.0, 0.0]).unwrap() - -1.837877).abs() < 1e-6);

        let m1 = FlowModel::identity(1, &cfg(2, 4)).unwrap();
        assert!((m1.log_prob(&[1.0]).unwrap() - -1.418939).abs() < 1e-6);
    }

    #[test]
    fn scaling_only_model() {
        let mut m = FlowModel::identity(2, &cfg(0, 0)).unwrap();
        m.scaling.log_scale = vec![2f64.ln(), 2f64.ln()];
        let (b, ld) = m.forward(&[1.0, 1.0]).unwrap();
        assert!((b[0] - 2.0).abs() < 1e-15 && (b[1] - 2.0).abs() < 1e-15);
        assert!((ld - 2.0 * 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn log_det_ignores_coupling_parameters() {
        let mut m = FlowModel::random(6, &cfg(4, 16), 3).unwrap();
        m.scaling.log_scale = vec![0.1, -0.2, 0.3, 0.0, 0.5, -0.4];
        let (_, ld) = m.forward(&[0.5; 6]).unwrap();
        assert_eq!(ld, m.scaling.log_scale.iter().sum::<f64>());
    }

    #[test]
    fn odd_dimension_pads_and_inverts() {
        let mut m = FlowModel::random(5, &cfg(3, 8), 9).unwrap();
        m.scaling.log_scale = vec![0.2, -0.1, 0.0, 0.3, 0.1];
        let v = [0.3, -1.0, 0.8, 2.0, -0.6];
        let (b, _) = m.forward(&v).unwrap();
        let back = m.inverse(&b).unwrap();
        for (a, c) in back.iter().zip(v) {
            assert!((a - c).abs() < 1e-12);
        }
    }

    #[test]
    fn samples_recover_latents_and_are_deterministic() {
        let m = FlowModel::random(4, &cfg(4, 8), 1).unwrap();
        let (xs, bs) = m.sample_with_latents(50, 7).unwrap();
        for (x, b) in xs.iter().zip(&bs) {
            let (b2, _) = m.forward(x).unwrap();
            for (p, q) in b2.iter().zip(b) {
                assert!((p - q).abs() < 1e-10);
            }
        }
        assert_eq!(m.sample(5, 7).unwrap(), m.sample(5, 7).unwrap());
        assert!(m.sample(0, 7).is_err());
    }

    #[test]
    fn identity_samples_are_standard_normal() {
        let m = FlowModel::identity(2, &cfg(2, 4)).unwrap();
        let n = 100_000;
        let xs = m.sample(n, 11).unwrap();
        for d in 0..2 {
            let mean = xs.iter().map(|x| x[d]).sum::<f64>() / n as f64;
            // 3 sigma / sqrt(n) is about 0.0095
            assert!(mean.abs() < 0.02, "{mean}");
        }
    }

    #[test]
    fn model_file_roundtrip() {
        let mut m = FlowModel::random(6, &cfg(2, 8), 4).unwrap();
        m.standardizer = Some(Standardizer { mean: vec![0.5; 6], std: vec![2.0; 6] });
        let bytes = m.to_bytes("cafe").unwrap();
        assert!(bytes.starts_with(MODEL_MAGIC.as_bytes()));
        let (back, hash) = FlowModel::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(hash, "cafe");
    }

    #[test]
    fn wrong_dimension_is_an_error() {
        let m = FlowModel::identity(4, &cfg(2, 4)).unwrap();
        assert!(m.log_prob(&[1.0, 2.0]).is_err());
        assert!(m.inverse(&[1.0]).is_err());
    }

    #[test]
    fn param_paths() {
        let m = FlowModel::identity(4, &cfg(1, 3)).unwrap();
        assert_eq!(m.param_path(0), "coupling[0].w1[0]");
        assert_eq!(m.param_path(6), "coupling[0].b1[0]");
        assert_eq!(m.param_path(m.param_count() - 1), "log_scale[3]");
        assert_eq!(m.flat_params().len(), m.param_count());
    }
}
