//! Transforms between keypoint coordinates and per-joint heatmaps.
//!
//! Coordinates are `(x, y)` in heatmap-grid units: cell `(col, row)` has its
//! center at `x = col`, `y = row`. Channels of invisible joints are all zero
//! on encode and are ignored by every loss and metric downstream.

use autograd::{Function, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `K` joint positions with per-joint visibility.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    coords: Vec<[f64; 2]>,
    visible: Vec<bool>,
}

impl KeypointSet {
    pub fn new(coords: Vec<[f64; 2]>, visible: Vec<bool>) -> Result<Self> {
        if coords.len() != visible.len() {
            return Err(Error::Shape(format!("{} coordinates but {} visibility flags", coords.len(), visible.len())));
        }
        if let Some(j) = coords.iter().position(|c| !c[0].is_finite() || !c[1].is_finite()) {
            return Err(Error::Shape(format!("joint {j} has a non-finite coordinate")));
        }
        Ok(Self { coords, visible })
    }

    pub fn all_visible(coords: Vec<[f64; 2]>) -> Result<Self> {
        let visible = vec![true; coords.len()];
        Self::new(coords, visible)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    pub fn visible(&self) -> &[bool] {
        &self.visible
    }

    pub fn visible_count(&self) -> usize {
        self.visible.iter().filter(|&&v| v).count()
    }

    /// Every coordinate multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self { coords: self.coords.iter().map(|c| [c[0] * factor, c[1] * factor]).collect(), visible: self.visible.clone() }
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self { coords: self.coords.iter().map(|c| [c[0] + dx, c[1] + dy]).collect(), visible: self.visible.clone() }
    }
}

/// `K x H' x W'` heatmaps, one channel per joint.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapStack {
    values: Tensor,
    peak_amplitude: f64,
}

impl HeatmapStack {
    /// Wraps a `[K, H', W']` tensor.
    pub fn new(values: Tensor, peak_amplitude: f64) -> Result<Self> {
        if values.shape().len() != 3 {
            return Err(Error::Shape(format!("heatmap stack must be [K, H, W], got {:?}", values.shape())));
        }
        Ok(Self { values, peak_amplitude })
    }

    /// Channel `index` of a `[B, K, H', W']` batch.
    pub fn from_batch(batch: &Tensor, index: usize) -> Result<Self> {
        if batch.shape().len() != 4 || index >= batch.shape()[0] {
            return Err(Error::Shape(format!("cannot take sample {index} of {:?}", batch.shape())));
        }
        Self::new(batch.slice_outer(index), 1.0)
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }

    pub fn peak_amplitude(&self) -> f64 {
        self.peak_amplitude
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    /// `(height, width)`.
    pub fn size(&self) -> (usize, usize) {
        (self.values.shape()[1], self.values.shape()[2])
    }

    pub fn channel(&self, k: usize) -> &[f64] {
        let (h, w) = self.size();
        &self.values.data()[k * h * w..(k + 1) * h * w]
    }

    /// Shifts every channel by integer offsets, filling vacated cells with zero.
    pub fn shifted(&self, dx: isize, dy: isize) -> Self {
        let (h, w) = self.size();
        let mut out = Tensor::zeros(self.values.shape().to_vec());
        for k in 0..self.channels() {
            let src = self.channel(k);
            let dst = &mut out.data_mut()[k * h * w..(k + 1) * h * w];
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let (sx, sy) = (x - dx, y - dy);
                    if sx >= 0 && sy >= 0 && (sx as usize) < w && (sy as usize) < h {
                        dst[y as usize * w + x as usize] = src[sy as usize * w + sx as usize];
                    }
                }
            }
        }
        Self { values: out, peak_amplitude: self.peak_amplitude }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecConfig {
    /// Gaussian standard deviation in heatmap cells.
    pub sigma: f64,
    pub soft_argmax_temperature: f64,
    /// `(H', W')`.
    pub heatmap_size: (usize, usize),
    pub peak_amplitude: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self { sigma: 2.0, soft_argmax_temperature: 0.1, heatmap_size: (16, 16), peak_amplitude: 1.0 }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::Config(format!("codec.sigma must be positive, got {}", self.sigma)));
        }
        if !(self.soft_argmax_temperature > 0.0) {
            return Err(Error::Config(format!(
                "codec.soft_argmax_temperature must be positive, got {}",
                self.soft_argmax_temperature
            )));
        }
        if !(self.peak_amplitude > 0.0) {
            return Err(Error::Config("codec.peak_amplitude must be positive".into()));
        }
        if self.heatmap_size.0 == 0 || self.heatmap_size.1 == 0 {
            return Err(Error::Config("codec.heatmap_size must be non-zero".into()));
        }
        Ok(())
    }
}

fn check_bounds(keypoints: &KeypointSet, h: usize, w: usize) -> Result<()> {
    for (j, (c, &vis)) in keypoints.coords.iter().zip(&keypoints.visible).enumerate() {
        if vis && !(c[0] >= 0.0 && c[0] < w as f64 && c[1] >= 0.0 && c[1] < h as f64) {
            return Err(Error::OutOfBounds { joint: j, x: c[0], y: c[1], width: w, height: h });
        }
    }
    Ok(())
}

fn encode_into(keypoints: &KeypointSet, cfg: &CodecConfig, out: &mut [f64]) {
    let (h, w) = cfg.heatmap_size;
    let inv = 1.0 / (2.0 * cfg.sigma * cfg.sigma);
    for (k, (c, &vis)) in keypoints.coords.iter().zip(&keypoints.visible).enumerate() {
        let channel = &mut out[k * h * w..(k + 1) * h * w];
        if !vis {
            channel.fill(0.0);
            continue;
        }
        // Each separable factor is scaled to peak at exactly 1 on the nearest cell.
        let factor = |n: usize, center: f64| {
            let g: Vec<f64> = (0..n).map(|i| (-(i as f64 - center).powi(2) * inv).exp()).collect();
            let max = g.iter().cloned().fold(0.0, f64::max);
            g.into_iter().map(|v| v / max).collect::<Vec<f64>>()
        };
        let (gx, gy) = (factor(w, c[0]), factor(h, c[1]));
        for (y, row) in channel.chunks_mut(w).enumerate() {
            for (x, v) in row.iter_mut().enumerate() {
                *v = gx[x] * gy[y] * cfg.peak_amplitude;
            }
        }
    }
}

/// Renders one Gaussian per visible joint, normalized so each channel peaks
/// at `cfg.peak_amplitude`.
pub fn encode(keypoints: &KeypointSet, cfg: &CodecConfig) -> Result<HeatmapStack> {
    cfg.validate()?;
    let (h, w) = cfg.heatmap_size;
    check_bounds(keypoints, h, w)?;
    let mut values = Tensor::zeros([keypoints.len(), h, w]);
    encode_into(keypoints, cfg, values.data_mut());
    HeatmapStack::new(values, cfg.peak_amplitude)
}

/// Encodes a batch into a `[B, K, H', W']` tensor.
pub fn encode_batch(batch: &[KeypointSet], cfg: &CodecConfig) -> Result<Tensor> {
    cfg.validate()?;
    let (h, w) = cfg.heatmap_size;
    let k = batch.first().map_or(0, KeypointSet::len);
    let mut out = Tensor::zeros([batch.len(), k, h, w]);
    let plane = k * h * w;
    for (i, kp) in batch.iter().enumerate() {
        if kp.len() != k {
            return Err(Error::Shape(format!("sample {i} has {} joints, expected {k}", kp.len())));
        }
        check_bounds(kp, h, w)?;
        encode_into(kp, cfg, &mut out.data_mut()[i * plane..(i + 1) * plane]);
    }
    Ok(out)
}

/// Location of the maximum of each channel. Ties go to the lowest row-major
/// index; NaN cells are skipped.
pub fn decode_argmax(stack: &HeatmapStack) -> Result<KeypointSet> {
    let (_, w) = stack.size();
    let mut coords = Vec::with_capacity(stack.channels());
    for k in 0..stack.channels() {
        let mut best: Option<(usize, f64)> = None;
        for (i, &v) in stack.channel(k).iter().enumerate() {
            if v.is_nan() {
                continue;
            }
            if best.map_or(true, |(_, b)| v > b) {
                best = Some((i, v));
            }
        }
        let (i, _) = best.ok_or(Error::NonFiniteChannel(k))?;
        coords.push([(i % w) as f64, (i / w) as f64]);
    }
    KeypointSet::all_visible(coords)
}

/// [`decode_argmax`] over every sample of a `[B, K, H', W']` batch.
pub fn decode_argmax_batch(batch: &Tensor) -> Result<Vec<KeypointSet>> {
    (0..batch.shape()[0]).map(|i| decode_argmax(&HeatmapStack::from_batch(batch, i)?)).collect()
}

/// Spatial softmax of `values / temperature` followed by the expected grid
/// coordinate, per channel.
pub fn decode_soft_argmax(stack: &HeatmapStack, temperature: f64) -> KeypointSet {
    let (h, w) = stack.size();
    let k = stack.channels();
    let t = stack.values().clone().reshape([1, k, h, w]);
    let mut op = SoftArgmax::new(temperature);
    let out = op.forward(&[&t]);
    let coords = out.data().chunks(2).map(|c| [c[0], c[1]]).collect();
    KeypointSet { coords, visible: vec![true; k] }
}

/// Differentiable soft-argmax: `[B, K, H, W]` heatmaps to `[B, K, 2]` `(x, y)`.
pub struct SoftArgmax {
    temperature: f64,
    probs: Vec<f64>,
}

impl SoftArgmax {
    pub fn new(temperature: f64) -> Self {
        assert!(temperature > 0.0, "soft-argmax temperature must be positive");
        Self { temperature, probs: Vec::new() }
    }
}

/// Numerically stable softmax of `logits / temperature` written into `out`.
pub(crate) fn softmax_into(logits: &[f64], temperature: f64, out: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(logits) {
        *o = ((v - max) / temperature).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

impl Function for SoftArgmax {
    fn forward(&mut self, inputs: &[&Tensor]) -> Tensor {
        let (b, k, h, w) = inputs[0].dims4();
        let plane = h * w;
        self.probs = vec![0.0; b * k * plane];
        let mut out = Tensor::zeros([b, k, 2]);
        for c in 0..b * k {
            let p = &mut self.probs[c * plane..(c + 1) * plane];
            softmax_into(&inputs[0].data()[c * plane..(c + 1) * plane], self.temperature, p);
            let (mut ex, mut ey) = (0.0, 0.0);
            for (i, &pi) in p.iter().enumerate() {
                ex += pi * (i % w) as f64;
                ey += pi * (i / w) as f64;
            }
            out.data_mut()[2 * c] = ex;
            out.data_mut()[2 * c + 1] = ey;
        }
        out
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor, _needs: &[bool]) -> Vec<Option<Tensor>> {
        let (b, k, h, w) = inputs[0].dims4();
        let plane = h * w;
        let mut dx = Tensor::zeros(inputs[0].shape().to_vec());
        for c in 0..b * k {
            let (ex, ey) = (output.data()[2 * c], output.data()[2 * c + 1]);
            let (gx, gy) = (grad.data()[2 * c], grad.data()[2 * c + 1]);
            let p = &self.probs[c * plane..(c + 1) * plane];
            let d = &mut dx.data_mut()[c * plane..(c + 1) * plane];
            for (i, (&pi, di)) in p.iter().zip(d.iter_mut()).enumerate() {
                let (col, row) = ((i % w) as f64, (i / w) as f64);
                *di = pi * (gx * (col - ex) + gy * (row - ey)) / self.temperature;
            }
        }
        vec![Some(dx)]
    }
}

/// Records a soft-argmax node on `g`.
pub fn soft_argmax(g: &Graph, heatmaps: Var, temperature: f64) -> Var {
    g.apply(SoftArgmax::new(temperature), &[heatmaps])
}

/// Stacks keypoint coordinates into `[B, K, 2]` and a flat `[B * K]` visibility mask.
pub fn coords_tensor(batch: &[KeypointSet]) -> (Tensor, Vec<bool>) {
    let k = batch.first().map_or(0, KeypointSet::len);
    let mut data = Vec::with_capacity(batch.len() * k * 2);
    let mut vis = Vec::with_capacity(batch.len() * k);
    for kp in batch {
        for (c, &v) in kp.coords.iter().zip(&kp.visible) {
            data.extend_from_slice(c);
            vis.push(v);
        }
    }
    (Tensor::from_vec([batch.len(), k, 2], data), vis)
}
