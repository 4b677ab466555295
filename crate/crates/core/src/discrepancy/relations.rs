use autograd::{Function, Tensor};

use super::mmd::{mmd_from_table, DistanceTable, KernelConfig};
use super::{Measure, RelationMask};
use crate::heatmap_codec::softmax_into;

/// Graph op computing `[r1, r2, r3]` from two `[B, K, H, W]` head outputs.
///
/// Rows of the shared sample matrix are ordered `(output, keypoint, batch)`,
/// so the samples of keypoint `k` of output `o` form one contiguous block.
pub(crate) struct RelationTerms {
    measure: Measure,
    kernel: KernelConfig,
    mask: RelationMask,
    symmetric_r2: bool,
    cache: Option<Cache>,
}

struct Cache {
    batch: usize,
    keypoints: usize,
    table: DistanceTable,
    /// Per-row softmax probabilities (MSE and KL measures) and their logs (KL only).
    probs: Vec<f64>,
    log_probs: Vec<f64>,
}

impl Cache {
    fn set(&self, output: usize, k: usize) -> Vec<usize> {
        let start = (output * self.keypoints + k) * self.batch;
        (start..start + self.batch).collect()
    }
}

/// Where a pair measure writes its gradient.
struct Sink<'a> {
    upstream: f64,
    coef: &'a mut [f64],
    direct: &'a mut [f64],
}

impl RelationTerms {
    pub fn new(measure: Measure, kernel: KernelConfig, mask: RelationMask, symmetric_r2: bool) -> Self {
        Self { measure, kernel, mask, symmetric_r2, cache: None }
    }

    fn build_cache(&self, a: &Tensor, b: &Tensor) -> Cache {
        let (batch, keypoints, h, w) = a.dims4();
        let plane = h * w;
        let mut rows = Vec::with_capacity(2 * batch * keypoints * plane);
        for t in [a, b] {
            for k in 0..keypoints {
                for bi in 0..batch {
                    let off = (bi * keypoints + k) * plane;
                    rows.extend_from_slice(&t.data()[off..off + plane]);
                }
            }
        }
        let (mut probs, mut log_probs) = (Vec::new(), Vec::new());
        if self.measure != Measure::Mmd {
            probs = vec![0.0; rows.len()];
            for (r, p) in rows.chunks(plane).zip(probs.chunks_mut(plane)) {
                softmax_into(r, 1.0, p);
            }
        }
        if self.measure == Measure::Kl {
            log_probs = rows
                .chunks(plane)
                .flat_map(|r| {
                    let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lse = m + r.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                    r.iter().map(move |v| v - lse)
                })
                .collect();
        }
        let table = DistanceTable::new(rows, plane);
        Cache { batch, keypoints, table, probs, log_probs }
    }

    fn pair(&self, c: &Cache, xs: &[usize], ys: &[usize], sink: Option<&mut Sink>) -> f64 {
        match self.measure {
            Measure::Mmd => {
                mmd_from_table(&c.table, xs, ys, &self.kernel, sink.map(|s| (&mut *s.coef, s.upstream)))
            }
            Measure::Mse => {
                let dim = c.table.dim();
                let scale = 1.0 / (xs.len() * dim) as f64;
                let mut total = 0.0;
                let mut sink = sink;
                for (&p, &q) in xs.iter().zip(ys) {
                    let (x, y) = (&c.probs[p * dim..(p + 1) * dim], &c.probs[q * dim..(q + 1) * dim]);
                    for i in 0..dim {
                        let d = x[i] - y[i];
                        total += d * d;
                        if let Some(s) = sink.as_mut() {
                            let g = s.upstream * 2.0 * scale * d;
                            s.direct[p * dim + i] += g;
                            s.direct[q * dim + i] -= g;
                        }
                    }
                }
                total * scale
            }
            Measure::Kl => {
                let dim = c.table.dim();
                let scale = 1.0 / xs.len() as f64;
                let mut total = 0.0;
                let mut sink = sink;
                for (&p, &q) in xs.iter().zip(ys) {
                    let (pp, lp) = (&c.probs[p * dim..(p + 1) * dim], &c.log_probs[p * dim..(p + 1) * dim]);
                    let (pq, lq) = (&c.probs[q * dim..(q + 1) * dim], &c.log_probs[q * dim..(q + 1) * dim]);
                    let kl: f64 = (0..dim).map(|i| pp[i] * (lp[i] - lq[i])).sum();
                    total += kl;
                    if let Some(s) = sink.as_mut() {
                        let u = s.upstream * scale;
                        for i in 0..dim {
                            s.direct[p * dim + i] += u * pp[i] * (lp[i] - lq[i] - kl);
                            s.direct[q * dim + i] += u * (pq[i] - pp[i]);
                        }
                    }
                }
                total * scale
            }
        }
    }

    /// Evaluates the enabled relations, optionally accumulating gradients with
    /// per-relation upstream weights.
    fn evaluate(&self, c: &Cache, upstream: Option<([f64; 3], &mut [f64], &mut [f64])>) -> [f64; 3] {
        let k = c.keypoints;
        let mut out = [0.0; 3];
        let (weights, mut coef, mut direct) = match upstream {
            Some((w, coef, direct)) => (w, Some(coef), Some(direct)),
            None => ([0.0; 3], None, None),
        };
        let mut run = |xs: &[usize], ys: &[usize], up: f64| -> f64 {
            match (coef.as_deref_mut(), direct.as_deref_mut()) {
                (Some(coef), Some(direct)) if up != 0.0 => {
                    let mut sink = Sink { upstream: up, coef, direct };
                    self.pair(c, xs, ys, Some(&mut sink))
                }
                _ => self.pair(c, xs, ys, None),
            }
        };

        if self.mask.r1 {
            let w = 1.0 / k as f64;
            let mut s = 0.0;
            for m in 0..k {
                s += run(&c.set(0, m), &c.set(1, m), weights[0] * w);
            }
            out[0] = s * w;
        }
        if k >= 2 {
            let w = 1.0 / (k * (k - 1)) as f64;
            if self.mask.r2 {
                let outputs: &[usize] = if self.symmetric_r2 { &[0, 1] } else { &[0] };
                let ow = 1.0 / outputs.len() as f64;
                let mut s = 0.0;
                for &o in outputs {
                    for m in 0..k {
                        for n in (0..k).filter(|&n| n != m) {
                            s += run(&c.set(o, m), &c.set(o, n), weights[1] * w * ow);
                        }
                    }
                }
                out[1] = s * w * ow;
            }
            if self.mask.r3 {
                let mut s = 0.0;
                for m in 0..k {
                    for n in (0..k).filter(|&n| n != m) {
                        s += run(&c.set(0, m), &c.set(1, n), weights[2] * w);
                    }
                }
                out[2] = s * w;
            }
        } else if self.mask.r2 || self.mask.r3 {
            log::warn!("relation terms with K = {k}: r2 and r3 have no keypoint pairs and are reported as 0");
        }
        out
    }
}

impl Function for RelationTerms {
    fn forward(&mut self, inputs: &[&Tensor]) -> Tensor {
        let cache = self.build_cache(inputs[0], inputs[1]);
        let out = self.evaluate(&cache, None);
        self.cache = Some(cache);
        Tensor::from_vec(vec![3], out.to_vec())
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let c = self.cache.as_ref().expect("relation terms backward before forward");
        let n = c.table.len();
        let dim = c.table.dim();
        let mut coef = vec![0.0; if self.measure == Measure::Mmd { n * n } else { 0 }];
        let mut direct = vec![0.0; n * dim];
        let w = [grad.data()[0], grad.data()[1], grad.data()[2]];
        self.evaluate(c, Some((w, &mut coef, &mut direct)));
        let rows = match self.measure {
            Measure::Mmd => c.table.row_gradients(&coef),
            Measure::Mse => {
                // Chain the probability-space gradient through each row's softmax.
                let mut d = direct;
                for (g, p) in d.chunks_mut(dim).zip(c.probs.chunks(dim)) {
                    let dot: f64 = g.iter().zip(p).map(|(a, b)| a * b).sum();
                    for (gi, pi) in g.iter_mut().zip(p) {
                        *gi = pi * (*gi - dot);
                    }
                }
                d
            }
            Measure::Kl => direct,
        };

        let (batch, keypoints) = (c.batch, c.keypoints);
        (0..2)
            .map(|o| {
                if !needs[o] {
                    return None;
                }
                let mut g = Tensor::zeros(inputs[o].shape());
                let data = g.data_mut();
                for k in 0..keypoints {
                    for bi in 0..batch {
                        let row = (o * keypoints + k) * batch + bi;
                        let off = (bi * keypoints + k) * dim;
                        data[off..off + dim].copy_from_slice(&rows[row * dim..(row + 1) * dim]);
                    }
                }
                Some(g)
            })
            .collect()
    }
}

/// Value-level evaluation without a graph.
pub(crate) fn evaluate(op: &RelationTerms, a: &Tensor, b: &Tensor) -> [f64; 3] {
    let cache = op.build_cache(a, b);
    op.evaluate(&cache, None)
}
