//! Losses: heatmap MSE, OKS, keypoint MMD, the three relation terms and the
//! composite inter/specific discrepancy.

mod mmd;
mod relations;

use std::str::FromStr;

use autograd::{Function, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap_codec::{softmax_into, HeatmapStack, KeypointSet};
use crate::model_zoo::HeadOutputs;
use relations::RelationTerms;

pub use mmd::{mmd_keypoint, mmd_keypoint_with_grad, BaseBandwidth, Estimator, KernelConfig, FALLBACK_BANDWIDTH};

/// Base measure inside the relation terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Measure {
    #[default]
    Mmd,
    Mse,
    Kl,
}

impl FromStr for Measure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mmd" => Ok(Self::Mmd),
            "mse" => Ok(Self::Mse),
            "kl" => Ok(Self::Kl),
            other => Err(Error::Config(format!("unknown discrepancy variant `{other}` (expected mmd, mse or kl)"))),
        }
    }
}

/// Which of the inter/specific terms enter the composite loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DlTerms {
    #[default]
    Full,
    Inter,
    Spec,
    None,
}

impl DlTerms {
    pub fn uses_inter(self) -> bool {
        matches!(self, Self::Full | Self::Inter)
    }

    pub fn uses_spec(self) -> bool {
        matches!(self, Self::Full | Self::Spec)
    }
}

/// Enabled relation terms. Serialized as a list such as `["r1", "r3"]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct RelationMask {
    pub r1: bool,
    pub r2: bool,
    pub r3: bool,
}

impl RelationMask {
    pub const ALL: Self = Self { r1: true, r2: true, r3: true };
}

impl Default for RelationMask {
    fn default() -> Self {
        Self::ALL
    }
}

impl TryFrom<Vec<String>> for RelationMask {
    type Error = String;

    fn try_from(names: Vec<String>) -> std::result::Result<Self, String> {
        let mut m = Self { r1: false, r2: false, r3: false };
        for n in &names {
            match n.as_str() {
                "r1" => m.r1 = true,
                "r2" => m.r2 = true,
                "r3" => m.r3 = true,
                other => return Err(format!("unknown relation `{other}` (expected r1, r2 or r3)")),
            }
        }
        Ok(m)
    }
}

impl From<RelationMask> for Vec<String> {
    fn from(m: RelationMask) -> Self {
        [(m.r1, "r1"), (m.r2, "r2"), (m.r3, "r3")].iter().filter(|(on, _)| *on).map(|(_, n)| n.to_string()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct DiscrepancyConfig {
    pub kernel: KernelConfig,
    pub measure: Measure,
    pub terms: DlTerms,
    pub relations: RelationMask,
    /// Average the intra-output relation over both outputs instead of the
    /// first one only.
    pub symmetric_r2: bool,
}

impl DiscrepancyConfig {
    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()
    }

    fn op(&self) -> RelationTerms {
        RelationTerms::new(self.measure, self.kernel.clone(), self.relations, self.symmetric_r2)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyReport {
    pub r1: f64,
    pub r2: f64,
    pub r3: f64,
    pub inter: f64,
    pub spec: f64,
    pub dl: f64,
}

impl DiscrepancyReport {
    /// Assembles a report from inter relation terms and the specific discrepancy.
    pub fn from_terms(r: [f64; 3], spec: f64) -> Self {
        let inter = r[0] + r[1] - r[2];
        Self { r1: r[0], r2: r[1], r3: r[2], inter, spec, dl: inter - spec }
    }

    pub fn is_finite(&self) -> bool {
        [self.r1, self.r2, self.r3, self.inter, self.spec, self.dl].iter().all(|v| v.is_finite())
    }
}

fn check_pair(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.shape().len() != 4 {
        return Err(Error::Shape(format!("expected [B, K, H, W], got {:?}", a.shape())));
    }
    if a.shape()[0] == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(())
}

/// Mean squared difference over every element.
pub fn mse_heatmap(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.len() as f64)
}

fn check_relations(a: &Tensor, b: &Tensor, cfg: &DiscrepancyConfig) -> Result<()> {
    check_pair(a, b)?;
    cfg.validate()?;
    if cfg.measure == Measure::Mmd && cfg.kernel.estimator == Estimator::Unbiased && a.shape()[0] < 2 {
        return Err(Error::Shape("the unbiased MMD estimator needs a batch of at least two".into()));
    }
    Ok(())
}

/// `(r1, r2, r3)` between two `[B, K, H, W]` batches under the MMD measure.
pub fn relation_terms(a: &Tensor, b: &Tensor, kernel: &KernelConfig) -> Result<(f64, f64, f64)> {
    let cfg = DiscrepancyConfig { kernel: kernel.clone(), ..DiscrepancyConfig::default() };
    let [r1, r2, r3] = relation_terms_with(a, b, &cfg)?;
    Ok((r1, r2, r3))
}

/// Relation terms under any measure and relation mask. Disabled relations are 0.
pub fn relation_terms_with(a: &Tensor, b: &Tensor, cfg: &DiscrepancyConfig) -> Result<[f64; 3]> {
    check_relations(a, b, cfg)?;
    Ok(relations::evaluate(&cfg.op(), a, b))
}

/// `r1 + r2 - r3` between two intermediate outputs.
pub fn inter_discrepancy(inter_a: &Tensor, inter_b: &Tensor, cfg: &DiscrepancyConfig) -> Result<f64> {
    let [r1, r2, r3] = relation_terms_with(inter_a, inter_b, cfg)?;
    Ok(r1 + r2 - r3)
}

/// The same composition applied to the two specific outputs.
pub fn spec_discrepancy(spec_a: &Tensor, spec_b: &Tensor, cfg: &DiscrepancyConfig) -> Result<f64> {
    inter_discrepancy(spec_a, spec_b, cfg)
}

/// Composite discrepancy from explicit head tensors.
pub fn dl_from_parts(
    inter_a: &Tensor,
    inter_b: &Tensor,
    spec_a: &Tensor,
    spec_b: &Tensor,
    cfg: &DiscrepancyConfig,
) -> Result<DiscrepancyReport> {
    check_pair(inter_a, spec_a)?;
    let r = if cfg.terms.uses_inter() { relation_terms_with(inter_a, inter_b, cfg)? } else { [0.0; 3] };
    let spec = if cfg.terms.uses_spec() { spec_discrepancy(spec_a, spec_b, cfg)? } else { 0.0 };
    Ok(DiscrepancyReport::from_terms(r, spec))
}

/// Composite discrepancy over the four heads of one forward pass.
pub fn dl_loss(heads: &HeadOutputs, cfg: &DiscrepancyConfig) -> Result<DiscrepancyReport> {
    dl_from_parts(&heads.intermediate, &heads.adversarial_intermediate, &heads.inference_specific, &heads.adversarial_specific, cfg)
}

/// Graph node for the relation terms, shaped `[3]`.
pub fn relation_node(g: &Graph, a: Var, b: Var, cfg: &DiscrepancyConfig) -> Result<Var> {
    check_relations(&g.value(a), &g.value(b), cfg)?;
    Ok(g.apply(cfg.op(), &[a, b]))
}

/// Composite discrepancy recorded on a graph.
pub struct DlNode {
    pub dl: Var,
    pub report: DiscrepancyReport,
}

/// Records `inter - spec` on `g`; disabled terms contribute nothing and report 0.
/// Returns `None` when both terms are disabled.
pub fn dl_node(
    g: &Graph,
    inter: (Var, Var),
    spec: (Var, Var),
    cfg: &DiscrepancyConfig,
) -> Result<Option<DlNode>> {
    let mut terms = Vec::new();
    let mut r = [0.0; 3];
    if cfg.terms.uses_inter() {
        let rel = relation_node(g, inter.0, inter.1, cfg)?;
        r.copy_from_slice(g.value(rel).data());
        terms.push((g.select(rel, 0), 1.0));
        terms.push((g.select(rel, 1), 1.0));
        terms.push((g.select(rel, 2), -1.0));
    }
    let mut spec_value = 0.0;
    if cfg.terms.uses_spec() {
        let rel = relation_node(g, spec.0, spec.1, cfg)?;
        let s = g.weighted_sum(&[(g.select(rel, 0), 1.0), (g.select(rel, 1), 1.0), (g.select(rel, 2), -1.0)]);
        spec_value = g.item(s);
        terms.push((s, -1.0));
    }
    if terms.is_empty() {
        return Ok(None);
    }
    let dl = g.weighted_sum(&terms);
    Ok(Some(DlNode { dl, report: DiscrepancyReport::from_terms(r, spec_value) }))
}

/// Per-channel complement of the spatial softmax, `(1 - π) / (N - 1)`.
pub fn ground_false_heatmap(p: &HeatmapStack) -> HeatmapStack {
    let shape = p.values().shape().to_vec();
    let batch = p.values().clone().reshape([&[1], shape.as_slice()].concat());
    HeatmapStack::new(ground_false_batch(&batch).reshape(shape), p.peak_amplitude()).expect("shape preserved")
}

/// [`ground_false_heatmap`] over a `[B, K, H, W]` batch.
pub fn ground_false_batch(p: &Tensor) -> Tensor {
    let (_, _, h, w) = p.dims4();
    let plane = h * w;
    let mut out = vec![0.0; p.len()];
    if plane < 2 {
        return Tensor::from_vec(p.shape().to_vec(), out);
    }
    let denom = (plane - 1) as f64;
    for (src, dst) in p.data().chunks(plane).zip(out.chunks_mut(plane)) {
        softmax_into(src, 1.0, dst);
        for v in dst.iter_mut() {
            *v = (1.0 - *v) / denom;
        }
    }
    Tensor::from_vec(p.shape().to_vec(), out)
}

/// OKS settings. `area` defaults to the heatmap area when unset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OksConfig {
    /// One value shared by every joint, or one per joint.
    pub falloff: Vec<f64>,
    pub area: Option<f64>,
    /// Use the squared distance in the exponent instead of the plain distance.
    pub squared_distance: bool,
}

impl Default for OksConfig {
    fn default() -> Self {
        Self { falloff: vec![0.1], area: None, squared_distance: false }
    }
}

impl OksConfig {
    pub fn resolve(&self, keypoints: usize, heatmap_size: (usize, usize)) -> Result<Oks> {
        let falloff = match self.falloff.len() {
            1 => vec![self.falloff[0]; keypoints],
            n if n == keypoints => self.falloff.clone(),
            n => return Err(Error::Config(format!("oks.falloff has {n} values for {keypoints} joints"))),
        };
        if falloff.iter().any(|k| !(*k > 0.0)) {
            return Err(Error::Config("oks.falloff values must be positive".into()));
        }
        let area = self.area.unwrap_or((heatmap_size.0 * heatmap_size.1) as f64);
        if !(area > 0.0) {
            return Err(Error::Config(format!("oks.area must be positive, got {area}")));
        }
        Ok(Oks { falloff, area, squared_distance: self.squared_distance })
    }
}

/// Resolved OKS parameters for a fixed joint count.
#[derive(Clone, Debug, PartialEq)]
pub struct Oks {
    pub falloff: Vec<f64>,
    pub area: f64,
    pub squared_distance: bool,
}

impl Oks {
    pub fn new(falloff: Vec<f64>, area: f64) -> Self {
        Self { falloff, area, squared_distance: false }
    }

    /// Similarity of one joint and its derivative with respect to the distance.
    fn joint(&self, i: usize, dx: f64, dy: f64) -> (f64, [f64; 2]) {
        let c = 1.0 / (2.0 * self.area * self.falloff[i]);
        let d2 = dx * dx + dy * dy;
        let (d, grad_scale) = if self.squared_distance {
            (d2, 2.0)
        } else {
            let d = d2.sqrt();
            (d, if d > 0.0 { 1.0 / d } else { 0.0 })
        };
        let e = (-d * c).exp();
        let s = -e * c * grad_scale;
        (e, [s * dx, s * dy])
    }
}

fn check_oks(pred: &KeypointSet, target: &KeypointSet, oks: &Oks) -> Result<usize> {
    if pred.len() != target.len() || oks.falloff.len() != pred.len() {
        return Err(Error::Shape(format!(
            "OKS over {} predicted, {} target joints with {} falloff values",
            pred.len(),
            target.len(),
            oks.falloff.len()
        )));
    }
    let n = pred.visible().iter().zip(target.visible()).filter(|(a, b)| **a && **b).count();
    if n == 0 {
        return Err(Error::NoVisibleJoints);
    }
    Ok(n)
}

/// Sum of per-joint similarities over mutually visible joints.
pub fn oks_similarity(pred: &KeypointSet, target: &KeypointSet, oks: &Oks) -> Result<f64> {
    check_oks(pred, target, oks)?;
    let mut s = 0.0;
    for i in 0..pred.len() {
        if pred.visible()[i] && target.visible()[i] {
            let (p, t) = (pred.coords()[i], target.coords()[i]);
            s += oks.joint(i, p[0] - t[0], p[1] - t[1]).0;
        }
    }
    Ok(s)
}

/// `1 - similarity / visible`, zero at perfect agreement.
pub fn oks_loss(pred: &KeypointSet, target: &KeypointSet, oks: &Oks) -> Result<f64> {
    let n = check_oks(pred, target, oks)?;
    Ok(1.0 - oks_similarity(pred, target, oks)? / n as f64)
}

/// Batch-mean OKS loss between `[B, K, 2]` coordinate tensors.
struct OksLoss {
    oks: Oks,
    visible: Vec<bool>,
}

impl OksLoss {
    fn per_sample(&self, pred: &Tensor, target: &Tensor, mut grad: Option<&mut [f64]>, upstream: f64) -> f64 {
        let (b, k) = (pred.shape()[0], pred.shape()[1]);
        let (p, t) = (pred.data(), target.data());
        let mut total = 0.0;
        for s in 0..b {
            let vis: Vec<usize> = (0..k).filter(|&i| self.visible[s * k + i]).collect();
            let nv = vis.len() as f64;
            let mut sim = 0.0;
            for &i in &vis {
                let o = (s * k + i) * 2;
                let (e, de) = self.oks.joint(i, p[o] - t[o], p[o + 1] - t[o + 1]);
                sim += e;
                if let Some(g) = grad.as_deref_mut() {
                    let w = -upstream / (nv * b as f64);
                    g[o] += w * de[0];
                    g[o + 1] += w * de[1];
                }
            }
            total += 1.0 - sim / nv;
        }
        total / b as f64
    }
}

impl Function for OksLoss {
    fn forward(&mut self, inputs: &[&Tensor]) -> Tensor {
        Tensor::scalar(self.per_sample(inputs[0], inputs[1], None, 0.0))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        if !needs[0] && !needs[1] {
            return vec![None, None];
        }
        let mut gp = Tensor::zeros(inputs[0].shape());
        self.per_sample(inputs[0], inputs[1], Some(gp.data_mut()), grad.item());
        // The loss depends on the difference only.
        let gt = needs[1].then(|| gp.scale(-1.0));
        vec![needs[0].then_some(gp), gt]
    }
}

/// Records the batch-mean OKS loss between predicted and target coordinates
/// (`[B, K, 2]`). Both inputs may carry gradients.
pub fn oks_loss_node(g: &Graph, pred: Var, target: Var, visible: &[bool], oks: &Oks) -> Result<Var> {
    {
        let (p, t) = (g.value(pred), g.value(target));
        if p.shape() != t.shape() || p.shape().len() != 3 || p.shape()[2] != 2 {
            return Err(Error::Shape(format!("OKS inputs {:?} vs {:?}", p.shape(), t.shape())));
        }
        let (b, k) = (p.shape()[0], p.shape()[1]);
        if b == 0 {
            return Err(Error::EmptyBatch);
        }
        if visible.len() != b * k || oks.falloff.len() != k {
            return Err(Error::Shape("OKS visibility or falloff length does not match the batch".into()));
        }
        if visible.chunks(k).any(|v| !v.contains(&true)) {
            return Err(Error::NoVisibleJoints);
        }
    }
    Ok(g.apply(OksLoss { oks: oks.clone(), visible: visible.to_vec() }, &[pred, target]))
}

#[cfg(test)]
mod tests;
