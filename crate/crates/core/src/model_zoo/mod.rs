//! Shared feature extractor and the regression heads of the three structural
//! variants, addressed by parameter group.

mod checkpoint;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use autograd::{Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum VariantTag {
    Baseline,
    Aidf,
    #[default]
    Idf,
}

impl FromStr for VariantTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Self::Baseline),
            "aidf" => Ok(Self::Aidf),
            "idf" => Ok(Self::Idf),
            other => Err(Error::Config(format!("unknown variant `{other}`"))),
        }
    }
}

impl fmt::Display for VariantTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Baseline => "baseline",
            Self::Aidf => "aidf",
            Self::Idf => "idf",
        })
    }
}

/// Parameter groups: the extractor and the four heads.
///
/// `FPrime` and `FaPrime` hold the explicit specific heads for IDF and the
/// explicit intermediate heads for AIDF; they are empty for the baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    G,
    F,
    FPrime,
    Fa,
    FaPrime,
}

impl ParamGroup {
    pub const ALL: [Self; 5] = [Self::G, Self::F, Self::FPrime, Self::Fa, Self::FaPrime];
    pub const HEADS: [Self; 4] = [Self::F, Self::FPrime, Self::Fa, Self::FaPrime];

    pub fn name(self) -> &'static str {
        match self {
            Self::G => "G",
            Self::F => "F",
            Self::FPrime => "F'",
            Self::Fa => "F_a",
            Self::FaPrime => "F'_a",
        }
    }

    fn index(self) -> u64 {
        self as u64
    }

    pub(crate) fn of_param(name: &str) -> Option<Self> {
        let prefix = name.split('.').next()?;
        Self::ALL.into_iter().find(|g| g.name() == prefix)
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ParamGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let normalized = s.replace('′', "'");
        Self::ALL.into_iter().find(|g| g.name() == normalized).ok_or_else(|| Error::UnknownGroup(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSpec {
    /// `(channels, height, width)` of input images.
    pub input_shape: (usize, usize, usize),
    pub feature_channels: usize,
    /// Number of stride-2 blocks.
    pub depth: usize,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self { input_shape: (3, 64, 64), feature_channels: 32, depth: 3 }
    }
}

impl BackboneSpec {
    fn block_channels(&self) -> Vec<usize> {
        (0..self.depth).map(|i| (self.feature_channels >> (self.depth - 1 - i)).max(4)).collect()
    }

    fn feature_size(&self) -> (usize, usize) {
        let f = 1 << self.depth;
        (self.input_shape.1 / f, self.input_shape.2 / f)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: VariantTag,
    pub backbone: BackboneSpec,
    /// Channel width inside every head.
    pub head_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { variant: VariantTag::default(), backbone: BackboneSpec::default(), head_width: 16 }
    }
}

impl ModelConfig {
    pub fn validate(&self, heatmap_size: (usize, usize)) -> Result<()> {
        let b = &self.backbone;
        let (c, h, w) = b.input_shape;
        if c == 0 || b.feature_channels == 0 || b.depth == 0 || self.head_width == 0 {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        let f = 1usize.checked_shl(b.depth as u32).unwrap_or(0);
        if f == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::Config(format!("input {h}x{w} is not divisible by 2^{} for the backbone depth", b.depth)));
        }
        let (fh, fw) = b.feature_size();
        if (2 * fh, 2 * fw) != heatmap_size {
            return Err(Error::Config(format!(
                "backbone features {fh}x{fw} upsample to {}x{}, not the {}x{} heatmap size",
                2 * fh,
                2 * fw,
                heatmap_size.0,
                heatmap_size.1
            )));
        }
        Ok(())
    }
}

/// All head outputs of one forward pass as `[B, K, H', W']` tensors.
#[derive(Clone, Debug)]
pub struct HeadOutputs {
    pub inference: Tensor,
    pub inference_specific: Tensor,
    pub adversarial: Tensor,
    pub adversarial_specific: Tensor,
    pub intermediate: Tensor,
    pub adversarial_intermediate: Tensor,
}

/// Head outputs recorded on a graph. Heads that were not requested are `None`.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub inference: Var,
    pub adversarial: Option<Var>,
    /// Raw output of the `F'` group head, whichever role it plays.
    pub inference_second: Option<Var>,
    pub inference_specific: Option<Var>,
    pub adversarial_specific: Option<Var>,
    pub intermediate: Option<Var>,
    pub adversarial_intermediate: Option<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    keypoints: usize,
    heatmap_size: (usize, usize),
    params: BTreeMap<String, Tensor>,
}

fn conv_shapes(cfg: &ModelConfig, keypoints: usize, group: ParamGroup) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let mut push = |name: String, w: Vec<usize>, bias: usize| {
        out.push((format!("{name}.weight"), w));
        out.push((format!("{name}.bias"), vec![bias]));
    };
    let g = group.name();
    if group == ParamGroup::G {
        let mut cin = cfg.backbone.input_shape.0;
        for (i, c) in cfg.backbone.block_channels().into_iter().enumerate() {
            push(format!("{g}.block{i}.down"), vec![c, cin, 3, 3], c);
            push(format!("{g}.block{i}.conv"), vec![c, c, 3, 3], c);
            cin = c;
        }
    } else {
        let fc = *cfg.backbone.block_channels().last().expect("depth validated");
        let hw = cfg.head_width;
        push(format!("{g}.up"), vec![fc, hw, 4, 4], hw);
        push(format!("{g}.refine"), vec![hw, hw, 3, 3], hw);
        push(format!("{g}.proj"), vec![keypoints, hw, 1, 1], keypoints);
    }
    out
}

fn groups_for(variant: VariantTag) -> &'static [ParamGroup] {
    match variant {
        VariantTag::Baseline => &[ParamGroup::G, ParamGroup::F, ParamGroup::Fa],
        _ => &ParamGroup::ALL,
    }
}

/// Builds a model with fan-in scaled normal weights and zero biases. Each
/// group draws from its own stream of a generator seeded with `seed`.
pub fn build_model(cfg: &ModelConfig, keypoints: usize, heatmap_size: (usize, usize), seed: u64) -> Result<Model> {
    cfg.validate(heatmap_size)?;
    if keypoints == 0 {
        return Err(Error::Config("at least one keypoint is required".into()));
    }
    let mut params = BTreeMap::new();
    for &group in groups_for(cfg.variant) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(group.index());
        for (name, shape) in conv_shapes(cfg, keypoints, group) {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".bias") {
                vec![0.0; n]
            } else {
                // Transposed-conv weights are [cin, cout, k, k]; fan-in is over cin·k·k.
                let fan_in = if name.ends_with("up.weight") || name.ends_with("refine.weight") {
                    shape[0] * shape[2] * shape[3]
                } else {
                    shape[1] * shape[2] * shape[3]
                };
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            };
            params.insert(name, Tensor::from_vec(shape, data));
        }
    }
    Ok(Model { config: cfg.clone(), keypoints, heatmap_size, params })
}

/// Which graph leaves are trainable and which heads to evaluate.
#[derive(Clone, Debug)]
pub struct ForwardPlan {
    pub trainable: BTreeSet<ParamGroup>,
    pub heads: BTreeSet<ParamGroup>,
}

impl ForwardPlan {
    /// All heads of the variant, nothing trainable.
    pub fn frozen() -> Self {
        Self { trainable: BTreeSet::new(), heads: ParamGroup::HEADS.into_iter().collect() }
    }

    pub fn train(mut self, groups: &[ParamGroup]) -> Self {
        self.trainable.extend(groups);
        self
    }

    pub fn with_heads(mut self, heads: &[ParamGroup]) -> Self {
        self.heads = heads.iter().copied().collect();
        self
    }
}

/// Graph leaves created for one forward pass, keyed by parameter name.
pub type Leaves = BTreeMap<String, Var>;

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> VariantTag {
        self.config.variant
    }

    pub fn keypoints(&self) -> usize {
        self.keypoints
    }

    pub fn heatmap_size(&self) -> (usize, usize) {
        self.heatmap_size
    }

    pub fn has_group(&self, group: ParamGroup) -> bool {
        groups_for(self.config.variant).contains(&group)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Parameter names belonging to `groups`, in sorted order. Groups the
    /// variant lacks are empty.
    pub fn parameters(&self, groups: &[ParamGroup]) -> Vec<&str> {
        self.params
            .keys()
            .filter(|n| ParamGroup::of_param(n).is_some_and(|g| groups.contains(&g)))
            .map(String::as_str)
            .collect()
    }

    /// [`Model::parameters`] with group names given as strings.
    pub fn parameters_by_name(&self, groups: &[&str]) -> Result<Vec<&str>> {
        let parsed = groups.iter().map(|s| s.parse()).collect::<Result<Vec<ParamGroup>>>()?;
        Ok(self.parameters(&parsed))
    }

    /// Copies of the parameters of `groups`, for snapshot comparisons.
    pub fn snapshot(&self, groups: &[ParamGroup]) -> BTreeMap<String, Tensor> {
        self.parameters(groups).into_iter().map(|n| (n.to_string(), self.params[n].clone())).collect()
    }

    fn check_images(&self, images: &Tensor) -> Result<()> {
        let (c, h, w) = self.config.backbone.input_shape;
        let s = images.shape();
        if s.len() != 4 || s[1..] != [c, h, w] {
            return Err(Error::Shape(format!("images {s:?} do not match the [B, {c}, {h}, {w}] input shape")));
        }
        if s[0] == 0 {
            return Err(Error::EmptyBatch);
        }
        Ok(())
    }

    fn leaf(&self, g: &Graph, leaves: &mut Leaves, name: &str, trainable: bool) -> Var {
        *leaves.entry(name.to_string()).or_insert_with(|| {
            let t = self.params[name].clone();
            if trainable {
                g.param(t)
            } else {
                g.constant(t)
            }
        })
    }

    fn backbone(&self, g: &Graph, leaves: &mut Leaves, x: Var, trainable: bool) -> Var {
        let mut h = x;
        for i in 0..self.config.backbone.depth {
            for (layer, stride) in [("down", 2), ("conv", 1)] {
                let w = self.leaf(g, leaves, &format!("G.block{i}.{layer}.weight"), trainable);
                let b = self.leaf(g, leaves, &format!("G.block{i}.{layer}.bias"), trainable);
                h = g.relu(g.conv2d(h, w, Some(b), stride, 1));
            }
        }
        h
    }

    fn head(&self, g: &Graph, leaves: &mut Leaves, group: ParamGroup, features: Var, trainable: bool) -> Var {
        let p = group.name();
        let mut get = |s: &str| self.leaf(g, leaves, &format!("{p}.{s}"), trainable);
        let (w1, b1, w2, b2, w3, b3) =
            (get("up.weight"), get("up.bias"), get("refine.weight"), get("refine.bias"), get("proj.weight"), get("proj.bias"));
        let h = g.relu(g.conv_transpose2d(features, w1, Some(b1), 2, 1));
        let h = g.relu(g.conv_transpose2d(h, w2, Some(b2), 1, 1));
        g.conv2d(h, w3, Some(b3), 1, 0)
    }

    /// Records a forward pass on `g`.
    pub fn forward_graph(&self, g: &Graph, images: &Tensor, plan: &ForwardPlan) -> Result<(HeadVars, Leaves)> {
        self.check_images(images)?;
        for &t in &plan.trainable {
            if !self.has_group(t) {
                return Err(Error::UnknownGroup(format!("{t} (not part of the {} variant)", self.variant())));
            }
        }
        let mut leaves = Leaves::new();
        let x = g.constant(images.clone());
        let feats = self.backbone(g, &mut leaves, x, plan.trainable.contains(&ParamGroup::G));
        let run = |group: ParamGroup, leaves: &mut Leaves| {
            (plan.heads.contains(&group) && self.has_group(group))
                .then(|| self.head(g, leaves, group, feats, plan.trainable.contains(&group)))
        };
        let inference = run(ParamGroup::F, &mut leaves).ok_or_else(|| Error::Config("the inference head is always required".into()))?;
        let adversarial = run(ParamGroup::Fa, &mut leaves);
        let second = run(ParamGroup::FPrime, &mut leaves);
        let adv_second = run(ParamGroup::FaPrime, &mut leaves);

        let derive = |main: Option<Var>, explicit: Option<Var>| -> (Option<Var>, Option<Var>) {
            match (self.variant(), main, explicit) {
                (VariantTag::Baseline, Some(m), _) => {
                    let shape = g.value(m).shape().to_vec();
                    let zero = g.constant(Tensor::zeros(shape));
                    (Some(zero), Some(m))
                }
                (VariantTag::Idf, Some(m), Some(spec)) => (Some(spec), Some(g.sub(m, spec))),
                (VariantTag::Aidf, Some(m), Some(inter)) => {
                    let spec = g.sub(m, inter);
                    (Some(spec), Some(g.sub(m, spec)))
                }
                _ => (None, None),
            }
        };
        let (inference_specific, intermediate) = derive(Some(inference), second);
        let (adversarial_specific, adversarial_intermediate) = derive(adversarial, adv_second);
        Ok((
            HeadVars {
                inference,
                adversarial,
                inference_second: second,
                inference_specific,
                adversarial_specific,
                intermediate,
                adversarial_intermediate,
            },
            leaves,
        ))
    }

    /// Evaluates every head without recording gradients.
    pub fn forward(&self, images: &Tensor) -> Result<HeadOutputs> {
        let g = Graph::new();
        let (v, _) = self.forward_graph(&g, images, &ForwardPlan::frozen())?;
        let get = |x: Option<Var>| g.value(x.expect("all heads requested")).clone();
        let out = HeadOutputs {
            inference: g.value(v.inference).clone(),
            inference_specific: get(v.inference_specific),
            adversarial: get(v.adversarial),
            adversarial_specific: get(v.adversarial_specific),
            intermediate: get(v.intermediate),
            adversarial_intermediate: get(v.adversarial_intermediate),
        };
        Ok(out)
    }

    /// Inference-branch heatmaps only, evaluated in chunks of `chunk` images.
    pub fn predict(&self, images: &Tensor, chunk: usize) -> Result<Tensor> {
        self.check_images(images)?;
        let n = images.shape()[0];
        let plan = ForwardPlan::frozen().with_heads(&[ParamGroup::F]);
        let mut parts = Vec::new();
        let per = images.len() / n;
        for start in (0..n).step_by(chunk.max(1)) {
            let end = (start + chunk.max(1)).min(n);
            let mut shape = images.shape().to_vec();
            shape[0] = end - start;
            let part = Tensor::from_vec(shape, images.data()[start * per..end * per].to_vec());
            let g = Graph::new();
            let (v, _) = self.forward_graph(&g, &part, &plan)?;
            parts.push(g.value(v.inference).clone());
        }
        let (k, (h, w)) = (self.keypoints, self.heatmap_size);
        let data: Vec<f64> = parts.into_iter().flat_map(Tensor::into_data).collect();
        Ok(Tensor::from_vec(vec![n, k, h, w], data))
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        keypoints: usize,
        heatmap_size: (usize, usize),
        params: BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        let reference = build_model(&config, keypoints, heatmap_size, 0)?;
        if reference.params.len() != params.len()
            || reference.params.iter().any(|(n, t)| params.get(n).map(Tensor::shape) != Some(t.shape()))
        {
            return Err(Error::Shape("checkpoint tensors do not match the model layout".into()));
        }
        Ok(Self { config, keypoints, heatmap_size, params })
    }

    /// Replaces the parameters of `groups` with those of `other`, which must
    /// share the layout of those groups.
    pub fn copy_groups_from(&mut self, other: &Model, groups: &[ParamGroup]) -> Result<()> {
        for name in other.parameters(groups) {
            let dst = self.params.get_mut(name).ok_or_else(|| Error::Shape(format!("missing parameter {name}")))?;
            if dst.shape() != other.params[name].shape() {
                return Err(Error::Shape(format!("parameter {name} has a different shape")));
            }
            *dst = other.params[name].clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(variant: VariantTag, seed: u64) -> Model {
        let cfg = ModelConfig { variant, ..ModelConfig::default() };
        build_model(&cfg, 8, (16, 16), seed).unwrap()
    }

    #[test]
    fn same_seed_gives_identical_parameters() {
        assert_eq!(model(VariantTag::Idf, 3), model(VariantTag::Idf, 3));
        assert_ne!(model(VariantTag::Idf, 3).params, model(VariantTag::Idf, 4).params);
    }

    #[test]
    fn baseline_has_empty_specific_groups() {
        let m = model(VariantTag::Baseline, 0);
        assert!(m.parameters(&[ParamGroup::FPrime]).is_empty());
        assert!(m.parameters(&[ParamGroup::FaPrime]).is_empty());
        assert!(!m.parameters(&[ParamGroup::Fa]).is_empty());
    }

    #[test]
    fn groups_partition_the_parameters() {
        for v in [VariantTag::Baseline, VariantTag::Aidf, VariantTag::Idf] {
            let m = model(v, 1);
            let all: BTreeSet<&str> = m.parameters(&ParamGroup::ALL).into_iter().collect();
            assert_eq!(all.len(), m.params().len());
            let mut seen = BTreeSet::new();
            for g in ParamGroup::ALL {
                for n in m.parameters(&[g]) {
                    assert!(seen.insert(n), "{n} in two groups");
                }
            }
        }
    }

    #[test]
    fn heads_share_one_architecture() {
        let m = model(VariantTag::Idf, 0);
        let counts: Vec<usize> =
            ParamGroup::HEADS.iter().map(|&g| m.parameters(&[g]).iter().map(|n| m.params()[*n].len()).sum()).collect();
        assert!(counts.windows(2).all(|w| w[0] == w[1]), "{counts:?}");
    }

    #[test]
    fn zero_image_gives_finite_heatmaps() {
        let m = model(VariantTag::Aidf, 2);
        let out = m.forward(&Tensor::zeros([2, 3, 64, 64])).unwrap();
        assert_eq!(out.inference.shape(), &[2, 8, 16, 16]);
        assert!(out.inference.is_finite() && out.adversarial_intermediate.is_finite());
    }

    #[test]
    fn variant_identities_hold_exactly() {
        let x = Tensor::from_vec([1, 3, 64, 64], (0..3 * 64 * 64).map(|i| ((i * 37) % 101) as f64 / 101.0).collect());
        for v in [VariantTag::Idf, VariantTag::Aidf] {
            let out = model(v, 5).forward(&x).unwrap();
            let inter = out.inference.zip_map(&out.inference_specific, |a, b| a - b);
            assert_eq!(inter, out.intermediate);
            let adv = out.adversarial.zip_map(&out.adversarial_specific, |a, b| a - b);
            assert_eq!(adv, out.adversarial_intermediate);
        }
    }

    #[test]
    fn unknown_group_name_is_rejected() {
        let m = model(VariantTag::Idf, 0);
        assert!(matches!(m.parameters_by_name(&["H"]), Err(Error::UnknownGroup(_))));
        assert_eq!(m.parameters_by_name(&["F′_a"]).unwrap(), m.parameters(&[ParamGroup::FaPrime]));
    }

    #[test]
    fn mismatched_heatmap_size_is_a_config_error() {
        assert!(build_model(&ModelConfig::default(), 8, (32, 32), 0).is_err());
        let bad = ModelConfig { backbone: BackboneSpec { input_shape: (3, 60, 64), ..BackboneSpec::default() }, ..ModelConfig::default() };
        assert!(build_model(&bad, 8, (16, 16), 0).is_err());
    }
}
