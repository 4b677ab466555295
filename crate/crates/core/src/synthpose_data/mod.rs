//! Procedurally generated stick-figure pose datasets with a controllable
//! domain gap between source, target and unseen domains.

mod io;
mod render;

use std::f64::consts::PI;

use autograd::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap_codec::KeypointSet;

pub use io::{generate_dataset, load_dataset, Manifest};
pub use render::render;

/// Attempts per sample before generation gives up.
pub const MAX_TRIES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
    Unseen,
}

/// Joint tree sampled by forward kinematics from a root joint.
///
/// Bone `i` connects `bones[i].0` (parent) to `bones[i].1` (child). Its angle
/// is drawn from `angle_ranges[i]`, measured relative to the parent bone's
/// direction, or absolute (0 = +x, y down) when the parent is the root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkeletonSpec {
    pub joint_names: Vec<String>,
    pub bones: Vec<(usize, usize)>,
    pub bone_length_ranges: Vec<(f64, f64)>,
    pub angle_ranges: Vec<(f64, f64)>,
    pub root: usize,
    /// `((x_min, x_max), (y_min, y_max))` in pixels.
    pub root_range: ((f64, f64), (f64, f64)),
    /// Named joint groups for metric breakdowns.
    #[serde(default)]
    pub groups: Vec<(String, Vec<usize>)>,
}

impl Default for SkeletonSpec {
    fn default() -> Self {
        let names = ["head", "neck", "l_elbow", "r_elbow", "l_wrist", "r_wrist", "hip", "ankle"];
        Self {
            joint_names: names.iter().map(|s| s.to_string()).collect(),
            bones: vec![(1, 0), (1, 2), (1, 3), (2, 4), (3, 5), (1, 6), (6, 7)],
            bone_length_ranges: vec![(5.0, 7.0), (7.0, 10.0), (7.0, 10.0), (6.0, 9.0), (6.0, 9.0), (10.0, 13.0), (9.0, 12.0)],
            angle_ranges: vec![
                (-PI / 2.0 - 0.35, -PI / 2.0 + 0.35),
                (PI - 0.9, PI + 0.9),
                (-0.9, 0.9),
                (-1.3, 1.3),
                (-1.3, 1.3),
                (PI / 2.0 - 0.3, PI / 2.0 + 0.3),
                (-0.6, 0.6),
            ],
            root: 1,
            root_range: ((27.0, 37.0), (20.0, 28.0)),
            groups: vec![
                ("head".into(), vec![0, 1]),
                ("arms".into(), vec![2, 3, 4, 5]),
                ("legs".into(), vec![6, 7]),
            ],
        }
    }
}

impl SkeletonSpec {
    pub fn keypoints(&self) -> usize {
        self.joint_names.len()
    }

    /// Bone indices in an order where every parent is placed before its child.
    fn bone_order(&self) -> Result<Vec<usize>> {
        let k = self.keypoints();
        let mut placed = vec![false; k];
        placed[self.root] = true;
        let mut order = Vec::with_capacity(self.bones.len());
        while order.len() < self.bones.len() {
            let before = order.len();
            for (i, &(p, c)) in self.bones.iter().enumerate() {
                if !order.contains(&i) && placed[p] && !placed[c] {
                    placed[c] = true;
                    order.push(i);
                }
            }
            if order.len() == before {
                return Err(Error::Config("skeleton bones do not form a tree rooted at the root joint".into()));
            }
        }
        Ok(order)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.keypoints();
        if k == 0 || self.root >= k {
            return Err(Error::Config("skeleton needs joints and a valid root".into()));
        }
        if self.bones.len() != k - 1 || self.bone_length_ranges.len() != k - 1 || self.angle_ranges.len() != k - 1 {
            return Err(Error::Config(format!("a tree over {k} joints needs {} bones with lengths and angles", k - 1)));
        }
        if self.bones.iter().any(|&(p, c)| p >= k || c >= k) {
            return Err(Error::Config("bone references an unknown joint".into()));
        }
        for &(lo, hi) in &self.bone_length_ranges {
            if !(lo > 0.0 && lo <= hi) {
                return Err(Error::Config(format!("bone length range ({lo}, {hi}) must be positive and ordered")));
            }
        }
        for &(lo, hi) in self.angle_ranges.iter().chain([self.root_range.0, self.root_range.1].iter()) {
            if !(lo <= hi) {
                return Err(Error::Config(format!("range ({lo}, {hi}) is not ordered")));
            }
        }
        if self.groups.iter().flat_map(|(_, j)| j).any(|&j| j >= k) {
            return Err(Error::Config("joint group references an unknown joint".into()));
        }
        self.bone_order().map(|_| ())
    }

    fn parent_bone(&self, joint: usize) -> Option<usize> {
        self.bones.iter().position(|&(_, c)| c == joint)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Background {
    Plain,
    Clutter,
}

/// Geometric and appearance shift applied at render time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainShift {
    pub global_scale: (f64, f64),
    /// Rotation about the image center in radians.
    pub rotation: (f64, f64),
    pub limb_thickness: (f64, f64),
    pub background: Background,
    pub noise_std: f64,
    pub brightness_shift: (f64, f64),
}

impl Default for DomainShift {
    fn default() -> Self {
        Self::source()
    }
}

impl DomainShift {
    pub fn source() -> Self {
        Self {
            global_scale: (0.9, 1.1),
            rotation: (-0.1, 0.1),
            limb_thickness: (2.0, 2.5),
            background: Background::Plain,
            noise_std: 0.0,
            brightness_shift: (0.0, 0.0),
        }
    }

    pub fn target() -> Self {
        Self {
            global_scale: (1.2, 1.5),
            rotation: (-0.4, 0.4),
            limb_thickness: (2.8, 3.6),
            background: Background::Clutter,
            noise_std: 0.05,
            brightness_shift: (-0.1, 0.1),
        }
    }

    pub fn unseen() -> Self {
        Self {
            global_scale: (0.7, 0.85),
            rotation: (0.45, 0.7),
            limb_thickness: (1.2, 1.6),
            background: Background::Clutter,
            noise_std: 0.08,
            brightness_shift: (0.1, 0.2),
        }
    }

    pub fn for_domain(domain: Domain) -> Self {
        match domain {
            Domain::Source => Self::source(),
            Domain::Target => Self::target(),
            Domain::Unseen => Self::unseen(),
        }
    }

    /// No geometric or appearance change.
    pub fn identity() -> Self {
        Self {
            global_scale: (1.0, 1.0),
            rotation: (0.0, 0.0),
            limb_thickness: (2.0, 2.0),
            background: Background::Plain,
            noise_std: 0.0,
            brightness_shift: (0.0, 0.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [
            ("global_scale", self.global_scale),
            ("rotation", self.rotation),
            ("limb_thickness", self.limb_thickness),
            ("brightness_shift", self.brightness_shift),
        ] {
            if !(lo <= hi) {
                return Err(Error::Config(format!("shift.{name} range ({lo}, {hi}) is not ordered")));
            }
        }
        if !(self.global_scale.0 > 0.0 && self.limb_thickness.0 > 0.0) {
            return Err(Error::Config("shift scale and thickness must be positive".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config("shift.noise_std must be non-negative".into()));
        }
        Ok(())
    }
}

/// One rendered image with its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseSample {
    /// `[3, H, W]` with values in `[0, 1]`, quantized to multiples of 1/255.
    pub image: Tensor,
    /// Heatmap-grid coordinates.
    pub keypoints: KeypointSet,
    pub domain: Domain,
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// Generator for sample `id` of a dataset seeded with `seed`.
pub fn sample_rng(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn pose_from(spec: &SkeletonSpec, rng: &mut impl Rng) -> Result<Vec<[f64; 2]>> {
    let k = spec.keypoints();
    let mut pts = vec![[f64::NAN; 2]; k];
    let mut dirs = vec![0.0; k];
    pts[spec.root] = [uniform(rng, spec.root_range.0), uniform(rng, spec.root_range.1)];
    for b in spec.bone_order()? {
        let (p, c) = spec.bones[b];
        let base = if p == spec.root { 0.0 } else { spec.parent_bone(p).map_or(0.0, |pb| dirs[spec.bones[pb].1]) };
        let angle = base + uniform(rng, spec.angle_ranges[b]);
        let len = uniform(rng, spec.bone_length_ranges[b]);
        dirs[c] = angle;
        pts[c] = [pts[p][0] + len * angle.cos(), pts[p][1] + len * angle.sin()];
    }
    Ok(pts)
}

/// Samples joint positions in pixels, resampling until every joint lies inside
/// an `image_size` square.
pub fn sample_pose_in(spec: &SkeletonSpec, rng: &mut impl Rng, image_size: usize) -> Result<Vec<[f64; 2]>> {
    let limit = image_size as f64;
    for _ in 0..MAX_TRIES {
        let pts = pose_from(spec, rng)?;
        if pts.iter().all(|p| p[0] >= 0.0 && p[0] < limit && p[1] >= 0.0 && p[1] < limit) {
            return Ok(pts);
        }
    }
    Err(Error::RejectionLimit(MAX_TRIES))
}

/// [`sample_pose_in`] for a 64 pixel image with a generator seeded by `rng_seed`.
pub fn sample_pose(spec: &SkeletonSpec, rng_seed: u64) -> Result<Vec<[f64; 2]>> {
    spec.validate()?;
    sample_pose_in(spec, &mut ChaCha8Rng::seed_from_u64(rng_seed), 64)
}

/// Rendering geometry shared by generation and loading.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub image_size: usize,
    /// Image pixels per heatmap cell.
    pub stride: usize,
    /// Visible joints must stay this many pixels away from the border.
    pub margin: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { image_size: 64, stride: 4, margin: 2.0 }
    }
}

impl RenderConfig {
    pub fn heatmap_size(&self) -> usize {
        self.image_size / self.stride
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.image_size == 0 || self.image_size % self.stride != 0 {
            return Err(Error::Config("render.image_size must be a positive multiple of render.stride".into()));
        }
        Ok(())
    }
}

/// Generates sample `id` deterministically from `(seed, id)`, resampling pose
/// and transform until all joints stay in bounds.
pub fn generate_sample(
    spec: &SkeletonSpec,
    shift: &DomainShift,
    render_cfg: &RenderConfig,
    domain: Domain,
    seed: u64,
    id: u64,
) -> Result<PoseSample> {
    let mut rng = sample_rng(seed, id);
    for _ in 0..MAX_TRIES {
        let pose = pose_from(spec, &mut rng)?;
        match render::render_with(&pose, &spec.bones, shift, render_cfg, domain, &mut rng) {
            Ok(sample) => return Ok(sample),
            Err(Error::OutOfBounds { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::RejectionLimit(MAX_TRIES))
}

/// Samples in memory, batched as tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N, 3, H, W]`.
    pub images: Tensor,
    pub keypoints: Vec<KeypointSet>,
    pub domain: Domain,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn from_samples(samples: Vec<PoseSample>) -> Result<Self> {
        let first = samples.first().ok_or(Error::EmptyBatch)?;
        let domain = first.domain;
        let images = Tensor::stack(&samples.iter().map(|s| s.image.clone()).collect::<Vec<_>>());
        Ok(Self { images, keypoints: samples.into_iter().map(|s| s.keypoints).collect(), domain })
    }

    /// Images and labels of the samples at `indices`.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<KeypointSet>) {
        let per = self.images.len() / self.len();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        (Tensor::from_vec(shape, data), indices.iter().map(|&i| self.keypoints[i].clone()).collect())
    }

    /// The first `n` samples.
    pub fn head(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let (images, keypoints) = self.batch(&idx);
        Self { images, keypoints, domain: self.domain }
    }
}

/// Generates `n` samples in parallel; the result does not depend on thread count.
pub fn generate(
    spec: &SkeletonSpec,
    shift: &DomainShift,
    render_cfg: &RenderConfig,
    domain: Domain,
    n: usize,
    seed: u64,
) -> Result<Dataset> {
    spec.validate()?;
    shift.validate()?;
    render_cfg.validate()?;
    let samples = (0..n as u64)
        .into_par_iter()
        .map(|id| generate_sample(spec, shift, render_cfg, domain, seed, id))
        .collect::<Result<Vec<_>>>()?;
    Dataset::from_samples(samples)
}

/// Endless seed-deterministic minibatch order: every epoch is a fresh
/// permutation drawn from `(seed, epoch)`.
#[derive(Clone, Debug)]
pub struct BatchLoader {
    len: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchLoader {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if len == 0 || batch_size == 0 {
            return Err(Error::EmptyBatch);
        }
        let mut l = Self { len, batch_size, seed, epoch: 0, order: Vec::new(), cursor: 0 };
        l.shuffle();
        Ok(l)
    }

    fn shuffle(&mut self) {
        use rand::seq::SliceRandom;
        self.order = (0..self.len).collect();
        self.order.shuffle(&mut sample_rng(self.seed, self.epoch));
        self.cursor = 0;
    }

    /// Batches per pass over the data, counting a final partial batch.
    pub fn batches_per_epoch(&self) -> usize {
        self.len.div_ceil(self.batch_size)
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Next batch of indices; wraps into a new epoch when exhausted. Batches
    /// never straddle epochs, so the last one of an epoch may be short.
    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.cursor >= self.len {
            self.epoch += 1;
            self.shuffle();
        }
        let end = (self.cursor + self.batch_size).min(self.len);
        let out = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        out
    }
}

/// Rotation by `theta` about `center`, used for both rendering and tests.
pub fn rotate_about(p: [f64; 2], center: [f64; 2], theta: f64, scale: f64) -> [f64; 2] {
    let (s, c) = theta.sin_cos();
    let (dx, dy) = (p[0] - center[0], p[1] - center[1]);
    [center[0] + scale * (c * dx - s * dy), center[1] + scale * (s * dx + c * dy)]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pose_sampling_is_deterministic() {
        let spec = SkeletonSpec::default();
        assert_eq!(sample_pose(&spec, 9).unwrap(), sample_pose(&spec, 9).unwrap());
        assert_ne!(sample_pose(&spec, 9).unwrap(), sample_pose(&spec, 10).unwrap());
    }

    #[test]
    fn bone_lengths_respect_their_ranges() {
        let spec = SkeletonSpec::default();
        for seed in 0..50 {
            let p = sample_pose(&spec, seed).unwrap();
            for (b, &(i, j)) in spec.bones.iter().enumerate() {
                let len = ((p[i][0] - p[j][0]).powi(2) + (p[i][1] - p[j][1]).powi(2)).sqrt();
                let (lo, hi) = spec.bone_length_ranges[b];
                assert!(len >= lo - 1e-9 && len <= hi + 1e-9, "bone {b}: {len}");
            }
        }
    }

    #[test]
    fn impossible_skeleton_hits_the_rejection_limit() {
        let spec = SkeletonSpec { bone_length_ranges: vec![(500.0, 600.0); 7], ..SkeletonSpec::default() };
        assert!(matches!(sample_pose(&spec, 0), Err(Error::RejectionLimit(MAX_TRIES))));
    }

    #[test]
    fn non_tree_skeleton_is_rejected() {
        let spec = SkeletonSpec { bones: vec![(1, 0), (0, 1), (1, 3), (2, 4), (3, 5), (1, 6), (6, 7)], ..SkeletonSpec::default() };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn loader_covers_every_index_once_per_epoch() {
        let mut l = BatchLoader::new(10, 4, 3).unwrap();
        let mut seen: Vec<usize> = (0..l.batches_per_epoch()).flat_map(|_| l.next_indices()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        let a: Vec<Vec<usize>> = (0..5).map(|_| l.next_indices()).collect();
        let mut l2 = BatchLoader::new(10, 4, 3).unwrap();
        for _ in 0..3 {
            l2.next_indices();
        }
        let b: Vec<Vec<usize>> = (0..5).map(|_| l2.next_indices()).collect();
        assert_eq!(a, b);
    }
}
