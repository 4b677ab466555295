//! PCK metrics, ablation orchestration and figure/table output.

mod ablation;
mod plots;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use self::ablation::*;
pub use self::plots::*;
use crate::adapt_engine::{EvalConfig, ExperimentConfig};
use crate::error::{Error, Result};
use crate::heatmap_codec::{decode_argmax_batch, KeypointSet};
use crate::model_zoo::Model;
use crate::synthpose_data::Dataset;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PckResult {
    /// Accuracy of each joint over its visible instances; `None` when a joint
    /// was never visible.
    pub per_joint: Vec<Option<f64>>,
    pub groups: BTreeMap<String, f64>,
    pub overall: f64,
    pub threshold_ratio: f64,
    pub sample_count: usize,
}

/// Fraction of visible joints within `threshold_ratio * norm_size` of the
/// ground truth, boundary included.
pub fn pck(
    preds: &[KeypointSet],
    gts: &[KeypointSet],
    threshold_ratio: f64,
    norm_size: f64,
    groups: &[(String, Vec<usize>)],
) -> Result<PckResult> {
    if preds.len() != gts.len() {
        return Err(Error::Shape(format!("{} predictions for {} ground-truth sets", preds.len(), gts.len())));
    }
    if !(norm_size > 0.0 && threshold_ratio > 0.0) {
        return Err(Error::Config(format!("norm_size ({norm_size}) and threshold_ratio ({threshold_ratio}) must be positive")));
    }
    let k = gts.first().map_or(0, KeypointSet::len);
    let threshold = threshold_ratio * norm_size;
    let mut hits = vec![0usize; k];
    let mut counts = vec![0usize; k];
    for (i, (p, t)) in preds.iter().zip(gts).enumerate() {
        if p.len() != k || t.len() != k {
            return Err(Error::Shape(format!("sample {i} does not have {k} joints")));
        }
        for j in 0..k {
            if !t.visible()[j] {
                continue;
            }
            let (a, b) = (p.coords()[j], t.coords()[j]);
            let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
            counts[j] += 1;
            hits[j] += usize::from(d <= threshold);
        }
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::NoVisibleJoints);
    }
    let ratio = |h: usize, c: usize| h as f64 / c as f64;
    let mut group_acc = BTreeMap::new();
    for (name, members) in groups {
        if let Some(&bad) = members.iter().find(|&&j| j >= k) {
            return Err(Error::Config(format!("group `{name}` refers to joint {bad} of {k}")));
        }
        let (h, c) = members.iter().fold((0, 0), |(h, c), &j| (h + hits[j], c + counts[j]));
        if c > 0 {
            group_acc.insert(name.clone(), ratio(h, c));
        }
    }
    Ok(PckResult {
        per_joint: hits.iter().zip(&counts).map(|(&h, &c)| (c > 0).then(|| ratio(h, c))).collect(),
        groups: group_acc,
        overall: ratio(hits.iter().sum(), total),
        threshold_ratio,
        sample_count: gts.len(),
    })
}

/// Hard-argmax keypoints of the inference branch over a dataset.
pub fn predict_keypoints(model: &Model, data: &Dataset, batch_size: usize) -> Result<Vec<KeypointSet>> {
    decode_argmax_batch(&model.predict(&data.images, batch_size)?)
}

fn norm_size(model: &Model, eval: &EvalConfig) -> f64 {
    eval.norm_size.unwrap_or_else(|| {
        let (h, w) = model.heatmap_size();
        h.max(w) as f64
    })
}

/// PCK of the inference branch on `data` with the skeleton's joint groups.
pub fn evaluate_model(model: &Model, data: &Dataset, cfg: &ExperimentConfig) -> Result<PckResult> {
    let preds = predict_keypoints(model, data, cfg.eval.batch_size)?;
    pck(&preds, &data.keypoints, cfg.eval.threshold_ratio, norm_size(model, &cfg.eval), &cfg.data.skeleton.groups)
}

/// Overall PCK only.
pub fn pck_of_model(model: &Model, data: &Dataset, eval: &EvalConfig) -> Result<f64> {
    let preds = predict_keypoints(model, data, eval.batch_size)?;
    Ok(pck(&preds, &data.keypoints, eval.threshold_ratio, norm_size(model, eval), &[])?.overall)
}

/// Median of finite values; the mean of the middle two for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}
