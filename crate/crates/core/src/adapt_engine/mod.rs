//! Source pretraining and the three-stage adversarial adaptation loop.

mod config;
mod record;

use std::path::{Path, PathBuf};

use autograd::optim::{Adam, Optimizer, Sgd};
use autograd::{Gradients, Graph, Var};

pub use self::config::*;
pub use self::record::*;
use crate::discrepancy::{dl_node, ground_false_batch, DiscrepancyConfig, DiscrepancyReport, DlTerms};
use crate::error::{Error, Result};
use crate::eval_report::pck_of_model;
use crate::heatmap_codec::{coords_tensor, encode_batch, soft_argmax, KeypointSet};
use crate::model_zoo::{save_checkpoint, ForwardPlan, Leaves, Model, ParamGroup, VariantTag};
use crate::synthpose_data::{generate, generate_dataset, load_dataset, BatchLoader, Dataset, Domain, DomainShift, Manifest};
use crate::Tensor;

use ParamGroup::{FPrime, Fa, FaPrime, F, G};

/// Mixes `seed` with a stream label into an independent seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_SOURCE: u64 = 1;
const STREAM_TARGET: u64 = 2;
const STREAM_TARGET_EVAL: u64 = 3;
const STREAM_SOURCE_EVAL: u64 = 4;
const STREAM_UNSEEN_EVAL: u64 = 5;
const STREAM_PRETRAIN_LOADER: u64 = 11;
const STREAM_SOURCE_LOADER: u64 = 12;
const STREAM_TARGET_LOADER: u64 = 13;
const STREAM_PROBE: u64 = 14;
const STREAM_MODEL: u64 = 21;

/// One generated split: its directory name, domain, size and seed.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitSpec {
    pub name: &'static str,
    pub domain: Domain,
    pub count: usize,
    pub seed: u64,
}

/// The five splits of an experiment in a fixed order: source, target,
/// source_eval, target_eval, unseen_eval.
pub fn split_specs(cfg: &ExperimentConfig) -> [SplitSpec; 5] {
    let d = &cfg.data;
    let spec = |name, domain, count, stream| SplitSpec { name, domain, count, seed: derive_seed(cfg.seed, stream) };
    [
        spec("source", Domain::Source, d.source_count, STREAM_SOURCE),
        spec("target", Domain::Target, d.target_count, STREAM_TARGET),
        spec("source_eval", Domain::Source, d.eval_count, STREAM_SOURCE_EVAL),
        spec("target_eval", Domain::Target, d.eval_count, STREAM_TARGET_EVAL),
        spec("unseen_eval", Domain::Unseen, d.eval_count, STREAM_UNSEEN_EVAL),
    ]
}

impl DataConfig {
    pub fn shift(&self, domain: Domain) -> &DomainShift {
        match domain {
            Domain::Source => &self.source,
            Domain::Target => &self.target,
            Domain::Unseen => &self.unseen,
        }
    }
}

/// All splits of one experiment. Target training labels are never read by
/// the adaptation loop.
#[derive(Clone, Debug)]
pub struct ExperimentData {
    pub source: Dataset,
    pub target: Dataset,
    pub source_eval: Dataset,
    pub target_eval: Dataset,
    pub unseen_eval: Dataset,
}

impl ExperimentData {
    fn from_splits(mut splits: Vec<Dataset>) -> Self {
        let unseen_eval = splits.pop().expect("five splits");
        let target_eval = splits.pop().expect("five splits");
        let source_eval = splits.pop().expect("five splits");
        let target = splits.pop().expect("five splits");
        let source = splits.pop().expect("five splits");
        Self { source, target, source_eval, target_eval, unseen_eval }
    }

    pub fn generate(cfg: &ExperimentConfig) -> Result<Self> {
        let d = &cfg.data;
        let splits = split_specs(cfg)
            .iter()
            .map(|s| generate(&d.skeleton, d.shift(s.domain), &d.render, s.domain, s.count, s.seed))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_splits(splits))
    }

    /// Writes every split under `dir/<split name>/`.
    pub fn write(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<Manifest>> {
        let d = &cfg.data;
        split_specs(cfg)
            .iter()
            .map(|s| generate_dataset(&d.skeleton, d.shift(s.domain), &d.render, s.domain, s.count, s.seed, &dir.join(s.name)))
            .collect()
    }

    /// Reads splits written by [`ExperimentData::write`], checking that each
    /// manifest matches what `cfg` would generate.
    pub fn load(cfg: &ExperimentConfig, dir: &Path) -> Result<Self> {
        let d = &cfg.data;
        let mut splits = Vec::new();
        for s in split_specs(cfg) {
            let path = dir.join(s.name);
            let (data, m) = load_dataset(&path)?;
            if m.seed != s.seed || m.count != s.count || m.domain != s.domain || &m.shift != d.shift(s.domain) || m.spec != d.skeleton || m.render != d.render {
                return Err(Error::format(path, "dataset was generated with a different configuration or seed"));
            }
            splits.push(data);
        }
        Ok(Self::from_splits(splits))
    }
}

/// Freshly initialized model for `cfg`.
pub fn init_model(cfg: &ExperimentConfig) -> Result<Model> {
    crate::model_zoo::build_model(&cfg.model_config(), cfg.keypoints(), cfg.codec.heatmap_size, derive_seed(cfg.seed, STREAM_MODEL))
}

/// Discrepancy settings as applied to `variant`. The baseline's specific part
/// is identically zero, so its specific term is dropped.
fn effective_discrepancy(cfg: &ExperimentConfig, variant: VariantTag) -> DiscrepancyConfig {
    let mut d = cfg.discrepancy();
    if variant == VariantTag::Baseline {
        d.terms = match d.terms {
            DlTerms::Full | DlTerms::Inter => DlTerms::Inter,
            DlTerms::Spec | DlTerms::None => DlTerms::None,
        };
    }
    d
}

fn check_finite(stage: &str, iteration: usize, what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { stage: stage.into(), iteration, detail: format!("{what} = {v}") })
    }
}

/// Applies gradients of every trainable leaf. Nothing is written unless all
/// gradients are finite.
fn apply_update(
    model: &mut Model,
    g: &Graph,
    leaves: &Leaves,
    mut grads: Gradients,
    opt: &mut dyn Optimizer,
    lr: impl Fn(ParamGroup) -> f64,
    stage: &str,
    iteration: usize,
) -> Result<()> {
    let mut updates = Vec::new();
    for (name, &var) in leaves {
        if !g.requires_grad(var) {
            continue;
        }
        let Some(grad) = grads.take(var) else { continue };
        if !grad.is_finite() {
            return Err(Error::NonFinite { stage: stage.into(), iteration, detail: format!("gradient of {name}") });
        }
        updates.push((name, grad));
    }
    for (name, grad) in updates {
        let group = ParamGroup::of_param(name).expect("leaf names carry their group");
        let param = model.param_mut(name).expect("leaf names come from the model");
        opt.step(name, param, &grad, lr(group));
    }
    Ok(())
}

fn value(g: &Graph, v: Var) -> f64 {
    g.item(v)
}

fn report_checked(stage: &str, iteration: usize, report: &DiscrepancyReport) -> Result<()> {
    if report.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { stage: stage.into(), iteration, detail: format!("discrepancy report {report:?}") })
    }
}

/// One supervised step on {G, F}: heatmap regression plus the OKS loss of the
/// soft-argmax coordinates.
pub fn pretrain_step(
    model: &mut Model,
    images: &Tensor,
    labels: &[KeypointSet],
    cfg: &ExperimentConfig,
    opt: &mut dyn Optimizer,
    lr: f64,
    iteration: usize,
) -> Result<PretrainLosses> {
    let oks = cfg.oks.resolve(model.keypoints(), model.heatmap_size())?;
    let targets = encode_batch(labels, &cfg.codec)?;
    let (coords, visible) = coords_tensor(labels);

    let g = Graph::new();
    let plan = ForwardPlan::frozen().train(&[G, F]).with_heads(&[F]);
    let (heads, leaves) = model.forward_graph(&g, images, &plan)?;
    let mse = g.mse(heads.inference, g.constant(targets));
    let mut terms = vec![(mse, 1.0)];
    let mut oks_value = 0.0;
    if cfg.pretrain.oks_weight > 0.0 {
        let pred = soft_argmax(&g, heads.inference, cfg.codec.soft_argmax_temperature);
        let o = crate::discrepancy::oks_loss_node(&g, pred, g.constant(coords), &visible, &oks)?;
        oks_value = value(&g, o);
        terms.push((o, cfg.pretrain.oks_weight));
    }
    let total = g.weighted_sum(&terms);
    let losses = PretrainLosses { mse: value(&g, mse), oks: oks_value, total: value(&g, total) };
    check_finite("pretrain", iteration, "loss", losses.total)?;
    let grads = g.backward(total);
    apply_update(model, &g, &leaves, grads, opt, |_| lr, "pretrain", iteration)?;
    Ok(losses)
}

/// Learning rate of `group` at adaptation `iteration`.
pub fn adapt_lr(cfg: &AdaptConfig, group: ParamGroup, iteration: usize) -> f64 {
    let base = if group == G { cfg.lr_backbone } else { cfg.lr_heads };
    base * cfg.decay(iteration)
}

/// Stage A on a labelled source batch: supervised loss plus agreement of the
/// second inference head and the adversarial head with `F`. Updates
/// {G, F, F', F_a}.
pub fn stage_a_step(
    model: &mut Model,
    images: &Tensor,
    labels: &[KeypointSet],
    cfg: &ExperimentConfig,
    opt: &mut dyn Optimizer,
    iteration: usize,
) -> Result<StageALosses> {
    let targets = encode_batch(labels, &cfg.codec)?;
    let g = Graph::new();
    let groups: Vec<ParamGroup> = [G, F, FPrime, Fa].into_iter().filter(|&p| model.has_group(p)).collect();
    let plan = ForwardPlan::frozen().train(&groups).with_heads(&[F, FPrime, Fa]);
    let (heads, leaves) = model.forward_graph(&g, images, &plan)?;
    let sup = g.mse(heads.inference, g.constant(targets));
    let mut terms = vec![(sup, 1.0)];
    let mut warm_second = 0.0;
    if let Some(second) = heads.inference_second.filter(|_| cfg.alpha1 > 0.0) {
        let t = g.mse(heads.inference, second);
        warm_second = value(&g, t);
        terms.push((t, cfg.alpha1));
    }
    let mut warm_adversarial = 0.0;
    if let Some(adv) = heads.adversarial.filter(|_| cfg.alpha2 > 0.0) {
        let t = g.mse(heads.inference, adv);
        warm_adversarial = value(&g, t);
        terms.push((t, cfg.alpha2));
    }
    let total = g.weighted_sum(&terms);
    let losses = StageALosses { supervised: value(&g, sup), warm_second, warm_adversarial, total: value(&g, total) };
    check_finite("A", iteration, "loss", losses.total)?;
    let grads = g.backward(total);
    apply_update(model, &g, &leaves, grads, opt, |p| adapt_lr(&cfg.adapt, p, iteration), "A", iteration)?;
    Ok(losses)
}

fn discrepancy_term(g: &Graph, heads: &crate::model_zoo::HeadVars, d: &DiscrepancyConfig) -> Result<Option<(Var, DiscrepancyReport)>> {
    let pair = |a: Option<Var>, b: Option<Var>| a.zip(b);
    let (Some(inter), Some(spec)) = (
        pair(heads.intermediate, heads.adversarial_intermediate),
        pair(heads.inference_specific, heads.adversarial_specific),
    ) else {
        return Ok(None);
    };
    Ok(dl_node(g, inter, spec, d)?.map(|n| (n.dl, n.report)))
}

/// Stage B on an unlabelled target batch: pushes the adversarial branch away
/// from the inference branch. Updates {F_a, F'_a}.
pub fn stage_b_step(
    model: &mut Model,
    images: &Tensor,
    cfg: &ExperimentConfig,
    opt: &mut dyn Optimizer,
    iteration: usize,
) -> Result<StageBLosses> {
    let d = effective_discrepancy(cfg, model.variant());
    let use_dl = cfg.beta > 0.0 && d.terms != DlTerms::None;
    let groups: Vec<ParamGroup> = [Fa, FaPrime].into_iter().filter(|&p| model.has_group(p)).collect();
    let heads_needed: &[ParamGroup] = if use_dl { &ParamGroup::HEADS } else { &[F, Fa] };
    let g = Graph::new();
    let plan = ForwardPlan::frozen().train(&groups).with_heads(heads_needed);
    let (heads, leaves) = model.forward_graph(&g, images, &plan)?;
    let adv = heads.adversarial.ok_or_else(|| Error::Config("stage B needs the adversarial head".into()))?;

    let heatmap = match cfg.maximization {
        Maximization::GroundFalse => {
            let target = ground_false_batch(&g.value(heads.inference));
            g.mse(adv, g.constant(target))
        }
        Maximization::Negation => g.scale(g.mse(heads.inference, adv), -1.0),
    };
    let mut terms = vec![(heatmap, 1.0)];
    let mut report = None;
    if use_dl {
        if let Some((dl, r)) = discrepancy_term(&g, &heads, &d)? {
            report_checked("B", iteration, &r)?;
            report = Some(r);
            terms.push((dl, -cfg.beta));
        }
    }
    let total = g.weighted_sum(&terms);
    let losses = StageBLosses { heatmap: value(&g, heatmap), report, total: value(&g, total) };
    check_finite("B", iteration, "loss", losses.total)?;
    let grads = g.backward(total);
    apply_update(model, &g, &leaves, grads, opt, |p| adapt_lr(&cfg.adapt, p, iteration), "B", iteration)?;
    Ok(losses)
}

/// Stage C on an unlabelled target batch: pulls the two branches together
/// through the extractor. Updates {G}.
pub fn stage_c_step(
    model: &mut Model,
    images: &Tensor,
    cfg: &ExperimentConfig,
    opt: &mut dyn Optimizer,
    iteration: usize,
) -> Result<StageCLosses> {
    let d = effective_discrepancy(cfg, model.variant());
    let use_dl = cfg.gamma > 0.0 && d.terms != DlTerms::None;
    let oks = cfg.oks.resolve(model.keypoints(), model.heatmap_size())?;
    let heads_needed: &[ParamGroup] = if use_dl { &ParamGroup::HEADS } else { &[F, Fa] };
    let g = Graph::new();
    let plan = ForwardPlan::frozen().train(&[G]).with_heads(heads_needed);
    let (heads, leaves) = model.forward_graph(&g, images, &plan)?;
    let adv = heads.adversarial.ok_or_else(|| Error::Config("stage C needs the adversarial head".into()))?;

    let mse = g.mse(heads.inference, adv);
    let t = cfg.codec.soft_argmax_temperature;
    let (pa, pb) = (soft_argmax(&g, heads.inference, t), soft_argmax(&g, adv, t));
    let visible = vec![true; images.shape()[0] * model.keypoints()];
    let o = crate::discrepancy::oks_loss_node(&g, pa, pb, &visible, &oks)?;
    let mut terms = vec![(mse, 1.0), (o, 1.0)];
    let mut report = None;
    if use_dl {
        if let Some((dl, r)) = discrepancy_term(&g, &heads, &d)? {
            report_checked("C", iteration, &r)?;
            report = Some(r);
            terms.push((dl, cfg.gamma));
        }
    }
    let total = g.weighted_sum(&terms);
    let losses = StageCLosses { mse: value(&g, mse), oks: value(&g, o), report, total: value(&g, total) };
    check_finite("C", iteration, "loss", losses.total)?;
    let grads = g.backward(total);
    apply_update(model, &g, &leaves, grads, opt, |p| adapt_lr(&cfg.adapt, p, iteration), "C", iteration)?;
    Ok(losses)
}

/// `mse(F∘G, F_a∘G)` without recording gradients.
pub fn branch_gap(model: &Model, images: &Tensor) -> Result<f64> {
    let g = Graph::new();
    let (heads, _) = model.forward_graph(&g, images, &ForwardPlan::frozen().with_heads(&[F, Fa]))?;
    let adv = heads.adversarial.ok_or_else(|| Error::Config("the model has no adversarial head".into()))?;
    let m = g.mse(heads.inference, adv);
    Ok(g.item(m))
}

/// Optional outputs and monitoring for a training run.
#[derive(Clone, Debug, Default)]
pub struct RunOptions<'a> {
    /// Directory for periodic checkpoints.
    pub run_dir: Option<PathBuf>,
    /// Labelled target split for periodic PCK validation.
    pub validation: Option<&'a Dataset>,
    /// Target images for the branch-disagreement probe.
    pub probe: Option<&'a Dataset>,
}

fn checkpoint(model: &Model, cfg: &ExperimentConfig, opts: &RunOptions, name: &str) -> Result<()> {
    if let Some(dir) = &opts.run_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_checkpoint(&dir.join(name), model, &cfg.to_value())?;
    }
    Ok(())
}

fn validate_epoch(model: &Model, cfg: &ExperimentConfig, opts: &RunOptions, epoch: usize, iteration: usize, log: &mut TrainLog) -> Result<()> {
    let every = cfg.eval.validate_every;
    if let Some(val) = opts.validation.filter(|_| every > 0 && (epoch + 1) % every == 0) {
        let pck = pck_of_model(model, val, &cfg.eval)?;
        log::info!("epoch {epoch}: validation PCK {pck:.4}");
        log.push(LogRecord::Validation { iteration, epoch, pck });
    }
    Ok(())
}

/// Supervised training of {G, F} on the source set with Adam and step decay.
pub fn pretrain(model: &mut Model, source: &Dataset, cfg: &ExperimentConfig, opts: &RunOptions) -> Result<TrainLog> {
    let p = &cfg.pretrain;
    let mut loader = BatchLoader::new(source.len(), p.batch_size, derive_seed(cfg.seed, STREAM_PRETRAIN_LOADER))?;
    let per_epoch = p.iters_per_epoch.unwrap_or_else(|| loader.batches_per_epoch());
    let mut opt = Adam::default();
    let mut log = TrainLog::default();
    let mut iteration = 0;
    for epoch in 0..p.epochs {
        let lr = p.lr_at(epoch);
        let snapshot = model.clone();
        for _ in 0..per_epoch {
            let (images, labels) = source.batch(&loader.next_indices());
            match pretrain_step(model, &images, &labels, cfg, &mut opt, lr, iteration) {
                Ok(losses) => log.push(LogRecord::Pretrain { iteration, epoch, lr, losses }),
                Err(e) => {
                    *model = snapshot;
                    return Err(e);
                }
            }
            iteration += 1;
        }
        validate_epoch(model, cfg, opts, epoch, iteration, &mut log)?;
        if let Some(last) = log.records.iter().rev().find_map(|r| match r {
            LogRecord::Pretrain { losses, .. } => Some(losses.total),
            _ => None,
        }) {
            log::debug!("pretrain epoch {epoch}: last loss {last:.5}");
        }
    }
    checkpoint(model, cfg, opts, "pretrained.ckpt")?;
    Ok(log)
}

/// Per-stage optimizer state for the adaptation loop.
#[derive(Clone, Debug)]
pub struct StageOptimizers {
    pub a: Sgd,
    pub b: Sgd,
    pub c: Sgd,
}

impl StageOptimizers {
    pub fn new(cfg: &AdaptConfig) -> Self {
        let sgd = || Sgd::new(cfg.momentum, cfg.weight_decay);
        Self { a: sgd(), b: sgd(), c: sgd() }
    }
}

/// Runs A, B and C once per iteration, pairing one source batch with one
/// target batch. On a non-finite loss the model is restored to the start of
/// the failing epoch and the error is returned; checkpoints already written
/// are kept.
pub fn adapt(model: &mut Model, source: &Dataset, target: &Dataset, cfg: &ExperimentConfig, opts: &RunOptions) -> Result<TrainLog> {
    let a = &cfg.adapt;
    let mut src = BatchLoader::new(source.len(), a.batch_size, derive_seed(cfg.seed, STREAM_SOURCE_LOADER))?;
    let mut tgt = BatchLoader::new(target.len(), a.batch_size, derive_seed(cfg.seed, STREAM_TARGET_LOADER))?;
    let per_epoch = a.iters_per_epoch.unwrap_or_else(|| tgt.batches_per_epoch());
    let probe_images = match opts.probe.filter(|_| a.probe_every > 0) {
        Some(p) => {
            let mut idx: Vec<usize> = (0..p.len()).collect();
            use rand::seq::SliceRandom;
            idx.shuffle(&mut crate::synthpose_data::sample_rng(derive_seed(cfg.seed, STREAM_PROBE), 0));
            idx.truncate(a.probe_batch.max(1));
            Some(p.batch(&idx).0)
        }
        None => None,
    };

    let mut opt = StageOptimizers::new(a);
    let mut log = TrainLog::default();
    let mut iteration = 0;
    for epoch in 0..a.epochs {
        let snapshot = model.clone();
        for _ in 0..per_epoch {
            let (s_images, s_labels) = source.batch(&src.next_indices());
            let (t_images, _) = target.batch(&tgt.next_indices());
            let probing = probe_images.as_ref().filter(|_| iteration % a.probe_every.max(1) == 0);
            let step = (|| -> Result<LogRecord> {
                let la = stage_a_step(model, &s_images, &s_labels, cfg, &mut opt.a, iteration)?;
                let before_b = probing.map(|p| branch_gap(model, p)).transpose()?;
                let lb = stage_b_step(model, &t_images, cfg, &mut opt.b, iteration)?;
                let after_b = probing.map(|p| branch_gap(model, p)).transpose()?;
                let lc = stage_c_step(model, &t_images, cfg, &mut opt.c, iteration)?;
                let after_c = probing.map(|p| branch_gap(model, p)).transpose()?;
                let probe = match (before_b, after_b, after_c) {
                    (Some(before_b), Some(after_b), Some(after_c)) => Some(Probe { before_b, after_b, after_c }),
                    _ => None,
                };
                Ok(LogRecord::Adapt { iteration, epoch, a: la, b: lb, c: lc, probe })
            })();
            match step {
                Ok(r) => log.push(r),
                Err(e) => {
                    log::error!("adaptation aborted at iteration {iteration}: {e}");
                    *model = snapshot;
                    return Err(e);
                }
            }
            iteration += 1;
        }
        validate_epoch(model, cfg, opts, epoch, iteration, &mut log)?;
        if a.checkpoint_every > 0 && (epoch + 1) % a.checkpoint_every == 0 {
            checkpoint(model, cfg, opts, &format!("adapt_epoch{:03}.ckpt", epoch + 1))?;
        }
    }
    checkpoint(model, cfg, opts, "adapted.ckpt")?;
    Ok(log)
}
