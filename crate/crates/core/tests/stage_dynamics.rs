use autograd::optim::Sgd;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use poseadapt::adapt_engine::{
    branch_gap, init_model, pretrain, pretrain_step, stage_a_step, stage_b_step, stage_c_step, ExperimentConfig, ExperimentData,
    RunOptions,
};
use poseadapt::model_zoo::{Model, ParamGroup};

fn toy(extra: &[&str]) -> (ExperimentConfig, ExperimentData) {
    let mut o: Vec<String> = [
        "backbone.feature_channels=8",
        "head_width=4",
        "data.source_count=64",
        "data.target_count=64",
        "data.eval_count=16",
        "pretrain.batch_size=8",
        "pretrain.epochs=4",
        "adapt.batch_size=8",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    o.extend(extra.iter().map(|s| s.to_string()));
    let cfg = ExperimentConfig::resolve(None, &o).unwrap();
    let data = ExperimentData::generate(&cfg).unwrap();
    (cfg, data)
}

fn pretrained(cfg: &ExperimentConfig, data: &ExperimentData) -> Model {
    let mut m = init_model(cfg).unwrap();
    pretrain(&mut m, &data.source, cfg, &RunOptions::default()).unwrap();
    m
}

fn idx(i: usize, n: usize) -> Vec<usize> {
    (0..8).map(|k| (i * 8 + k) % n).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn pretraining_gradient_matches_finite_differences() {
    let (cfg, data) = toy(&["backbone.feature_channels=4", "head_width=2"]);
    let mut model = init_model(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // Zero biases put ReLU inputs exactly on the kink; nudge every parameter off it.
    let names: Vec<String> = model.parameters(&[ParamGroup::G, ParamGroup::F]).into_iter().map(String::from).collect();
    for name in &names {
        for v in model.param_mut(name).unwrap().data_mut() {
            *v += rng.gen_range(-0.01..0.01);
        }
    }
    let (x, y) = data.source.batch(&[0, 1]);
    let loss = |m: &Model| pretrain_step(&mut m.clone(), &x, &y, &cfg, &mut Sgd::new(0.0, 0.0), 0.0, 0).unwrap().total;
    // One plain SGD step with unit rate moves every parameter by minus its gradient.
    let mut stepped = model.clone();
    pretrain_step(&mut stepped, &x, &y, &cfg, &mut Sgd::new(0.0, 0.0), 1.0, 0).unwrap();

    let (mut worst, mut scale) = (0.0f64, 0.0f64);
    for name in &names {
        let n = model.params()[name].len();
        for _ in 0..3 {
            let i = rng.gen_range(0..n);
            let analytic = model.params()[name].data()[i] - stepped.params()[name].data()[i];
            let h = 1e-6;
            let mut plus = model.clone();
            plus.param_mut(name).unwrap().data_mut()[i] += h;
            let mut minus = model.clone();
            minus.param_mut(name).unwrap().data_mut()[i] -= h;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
            worst = worst.max((analytic - numeric).abs());
            scale = scale.max(analytic.abs()).max(numeric.abs());
        }
    }
    assert!(scale > 0.0);
    assert!(worst / scale < 1e-4, "relative error {}", worst / scale);
}

#[test]
fn stage_a_pulls_the_adversarial_branch_toward_the_inference_branch() {
    let (cfg, data) = toy(&[]);
    let mut m = pretrained(&cfg, &data);
    let held = data.source_eval.batch(&(0..16).collect::<Vec<_>>()).0;
    let before = branch_gap(&m, &held).unwrap();
    let mut opt = Sgd::new(cfg.adapt.momentum, cfg.adapt.weight_decay);
    for i in 0..100 {
        let (x, y) = data.source.batch(&idx(i, data.source.len()));
        stage_a_step(&mut m, &x, &y, &cfg, &mut opt, i).unwrap();
    }
    let after = branch_gap(&m, &held).unwrap();
    assert!(after < before, "{before} -> {after}");
}

#[test]
fn stage_b_alone_drives_the_branches_apart() {
    let (cfg, data) = toy(&[]);
    let mut m = pretrained(&cfg, &data);
    let mut opt = Sgd::new(cfg.adapt.momentum, cfg.adapt.weight_decay);
    for i in 0..50 {
        let (x, y) = data.source.batch(&idx(i, data.source.len()));
        stage_a_step(&mut m, &x, &y, &cfg, &mut opt, i).unwrap();
    }
    let held = data.target_eval.batch(&(0..16).collect::<Vec<_>>()).0;
    let mut opt = Sgd::new(cfg.adapt.momentum, cfg.adapt.weight_decay);
    let mut gaps = Vec::new();
    for i in 0..200 {
        let x = data.target.batch(&idx(i, data.target.len())).0;
        stage_b_step(&mut m, &x, &cfg, &mut opt, i).unwrap();
        gaps.push(branch_gap(&m, &held).unwrap());
    }
    let (first, last) = (mean(&gaps[..20]), mean(&gaps[180..]));
    assert!(last > first, "{first} -> {last}");
}

#[test]
fn stage_c_closes_the_gap_opened_by_stage_b() {
    let (cfg, data) = toy(&[]);
    let mut m = pretrained(&cfg, &data);
    let held = data.target_eval.batch(&(0..16).collect::<Vec<_>>()).0;
    let (mut ob, mut oc) = (Sgd::new(0.9, 1e-4), Sgd::new(0.9, 1e-4));
    let mut good = 0;
    let windows = 10;
    for w in 0..windows {
        for i in 0..5 {
            let x = data.target.batch(&idx(w * 10 + i, data.target.len())).0;
            stage_b_step(&mut m, &x, &cfg, &mut ob, w * 5 + i).unwrap();
        }
        let after_b = branch_gap(&m, &held).unwrap();
        for i in 5..10 {
            let x = data.target.batch(&idx(w * 10 + i, data.target.len())).0;
            stage_c_step(&mut m, &x, &cfg, &mut oc, w * 5 + i - 5).unwrap();
        }
        good += usize::from(branch_gap(&m, &held).unwrap() < after_b);
    }
    assert!(good * 10 >= windows * 8, "{good}/{windows}");
}
