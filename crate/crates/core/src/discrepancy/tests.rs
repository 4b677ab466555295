use autograd::gradcheck::{numeric_gradient, relative_error};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::heatmap_codec::HeatmapStack;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Direct transcription of the biased multi-kernel estimator.
fn naive_mmd(a: &[Vec<f64>], b: &[Vec<f64>], bandwidths: &[f64]) -> f64 {
    let k = |x: &[f64], y: &[f64]| {
        let d: f64 = x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum();
        bandwidths.iter().map(|bw| (-d / (2.0 * bw)).exp()).sum::<f64>()
    };
    let mean = |xs: &[Vec<f64>], ys: &[Vec<f64>]| {
        let mut s = 0.0;
        for x in xs {
            for y in ys {
                s += k(x, y);
            }
        }
        s / (xs.len() * ys.len()) as f64
    };
    mean(a, a) + mean(b, b) - 2.0 * mean(a, b)
}

fn channel(t: &Tensor, k: usize) -> Vec<Vec<f64>> {
    let (b, kk, h, w) = t.dims4();
    (0..b).map(|i| t.data()[(i * kk + k) * h * w..(i * kk + k + 1) * h * w].to_vec()).collect()
}

#[test]
fn mse_examples() {
    let a = Tensor::from_vec([1, 1, 1, 2], vec![0.0, 2.0]);
    let b = Tensor::from_vec([1, 1, 1, 2], vec![1.0, 1.0]);
    assert_eq!(mse_heatmap(&a, &b).unwrap(), 1.0);
    assert_eq!(mse_heatmap(&a, &a).unwrap(), 0.0);
    let z = Tensor::zeros([2, 3, 4, 4]);
    assert_eq!(mse_heatmap(&z, &Tensor::full([2, 3, 4, 4], 1.0)).unwrap(), 1.0);
    assert!(mse_heatmap(&a, &z).is_err());
}

#[test]
fn oks_examples() {
    let oks = Oks::new(vec![0.5], 1.0);
    let t = KeypointSet::all_visible(vec![[0.0, 0.0]]).unwrap();
    let p = KeypointSet::all_visible(vec![[1.0, 0.0]]).unwrap();
    let e1 = (-1.0f64).exp();
    assert!((oks_similarity(&p, &t, &oks).unwrap() - e1).abs() < 1e-15);
    assert!((oks_loss(&p, &t, &oks).unwrap() - (1.0 - e1)).abs() < 1e-15);
    assert_eq!(oks_loss(&t, &t, &oks).unwrap(), 0.0);
    let far = KeypointSet::all_visible(vec![[1e6, 0.0]]).unwrap();
    assert!(oks_similarity(&far, &t, &oks).unwrap() < 1e-100);

    let three = Oks::new(vec![0.1; 3], 256.0);
    let s = KeypointSet::all_visible(vec![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).unwrap();
    assert_eq!(oks_similarity(&s, &s, &three).unwrap(), 3.0);
}

#[test]
fn oks_needs_a_mutually_visible_joint() {
    let oks = Oks::new(vec![0.1; 2], 256.0);
    let a = KeypointSet::new(vec![[0.0, 0.0], [1.0, 1.0]], vec![true, false]).unwrap();
    let b = KeypointSet::new(vec![[0.0, 0.0], [1.0, 1.0]], vec![false, true]).unwrap();
    assert!(matches!(oks_similarity(&a, &b, &oks), Err(Error::NoVisibleJoints)));
}

#[test]
fn oks_config_resolution() {
    let cfg = OksConfig::default();
    let oks = cfg.resolve(8, (16, 16)).unwrap();
    assert_eq!(oks.falloff, vec![0.1; 8]);
    assert_eq!(oks.area, 256.0);
    assert!(OksConfig { falloff: vec![0.1, 0.2], ..cfg.clone() }.resolve(8, (16, 16)).is_err());
    assert!(OksConfig { falloff: vec![0.0], ..cfg.clone() }.resolve(8, (16, 16)).is_err());
    assert!(OksConfig { area: Some(-1.0), ..cfg }.resolve(8, (16, 16)).is_err());
}

#[test]
fn relation_terms_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&mut rng, &[2, 2, 2, 2]);
    let b = random(&mut rng, &[2, 2, 2, 2]);
    let bw = 0.7;
    let (r1, r2, r3) = relation_terms(&a, &b, &KernelConfig::single(bw)).unwrap();
    let m = |x: &Tensor, i: usize, y: &Tensor, j: usize| naive_mmd(&channel(x, i), &channel(y, j), &[bw]);
    assert!((r1 - 0.5 * (m(&a, 0, &b, 0) + m(&a, 1, &b, 1))).abs() < 1e-12);
    // K = 2: both ordered pairs give the same value.
    assert!((r2 - m(&a, 0, &a, 1)).abs() < 1e-12);
    assert!((r3 - 0.5 * (m(&a, 0, &b, 1) + m(&a, 1, &b, 0))).abs() < 1e-12);
}

#[test]
fn identical_outputs_zero_r1() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&mut rng, &[3, 4, 3, 3]);
    let (r1, _, _) = relation_terms(&a, &a, &KernelConfig::default()).unwrap();
    assert!(r1.abs() < 1e-12);
}

#[test]
fn single_keypoint_reports_zero_pair_terms() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random(&mut rng, &[2, 1, 3, 3]);
    let b = random(&mut rng, &[2, 1, 3, 3]);
    let (r1, r2, r3) = relation_terms(&a, &b, &KernelConfig::default()).unwrap();
    assert!(r1 > 0.0);
    assert_eq!((r2, r3), (0.0, 0.0));
}

#[test]
fn report_arithmetic() {
    let r = DiscrepancyReport::from_terms([0.4, 0.3, 0.2], 0.1);
    assert!((r.inter - 0.5).abs() < 1e-15);
    assert_eq!(r.dl, r.inter - r.spec);
    let d = DiscrepancyReport::from_terms([0.4, 0.0, 0.0], 0.1);
    assert!((d.dl - 0.3).abs() < 1e-15);
}

#[test]
fn identical_heads_give_zero_dl() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, &[2, 2, 3, 3]);
    // Two identical channels make every pair term vanish as well.
    let mut same = x.clone();
    let plane = 9;
    for b in 0..2 {
        let (src, dst) = (b * 2 * plane, (b * 2 + 1) * plane);
        let row: Vec<f64> = same.data()[src..src + plane].to_vec();
        same.data_mut()[dst..dst + plane].copy_from_slice(&row);
    }
    let r = dl_from_parts(&same, &same, &same, &same, &DiscrepancyConfig::default()).unwrap();
    assert!(r.dl.abs() < 1e-12 && r.inter.abs() < 1e-12 && r.spec.abs() < 1e-12, "{r:?}");
}

#[test]
fn measure_names_parse() {
    assert_eq!("kl".parse::<Measure>().unwrap(), Measure::Kl);
    assert!(matches!("wasserstein".parse::<Measure>(), Err(Error::Config(_))));
    assert!(serde_json::from_str::<Measure>("\"huber\"").is_err());
}

#[test]
fn relation_mask_serde() {
    let m: RelationMask = serde_json::from_str(r#"["r1", "r3"]"#).unwrap();
    assert_eq!(m, RelationMask { r1: true, r2: false, r3: true });
    assert_eq!(serde_json::to_string(&m).unwrap(), r#"["r1","r3"]"#);
    assert!(serde_json::from_str::<RelationMask>(r#"["r4"]"#).is_err());
}

#[test]
fn ground_false_examples() {
    let n = 9;
    let mut one_hot = Tensor::full([1, 3, 3], -1e4);
    one_hot.data_mut()[4] = 1e4;
    let q = ground_false_heatmap(&HeatmapStack::new(one_hot, 1.0).unwrap());
    for (i, v) in q.values().data().iter().enumerate() {
        let want = if i == 4 { 0.0 } else { 1.0 / (n - 1) as f64 };
        assert!((v - want).abs() < 1e-12);
    }
    let uniform = ground_false_heatmap(&HeatmapStack::new(Tensor::full([2, 3, 3], 0.3), 1.0).unwrap());
    for v in uniform.values().data() {
        assert!((v - 1.0 / n as f64).abs() < 1e-15);
    }
}

fn check_relation_grad(measure: Measure, mask: RelationMask, symmetric_r2: bool, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = vec![random(&mut rng, &[3, 3, 2, 3]), random(&mut rng, &[3, 3, 2, 3])];
    let weights = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
    let cfg = DiscrepancyConfig { measure, relations: mask, symmetric_r2, ..DiscrepancyConfig::default() };
    let build = |g: &Graph, xs: &[Tensor], param: bool| {
        let leaf = |t: &Tensor| if param { g.param(t.clone()) } else { g.constant(t.clone()) };
        let (a, b) = (leaf(&xs[0]), leaf(&xs[1]));
        let r = relation_node(g, a, b, &cfg).unwrap();
        let terms: Vec<(Var, f64)> = (0..3).map(|i| (g.select(r, i), weights[i])).collect();
        (g.weighted_sum(&terms), a, b)
    };
    let g = Graph::new();
    let (loss, a, b) = build(&g, &inputs, true);
    let grads = g.backward(loss);
    let f = |xs: &[Tensor]| {
        let g = Graph::new();
        let (l, _, _) = build(&g, xs, false);
        g.item(l)
    };
    for (which, v) in [(0, a), (1, b)] {
        let numeric = numeric_gradient(f, &inputs, which, 1e-5);
        let err = relative_error(grads.get(v).unwrap(), &numeric);
        assert!(err < 1e-6, "{measure:?} input {which}: relative error {err}");
    }
}

#[test]
fn relation_gradients_match_finite_differences() {
    for (i, measure) in [Measure::Mmd, Measure::Mse, Measure::Kl].into_iter().enumerate() {
        check_relation_grad(measure, RelationMask::ALL, false, 10 + i as u64);
        check_relation_grad(measure, RelationMask::ALL, true, 20 + i as u64);
        check_relation_grad(measure, RelationMask { r1: false, r2: true, r3: true }, false, 30 + i as u64);
    }
}

#[test]
fn mmd_keypoint_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    for estimator in [Estimator::Biased, Estimator::Unbiased] {
        let cfg = KernelConfig { estimator, ..KernelConfig::default() };
        let inputs = vec![random(&mut rng, &[3, 5]), random(&mut rng, &[4, 5])];
        let f = |xs: &[Tensor]| {
            let a: Vec<&[f64]> = xs[0].data().chunks(5).collect();
            let b: Vec<&[f64]> = xs[1].data().chunks(5).collect();
            mmd_keypoint(&a, &b, &cfg).unwrap()
        };
        let a: Vec<&[f64]> = inputs[0].data().chunks(5).collect();
        let b: Vec<&[f64]> = inputs[1].data().chunks(5).collect();
        let (v, ga, gb) = mmd_keypoint_with_grad(&a, &b, &cfg).unwrap();
        assert!((v - f(&inputs)).abs() < 1e-14);
        let ga = Tensor::from_vec([3, 5], ga.concat());
        let gb = Tensor::from_vec([4, 5], gb.concat());
        assert!(relative_error(&ga, &numeric_gradient(f, &inputs, 0, 1e-5)) < 1e-6);
        assert!(relative_error(&gb, &numeric_gradient(f, &inputs, 1, 1e-5)) < 1e-6);
    }
}

#[test]
fn oks_node_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    for squared_distance in [false, true] {
        let oks = Oks { falloff: vec![0.1, 0.3, 0.2], area: 4.0, squared_distance };
        let inputs = vec![random(&mut rng, &[2, 3, 2]), random(&mut rng, &[2, 3, 2])];
        let visible = vec![true, false, true, true, true, false];
        let build = |g: &Graph, xs: &[Tensor], param: bool| {
            let p = if param { g.param(xs[0].clone()) } else { g.constant(xs[0].clone()) };
            let t = g.constant(xs[1].clone());
            (oks_loss_node(g, p, t, &visible, &oks).unwrap(), p)
        };
        let g = Graph::new();
        let (loss, p) = build(&g, &inputs, true);
        let grads = g.backward(loss);
        let f = |xs: &[Tensor]| {
            let g = Graph::new();
            g.item(build(&g, xs, false).0)
        };
        let err = relative_error(grads.get(p).unwrap(), &numeric_gradient(f, &inputs, 0, 1e-6));
        assert!(err < 1e-6, "squared={squared_distance}: {err}");
    }
}

#[test]
fn oks_node_matches_value_level_loss() {
    let oks = Oks::new(vec![0.1; 2], 256.0);
    let pred = Tensor::from_vec([1, 2, 2], vec![1.0, 2.0, 5.0, 5.0]);
    let target = Tensor::from_vec([1, 2, 2], vec![1.5, 2.0, 4.0, 7.0]);
    let g = Graph::new();
    let l = oks_loss_node(&g, g.constant(pred), g.constant(target), &[true, true], &oks).unwrap();
    let p = KeypointSet::all_visible(vec![[1.0, 2.0], [5.0, 5.0]]).unwrap();
    let t = KeypointSet::all_visible(vec![[1.5, 2.0], [4.0, 7.0]]).unwrap();
    assert!((g.item(l) - oks_loss(&p, &t, &oks).unwrap()).abs() < 1e-15);
}

#[test]
fn dl_node_matches_value_level_report_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let t: Vec<Tensor> = (0..4).map(|_| random(&mut rng, &[2, 3, 3, 3])).collect();
    for terms in [DlTerms::Full, DlTerms::Inter, DlTerms::Spec] {
        let cfg = DiscrepancyConfig { terms, ..DiscrepancyConfig::default() };
        let g = Graph::new();
        let v: Vec<Var> = t.iter().map(|x| g.param(x.clone())).collect();
        let node = dl_node(&g, (v[0], v[1]), (v[2], v[3]), &cfg).unwrap().unwrap();
        let report = dl_from_parts(&t[0], &t[1], &t[2], &t[3], &cfg).unwrap();
        assert_eq!(node.report, report);
        assert_eq!(g.item(node.dl), report.dl);
        assert_eq!(report.inter, report.r1 + report.r2 - report.r3);
        assert_eq!(report.dl, report.inter - report.spec);
    }
    let none = DiscrepancyConfig { terms: DlTerms::None, ..DiscrepancyConfig::default() };
    let g = Graph::new();
    let v: Vec<Var> = t.iter().map(|x| g.param(x.clone())).collect();
    assert!(dl_node(&g, (v[0], v[1]), (v[2], v[3]), &none).unwrap().is_none());
}

#[test]
fn mse_measure_compares_softmax_normalized_channels() {
    let f = Tensor::from_vec([1, 1, 1, 2], vec![0.0, 0.0]);
    let fa = Tensor::from_vec([1, 1, 1, 2], vec![3f64.ln(), 0.0]);
    let zero = Tensor::zeros(&[1, 1, 1, 2]);
    let cfg = DiscrepancyConfig { measure: Measure::Mse, ..DiscrepancyConfig::default() };
    // softmax gives (0.5, 0.5) against (0.75, 0.25).
    let r = dl_from_parts(&f, &fa, &zero, &zero, &cfg).unwrap();
    assert!((r.r1 - 0.0625).abs() < 1e-12, "{}", r.r1);
}
