//! Multi-kernel Gaussian MMD² over sets of flattened heatmap channels.
//!
//! Everything works off a [`DistanceTable`] of squared distances between all
//! rows of one sample matrix, so that the many keypoint pairs of the relation
//! terms share a single distance computation. Gradients are accumulated as a
//! coefficient per ordered row pair (`d loss / d D_pq`) and turned into row
//! gradients once at the end by [`DistanceTable::row_gradients`].

use std::fmt;

use autograd::linalg::{gemm, Trans};
use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Base bandwidth of the kernel family.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BaseBandwidth {
    /// Median squared distance over all pairs of the pooled samples.
    Median,
    Fixed(f64),
}

impl Serialize for BaseBandwidth {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Self::Median => s.serialize_str("median"),
            Self::Fixed(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for BaseBandwidth {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = BaseBandwidth;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("\"median\" or a positive number")
            }
            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<BaseBandwidth, E> {
                match v {
                    "median" => Ok(BaseBandwidth::Median),
                    other => Err(E::invalid_value(de::Unexpected::Str(other), &self)),
                }
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<BaseBandwidth, E> {
                Ok(BaseBandwidth::Fixed(v))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<BaseBandwidth, E> {
                Ok(BaseBandwidth::Fixed(v as f64))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<BaseBandwidth, E> {
                Ok(BaseBandwidth::Fixed(v as f64))
            }
        }
        d.deserialize_any(V)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Biased,
    Unbiased,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelConfig {
    pub kernel_count: usize,
    pub bandwidth_multiplier: f64,
    pub base_bandwidth: BaseBandwidth,
    pub estimator: Estimator,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            kernel_count: 5,
            bandwidth_multiplier: 2.0,
            base_bandwidth: BaseBandwidth::Median,
            estimator: Estimator::Biased,
        }
    }
}

impl KernelConfig {
    /// A single Gaussian `exp(-d² / (2 * bandwidth))`.
    pub fn single(bandwidth: f64) -> Self {
        Self { kernel_count: 1, base_bandwidth: BaseBandwidth::Fixed(bandwidth), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_count == 0 {
            return Err(Error::Config("kernel.kernel_count must be at least 1".into()));
        }
        if self.kernel_count > 1 && !(self.bandwidth_multiplier > 1.0) {
            return Err(Error::Config("kernel.bandwidth_multiplier must exceed 1 with several kernels".into()));
        }
        if let BaseBandwidth::Fixed(b) = self.base_bandwidth {
            if !(b > 0.0) {
                return Err(Error::Config(format!("kernel.base_bandwidth must be positive, got {b}")));
            }
        }
        Ok(())
    }

    /// Bandwidth multipliers `m^j` with exponents centered on zero.
    fn scales(&self) -> Vec<f64> {
        let center = (self.kernel_count as f64 - 1.0) / 2.0;
        (0..self.kernel_count).map(|j| self.bandwidth_multiplier.powf(j as f64 - center)).collect()
    }
}

/// Bandwidth used when the median squared distance is zero.
pub const FALLBACK_BANDWIDTH: f64 = 1.0;

/// Squared Euclidean distances between all rows of an `n x dim` matrix.
pub(crate) struct DistanceTable {
    n: usize,
    dim: usize,
    rows: Vec<f64>,
    d2: Vec<f64>,
}

impl DistanceTable {
    pub fn new(rows: Vec<f64>, dim: usize) -> Self {
        let n = if dim == 0 { 0 } else { rows.len() / dim };
        let mut d2 = vec![0.0; n * n];
        for i in 0..n {
            let ri = &rows[i * dim..(i + 1) * dim];
            for j in i + 1..n {
                let rj = &rows[j * dim..(j + 1) * dim];
                let s: f64 = ri.iter().zip(rj).map(|(a, b)| (a - b) * (a - b)).sum();
                d2[i * n + j] = s;
                d2[j * n + i] = s;
            }
        }
        Self { n, dim, rows, d2 }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    fn get(&self, i: usize, j: usize) -> f64 {
        self.d2[i * self.n + j]
    }

    /// Row gradients from pair coefficients `coef[p * n + q] = dL / dD_pq`.
    pub fn row_gradients(&self, coef: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut sym = vec![0.0; n * n];
        let mut rowsum = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                let s = coef[i * n + j] + coef[j * n + i];
                sym[i * n + j] = s;
                rowsum[i] += s;
            }
        }
        // dL/dv_i = 2 * sum_j S_ij (v_i - v_j)
        let mut out = vec![0.0; n * self.dim];
        gemm(Trans::No, Trans::No, n, self.dim, n, -2.0, &sym, &self.rows, 0.0, &mut out);
        for i in 0..n {
            let r = 2.0 * rowsum[i];
            for (o, v) in out[i * self.dim..(i + 1) * self.dim].iter_mut().zip(self.row(i)) {
                *o += r * v;
            }
        }
        out
    }
}

struct Bandwidth {
    base: f64,
    /// Pairs whose distance defines the median, with their weights.
    median_pairs: Vec<(usize, usize, f64)>,
}

fn base_bandwidth(table: &DistanceTable, pooled: &[usize], cfg: &KernelConfig) -> Bandwidth {
    match cfg.base_bandwidth {
        BaseBandwidth::Fixed(b) => Bandwidth { base: b, median_pairs: Vec::new() },
        BaseBandwidth::Median => {
            let mut pairs = Vec::with_capacity(pooled.len() * pooled.len().saturating_sub(1) / 2);
            for (a, &p) in pooled.iter().enumerate() {
                for &q in &pooled[a + 1..] {
                    pairs.push((table.get(p, q), p, q));
                }
            }
            if pairs.is_empty() {
                return Bandwidth { base: FALLBACK_BANDWIDTH, median_pairs: Vec::new() };
            }
            pairs.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
            let m = pairs.len();
            let (base, median_pairs) = if m % 2 == 1 {
                let (d, p, q) = pairs[m / 2];
                (d, vec![(p, q, 1.0)])
            } else {
                let (d1, p1, q1) = pairs[m / 2 - 1];
                let (d2, p2, q2) = pairs[m / 2];
                (0.5 * (d1 + d2), vec![(p1, q1, 0.5), (p2, q2, 0.5)])
            };
            if base > 0.0 && base.is_finite() {
                Bandwidth { base, median_pairs }
            } else {
                Bandwidth { base: FALLBACK_BANDWIDTH, median_pairs: Vec::new() }
            }
        }
    }
}

/// MMD² between the row sets `xs` and `ys` of `table`. When `grad` is given,
/// `upstream * dMMD/dD_pq` is added to `grad[p * n + q]`.
pub(crate) fn mmd_from_table(
    table: &DistanceTable,
    xs: &[usize],
    ys: &[usize],
    cfg: &KernelConfig,
    grad: Option<(&mut [f64], f64)>,
) -> f64 {
    let pooled: Vec<usize> = xs.iter().chain(ys).copied().collect();
    let bw = base_bandwidth(table, &pooled, cfg);
    let scales = cfg.scales();
    let inv2bw: Vec<f64> = scales.iter().map(|s| 1.0 / (2.0 * bw.base * s)).collect();
    let (nx, ny) = (xs.len() as f64, ys.len() as f64);
    let unbiased = cfg.estimator == Estimator::Unbiased;
    let (wxx, wyy) = if unbiased { (1.0 / (nx * (nx - 1.0)), 1.0 / (ny * (ny - 1.0))) } else { (1.0 / (nx * nx), 1.0 / (ny * ny)) };
    let wxy = -2.0 / (nx * ny);

    let mut grad = grad;
    let track_base = grad.is_some() && !bw.median_pairs.is_empty();
    let mut dbase = 0.0;
    let mut value = 0.0;
    let n = table.len();

    let mut visit = |p: usize, q: usize, w: f64, grad: &mut Option<(&mut [f64], f64)>| {
        let d = table.get(p, q);
        let (mut k, mut dk_dd, mut dk_db) = (0.0, 0.0, 0.0);
        for &c in &inv2bw {
            let e = (-d * c).exp();
            k += e;
            dk_dd -= e * c;
            dk_db += e * d * c;
        }
        value += w * k;
        if let Some((coef, up)) = grad.as_mut() {
            if p != q {
                coef[p * n + q] += *up * w * dk_dd;
            }
            if track_base {
                dbase += w * dk_db / bw.base;
            }
        }
    };

    for (a, &p) in xs.iter().enumerate() {
        for (b, &q) in xs.iter().enumerate() {
            if unbiased && a == b {
                continue;
            }
            visit(p, q, wxx, &mut grad);
        }
    }
    for (a, &p) in ys.iter().enumerate() {
        for (b, &q) in ys.iter().enumerate() {
            if unbiased && a == b {
                continue;
            }
            visit(p, q, wyy, &mut grad);
        }
    }
    for &p in xs {
        for &q in ys {
            visit(p, q, wxy, &mut grad);
        }
    }
    if let Some((coef, up)) = grad {
        for (p, q, w) in bw.median_pairs {
            coef[p * n + q] += up * dbase * w;
        }
    }
    value
}

fn check_sets(a: &[&[f64]], b: &[&[f64]], cfg: &KernelConfig) -> Result<usize> {
    cfg.validate()?;
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if cfg.estimator == Estimator::Unbiased && (a.len() < 2 || b.len() < 2) {
        return Err(Error::Shape("the unbiased MMD estimator needs at least two samples per set".into()));
    }
    let dim = a[0].len();
    if a.iter().chain(b).any(|r| r.len() != dim) {
        return Err(Error::Shape("all MMD samples must share one dimension".into()));
    }
    Ok(dim)
}

fn pooled_table(a: &[&[f64]], b: &[&[f64]], dim: usize) -> DistanceTable {
    let mut rows = Vec::with_capacity((a.len() + b.len()) * dim);
    for r in a.iter().chain(b) {
        rows.extend_from_slice(r);
    }
    DistanceTable::new(rows, dim)
}

/// Multi-kernel Gaussian MMD² between two sets of samples (each sample one
/// flattened heatmap channel).
///
/// With a median base bandwidth, the bandwidth is recomputed from the pooled
/// samples and is itself differentiated through. If the median squared
/// distance is zero (for instance when every pooled sample is identical),
/// [`FALLBACK_BANDWIDTH`] is used instead.
pub fn mmd_keypoint(batch_a: &[&[f64]], batch_b: &[&[f64]], cfg: &KernelConfig) -> Result<f64> {
    let dim = check_sets(batch_a, batch_b, cfg)?;
    let table = pooled_table(batch_a, batch_b, dim);
    let xs: Vec<usize> = (0..batch_a.len()).collect();
    let ys: Vec<usize> = (batch_a.len()..batch_a.len() + batch_b.len()).collect();
    Ok(mmd_from_table(&table, &xs, &ys, cfg, None))
}

/// [`mmd_keypoint`] with gradients with respect to every sample of both sets.
pub fn mmd_keypoint_with_grad(
    batch_a: &[&[f64]],
    batch_b: &[&[f64]],
    cfg: &KernelConfig,
) -> Result<(f64, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let dim = check_sets(batch_a, batch_b, cfg)?;
    let table = pooled_table(batch_a, batch_b, dim);
    let n = table.len();
    let xs: Vec<usize> = (0..batch_a.len()).collect();
    let ys: Vec<usize> = (batch_a.len()..n).collect();
    let mut coef = vec![0.0; n * n];
    let value = mmd_from_table(&table, &xs, &ys, cfg, Some((&mut coef, 1.0)));
    let g = table.row_gradients(&coef);
    let rows: Vec<Vec<f64>> = g.chunks(dim.max(1)).map(<[f64]>::to_vec).collect();
    let (ga, gb) = rows.split_at(batch_a.len());
    Ok((value, ga.to_vec(), gb.to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_sets_give_zero_with_biased_estimator() {
        let a: Vec<Vec<f64>> = vec![vec![0.1, 0.7, -0.2], vec![1.0, 0.0, 0.3], vec![-0.4, 0.2, 0.9]];
        let refs: Vec<&[f64]> = a.iter().map(Vec::as_slice).collect();
        let v = mmd_keypoint(&refs, &refs, &KernelConfig::default()).unwrap();
        assert!(v.abs() <= 1e-12, "{v}");
    }

    #[test]
    fn single_sample_single_kernel_matches_hand_expansion() {
        // k(0,0) + k(c,c) - 2 k(0,c) = 2 - 2 exp(-c² / (2 σ²)) with c = σ = 1.
        let a = [0.0];
        let b = [1.0];
        let v = mmd_keypoint(&[&a], &[&b], &KernelConfig::single(1.0)).unwrap();
        assert!((v - 0.786_938_680_574_733).abs() < 1e-12, "{v}");
    }

    #[test]
    fn estimator_is_symmetric() {
        let a: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64 * 0.3, (i as f64).sin()]).collect();
        let b: Vec<Vec<f64>> = (0..3).map(|i| vec![1.0 - i as f64 * 0.2, (i as f64).cos()]).collect();
        let ra: Vec<&[f64]> = a.iter().map(Vec::as_slice).collect();
        let rb: Vec<&[f64]> = b.iter().map(Vec::as_slice).collect();
        for estimator in [Estimator::Biased, Estimator::Unbiased] {
            let cfg = KernelConfig { estimator, ..KernelConfig::default() };
            let ab = mmd_keypoint(&ra, &rb, &cfg).unwrap();
            let ba = mmd_keypoint(&rb, &ra, &cfg).unwrap();
            assert!((ab - ba).abs() < 1e-14);
        }
    }

    #[test]
    fn all_identical_samples_fall_back_to_unit_bandwidth() {
        let a = [0.5, 0.5];
        let refs: Vec<&[f64]> = vec![&a, &a];
        let v = mmd_keypoint(&refs, &refs, &KernelConfig::default()).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn empty_and_undersized_sets_are_rejected() {
        let a = [1.0];
        assert!(matches!(mmd_keypoint(&[], &[&a], &KernelConfig::default()), Err(Error::EmptyBatch)));
        let cfg = KernelConfig { estimator: Estimator::Unbiased, ..KernelConfig::default() };
        assert!(mmd_keypoint(&[&a], &[&a], &cfg).is_err());
        let b = [1.0, 2.0];
        assert!(mmd_keypoint(&[&a], &[&b], &KernelConfig::default()).is_err());
    }

    #[test]
    fn kernel_scales_are_centered() {
        let cfg = KernelConfig::default();
        assert_eq!(cfg.scales(), vec![0.25, 0.5, 1.0, 2.0, 4.0]);
    }

    #[test]
    fn base_bandwidth_serde_forms() {
        let m: BaseBandwidth = serde_json::from_str("\"median\"").unwrap();
        assert_eq!(m, BaseBandwidth::Median);
        let f: BaseBandwidth = serde_json::from_str("2.5").unwrap();
        assert_eq!(f, BaseBandwidth::Fixed(2.5));
        assert_eq!(serde_json::to_string(&BaseBandwidth::Median).unwrap(), "\"median\"");
        assert!(serde_json::from_str::<BaseBandwidth>("\"mean\"").is_err());
    }
}
