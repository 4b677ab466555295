use autograd::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{rotate_about, uniform, Background, Domain, DomainShift, PoseSample, RenderConfig};
use crate::error::{Error, Result};
use crate::heatmap_codec::KeypointSet;

/// Limb colors by bone index of the default skeleton; extra bones reuse the last.
const LIMB_COLORS: [[f64; 3]; 7] = [
    [0.95, 0.85, 0.2],
    [0.9, 0.25, 0.2],
    [0.2, 0.45, 0.95],
    [0.95, 0.5, 0.4],
    [0.4, 0.7, 0.95],
    [0.3, 0.85, 0.35],
    [0.25, 0.7, 0.6],
];
const JOINT_COLOR: [f64; 3] = [0.97, 0.97, 0.97];
const PLAIN_BACKGROUND: [f64; 3] = [0.12, 0.12, 0.14];

struct Canvas {
    size: usize,
    px: Vec<[f64; 3]>,
}

impl Canvas {
    fn new(size: usize, color: [f64; 3]) -> Self {
        Self { size, px: vec![color; size * size] }
    }

    fn blend(&mut self, x: usize, y: usize, color: [f64; 3], alpha: f64) {
        let p = &mut self.px[y * self.size + x];
        for c in 0..3 {
            p[c] = p[c] * (1.0 - alpha) + color[c] * alpha;
        }
    }

    /// Visits pixels whose centers fall in the clamped box around the given extent.
    fn region(&self, lo: [f64; 2], hi: [f64; 2]) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let clamp = |v: f64| v.max(0.0).min(self.size as f64) as usize;
        (clamp(lo[0].floor())..clamp(hi[0].ceil() + 1.0), clamp(lo[1].floor())..clamp(hi[1].ceil() + 1.0))
    }

    /// Anti-aliased segment of the given thickness with round caps.
    fn segment(&mut self, a: [f64; 2], b: [f64; 2], thickness: f64, color: [f64; 3]) {
        let r = thickness / 2.0 + 1.0;
        let (xs, ys) = self.region([a[0].min(b[0]) - r, a[1].min(b[1]) - r], [a[0].max(b[0]) + r, a[1].max(b[1]) + r]);
        let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
        let len2 = dx * dx + dy * dy;
        for y in ys {
            for x in xs.clone() {
                let (px, py) = (x as f64 - a[0], y as f64 - a[1]);
                let t = if len2 > 0.0 { ((px * dx + py * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
                let d = ((px - t * dx).powi(2) + (py - t * dy).powi(2)).sqrt();
                let cov = (thickness / 2.0 + 0.5 - d).clamp(0.0, 1.0);
                if cov > 0.0 {
                    self.blend(x, y, color, cov);
                }
            }
        }
    }

    fn disc(&mut self, c: [f64; 2], radius: f64, color: [f64; 3]) {
        self.segment(c, c, 2.0 * radius, color);
    }

    fn rect(&mut self, lo: [f64; 2], hi: [f64; 2], color: [f64; 3], alpha: f64) {
        let (xs, ys) = self.region(lo, hi);
        for y in ys {
            for x in xs.clone() {
                let (fx, fy) = (x as f64, y as f64);
                if fx >= lo[0] && fx <= hi[0] && fy >= lo[1] && fy <= hi[1] {
                    self.blend(x, y, color, alpha);
                }
            }
        }
    }
}

fn random_color(rng: &mut impl Rng, lo: f64, hi: f64) -> [f64; 3] {
    [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)]
}

fn clutter(canvas: &mut Canvas, rng: &mut impl Rng) {
    let s = canvas.size as f64;
    for _ in 0..rng.gen_range(4..8) {
        let (x, y) = (rng.gen_range(-4.0..s), rng.gen_range(-4.0..s));
        let (w, h) = (rng.gen_range(4.0..20.0), rng.gen_range(4.0..20.0));
        let color = random_color(rng, 0.1, 0.6);
        canvas.rect([x, y], [x + w, y + h], color, rng.gen_range(0.4..0.9));
    }
    for _ in 0..rng.gen_range(2..5) {
        let a = [rng.gen_range(0.0..s), rng.gen_range(0.0..s)];
        let b = [rng.gen_range(0.0..s), rng.gen_range(0.0..s)];
        let color = random_color(rng, 0.2, 0.7);
        canvas.segment(a, b, rng.gen_range(1.0..2.5), color);
    }
}

pub(super) fn render_with(
    pose: &[[f64; 2]],
    bones: &[(usize, usize)],
    shift: &DomainShift,
    cfg: &RenderConfig,
    domain: Domain,
    rng: &mut impl Rng,
) -> Result<PoseSample> {
    let size = cfg.image_size;
    let scale = uniform(rng, shift.global_scale);
    let theta = uniform(rng, shift.rotation);
    let thickness = uniform(rng, shift.limb_thickness);
    let brightness = uniform(rng, shift.brightness_shift);

    // Geometry first: labels follow exactly the same transform as the drawing.
    let center = [(size as f64 - 1.0) / 2.0; 2];
    let joints: Vec<[f64; 2]> = pose.iter().map(|&p| rotate_about(p, center, theta, scale)).collect();
    let hi = (size - cfg.stride) as f64 - cfg.margin;
    for (j, p) in joints.iter().enumerate() {
        if !(p[0] >= cfg.margin && p[0] <= hi && p[1] >= cfg.margin && p[1] <= hi) {
            return Err(Error::OutOfBounds { joint: j, x: p[0], y: p[1], width: size, height: size });
        }
    }

    let mut canvas = match shift.background {
        Background::Plain => Canvas::new(size, PLAIN_BACKGROUND),
        Background::Clutter => {
            let mut c = Canvas::new(size, random_color(rng, 0.05, 0.35));
            clutter(&mut c, rng);
            c
        }
    };
    for (b, &(p, c)) in bones.iter().enumerate() {
        canvas.segment(joints[p], joints[c], thickness, LIMB_COLORS[b.min(LIMB_COLORS.len() - 1)]);
    }
    let radius = 0.6 * thickness + 0.8;
    for &j in &joints {
        canvas.disc(j, radius, JOINT_COLOR);
    }

    let noise = Normal::new(0.0, shift.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut data = vec![0.0; 3 * size * size];
    for (i, p) in canvas.px.iter().enumerate() {
        for c in 0..3 {
            let mut v = p[c] + brightness;
            if shift.noise_std > 0.0 {
                v += noise.sample(rng);
            }
            data[c * size * size + i] = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }
    let stride = cfg.stride as f64;
    let labels = joints.iter().map(|p| [p[0] / stride, p[1] / stride]).collect();
    Ok(PoseSample {
        image: Tensor::from_vec([3, size, size], data),
        keypoints: KeypointSet::all_visible(labels)?,
        domain,
    })
}

/// Renders a pixel-space pose with limbs along `bones` under `shift`, using a
/// generator seeded by `rng_seed`. Fails with [`Error::OutOfBounds`] when the
/// transformed pose leaves the image.
pub fn render(
    pose: &[[f64; 2]],
    bones: &[(usize, usize)],
    shift: &DomainShift,
    cfg: &RenderConfig,
    domain: Domain,
    rng_seed: u64,
) -> Result<PoseSample> {
    render_with(pose, bones, shift, cfg, domain, &mut ChaCha8Rng::seed_from_u64(rng_seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthpose_data::{sample_pose, SkeletonSpec};

    fn bones() -> Vec<(usize, usize)> {
        SkeletonSpec::default().bones
    }

    fn pose() -> Vec<[f64; 2]> {
        sample_pose(&SkeletonSpec::default(), 4).unwrap()
    }

    #[test]
    fn quarter_turn_rotates_labels_analytically() {
        let shift = DomainShift { rotation: (std::f64::consts::FRAC_PI_2, std::f64::consts::FRAC_PI_2), ..DomainShift::identity() };
        let cfg = RenderConfig::default();
        let p = pose();
        let s = render(&p, &bones(), &shift, &cfg, Domain::Source, 1).unwrap();
        let c = 31.5;
        for (label, q) in s.keypoints.coords().iter().zip(&p) {
            let want = [(c - (q[1] - c)) / 4.0, (c + (q[0] - c)) / 4.0];
            assert!((label[0] - want[0]).abs() < 1e-12 && (label[1] - want[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn noise_changes_pixels_but_not_labels() {
        let cfg = RenderConfig::default();
        let clean = render(&pose(), &bones(), &DomainShift::identity(), &cfg, Domain::Source, 2).unwrap();
        let noisy = render(&pose(), &bones(), &DomainShift { noise_std: 0.1, ..DomainShift::identity() }, &cfg, Domain::Source, 2).unwrap();
        assert_eq!(clean.keypoints, noisy.keypoints);
        assert_ne!(clean.image, noisy.image);
    }

    #[test]
    fn pixels_are_quantized_to_bytes() {
        let s = render(&pose(), &bones(), &DomainShift::target(), &RenderConfig::default(), Domain::Target, 3);
        if let Ok(s) = s {
            assert!(s.image.data().iter().all(|v| (v * 255.0 - (v * 255.0).round()).abs() < 1e-9 && (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn oversized_pose_is_out_of_bounds() {
        let shift = DomainShift { global_scale: (3.0, 3.0), ..DomainShift::identity() };
        assert!(matches!(render(&pose(), &bones(), &shift, &RenderConfig::default(), Domain::Source, 0), Err(Error::OutOfBounds { .. })));
    }
}
