//! Batched 2D convolution and transposed convolution (NCHW) via im2col + gemm.
//!
//! Transposed convolution is the data-gradient of an ordinary convolution
//! running from the (larger) output space back to the input space, so both
//! share one geometry type.

use crate::linalg::{gemm, Trans};
use crate::tensor::Tensor;

/// Geometry of a convolution from a `(channels, height, width)` image to
/// `(out_channels, out_h, out_w)` with a square kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(channels: usize, height: usize, width: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        assert!(stride > 0 && kernel > 0, "kernel and stride must be positive");
        assert!(height + 2 * pad >= kernel && width + 2 * pad >= kernel, "kernel larger than padded input");
        let out_h = (height + 2 * pad - kernel) / stride + 1;
        let out_w = (width + 2 * pad - kernel) / stride + 1;
        Self { channels, height, width, kernel, stride, pad, out_h, out_w }
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Output spatial size of a transposed convolution.
pub fn conv_transpose_out(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    assert!((size - 1) * stride + kernel >= 2 * pad, "transposed convolution collapses to nothing");
    (size - 1) * stride + kernel - 2 * pad
}

fn im2col(img: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let ncol = g.col_cols();
    let k = g.kernel;
    for c in 0..g.channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &img[(c * g.height + iy as usize) * g.width..][..g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.width as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, img: &mut [f64]) {
    let ncol = g.col_cols();
    let k = g.kernel;
    for c in 0..g.channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut img[(c * g.height + iy as usize) * g.width..][..g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

fn add_bias(out: &mut [f64], bias: &[f64], plane: usize) {
    for (c, &b) in bias.iter().enumerate() {
        for v in &mut out[c * plane..(c + 1) * plane] {
            *v += b;
        }
    }
}

fn bias_grad(grad: &Tensor) -> Tensor {
    let (n, c, h, w) = grad.dims4();
    let plane = h * w;
    let mut db = vec![0.0; c];
    for b in 0..n {
        for (ch, acc) in db.iter_mut().enumerate() {
            *acc += grad.data()[(b * c + ch) * plane..][..plane].iter().sum::<f64>();
        }
    }
    Tensor::from_vec([c], db)
}

/// `x: [n, cin, h, w]`, `weight: [cout, cin, k, k]`, `bias: [cout]`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let (n, cin, h, w) = x.dims4();
    let (cout, wcin, k, k2) = weight.dims4();
    assert_eq!(cin, wcin, "conv2d: input has {cin} channels, weight expects {wcin}");
    assert_eq!(k, k2, "conv2d: square kernels only");
    let g = ConvGeom::new(cin, h, w, k, stride, pad);
    let (rows, ncol) = (g.col_rows(), g.col_cols());
    let mut cols = vec![0.0; rows * ncol];
    let mut out = Tensor::zeros([n, cout, g.out_h, g.out_w]);
    let in_plane = cin * h * w;
    let out_plane = cout * ncol;
    for b in 0..n {
        im2col(&x.data()[b * in_plane..][..in_plane], &g, &mut cols);
        let dst = &mut out.data_mut()[b * out_plane..][..out_plane];
        gemm(Trans::No, Trans::No, cout, ncol, rows, 1.0, weight.data(), &cols, 0.0, dst);
        if let Some(bias) = bias {
            add_bias(dst, bias.data(), ncol);
        }
    }
    out
}

/// Gradients of [`conv2d`]. Each output is only computed when requested.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    grad: &Tensor,
    stride: usize,
    pad: usize,
    need: [bool; 3],
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let (n, cin, h, w) = x.dims4();
    let (cout, _, k, _) = weight.dims4();
    let g = ConvGeom::new(cin, h, w, k, stride, pad);
    let (rows, ncol) = (g.col_rows(), g.col_cols());
    let in_plane = cin * h * w;
    let out_plane = cout * ncol;
    let mut cols = vec![0.0; rows * ncol];
    let mut dx = need[0].then(|| Tensor::zeros(x.shape().to_vec()));
    let mut dw = need[1].then(|| Tensor::zeros(weight.shape().to_vec()));
    for b in 0..n {
        let gout = &grad.data()[b * out_plane..][..out_plane];
        if let Some(dw) = dw.as_mut() {
            im2col(&x.data()[b * in_plane..][..in_plane], &g, &mut cols);
            gemm(Trans::No, Trans::Yes, cout, rows, ncol, 1.0, gout, &cols, 1.0, dw.data_mut());
        }
        if let Some(dx) = dx.as_mut() {
            gemm(Trans::Yes, Trans::No, rows, ncol, cout, 1.0, weight.data(), gout, 0.0, &mut cols);
            col2im(&cols, &g, &mut dx.data_mut()[b * in_plane..][..in_plane]);
        }
    }
    let db = need[2].then(|| bias_grad(grad));
    (dx, dw, db)
}

/// `x: [n, cin, h, w]`, `weight: [cin, cout, k, k]` (PyTorch layout), `bias: [cout]`.
pub fn conv_transpose2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let (n, cin, h, w) = x.dims4();
    let (wcin, cout, k, k2) = weight.dims4();
    assert_eq!(cin, wcin, "conv_transpose2d: input has {cin} channels, weight expects {wcin}");
    assert_eq!(k, k2, "conv_transpose2d: square kernels only");
    let oh = conv_transpose_out(h, k, stride, pad);
    let ow = conv_transpose_out(w, k, stride, pad);
    let g = ConvGeom::new(cout, oh, ow, k, stride, pad);
    assert_eq!((g.out_h, g.out_w), (h, w), "conv_transpose2d: inconsistent geometry");
    let (rows, ncol) = (g.col_rows(), g.col_cols());
    let mut cols = vec![0.0; rows * ncol];
    let mut out = Tensor::zeros([n, cout, oh, ow]);
    let in_plane = cin * h * w;
    let out_plane = cout * oh * ow;
    for b in 0..n {
        gemm(Trans::Yes, Trans::No, rows, ncol, cin, 1.0, weight.data(), &x.data()[b * in_plane..][..in_plane], 0.0, &mut cols);
        let dst = &mut out.data_mut()[b * out_plane..][..out_plane];
        col2im(&cols, &g, dst);
        if let Some(bias) = bias {
            add_bias(dst, bias.data(), oh * ow);
        }
    }
    out
}

/// Gradients of [`conv_transpose2d`].
pub fn conv_transpose2d_backward(
    x: &Tensor,
    weight: &Tensor,
    grad: &Tensor,
    stride: usize,
    pad: usize,
    need: [bool; 3],
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let (n, cin, h, w) = x.dims4();
    let (_, cout, k, _) = weight.dims4();
    let (_, _, oh, ow) = grad.dims4();
    let g = ConvGeom::new(cout, oh, ow, k, stride, pad);
    let (rows, ncol) = (g.col_rows(), g.col_cols());
    let in_plane = cin * h * w;
    let out_plane = cout * oh * ow;
    let mut cols = vec![0.0; rows * ncol];
    let mut dx = need[0].then(|| Tensor::zeros(x.shape().to_vec()));
    let mut dw = need[1].then(|| Tensor::zeros(weight.shape().to_vec()));
    if dx.is_some() || dw.is_some() {
        for b in 0..n {
            im2col(&grad.data()[b * out_plane..][..out_plane], &g, &mut cols);
            if let Some(dx) = dx.as_mut() {
                let dst = &mut dx.data_mut()[b * in_plane..][..in_plane];
                gemm(Trans::No, Trans::No, cin, ncol, rows, 1.0, weight.data(), &cols, 0.0, dst);
            }
            if let Some(dw) = dw.as_mut() {
                let xb = &x.data()[b * in_plane..][..in_plane];
                gemm(Trans::No, Trans::Yes, cin, rows, ncol, 1.0, xb, &cols, 1.0, dw.data_mut());
            }
        }
    }
    let db = need[2].then(|| bias_grad(grad));
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (n, cin, h, wd) = x.dims4();
        let (cout, _, k, _) = w.dims4();
        let g = ConvGeom::new(cin, h, wd, k, stride, pad);
        let mut out = Tensor::zeros([n, cout, g.out_h, g.out_w]);
        for b in 0..n {
            for co in 0..cout {
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x.data()[((b * cin + ci) * h + iy as usize) * wd + ix as usize]
                                            * w.data()[((co * cin + ci) * k + ky) * k + kx];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((b * cout + co) * g.out_h + oy) * g.out_w + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn direct_conv_transpose(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (n, cin, h, wd) = x.dims4();
        let (_, cout, k, _) = w.dims4();
        let oh = conv_transpose_out(h, k, stride, pad);
        let ow = conv_transpose_out(wd, k, stride, pad);
        let mut out = Tensor::zeros([n, cout, oh, ow]);
        for b in 0..n {
            for ci in 0..cin {
                for iy in 0..h {
                    for ix in 0..wd {
                        let v = x.data()[((b * cin + ci) * h + iy) * wd + ix];
                        for co in 0..cout {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let oy = (iy * stride + ky) as isize - pad as isize;
                                    let ox = (ix * stride + kx) as isize - pad as isize;
                                    if oy >= 0 && ox >= 0 && (oy as usize) < oh && (ox as usize) < ow {
                                        out.data_mut()[((b * cout + co) * oh + oy as usize) * ow + ox as usize] +=
                                            v * w.data()[((ci * cout + co) * k + ky) * k + kx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn ramp(shape: [usize; 4], phase: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| ((i as f64) * 0.731 + phase).sin()).collect())
    }

    #[test]
    fn conv2d_matches_direct_loops() {
        for &(stride, pad, k) in &[(1, 0, 3), (2, 1, 3), (1, 1, 3), (2, 0, 2), (1, 0, 1)] {
            let x = ramp([2, 3, 7, 6], 0.1);
            let w = ramp([4, 3, k, k], 0.7);
            let got = conv2d(&x, &w, None, stride, pad);
            let want = direct_conv(&x, &w, stride, pad);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12, "stride {stride} pad {pad}");
            }
        }
    }

    #[test]
    fn conv_transpose2d_matches_direct_loops() {
        for &(stride, pad, k) in &[(2, 1, 4), (1, 1, 3), (2, 0, 2), (1, 0, 1), (3, 1, 3)] {
            let x = ramp([2, 3, 4, 5], 0.3);
            let w = ramp([3, 2, k, k], 1.1);
            let got = conv_transpose2d(&x, &w, None, stride, pad);
            let want = direct_conv_transpose(&x, &w, stride, pad);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12, "stride {stride} pad {pad}");
            }
        }
    }

    #[test]
    fn bias_is_broadcast_per_channel() {
        let x = Tensor::zeros([1, 1, 3, 3]);
        let w = Tensor::zeros([2, 1, 3, 3]);
        let b = Tensor::from_vec([2], vec![0.5, -1.0]);
        let y = conv2d(&x, &w, Some(&b), 1, 1);
        assert!(y.data()[..9].iter().all(|&v| v == 0.5));
        assert!(y.data()[9..].iter().all(|&v| v == -1.0));
    }
}
