//! Convolution lowering: patch extraction (`im2col`), its adjoint, and the
//! bilinear patch gather used by deformable convolution.

use crate::tensor::{Backward, BackwardCtx, Tensor};

/// Geometry of a square-kernel 2-D convolution over a `[C, H, W]` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.out_height() * self.out_width()
    }

    fn check_input(&self, t: &Tensor) {
        assert_eq!(
            t.shape(),
            &[self.channels, self.height, self.width],
            "conv input does not match geometry {self:?}"
        );
        assert!(
            self.height + 2 * self.padding >= self.kernel && self.width + 2 * self.padding >= self.kernel,
            "input smaller than kernel: {self:?}"
        );
    }
}

/// Output columns `ox` whose input column `ox * s + kj - p` lies in `[0, w)`.
fn valid_cols(ow: usize, w: usize, s: usize, kj: usize, p: usize) -> std::ops::Range<usize> {
    let lo = p.saturating_sub(kj).div_ceil(s);
    let hi = if w + p > kj { ((w + p - kj - 1) / s + 1).min(ow) } else { 0 };
    lo.min(hi)..hi
}

fn im2col_raw(x: &[f64], g: &Conv2dGeometry) -> Vec<f64> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let ncols = oh * ow;
    let mut out = vec![0.0; g.rows() * ncols];
    let (k, s, p) = (g.kernel, g.stride, g.padding);
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut out[row * ncols..(row + 1) * ncols];
                let cols = valid_cols(ow, g.width, s, kj, p);
                for (oy, iy) in valid_cols(oh, g.height, s, ki, p).map(|oy| (oy, oy * s + ki - p)) {
                    let src_row = &plane[iy * g.width..(iy + 1) * g.width];
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if s == 1 {
                        let x0 = cols.start + kj - p;
                        dst_row[cols.clone()].copy_from_slice(&src_row[x0..x0 + cols.len()]);
                    } else {
                        for ox in cols.clone() {
                            dst_row[ox] = src_row[ox * s + kj - p];
                        }
                    }
                }
            }
        }
    }
    out
}

fn col2im_raw(cols: &[f64], g: &Conv2dGeometry) -> Vec<f64> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let ncols = oh * ow;
    let mut out = vec![0.0; g.channels * g.height * g.width];
    let (k, s, p) = (g.kernel, g.stride, g.padding);
    for c in 0..g.channels {
        let plane = &mut out[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                let valid = valid_cols(ow, g.width, s, kj, p);
                for (oy, iy) in valid_cols(oh, g.height, s, ki, p).map(|oy| (oy, oy * s + ki - p)) {
                    let dst_row = &mut plane[iy * g.width..(iy + 1) * g.width];
                    let src_row = &src[oy * ow..(oy + 1) * ow];
                    if s == 1 {
                        let x0 = valid.start + kj - p;
                        for (d, v) in dst_row[x0..x0 + valid.len()].iter_mut().zip(&src_row[valid.clone()]) {
                            *d += v;
                        }
                    } else {
                        for ox in valid.clone() {
                            dst_row[ox * s + kj - p] += src_row[ox];
                        }
                    }
                }
            }
        }
    }
    out
}

struct Im2Col(Conv2dGeometry);
struct Col2Im(Conv2dGeometry);

impl Backward for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        vec![Some(ctx.grad.col2im(&self.0))]
    }
}

impl Backward for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        vec![Some(ctx.grad.im2col(&self.0))]
    }
}

/// Geometry of a deformable convolution (stride 1, square kernel).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeformGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub padding: usize,
}

impl DeformGeometry {
    pub fn out_height(&self) -> usize {
        self.height + 2 * self.padding + 1 - self.kernel
    }

    pub fn out_width(&self) -> usize {
        self.width + 2 * self.padding + 1 - self.kernel
    }

    pub fn offset_channels(&self) -> usize {
        2 * self.kernel * self.kernel
    }
}

/// Bilinear taps of one sampling point: up to four `(flat index, weight)`
/// pairs plus the partial derivatives of each weight w.r.t. (y, x).
struct Taps {
    idx: [usize; 4],
    w: [f64; 4],
    dwy: [f64; 4],
    dwx: [f64; 4],
    valid: [bool; 4],
}

fn bilinear_taps(py: f64, px: f64, h: usize, w: usize) -> Taps {
    let y0 = py.floor();
    let x0 = px.floor();
    let fy = py - y0;
    let fx = px - x0;
    let corners = [(y0, x0), (y0, x0 + 1.0), (y0 + 1.0, x0), (y0 + 1.0, x0 + 1.0)];
    let w_ = [(1.0 - fy) * (1.0 - fx), (1.0 - fy) * fx, fy * (1.0 - fx), fy * fx];
    let dwy = [-(1.0 - fx), -fx, 1.0 - fx, fx];
    let dwx = [-(1.0 - fy), 1.0 - fy, -fy, fy];
    let mut t = Taps { idx: [0; 4], w: w_, dwy, dwx, valid: [false; 4] };
    for (i, &(cy, cx)) in corners.iter().enumerate() {
        if cy >= 0.0 && cx >= 0.0 && (cy as usize) < h && (cx as usize) < w {
            t.idx[i] = cy as usize * w + cx as usize;
            t.valid[i] = true;
        }
    }
    t
}

fn sample_point(g: &DeformGeometry, off: &[f64], oy: usize, ox: usize, ki: usize, kj: usize) -> (f64, f64) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let tap = ki * g.kernel + kj;
    let pos = oy * ow + ox;
    let dy = off[(2 * tap) * oh * ow + pos];
    let dx = off[(2 * tap + 1) * oh * ow + pos];
    let py = oy as f64 + ki as f64 - g.padding as f64 + dy;
    let px = ox as f64 + kj as f64 - g.padding as f64 + dx;
    (py, px)
}

fn deform_im2col_raw(x: &[f64], off: &[f64], g: &DeformGeometry) -> Vec<f64> {
    let (oh, ow, k) = (g.out_height(), g.out_width(), g.kernel);
    let ncols = oh * ow;
    let plane = g.height * g.width;
    let mut out = vec![0.0; g.channels * k * k * ncols];
    for ki in 0..k {
        for kj in 0..k {
            let tap = ki * k + kj;
            for oy in 0..oh {
                for ox in 0..ow {
                    let (py, px) = sample_point(g, off, oy, ox, ki, kj);
                    let t = bilinear_taps(py, px, g.height, g.width);
                    let col = oy * ow + ox;
                    for c in 0..g.channels {
                        let src = &x[c * plane..(c + 1) * plane];
                        let mut v = 0.0;
                        for i in 0..4 {
                            if t.valid[i] {
                                v += t.w[i] * src[t.idx[i]];
                            }
                        }
                        out[(c * k * k + tap) * ncols + col] = v;
                    }
                }
            }
        }
    }
    out
}

/// First-order backward of the deformable gather. Its outputs are constants:
/// deformable layers are never differentiated twice.
struct DeformIm2Col(DeformGeometry);

impl Backward for DeformIm2Col {
    fn name(&self) -> &'static str {
        "deform_im2col"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let g = &self.0;
        let [x, off] = ctx.inputs else { unreachable!() };
        let (x, off, gd) = (x.data(), off.data(), ctx.grad.data());
        let (oh, ow, k) = (g.out_height(), g.out_width(), g.kernel);
        let ncols = oh * ow;
        let plane = g.height * g.width;
        let mut gx = ctx.needs[0].then(|| vec![0.0; g.channels * plane]);
        let mut goff = ctx.needs[1].then(|| vec![0.0; g.offset_channels() * ncols]);
        for ki in 0..k {
            for kj in 0..k {
                let tap = ki * k + kj;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let (py, px) = sample_point(g, off, oy, ox, ki, kj);
                        let t = bilinear_taps(py, px, g.height, g.width);
                        let col = oy * ow + ox;
                        let (mut sy, mut sx) = (0.0, 0.0);
                        for c in 0..g.channels {
                            let go = gd[(c * k * k + tap) * ncols + col];
                            if go == 0.0 {
                                continue;
                            }
                            let base = c * plane;
                            for i in 0..4 {
                                if !t.valid[i] {
                                    continue;
                                }
                                if let Some(gx) = gx.as_mut() {
                                    gx[base + t.idx[i]] += go * t.w[i];
                                }
                                let v = x[base + t.idx[i]];
                                sy += go * t.dwy[i] * v;
                                sx += go * t.dwx[i] * v;
                            }
                        }
                        if let Some(goff) = goff.as_mut() {
                            goff[(2 * tap) * ncols + col] += sy;
                            goff[(2 * tap + 1) * ncols + col] += sx;
                        }
                    }
                }
            }
        }
        vec![
            gx.map(|d| Tensor::new(d, &[g.channels, g.height, g.width])),
            goff.map(|d| Tensor::new(d, &[g.offset_channels(), oh, ow])),
        ]
    }
}

impl Tensor {
    /// Patch matrix `[C*k*k, OH*OW]` of a `[C, H, W]` input.
    pub fn im2col(&self, g: &Conv2dGeometry) -> Tensor {
        g.check_input(self);
        let out = im2col_raw(self.data(), g);
        Tensor::from_op(out, &[g.rows(), g.cols()], Im2Col(*g), vec![self.clone()])
    }

    /// Adjoint of [`Tensor::im2col`]: scatters patch columns back to `[C, H, W]`.
    pub fn col2im(&self, g: &Conv2dGeometry) -> Tensor {
        assert_eq!(self.shape(), &[g.rows(), g.cols()], "col2im input mismatch");
        let out = col2im_raw(self.data(), g);
        Tensor::from_op(out, &[g.channels, g.height, g.width], Col2Im(*g), vec![self.clone()])
    }

    /// Convolution `[C_in, H, W] -> [C_out, OH, OW]` with weights
    /// `[C_out, C_in, k, k]` and optional bias `[C_out]`.
    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>, stride: usize, padding: usize) -> Tensor {
        let cols = self.conv_cols(weight.shape()[3], stride, padding);
        let (oh, ow) = self.conv_out_dims(weight.shape()[3], stride, padding);
        Tensor::conv_from_cols(&cols, weight, bias, oh, ow)
    }

    /// Patch matrix for a convolution; reusable across several weight sets.
    pub fn conv_cols(&self, kernel: usize, stride: usize, padding: usize) -> Tensor {
        assert_eq!(self.rank(), 3, "conv input must be [C, H, W]");
        let s = self.shape();
        let g = Conv2dGeometry { channels: s[0], height: s[1], width: s[2], kernel, stride, padding };
        if kernel == 1 && stride == 1 && padding == 0 {
            return self.reshape(&[s[0], s[1] * s[2]]);
        }
        self.im2col(&g)
    }

    pub fn conv_out_dims(&self, kernel: usize, stride: usize, padding: usize) -> (usize, usize) {
        let s = self.shape();
        let g = Conv2dGeometry { channels: s[0], height: s[1], width: s[2], kernel, stride, padding };
        (g.out_height(), g.out_width())
    }

    /// Finishes a convolution from a patch matrix.
    pub fn conv_from_cols(cols: &Tensor, weight: &Tensor, bias: Option<&Tensor>, oh: usize, ow: usize) -> Tensor {
        assert_eq!(weight.rank(), 4, "conv weight must be [C_out, C_in, k, k]");
        let co = weight.shape()[0];
        let w2 = weight.reshape(&[co, weight.numel() / co]);
        let y = w2.matmul(cols).reshape(&[co, oh, ow]);
        match bias {
            Some(b) => y.add_channel_bias(b),
            None => y,
        }
    }

    /// Bilinearly sampled patch matrix for deformable convolution. `offsets`
    /// is `[2*k*k, OH, OW]` holding `(dy, dx)` pairs per kernel tap.
    pub fn deform_im2col(&self, offsets: &Tensor, g: &DeformGeometry) -> Tensor {
        assert_eq!(self.shape(), &[g.channels, g.height, g.width], "deform input mismatch");
        assert_eq!(
            offsets.shape(),
            &[g.offset_channels(), g.out_height(), g.out_width()],
            "deform offsets mismatch"
        );
        let out = deform_im2col_raw(self.data(), offsets.data(), g);
        let rows = g.channels * g.kernel * g.kernel;
        let cols = g.out_height() * g.out_width();
        Tensor::from_op(out, &[rows, cols], DeformIm2Col(*g), vec![self.clone(), offsets.clone()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;

    fn naive_conv(x: &[f64], c: usize, h: usize, w: usize, wt: &[f64], co: usize, k: usize, s: usize, p: usize) -> Vec<f64> {
        let oh = (h + 2 * p - k) / s + 1;
        let ow = (w + 2 * p - k) / s + 1;
        let mut out = vec![0.0; co * oh * ow];
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let iy = (oy * s + ki) as isize - p as isize;
                                let ix = (ox * s + kj) as isize - p as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += wt[((o * c + ci) * k + ki) * k + kj] * x[(ci * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                    }
                    out[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let (c, h, w, co) = (2, 6, 5, 3);
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.31).sin()).collect();
        for (k, s, p) in [(3, 1, 1), (3, 2, 1), (3, 1, 0), (1, 1, 0), (5, 2, 2)] {
            let wt: Vec<f64> = (0..co * c * k * k).map(|i| (i as f64 * 0.17).cos()).collect();
            let y = Tensor::new(x.clone(), &[c, h, w]).conv2d(&Tensor::new(wt.clone(), &[co, c, k, k]), None, s, p);
            let expect = naive_conv(&x, c, h, w, &wt, co, k, s, p);
            for (a, b) in y.data().iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn col2im_is_the_adjoint_of_im2col() {
        let (c, h, w) = (2, 7, 5);
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.31).sin()).collect();
        for (k, s, p) in [(3, 1, 1), (3, 2, 1), (3, 1, 0), (5, 2, 2), (3, 3, 2)] {
            let g = Conv2dGeometry { channels: c, height: h, width: w, kernel: k, stride: s, padding: p };
            let cols = im2col_raw(&x, &g);
            let y: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.77).cos()).collect();
            let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(col2im_raw(&y, &g)).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10, "{g:?}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn conv_gradients_including_second_order() {
        let x: Vec<f64> = (0..2 * 5 * 5).map(|i| (i as f64 * 0.53).sin()).collect();
        let w: Vec<f64> = (0..3 * 2 * 9).map(|i| (i as f64 * 0.29).cos() * 0.3).collect();
        let b = vec![0.1, -0.2, 0.05];
        let report = check_gradients(&[x, w, b], &[&[2, 5, 5], &[3, 2, 3, 3], &[3]], |ts| {
            let y = ts[0].conv2d(&ts[1], Some(&ts[2]), 1, 1).leaky_relu(0.2);
            // Input-gradient norm: exercises im2col/col2im/matmul double backward.
            let gx = crate::grad(&y.mean_all(), &[&ts[0]], true).remove(0);
            gx.norm2().add_scalar(-1.0).square().add(&y.square().mean_all())
        });
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn deform_with_zero_offsets_is_im2col() {
        let g = DeformGeometry { channels: 2, height: 5, width: 6, kernel: 3, padding: 1 };
        let x = Tensor::new((0..60).map(|i| i as f64 * 0.1).collect(), &[2, 5, 6]);
        let off = Tensor::zeros(&[18, 5, 6]);
        let a = x.deform_im2col(&off, &g);
        let b = x.im2col(&Conv2dGeometry { channels: 2, height: 5, width: 6, kernel: 3, stride: 1, padding: 1 });
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn deform_gradients_match_finite_differences() {
        let x: Vec<f64> = (0..2 * 4 * 4).map(|i| (i as f64 * 0.7).sin()).collect();
        // Fractional offsets away from integer kinks.
        let off: Vec<f64> = (0..18 * 4 * 4).map(|i| 0.3 * (i as f64 * 0.91).sin() + 0.05).collect();
        let g = DeformGeometry { channels: 2, height: 4, width: 4, kernel: 3, padding: 1 };
        let report = check_gradients(&[x, off], &[&[2, 4, 4], &[18, 4, 4]], |ts| {
            ts[0].deform_im2col(&ts[1], &g).square().sum_all()
        });
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }
}
