//! Convolution via im2col + GEMM on the `[C, B, H, W]` layout.

use crate::autodiff::float::{gemm, gemm_ld, MatRef};
use crate::autodiff::graph::{Graph, Op, Var};
use crate::autodiff::{Float, Tensor};
use crate::error::{Error, Result};

/// A `k x k` window sliding with `stride` over a zero-padded `c x h x w`
/// image, producing an `ho x wo` grid per batch element.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    /// `out = floor((in + 2 pad - k) / stride) + 1`.
    pub fn conv_out(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
        if stride == 0 || input + 2 * pad < k {
            return None;
        }
        Some((input + 2 * pad - k) / stride + 1)
    }

    /// `out = (in - 1) stride - 2 pad + k`.
    pub fn deconv_out(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
        if stride == 0 || input == 0 {
            return None;
        }
        ((input - 1) * stride + k).checked_sub(2 * pad).filter(|&o| o > 0)
    }

    fn grid(&self) -> usize {
        self.batch * self.ho * self.wo
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    /// Output columns `lo..hi` whose tap `kx` lands inside the input row.
    fn col_span(&self, kx: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = self.pad.saturating_sub(kx).div_ceil(s).min(self.wo);
        let hi = (self.w + self.pad).saturating_sub(kx).div_ceil(s).min(self.wo).max(lo);
        (lo, hi)
    }

    fn input_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky).checked_sub(self.pad)?;
        (iy < self.h).then_some(iy)
    }
}

/// Batch elements per im2col chunk so one chunk of columns stays near
/// 256K values (about 1 MB at f32).
fn chunk_len(g: &ConvGeom) -> usize {
    const TARGET: usize = 1 << 18;
    (TARGET / (g.rows() * g.ho * g.wo).max(1)).clamp(1, g.batch.max(1))
}

/// Batch ranges `(b0, nb)` covering the whole batch.
fn chunks(g: &ConvGeom) -> impl Iterator<Item = (usize, usize)> {
    let (step, batch) = (chunk_len(g), g.batch);
    (0..batch).step_by(step).map(move |b0| (b0, step.min(batch - b0)))
}

/// Columns of batch elements `b0..b0 + nb` as a `[c k k, nb ho wo]` matrix.
pub(crate) fn im2col<T: Float>(x: &[T], g: &ConvGeom, b0: usize, nb: usize, cols: &mut Vec<T>) {
    let n = nb * g.ho * g.wo;
    let hw = g.h * g.w;
    cols.clear();
    cols.resize(g.rows() * n, T::zero());
    for c in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((c * g.k + ky) * g.k + kx) * n;
                let (lo, hi) = g.col_span(kx);
                if lo >= hi {
                    continue;
                }
                for bi in 0..nb {
                    let plane = &x[(c * g.batch + b0 + bi) * hw..][..hw];
                    for oy in 0..g.ho {
                        let Some(iy) = g.input_row(oy, ky) else { continue };
                        let src = &plane[iy * g.w..][..g.w];
                        let dst = &mut cols[row + (bi * g.ho + oy) * g.wo..][..g.wo];
                        if g.stride == 1 {
                            let off = lo + kx - g.pad;
                            dst[lo..hi].copy_from_slice(&src[off..off + hi - lo]);
                        } else {
                            for ox in lo..hi {
                                dst[ox] = src[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds chunk columns onto the image `x`.
pub(crate) fn col2im<T: Float>(cols: &[T], g: &ConvGeom, b0: usize, nb: usize, x: &mut [T]) {
    let n = nb * g.ho * g.wo;
    let hw = g.h * g.w;
    for c in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((c * g.k + ky) * g.k + kx) * n;
                let (lo, hi) = g.col_span(kx);
                if lo >= hi {
                    continue;
                }
                for bi in 0..nb {
                    let plane = &mut x[(c * g.batch + b0 + bi) * hw..][..hw];
                    for oy in 0..g.ho {
                        let Some(iy) = g.input_row(oy, ky) else { continue };
                        let dst = &mut plane[iy * g.w..][..g.w];
                        let src = &cols[row + (bi * g.ho + oy) * g.wo..][..g.wo];
                        if g.stride == 1 {
                            let off = lo + kx - g.pad;
                            for (d, &s) in dst[off..off + hi - lo].iter_mut().zip(&src[lo..hi]) {
                                *d += s;
                            }
                        } else {
                            for ox in lo..hi {
                                dst[ox * g.stride + kx - g.pad] += src[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Columns `b0 * plane ..` of a `[rows, batch * plane]` matrix, `nb` batch
/// elements wide.
fn block<T>(data: &[T], rows: usize, batch: usize, plane: usize, b0: usize, nb: usize) -> MatRef<'_, T> {
    MatRef { data: &data[b0 * plane..], rows, cols: nb * plane, rs: batch * plane, cs: 1 }
}

pub(crate) struct ConvCtx {
    geom: ConvGeom,
    cout: usize,
}

fn add_bias<T: Float>(out: &mut [T], bias: &[T], plane: usize) {
    for (row, &b) in out.chunks_mut(plane).zip(bias) {
        for v in row {
            *v += b;
        }
    }
}

fn bias_grad<T: Float>(gy: &[T], cout: usize) -> Tensor<T> {
    let plane = gy.len() / cout;
    let data = gy.chunks(plane).map(|r| r.iter().copied().sum()).collect();
    Tensor::new(vec![cout], data).expect("bias")
}

impl<T: Float> Graph<T> {
    /// Cross-correlation. `x: [Cin, B, H, W]`, `w: [Cout, Cin, k, k]`,
    /// `b: [Cout]`; output `[Cout, B, Ho, Wo]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != ws[3] {
            return Err(Error::shape("conv2d", format!("input {:?}, kernel {:?}", xs, ws)));
        }
        if self.shape(b) != [ws[0]] {
            return Err(Error::shape("conv2d", format!("bias {:?} for {} outputs", self.shape(b), ws[0])));
        }
        let k = ws[2];
        let (ho, wo) = match (ConvGeom::conv_out(xs[2], k, stride, pad), ConvGeom::conv_out(xs[3], k, stride, pad)) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => return Err(Error::shape("conv2d", format!("kernel {k} stride {stride} pad {pad} on {:?}", xs))),
        };
        let geom = ConvGeom { batch: xs[1], c: xs[0], h: xs[2], w: xs[3], k, stride, pad, ho, wo };
        let cout = ws[0];
        let n = geom.grid();
        let plane = ho * wo;
        let mut out = vec![T::zero(); cout * n];
        let mut cols = Vec::new();
        let (xv, wv) = (self.value(x).data(), MatRef::new(self.value(w).data(), cout, geom.rows()));
        for (b0, nb) in chunks(&geom) {
            im2col(xv, &geom, b0, nb, &mut cols);
            let c = MatRef::new(&cols, geom.rows(), nb * plane);
            gemm_ld(wv, c, T::zero(), &mut out[b0 * plane..], n);
        }
        add_bias(&mut out, self.value(b).data(), n);
        let out = Tensor::new(vec![cout, xs[1], ho, wo], out)?;
        Ok(self.push(out, Op::Conv2d(ConvCtx { geom, cout }), vec![x, w, b], false))
    }

    /// Transposed convolution, the adjoint of [`Graph::conv2d`] with the
    /// same `k`, `stride`, `pad`. `x: [Cin, B, H, W]`, `w: [Cin, Cout, k, k]`,
    /// `b: [Cout]`; output `[Cout, B, (H-1)s-2p+k, (W-1)s-2p+k]`.
    pub fn deconv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || ws[0] != xs[0] || ws[2] != ws[3] {
            return Err(Error::shape("deconv2d", format!("input {:?}, kernel {:?}", xs, ws)));
        }
        if self.shape(b) != [ws[1]] {
            return Err(Error::shape("deconv2d", format!("bias {:?} for {} outputs", self.shape(b), ws[1])));
        }
        let (cin, cout, k) = (ws[0], ws[1], ws[2]);
        let (ho, wo) = match (ConvGeom::deconv_out(xs[2], k, stride, pad), ConvGeom::deconv_out(xs[3], k, stride, pad)) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => return Err(Error::shape("deconv2d", format!("kernel {k} stride {stride} pad {pad} on {:?}", xs))),
        };
        // Convolution geometry running from the output image back to the input grid.
        let geom = ConvGeom { batch: xs[1], c: cout, h: ho, w: wo, k, stride, pad, ho: xs[2], wo: xs[3] };
        let plane = geom.ho * geom.wo;
        let mut out = vec![T::zero(); cout * xs[1] * ho * wo];
        let mut cols = Vec::new();
        let wt = MatRef::new(self.value(w).data(), cin, geom.rows()).t();
        let xv = self.value(x).data();
        for (b0, nb) in chunks(&geom) {
            cols.clear();
            cols.resize(geom.rows() * nb * plane, T::zero());
            gemm(wt, block(xv, cin, geom.batch, plane, b0, nb), T::zero(), &mut cols);
            col2im(&cols, &geom, b0, nb, &mut out);
        }
        add_bias(&mut out, self.value(b).data(), xs[1] * ho * wo);
        let out = Tensor::new(vec![cout, xs[1], ho, wo], out)?;
        let ctx = ConvCtx { geom, cout };
        Ok(self.push(out, Op::Deconv2d(ctx), vec![x, w, b], false))
    }

    /// 2x2 max pooling with stride 2. Odd trailing rows/columns are padded
    /// by replication, so the output is `ceil(H/2) x ceil(W/2)`.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("maxpool2", format!("expected rank 4, got {:?}", xs)));
        }
        let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(planes * ho * wo);
        let mut argmax = Vec::with_capacity(planes * ho * wo);
        for p in 0..planes {
            let plane = &src[p * h * w..][..h * w];
            for oy in 0..ho {
                let (y0, y1) = (2 * oy, (2 * oy + 1).min(h - 1));
                for ox in 0..wo {
                    let (x0, x1) = (2 * ox, (2 * ox + 1).min(w - 1));
                    let mut best = y0 * w + x0;
                    for idx in [y0 * w + x1, y1 * w + x0, y1 * w + x1] {
                        if plane[idx] > plane[best] {
                            best = idx;
                        }
                    }
                    out.push(plane[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let out = Tensor::new(vec![xs[0], xs[1], ho, wo], out)?;
        Ok(self.push(out, Op::MaxPool2 { argmax }, vec![x], false))
    }
}

pub(crate) fn conv2d_backward<T: Float>(
    ctx: &ConvCtx,
    x: &[&Tensor<T>],
    gy: &Tensor<T>,
    needs: &[bool],
) -> Vec<Option<Tensor<T>>> {
    let g = &ctx.geom;
    let rows = g.rows();
    let plane = g.ho * g.wo;
    let w = MatRef::new(x[1].data(), ctx.cout, rows);
    let mut dx = needs[0].then(|| vec![T::zero(); x[0].len()]);
    let mut dw = needs[1].then(|| vec![T::zero(); ctx.cout * rows]);
    let (mut cols, mut dcols) = (Vec::new(), Vec::new());
    for (k, (b0, nb)) in chunks(g).enumerate() {
        let dy = block(gy.data(), ctx.cout, g.batch, plane, b0, nb);
        if let Some(dw) = dw.as_mut() {
            im2col(x[0].data(), g, b0, nb, &mut cols);
            let beta = if k == 0 { T::zero() } else { T::one() };
            gemm(dy, MatRef::new(&cols, rows, nb * plane).t(), beta, dw);
        }
        if let Some(dx) = dx.as_mut() {
            dcols.clear();
            dcols.resize(rows * nb * plane, T::zero());
            gemm(w.t(), dy, T::zero(), &mut dcols);
            col2im(&dcols, g, b0, nb, dx);
        }
    }
    let gx = dx.map(|d| Tensor::new(x[0].shape().to_vec(), d).expect("conv dx"));
    let gw = dw.map(|d| Tensor::new(x[1].shape().to_vec(), d).expect("conv dw"));
    let gb = needs[2].then(|| bias_grad(gy.data(), ctx.cout));
    vec![gx, gw, gb]
}

pub(crate) fn deconv2d_backward<T: Float>(
    ctx: &ConvCtx,
    x: &[&Tensor<T>],
    gy: &Tensor<T>,
    needs: &[bool],
) -> Vec<Option<Tensor<T>>> {
    let g = &ctx.geom;
    let rows = g.rows();
    let cin = x[0].dim(0);
    let plane = g.ho * g.wo;
    let n = g.grid();
    let w = MatRef::new(x[1].data(), cin, rows);
    let mut dx = needs[0].then(|| vec![T::zero(); cin * n]);
    let mut dw = needs[1].then(|| vec![T::zero(); cin * rows]);
    let mut dcols = Vec::new();
    for (k, (b0, nb)) in chunks(g).enumerate() {
        im2col(gy.data(), g, b0, nb, &mut dcols);
        let dc = MatRef::new(&dcols, rows, nb * plane);
        if let Some(dx) = dx.as_mut() {
            gemm_ld(w, dc, T::zero(), &mut dx[b0 * plane..], n);
        }
        if let Some(dw) = dw.as_mut() {
            let beta = if k == 0 { T::zero() } else { T::one() };
            gemm(block(x[0].data(), cin, g.batch, plane, b0, nb), dc.t(), beta, dw);
        }
    }
    let gx = dx.map(|d| Tensor::new(x[0].shape().to_vec(), d).expect("deconv dx"));
    let gw = dw.map(|d| Tensor::new(x[1].shape().to_vec(), d).expect("deconv dw"));
    let gb = needs[2].then(|| bias_grad(gy.data(), ctx.cout));
    vec![gx, gw, gb]
}

pub(crate) fn maxpool2_backward<T: Float>(argmax: &[u32], x: &Tensor<T>, gy: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (x.dim(2), x.dim(3));
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let mut gx = Tensor::zeros(x.shape().to_vec());
    let dst = gx.data_mut();
    for (i, (&a, &g)) in argmax.iter().zip(gy.data()).enumerate() {
        let plane = i / (ho * wo);
        dst[plane * h * w + a as usize] += g;
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn shape_rules() {
        assert_eq!(ConvGeom::conv_out(5, 3, 1, 1), Some(5));
        assert_eq!(ConvGeom::conv_out(224, 3, 2, 1), Some(112));
        assert_eq!(ConvGeom::conv_out(2, 3, 1, 0), None);
        assert_eq!(ConvGeom::deconv_out(7, 4, 2, 1), Some(14));
        assert_eq!(ConvGeom::deconv_out(3, 1, 1, 0), Some(3));
    }

    #[test]
    fn unit_kernel_is_identity() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..2 * 3 * 3).map(|v| v as f64).collect();
        let x = g.input(t(&[1, 2, 3, 3], data.clone()));
        let w = g.input(t(&[1, 1, 1, 1], vec![1.0]));
        let b = g.input(t(&[1], vec![0.0]));
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);
        let y2 = g.deconv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.value(y2).data(), &data[..]);
    }

    #[test]
    fn all_ones_three_by_three() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::full([1, 1, 5, 5], 1.0));
        let w = g.input(Tensor::full([1, 1, 3, 3], 1.0));
        let b = g.input(Tensor::zeros([1]));
        let y = g.conv2d(x, w, b, 1, 1).unwrap();
        let v = g.value(y).data();
        assert_eq!(v[0], 4.0);
        assert_eq!(v[2], 6.0);
        assert_eq!(v[2 * 5 + 2], 9.0);
        assert_eq!(v[24], 4.0);
    }

    #[test]
    fn strided_conv_matches_direct_loop() {
        let (cin, cout, b, h, w, k, s, p) = (2, 3, 2, 5, 4, 3, 2, 1);
        let xd: Vec<f64> = (0..cin * b * h * w).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
        let wd: Vec<f64> = (0..cout * cin * k * k).map(|i| ((i * 13 % 7) as f64) * 0.5 - 1.0).collect();
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[cin, b, h, w], xd.clone()));
        let wv = g.input(t(&[cout, cin, k, k], wd.clone()));
        let bv = g.input(t(&[cout], vec![0.5, -1.0, 2.0]));
        let y = g.conv2d(x, wv, bv, s, p).unwrap();
        let (ho, wo) = (3, 2);
        assert_eq!(g.shape(y), &[cout, b, ho, wo]);
        let bias = [0.5, -1.0, 2.0];
        for co in 0..cout {
            for bi in 0..b {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = bias[co];
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * s + ky) as isize - p as isize;
                                    let ix = (ox * s + kx) as isize - p as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += wd[((co * cin + ci) * k + ky) * k + kx]
                                        * xd[((ci * b + bi) * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                        let got = g.value(y).data()[((co * b + bi) * ho + oy) * wo + ox];
                        assert!((got - acc).abs() < 1e-12, "{got} vs {acc}");
                    }
                }
            }
        }
    }

    fn per_sample_agrees(deconv: bool) {
        let (cin, cout, b, h, w) = (8, 8, 3, 70, 70);
        let k = if deconv { 4 } else { 3 };
        let xd: Vec<f64> = (0..cin * b * h * w).map(|i| ((i * 37 % 101) as f64) / 50.0 - 1.0).collect();
        let wd: Vec<f64> = (0..cout * cin * k * k).map(|i| ((i * 13 % 17) as f64) / 8.0 - 1.0).collect();
        let run = |xd: Vec<f64>, nb: usize| {
            let mut g = Graph::<f64>::new();
            let x = g.input(t(&[cin, nb, h, w], xd));
            let wshape = if deconv { [cin, cout, k, k] } else { [cout, cin, k, k] };
            let wv = g.input(t(&wshape, wd.clone()));
            let bv = g.input(t(&[cout], vec![0.25; cout]));
            let y = if deconv { g.deconv2d(x, wv, bv, 2, 1) } else { g.conv2d(x, wv, bv, 1, 1) }.unwrap();
            let sq = g.mul(y, y).unwrap();
            let s = g.sum(sq);
            let gr = g.backward(s);
            (g.value(y).data().to_vec(), gr.wrt(x).unwrap().data().to_vec(), gr.wrt(wv).unwrap().data().to_vec())
        };
        let (y, dx, dw) = run(xd.clone(), b);
        let mut dw_sum = vec![0.0; dw.len()];
        let plane = h * w;
        for bi in 0..b {
            let xs: Vec<f64> = (0..cin).flat_map(|c| xd[(c * b + bi) * plane..][..plane].to_vec()).collect();
            let (ys, dxs, dws) = run(xs, 1);
            let oplane = ys.len() / cout;
            for c in 0..cout {
                for j in 0..oplane {
                    assert!((ys[c * oplane + j] - y[(c * b + bi) * oplane + j]).abs() < 1e-9);
                }
            }
            for c in 0..cin {
                for j in 0..plane {
                    assert!((dxs[c * plane + j] - dx[(c * b + bi) * plane + j]).abs() < 1e-7);
                }
            }
            for (a, d) in dw_sum.iter_mut().zip(dws) {
                *a += d;
            }
        }
        for (a, d) in dw_sum.iter().zip(&dw) {
            assert!((a - d).abs() <= 1e-9 * d.abs().max(1.0), "{a} vs {d}");
        }
    }

    #[test]
    fn batch_chunking_is_invisible_conv() {
        per_sample_agrees(false);
    }

    #[test]
    fn batch_chunking_is_invisible_deconv() {
        per_sample_agrees(true);
    }

    #[test]
    fn maxpool_single_window_and_ties() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[1, 1, 2, 2], vec![1., 2., 3., 4.]));
        let y = g.maxpool2(x).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);

        let c = g.input(Tensor::full([1, 1, 2, 2], 7.0));
        let yc = g.maxpool2(c).unwrap();
        assert_eq!(g.value(yc).data(), &[7.0]);
        let s = g.sum(yc);
        let grads = g.backward(s);
        assert_eq!(grads.wrt(c).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_odd_dims_replicate() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[1, 1, 3, 3], (0..9).map(|v| v as f64).collect()));
        let y = g.maxpool2(x).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 2, 2]);
        assert_eq!(g.value(y).data(), &[4.0, 5.0, 7.0, 8.0]);
    }
}
