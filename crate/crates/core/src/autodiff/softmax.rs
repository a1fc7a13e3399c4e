use crate::autodiff::graph::{Graph, Op, Var};
use crate::autodiff::{Float, Tensor};
use crate::error::{Error, Result};

fn rank4(op: &'static str, s: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *s {
        [c, b, h, w] => Ok((c, b, h, w)),
        _ => Err(Error::shape(op, format!("expected [C, B, H, W], got {:?}", s))),
    }
}

/// Max-subtracted softmax of a contiguous run, written into `out`.
fn softmax_into<T: Float>(x: &[T], out: &mut [T], inv_temp: T) {
    let m = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = ((v - m) * inv_temp).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

pub(crate) struct SoftArgmaxCtx<T> {
    inv_temp: T,
    channels: usize,
    probs: Vec<T>,
    coords: Vec<T>,
}

impl<T: Float> Graph<T> {
    /// Softmax over all spatial positions of each `(channel, batch)` plane.
    pub fn spatial_softmax(&mut self, x: Var) -> Result<Var> {
        let (_, _, h, w) = rank4("spatial_softmax", self.shape(x))?;
        let v = self.value(x);
        let mut out = vec![T::zero(); v.len()];
        for (src, dst) in v.data().chunks(h * w).zip(out.chunks_mut(h * w)) {
            softmax_into(src, dst, T::one());
        }
        let out = Tensor::new(v.shape().to_vec(), out)?;
        Ok(self.push(out, Op::SpatialSoftmax, vec![x], false))
    }

    /// Softmax across channels at every pixel.
    pub fn channel_softmax(&mut self, x: Var) -> Result<Var> {
        let out = channel_map(self.value(x), "channel_softmax", |col, out| {
            softmax_into(col, out, T::one())
        })?;
        Ok(self.push(out, Op::ChannelSoftmax, vec![x], false))
    }

    /// Log-softmax across channels at every pixel.
    pub fn log_softmax_channels(&mut self, x: Var) -> Result<Var> {
        let out = channel_map(self.value(x), "log_softmax_channels", |col, out| {
            let m = col.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + col.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            for (o, &v) in out.iter_mut().zip(col) {
                *o = v - lse;
            }
        })?;
        Ok(self.push(out, Op::LogSoftmaxChannels, vec![x], false))
    }

    /// Differentiable coordinate decoding: spatial softmax of each of the
    /// first `channels` planes at `temperature`, then the probability
    /// weighted mean position. Output `[B, 2 * channels]` holding
    /// `(x, y) = (column, row)` pairs.
    pub fn soft_argmax(&mut self, x: Var, channels: usize, temperature: f64) -> Result<Var> {
        let (c, b, h, w) = rank4("soft_argmax", self.shape(x))?;
        if channels > c {
            return Err(Error::shape("soft_argmax", format!("{channels} channels requested of {c}")));
        }
        if !(temperature > 0.0) {
            return Err(Error::InvalidArgument(format!("soft-argmax temperature must be > 0, got {temperature}")));
        }
        let inv_temp = T::from_f64(1.0 / temperature);
        let hw = h * w;
        let src = self.value(x).data();
        let mut probs = vec![T::zero(); channels * b * hw];
        let mut coords = vec![T::zero(); b * 2 * channels];
        for ci in 0..channels {
            for bi in 0..b {
                let plane = (ci * b + bi) * hw;
                let p = &mut probs[plane..plane + hw];
                softmax_into(&src[plane..plane + hw], p, inv_temp);
                let (mut ex, mut ey) = (T::zero(), T::zero());
                for (j, &pj) in p.iter().enumerate() {
                    ex += pj * T::from_f64((j % w) as f64);
                    ey += pj * T::from_f64((j / w) as f64);
                }
                coords[bi * 2 * channels + 2 * ci] = ex;
                coords[bi * 2 * channels + 2 * ci + 1] = ey;
            }
        }
        let out = Tensor::new(vec![b, 2 * channels], coords.clone())?;
        let ctx = SoftArgmaxCtx { inv_temp, channels, probs, coords };
        Ok(self.push(out, Op::SoftArgmax(ctx), vec![x], false))
    }
}

/// Applies `f` to the channel vector of every pixel of a `[C, B, H, W]` map.
fn channel_map<T: Float>(v: &Tensor<T>, op: &'static str, mut f: impl FnMut(&[T], &mut [T])) -> Result<Tensor<T>> {
    let (c, b, h, w) = rank4(op, v.shape())?;
    let plane = b * h * w;
    let src = v.data();
    let mut out = vec![T::zero(); src.len()];
    let mut col = vec![T::zero(); c];
    let mut res = vec![T::zero(); c];
    for p in 0..plane {
        for ci in 0..c {
            col[ci] = src[ci * plane + p];
        }
        f(&col, &mut res);
        for ci in 0..c {
            out[ci * plane + p] = res[ci];
        }
    }
    Tensor::new(v.shape().to_vec(), out)
}

pub(crate) fn spatial_softmax_backward<T: Float>(y: &Tensor<T>, gy: &Tensor<T>) -> Tensor<T> {
    let hw = y.dim(2) * y.dim(3);
    let mut gx = vec![T::zero(); y.len()];
    for ((yp, gp), dp) in y.data().chunks(hw).zip(gy.data().chunks(hw)).zip(gx.chunks_mut(hw)) {
        let dot: T = yp.iter().zip(gp).map(|(&a, &b)| a * b).sum();
        for ((d, &yy), &gg) in dp.iter_mut().zip(yp).zip(gp) {
            *d = yy * (gg - dot);
        }
    }
    Tensor::new(y.shape().to_vec(), gx).expect("spatial softmax grad")
}

pub(crate) fn channel_softmax_backward<T: Float>(y: &Tensor<T>, gy: &Tensor<T>) -> Tensor<T> {
    let c = y.dim(0);
    let plane = y.len() / c;
    let (yv, gv) = (y.data(), gy.data());
    let mut gx = vec![T::zero(); y.len()];
    for p in 0..plane {
        let mut dot = T::zero();
        for ci in 0..c {
            dot += yv[ci * plane + p] * gv[ci * plane + p];
        }
        for ci in 0..c {
            let i = ci * plane + p;
            gx[i] = yv[i] * (gv[i] - dot);
        }
    }
    Tensor::new(y.shape().to_vec(), gx).expect("channel softmax grad")
}

pub(crate) fn log_softmax_channels_backward<T: Float>(y: &Tensor<T>, gy: &Tensor<T>) -> Tensor<T> {
    let c = y.dim(0);
    let plane = y.len() / c;
    let (yv, gv) = (y.data(), gy.data());
    let mut gx = vec![T::zero(); y.len()];
    for p in 0..plane {
        let mut sg = T::zero();
        for ci in 0..c {
            sg += gv[ci * plane + p];
        }
        for ci in 0..c {
            let i = ci * plane + p;
            gx[i] = gv[i] - yv[i].exp() * sg;
        }
    }
    Tensor::new(y.shape().to_vec(), gx).expect("log softmax grad")
}

pub(crate) fn soft_argmax_backward<T: Float>(ctx: &SoftArgmaxCtx<T>, x: &Tensor<T>, gy: &Tensor<T>) -> Tensor<T> {
    let (b, w) = (x.dim(1), x.dim(3));
    let hw = x.dim(2) * w;
    let n = ctx.channels;
    let mut gx = Tensor::zeros(x.shape().to_vec());
    let dst = gx.data_mut();
    let g = gy.data();
    for ci in 0..n {
        for bi in 0..b {
            let plane = (ci * b + bi) * hw;
            let k = bi * 2 * n + 2 * ci;
            let (gxc, gyc) = (g[k], g[k + 1]);
            let (ex, ey) = (ctx.coords[k], ctx.coords[k + 1]);
            for j in 0..hw {
                let col = T::from_f64((j % w) as f64);
                let row = T::from_f64((j / w) as f64);
                dst[plane + j] = ctx.probs[plane + j] * ctx.inv_temp * (gxc * (col - ex) + gyc * (row - ey));
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_plane_gives_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::full([2, 1, 3, 4], 5.0));
        let y = g.spatial_softmax(x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| (v - 1.0 / 12.0).abs() < 1e-15));
        let z = g.channel_softmax(x).unwrap();
        assert!(g.value(z).data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn spatial_softmax_shift_invariant() {
        let data: Vec<f64> = (0..9).map(|i| (i as f64 * 0.7).sin()).collect();
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::new([1, 1, 3, 3], data.clone()).unwrap());
        let b = g.input(Tensor::new([1, 1, 3, 3], data.iter().map(|v| v + 42.0).collect()).unwrap());
        let ya = g.spatial_softmax(a).unwrap();
        let yb = g.spatial_softmax(b).unwrap();
        for (p, q) in g.value(ya).data().iter().zip(g.value(yb).data()) {
            assert!((p - q).abs() < 1e-14);
        }
    }

    #[test]
    fn log_softmax_exp_is_softmax() {
        let data: Vec<f64> = (0..3 * 2 * 2 * 2).map(|i| (i as f64 * 1.3).cos() * 3.0).collect();
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::new([3, 2, 2, 2], data).unwrap());
        let s = g.channel_softmax(x).unwrap();
        let l = g.log_softmax_channels(x).unwrap();
        for (p, q) in g.value(s).data().iter().zip(g.value(l).data()) {
            assert!((p - q.exp()).abs() < 1e-14);
        }
    }

    #[test]
    fn soft_argmax_uniform_plane_is_center() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros([1, 1, 5, 7]));
        let c = g.soft_argmax(x, 1, 1.0).unwrap();
        let v = g.value(c).data();
        assert!((v[0] - 3.0).abs() < 1e-12);
        assert!((v[1] - 2.0).abs() < 1e-12);
    }
}
