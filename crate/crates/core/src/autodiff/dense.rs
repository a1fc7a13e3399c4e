use crate::autodiff::float::{gemm, MatRef};
use crate::autodiff::graph::{Graph, Op, Var};
use crate::autodiff::{Float, Tensor};
use crate::error::{Error, Result};

/// Batchnorm statistics source.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a, T> {
    /// Normalize by the statistics of the current batch.
    Train,
    /// Normalize by stored running statistics.
    Eval { mean: &'a [T], var: &'a [T] },
}

/// Per-channel statistics of a training-mode batchnorm call (biased
/// variance), for the caller's running-average update.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Index decomposition `(outer, channel, inner)` of a normalized tensor.
#[derive(Clone, Copy, Debug)]
struct Strides {
    outer: usize,
    c: usize,
    inner: usize,
}

impl Strides {
    fn of(shape: &[usize]) -> Option<Self> {
        match shape.len() {
            2 => Some(Strides { outer: shape[0], c: shape[1], inner: 1 }),
            4 => Some(Strides { outer: 1, c: shape[0], inner: shape[1] * shape[2] * shape[3] }),
            _ => None,
        }
    }

    fn count(&self) -> usize {
        self.outer * self.inner
    }

    /// Calls `f` with each contiguous index range of channel `c`.
    fn for_channel(&self, c: usize, mut f: impl FnMut(std::ops::Range<usize>)) {
        for o in 0..self.outer {
            let base = (o * self.c + c) * self.inner;
            f(base..base + self.inner);
        }
    }
}

pub(crate) struct BnCtx<T> {
    strides: Strides,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    train: bool,
}

impl<T: Float> Graph<T> {
    /// Batch normalization over every axis but the channel axis (axis 0 of
    /// a `[C, B, H, W]` map, axis 1 of a `[B, F]` matrix).
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        mode: BnMode<'_, T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let xs = self.shape(x).to_vec();
        let st = Strides::of(&xs)
            .ok_or_else(|| Error::shape("batchnorm", format!("expected rank 2 or 4, got {:?}", xs)))?;
        if self.shape(gamma) != [st.c] || self.shape(beta) != [st.c] {
            return Err(Error::shape("batchnorm", format!("scale/shift must be [{}]", st.c)));
        }
        let n = st.count();
        let eps = T::from_f64(eps);
        let xv = self.value(x).data();
        let (mean, var, train) = match mode {
            BnMode::Train => {
                if n < 2 {
                    return Err(Error::InvalidArgument("batchnorm train mode needs at least 2 values per channel".into()));
                }
                let nf = T::from_f64(n as f64);
                let mut mean = vec![T::zero(); st.c];
                let mut var = vec![T::zero(); st.c];
                for c in 0..st.c {
                    let mut s = T::zero();
                    st.for_channel(c, |r| s += xv[r].iter().copied().sum::<T>());
                    let m = s / nf;
                    let mut q = T::zero();
                    st.for_channel(c, |r| q += xv[r].iter().map(|&v| (v - m) * (v - m)).sum::<T>());
                    mean[c] = m;
                    var[c] = q / nf;
                }
                (mean, var, true)
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != st.c || var.len() != st.c {
                    return Err(Error::shape("batchnorm", "running statistics length"));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for c in 0..st.c {
            let (m, k, gc, bc) = (mean[c], inv_std[c], gv[c], bv[c]);
            st.for_channel(c, |r| {
                for ((h, o), &v) in xhat[r.clone()].iter_mut().zip(&mut out[r.clone()]).zip(&xv[r]) {
                    *h = (v - m) * k;
                    *o = gc * *h + bc;
                }
            });
        }
        let out = Tensor::new(xs, out)?;
        let stats = train.then_some(BatchStats { mean, var });
        let ctx = BnCtx { strides: st, xhat, inv_std, train };
        Ok((self.push(out, Op::BatchNorm(ctx), vec![x, gamma, beta], false), stats))
    }

    /// Affine map `x W^T + b` with `x: [B, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || self.shape(b) != [ws[0]] {
            return Err(Error::shape(
                "linear",
                format!("input {:?}, weight {:?}, bias {:?}", xs, ws, self.shape(b)),
            ));
        }
        let (batch, fin, fout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); batch * fout];
        gemm(
            MatRef::new(self.value(x).data(), batch, fin),
            MatRef::new(self.value(w).data(), fout, fin).t(),
            T::zero(),
            &mut out,
        );
        let bias = self.value(b).data();
        for row in out.chunks_mut(fout) {
            for (v, &bb) in row.iter_mut().zip(bias) {
                *v += bb;
            }
        }
        let out = Tensor::new(vec![batch, fout], out)?;
        Ok(self.push(out, Op::Linear, vec![x, w, b], false))
    }
}

pub(crate) fn batchnorm_backward<T: Float>(ctx: &BnCtx<T>, x: &[&Tensor<T>], gy: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
    let st = ctx.strides;
    let g = gy.data();
    let gamma = x[1].data();
    let n = T::from_f64(st.count() as f64);
    let mut dx = vec![T::zero(); g.len()];
    let mut dgamma = vec![T::zero(); st.c];
    let mut dbeta = vec![T::zero(); st.c];
    for c in 0..st.c {
        let (mut sg, mut sgx) = (T::zero(), T::zero());
        st.for_channel(c, |r| {
            for (&gi, &h) in g[r.clone()].iter().zip(&ctx.xhat[r]) {
                sg += gi;
                sgx += gi * h;
            }
        });
        dgamma[c] = sgx;
        dbeta[c] = sg;
        let k = gamma[c] * ctx.inv_std[c];
        if ctx.train {
            // d xhat = g * gamma; sums over the channel carry the mean/var paths.
            let (mg, mgx) = (sg / n, sgx / n);
            st.for_channel(c, |r| {
                for ((d, &gi), &h) in dx[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&ctx.xhat[r]) {
                    *d = k * (gi - mg - h * mgx);
                }
            });
        } else {
            st.for_channel(c, |r| {
                for (d, &gi) in dx[r.clone()].iter_mut().zip(&g[r]) {
                    *d = k * gi;
                }
            });
        }
    }
    vec![
        Some(Tensor::new(x[0].shape().to_vec(), dx).expect("bn dx")),
        Some(Tensor::new(vec![st.c], dgamma).expect("bn dgamma")),
        Some(Tensor::new(vec![st.c], dbeta).expect("bn dbeta")),
    ]
}

pub(crate) fn linear_backward<T: Float>(x: &[&Tensor<T>], gy: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
    let (batch, fin) = (x[0].dim(0), x[0].dim(1));
    let fout = x[1].dim(0);
    let dy = MatRef::new(gy.data(), batch, fout);
    let gx = needs[0].then(|| {
        let mut dx = vec![T::zero(); batch * fin];
        gemm(dy, MatRef::new(x[1].data(), fout, fin), T::zero(), &mut dx);
        Tensor::new(vec![batch, fin], dx).expect("linear dx")
    });
    let gw = needs[1].then(|| {
        let mut dw = vec![T::zero(); fout * fin];
        gemm(dy.t(), MatRef::new(x[0].data(), batch, fin), T::zero(), &mut dw);
        Tensor::new(vec![fout, fin], dw).expect("linear dw")
    });
    let gb = needs[2].then(|| {
        let mut db = vec![T::zero(); fout];
        for row in gy.data().chunks(fout) {
            for (d, &v) in db.iter_mut().zip(row) {
                *d += v;
            }
        }
        Tensor::new(vec![fout], db).expect("linear db")
    });
    vec![gx, gw, gb]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_hand_case() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::new([1, 2], vec![4.0, 5.0]).unwrap());
        let w = g.input(Tensor::new([1, 2], vec![1.0, 2.0]).unwrap());
        let b = g.input(Tensor::new([1], vec![3.0]).unwrap());
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[17.0]);
    }

    #[test]
    fn linear_identity() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::new([2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 4] = 1.0;
        }
        let w = g.input(Tensor::new([3, 3], eye).unwrap());
        let b = g.input(Tensor::zeros([3]));
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn batchnorm_standardized_input_passes_through() {
        let mut g = Graph::<f64>::new();
        // Two features, four rows, each column zero-mean unit (biased) variance.
        let data = vec![1., -1., -1., 1., 1., -1., -1., 1.];
        let x = g.input(Tensor::new([4, 2], data.clone()).unwrap());
        let gamma = g.input(Tensor::full([2], 1.0));
        let beta = g.input(Tensor::zeros([2]));
        let (y, stats) = g.batchnorm(x, gamma, beta, 1e-5, BnMode::Train).unwrap();
        let stats = stats.unwrap();
        assert_eq!(stats.mean, vec![0.0, 0.0]);
        assert_eq!(stats.var, vec![1.0, 1.0]);
        for (a, b) in g.value(y).data().iter().zip(&data) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn batchnorm_output_statistics_follow_scale_and_shift() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..2 * 3 * 2 * 2).map(|i| ((i * 7919) % 23) as f64 * 0.3 - 2.0).collect();
        let x = g.input(Tensor::new([2, 3, 2, 2], data).unwrap());
        let gamma = g.input(Tensor::new([2], vec![2.0, 0.5]).unwrap());
        let beta = g.input(Tensor::new([2], vec![-1.0, 3.0]).unwrap());
        let (y, _) = g.batchnorm(x, gamma, beta, 1e-12, BnMode::Train).unwrap();
        let v = g.value(y).data();
        for (c, (scale, shift)) in [(2.0, -1.0), (0.5, 3.0)].into_iter().enumerate() {
            let ch = &v[c * 12..(c + 1) * 12];
            let m = ch.iter().sum::<f64>() / 12.0;
            let var = ch.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 12.0;
            assert!((m - shift).abs() < 1e-9);
            assert!((var - scale * scale).abs() < 1e-6);
        }
    }

    #[test]
    fn batchnorm_train_rejects_single_value() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros([1, 2]));
        let gamma = g.input(Tensor::full([2], 1.0));
        let beta = g.input(Tensor::zeros([2]));
        assert!(g.batchnorm(x, gamma, beta, 1e-5, BnMode::Train).is_err());
    }
}
