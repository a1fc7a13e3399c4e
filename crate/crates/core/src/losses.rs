//! Training objectives.
//!
//! Each loss exists at two levels. Graph builders (`reg`, `dist`, `hreg`,
//! `pwc`, `face`, `disc` and their logit-space twins) append a node with an
//! analytic backward rule to a [`Graph`]. The `loss_*` functions evaluate
//! the same nodes on plain landmark sets, heatmap stacks and score lists
//! and return a [`LossValue`].
//!
//! Probabilities entering a logarithm are clamped to `[PROB_EPS, 1]`
//! (and to `1 - PROB_EPS` from above where `log(1 - p)` appears); the
//! clamped region has zero gradient.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, Float, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::LandmarkSet;
use crate::heatmap::{HeatmapStack, PwcLabelMap, Semantics};

pub const PROB_EPS: f64 = 1e-7;

/// Weight of the pixel-classification term of the hybrid loss.
pub const HYBRID_ALPHA: f64 = 1.0;
/// Weight of the coordinate term of the hybrid loss.
pub const HYBRID_BETA: f64 = 0.25;

/// One weighted component of a composite loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerm {
    pub name: String,
    pub weight: f64,
    pub value: f64,
}

/// A scalar loss and, for composites, its weighted terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub name: String,
    pub value: f64,
    pub terms: Vec<LossTerm>,
}

impl LossValue {
    pub fn leaf(name: impl Into<String>, value: f64) -> Self {
        LossValue { name: name.into(), value, terms: Vec::new() }
    }

    /// `sum_i weight_i * value_i` over the parts, each recorded as a term.
    pub fn weighted(name: impl Into<String>, parts: &[(&LossValue, f64)]) -> Self {
        let value = parts.iter().map(|(l, w)| w * l.value).sum();
        let terms = parts.iter().map(|(l, w)| LossTerm { name: l.name.clone(), weight: *w, value: l.value }).collect();
        LossValue { name: name.into(), value, terms }
    }

    pub fn term(&self, name: &str) -> Option<&LossTerm> {
        self.terms.iter().find(|t| t.name == name)
    }

    /// `step,<name>=<value>,<term>=<value>,...`
    pub fn log_line(&self, step: u64) -> String {
        let mut s = format!("{step},{}={}", self.name, self.value);
        for t in &self.terms {
            let _ = write!(s, ",{}={}", t.name, t.value);
        }
        s
    }
}

/// Argument order of the KL divergence between truth `t` and prediction `p`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KlDirection {
    /// `KL(t || p) = sum t log(t / p)`.
    #[default]
    Forward,
    /// `KL(p || t) = sum p log(p / t)`.
    Reverse,
}

impl KlDirection {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "forward" => Some(KlDirection::Forward),
            "reverse" => Some(KlDirection::Reverse),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            KlDirection::Forward => "forward",
            KlDirection::Reverse => "reverse",
        }
    }
}

fn eps<T: Float>() -> T {
    T::from_f64(PROB_EPS)
}

fn clamp_ln<T: Float>(p: T) -> T {
    p.max(eps()).ln()
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn rank4(op: &'static str, s: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *s {
        [c, b, h, w] => Ok((c, b, h, w)),
        _ => Err(Error::shape(op, format!("expected [C, B, H, W], got {s:?}"))),
    }
}

fn scalar<T: Float>(v: T) -> Tensor<T> {
    Tensor::scalar(v)
}

// ---------------------------------------------------------------- reg

struct RegOp;

impl<T: Float> CustomOp<T> for RegOp {
    fn name(&self) -> &str {
        "loss_reg"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, gy: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let (p, t) = (inputs[0].data(), inputs[1].data());
        let n = T::from_f64((p.len() / 2) as f64);
        let g = gy.item() / n;
        let mut gp = vec![T::zero(); p.len()];
        for i in (0..p.len()).step_by(2) {
            let (dx, dy) = (p[i] - t[i], p[i + 1] - t[i + 1]);
            let d = (dx * dx + dy * dy).sqrt();
            if d > T::zero() {
                gp[i] = g * dx / d;
                gp[i + 1] = g * dy / d;
            }
        }
        let gt = gp.iter().map(|&v| -v).collect();
        vec![
            Some(Tensor::new(inputs[0].shape().to_vec(), gp).expect("shape")),
            Some(Tensor::new(inputs[1].shape().to_vec(), gt).expect("shape")),
        ]
    }
}

/// Mean Euclidean distance between matching `(x, y)` pairs of two
/// `[B, 2L]` coordinate tensors, averaged over landmarks and the batch.
pub fn reg<T: Float>(g: &mut Graph<T>, pred: Var, truth: Var) -> Result<Var> {
    same_shape("loss_reg", g.shape(pred), g.shape(truth))?;
    let (p, t) = (g.value(pred).data(), g.value(truth).data());
    if p.len() % 2 != 0 || p.is_empty() {
        return Err(Error::shape("loss_reg", format!("{} coordinates do not form pairs", p.len())));
    }
    let mut sum = T::zero();
    for i in (0..p.len()).step_by(2) {
        let (dx, dy) = (p[i] - t[i], p[i + 1] - t[i + 1]);
        sum += (dx * dx + dy * dy).sqrt();
    }
    let v = sum / T::from_f64((p.len() / 2) as f64);
    Ok(g.custom(Box::new(RegOp), &[pred, truth], scalar(v)))
}

// --------------------------------------------------------------- dist

struct DistOp {
    direction: KlDirection,
    batch: usize,
}

impl<T: Float> CustomOp<T> for DistOp {
    fn name(&self) -> &str {
        "loss_dist"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, gy: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let (p, t) = (inputs[0].data(), inputs[1].data());
        let g = gy.item() / T::from_f64(self.batch as f64);
        let e = eps::<T>();
        let mut gp = vec![T::zero(); p.len()];
        let mut gt = vec![T::zero(); p.len()];
        for i in 0..p.len() {
            match self.direction {
                KlDirection::Forward => {
                    if t[i] > T::zero() {
                        if p[i] > e {
                            gp[i] = -g * t[i] / p[i];
                        }
                        gt[i] = g * (clamp_ln(t[i]) + T::one() - clamp_ln(p[i]));
                        if t[i] < e {
                            gt[i] = g * (clamp_ln(t[i]) - clamp_ln(p[i]));
                        }
                    }
                }
                KlDirection::Reverse => {
                    if p[i] > T::zero() {
                        let d = if p[i] > e { T::one() } else { T::zero() };
                        gp[i] = g * (clamp_ln(p[i]) + d - clamp_ln(t[i]));
                        if t[i] > e {
                            gt[i] = -g * p[i] / t[i];
                        }
                    }
                }
            }
        }
        vec![
            Some(Tensor::new(inputs[0].shape().to_vec(), gp).expect("shape")),
            Some(Tensor::new(inputs[1].shape().to_vec(), gt).expect("shape")),
        ]
    }
}

/// Sum over landmark channels of the KL divergence between truth and
/// predicted spatial distributions (`[L, B, H, W]` each), averaged over the
/// batch. `0 log 0` counts as zero.
pub fn dist<T: Float>(g: &mut Graph<T>, pred: Var, truth: Var, direction: KlDirection) -> Result<Var> {
    same_shape("loss_dist", g.shape(pred), g.shape(truth))?;
    let (_, b, _, _) = rank4("loss_dist", g.shape(pred))?;
    let (p, t) = (g.value(pred).data(), g.value(truth).data());
    let mut sum = T::zero();
    for i in 0..p.len() {
        let (a, q) = match direction {
            KlDirection::Forward => (t[i], p[i]),
            KlDirection::Reverse => (p[i], t[i]),
        };
        if a > T::zero() {
            sum += a * (clamp_ln(a) - clamp_ln(q));
        }
    }
    let v = sum / T::from_f64(b as f64);
    Ok(g.custom(Box::new(DistOp { direction, batch: b }), &[pred, truth], scalar(v)))
}

struct DistLogitsOp<T: Float> {
    direction: KlDirection,
    batch: usize,
    probs: Vec<T>,
    log_probs: Vec<T>,
    plane: usize,
}

impl<T: Float> CustomOp<T> for DistLogitsOp<T> {
    fn name(&self) -> &str {
        "loss_dist_logits"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, gy: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let t = inputs[1].data();
        let g = gy.item() / T::from_f64(self.batch as f64);
        let mut gz = vec![T::zero(); t.len()];
        for (k, chunk) in gz.chunks_mut(self.plane).enumerate() {
            let r = k * self.plane..(k + 1) * self.plane;
            let (p, lp, tt) = (&self.probs[r.clone()], &self.log_probs[r.clone()], &t[r]);
            match self.direction {
                KlDirection::Forward => {
                    let mass: T = tt.iter().copied().sum();
                    for j in 0..chunk.len() {
                        chunk[j] = g * (mass * p[j] - tt[j]);
                    }
                }
                KlDirection::Reverse => {
                    let u: Vec<T> = (0..p.len()).map(|j| lp[j] - clamp_ln(tt[j])).collect();
                    let mean: T = (0..p.len()).map(|j| p[j] * u[j]).sum();
                    for j in 0..chunk.len() {
                        chunk[j] = g * p[j] * (u[j] - mean);
                    }
                }
            }
        }
        vec![Some(Tensor::new(inputs[0].shape().to_vec(), gz).expect("shape")), None]
    }
}

/// [`dist`] applied to the spatial softmax of `logits`, computed from
/// log-probabilities so no clamping is needed on the prediction side.
/// The truth receives no gradient.
pub fn dist_logits<T: Float>(g: &mut Graph<T>, logits: Var, truth: Var, direction: KlDirection) -> Result<Var> {
    same_shape("loss_dist", g.shape(logits), g.shape(truth))?;
    let (_, b, h, w) = rank4("loss_dist", g.shape(logits))?;
    let plane = h * w;
    let (z, t) = (g.value(logits).data(), g.value(truth).data());
    let mut probs = vec![T::zero(); z.len()];
    let mut log_probs = vec![T::zero(); z.len()];
    let mut sum = T::zero();
    for k in 0..z.len() / plane {
        let r = k * plane..(k + 1) * plane;
        let zs = &z[r.clone()];
        let max = zs.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + zs.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        for j in r {
            log_probs[j] = z[j] - lse;
            probs[j] = log_probs[j].exp();
            match direction {
                KlDirection::Forward if t[j] > T::zero() => sum += t[j] * (clamp_ln(t[j]) - log_probs[j]),
                KlDirection::Reverse => sum += probs[j] * (log_probs[j] - clamp_ln(t[j])),
                _ => {}
            }
        }
    }
    let v = sum / T::from_f64(b as f64);
    let op = DistLogitsOp { direction, batch: b, probs, log_probs, plane };
    Ok(g.custom(Box::new(op), &[logits, truth], scalar(v)))
}

// --------------------------------------------------------------- hreg

struct HregOp {
    batch: usize,
}

impl<T: Float> CustomOp<T> for HregOp {
    fn name(&self) -> &str {
        "loss_hreg"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, gy: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let (p, t) = (inputs[0].data(), inputs[1].data());
        let g = gy.item() * T::from_f64(2.0 / self.batch as f64);
        let gp: Vec<T> = p.iter().zip(t).map(|(&a, &b)| g * (a - b)).collect();
        let gt = gp.iter().map(|&v| -v).collect();
        vec![
            Some(Tensor::new(inputs[0].shape().to_vec(), gp).expect("shape")),
            Some(Tensor::new(inputs[1].shape().to_vec(), gt).expect("shape")),
        ]
    }
}

/// Sum of squared differences over all channels and pixels of `[C, B, H,
/// W]` maps, averaged over the batch.
pub fn hreg<T: Float>(g: &mut Graph<T>, pred: Var, truth: Var) -> Result<Var> {
    same_shape("loss_hreg", g.shape(pred), g.shape(truth))?;
    let (_, b, _, _) = rank4("loss_hreg", g.shape(pred))?;
    let (p, t) = (g.value(pred).data(), g.value(truth).data());
    let sum: T = p.iter().zip(t).map(|(&a, &b)| (a - b) * (a - b)).sum();
    let v = sum / T::from_f64(b as f64);
    Ok(g.custom(Box::new(HregOp { batch: b }), &[pred, truth], scalar(v)))
}

// ---------------------------------------------------------------- pwc

fn check_labels(op: &'static str, shape: &[usize], labels: &[u32]) -> Result<(usize, usize)> {
    let (c, b, h, w) = rank4(op, shape)?;
    if labels.len() != b * h * w {
        return Err(Error::shape(op, format!("{} labels for {b}x{h}x{w} pixels", labels.len())));
    }
    if let Some(&l) = labels.iter().find(|&&l| l as usize >= c) {
        return Err(Error::InvalidArgument(format!("{op}: label {l} with {c} classes")));
    }
    Ok((c, b * h * w))
}

struct NllOp {
    labels: Vec<u32>,
    log_input: bool,
}

impl<T: Float> CustomOp<T> for NllOp {
    fn name(&self) -> &str {
        if self.log_input {
            "loss_nll"
        } else {
            "loss_pwc"
        }
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, gy: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let x = inputs[0].data();
        let n = self.labels.len();
        let g = gy.item() / T::from_f64(n as f64);
        let mut gx = vec![T::zero(); x.len()];
        for (p, &l) in self.labels.iter().enumerate() {
            let i = l as usize * n + p;
            if self.log_input {
                gx[i] = -g;
            } else if x[i] > eps() {
                gx[i] = -g / x[i];
            }
        }
        vec![Some(Tensor::new(inputs[0].shape().to_vec(), gx).expect("shape"))]
    }
}

/// Pixel-wise cross-entropy: mean over all `B * H * W` pixels of `-log
/// p_class(pixel)`, for class probabilities `[K, B, H, W]` and one label
/// per pixel in `(b, row, col)` order.
pub fn pwc<T: Float>(g: &mut Graph<T>, probs: Var, labels: &[u32]) -> Result<Var> {
    let (_, n) = check_labels("loss_pwc", g.shape(probs), labels)?;
    let p = g.value(probs).data();
    let sum: T = labels.iter().enumerate().map(|(i, &l)| -clamp_ln(p[l as usize * n + i])).sum();
    let v = sum / T::from_f64(n as f64);
    Ok(g.custom(Box::new(NllOp { labels: labels.to_vec(), log_input: false }), &[probs], scalar(v)))
}

/// [`pwc`] on log-probabilities (for example the output of
/// [`Graph::log_softmax_channels`]); no clamping.
pub fn pwc_log<T: Float>(g: &mut Graph<T>, log_probs: Var, labels: &[u32]) -> Result<Var> {
    let (_, n) = check_labels("loss_pwc", g.shape(log_probs), labels)?;
    let lp = g.value(log_probs).data();
    let sum: T = labels.iter().enumerate().map(|(i, &l)| -lp[l as usize * n + i]).sum();
    let v = sum / T::from_f64(n as f64);
    Ok(g.custom(Box::new(NllOp { labels: labels.to_vec(), log_input: true }), &[log_probs], scalar(v)))
}

// -------------------------------------------------------- face / disc

/// Which side of the discriminator's binary cross-entropy a score sits on.
#[derive(Clone, Copy)]
enum Target {
    Real,
    Fake,
}

struct BceOp {
    target: Target,
    logits: bool,
}

fn bce<T: Float>(x: T, target: Target, logits: bool) -> T {
    let e = eps::<T>();
    match (target, logits) {
        (Target::Real, false) => -x.max(e).min(T::one() - e).ln(),
        (Target::Fake, false) => -(T::one() - x.max(e).min(T::one() - e)).ln(),
        (Target::Real, true) => softplus(-x),
        (Target::Fake, true) => softplus(x),
    }
}

fn softplus<T: Float>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<T: Float> CustomOp<T> for BceOp {
    fn name(&self) -> &str {
        "bce"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, gy: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let x = inputs[0].data();
        let g = gy.item() / T::from_f64(x.len() as f64);
        let e = eps::<T>();
        let gx = x
            .iter()
            .map(|&v| match (self.target, self.logits) {
                (Target::Real, false) if v > e && v < T::one() - e => -g / v,
                (Target::Fake, false) if v > e && v < T::one() - e => g / (T::one() - v),
                (Target::Real, true) => -g * crate::autodiff::sigmoid(-v),
                (Target::Fake, true) => g * crate::autodiff::sigmoid(v),
                _ => T::zero(),
            })
            .collect();
        vec![Some(Tensor::new(inputs[0].shape().to_vec(), gx).expect("shape"))]
    }
}

fn bce_node<T: Float>(g: &mut Graph<T>, x: Var, target: Target, logits: bool) -> Result<Var> {
    let xs = g.value(x).data();
    if xs.is_empty() {
        return Err(Error::InvalidArgument("empty score batch".into()));
    }
    let v = xs.iter().map(|&s| bce(s, target, logits)).sum::<T>() / T::from_f64(xs.len() as f64);
    Ok(g.custom(Box::new(BceOp { target, logits }), &[x], scalar(v)))
}

/// Mean of `-log D(S)` over discriminator probabilities for detected shapes.
pub fn face<T: Float>(g: &mut Graph<T>, fake_scores: Var) -> Result<Var> {
    bce_node(g, fake_scores, Target::Real, false)
}

/// [`face`] on discriminator logits: mean `softplus(-z)`.
pub fn face_logits<T: Float>(g: &mut Graph<T>, fake_logits: Var) -> Result<Var> {
    bce_node(g, fake_logits, Target::Real, true)
}

/// `-(mean log D(real) + mean log(1 - D(fake)))` over probabilities.
pub fn disc<T: Float>(g: &mut Graph<T>, real_scores: Var, fake_scores: Var) -> Result<Var> {
    let r = bce_node(g, real_scores, Target::Real, false)?;
    let f = bce_node(g, fake_scores, Target::Fake, false)?;
    g.add(r, f)
}

/// [`disc`] on logits: `mean softplus(-z_real) + mean softplus(z_fake)`.
pub fn disc_logits<T: Float>(g: &mut Graph<T>, real_logits: Var, fake_logits: Var) -> Result<Var> {
    let r = bce_node(g, real_logits, Target::Real, true)?;
    let f = bce_node(g, fake_logits, Target::Fake, true)?;
    g.add(r, f)
}

/// `sum_i w_i * x_i` for scalar nodes.
pub fn weighted_sum<T: Float>(g: &mut Graph<T>, parts: &[(Var, f64)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(v, w) in parts {
        let s = g.scale(v, T::from_f64(w));
        acc = Some(match acc {
            Some(a) => g.add(a, s)?,
            None => s,
        });
    }
    acc.ok_or_else(|| Error::InvalidArgument("empty weighted sum".into()))
}

// ------------------------------------------------- value-level losses

fn eval(f: impl FnOnce(&mut Graph<f64>) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let v = f(&mut g)?;
    Ok(g.value(v).item())
}

fn stack_tensor(s: &HeatmapStack) -> Tensor<f64> {
    Tensor::new(vec![s.channels(), 1, s.height(), s.width()], s.to_planar()).expect("stack shape")
}

fn stacks_match(op: &'static str, a: &HeatmapStack, b: &HeatmapStack, want: Semantics) -> Result<()> {
    for s in [a, b] {
        if s.semantics() != want {
            return Err(Error::InvalidArgument(format!("{op} expects {want:?} stacks, got {:?}", s.semantics())));
        }
    }
    same_shape(op, &[a.height(), a.width(), a.channels()], &[b.height(), b.width(), b.channels()])
}

/// Mean per-landmark Euclidean distance.
pub fn loss_reg(detected: &LandmarkSet, truth: &LandmarkSet) -> Result<LossValue> {
    if detected.len() != truth.len() {
        return Err(Error::InvalidLandmarks(format!("{} vs {} landmarks", detected.len(), truth.len())));
    }
    let n = 2 * truth.len();
    let p = Tensor::new(vec![1, n], detected.to_flat())?;
    let t = Tensor::new(vec![1, n], truth.to_flat())?;
    let v = eval(|g| {
        let (p, t) = (g.input(p), g.input(t));
        reg(g, p, t)
    })?;
    Ok(LossValue::leaf("reg", v))
}

/// Summed per-landmark KL divergence between distribution stacks.
pub fn loss_dist(predicted: &HeatmapStack, truth: &HeatmapStack, direction: KlDirection) -> Result<LossValue> {
    stacks_match("loss_dist", predicted, truth, Semantics::Distribution)?;
    let v = eval(|g| {
        let (p, t) = (g.input(stack_tensor(predicted)), g.input(stack_tensor(truth)));
        dist(g, p, t, direction)
    })?;
    Ok(LossValue::leaf("dist", v))
}

/// Sum of squared differences over all channels including background.
pub fn loss_hreg(predicted: &HeatmapStack, truth: &HeatmapStack) -> Result<LossValue> {
    stacks_match("loss_hreg", predicted, truth, Semantics::HeatmapRegression)?;
    let v = eval(|g| {
        let (p, t) = (g.input(stack_tensor(predicted)), g.input(stack_tensor(truth)));
        hreg(g, p, t)
    })?;
    Ok(LossValue::leaf("hreg", v))
}

/// Mean pixel-wise cross-entropy against a label map.
pub fn loss_pwc(predicted: &HeatmapStack, truth: &PwcLabelMap) -> Result<LossValue> {
    if predicted.semantics() != Semantics::PwcProbability {
        return Err(Error::InvalidArgument(format!("loss_pwc expects PwcProbability, got {:?}", predicted.semantics())));
    }
    same_shape("loss_pwc", &[predicted.height(), predicted.width()], &[truth.height(), truth.width()])?;
    let v = eval(|g| {
        let p = g.input(stack_tensor(predicted));
        pwc(g, p, truth.labels())
    })?;
    Ok(LossValue::leaf("pwc", v))
}

fn check_weight(name: &str, w: f64) -> Result<()> {
    if !(w >= 0.0) || !w.is_finite() {
        return Err(Error::InvalidArgument(format!("weight {name} must be finite and >= 0, got {w}")));
    }
    Ok(())
}

/// `alpha * pwc + beta * reg`.
pub fn loss_hybrid(pwc_term: &LossValue, reg_term: &LossValue, alpha: f64, beta: f64) -> Result<LossValue> {
    check_weight("alpha", alpha)?;
    check_weight("beta", beta)?;
    Ok(LossValue::weighted("hybrid", &[(pwc_term, alpha), (reg_term, beta)]))
}

/// Mean `-log(score)` over discriminator outputs for detected shapes.
pub fn loss_face(scores: &[f64]) -> Result<LossValue> {
    let t = Tensor::new(vec![scores.len(), 1], scores.to_vec())?;
    let v = eval(|g| {
        let s = g.input(t);
        face(g, s)
    })?;
    Ok(LossValue::leaf("face", v))
}

/// `-(mean log real + mean log(1 - fake))`.
pub fn loss_disc(real: &[f64], fake: &[f64]) -> Result<LossValue> {
    let r = Tensor::new(vec![real.len(), 1], real.to_vec())?;
    let f = Tensor::new(vec![fake.len(), 1], fake.to_vec())?;
    let v = eval(|g| {
        let (r, f) = (g.input(r), g.input(f));
        disc(g, r, f)
    })?;
    Ok(LossValue::leaf("disc", v))
}

/// `hybrid + face_weight * face`, with the hybrid breakdown flattened in.
pub fn loss_total(hybrid: &LossValue, face: &LossValue, face_weight: f64) -> Result<LossValue> {
    check_weight("face_weight", face_weight)?;
    let mut total = LossValue::weighted("total", &[(hybrid, 1.0), (face, face_weight)]);
    let inner: Vec<LossTerm> = hybrid.terms.clone();
    total.terms.extend(inner);
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;
    use crate::geometry::{Point, Scheme};
    use crate::heatmap::{encode_gaussian, MapSize};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
    }

    #[test]
    fn reg_hand_case() {
        let s = LandmarkSet::new(Scheme::Toy10, (0..10).map(|i| Point::new(i as f64, 2.0 * i as f64)).collect()).unwrap();
        let moved = LandmarkSet::new(Scheme::Toy10, s.points().iter().map(|p| Point::new(p.x + 3.0, p.y + 4.0)).collect()).unwrap();
        assert_eq!(loss_reg(&s, &s).unwrap().value, 0.0);
        assert_eq!(loss_reg(&moved, &s).unwrap().value, 5.0);
    }

    #[test]
    fn dist_closed_forms() {
        let scheme = Scheme::Generic { count: 2 };
        let s = LandmarkSet::new(scheme, vec![Point::new(1.0, 2.0), Point::new(3.0, 0.0)]).unwrap();
        let t = encode_gaussian(&s, MapSize::square(5), 1.0).unwrap();
        assert!(loss_dist(&t, &t, KlDirection::Forward).unwrap().value.abs() < 1e-15);

        let mut onehot = vec![0.0; 50];
        onehot[7] = 1.0;
        onehot[25 + 24] = 1.0;
        let truth = HeatmapStack::from_planar(5, 5, &onehot, Semantics::Distribution, scheme).unwrap();
        let uniform = HeatmapStack::from_planar(5, 5, &[1.0 / 25.0; 50], Semantics::Distribution, scheme).unwrap();
        let v = loss_dist(&uniform, &truth, KlDirection::Forward).unwrap().value;
        assert!((v - 2.0 * 25f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn hreg_offset() {
        let scheme = Scheme::Generic { count: 2 };
        let a: Vec<f64> = (0..3 * 4 * 5).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = a.iter().map(|v| v + 0.1).collect();
        let sa = HeatmapStack::from_planar(4, 5, &a, Semantics::HeatmapRegression, scheme).unwrap();
        let sb = HeatmapStack::from_planar(4, 5, &b, Semantics::HeatmapRegression, scheme).unwrap();
        assert!((loss_hreg(&sb, &sa).unwrap().value - 0.01 * 60.0).abs() < 1e-12);
    }

    #[test]
    fn pwc_uniform_and_perfect() {
        let scheme = Scheme::Generic { count: 3 };
        let labels = PwcLabelMap::new(2, 3, vec![0, 1, 2, 3, 3, 3], scheme).unwrap();
        let uniform = HeatmapStack::from_planar(2, 3, &[0.25; 24], Semantics::PwcProbability, scheme).unwrap();
        assert!((loss_pwc(&uniform, &labels).unwrap().value - 4f64.ln()).abs() < 1e-12);
        let perfect = crate::heatmap::onehot(&labels, 4).unwrap();
        assert!(loss_pwc(&perfect, &labels).unwrap().value.abs() < 1e-15);
    }

    #[test]
    fn face_disc_values() {
        assert!((loss_face(&[0.5]).unwrap().value - 2f64.ln()).abs() < 1e-12);
        assert!(loss_face(&[1.0]).unwrap().value < 1e-6);
        assert!((loss_disc(&[0.5], &[0.5]).unwrap().value - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!(loss_disc(&[1.0], &[0.0]).unwrap().value < 1e-6);
        let a = loss_disc(&[0.7, 0.2], &[0.4]).unwrap().value;
        let b = loss_disc(&[0.6], &[0.3, 0.8]).unwrap().value;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn composites() {
        let h = loss_hybrid(&LossValue::leaf("pwc", 0.8), &LossValue::leaf("reg", 0.4), 1.0, 0.25).unwrap();
        assert_eq!(h.value, 0.9);
        let t = loss_total(&h, &LossValue::leaf("face", 0.1), 1.0).unwrap();
        assert_eq!(t.value, 1.0);
        assert_eq!(t.term("face").unwrap().weight, 1.0);
        assert_eq!(t.log_line(3), "3,total=1,hybrid=0.9,face=0.1,pwc=0.8,reg=0.4");
    }

    #[test]
    fn logit_forms_match_probability_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = rand_tensor(&mut rng, &[3, 2, 2, 3], -2.0, 2.0);
        let labels: Vec<u32> = (0..12).map(|i| (i % 3) as u32).collect();
        let mut g = Graph::<f64>::new();
        let zv = g.input(z.clone());
        let p = g.channel_softmax(zv).unwrap();
        let lp = g.log_softmax_channels(zv).unwrap();
        let a = pwc(&mut g, p, &labels).unwrap();
        let b = pwc_log(&mut g, lp, &labels).unwrap();
        assert!((g.value(a).item() - g.value(b).item()).abs() < 1e-12);

        let traw = g.input(rand_tensor(&mut rng, &[3, 2, 2, 3], -1.0, 1.0));
        let t = g.spatial_softmax(traw).unwrap();
        let ps = g.spatial_softmax(zv).unwrap();
        for dir in [KlDirection::Forward, KlDirection::Reverse] {
            let a = dist(&mut g, ps, t, dir).unwrap();
            let b = dist_logits(&mut g, zv, t, dir).unwrap();
            assert!((g.value(a).item() - g.value(b).item()).abs() < 1e-12);
        }

        let s = g.input(rand_tensor(&mut rng, &[4, 1], -3.0, 3.0));
        let f = rand_tensor(&mut rng, &[4, 1], -3.0, 3.0);
        let fv = g.input(f);
        let (ps, pf) = (g.sigmoid(s), g.sigmoid(fv));
        let a = disc(&mut g, ps, pf).unwrap();
        let b = disc_logits(&mut g, s, fv).unwrap();
        assert!((g.value(a).item() - g.value(b).item()).abs() < 1e-12);
        let a = face(&mut g, pf).unwrap();
        let b = face_logits(&mut g, fv).unwrap();
        assert!((g.value(a).item() - g.value(b).item()).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let tol = gradcheck::MAX_REL_ERROR;
        let step = gradcheck::FD_STEP;
        for seed in 0..3 {
            let a = rand_tensor(&mut rng, &[2, 6], -2.0, 2.0);
            let b = rand_tensor(&mut rng, &[2, 6], -2.0, 2.0);
            let e = gradcheck::check(&[a, b], |g, v| reg(g, v[0], v[1]), step, seed).unwrap();
            assert!(e < tol, "reg {e}");

            let a = rand_tensor(&mut rng, &[2, 2, 3, 2], 0.05, 1.0);
            let b = rand_tensor(&mut rng, &[2, 2, 3, 2], 0.05, 1.0);
            for dir in [KlDirection::Forward, KlDirection::Reverse] {
                let e = gradcheck::check(&[a.clone(), b.clone()], |g, v| dist(g, v[0], v[1], dir), step, seed).unwrap();
                assert!(e < tol, "dist {dir:?} {e}");
                let e = gradcheck::check(std::slice::from_ref(&a), |g, v| {
                    let t = g.constant(b.clone());
                    dist_logits(g, v[0], t, dir)
                }, step, seed)
                .unwrap();
                assert!(e < tol, "dist_logits {dir:?} {e}");
            }
            let e = gradcheck::check(&[a.clone(), b.clone()], |g, v| hreg(g, v[0], v[1]), step, seed).unwrap();
            assert!(e < tol, "hreg {e}");
            let labels = vec![0, 1, 1, 0, 1, 0, 0, 0, 1, 1, 1, 0];
            let e = gradcheck::check(std::slice::from_ref(&a), |g, v| pwc(g, v[0], &labels), step, seed).unwrap();
            assert!(e < tol, "pwc {e}");
            let e = gradcheck::check(std::slice::from_ref(&a), |g, v| pwc_log(g, v[0], &labels), step, seed).unwrap();
            assert!(e < tol, "pwc_log {e}");

            let s = rand_tensor(&mut rng, &[3, 1], 0.05, 0.95);
            let f = rand_tensor(&mut rng, &[3, 1], 0.05, 0.95);
            let e = gradcheck::check(&[s.clone(), f.clone()], |g, v| disc(g, v[0], v[1]), step, seed).unwrap();
            assert!(e < tol, "disc {e}");
            let e = gradcheck::check(&[s.clone(), f.clone()], |g, v| disc_logits(g, v[0], v[1]), step, seed).unwrap();
            assert!(e < tol, "disc_logits {e}");
            let e = gradcheck::check(std::slice::from_ref(&f), |g, v| face(g, v[0]), step, seed).unwrap();
            assert!(e < tol, "face {e}");
        }
    }
}
