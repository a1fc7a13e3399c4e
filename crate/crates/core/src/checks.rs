//! Finite-difference verification suites for every differentiable
//! component: graph primitives, losses and whole networks.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::gradcheck::{check, relative_error, FD_STEP, MAX_REL_ERROR};
use crate::autodiff::{BnMode, CustomOp, Graph, Group, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::Scheme;
use crate::losses::{self, KlDirection};
use crate::models::{Detector, Discriminator, HeadKind, HeadOutput, ModelSpec, Pass};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Primitive,
    Loss,
    Model,
}

impl Scope {
    pub const ALL: [Scope; 3] = [Scope::Primitive, Scope::Loss, Scope::Model];

    pub fn name(&self) -> &'static str {
        match self {
            Scope::Primitive => "primitive",
            Scope::Loss => "loss",
            Scope::Model => "model",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// Worst relative error of one component over its random instances.
/// `checked` counts compared gradient entries; `skipped` counts entries
/// left out because every finite-difference step crossed a branch point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub scope: Scope,
    pub component: String,
    pub instances: usize,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
}

impl CheckResult {
    /// Below the error threshold, with at most one entry in ten skipped.
    pub fn passed(&self) -> bool {
        self.max_rel_error < MAX_REL_ERROR && self.checked > 0 && self.skipped * 9 <= self.checked
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed() { "ok" } else { "FAIL" };
        write!(
            f,
            "{:<9} {:<22} n={:<3} entries={:<5} skipped={:<3} max_rel_err={:.3e}  {status}",
            self.scope.name(),
            self.component,
            self.instances,
            self.checked,
            self.skipped,
            self.max_rel_error
        )
    }
}

type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// A component instance: inputs and the graph built on them.
struct Case {
    inputs: Vec<Tensor<f64>>,
    build: Build,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// Values on a grid with spacing >> the finite-difference step, shuffled,
/// so max-pooling never has near-ties.
fn distinct_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.1 - n as f64 * 0.05).collect();
    for i in (1..n).rev() {
        v.swap(i, rng.gen_range(0..=i));
    }
    Tensor::new(shape.to_vec(), v).expect("shape")
}

fn probs(rng: &mut ChaCha8Rng, c: usize, b: usize, h: usize, w: usize, spatial: bool) -> Tensor<f64> {
    let mut t = rand_tensor(rng, &[c, b, h, w], 0.1, 1.0);
    let d = t.data_mut();
    if spatial {
        for plane in d.chunks_mut(h * w) {
            let s: f64 = plane.iter().sum();
            plane.iter_mut().for_each(|v| *v /= s);
        }
    } else {
        let n = b * h * w;
        for p in 0..n {
            let s: f64 = (0..c).map(|ci| d[ci * n + p]).sum();
            (0..c).for_each(|ci| d[ci * n + p] /= s);
        }
    }
    t
}

fn labels(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<u32> {
    (0..n).map(|_| rng.gen_range(0..classes as u32)).collect()
}

fn primitive_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Case)> {
    let b = rng.gen_range(2..4);
    let (cin, cout) = (rng.gen_range(1..4), rng.gen_range(1..4));
    let (h, w) = (rng.gen_range(3..6), rng.gen_range(3..6));
    let stride = rng.gen_range(1..3);
    let x = rand_tensor(rng, &[cin, b, h, w], -1.0, 1.0);
    let wc = rand_tensor(rng, &[cout, cin, 3, 3], -1.0, 1.0);
    let wd = rand_tensor(rng, &[cin, cout, 4, 4], -1.0, 1.0);
    let bias = rand_tensor(rng, &[cout], -0.5, 0.5);
    let gamma = rand_tensor(rng, &[cin], 0.5, 1.5);
    let beta = rand_tensor(rng, &[cin], -0.5, 0.5);
    let mean = rand_tensor(rng, &[cin], -0.3, 0.3).into_data();
    let var = rand_tensor(rng, &[cin], 0.5, 1.5).into_data();
    let fx = rand_tensor(rng, &[b, 5], -1.0, 1.0);
    let fw = rand_tensor(rng, &[3, 5], -1.0, 1.0);
    let fb = rand_tensor(rng, &[3], -0.5, 0.5);
    let pool = distinct_tensor(rng, &[cin, b, 2 * h, 2 * w + 1]);
    let temp = rng.gen_range(0.5..2.0);
    vec![
        ("conv2d", Case { inputs: vec![x.clone(), wc, bias.clone()], build: Box::new(move |g, v| g.conv2d(v[0], v[1], v[2], stride, 1)) }),
        ("deconv2d", Case { inputs: vec![x.clone(), wd, bias], build: Box::new(|g, v| g.deconv2d(v[0], v[1], v[2], 2, 1)) }),
        ("maxpool2", Case { inputs: vec![pool], build: Box::new(|g, v| g.maxpool2(v[0])) }),
        (
            "batchnorm_train",
            Case {
                inputs: vec![x.clone(), gamma.clone(), beta.clone()],
                build: Box::new(|g, v| Ok(g.batchnorm(v[0], v[1], v[2], 1e-5, BnMode::Train)?.0)),
            },
        ),
        (
            "batchnorm_eval",
            Case {
                inputs: vec![x.clone(), gamma, beta],
                build: Box::new(move |g, v| Ok(g.batchnorm(v[0], v[1], v[2], 1e-5, BnMode::Eval { mean: &mean, var: &var })?.0)),
            },
        ),
        ("fully_connected", Case { inputs: vec![fx, fw, fb], build: Box::new(|g, v| g.linear(v[0], v[1], v[2])) }),
        ("spatial_softmax", Case { inputs: vec![x.clone()], build: Box::new(|g, v| g.spatial_softmax(v[0])) }),
        ("channel_softmax", Case { inputs: vec![x.clone()], build: Box::new(|g, v| g.channel_softmax(v[0])) }),
        ("log_softmax_channels", Case { inputs: vec![x.clone()], build: Box::new(|g, v| g.log_softmax_channels(v[0])) }),
        ("decode_softargmax", Case { inputs: vec![x.clone()], build: Box::new(move |g, v| g.soft_argmax(v[0], cin, temp)) }),
        ("relu", Case { inputs: vec![x.clone()], build: Box::new(|g, v| Ok(g.relu(v[0]))) }),
        ("sigmoid", Case { inputs: vec![x], build: Box::new(|g, v| Ok(g.sigmoid(v[0]))) }),
    ]
}

fn loss_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Case)> {
    let b = rng.gen_range(1..4);
    let l = rng.gen_range(2..5);
    let (h, w) = (rng.gen_range(3..6), rng.gen_range(3..6));
    let pred = rand_tensor(rng, &[b, 2 * l], -2.0, 2.0);
    let truth = rand_tensor(rng, &[b, 2 * l], -2.0, 2.0);
    let pd = probs(rng, l, b, h, w, true);
    let td = probs(rng, l, b, h, w, true);
    let ph = rand_tensor(rng, &[l + 1, b, h, w], -0.5, 1.5);
    let th = rand_tensor(rng, &[l + 1, b, h, w], 0.0, 1.0);
    let pp = probs(rng, l + 1, b, h, w, false);
    let logits = rand_tensor(rng, &[l + 1, b, h, w], -2.0, 2.0);
    let lab = labels(rng, b * h * w, l + 1);
    let map_truth = rand_tensor(rng, &[b, 2 * l], 0.0, (h.min(w) - 1) as f64);
    let scores = rand_tensor(rng, &[b, 1], 0.05, 0.95);
    let fake = rand_tensor(rng, &[b, 1], 0.05, 0.95);
    let (alpha, beta, face_w) = (rng.gen_range(0.5..1.5), rng.gen_range(0.1..0.5), rng.gen_range(0.5..1.5));
    let (td2, lab2, lab3, mt2) = (td.clone(), lab.clone(), lab.clone(), map_truth.clone());
    vec![
        ("loss_reg", Case { inputs: vec![pred, truth], build: Box::new(|g, v| losses::reg(g, v[0], v[1])) }),
        ("loss_dist", Case { inputs: vec![pd.clone(), td], build: Box::new(|g, v| losses::dist(g, v[0], v[1], KlDirection::Forward)) }),
        ("loss_dist_reverse", Case { inputs: vec![pd, td2.clone()], build: Box::new(|g, v| losses::dist(g, v[0], v[1], KlDirection::Reverse)) }),
        (
            "loss_dist_logits",
            Case {
                inputs: vec![rand_tensor(rng, td2.shape(), -2.0, 2.0)],
                build: Box::new(move |g, v| {
                    let t = g.constant(td2.clone());
                    losses::dist_logits(g, v[0], t, KlDirection::Forward)
                }),
            },
        ),
        ("loss_hreg", Case { inputs: vec![ph, th], build: Box::new(|g, v| losses::hreg(g, v[0], v[1])) }),
        ("loss_pwc", Case { inputs: vec![pp], build: Box::new(move |g, v| losses::pwc(g, v[0], &lab)) }),
        (
            "loss_pwc_logits",
            Case {
                inputs: vec![logits.clone()],
                build: Box::new(move |g, v| {
                    let lp = g.log_softmax_channels(v[0])?;
                    losses::pwc_log(g, lp, &lab2)
                }),
            },
        ),
        (
            "loss_hybrid",
            Case {
                inputs: vec![logits.clone()],
                build: Box::new(move |g, v| {
                    let lp = g.log_softmax_channels(v[0])?;
                    let pwc = losses::pwc_log(g, lp, &lab3)?;
                    let coords = g.soft_argmax(lp, l, 1.0)?;
                    let t = g.constant(map_truth.clone());
                    let reg = losses::reg(g, coords, t)?;
                    losses::weighted_sum(g, &[(pwc, alpha), (reg, beta)])
                }),
            },
        ),
        ("loss_face", Case { inputs: vec![scores.clone()], build: Box::new(|g, v| losses::face(g, v[0])) }),
        ("loss_disc", Case { inputs: vec![scores.clone(), fake.clone()], build: Box::new(|g, v| losses::disc(g, v[0], v[1])) }),
        (
            "loss_total",
            Case {
                inputs: vec![logits, fake],
                build: Box::new(move |g, v| {
                    let lp = g.log_softmax_channels(v[0])?;
                    let labels: Vec<u32> = (0..g.shape(lp)[1..].iter().product::<usize>()).map(|i| (i % (l + 1)) as u32).collect();
                    let pwc = losses::pwc_log(g, lp, &labels)?;
                    let coords = g.soft_argmax(lp, l, 1.0)?;
                    let t = g.constant(mt2.clone());
                    let reg = losses::reg(g, coords, t)?;
                    let hybrid = losses::weighted_sum(g, &[(pwc, alpha), (reg, beta)])?;
                    let face = losses::face(g, v[1])?;
                    losses::weighted_sum(g, &[(hybrid, 1.0), (face, face_w)])
                }),
            },
        ),
        ("loss_face_logits", Case { inputs: vec![rand_tensor(rng, &[b, 1], -3.0, 3.0)], build: Box::new(|g, v| losses::face_logits(g, v[0])) }),
        (
            "loss_disc_logits",
            Case { inputs: vec![rand_tensor(rng, &[b, 1], -3.0, 3.0), rand_tensor(rng, &[b, 1], -3.0, 3.0)], build: Box::new(|g, v| losses::disc_logits(g, v[0], v[1])) },
        ),
    ]
}

/// Suite runner: `instances` random cases per component.
fn run_cases(scope: Scope, instances: usize, seed: u64, make: fn(&mut ChaCha8Rng) -> Vec<(&'static str, Case)>) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results: Vec<CheckResult> = Vec::new();
    for i in 0..instances {
        for (name, case) in make(&mut rng) {
            let e = check(&case.inputs, |g, v| (case.build)(g, v), FD_STEP, seed.wrapping_add(i as u64))?;
            let n: usize = case.inputs.iter().map(Tensor::len).sum();
            match results.iter_mut().find(|r| r.component == name) {
                Some(r) => {
                    r.instances += 1;
                    r.checked += n;
                    r.max_rel_error = r.max_rel_error.max(e);
                }
                None => results.push(CheckResult { scope, component: name.into(), instances: 1, checked: n, skipped: 0, max_rel_error: e }),
            }
        }
    }
    Ok(results)
}

pub fn primitive_suite(instances: usize, seed: u64) -> Result<Vec<CheckResult>> {
    run_cases(Scope::Primitive, instances, seed, primitive_cases)
}

pub fn loss_suite(instances: usize, seed: u64) -> Result<Vec<CheckResult>> {
    run_cases(Scope::Loss, instances, seed, loss_cases)
}

/// Tiny network exercising every layer kind: three stages on a 16x16
/// input, 8x8 maps with both shortcuts, a single cascade stage (the
/// rasterized shape of later stages is detached by design, so finite
/// differences through it would disagree with the analytic gradient).
pub fn tiny_spec(head: HeadKind) -> ModelSpec {
    ModelSpec {
        scheme: Scheme::Generic { count: 3 },
        head,
        input_size: 16,
        stage_channels: vec![3, 4, 5],
        stage_blocks: vec![1, 2, 1],
        feature_channels: 6,
        shortcuts: vec![0, 1],
        fc_widths: vec![5],
        decoder_channels: vec![4, 3],
        cascade_stages: 1,
        cascade_channels: 3,
        scale: 1.0,
    }
}

/// Objective of a tiny detector for finite differences.
fn detector_loss(det: &Detector, store: &ParamStore<f64>, images: &Tensor<f64>, targets: &ModelTargets) -> Result<(Graph<f64>, Var)> {
    let mut g = Graph::new();
    let x = g.constant(images.clone());
    let mut pass = Pass::new(&mut g, store, true);
    let out = det.forward(&mut pass, x)?;
    let loss = match out {
        HeadOutput::Coords { stages, .. } => {
            let t = g.constant(targets.unit.clone());
            let parts: Vec<(Var, f64)> = stages.iter().map(|&s| losses::reg(&mut g, s, t).map(|v| (v, 1.0))).collect::<Result<_>>()?;
            losses::weighted_sum(&mut g, &parts)?
        }
        HeadOutput::Maps { logits } => match det.spec().head {
            HeadKind::Distribution => {
                let t = g.constant(targets.dist.clone());
                losses::dist_logits(&mut g, logits, t, KlDirection::Forward)?
            }
            HeadKind::HeatmapRegression => {
                let t = g.constant(targets.hreg.clone());
                losses::hreg(&mut g, logits, t)?
            }
            _ => {
                let lp = g.log_softmax_channels(logits)?;
                let pwc = losses::pwc_log(&mut g, lp, &targets.labels)?;
                let coords = g.soft_argmax(lp, det.spec().landmarks(), 1.0)?;
                let t = g.constant(targets.map.clone());
                let reg = losses::reg(&mut g, coords, t)?;
                losses::weighted_sum(&mut g, &[(pwc, 1.0), (reg, 0.25)])?
            }
        },
    };
    Ok((g, loss))
}

struct ModelTargets {
    unit: Tensor<f64>,
    map: Tensor<f64>,
    dist: Tensor<f64>,
    hreg: Tensor<f64>,
    labels: Vec<u32>,
}

/// Finite-difference steps of the network checks, tried in order until
/// both perturbed evaluations take the same ReLU and max-pool branches as
/// the unperturbed one.
pub const MODEL_FD_STEPS: [f64; 3] = [1e-5, 1e-6, 1e-7];

struct StoreCheck {
    worst: f64,
    checked: usize,
    skipped: usize,
}

impl StoreCheck {
    fn merge(&mut self, o: StoreCheck) {
        self.worst = self.worst.max(o.worst);
        self.checked += o.checked;
        self.skipped += o.skipped;
    }

    fn result(&self, component: &str, instances: usize) -> CheckResult {
        CheckResult { scope: Scope::Model, component: component.into(), instances, checked: self.checked, skipped: self.skipped, max_rel_error: self.worst }
    }
}

/// Compares analytic parameter gradients with central differences on
type BuildLoss<'a> = dyn Fn(&ParamStore<f64>) -> Result<(Graph<f64>, Var)> + 'a;

/// `per_tensor` random entries of every parameter tensor. Errors are
/// measured on the loss divided by its magnitude (when above one), so the
/// absolute floor of the relative error tracks the loss scale. Entries
/// whose every step crosses a branch point are skipped and counted.
fn store_check(store: &mut ParamStore<f64>, group: Group, per_tensor: usize, rng: &mut ChaCha8Rng, f: &BuildLoss<'_>) -> Result<StoreCheck> {
    let (g, loss) = f(store)?;
    let scale = g.value(loss).item().abs().max(1.0);
    let pattern = g.branch_pattern();
    let grads = g.backward(loss).for_group(group);
    drop(g);
    let mut out = StoreCheck { worst: 0.0, checked: 0, skipped: 0 };
    for (id, grad) in grads {
        let n = grad.len();
        for _ in 0..per_tensor.min(n) {
            let i = rng.gen_range(0..n);
            let orig = store.get(id).data()[i];
            let mut numeric = None;
            for h in MODEL_FD_STEPS {
                store.get_mut(id).data_mut()[i] = orig + h;
                let (gp, lp) = f(store)?;
                store.get_mut(id).data_mut()[i] = orig - h;
                let (gm, lm) = f(store)?;
                store.get_mut(id).data_mut()[i] = orig;
                if gp.branch_pattern() == pattern && gm.branch_pattern() == pattern {
                    numeric = Some((gp.value(lp).item() - gm.value(lm).item()) / (2.0 * h));
                    break;
                }
            }
            match numeric {
                Some(d) => {
                    out.checked += 1;
                    out.worst = out.worst.max(relative_error(grad.data()[i] / scale, d / scale));
                }
                None => out.skipped += 1,
            }
        }
    }
    Ok(out)
}

pub fn model_suite(instances: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();
    for head in HeadKind::ALL {
        let spec = tiny_spec(head);
        let det = Detector::new(spec.clone())?;
        let mut total = StoreCheck { worst: 0.0, checked: 0, skipped: 0 };
        for i in 0..instances {
            let b = 3;
            let (l, m) = (spec.landmarks(), spec.map_size());
            let mut store = ParamStore::<f64>::init(det.layout(), Group(0), seed.wrapping_add(i as u64));
            let images = rand_tensor(&mut rng, &[3, b, 16, 16], 0.0, 1.0);
            let targets = ModelTargets {
                unit: rand_tensor(&mut rng, &[b, 2 * l], 0.1, 0.9),
                map: rand_tensor(&mut rng, &[b, 2 * l], 0.0, (m - 1) as f64),
                dist: probs(&mut rng, l, b, m, m, true),
                hreg: rand_tensor(&mut rng, &[l + 1, b, m, m], 0.0, 1.0),
                labels: labels(&mut rng, b * m * m, l + 1),
            };
            total.merge(store_check(&mut store, Group(0), 3, &mut rng, &|s| detector_loss(&det, s, &images, &targets))?);
        }
        results.push(total.result(head.name(), instances));
    }
    let disc = Discriminator::new(4, &[6, 5])?;
    let mut total = StoreCheck { worst: 0.0, checked: 0, skipped: 0 };
    for i in 0..instances {
        let mut store = ParamStore::<f64>::init(disc.layout(), Group(1), seed.wrapping_add(i as u64));
        let real = rand_tensor(&mut rng, &[4, 8], 0.0, 1.0);
        let fake = rand_tensor(&mut rng, &[4, 8], 0.0, 1.0);
        let f = |s: &ParamStore<f64>| -> Result<(Graph<f64>, Var)> {
            let mut g = Graph::new();
            let (r, fk) = (g.constant(real.clone()), g.constant(fake.clone()));
            let mut pass = Pass::new(&mut g, s, true);
            let lr = disc.logits(&mut pass, r)?;
            let lf = disc.logits(&mut pass, fk)?;
            let loss = losses::disc_logits(&mut g, lr, lf)?;
            Ok((g, loss))
        };
        total.merge(store_check(&mut store, Group(1), 3, &mut rng, &f)?);
    }
    results.push(total.result("discriminator", instances));
    Ok(results)
}

/// Runs the requested scopes.
pub fn run(scopes: &[Scope], instances: usize, seed: u64) -> Result<Vec<CheckResult>> {
    if instances == 0 {
        return Err(Error::InvalidArgument("gradcheck needs at least one instance".into()));
    }
    let mut out = Vec::new();
    for s in scopes {
        out.extend(match s {
            Scope::Primitive => primitive_suite(instances, seed)?,
            Scope::Loss => loss_suite(instances, seed)?,
            Scope::Model => model_suite(instances, seed)?,
        });
    }
    Ok(out)
}

/// `x^2` with a sign error in its backward rule.
pub struct FlippedSquare;

impl CustomOp<f64> for FlippedSquare {
    fn name(&self) -> &str {
        "flipped_square"
    }

    fn backward(&self, inputs: &[&Tensor<f64>], _output: &Tensor<f64>, grad_output: &Tensor<f64>) -> Vec<Option<Tensor<f64>>> {
        let g = inputs[0].data().iter().zip(grad_output.data()).map(|(&x, &gy)| -2.0 * x * gy).collect();
        vec![Some(Tensor::new(inputs[0].shape().to_vec(), g).expect("shape"))]
    }
}

/// Worst relative error of [`FlippedSquare`]; a working checker reports
/// a failure.
pub fn mutation_error(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_tensor(&mut rng, &[6], 0.5, 2.0);
    check(
        &[x],
        |g, v| {
            let out = g.value(v[0]).map(|a| a * a);
            Ok(g.custom(Box::new(FlippedSquare), &[v[0]], out))
        },
        FD_STEP,
        seed,
    )
}
