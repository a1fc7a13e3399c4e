use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, Checkpoint, Graph, Group, ParamStore, Tensor, Var};
use crate::data::example::{map_to_unit, unit_to_crop};
use crate::data::Example;
use crate::error::{Error, Result};
use crate::geometry::{nmse, LandmarkSet};
use crate::heatmap::{decode_argmax, HeatmapStack, Semantics};
use crate::losses::{self, KlDirection, LossTerm, LossValue};
use crate::models::{apply_bn_updates, BnUpdate, Detector, Discriminator, HeadKind, HeadOutput, ModelSpec, Pass};
use crate::training::batch::{collate, Batch};
use crate::training::{LossKind, TrainConfig};

pub const DETECTOR: Group = Group(0);
pub const DISCRIMINATOR: Group = Group(1);

/// How heatmap predictions become coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decode {
    /// Soft-argmax for hybrid objectives, argmax otherwise.
    Auto,
    Argmax,
    SoftArgmax,
}

impl Decode {
    pub fn name(&self) -> &'static str {
        match self {
            Decode::Auto => "auto",
            Decode::Argmax => "argmax",
            Decode::SoftArgmax => "softargmax",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Decode::Auto, Decode::Argmax, Decode::SoftArgmax].into_iter().find(|d| d.name() == s)
    }

    pub fn resolve(self, loss: LossKind) -> Decode {
        match self {
            Decode::Auto if loss.is_hybrid() => Decode::SoftArgmax,
            Decode::Auto => Decode::Argmax,
            d => d,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Network {
    Detector,
    Discriminator,
}

/// One optimizer call: which network stepped and the parameters it touched.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UpdateRecord {
    pub step: u64,
    pub network: Network,
    pub params: BTreeSet<String>,
}

/// Discriminator with its own parameters and optimizer.
#[derive(Clone, Debug)]
pub struct Adversary {
    pub net: Discriminator,
    pub store: ParamStore<f32>,
    pub adam: Adam<f32>,
}

/// Losses of one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    /// Detector objective of the last detector update.
    pub loss: LossValue,
    /// Discriminator loss, for adversarial objectives.
    pub disc: Option<LossValue>,
}

/// A detector (and, for adversarial objectives, a discriminator) with
/// optimizer state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub detector: Detector,
    pub store: ParamStore<f32>,
    pub adam: Adam<f32>,
    pub adversary: Option<Adversary>,
    pub step: u64,
    /// Optimizer calls, when instrumentation is on.
    pub updates: Option<Vec<UpdateRecord>>,
}

struct Objective {
    loss: Var,
    value: LossValue,
    unit: Option<Var>,
    updates: Vec<BnUpdate<f32>>,
}

/// Graph value of a scalar node.
fn scalar(g: &Graph<f32>, v: Var) -> f64 {
    g.value(v).item() as f64
}

/// Unit coordinates from soft-argmax map coordinates: `(m + 0.5) / M`.
fn map_to_unit_var(g: &mut Graph<f32>, coords: Var, map: usize) -> Result<Var> {
    let s = g.scale(coords, 1.0 / map as f32);
    let shift = g.constant(Tensor::full(g.shape(coords).to_vec(), 0.5 / map as f32));
    g.add(s, shift)
}

impl Trainer {
    pub fn new(config: TrainConfig, spec: ModelSpec) -> Result<Self> {
        config.validate()?;
        if spec.head != config.head {
            return Err(Error::Config(format!("model head `{}` differs from train.head `{}`", spec.head.name(), config.head.name())));
        }
        let detector = Detector::new(spec)?;
        let store = ParamStore::init(detector.layout(), DETECTOR, config.seed);
        let adam = Adam::new(&store, config.adam);
        let adversary = if config.loss.is_adversarial() {
            let net = Discriminator::new(detector.spec().landmarks(), &config.disc_widths)?;
            let store = ParamStore::init(net.layout(), DISCRIMINATOR, config.seed ^ 0xD15C);
            let adam = Adam::new(&store, config.adam);
            Some(Adversary { net, store, adam })
        } else {
            None
        };
        Ok(Trainer { config, detector, store, adam, adversary, step: 0, updates: None })
    }

    /// Records every optimizer call from now on.
    pub fn instrument(&mut self) {
        self.updates.get_or_insert_with(Vec::new);
    }

    pub fn spec(&self) -> &ModelSpec {
        self.detector.spec()
    }

    fn record(&mut self, network: Network, names: BTreeSet<String>) {
        if let Some(log) = self.updates.as_mut() {
            log.push(UpdateRecord { step: self.step, network, params: names });
        }
    }

    /// Detector objective on `batch`. `with_face` adds the adversarial
    /// term for adversarial objectives.
    fn objective(&self, g: &mut Graph<f32>, batch: &Batch, train: bool, with_face: bool) -> Result<Objective> {
        let cfg = &self.config;
        let images = g.constant(batch.images.clone());
        let mut pass = Pass::new(g, &self.store, train);
        let out = self.detector.forward(&mut pass, images)?;
        let updates = std::mem::take(&mut pass.updates);
        let map = self.spec().map_size();
        let l = self.spec().landmarks();
        let mut parts: Vec<(String, Var, f64)> = Vec::new();
        let mut unit = None;
        let name = cfg.loss.name().split('+').next().unwrap_or("loss").to_string();
        match (&out, cfg.loss) {
            (HeadOutput::Coords { coords, stages }, LossKind::Reg) => {
                let truth = g.constant(batch.unit.clone());
                if stages.len() > 1 {
                    for (i, &s) in stages.iter().enumerate() {
                        parts.push((format!("stage{i}"), losses::reg(g, s, truth)?, 1.0));
                    }
                } else {
                    parts.push(("reg".into(), losses::reg(g, *coords, truth)?, 1.0));
                }
                unit = Some(*coords);
            }
            (HeadOutput::Maps { logits }, LossKind::Dist) => {
                let truth = g.constant(batch.maps.clone().ok_or_else(|| Error::InvalidArgument("missing map targets".into()))?);
                parts.push(("dist".into(), losses::dist_logits(g, *logits, truth, KlDirection::Forward)?, 1.0));
            }
            (HeadOutput::Maps { logits }, LossKind::Hreg) => {
                let truth = g.constant(batch.maps.clone().ok_or_else(|| Error::InvalidArgument("missing map targets".into()))?);
                parts.push(("hreg".into(), losses::hreg(g, *logits, truth)?, 1.0));
            }
            (HeadOutput::Maps { logits }, kind) => {
                let labels = batch.labels.as_ref().ok_or_else(|| Error::InvalidArgument("missing pixel labels".into()))?;
                let lp = g.log_softmax_channels(*logits)?;
                let pwc = losses::pwc_log(g, lp, labels)?;
                if kind.is_hybrid() || kind.is_adversarial() {
                    let coords = g.soft_argmax(lp, l, cfg.temperature)?;
                    if kind.is_hybrid() {
                        let truth = g.constant(batch.map_coords.clone());
                        parts.push(("pwc".into(), pwc, cfg.alpha));
                        parts.push(("reg".into(), losses::reg(g, coords, truth)?, cfg.beta));
                    } else {
                        parts.push(("pwc".into(), pwc, 1.0));
                    }
                    unit = Some(map_to_unit_var(g, coords, map)?);
                } else {
                    parts.push(("pwc".into(), pwc, 1.0));
                }
            }
            _ => return Err(Error::Config(format!("loss `{}` does not apply to head `{}`", cfg.loss.name(), cfg.head.name()))),
        }
        let sup = losses::weighted_sum(g, &parts.iter().map(|(_, v, w)| (*v, *w)).collect::<Vec<_>>())?;
        let terms: Vec<LossTerm> = parts.iter().map(|(n, v, w)| LossTerm { name: n.clone(), weight: *w, value: scalar(g, *v) }).collect();
        let single = terms.len() == 1 && terms[0].weight == 1.0;
        let sup_value = LossValue { name, value: scalar(g, sup), terms: if single { Vec::new() } else { terms } };
        if !(with_face && cfg.loss.is_adversarial()) {
            return Ok(Objective { loss: sup, value: sup_value, unit, updates });
        }
        let adv = self.adversary.as_ref().expect("adversarial trainer has a discriminator");
        let fake = unit.expect("adversarial objectives produce coordinates");
        let mut dpass = Pass::new(g, &adv.store, train);
        let logits = adv.net.logits(&mut dpass, fake)?;
        let face = losses::face_logits(g, logits)?;
        let loss = losses::weighted_sum(g, &[(sup, 1.0), (face, cfg.face_weight)])?;
        let value = losses::loss_total(&sup_value, &LossValue::leaf("face", scalar(g, face)), cfg.face_weight)?;
        Ok(Objective { loss, value, unit, updates })
    }

    fn check_finite(&self, value: &LossValue) -> Result<()> {
        if value.value.is_finite() {
            return Ok(());
        }
        Err(Error::NonFiniteLoss { step: self.step, detail: value.log_line(self.step) })
    }

    fn detector_update(&mut self, batch: &Batch) -> Result<LossValue> {
        let mut g = Graph::new();
        let obj = self.objective(&mut g, batch, true, true)?;
        self.check_finite(&obj.value)?;
        let grads = g.backward(obj.loss).for_group(DETECTOR);
        let names = grads.iter().map(|(id, _)| self.store.name(*id).to_string()).collect();
        self.record(Network::Detector, names);
        self.adam.step(&mut self.store, &grads)?;
        apply_bn_updates(&mut self.store, &obj.updates);
        Ok(obj.value)
    }

    /// Current detections as unit coordinates `[B, 2L]`, computed with
    /// batch statistics and without touching running averages.
    fn detections(&self, batch: &Batch) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let obj = self.objective(&mut g, batch, true, false)?;
        let unit = obj.unit.expect("adversarial objectives produce coordinates");
        Ok(g.value(unit).clone())
    }

    fn discriminator_update(&mut self, batch: &Batch) -> Result<LossValue> {
        let fake = self.detections(batch)?;
        let adv = self.adversary.as_mut().expect("adversarial trainer has a discriminator");
        let mut g = Graph::new();
        let real = g.constant(batch.unit.clone());
        let fake = g.constant(fake);
        let mut pass = Pass::new(&mut g, &adv.store, true);
        let real_logits = adv.net.logits(&mut pass, real)?;
        let fake_logits = adv.net.logits(&mut pass, fake)?;
        let updates = std::mem::take(&mut pass.updates);
        let loss = losses::disc_logits(&mut g, real_logits, fake_logits)?;
        let value = LossValue::leaf("disc", scalar(&g, loss));
        if !value.value.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.step, detail: value.log_line(self.step) });
        }
        let grads = g.backward(loss).for_group(DISCRIMINATOR);
        let names = grads.iter().map(|(id, _)| adv.store.name(*id).to_string()).collect();
        adv.adam.step(&mut adv.store, &grads)?;
        apply_bn_updates(&mut adv.store, &updates);
        self.record(Network::Discriminator, names);
        Ok(value)
    }

    /// One training step. Adversarial objectives update the discriminator
    /// once, then the detector twice on the same batch.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepOutcome> {
        let outcome = if self.config.loss.is_adversarial() {
            let disc = self.discriminator_update(batch)?;
            self.detector_update(batch)?;
            let loss = self.detector_update(batch)?;
            StepOutcome { loss, disc: Some(disc) }
        } else {
            StepOutcome { loss: self.detector_update(batch)?, disc: None }
        };
        self.step += 1;
        Ok(outcome)
    }

    /// Supervised loss of `batch` in eval mode (running statistics, no
    /// updates).
    pub fn eval_loss(&self, batch: &Batch) -> Result<LossValue> {
        let mut g = Graph::new();
        Ok(self.objective(&mut g, batch, false, false)?.value)
    }

    /// Predicted unit coordinates `[B * 2L]` in eval mode.
    pub fn predict_unit(&self, images: &Tensor<f32>) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let mut pass = Pass::new(&mut g, &self.store, false);
        let out = self.detector.forward(&mut pass, x)?;
        let spec = self.spec();
        let (l, map) = (spec.landmarks(), spec.map_size());
        let logits = match out {
            HeadOutput::Coords { coords, .. } => return Ok(g.value(coords).to_f64_vec()),
            HeadOutput::Maps { logits } => logits,
        };
        let b = images.dim(1);
        match self.config.decode.resolve(self.config.loss) {
            Decode::SoftArgmax => {
                let src = match spec.head {
                    HeadKind::Pwc => g.log_softmax_channels(logits)?,
                    _ => logits,
                };
                let coords = g.soft_argmax(src, l, self.config.temperature)?;
                Ok(g.value(coords).data().iter().map(|&m| map_to_unit(m as f64, map)).collect())
            }
            _ => {
                let probs = self.detector.activate(&mut g, logits)?;
                let v = g.value(probs).to_f64_vec();
                let c = v.len() / (b * map * map);
                let mm = map * map;
                let semantics = match spec.head {
                    HeadKind::Distribution => Semantics::Distribution,
                    HeadKind::HeatmapRegression => Semantics::HeatmapRegression,
                    _ => Semantics::PwcProbability,
                };
                let mut out = Vec::with_capacity(b * 2 * l);
                for bi in 0..b {
                    let planar: Vec<f64> = (0..c).flat_map(|ci| v[(ci * b + bi) * mm..][..mm].iter().copied()).collect();
                    let stack = HeatmapStack::from_planar(map, map, &planar, semantics, spec.scheme)?;
                    let pts = decode_argmax(&stack)?;
                    out.extend(pts.to_flat().into_iter().map(|m| map_to_unit(m, map)));
                }
                Ok(out)
            }
        }
    }

    /// Predicted landmarks in crop pixels, one set per example.
    pub fn predict(&self, examples: &[&Example]) -> Result<Vec<LandmarkSet>> {
        let mut out = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(self.config.batch_size.max(1)) {
            let batch = collate(chunk)?;
            let unit = self.predict_unit(&batch.images)?;
            let l2 = unit.len() / chunk.len();
            for (ex, u) in chunk.iter().zip(unit.chunks(l2)) {
                let flat: Vec<f64> = u.iter().map(|&v| unit_to_crop(v, ex.input_size)).collect();
                out.push(LandmarkSet::from_flat(ex.crop_landmarks.scheme(), &flat)?);
            }
        }
        Ok(out)
    }

    /// Mean supervised loss and mean NMSE over `examples`, in eval mode.
    pub fn validate(&self, examples: &[Example]) -> Result<Validation> {
        if examples.is_empty() {
            return Err(Error::InvalidArgument("empty validation set".into()));
        }
        let refs: Vec<&Example> = examples.iter().collect();
        let mut loss = 0.0;
        let mut nmse_sum = 0.0;
        for chunk in refs.chunks(self.config.batch_size.max(1)) {
            let batch = collate(chunk)?;
            loss += self.eval_loss(&batch)?.value * chunk.len() as f64;
            let preds = self.predict(chunk)?;
            for (p, ex) in preds.iter().zip(chunk) {
                nmse_sum += nmse(p, &ex.crop_landmarks)?;
            }
        }
        let n = examples.len() as f64;
        Ok(Validation { loss: loss / n, nmse: nmse_sum / n })
    }

    /// Parameters, buffers and the model/config description.
    pub fn checkpoint(&self) -> Checkpoint<f32> {
        let mut ck = Checkpoint::new();
        ck.meta.insert("model".into(), serde_json::to_string(self.spec()).expect("spec json"));
        ck.meta.insert("config".into(), serde_json::to_string(&self.config).expect("config json"));
        ck.meta.insert("step".into(), self.step.to_string());
        for (n, t) in self.store.named_tensors() {
            ck.push(format!("detector/{n}"), t.clone());
        }
        if let Some(adv) = &self.adversary {
            for (n, t) in adv.store.named_tensors() {
                ck.push(format!("discriminator/{n}"), t.clone());
            }
        }
        ck
    }

    /// Rebuilds a trainer from [`Trainer::checkpoint`] output.
    pub fn from_checkpoint(ck: &Checkpoint<f32>) -> Result<Self> {
        let get = |k: &str| ck.meta.get(k).ok_or_else(|| Error::Checkpoint(format!("missing meta `{k}`")));
        let spec: ModelSpec = serde_json::from_str(get("model")?).map_err(|e| Error::Checkpoint(format!("model: {e}")))?;
        let config: TrainConfig = serde_json::from_str(get("config")?).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
        let mut t = Trainer::new(config, spec)?;
        let map = ck.to_map();
        t.store.load_named(&map, "detector/")?;
        if let Some(adv) = t.adversary.as_mut() {
            adv.store.load_named(&map, "discriminator/")?;
        }
        t.step = get("step")?.parse().map_err(|e| Error::Checkpoint(format!("step: {e}")))?;
        Ok(t)
    }
}

/// Result of [`Trainer::validate`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub loss: f64,
    pub nmse: f64,
}
