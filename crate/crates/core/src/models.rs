//! Network builders: a VGG-style backbone, the five detection heads and
//! the shape discriminator.
//!
//! Feature maps are `[C, B, H, W]`; coordinate outputs are `[B, 2L]`
//! holding `(x, y)` pairs normalized by the crop size: `0` is the crop's
//! left (top) edge and `1` its right (bottom) edge.

use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, BnMode, BufferId, Float, Graph, Init, Layout, ParamCount, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::Scheme;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Detection formulation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Direct,
    Cascaded,
    Distribution,
    HeatmapRegression,
    Pwc,
}

impl HeadKind {
    pub const ALL: [HeadKind; 5] = [HeadKind::Direct, HeadKind::Cascaded, HeadKind::Distribution, HeadKind::HeatmapRegression, HeadKind::Pwc];

    pub fn name(&self) -> &'static str {
        match self {
            HeadKind::Direct => "direct",
            HeadKind::Cascaded => "cascaded",
            HeadKind::Distribution => "distribution",
            HeadKind::HeatmapRegression => "heatmap_regression",
            HeadKind::Pwc => "pwc",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    pub fn is_heatmap(&self) -> bool {
        matches!(self, HeadKind::Distribution | HeadKind::HeatmapRegression | HeadKind::Pwc)
    }

    /// Output channels of a heatmap head for `landmarks` points.
    pub fn map_channels(&self, landmarks: usize) -> usize {
        match self {
            HeadKind::Distribution => landmarks,
            _ => landmarks + 1,
        }
    }
}

/// Declarative network description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub scheme: Scheme,
    pub head: HeadKind,
    /// Side of the square input crop.
    pub input_size: usize,
    /// Unscaled conv channels of each backbone stage; every stage ends
    /// with a 2x2 max-pool.
    pub stage_channels: Vec<usize>,
    pub stage_blocks: Vec<usize>,
    /// Unscaled channels of the 1x1 conv after the last stage.
    pub feature_channels: usize,
    /// Backbone stages whose pooled output is concatenated into the
    /// decoder at the matching resolution.
    pub shortcuts: Vec<usize>,
    /// Unscaled hidden widths of the regression FC stacks.
    pub fc_widths: Vec<usize>,
    /// Unscaled channels of each decoder upsampling step.
    pub decoder_channels: Vec<usize>,
    pub cascade_stages: usize,
    /// Unscaled conv channels at the start of each cascade stage.
    pub cascade_channels: usize,
    /// Width multiplier in `(0, 1]`; scaled widths are `ceil(scale * c)`.
    pub scale: f64,
}

impl ModelSpec {
    /// Full-size configuration: 224 input, VGG19 stage layout, 2048
    /// feature channels.
    pub fn reference(head: HeadKind, scheme: Scheme) -> Self {
        ModelSpec {
            scheme,
            head,
            input_size: 224,
            stage_channels: vec![64, 128, 256, 512, 512],
            stage_blocks: vec![2, 2, 4, 4, 4],
            feature_channels: 2048,
            shortcuts: vec![2, 3],
            fc_widths: vec![1024],
            decoder_channels: vec![512, 256, 128, 64],
            cascade_stages: 3,
            cascade_channels: 512,
            scale: 1.0,
        }
    }

    /// The reference layout at 64x64 input and width scale 0.125.
    pub fn desk(head: HeadKind, scheme: Scheme) -> Self {
        ModelSpec { input_size: 64, scale: 0.125, ..Self::reference(head, scheme) }
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    /// `ceil(scale * c)`, never below one.
    pub fn scaled(&self, c: usize) -> usize {
        ((self.scale * c as f64 - 1e-9).ceil() as usize).max(1)
    }

    pub fn landmarks(&self) -> usize {
        self.scheme.len()
    }

    pub fn feature_size(&self) -> usize {
        self.input_size >> self.stage_channels.len()
    }

    /// Side of the predicted heatmaps.
    pub fn map_size(&self) -> usize {
        self.feature_size() << self.decoder_channels.len()
    }

    /// Decoder step whose output resolution equals backbone stage `s`.
    fn shortcut_target(&self, s: usize) -> Option<usize> {
        let stages = self.stage_channels.len();
        // stage s pools to input / 2^(s+1); decoder step j outputs
        // feature_size * 2^(j+1) = input / 2^(stages-j-1).
        (stages - 1).checked_sub(s + 1).filter(|&j| j < self.decoder_channels.len())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if !(self.scale > 0.0 && self.scale <= 1.0) {
            return bad(format!("scale must be in (0, 1], got {}", self.scale));
        }
        if self.stage_channels.is_empty() || self.stage_channels.len() != self.stage_blocks.len() {
            return bad("stage_channels and stage_blocks must be nonempty and equally long".into());
        }
        if self.stage_blocks.contains(&0) {
            return bad("every stage needs at least one block".into());
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(1 << self.stage_channels.len()) {
            return bad(format!("input size {} is not divisible by 2^{}", self.input_size, self.stage_channels.len()));
        }
        if self.scheme.len() < 2 {
            return bad("at least two landmarks are required".into());
        }
        match self.head {
            HeadKind::Cascaded if self.cascade_stages == 0 => return bad("cascade_stages must be >= 1".into()),
            k if k.is_heatmap() => {
                if self.decoder_channels.is_empty() || self.map_size() > self.input_size {
                    return bad(format!("{} decoder steps do not fit input {}", self.decoder_channels.len(), self.input_size));
                }
                for &s in &self.shortcuts {
                    if s >= self.stage_channels.len() || self.shortcut_target(s).is_none() {
                        return bad(format!("shortcut from stage {s} has no decoder step at its resolution"));
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Parameter count from closed-form per-layer formulas, without
    /// building a layout.
    pub fn analytic_param_count(&self) -> usize {
        let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k + cout;
        let bn = |c: usize| 2 * c;
        let fc = |i: usize, o: usize| i * o + o;
        let mut total = 0;
        let mut cin = 3;
        let mut stage_out = Vec::new();
        for (&c, &n) in self.stage_channels.iter().zip(&self.stage_blocks) {
            let c = self.scaled(c);
            total += conv(cin, c, 3) + bn(c) + (n - 1) * (conv(c, c, 3) + bn(c));
            cin = c;
            stage_out.push(c);
        }
        let f = self.scaled(self.feature_channels);
        total += conv(cin, f, 1) + bn(f);
        let l2 = 2 * self.landmarks();
        let fs = self.feature_size();
        let fc_stack = |input: usize| {
            let mut t = 0;
            let mut i = input;
            for &w in &self.fc_widths {
                let w = self.scaled(w);
                t += fc(i, w) + bn(w);
                i = w;
            }
            t + fc(i, l2)
        };
        match self.head {
            HeadKind::Direct => total += fc_stack(f * fs * fs),
            HeadKind::Cascaded => {
                let cc = self.scaled(self.cascade_channels);
                total += self.cascade_stages * (conv(f + 1, cc, 3) + bn(cc) + fc_stack(cc * fs * fs));
            }
            _ => {
                let mut cin = f;
                for (j, &c) in self.decoder_channels.iter().enumerate() {
                    let c = self.scaled(c);
                    let skip: usize = self
                        .shortcuts
                        .iter()
                        .filter(|&&s| self.shortcut_target(s) == Some(j))
                        .map(|&s| stage_out[s])
                        .sum();
                    total += conv(cin, c, 4) + bn(c) + conv(c + skip, c, 3) + bn(c);
                    cin = c;
                }
                total += conv(cin, self.head.map_channels(self.landmarks()), 3);
            }
        }
        total
    }
}

/// One pending running-statistics update from a training-mode forward.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    mean: BufferId,
    var: BufferId,
    stats: BatchStats<T>,
    count: usize,
}

/// Folds batch statistics into the running averages:
/// `running = 0.9 * running + 0.1 * batch`, using the unbiased batch
/// variance.
pub fn apply_bn_updates<T: Float>(store: &mut ParamStore<T>, updates: &[BnUpdate<T>]) {
    let m = T::from_f64(BN_MOMENTUM);
    let one_m = T::one() - m;
    for u in updates {
        let unbias = T::from_f64(u.count as f64 / (u.count.max(2) - 1) as f64);
        for (r, &b) in store.buffer_mut(u.mean).data_mut().iter_mut().zip(&u.stats.mean) {
            *r = m * *r + one_m * b;
        }
        for (r, &b) in store.buffer_mut(u.var).data_mut().iter_mut().zip(&u.stats.var) {
            *r = m * *r + one_m * b * unbias;
        }
    }
}

/// State threaded through one forward pass.
pub struct Pass<'a, T: Float> {
    pub g: &'a mut Graph<T>,
    pub store: &'a ParamStore<T>,
    pub train: bool,
    pub updates: Vec<BnUpdate<T>>,
}

impl<'a, T: Float> Pass<'a, T> {
    pub fn new(g: &'a mut Graph<T>, store: &'a ParamStore<T>, train: bool) -> Self {
        Pass { g, store, train, updates: Vec::new() }
    }

    fn p(&mut self, id: ParamId) -> Var {
        self.g.param(self.store, id)
    }
}

#[derive(Clone, Debug)]
struct Bn {
    gamma: ParamId,
    beta: ParamId,
    mean: BufferId,
    var: BufferId,
}

impl Bn {
    fn new(layout: &mut Layout, name: &str, c: usize) -> Self {
        Bn {
            gamma: layout.param(format!("{name}.bn.gamma"), [c], Init::Const(1.0)),
            beta: layout.param(format!("{name}.bn.beta"), [c], Init::Const(0.0)),
            mean: layout.buffer(format!("{name}.bn.mean"), [c], 0.0),
            var: layout.buffer(format!("{name}.bn.var"), [c], 1.0),
        }
    }

    fn forward<T: Float>(&self, pass: &mut Pass<'_, T>, x: Var) -> Result<Var> {
        let (gamma, beta) = (pass.p(self.gamma), pass.p(self.beta));
        let count = {
            let s = pass.g.shape(x);
            if s.len() == 4 {
                s[1] * s[2] * s[3]
            } else {
                s[0]
            }
        };
        if pass.train {
            let (y, stats) = pass.g.batchnorm(x, gamma, beta, BN_EPS, BnMode::Train)?;
            if let Some(stats) = stats {
                pass.updates.push(BnUpdate { mean: self.mean, var: self.var, stats, count });
            }
            Ok(y)
        } else {
            let store = pass.store;
            let mode = BnMode::Eval { mean: store.buffer(self.mean).data(), var: store.buffer(self.var).data() };
            Ok(pass.g.batchnorm(x, gamma, beta, BN_EPS, mode)?.0)
        }
    }
}

/// Convolution (or transposed convolution) with optional batchnorm + ReLU.
#[derive(Clone, Debug)]
struct ConvLayer {
    w: ParamId,
    b: ParamId,
    bn: Option<Bn>,
    stride: usize,
    pad: usize,
    transposed: bool,
}

impl ConvLayer {
    fn conv(layout: &mut Layout, name: &str, cin: usize, cout: usize, k: usize, pad: usize, bn_relu: bool) -> Self {
        let init = if bn_relu {
            Init::HeUniform { fan_in: cin * k * k }
        } else {
            Init::XavierUniform { fan_in: cin * k * k, fan_out: cout * k * k }
        };
        ConvLayer {
            w: layout.param(format!("{name}.w"), [cout, cin, k, k], init),
            b: layout.param(format!("{name}.b"), [cout], Init::Const(0.0)),
            bn: bn_relu.then(|| Bn::new(layout, name, cout)),
            stride: 1,
            pad,
            transposed: false,
        }
    }

    /// 4x4 stride-2 transposed conv doubling the resolution, + BN + ReLU.
    fn up(layout: &mut Layout, name: &str, cin: usize, cout: usize) -> Self {
        ConvLayer {
            w: layout.param(format!("{name}.w"), [cin, cout, 4, 4], Init::HeUniform { fan_in: cin * 4 }),
            b: layout.param(format!("{name}.b"), [cout], Init::Const(0.0)),
            bn: Some(Bn::new(layout, name, cout)),
            stride: 2,
            pad: 1,
            transposed: true,
        }
    }

    fn forward<T: Float>(&self, pass: &mut Pass<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (pass.p(self.w), pass.p(self.b));
        let y = if self.transposed {
            pass.g.deconv2d(x, w, b, self.stride, self.pad)?
        } else {
            pass.g.conv2d(x, w, b, self.stride, self.pad)?
        };
        match &self.bn {
            Some(bn) => {
                let y = bn.forward(pass, y)?;
                Ok(pass.g.relu(y))
            }
            None => Ok(y),
        }
    }
}

/// Fully connected layer with optional batchnorm + ReLU.
#[derive(Clone, Debug)]
struct Dense {
    w: ParamId,
    b: ParamId,
    bn: Option<Bn>,
}

impl Dense {
    fn new(layout: &mut Layout, name: &str, input: usize, output: usize, bn_relu: bool, bias: f64) -> Self {
        let init = if bn_relu { Init::HeUniform { fan_in: input } } else { Init::XavierUniform { fan_in: input, fan_out: output } };
        Dense {
            w: layout.param(format!("{name}.w"), [output, input], init),
            b: layout.param(format!("{name}.b"), [output], Init::Const(bias)),
            bn: bn_relu.then(|| Bn::new(layout, name, output)),
        }
    }

    fn forward<T: Float>(&self, pass: &mut Pass<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (pass.p(self.w), pass.p(self.b));
        let y = pass.g.linear(x, w, b)?;
        match &self.bn {
            Some(bn) => {
                let y = bn.forward(pass, y)?;
                Ok(pass.g.relu(y))
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
struct FcStack {
    hidden: Vec<Dense>,
    out: Dense,
}

impl FcStack {
    fn new(layout: &mut Layout, name: &str, spec: &ModelSpec, input: usize, out_bias: f64) -> Self {
        let mut i = input;
        let hidden = spec
            .fc_widths
            .iter()
            .enumerate()
            .map(|(k, &w)| {
                let w = spec.scaled(w);
                let d = Dense::new(layout, &format!("{name}.fc{k}"), i, w, true, 0.0);
                i = w;
                d
            })
            .collect();
        let out = Dense::new(layout, &format!("{name}.out"), i, 2 * spec.landmarks(), false, out_bias);
        FcStack { hidden, out }
    }

    fn forward<T: Float>(&self, pass: &mut Pass<'_, T>, mut x: Var) -> Result<Var> {
        for d in &self.hidden {
            x = d.forward(pass, x)?;
        }
        self.out.forward(pass, x)
    }
}

#[derive(Clone, Debug)]
struct Backbone {
    stages: Vec<Vec<ConvLayer>>,
    neck: ConvLayer,
}

impl Backbone {
    fn new(layout: &mut Layout, spec: &ModelSpec) -> (Self, Vec<usize>) {
        let mut cin = 3;
        let mut outs = Vec::new();
        let stages = spec
            .stage_channels
            .iter()
            .zip(&spec.stage_blocks)
            .enumerate()
            .map(|(s, (&c, &n))| {
                let c = spec.scaled(c);
                let blocks = (0..n)
                    .map(|b| {
                        let l = ConvLayer::conv(layout, &format!("backbone.stage{s}.conv{b}"), cin, c, 3, 1, true);
                        cin = c;
                        l
                    })
                    .collect();
                outs.push(c);
                blocks
            })
            .collect();
        let neck = ConvLayer::conv(layout, "backbone.neck", cin, spec.scaled(spec.feature_channels), 1, 0, true);
        (Backbone { stages, neck }, outs)
    }

    /// Final features plus the pooled output of every stage.
    fn forward<T: Float>(&self, pass: &mut Pass<'_, T>, mut x: Var) -> Result<(Var, Vec<Var>)> {
        let mut taps = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            for l in stage {
                x = l.forward(pass, x)?;
            }
            x = pass.g.maxpool2(x)?;
            taps.push(x);
        }
        Ok((self.neck.forward(pass, x)?, taps))
    }
}

#[derive(Clone, Debug)]
struct Decoder {
    ups: Vec<ConvLayer>,
    fuse: Vec<ConvLayer>,
    /// Backbone stages concatenated before each fuse conv.
    skips: Vec<Vec<usize>>,
    out: ConvLayer,
}

#[derive(Clone, Debug)]
struct CascadeStage {
    conv: ConvLayer,
    fc: FcStack,
}

#[derive(Clone, Debug)]
enum Head {
    Direct(FcStack),
    Cascaded { stages: Vec<CascadeStage>, init: BufferId },
    Maps(Decoder),
}

/// Result of a detector forward pass.
#[derive(Clone, Debug)]
pub enum HeadOutput {
    /// Normalized coordinates `[B, 2L]`; for cascades, `stages[i]` is the
    /// shape after stage `i` (the last equals `coords`).
    Coords { coords: Var, stages: Vec<Var> },
    /// Pre-activation maps `[C, B, M, M]`.
    Maps { logits: Var },
}

/// A detection network: backbone plus one head.
#[derive(Clone, Debug)]
pub struct Detector {
    spec: ModelSpec,
    layout: Layout,
    backbone: Backbone,
    head: Head,
}

/// Adds the current shapes as a `[1, B, h, w]` map (max over landmarks of
/// unit-sigma Gaussians in feature pixels).
fn rasterize<T: Float>(coords: &[T], batch: usize, side: usize) -> Tensor<T> {
    let l2 = coords.len() / batch;
    let mut out = vec![T::zero(); batch * side * side];
    for b in 0..batch {
        let shape = &coords[b * l2..(b + 1) * l2];
        for r in 0..side {
            for c in 0..side {
                let mut v: f64 = 0.0;
                for p in shape.chunks(2) {
                    let x = p[0].as_f64() * side as f64 - 0.5;
                    let y = p[1].as_f64() * side as f64 - 0.5;
                    let d2 = (c as f64 - x).powi(2) + (r as f64 - y).powi(2);
                    v = v.max((-0.5 * d2).exp());
                }
                out[(b * side + r) * side + c] = T::from_f64(v);
            }
        }
    }
    Tensor::new(vec![1, batch, side, side], out).expect("raster shape")
}

impl Detector {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut layout = Layout::new();
        let (backbone, stage_out) = Backbone::new(&mut layout, &spec);
        let f = spec.scaled(spec.feature_channels);
        let fs = spec.feature_size();
        let head = match spec.head {
            HeadKind::Direct => Head::Direct(FcStack::new(&mut layout, "direct", &spec, f * fs * fs, 0.5)),
            HeadKind::Cascaded => {
                let cc = spec.scaled(spec.cascade_channels);
                let stages = (0..spec.cascade_stages)
                    .map(|i| CascadeStage {
                        conv: ConvLayer::conv(&mut layout, &format!("cascade{i}.conv"), f + 1, cc, 3, 1, true),
                        fc: FcStack::new(&mut layout, &format!("cascade{i}"), &spec, cc * fs * fs, 0.0),
                    })
                    .collect();
                let init = layout.buffer("cascade.init_shape", [2 * spec.landmarks()], 0.5);
                Head::Cascaded { stages, init }
            }
            kind => {
                let mut cin = f;
                let mut ups = Vec::new();
                let mut fuse = Vec::new();
                let mut skips = Vec::new();
                for (j, &c) in spec.decoder_channels.iter().enumerate() {
                    let c = spec.scaled(c);
                    ups.push(ConvLayer::up(&mut layout, &format!("decoder.up{j}"), cin, c));
                    let srcs: Vec<usize> = spec.shortcuts.iter().copied().filter(|&s| spec.shortcut_target(s) == Some(j)).collect();
                    let extra: usize = srcs.iter().map(|&s| stage_out[s]).sum();
                    fuse.push(ConvLayer::conv(&mut layout, &format!("decoder.fuse{j}"), c + extra, c, 3, 1, true));
                    skips.push(srcs);
                    cin = c;
                }
                let out = ConvLayer::conv(&mut layout, "decoder.out", cin, kind.map_channels(spec.landmarks()), 3, 1, false);
                Head::Maps(Decoder { ups, fuse, skips, out })
            }
        };
        Ok(Detector { spec, layout, backbone, head })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Structural per-layer parameter count (running statistics excluded).
    pub fn count_params(&self) -> ParamCount {
        self.layout.count()
    }

    /// Buffer holding the cascade's initial shape, if any.
    pub fn init_shape_buffer(&self) -> Option<BufferId> {
        match self.head {
            Head::Cascaded { init, .. } => Some(init),
            _ => None,
        }
    }

    /// Forward pass on images `[3, B, S, S]`.
    pub fn forward<T: Float>(&self, pass: &mut Pass<'_, T>, images: Var) -> Result<HeadOutput> {
        let s = pass.g.shape(images).to_vec();
        if s.len() != 4 || s[0] != 3 || s[2] != self.spec.input_size || s[3] != self.spec.input_size {
            return Err(Error::shape(
                "detector",
                format!("expected [3, B, {0}, {0}] input, got {s:?}", self.spec.input_size),
            ));
        }
        let (features, taps) = self.backbone.forward(pass, images)?;
        match &self.head {
            Head::Direct(fc) => {
                let x = pass.g.flatten(features)?;
                let coords = fc.forward(pass, x)?;
                Ok(HeadOutput::Coords { coords, stages: vec![coords] })
            }
            Head::Cascaded { stages, init } => {
                let batch = s[1];
                let init = pass.store.buffer(*init).data();
                let tiled: Vec<T> = (0..batch).flat_map(|_| init.iter().copied()).collect();
                let mut coords = pass.g.constant(Tensor::new(vec![batch, init.len()], tiled)?);
                let mut trace = Vec::with_capacity(stages.len());
                let side = self.spec.feature_size();
                for st in stages {
                    let raster = rasterize(pass.g.value(coords).data(), batch, side);
                    let raster = pass.g.constant(raster);
                    let x = pass.g.concat(&[features, raster])?;
                    let x = st.conv.forward(pass, x)?;
                    let x = pass.g.flatten(x)?;
                    let delta = st.fc.forward(pass, x)?;
                    coords = pass.g.add(coords, delta)?;
                    trace.push(coords);
                }
                Ok(HeadOutput::Coords { coords, stages: trace })
            }
            Head::Maps(dec) => {
                let mut x = features;
                for ((up, fuse), srcs) in dec.ups.iter().zip(&dec.fuse).zip(&dec.skips) {
                    x = up.forward(pass, x)?;
                    if !srcs.is_empty() {
                        let mut parts = vec![x];
                        parts.extend(srcs.iter().map(|&s| taps[s]));
                        x = pass.g.concat(&parts)?;
                    }
                    x = fuse.forward(pass, x)?;
                }
                Ok(HeadOutput::Maps { logits: dec.out.forward(pass, x)? })
            }
        }
    }

    /// Output activation of a heatmap head: spatial softmax
    /// (distribution), identity (heatmap regression) or channel softmax
    /// (pwc).
    pub fn activate<T: Float>(&self, g: &mut Graph<T>, logits: Var) -> Result<Var> {
        match self.spec.head {
            HeadKind::Distribution => g.spatial_softmax(logits),
            HeadKind::Pwc => g.channel_softmax(logits),
            _ => Ok(logits),
        }
    }
}

/// Shape plausibility classifier on normalized coordinates.
#[derive(Clone, Debug)]
pub struct Discriminator {
    landmarks: usize,
    layout: Layout,
    hidden: Vec<Dense>,
    out: Dense,
}

/// Hidden widths of the reference discriminator.
pub const DISC_WIDTHS: [usize; 2] = [128, 128];

impl Discriminator {
    pub fn new(landmarks: usize, widths: &[usize]) -> Result<Self> {
        if landmarks < 2 {
            return Err(Error::InvalidSpec(format!("discriminator needs >= 2 landmarks, got {landmarks}")));
        }
        if widths.contains(&0) {
            return Err(Error::InvalidSpec("discriminator widths must be >= 1".into()));
        }
        let mut layout = Layout::new();
        let mut i = 2 * landmarks;
        let hidden = widths
            .iter()
            .enumerate()
            .map(|(k, &w)| {
                let d = Dense::new(&mut layout, &format!("disc.fc{k}"), i, w, true, 0.0);
                i = w;
                d
            })
            .collect();
        let out = Dense::new(&mut layout, "disc.out", i, 1, false, 0.0);
        Ok(Discriminator { landmarks, layout, hidden, out })
    }

    pub fn reference(landmarks: usize) -> Result<Self> {
        Self::new(landmarks, &DISC_WIDTHS)
    }

    /// `sum_k (w_{k-1} * w_k + w_k) + 2 * w_k` over the hidden layers plus
    /// the final `w * 1 + 1`.
    pub fn analytic_param_count(landmarks: usize, widths: &[usize]) -> usize {
        let mut i = 2 * landmarks;
        let mut total = 0;
        for &w in widths {
            total += i * w + w + 2 * w;
            i = w;
        }
        total + i + 1
    }

    pub fn landmarks(&self) -> usize {
        self.landmarks
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn count_params(&self) -> ParamCount {
        self.layout.count()
    }

    /// Logits `[B, 1]` for normalized coordinates `[B, 2L]`.
    pub fn logits<T: Float>(&self, pass: &mut Pass<'_, T>, coords: Var) -> Result<Var> {
        let s = pass.g.shape(coords);
        if s.len() != 2 || s[1] != 2 * self.landmarks {
            return Err(Error::shape("discriminator", format!("expected [B, {}], got {s:?}", 2 * self.landmarks)));
        }
        let mut x = coords;
        for d in &self.hidden {
            x = d.forward(pass, x)?;
        }
        self.out.forward(pass, x)
    }

    /// Probabilities `D(S)` in `(0, 1)`.
    pub fn forward<T: Float>(&self, pass: &mut Pass<'_, T>, coords: Var) -> Result<Var> {
        let z = self.logits(pass, coords)?;
        Ok(pass.g.sigmoid(z))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Group;

    #[test]
    fn discriminator_reference_count() {
        let d = Discriminator::reference(68).unwrap();
        assert_eq!(d.count_params().total, 34_689);
        assert_eq!(Discriminator::analytic_param_count(68, &DISC_WIDTHS), 34_689);
        assert_eq!(d.count_params().layer("disc.fc0"), Some(136 * 128 + 128));
        assert_eq!(d.count_params().layer("disc.fc0.bn"), Some(256));
    }

    #[test]
    fn walk_matches_formula() {
        for kind in HeadKind::ALL {
            for spec in [ModelSpec::reference(kind, Scheme::Face68), ModelSpec::desk(kind, Scheme::Toy10)] {
                let d = Detector::new(spec.clone()).unwrap();
                assert_eq!(d.count_params().total, spec.analytic_param_count(), "{kind:?} scale {}", spec.scale);
            }
        }
    }

    #[test]
    fn scaling_rule() {
        let s = ModelSpec::reference(HeadKind::Pwc, Scheme::Face68).with_scale(0.25);
        assert_eq!(s.stage_channels.iter().map(|&c| s.scaled(c)).collect::<Vec<_>>(), vec![16, 32, 64, 128, 128]);
        assert_eq!(s.scaled(2048), 512);
        assert_eq!(ModelSpec::desk(HeadKind::Pwc, Scheme::Toy10).scaled(3), 1);
        assert_eq!(ModelSpec::reference(HeadKind::Pwc, Scheme::Face68).feature_size(), 7);
        assert_eq!(ModelSpec::reference(HeadKind::Pwc, Scheme::Face68).map_size(), 112);
    }

    #[test]
    fn invalid_shortcut_rejected() {
        let mut s = ModelSpec::desk(HeadKind::Pwc, Scheme::Toy10);
        s.shortcuts = vec![4];
        assert!(matches!(Detector::new(s), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn desk_forward_shapes() {
        let scheme = Scheme::Toy10;
        for kind in HeadKind::ALL {
            let det = Detector::new(ModelSpec::desk(kind, scheme)).unwrap();
            let store = ParamStore::<f32>::init(det.layout(), Group(0), 1);
            let mut g = Graph::new();
            let x = g.constant(Tensor::full(vec![3, 2, 64, 64], 0.5f32));
            let mut pass = Pass::new(&mut g, &store, true);
            let out = det.forward(&mut pass, x).unwrap();
            match out {
                HeadOutput::Coords { coords, stages } => {
                    assert_eq!(g.shape(coords), &[2, 20]);
                    assert_eq!(stages.len(), if kind == HeadKind::Cascaded { 3 } else { 1 });
                }
                HeadOutput::Maps { logits } => {
                    assert_eq!(g.shape(logits), &[kind.map_channels(10), 2, 32, 32]);
                    let y = det.activate(&mut g, logits).unwrap();
                    let v = g.value(y).data();
                    if kind == HeadKind::Pwc {
                        let plane = 2 * 32 * 32;
                        let s: f32 = (0..11).map(|c| v[c * plane + 77]).sum();
                        assert!((s - 1.0).abs() < 1e-5);
                    }
                    if kind == HeadKind::Distribution {
                        let s: f32 = v[..1024].iter().sum();
                        assert!((s - 1.0).abs() < 1e-4);
                    }
                }
            }
        }
    }

    #[test]
    fn zero_cascade_is_identity() {
        let det = Detector::new(ModelSpec::desk(HeadKind::Cascaded, Scheme::Toy10)).unwrap();
        let mut store = ParamStore::<f64>::init(det.layout(), Group(0), 2);
        let init: Vec<f64> = (0..20).map(|i| 0.2 + 0.03 * i as f64).collect();
        *store.buffer_mut(det.init_shape_buffer().unwrap()) = Tensor::new(vec![20], init.clone()).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            if store.name(id).contains(".out.") {
                let t = store.get_mut(id);
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(vec![3, 2, 64, 64], 0.3));
        let mut pass = Pass::new(&mut g, &store, false);
        let HeadOutput::Coords { coords, .. } = det.forward(&mut pass, x).unwrap() else { panic!() };
        assert_eq!(&g.value(coords).data()[..20], &init[..]);
    }

    #[test]
    fn bn_updates_move_running_stats() {
        let d = Discriminator::reference(10).unwrap();
        let mut store = ParamStore::<f64>::init(d.layout(), Group(1), 3);
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 20], (0..40).map(|i| i as f64 / 40.0).collect()).unwrap());
        let mut pass = Pass::new(&mut g, &store, true);
        d.forward(&mut pass, x).unwrap();
        let updates = std::mem::take(&mut pass.updates);
        assert_eq!(updates.len(), 2);
        let before = store.clone();
        apply_bn_updates(&mut store, &updates);
        assert_ne!(before, store);
    }
}
