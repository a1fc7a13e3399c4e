use serde::{Deserialize, Serialize};

use crate::autodiff::AdamConfig;
use crate::data::TargetSpec;
use crate::error::{Error, Result};
use crate::geometry::Scheme;
use crate::losses::{HYBRID_ALPHA, HYBRID_BETA};
use crate::models::{HeadKind, ModelSpec, DISC_WIDTHS};
use crate::training::Decode;

/// Training objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "reg")]
    Reg,
    #[serde(rename = "dist")]
    Dist,
    #[serde(rename = "hreg")]
    Hreg,
    #[serde(rename = "pwc")]
    Pwc,
    #[serde(rename = "hybrid")]
    Hybrid,
    #[serde(rename = "hybrid+disc")]
    HybridDisc,
    #[serde(rename = "pwc+disc")]
    PwcDisc,
}

impl LossKind {
    pub const ALL: [LossKind; 7] =
        [LossKind::Reg, LossKind::Dist, LossKind::Hreg, LossKind::Pwc, LossKind::Hybrid, LossKind::HybridDisc, LossKind::PwcDisc];

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Reg => "reg",
            LossKind::Dist => "dist",
            LossKind::Hreg => "hreg",
            LossKind::Pwc => "pwc",
            LossKind::Hybrid => "hybrid",
            LossKind::HybridDisc => "hybrid+disc",
            LossKind::PwcDisc => "pwc+disc",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    pub fn is_adversarial(&self) -> bool {
        matches!(self, LossKind::HybridDisc | LossKind::PwcDisc)
    }

    /// Whether the objective has a soft-argmax coordinate term.
    pub fn is_hybrid(&self) -> bool {
        matches!(self, LossKind::Hybrid | LossKind::HybridDisc)
    }

    /// The objective each head trains with by default.
    pub fn default_for(head: HeadKind) -> Self {
        match head {
            HeadKind::Direct | HeadKind::Cascaded => LossKind::Reg,
            HeadKind::Distribution => LossKind::Dist,
            HeadKind::HeatmapRegression => LossKind::Hreg,
            HeadKind::Pwc => LossKind::Pwc,
        }
    }

    pub fn fits(&self, head: HeadKind) -> bool {
        match self {
            LossKind::Reg => matches!(head, HeadKind::Direct | HeadKind::Cascaded),
            LossKind::Dist => head == HeadKind::Distribution,
            LossKind::Hreg => head == HeadKind::HeatmapRegression,
            _ => head == HeadKind::Pwc,
        }
    }
}

/// Network size preset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// 224 input, full widths.
    Reference,
    /// 64 input, widths scaled by `scale`.
    Desk,
}

impl Preset {
    pub fn name(&self) -> &'static str {
        match self {
            Preset::Reference => "reference",
            Preset::Desk => "desk",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "reference" => Some(Preset::Reference),
            "desk" => Some(Preset::Desk),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub head: HeadKind,
    pub loss: LossKind,
    pub preset: Preset,
    pub scale: f64,
    pub alpha: f64,
    pub beta: f64,
    pub face_weight: f64,
    /// Soft-argmax temperature of the hybrid coordinate term.
    pub temperature: f64,
    pub decode: Decode,
    pub target: TargetSpec,
    pub disc_widths: Vec<usize>,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub augment: bool,
    pub val_interval: u64,
    pub patience: usize,
    pub max_steps: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            head: HeadKind::Pwc,
            loss: LossKind::Pwc,
            preset: Preset::Desk,
            scale: 0.125,
            alpha: HYBRID_ALPHA,
            beta: HYBRID_BETA,
            face_weight: 1.0,
            temperature: 1.0,
            decode: Decode::Auto,
            target: TargetSpec::default(),
            disc_widths: DISC_WIDTHS.to_vec(),
            batch_size: 8,
            adam: AdamConfig::default(),
            augment: true,
            val_interval: 100,
            patience: 10,
            max_steps: 3000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Default configuration for `head` with its natural loss.
    pub fn for_head(head: HeadKind) -> Self {
        TrainConfig { head, loss: LossKind::default_for(head), ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !self.loss.fits(self.head) {
            return bad(format!("loss `{}` does not apply to head `{}`", self.loss.name(), self.head.name()));
        }
        if self.val_interval == 0 {
            return bad("train.val_interval must be >= 1".into());
        }
        if self.patience == 0 {
            return bad("train.patience must be >= 1".into());
        }
        if self.batch_size < 2 {
            return bad("train.batch_size must be >= 2 (batch normalization)".into());
        }
        for (k, v) in [("alpha", self.alpha), ("beta", self.beta), ("face_weight", self.face_weight)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("train.{k} must be finite and >= 0, got {v}"));
            }
        }
        if !(self.temperature > 0.0) {
            return bad(format!("train.temperature must be > 0, got {}", self.temperature));
        }
        if !(self.adam.lr >= 0.0) {
            return bad(format!("train.lr must be >= 0, got {}", self.adam.lr));
        }
        if !(self.scale > 0.0 && self.scale <= 1.0) {
            return bad(format!("model.scale must be in (0, 1], got {}", self.scale));
        }
        Ok(())
    }

    pub fn model_spec(&self, scheme: Scheme) -> ModelSpec {
        let base = match self.preset {
            Preset::Reference => ModelSpec::reference(self.head, scheme),
            Preset::Desk => ModelSpec::desk(self.head, scheme),
        };
        base.with_scale(self.scale)
    }
}
