//! Policy and training configuration, the flat `key = value` config format
//! and the ablation variants.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::instruction::EncoderSpec;
use crate::params::AdamConfig;
use crate::sim::NUM_TASKS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenMode {
    /// One token per camera and feature-map cell.
    Patch,
    /// One token per camera and feature channel.
    Channel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnMode {
    /// Cross-attention to the context, then self-attention over current tokens.
    Cross,
    /// One self-attention over context and current tokens together.
    SelfOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatmapNorm {
    /// One softmax over all cameras and pixels.
    Joint,
    /// Softmax per camera, each weighted by 1/K.
    PerCamera,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextEncoderKind {
    StandIn,
    OneHot,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub image_size: usize,
    /// Indices into the standard camera rig.
    pub cameras: Vec<usize>,
    pub d_model: usize,
    pub text_dim: usize,
    pub text_encoder: TextEncoderKind,
    pub text_seed: u64,
    pub max_tokens: usize,
    /// 0 removes the transformer; the decoder then sees encoder features
    /// tiled with the mean instruction token.
    pub layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub token_mode: TokenMode,
    pub attn_mode: AttnMode,
    pub use_pointcloud: bool,
    pub use_gripper_map: bool,
    pub use_history: bool,
    pub heatmap_norm: HeatmapNorm,
    /// Offset from the instruction's task distribution (true) or from the
    /// pooled rotation-head features (false).
    pub instruction_offset: bool,
    pub num_tasks: usize,
    pub max_steps: usize,
    pub leaky_slope: f64,
    pub groups: usize,
    pub rot_channels: usize,
    pub embed_std: f64,
    pub init_seed: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            image_size: 32,
            cameras: vec![0, 1, 2],
            d_model: 64,
            text_dim: 64,
            text_encoder: TextEncoderKind::StandIn,
            text_seed: 0,
            max_tokens: 32,
            layers: 2,
            heads: 4,
            ff_mult: 4,
            token_mode: TokenMode::Patch,
            attn_mode: AttnMode::Cross,
            use_pointcloud: true,
            use_gripper_map: true,
            use_history: true,
            heatmap_norm: HeatmapNorm::Joint,
            instruction_offset: true,
            num_tasks: NUM_TASKS,
            max_steps: 6,
            leaky_slope: 0.02,
            groups: 4,
            rot_channels: 64,
            embed_std: 0.1,
            init_seed: 0,
        }
    }
}

/// Channels of the encoder feature map.
pub const FEATURE_CHANNELS: usize = 16;
/// Encoder feature channels plus the pooled point cloud.
pub const FUSED_CHANNELS: usize = FEATURE_CHANNELS + 3;
/// Total stride of the encoder.
pub const ENCODER_STRIDE: usize = 16;

impl PolicyConfig {
    pub fn grid(&self) -> usize {
        self.image_size / ENCODER_STRIDE
    }

    pub fn num_cameras(&self) -> usize {
        self.cameras.len()
    }

    pub fn tokens_per_step(&self) -> usize {
        match self.token_mode {
            TokenMode::Patch => self.num_cameras() * self.grid() * self.grid(),
            TokenMode::Channel => self.num_cameras() * FUSED_CHANNELS,
        }
    }

    /// Channels per camera of the transformer output once laid back onto the grid.
    pub fn token_map_channels(&self) -> usize {
        if self.layers > 0 && self.token_mode == TokenMode::Channel {
            FUSED_CHANNELS
        } else {
            self.d_model
        }
    }

    pub fn decoder_channels(&self) -> usize {
        self.token_map_channels() + FEATURE_CHANNELS
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, m: String| Err(Error::config(k, m));
        if self.image_size == 0 || !self.image_size.is_multiple_of(ENCODER_STRIDE) {
            return bad("image_size", format!("{} is not a positive multiple of 16", self.image_size));
        }
        if self.cameras.is_empty() || self.cameras.iter().any(|&c| c >= 3) {
            return bad("cameras", format!("{:?} must be a non-empty subset of 0, 1, 2", self.cameras));
        }
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad("heads", format!("{} heads do not divide d_model {}", self.heads, self.d_model));
        }
        if self.text_dim == 0 || self.max_tokens == 0 || self.ff_mult == 0 {
            return bad("text_dim", "dimensions must be positive".into());
        }
        if self.num_tasks == 0 || self.max_steps == 0 {
            return bad("num_tasks", "task and step counts must be positive".into());
        }
        if self.groups == 0
            || !FEATURE_CHANNELS.is_multiple_of(self.groups)
            || !self.rot_channels.is_multiple_of(self.groups)
        {
            return bad("groups", format!("{} groups must divide 16 and rot_channels", self.groups));
        }
        Ok(())
    }

    pub fn encoder_spec(&self) -> EncoderSpec {
        EncoderSpec::StandIn { dim: self.text_dim, seed: self.text_seed, max_tokens: self.max_tokens }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: u64,
    pub mask_prob: f64,
    pub mask_fraction: f64,
    pub seed: u64,
    pub augment: bool,
    pub jitter: f32,
    pub crop_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub log_every: u64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-5,
            batch_size: 8,
            iterations: 5000,
            mask_prob: 0.1,
            mask_fraction: 0.5,
            seed: 0,
            augment: true,
            jitter: 0.1,
            crop_fraction: 7.0 / 8.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            log_every: 50,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.learning_rate, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::config("mask_prob", format!("{} is outside [0, 1]", self.mask_prob)));
        }
        if !(0.0..=1.0).contains(&self.mask_fraction) {
            return Err(Error::config("mask_fraction", format!("{} is outside [0, 1]", self.mask_fraction)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.log_every == 0 {
            return Err(Error::config("log_every", "must be positive"));
        }
        if !(self.crop_fraction > 0.0 && self.crop_fraction <= 1.0) {
            return Err(Error::config("crop_fraction", format!("{} is outside (0, 1]", self.crop_fraction)));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        Ok(())
    }
}

/// Settings for evaluation rollouts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    pub eval_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { episodes: 100, eval_seed: 1_000_000 }
    }
}

/// Everything a config file can set. Keys are flat; each belongs to exactly
/// one of the sections.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub policy: PolicyConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

fn section_table<T: Serialize>(v: &T) -> toml::Table {
    match toml::Value::try_from(v) {
        Ok(toml::Value::Table(t)) => t,
        _ => unreachable!("config sections serialize to tables"),
    }
}

fn same_kind(a: &toml::Value, b: &toml::Value) -> bool {
    use toml::Value::*;
    matches!((a, b), (Integer(_), Float(_))) || std::mem::discriminant(a) == std::mem::discriminant(b)
}

fn coerce(old: &toml::Value, new: toml::Value) -> toml::Value {
    match (old, new) {
        (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
        (_, v) => v,
    }
}

fn rebuild<T: DeserializeOwned>(t: toml::Table, key_hint: &str) -> Result<T> {
    toml::Value::Table(t).try_into().map_err(|e: toml::de::Error| Error::config(key_hint, e.message().to_string()))
}

impl RunConfig {
    /// Applies `key = value` assignments in order. Values use TOML syntax
    /// (`true`, `5e-5`, `"cross"`, `[0, 1]`); bare words are read as strings.
    pub fn apply(&mut self, assignments: &[(String, String)]) -> Result<()> {
        let mut tables = [section_table(&self.policy), section_table(&self.train), section_table(&self.eval)];
        let mut touched = [None, None, None];
        for (key, raw) in assignments {
            let value = parse_value(raw);
            let Some(i) = tables.iter().position(|t| t.contains_key(key)) else {
                return Err(Error::config(key, "unknown key"));
            };
            let old = &tables[i][key];
            if !same_kind(&value, old) {
                return Err(Error::config(key, format!("expected a {}, got `{raw}`", old.type_str())));
            }
            let v = coerce(old, value);
            tables[i].insert(key.clone(), v);
            touched[i] = Some(key.clone());
        }
        let [p, t, e] = tables;
        let hint = |i: usize| touched[i].clone().unwrap_or_default();
        self.policy = rebuild(p, &hint(0))?;
        self.train = rebuild(t, &hint(1))?;
        self.eval = rebuild(e, &hint(2))?;
        self.policy.validate()?;
        self.train.validate()
    }

    /// Parses config text: one `key = value` per line, `#` starts a comment.
    pub fn parse(text: &str) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = strip_comment(line).trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::config(line, format!("line {} is not `key = value`", n + 1)));
            };
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(out)
    }

    pub fn from_text(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        cfg.apply(&RunConfig::parse(text)?)?;
        Ok(cfg)
    }

    /// Canonical text form, one key per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in [section_table(&self.policy), section_table(&self.train), section_table(&self.eval)] {
            for (k, v) in t {
                out += &format!("{k} = {v}\n");
            }
        }
        out
    }
}

fn strip_comment(line: &str) -> &str {
    let mut in_str = false;
    for (i, c) in line.char_indices() {
        match c {
            '"' => in_str = !in_str,
            '#' if !in_str => return &line[..i],
            _ => {}
        }
    }
    line
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// SHA-256 of the canonical JSON form of a serializable config.
pub fn config_hash<T: Serialize>(v: &T) -> String {
    let bytes = serde_json::to_vec(v).expect("configs serialize");
    crate::params::hex(&Sha256::digest(&bytes))
}

/// Ablation rows and extra variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    R1,
    R2,
    R3,
    R4,
    R5,
    R6,
    R7,
    R8,
    NoHist,
    /// Single camera; the runner trains one model per camera.
    OneView,
}

impl Variant {
    pub const ALL: [Variant; 10] = [
        Variant::R1,
        Variant::R2,
        Variant::R3,
        Variant::R4,
        Variant::R5,
        Variant::R6,
        Variant::R7,
        Variant::R8,
        Variant::NoHist,
        Variant::OneView,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::R1 => "R1",
            Variant::R2 => "R2",
            Variant::R3 => "R3",
            Variant::R4 => "R4",
            Variant::R5 => "R5",
            Variant::R6 => "R6",
            Variant::R7 => "R7",
            Variant::R8 => "R8",
            Variant::NoHist => "no_hist",
            Variant::OneView => "one_view",
        }
    }

    pub fn from_name(s: &str) -> Result<Variant> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config("variants", format!("unknown variant `{s}`")))
    }

    /// Switches for this variant on top of `base`. `OneView` keeps all
    /// cameras; the caller restricts them per run.
    pub fn apply(self, base: &PolicyConfig, train: &TrainConfig) -> (PolicyConfig, TrainConfig) {
        let mut p = base.clone();
        let mut t = train.clone();
        let row = match self {
            Variant::R1 => 1,
            Variant::R2 => 2,
            Variant::R3 => 3,
            Variant::R4 => 4,
            Variant::R5 => 5,
            Variant::R6 => 6,
            Variant::R7 => 7,
            Variant::R8 => 8,
            Variant::NoHist => {
                p.use_history = false;
                return (p, t);
            }
            Variant::OneView => return (p, t),
        };
        if row == 1 {
            p.layers = 0;
            p.heatmap_norm = HeatmapNorm::PerCamera;
        } else if p.layers == 0 {
            p.layers = PolicyConfig::default().layers;
        }
        if row >= 2 {
            p.heatmap_norm = HeatmapNorm::Joint;
        }
        p.token_mode = if row >= 7 { TokenMode::Patch } else { TokenMode::Channel };
        p.attn_mode = if row >= 8 { AttnMode::Cross } else { AttnMode::SelfOnly };
        p.use_pointcloud = row >= 3;
        p.use_gripper_map = row >= 4;
        p.use_history = row >= 5;
        if row < 6 {
            t.mask_prob = 0.0;
        } else if t.mask_prob == 0.0 {
            t.mask_prob = TrainConfig::default().mask_prob;
        }
        (p, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_override() {
        let text = "# desk\nlearning_rate = 1e-3\nlayers = 1 # shallow\ntoken_mode = channel\ncameras = [0, 2]\n";
        let cfg = RunConfig::from_text(text).unwrap();
        assert_eq!(cfg.train.learning_rate, 1e-3);
        assert_eq!(cfg.policy.layers, 1);
        assert_eq!(cfg.policy.token_mode, TokenMode::Channel);
        assert_eq!(cfg.policy.cameras, vec![0, 2]);
        let back = RunConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn errors_name_the_key() {
        let e = RunConfig::from_text("learning_rat = 1").unwrap_err();
        assert!(matches!(e, Error::Config { ref key, .. } if key == "learning_rat"));
        let e = RunConfig::from_text("layers = yes").unwrap_err();
        assert!(matches!(e, Error::Config { ref key, .. } if key == "layers"));
        let e = RunConfig::from_text("heads = 3").unwrap_err();
        assert!(matches!(e, Error::Config { ref key, .. } if key == "heads"));
        let e = RunConfig::from_text("token_mode = diagonal").unwrap_err();
        assert!(matches!(e, Error::Config { ref key, .. } if key == "token_mode"));
    }

    #[test]
    fn r8_differs_from_r5_in_three_switches() {
        let (base, train) = (PolicyConfig::default(), TrainConfig::default());
        let (p5, t5) = Variant::R5.apply(&base, &train);
        let (p8, t8) = Variant::R8.apply(&base, &train);
        assert_eq!((p5.token_mode, p8.token_mode), (TokenMode::Channel, TokenMode::Patch));
        assert_eq!((p5.attn_mode, p8.attn_mode), (AttnMode::SelfOnly, AttnMode::Cross));
        assert_eq!((t5.mask_prob, t8.mask_prob), (0.0, 0.1));
        let mut p5b = p5.clone();
        p5b.token_mode = p8.token_mode;
        p5b.attn_mode = p8.attn_mode;
        assert_eq!(p5b, p8);
        let (p1, _) = Variant::R1.apply(&base, &train);
        assert_eq!(p1.layers, 0);
        assert_eq!(p8, base);
    }
}
