//! Truncated dense-connectivity feature extractor.
//!
//! The network keeps the stem plus the first two dense blocks and their
//! transition blocks of the 121-layer dense-connectivity profile (growth 32,
//! bottleneck factor 4, transition compression 0.5, 64 stem features) and
//! exposes three taps: after the stem max-pool (low), after transition block 1
//! (mid) and after transition block 2 (high). For an input resolution R the
//! taps have spatial sizes R/4, R/8 and R/16.

use candle_core::Tensor;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::nn::{
    avg_pool, max_pool_3x3_s2_p1, seeded_rng, tensor_all_finite, BatchNorm2d, Conv2d, Init,
    RngStream, VarRegistry,
};

/// Stem channel count of the retained profile.
pub const STEM_CHANNELS: usize = 64;
/// Bottleneck width multiplier inside each dense layer.
const BOTTLENECK_FACTOR: usize = 4;
/// Channel compression applied by each transition block.
const COMPRESSION: f64 = 0.5;

pub const PRETRAINED_RANDOM: &str = "random";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BackboneConfig {
    /// Square input resolution; must be a multiple of 16 so the high tap is
    /// input_resolution/16 on a side.
    pub input_resolution: usize,
    /// Channels added by every dense layer.
    pub growth_rate: usize,
    /// Layers per dense block for the two retained blocks.
    pub block_layout: Vec<usize>,
    /// `"random"` or a path to a saved checkpoint container whose backbone
    /// tensors initialize this one.
    pub pretrained_source: String,
    /// Expected channels at (low, mid, high); validated against the
    /// constructed network when set.
    pub tap_channels: Option<[usize; 3]>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_resolution: 224,
            growth_rate: 32,
            block_layout: vec![6, 12],
            pretrained_source: PRETRAINED_RANDOM.to_string(),
            tap_channels: None,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_resolution == 0 || self.input_resolution % 16 != 0 {
            return Err(Error::Config(format!(
                "input_resolution must be a positive multiple of 16, got {}",
                self.input_resolution
            )));
        }
        if self.block_layout.len() != 2 {
            return Err(Error::Config(format!(
                "block_layout must list exactly two dense blocks, got {:?}",
                self.block_layout
            )));
        }
        if self.block_layout.iter().any(|&l| l == 0) {
            return Err(Error::Config("dense blocks need at least one layer".into()));
        }
        if self.growth_rate == 0 {
            return Err(Error::Config("growth_rate must be positive".into()));
        }
        if let Some(expected) = self.tap_channels {
            let derived = self.derived_tap_channels();
            if expected != derived {
                return Err(Error::Config(format!(
                    "tap_channels {expected:?} disagree with the layout-derived {derived:?}"
                )));
            }
        }
        Ok(())
    }

    /// Tap channel counts implied by the layout arithmetic.
    pub fn derived_tap_channels(&self) -> [usize; 3] {
        let low = STEM_CHANNELS;
        let after_b1 = low + self.block_layout[0] * self.growth_rate;
        let mid = (after_b1 as f64 * COMPRESSION).floor() as usize;
        let after_b2 = mid + self.block_layout[1] * self.growth_rate;
        let high = (after_b2 as f64 * COMPRESSION).floor() as usize;
        [low, mid, high]
    }

    /// Spatial sizes of the (low, mid, high) taps.
    pub fn tap_sides(&self) -> [usize; 3] {
        let r = self.input_resolution;
        [r / 4, r / 8, r / 16]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Level {
    Low,
    Mid,
    High,
}

impl Level {
    pub fn divisor(self) -> usize {
        match self {
            Level::Low => 4,
            Level::Mid => 8,
            Level::High => 16,
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Level::Low => write!(f, "low"),
            Level::Mid => write!(f, "mid"),
            Level::High => write!(f, "high"),
        }
    }
}

impl std::str::FromStr for Level {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low" => Ok(Level::Low),
            "mid" => Ok(Level::Mid),
            "high" => Ok(Level::High),
            other => Err(Error::Config(format!(
                "unknown layer tag `{other}` (expected low|mid|high)"
            ))),
        }
    }
}

/// A batched activation map (N, C, H, W) tagged with the tap it came from.
#[derive(Clone)]
pub struct FeatureMap {
    pub tensor: Tensor,
    pub level: Level,
}

impl FeatureMap {
    pub fn new(tensor: Tensor, level: Level) -> Result<Self> {
        tensor.dims4().map_err(|_| {
            Error::Shape(format!(
                "feature map must be rank 4 (N,C,H,W), got {:?}",
                tensor.dims()
            ))
        })?;
        Ok(Self { tensor, level })
    }

    pub fn batch(&self) -> usize {
        self.tensor.dims()[0]
    }
    pub fn channels(&self) -> usize {
        self.tensor.dims()[1]
    }
    pub fn height(&self) -> usize {
        self.tensor.dims()[2]
    }
    pub fn width(&self) -> usize {
        self.tensor.dims()[3]
    }
}

struct DenseLayer {
    bn1: BatchNorm2d,
    conv1: Conv2d,
    bn2: BatchNorm2d,
    conv2: Conv2d,
}

impl DenseLayer {
    fn new(
        reg: &mut VarRegistry,
        name: &str,
        in_channels: usize,
        growth: usize,
        rng: &mut ChaCha20Rng,
    ) -> Result<Self> {
        let bottleneck = BOTTLENECK_FACTOR * growth;
        Ok(Self {
            bn1: BatchNorm2d::new(reg, &format!("{name}.bn1"), in_channels)?,
            conv1: Conv2d::new(
                reg,
                &format!("{name}.conv1"),
                in_channels,
                bottleneck,
                1,
                1,
                0,
                false,
                rng,
            )?,
            bn2: BatchNorm2d::new(reg, &format!("{name}.bn2"), bottleneck)?,
            conv2: Conv2d::new(
                reg,
                &format!("{name}.conv2"),
                bottleneck,
                growth,
                3,
                1,
                1,
                false,
                rng,
            )?,
        })
    }

    /// New features to concatenate onto the running stack.
    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.bn1.forward(x, train)?.relu()?;
        let y = self.conv1.forward(&y)?;
        let y = self.bn2.forward(&y, train)?.relu()?;
        self.conv2.forward(&y)
    }
}

struct DenseBlock {
    layers: Vec<DenseLayer>,
}

impl DenseBlock {
    fn new(
        reg: &mut VarRegistry,
        name: &str,
        in_channels: usize,
        n_layers: usize,
        growth: usize,
        rng: &mut ChaCha20Rng,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            layers.push(DenseLayer::new(
                reg,
                &format!("{name}.layer{i}"),
                in_channels + i * growth,
                growth,
                rng,
            )?);
        }
        Ok(Self { layers })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut stack = x.clone();
        for layer in &self.layers {
            let new = layer.forward(&stack, train)?;
            stack = Tensor::cat(&[&stack, &new], 1)?;
        }
        Ok(stack)
    }
}

struct Transition {
    bn: BatchNorm2d,
    conv: Conv2d,
}

impl Transition {
    fn new(
        reg: &mut VarRegistry,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        rng: &mut ChaCha20Rng,
    ) -> Result<Self> {
        Ok(Self {
            bn: BatchNorm2d::new(reg, &format!("{name}.bn"), in_channels)?,
            conv: Conv2d::new(
                reg,
                &format!("{name}.conv"),
                in_channels,
                out_channels,
                1,
                1,
                0,
                false,
                rng,
            )?,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.bn.forward(x, train)?.relu()?;
        let y = self.conv.forward(&y)?;
        avg_pool(&y, 2)
    }
}

/// The feature extractor. Inference over a frozen parameter set is safe to
/// share; training updates parameters and batch-norm buffers and needs
/// exclusive access.
pub struct Backbone {
    config: BackboneConfig,
    stem_conv: Conv2d,
    stem_bn: BatchNorm2d,
    block1: DenseBlock,
    trans1: Transition,
    block2: DenseBlock,
    trans2: Transition,
    tap_channels: [usize; 3],
}

impl Backbone {
    /// Assembles the extractor into `reg` under the `backbone.` prefix.
    /// Random initialization only; pretrained loading happens one level up so
    /// that head parameters can come from the same container.
    pub(crate) fn assemble(
        reg: &mut VarRegistry,
        config: &BackboneConfig,
        rng: &mut ChaCha20Rng,
    ) -> Result<Self> {
        config.validate()?;
        let growth = config.growth_rate;
        let stem_conv = Conv2d::new(reg, "backbone.stem.conv", 3, STEM_CHANNELS, 7, 2, 3, false, rng)?;
        let stem_bn = BatchNorm2d::new(reg, "backbone.stem.bn", STEM_CHANNELS)?;

        let b1_in = STEM_CHANNELS;
        let block1 = DenseBlock::new(reg, "backbone.block1", b1_in, config.block_layout[0], growth, rng)?;
        let b1_out = b1_in + config.block_layout[0] * growth;
        let t1_out = (b1_out as f64 * COMPRESSION).floor() as usize;
        let trans1 = Transition::new(reg, "backbone.trans1", b1_out, t1_out, rng)?;

        let block2 = DenseBlock::new(reg, "backbone.block2", t1_out, config.block_layout[1], growth, rng)?;
        let b2_out = t1_out + config.block_layout[1] * growth;
        let t2_out = (b2_out as f64 * COMPRESSION).floor() as usize;
        let trans2 = Transition::new(reg, "backbone.trans2", b2_out, t2_out, rng)?;

        let tap_channels = [b1_in, t1_out, t2_out];
        if let Some(expected) = config.tap_channels {
            if expected != tap_channels {
                return Err(Error::Config(format!(
                    "tap_channels {expected:?} disagree with the constructed network {tap_channels:?}"
                )));
            }
        }
        Ok(Self {
            config: config.clone(),
            stem_conv,
            stem_bn,
            block1,
            trans1,
            block2,
            trans2,
            tap_channels,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Channels at the (low, mid, high) taps, read from the built network.
    pub fn tap_channels(&self) -> [usize; 3] {
        self.tap_channels
    }

    /// Runs the trunk and returns the three taps.
    pub fn extract_multilevel(
        &self,
        batch: &Tensor,
        train: bool,
    ) -> Result<(FeatureMap, FeatureMap, FeatureMap)> {
        let (_, c, h, w) = batch.dims4().map_err(|_| {
            Error::Shape(format!(
                "input batch must be rank 4 (N,C,H,W), got {:?}",
                batch.dims()
            ))
        })?;
        let r = self.config.input_resolution;
        if h != r || w != r {
            return Err(Error::Shape(format!(
                "input spatial size {h}x{w} does not match the expected resolution {r}x{r}"
            )));
        }
        if c != 3 {
            return Err(Error::Shape(format!("input must have 3 channels, got {c}")));
        }

        let y = self.stem_conv.forward(batch)?;
        let y = self.stem_bn.forward(&y, train)?.relu()?;
        let low = max_pool_3x3_s2_p1(&y)?;

        let y = self.block1.forward(&low, train)?;
        let mid = self.trans1.forward(&y, train)?;

        let y = self.block2.forward(&mid, train)?;
        let high = self.trans2.forward(&y, train)?;

        if !train {
            for (name, t) in [("low", &low), ("mid", &mid), ("high", &high)] {
                if !tensor_all_finite(t)? {
                    return Err(Error::Data(format!(
                        "non-finite values in the {name} tap"
                    )));
                }
            }
        }

        Ok((
            FeatureMap::new(low, Level::Low)?,
            FeatureMap::new(mid, Level::Mid)?,
            FeatureMap::new(high, Level::High)?,
        ))
    }
}

/// A self-contained extractor with its own parameter registry.
pub struct BackboneNet {
    pub backbone: Backbone,
    pub registry: VarRegistry,
}

/// Builds an extractor from `config`, initialized from `pretrained_source`
/// (a checkpoint container path) or randomly from `seed`.
pub fn build_backbone(config: &BackboneConfig, seed: u64) -> Result<BackboneNet> {
    config.validate()?;
    let mut reg = VarRegistry::new();
    let mut rng = seeded_rng(seed, RngStream::Init);
    let backbone = Backbone::assemble(&mut reg, config, &mut rng)?;
    if config.pretrained_source != PRETRAINED_RANDOM {
        let state = load_pretrained_state(&config.pretrained_source)?;
        reg.load_state_prefixed(&state, "backbone.")
            .map_err(|e| match e {
                Error::Checkpoint(d) => Error::Init {
                    source_id: config.pretrained_source.clone(),
                    detail: d,
                },
                other => other,
            })?;
    }
    Ok(BackboneNet {
        backbone,
        registry: reg,
    })
}

fn load_pretrained_state(source: &str) -> Result<HashMap<String, Tensor>> {
    let path = Path::new(source);
    if !path.exists() {
        return Err(Error::Init {
            source_id: source.to_string(),
            detail: "weight file not found".into(),
        });
    }
    let container = checkpoint::read_container(path).map_err(|e| Error::Init {
        source_id: source.to_string(),
        detail: e.to_string(),
    })?;
    Ok(container.tensors)
}
