//! The three classification heads.
//!
//! * baseline: global average pool over the high tap, one FC layer.
//! * pbs: a 1x1 convolution turns the high tap into a single-channel pixel
//!   map, and an FC layer over the flattened map produces the binary logit.
//! * apbs: each tap is refined by a spatial attention map (kernel sizes 7, 5
//!   and 3 for low, mid and high), the refined features are pooled to the
//!   high tap's size, concatenated, projected to a pixel map by a 1x1
//!   convolution, and classified like pbs.
//!
//! Attention branches are side taps; the trunk feeding later blocks stays
//! unrefined. The PA score convention is: closer to 1 means attack.

use candle_core::Tensor;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use crate::backbone::{Backbone, BackboneConfig, FeatureMap, PRETRAINED_RANDOM};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::nn::{
    avg_pool, global_avg_pool, seeded_rng, sigmoid, Conv2d, Linear, RngStream, VarRegistry,
};

/// Attention kernel sizes for the (low, mid, high) taps: deeper features get
/// smaller kernels.
pub const ATTENTION_KERNELS: [usize; 3] = [7, 5, 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Baseline,
    Pbs,
    Apbs,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Baseline => write!(f, "baseline"),
            Variant::Pbs => write!(f, "pbs"),
            Variant::Apbs => write!(f, "apbs"),
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "pbs" => Ok(Variant::Pbs),
            "apbs" => Ok(Variant::Apbs),
            other => Err(Error::Config(format!(
                "unknown variant `{other}` (expected baseline|pbs|apbs)"
            ))),
        }
    }
}

/// Per-position weights in (0,1) with the same spatial size as the feature
/// map they refine. Shape (N, 1, H, W).
pub struct AttentionMap {
    pub tensor: Tensor,
    pub kernel_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Logit,
    Probability,
}

/// Single-channel supervision map, (N, 1, h, h) with h = resolution/16.
pub struct PixelMap {
    pub tensor: Tensor,
    pub activation: Activation,
}

impl PixelMap {
    pub fn side(&self) -> usize {
        self.tensor.dims()[2]
    }
}

/// Spatial attention: channel-wise average and max descriptors, stacked and
/// convolved down to one channel, squashed by a sigmoid.
pub struct SpatialAttention {
    pub conv: Conv2d,
    pub kernel_size: usize,
}

impl SpatialAttention {
    pub fn new(
        reg: &mut VarRegistry,
        name: &str,
        kernel_size: usize,
        rng: &mut ChaCha20Rng,
    ) -> Result<Self> {
        if kernel_size % 2 == 0 {
            return Err(Error::Config(format!(
                "attention kernel size must be odd to preserve spatial size, got {kernel_size}"
            )));
        }
        let conv = Conv2d::new(
            reg,
            name,
            2,
            1,
            kernel_size,
            1,
            (kernel_size - 1) / 2,
            true,
            rng,
        )?;
        Ok(Self { conv, kernel_size })
    }

    pub fn forward(&self, feature: &FeatureMap) -> Result<AttentionMap> {
        let avg_plane = feature.tensor.mean_keepdim(1)?;
        let max_plane = feature.tensor.max_keepdim(1)?;
        let stacked = Tensor::cat(&[&avg_plane, &max_plane], 1)?;
        let logits = self.conv.forward(&stacked)?;
        Ok(AttentionMap {
            tensor: sigmoid(&logits)?,
            kernel_size: self.kernel_size,
        })
    }
}

/// Element-wise reweighting of every channel plane by the attention map.
pub fn refine(feature: &FeatureMap, attention: &AttentionMap) -> Result<FeatureMap> {
    let (fn_, _, fh, fw) = feature.tensor.dims4()?;
    let (an, ac, ah, aw) = attention.tensor.dims4()?;
    if ac != 1 {
        return Err(Error::Shape(format!(
            "attention map must have one channel, got {ac}"
        )));
    }
    if (fh, fw) != (ah, aw) || fn_ != an {
        return Err(Error::Shape(format!(
            "attention map {an}x{ah}x{aw} does not match feature {fn_}x{fh}x{fw}"
        )));
    }
    FeatureMap::new(
        feature.tensor.broadcast_mul(&attention.tensor)?,
        feature.level,
    )
}

/// Fuses three refined taps into a single-channel logit map: low and mid are
/// average-pooled down to the high tap's spatial size, concatenated along
/// channels and projected by a 1x1 convolution.
pub struct FusionHead {
    pub fuse: Conv2d,
    in_channels: usize,
}

impl FusionHead {
    pub fn new(
        reg: &mut VarRegistry,
        name: &str,
        tap_channels: [usize; 3],
        rng: &mut ChaCha20Rng,
    ) -> Result<Self> {
        let in_channels = tap_channels.iter().sum();
        let fuse = Conv2d::new(reg, name, in_channels, 1, 1, 1, 0, true, rng)?;
        Ok(Self { fuse, in_channels })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn fuse_project(
        &self,
        low: &FeatureMap,
        mid: &FeatureMap,
        high: &FeatureMap,
    ) -> Result<PixelMap> {
        let target = high.height();
        if high.width() != target {
            return Err(Error::Shape("high tap must be square".into()));
        }
        let pooled_low = pool_to(&low.tensor, target)?;
        let pooled_mid = pool_to(&mid.tensor, target)?;
        let stacked = Tensor::cat(&[&pooled_low, &pooled_mid, &high.tensor], 1)?;
        let got = stacked.dims()[1];
        if got != self.in_channels {
            return Err(Error::Shape(format!(
                "fusion expects {} concatenated channels, got {got}",
                self.in_channels
            )));
        }
        Ok(PixelMap {
            tensor: self.fuse.forward(&stacked)?,
            activation: Activation::Logit,
        })
    }
}

fn pool_to(x: &Tensor, target: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h != w {
        return Err(Error::Shape("taps must be square".into()));
    }
    if h == target {
        return Ok(x.clone());
    }
    if h % target != 0 {
        return Err(Error::Shape(format!(
            "cannot pool {h} down to {target} with an integer kernel"
        )));
    }
    avg_pool(x, h / target)
}

/// 1x1 convolution from the high tap to the single-channel logit map.
pub fn pbs_map(conv: &Conv2d, high: &FeatureMap) -> Result<PixelMap> {
    Ok(PixelMap {
        tensor: conv.forward(&high.tensor)?,
        activation: Activation::Logit,
    })
}

/// Flattens the logit map and applies the FC layer; returns (N,) logits.
pub fn classify(fc: &Linear, map: &PixelMap) -> Result<Tensor> {
    if map.activation != Activation::Logit {
        return Err(Error::Shape("classify expects a logit map".into()));
    }
    let (n, c, h, w) = map.tensor.dims4()?;
    let flat = map.tensor.reshape((n, c * h * w))?;
    Ok(fc.forward(&flat)?.squeeze(1)?)
}

enum Head {
    Baseline {
        fc: Linear,
    },
    Pbs {
        conv: Conv2d,
        fc: Linear,
    },
    Apbs {
        attn_low: SpatialAttention,
        attn_mid: SpatialAttention,
        attn_high: SpatialAttention,
        fusion: FusionHead,
        fc: Linear,
    },
}

/// Batched forward results. `binary_logits` has shape (N,).
pub struct BatchOutput {
    pub pixel_logits: Option<PixelMap>,
    pub binary_logits: Tensor,
    pub attention: Option<[AttentionMap; 3]>,
}

/// Per-sample decoded output.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// Flattened pixel map logits, row-major, `map_side`^2 long. Absent for
    /// the baseline variant.
    pub pixel_map: Option<Vec<f32>>,
    pub map_side: usize,
    pub binary_logit: f64,
    /// sigmoid(binary_logit); near 1 means attack.
    pub pa_score: f64,
}

pub fn pa_score_from_logit(logit: f64) -> f64 {
    if logit >= 0.0 {
        1.0 / (1.0 + (-logit).exp())
    } else {
        let e = logit.exp();
        e / (1.0 + e)
    }
}

/// A full model: backbone plus one of the three heads, with every parameter
/// registered in one ordered registry.
pub struct Model {
    pub variant: Variant,
    pub backbone: Backbone,
    head: Head,
    pub registry: VarRegistry,
}

impl Model {
    /// Builds and initializes a model. `pretrained_source` in the backbone
    /// config may point at a checkpoint container; backbone tensors are then
    /// loaded from it while head parameters stay randomly initialized.
    pub fn new(variant: Variant, config: &BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut reg = VarRegistry::new();
        let mut rng = seeded_rng(seed, RngStream::Init);
        let backbone = Backbone::assemble(&mut reg, config, &mut rng)?;
        let taps = backbone.tap_channels();
        let map_side = config.input_resolution / 16;
        let fc_inputs = map_side * map_side;
        let head = match variant {
            Variant::Baseline => Head::Baseline {
                fc: Linear::new(&mut reg, "head.fc", taps[2], 1, &mut rng)?,
            },
            Variant::Pbs => Head::Pbs {
                conv: Conv2d::new(&mut reg, "head.map_conv", taps[2], 1, 1, 1, 0, true, &mut rng)?,
                fc: Linear::new(&mut reg, "head.fc", fc_inputs, 1, &mut rng)?,
            },
            Variant::Apbs => Head::Apbs {
                attn_low: SpatialAttention::new(
                    &mut reg,
                    "head.attn_low.conv",
                    ATTENTION_KERNELS[0],
                    &mut rng,
                )?,
                attn_mid: SpatialAttention::new(
                    &mut reg,
                    "head.attn_mid.conv",
                    ATTENTION_KERNELS[1],
                    &mut rng,
                )?,
                attn_high: SpatialAttention::new(
                    &mut reg,
                    "head.attn_high.conv",
                    ATTENTION_KERNELS[2],
                    &mut rng,
                )?,
                fusion: FusionHead::new(&mut reg, "head.fuse", taps, &mut rng)?,
                fc: Linear::new(&mut reg, "head.fc", fc_inputs, 1, &mut rng)?,
            },
        };
        if config.pretrained_source != PRETRAINED_RANDOM {
            let path = Path::new(&config.pretrained_source);
            if !path.exists() {
                return Err(Error::Init {
                    source_id: config.pretrained_source.clone(),
                    detail: "weight file not found".into(),
                });
            }
            let container = checkpoint::read_container(path).map_err(|e| Error::Init {
                source_id: config.pretrained_source.clone(),
                detail: e.to_string(),
            })?;
            reg.load_state_prefixed(&container.tensors, "backbone.")
                .map_err(|e| match e {
                    Error::Checkpoint(d) => Error::Init {
                        source_id: config.pretrained_source.clone(),
                        detail: d,
                    },
                    other => other,
                })?;
        }
        Ok(Self {
            variant,
            backbone,
            head,
            registry: reg,
        })
    }

    /// Restores a model (variant + backbone config + every tensor) from a
    /// training checkpoint container.
    pub fn from_state(
        variant: Variant,
        config: &BackboneConfig,
        state: &HashMap<String, Tensor>,
    ) -> Result<Self> {
        let mut cfg = config.clone();
        // The container carries the resolved tensors; never re-resolve an
        // external weight source on reload.
        cfg.pretrained_source = PRETRAINED_RANDOM.to_string();
        let model = Self::new(variant, &cfg, 0)?;
        model.registry.load_state(state)?;
        Ok(model)
    }

    pub fn forward_batch(&self, batch: &Tensor, train: bool) -> Result<BatchOutput> {
        let (low, mid, high) = self.backbone.extract_multilevel(batch, train)?;
        match &self.head {
            Head::Baseline { fc } => {
                let pooled = global_avg_pool(&high.tensor)?;
                let logits = fc.forward(&pooled)?.squeeze(1)?;
                Ok(BatchOutput {
                    pixel_logits: None,
                    binary_logits: logits,
                    attention: None,
                })
            }
            Head::Pbs { conv, fc } => {
                let map = pbs_map(conv, &high)?;
                let logits = classify(fc, &map)?;
                Ok(BatchOutput {
                    pixel_logits: Some(map),
                    binary_logits: logits,
                    attention: None,
                })
            }
            Head::Apbs {
                attn_low,
                attn_mid,
                attn_high,
                fusion,
                fc,
            } => {
                let a_low = attn_low.forward(&low)?;
                let a_mid = attn_mid.forward(&mid)?;
                let a_high = attn_high.forward(&high)?;
                let r_low = refine(&low, &a_low)?;
                let r_mid = refine(&mid, &a_mid)?;
                let r_high = refine(&high, &a_high)?;
                let map = fusion.fuse_project(&r_low, &r_mid, &r_high)?;
                let logits = classify(fc, &map)?;
                Ok(BatchOutput {
                    pixel_logits: Some(map),
                    binary_logits: logits,
                    attention: Some([a_low, a_mid, a_high]),
                })
            }
        }
    }

    /// Inference helper: decoded per-sample outputs.
    pub fn forward(&self, batch: &Tensor) -> Result<Vec<ModelOutput>> {
        let out = self.forward_batch(batch, false)?;
        let logits = out.binary_logits.to_vec1::<f32>()?;
        let map_side = self.backbone.config().input_resolution / 16;
        let maps: Option<Vec<Vec<f32>>> = match &out.pixel_logits {
            Some(pm) => {
                let n = pm.tensor.dims()[0];
                let flat = pm.tensor.flatten_all()?.to_vec1::<f32>()?;
                let per = flat.len() / n;
                Some((0..n).map(|i| flat[i * per..(i + 1) * per].to_vec()).collect())
            }
            None => None,
        };
        Ok(logits
            .iter()
            .enumerate()
            .map(|(i, &logit)| {
                let logit = logit as f64;
                ModelOutput {
                    pixel_map: maps.as_ref().map(|m| m[i].clone()),
                    map_side,
                    binary_logit: logit,
                    pa_score: pa_score_from_logit(logit),
                }
            })
            .collect())
    }

    /// Tap activations for a given level, eval mode. Used by the explanation
    /// module.
    pub fn tap(&self, batch: &Tensor, level: crate::backbone::Level) -> Result<FeatureMap> {
        let (low, mid, high) = self.backbone.extract_multilevel(batch, false)?;
        Ok(match level {
            crate::backbone::Level::Low => low,
            crate::backbone::Level::Mid => mid,
            crate::backbone::Level::High => high,
        })
    }
}
