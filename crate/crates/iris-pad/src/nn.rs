//! Thin layer over candle: parameter registry, seeded initialization, and the
//! handful of layer primitives the backbone and heads are assembled from.
//!
//! Everything runs on CPU in f32. All randomness flows through [`seeded_rng`]
//! so that identical seeds give bit-identical parameters and runs.

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use std::collections::HashMap;

use crate::error::{Error, Result};

/// Purpose tags for RNG stream derivation, so init / shuffling / augmentation
/// draws never alias even though they share one user-facing seed.
#[derive(Debug, Clone, Copy)]
pub enum RngStream {
    Init,
    Balance,
    Shuffle { epoch: usize },
    Augment { epoch: usize },
    Synth,
    Other(u64),
}

impl RngStream {
    fn tag(self) -> u64 {
        match self {
            RngStream::Init => 1,
            RngStream::Balance => 2,
            RngStream::Shuffle { epoch } => 0x1000 + epoch as u64,
            RngStream::Augment { epoch } => 0x2000_0000 + epoch as u64,
            RngStream::Synth => 3,
            RngStream::Other(t) => 0x4000_0000_0000 + t,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic per-purpose RNG derived from the run seed.
pub fn seeded_rng(seed: u64, stream: RngStream) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(splitmix64(seed ^ splitmix64(stream.tag())))
}

/// Standard normal draw via Box-Muller; keeps us off extra distribution crates
/// and pinned to the ChaCha stream.
fn normal_draw(rng: &mut ChaCha20Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Normal(0, sqrt(2 / fan_in)); the conv default.
    HeNormal { fan_in: usize },
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)); the linear default.
    LecunUniform { fan_in: usize },
    Normal { std: f64 },
    Const(f64),
}

pub fn init_data(init: Init, n: usize, rng: &mut ChaCha20Rng) -> Vec<f32> {
    match init {
        Init::HeNormal { fan_in } => {
            let std = (2.0 / fan_in.max(1) as f64).sqrt();
            (0..n).map(|_| (normal_draw(rng) * std) as f32).collect()
        }
        Init::LecunUniform { fan_in } => {
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            (0..n)
                .map(|_| (rng.random::<f64>() * 2.0 * bound - bound) as f32)
                .collect()
        }
        Init::Normal { std } => (0..n).map(|_| (normal_draw(rng) * std) as f32).collect(),
        Init::Const(c) => vec![c as f32; n],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarKind {
    /// Updated by the optimizer.
    Trainable,
    /// Carried state (batch-norm running statistics); saved but not optimized.
    Buffer,
}

/// Insertion-ordered registry of every variable in a model. The order is the
/// contract for optimizer state alignment and checkpoint layout.
pub struct VarRegistry {
    entries: Vec<(String, Var, VarKind)>,
    device: Device,
}

impl VarRegistry {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            device: Device::Cpu,
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn var(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        rng: &mut ChaCha20Rng,
    ) -> Result<Var> {
        let n: usize = shape.iter().product();
        let data = init_data(init, n, rng);
        let t = Tensor::from_vec(data, shape, &self.device)?;
        let v = Var::from_tensor(&t)?;
        self.entries
            .push((name.to_string(), v.clone(), VarKind::Trainable));
        Ok(v)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], fill: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let t = Tensor::from_vec(vec![fill as f32; n], shape, &self.device)?;
        let v = Var::from_tensor(&t)?;
        self.entries
            .push((name.to_string(), v.clone(), VarKind::Buffer));
        Ok(v)
    }

    pub fn entries(&self) -> &[(String, Var, VarKind)] {
        &self.entries
    }

    pub fn trainable(&self) -> Vec<(String, Var)> {
        self.entries
            .iter()
            .filter(|(_, _, k)| *k == VarKind::Trainable)
            .map(|(n, v, _)| (n.clone(), v.clone()))
            .collect()
    }

    /// Overwrites every registered variable from `state`. Errors name the
    /// offending entry so a layout mismatch is diagnosable.
    pub fn load_state(&self, state: &HashMap<String, Tensor>) -> Result<()> {
        for (name, var, _) in &self.entries {
            let src = state.get(name).ok_or_else(|| {
                Error::Checkpoint(format!("missing tensor `{name}` in checkpoint state"))
            })?;
            if src.dims() != var.dims() {
                return Err(Error::Config(format!(
                    "layout mismatch for `{name}`: checkpoint has {:?}, model has {:?}",
                    src.dims(),
                    var.dims()
                )));
            }
            var.set(src)?;
        }
        Ok(())
    }

    /// Loads only entries under `prefix`, requiring every one to be present.
    pub fn load_state_prefixed(
        &self,
        state: &HashMap<String, Tensor>,
        prefix: &str,
    ) -> Result<()> {
        for (name, var, _) in &self.entries {
            if !name.starts_with(prefix) {
                continue;
            }
            let src = state.get(name).ok_or_else(|| {
                Error::Checkpoint(format!("missing tensor `{name}` in checkpoint state"))
            })?;
            if src.dims() != var.dims() {
                return Err(Error::Config(format!(
                    "layout mismatch for `{name}`: checkpoint has {:?}, model has {:?}",
                    src.dims(),
                    var.dims()
                )));
            }
            var.set(src)?;
        }
        Ok(())
    }
}

impl Default for VarRegistry {
    fn default() -> Self {
        Self::new()
    }
}

pub struct Conv2d {
    pub weight: Var,
    pub bias: Option<Var>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        reg: &mut VarRegistry,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        with_bias: bool,
        rng: &mut ChaCha20Rng,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel * kernel;
        let weight = reg.var(
            &format!("{name}.weight"),
            &[out_channels, in_channels, kernel, kernel],
            Init::HeNormal { fan_in },
            rng,
        )?;
        let bias = if with_bias {
            Some(reg.var(&format!("{name}.bias"), &[out_channels], Init::Const(0.0), rng)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(self.weight.as_tensor(), self.padding, self.stride, 1, 1)?;
        match &self.bias {
            Some(b) => {
                let c = b.dims1()?;
                Ok(y.broadcast_add(&b.reshape((1, c, 1, 1))?)?)
            }
            None => Ok(y),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }
}

pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn new(
        reg: &mut VarRegistry,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut ChaCha20Rng,
    ) -> Result<Self> {
        let weight = reg.var(
            &format!("{name}.weight"),
            &[out_features, in_features],
            Init::LecunUniform { fan_in: in_features },
            rng,
        )?;
        let bias = reg.var(&format!("{name}.bias"), &[out_features], Init::Const(0.0), rng)?;
        Ok(Self { weight, bias })
    }

    /// x: (N, in) -> (N, out)
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.as_tensor().t()?)?
            .broadcast_add(self.bias.as_tensor())?)
    }
}

/// Batch normalization with batch statistics on the training path (gradients
/// flow through mean and variance) and running statistics on the eval path.
pub struct BatchNorm2d {
    pub gamma: Var,
    pub beta: Var,
    pub running_mean: Var,
    pub running_var: Var,
    pub eps: f64,
    pub momentum: f64,
    channels: usize,
}

impl BatchNorm2d {
    pub fn new(reg: &mut VarRegistry, name: &str, channels: usize) -> Result<Self> {
        let mut dummy = seeded_rng(0, RngStream::Other(0));
        let gamma = reg.var(
            &format!("{name}.gamma"),
            &[channels],
            Init::Const(1.0),
            &mut dummy,
        )?;
        let beta = reg.var(
            &format!("{name}.beta"),
            &[channels],
            Init::Const(0.0),
            &mut dummy,
        )?;
        let running_mean = reg.buffer(&format!("{name}.running_mean"), &[channels], 0.0)?;
        let running_var = reg.buffer(&format!("{name}.running_var"), &[channels], 1.0)?;
        Ok(Self {
            gamma,
            beta,
            running_mean,
            running_var,
            eps: 1e-5,
            momentum: 0.1,
            channels,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.channels {
            return Err(Error::Shape(format!(
                "batch norm expects {} channels, got {c}",
                self.channels
            )));
        }
        let (mean, var) = if train {
            let mean = x.mean_keepdim((0, 2, 3))?;
            let centered = x.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim((0, 2, 3))?;
            self.update_running(&mean, &var, x)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().reshape((1, c, 1, 1))?,
                self.running_var.as_tensor().reshape((1, c, 1, 1))?,
            )
        };
        let denom = var.broadcast_add(&scalar(self.eps, x)?)?.sqrt()?;
        let normed = x.broadcast_sub(&mean)?.broadcast_div(&denom)?;
        let y = normed
            .broadcast_mul(&self.gamma.as_tensor().reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.as_tensor().reshape((1, c, 1, 1))?)?;
        Ok(y)
    }

    fn update_running(&self, mean: &Tensor, var: &Tensor, x: &Tensor) -> Result<()> {
        let (n, c, h, w) = x.dims4()?;
        let count = (n * h * w) as f64;
        // Unbiased variance for the running buffer, matching the convention of
        // the framework the training recipe was tuned on.
        let correction = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        let m = self.momentum;
        let batch_mean = mean.detach().reshape(c)?;
        let batch_var = var.detach().reshape(c)?.affine(correction, 0.0)?;
        let new_mean = self
            .running_mean
            .as_tensor()
            .affine(1.0 - m, 0.0)?
            .add(&batch_mean.affine(m, 0.0)?)?;
        let new_var = self
            .running_var
            .as_tensor()
            .affine(1.0 - m, 0.0)?
            .add(&batch_var.affine(m, 0.0)?)?;
        self.running_mean.set(&new_mean)?;
        self.running_var.set(&new_var)?;
        Ok(())
    }
}

fn scalar(v: f64, like: &Tensor) -> Result<Tensor> {
    Ok(Tensor::from_vec(vec![v as f32], (1,), like.device())?
        .to_dtype(like.dtype())?
        .reshape(vec![1usize; like.dims().len()])?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    // 1 / (1 + exp(-x)); exp overflow at very negative x lands on +inf and the
    // reciprocal maps it to 0, so the composition is stable over all of f32.
    Ok(x.neg()?.exp()?.affine(1.0, 1.0)?.recip()?)
}

/// ln(1 + exp(x)) in the overflow-safe arrangement.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let base = x.relu()?;
    let rest = x.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?;
    Ok(base.add(&rest)?)
}

/// Average pooling with kernel == stride (the only form the transitions and
/// the fusion head need).
pub fn avg_pool(x: &Tensor, k: usize) -> Result<Tensor> {
    Ok(x.avg_pool2d(k)?)
}

/// (N, C, H, W) -> (N, C)
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean(3)?.mean(2)?)
}

/// Takes elements `offset, offset+2, ..` along `dim`, `count` of them.
fn stride2_slice(x: &Tensor, dim: usize, offset: usize, count: usize) -> Result<Tensor> {
    let narrowed = x.narrow(dim, offset, 2 * count)?;
    let mut dims = narrowed.dims().to_vec();
    dims[dim] = count;
    dims.insert(dim + 1, 2);
    Ok(narrowed.reshape(dims)?.narrow(dim + 1, 0, 1)?.squeeze(dim + 1)?)
}

/// 3x3 max pool, stride 2, padding 1, for even spatial sizes.
///
/// candle cannot backprop a max pool whose kernel differs from its stride, so
/// the pool is composed from nine strided slices and elementwise maxima, all
/// of which differentiate. Zero padding stands in for -inf padding, which is
/// exact because the input sits behind a ReLU.
pub fn max_pool_3x3_s2_p1(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "stem pool expects even spatial size, got {h}x{w}"
        )));
    }
    let padded = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
    let (oh, ow) = (h / 2, w / 2);
    let mut acc: Option<Tensor> = None;
    for di in 0..3 {
        let rows = stride2_slice(&padded, 2, di, oh)?;
        for dj in 0..3 {
            let window = stride2_slice(&rows, 3, dj, ow)?;
            acc = Some(match acc {
                None => window,
                Some(a) => a.maximum(&window)?,
            });
        }
    }
    Ok(acc.expect("nine windows"))
}

/// Batched image data as a contiguous (N, C, H, W) f32 tensor.
pub fn batch_to_tensor(
    data: Vec<f32>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    device: &Device,
) -> Result<Tensor> {
    Ok(Tensor::from_vec(data, (n, c, h, w), device)?)
}

pub fn tensor_all_finite(t: &Tensor) -> Result<bool> {
    let flat = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
    Ok(flat.iter().all(|v| v.is_finite()))
}
