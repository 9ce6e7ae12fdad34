//! Building blocks shared by the classifier and segmentation branches.

use std::collections::BTreeSet;

use candle_core::{DType, Tensor, Var};

use super::params::{group_of, Init, ParamKind, ParamStore};
use crate::error::{Error, Result};

/// Whether batch normalization uses batch or running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// Per-call state threaded through every layer.
#[derive(Debug, Clone, Copy)]
pub struct Ctx<'a> {
    pub mode: Mode,
    pub frozen: &'a BTreeSet<String>,
}

/// Keeps every other row and column: `(N,C,H,W) -> (N,C,H/2,W/2)`.
pub fn subsample2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("cannot halve odd spatial size {h}x{w}")));
    }
    Ok(x
        .reshape((n, c, h / 2, 2, w / 2, 2))?
        .narrow(3, 0, 1)?
        .narrow(5, 0, 1)?
        .reshape((n, c, h / 2, w / 2))?)
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    Ok(x
        .reshape((n, c, h, 1, w, 1))?
        .broadcast_as((n, c, h, 2, w, 2))?
        .reshape((n, c, 2 * h, 2 * w))?)
}

fn pad_hw(x: &Tensor, p: usize) -> Result<Tensor> {
    Ok(x.pad_with_zeros(2, p, p)?.pad_with_zeros(3, p, p)?)
}

/// 3×3 max pooling with stride 2 and padding 1. Zero padding is only
/// equivalent to `-inf` padding for non-negative inputs, which is the case
/// after a ReLU.
pub fn max_pool_3x3_s2(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let xp = pad_hw(x, 1)?;
    let mut out: Option<Tensor> = None;
    for ky in 0..3 {
        for kx in 0..3 {
            let window = subsample2(&xp.narrow(2, ky, h)?.narrow(3, kx, w)?)?;
            out = Some(match out {
                None => window,
                Some(o) => o.maximum(&window)?,
            });
        }
    }
    Ok(out.expect("nine windows"))
}

/// Mean over the spatial dimensions: `(N,C,H,W) -> (N,C)`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.flatten_from(2)?.mean(2)?)
}

/// Dense 2D convolution with optional bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Option<Var>,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub bias: bool,
    pub zero_init: bool,
    /// Variance gain of the initial weights: 2 before a ReLU, 1 otherwise.
    pub gain: f64,
}

impl ConvSpec {
    pub fn new(c_in: usize, c_out: usize, k: usize) -> Self {
        Self {
            c_in,
            c_out,
            k,
            stride: 1,
            padding: k / 2,
            dilation: 1,
            bias: true,
            zero_init: false,
            gain: 2.0,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn dilated(mut self, d: usize) -> Self {
        self.dilation = d;
        self.padding = d * (self.k / 2);
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn zeroed(mut self) -> Self {
        self.zero_init = true;
        self
    }

    /// Unit-gain initialization for convolutions not followed by a ReLU.
    pub fn linear(mut self) -> Self {
        self.gain = 1.0;
        self
    }
}

impl Conv2d {
    pub fn new(store: &mut ParamStore, name: &str, s: ConvSpec) -> Result<Self> {
        let init = if s.zero_init {
            Init::Zeros
        } else {
            Init::Normal((s.gain / (s.c_in * s.k * s.k) as f64).sqrt())
        };
        let weight = store.add(
            &format!("{name}.weight"),
            ParamKind::Trainable,
            &[s.c_out, s.c_in, s.k, s.k],
            init,
        )?;
        let bias = if s.bias {
            Some(store.add(&format!("{name}.bias"), ParamKind::Trainable, &[s.c_out], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride: s.stride,
            padding: s.padding,
            dilation: s.dilation,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, self.dilation, 1)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?),
            None => Ok(y),
        }
    }
}

/// Batch normalization with running statistics stored as buffers.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    group: String,
    gamma: Var,
    beta: Var,
    running_mean: Var,
    running_var: Var,
}

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            group: group_of(name).to_string(),
            gamma: store.add(&format!("{name}.gamma"), ParamKind::Trainable, &[c], Init::Ones)?,
            beta: store.add(&format!("{name}.beta"), ParamKind::Trainable, &[c], Init::Zeros)?,
            running_mean: store.add(&format!("{name}.running_mean"), ParamKind::Buffer, &[c], Init::Zeros)?,
            running_var: store.add(&format!("{name}.running_var"), ParamKind::Buffer, &[c], Init::Ones)?,
        })
    }

    /// Normalizes per channel. In training mode batch statistics are used
    /// and the running estimates updated, unless the owning group is frozen,
    /// in which case the layer behaves as in evaluation mode.
    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let c = x.dim(1)?;
        let train = ctx.mode == Mode::Train && !ctx.frozen.contains(&self.group);
        let (mean, var) = if train {
            let flat = x.transpose(0, 1)?.flatten_from(1)?;
            let count = flat.dim(1)?;
            let mean = flat.mean_keepdim(1)?;
            let var = flat.broadcast_sub(&mean)?.sqr()?.mean_keepdim(1)?;
            let (mean, var) = (mean.flatten_all()?, var.flatten_all()?);
            let unbiased = if count > 1 {
                var.detach().affine(count as f64 / (count - 1) as f64, 0.0)?
            } else {
                var.detach()
            };
            let m = BN_MOMENTUM;
            let rm = (self.running_mean.as_tensor().affine(1.0 - m, 0.0)? + mean.detach().affine(m, 0.0)?)?;
            let rv = (self.running_var.as_tensor().affine(1.0 - m, 0.0)? + unbiased.affine(m, 0.0)?)?;
            self.running_mean.set(&rm)?;
            self.running_var.set(&rv)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().clone(),
                self.running_var.as_tensor().clone(),
            )
        };
        let shape = (1, c, 1, 1);
        let scale = (self.gamma.as_tensor() / (var + BN_EPS)?.sqrt()?)?;
        let shift = (self.beta.as_tensor() - (&mean * &scale)?)?;
        Ok(x.broadcast_mul(&scale.reshape(shape)?)?
            .broadcast_add(&shift.reshape(shape)?)?)
    }
}

/// 3×3 per-channel convolution followed by a 1×1 cross-channel convolution.
#[derive(Debug, Clone)]
pub struct DsConv {
    pub depthwise: Var,
    pub pointwise: Conv2d,
    pub stride: usize,
}

impl DsConv {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, stride: usize) -> Result<Self> {
        Self::build(store, name, c_in, c_out, stride, false)
    }

    /// Same as [`DsConv::new`] with the pointwise weights starting at zero.
    pub fn zeroed(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Self::build(store, name, c_in, c_out, 1, true)
    }

    fn build(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, stride: usize, zero: bool) -> Result<Self> {
        if stride != 1 && stride != 2 {
            return Err(Error::Config(format!("{name}: stride must be 1 or 2, got {stride}")));
        }
        let depthwise = store.add(
            &format!("{name}.depthwise"),
            ParamKind::Trainable,
            &[c_in, 1, 3, 3],
            Init::Kaiming { fan_in: 9 },
        )?;
        let mut spec = ConvSpec::new(c_in, c_out, 1);
        if zero {
            spec = spec.zeroed();
        }
        let pointwise = Conv2d::new(store, &format!("{name}.pointwise"), spec)?;
        Ok(Self {
            depthwise,
            pointwise,
            stride,
        })
    }

    /// Weight count excluding biases.
    pub fn weight_count(&self) -> usize {
        self.depthwise.elem_count() + self.pointwise.weight.elem_count()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.depthwise.dim(0)? {
            return Err(Error::Config(format!(
                "depthwise conv expects {} channels, got {c}",
                self.depthwise.dim(0)?
            )));
        }
        let xp = pad_hw(x, 1)?;
        let k = self.depthwise.reshape((c, 9))?;
        let mut acc: Option<Tensor> = None;
        for ky in 0..3 {
            for kx in 0..3 {
                let tap = k.narrow(1, ky * 3 + kx, 1)?.reshape((1, c, 1, 1))?;
                let term = xp.narrow(2, ky, h)?.narrow(3, kx, w)?.broadcast_mul(&tap)?;
                acc = Some(match acc {
                    None => term,
                    Some(a) => (a + term)?,
                });
            }
        }
        let mut y = acc.expect("nine taps");
        if self.stride == 2 {
            y = subsample2(&y)?;
        }
        self.pointwise.forward(&y)
    }
}

/// Parallel dilated 3×3 convolutions, concatenated and fused by a 1×1 conv.
#[derive(Debug, Clone)]
pub struct Aspp {
    pub branches: Vec<Conv2d>,
    pub fuse: Conv2d,
}

impl Aspp {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, rates: &[usize]) -> Result<Self> {
        if rates.is_empty() || rates.contains(&0) {
            return Err(Error::Config(format!("{name}: dilation rates must be >= 1, got {rates:?}")));
        }
        let branches = rates
            .iter()
            .enumerate()
            .map(|(i, &r)| Conv2d::new(store, &format!("{name}.branch{i}"), ConvSpec::new(c_in, c_in, 3).dilated(r).linear()))
            .collect::<Result<Vec<_>>>()?;
        let fuse = Conv2d::new(store, &format!("{name}.fuse"), ConvSpec::new(c_in * rates.len(), c_out, 1).linear())?;
        Ok(Self { branches, fuse })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let outs = self
            .branches
            .iter()
            .map(|b| b.forward(x))
            .collect::<Result<Vec<_>>>()?;
        self.fuse.forward(&Tensor::cat(&outs, 1)?)
    }
}

/// Pre-activation residual block of the segmentation branch:
/// `Conv3x3(ReLU(BN(DS(ReLU(BN(x)))))) + shortcut(x)`.
///
/// The first convolution is depthwise-separable and carries the stride. The
/// first block takes the raw image, so it skips the leading BN-ReLU.
#[derive(Debug, Clone)]
pub struct ResBlock {
    bn1: Option<BatchNorm>,
    conv1: DsConv,
    bn2: BatchNorm,
    conv2: Conv2d,
    shortcut: Conv2d,
    stride: usize,
}

impl ResBlock {
    pub fn stem(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Self::build(store, name, c_in, c_out, 1, false)
    }

    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, stride: usize) -> Result<Self> {
        Self::build(store, name, c_in, c_out, stride, true)
    }

    fn build(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, stride: usize, preact: bool) -> Result<Self> {
        Ok(Self {
            bn1: if preact { Some(BatchNorm::new(store, &format!("{name}.bn1"), c_in)?) } else { None },
            conv1: DsConv::new(store, &format!("{name}.conv1"), c_in, c_out, stride)?,
            bn2: BatchNorm::new(store, &format!("{name}.bn2"), c_out)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), ConvSpec::new(c_out, c_out, 3).linear())?,
            shortcut: Conv2d::new(store, &format!("{name}.shortcut"), ConvSpec::new(c_in, c_out, 1).linear())?,
            stride,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let h = match &self.bn1 {
            Some(bn) => bn.forward(x, ctx)?.relu()?,
            None => x.clone(),
        };
        let h = self.conv1.forward(&h)?;
        let h = self.conv2.forward(&self.bn2.forward(&h, ctx)?.relu()?)?;
        // A strided 1×1 conv only reads even positions; subsample first.
        let skip = if self.stride == 2 { subsample2(x)? } else { x.clone() };
        Ok((h + self.shortcut.forward(&skip)?)?)
    }
}

/// ResNet bottleneck: 1×1 reduce, 3×3 (strided), 1×1 expand, each followed
/// by batch normalization, with a projection shortcut when shapes change.
#[derive(Debug, Clone)]
pub struct Bottleneck {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    conv3: Conv2d,
    bn3: BatchNorm,
    projection: Option<(Conv2d, BatchNorm)>,
}

impl Bottleneck {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, mid: usize, c_out: usize, stride: usize) -> Result<Self> {
        let projection = if stride != 1 || c_in != c_out {
            Some((
                Conv2d::new(store, &format!("{name}.proj"), ConvSpec::new(c_in, c_out, 1).stride(stride).no_bias())?,
                BatchNorm::new(store, &format!("{name}.proj_bn"), c_out)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), ConvSpec::new(c_in, mid, 1).no_bias())?,
            bn1: BatchNorm::new(store, &format!("{name}.bn1"), mid)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), ConvSpec::new(mid, mid, 3).stride(stride).no_bias())?,
            bn2: BatchNorm::new(store, &format!("{name}.bn2"), mid)?,
            conv3: Conv2d::new(store, &format!("{name}.conv3"), ConvSpec::new(mid, c_out, 1).no_bias())?,
            bn3: BatchNorm::new(store, &format!("{name}.bn3"), c_out)?,
            projection,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let h = self.bn1.forward(&self.conv1.forward(x)?, ctx)?.relu()?;
        let h = self.bn2.forward(&self.conv2.forward(&h)?, ctx)?.relu()?;
        let h = self.bn3.forward(&self.conv3.forward(&h)?, ctx)?;
        let skip = match &self.projection {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, ctx)?,
            None => x.clone(),
        };
        Ok((h + skip)?.relu()?)
    }
}

/// Fuses resolution-matched classifier features into the segmentation path:
/// `f_seg + DS(1×1(concat(1×1(f_cls), f_seg)))`.
///
/// The pointwise half of the final separable conv starts at zero, so a
/// freshly built block passes `f_seg` through unchanged.
#[derive(Debug, Clone)]
pub struct FeatureCombine {
    transform: Conv2d,
    reduce: Conv2d,
    fuse: DsConv,
}

impl FeatureCombine {
    pub fn new(store: &mut ParamStore, name: &str, c_cls: usize, c_seg: usize) -> Result<Self> {
        Ok(Self {
            transform: Conv2d::new(store, &format!("{name}.transform"), ConvSpec::new(c_cls, c_cls, 1).linear())?,
            reduce: Conv2d::new(store, &format!("{name}.reduce"), ConvSpec::new(c_cls + c_seg, c_seg, 1).linear())?,
            fuse: DsConv::zeroed(store, &format!("{name}.fuse"), c_seg, c_seg)?,
        })
    }

    pub fn forward(&self, f_cls: &Tensor, f_seg: &Tensor) -> Result<Tensor> {
        let (nc, _, hc, wc) = f_cls.dims4()?;
        let (ns, _, hs, ws) = f_seg.dims4()?;
        if (nc, hc, wc) != (ns, hs, ws) {
            return Err(Error::Config(format!(
                "feature combination needs matching batch and spatial size, got classifier {:?} and segmentation {:?}",
                f_cls.dims(),
                f_seg.dims()
            )));
        }
        let t = self.transform.forward(f_cls)?;
        let r = self.reduce.forward(&Tensor::cat(&[&t, f_seg], 1)?)?;
        Ok((f_seg + self.fuse.forward(&r)?)?)
    }
}

/// Convenience for tests and benches: a standard-normal tensor from a seed.
pub fn seeded_input(seed: u64, shape: &[usize], dtype: DType) -> Result<Tensor> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Ok(Tensor::from_vec(v, shape, &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}
