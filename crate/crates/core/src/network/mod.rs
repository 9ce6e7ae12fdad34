//! Dual-branch multitask network.
//!
//! A ResNet-50-style classifier predicts whether a patch contains a nodule.
//! A residual U-Net with depthwise-separable convolutions and ASPP predicts
//! the logits field `u`. Classifier stage features are fused into the
//! segmentation encoder at matching resolutions, and the classifier's
//! confidence `c` modulates the STD output layer that maps `u` to `x`.
//!
//! Spatial sizes for a 128×128 input:
//!
//! ```text
//! segmentation  S1 128  S2 64  S3 32  S4 16  S5 8 | S6 16  S7 32  S8 64  S9 128
//! classifier    C1 64   C2 32  C3 16  C4 8   C5 4
//! ```

pub mod layers;
pub mod params;
pub mod std_layer;

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imaging_io::PATCH_SIZE;
use layers::{global_avg_pool, max_pool_3x3_s2, upsample2, Aspp, BatchNorm, Bottleneck, Conv2d, ConvSpec, Ctx, FeatureCombine, ResBlock};
pub use layers::Mode;
pub use params::{Init, ParamEntry, ParamKind, ParamStore};
pub use std_layer::{StdConfig, StdLayer};

/// Where one feature-combination block sits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Placement {
    /// Classifier stage, `C1`..`C5`.
    pub classifier: String,
    /// Segmentation block whose output is fused, `S1`..`S9`.
    pub segmentation: String,
}

impl Placement {
    pub fn new(classifier: &str, segmentation: &str) -> Self {
        Self {
            classifier: classifier.into(),
            segmentation: segmentation.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Output channels of S1..S5; the decoder mirrors them.
    pub seg_widths: Vec<usize>,
    /// Bottleneck width of the first classifier stage; later stages double it.
    pub cls_base_width: usize,
    /// Bottleneck counts of C2..C5.
    pub cls_blocks: Vec<usize>,
    pub aspp_rates: Vec<usize>,
    pub combination_enabled: bool,
    pub combination_placements: Vec<Placement>,
    pub std: StdConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            seg_widths: vec![64, 128, 256, 512, 512],
            cls_base_width: 64,
            cls_blocks: vec![3, 4, 6, 3],
            aspp_rates: vec![1, 5, 10, 15],
            combination_enabled: true,
            combination_placements: vec![
                Placement::new("C2", "S3"),
                Placement::new("C3", "S4"),
                Placement::new("C4", "S5"),
            ],
            std: StdConfig::default(),
        }
    }
}

const BOTTLENECK_EXPANSION: usize = 4;

impl ModelConfig {
    /// A small configuration for tests and quick experiments.
    pub fn tiny() -> Self {
        Self {
            seg_widths: vec![4, 8, 8, 16, 16],
            cls_base_width: 2,
            cls_blocks: vec![1, 1, 1, 1],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seg_widths.len() != 5 || self.seg_widths.contains(&0) {
            return Err(Error::Config(format!(
                "model.seg_widths needs five positive widths, got {:?}",
                self.seg_widths
            )));
        }
        if self.cls_blocks.len() != 4 || self.cls_blocks.contains(&0) || self.cls_base_width == 0 {
            return Err(Error::Config(format!(
                "model.cls_blocks needs four positive counts and a positive base width, got {:?} / {}",
                self.cls_blocks, self.cls_base_width
            )));
        }
        if self.aspp_rates.is_empty() || self.aspp_rates.contains(&0) {
            return Err(Error::Config(format!("model.aspp_rates must be >= 1, got {:?}", self.aspp_rates)));
        }
        if self.combination_enabled {
            let mut seen = std::collections::BTreeSet::new();
            for p in &self.combination_placements {
                let cs = classifier_scale(&p.classifier)?;
                let ss = segmentation_scale(&p.segmentation)?;
                if cs != ss {
                    return Err(Error::Config(format!(
                        "combination {}↔{} joins resolutions {} and {}; features are never resampled",
                        p.classifier,
                        p.segmentation,
                        PATCH_SIZE >> cs,
                        PATCH_SIZE >> ss
                    )));
                }
                if !seen.insert(p.segmentation.clone()) {
                    return Err(Error::Config(format!("two combination blocks target {}", p.segmentation)));
                }
            }
        }
        self.std.initial_params().validate()
    }

    fn classifier_channels(&self, stage: usize) -> usize {
        match stage {
            1 => self.cls_base_width,
            s => self.cls_base_width * (1 << (s - 2)) * BOTTLENECK_EXPANSION,
        }
    }

    fn segmentation_channels(&self, block: usize) -> usize {
        if block <= 5 {
            self.seg_widths[block - 1]
        } else {
            self.seg_widths[9 - block]
        }
    }

    /// SHA-256 of the canonical JSON form, used to tag checkpoints.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

fn stage_index(name: &str, prefix: char, max: usize) -> Result<usize> {
    name.strip_prefix(prefix)
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|i| (1..=max).contains(i))
        .ok_or_else(|| Error::Config(format!("unknown block name {name}")))
}

/// log2 of the downsampling factor of a classifier stage.
fn classifier_scale(name: &str) -> Result<usize> {
    stage_index(name, 'C', 5)
}

fn segmentation_scale(name: &str) -> Result<usize> {
    let i = stage_index(name, 'S', 9)?;
    Ok(if i <= 5 { i - 1 } else { 9 - i })
}

/// Outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutputs {
    /// Logits field, `(N,1,H,W)`.
    pub u: Tensor,
    /// Classifier probability, `(N,)`.
    pub c: Tensor,
    /// Relaxed mask in `(0,1)`, `(N,1,H,W)`.
    pub x: Tensor,
}

#[derive(Debug, Clone)]
struct Classifier {
    stem: Conv2d,
    stem_bn: BatchNorm,
    stages: Vec<Vec<Bottleneck>>,
    fc: Conv2d,
}

impl Classifier {
    fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let base = cfg.cls_base_width;
        let stem = Conv2d::new(store, "C1.conv", ConvSpec::new(1, base, 7).stride(2).no_bias())?;
        let stem_bn = BatchNorm::new(store, "C1.bn", base)?;
        let mut stages = Vec::new();
        let mut c_in = base;
        for (i, &blocks) in cfg.cls_blocks.iter().enumerate() {
            let stage = i + 2;
            let mid = base << i;
            let c_out = cfg.classifier_channels(stage);
            let mut layer = Vec::new();
            for b in 0..blocks {
                let stride = if b == 0 && stage > 2 { 2 } else { 1 };
                layer.push(Bottleneck::new(store, &format!("C{stage}.block{b}"), c_in, mid, c_out, stride)?);
                c_in = c_out;
            }
            stages.push(layer);
        }
        let fc = Conv2d::new(store, "FC.linear", ConvSpec::new(c_in, 1, 1).linear())?;
        Ok(Self { stem, stem_bn, stages, fc })
    }

    /// Stage features C1..C5 and the confidence `c`.
    fn forward(&self, image: &Tensor, ctx: &Ctx) -> Result<(Vec<Tensor>, Tensor)> {
        let c1 = self.stem_bn.forward(&self.stem.forward(image)?, ctx)?.relu()?;
        let mut feats = vec![c1.clone()];
        let mut h = max_pool_3x3_s2(&c1)?;
        for stage in &self.stages {
            for block in stage {
                h = block.forward(&h, ctx)?;
            }
            feats.push(h.clone());
        }
        let pooled = global_avg_pool(&h)?;
        let (n, ch) = pooled.dims2()?;
        let logit = self.fc.forward(&pooled.reshape((n, ch, 1, 1))?)?.flatten_all()?;
        Ok((feats, std_layer::sigmoid(&logit)?))
    }
}

#[derive(Debug, Clone)]
struct SegmentationBranch {
    blocks: Vec<ResBlock>,
    aspp5: Aspp,
    aspp9: Aspp,
    head: Conv2d,
}

impl SegmentationBranch {
    fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let w = &cfg.seg_widths;
        let mut blocks = vec![ResBlock::stem(store, "S1.block", 1, w[0])?];
        for i in 2..=5 {
            blocks.push(ResBlock::new(store, &format!("S{i}.block"), w[i - 2], w[i - 1], 2)?);
        }
        let mut prev = w[4];
        for i in 6..=9 {
            let skip = cfg.segmentation_channels(10 - i);
            let out = cfg.segmentation_channels(i);
            blocks.push(ResBlock::new(store, &format!("S{i}.block"), prev + skip, out, 1)?);
            prev = out;
        }
        Ok(Self {
            blocks,
            aspp5: Aspp::new(store, "S5.aspp", w[4], w[4], &cfg.aspp_rates)?,
            aspp9: Aspp::new(store, "S9.aspp", w[0], w[0], &cfg.aspp_rates)?,
            head: Conv2d::new(store, "S9.head", ConvSpec::new(w[0], 1, 1).linear())?,
        })
    }
}

/// The full multitask model together with its parameters.
#[derive(Debug)]
pub struct Model {
    cfg: ModelConfig,
    store: ParamStore,
    classifier: Classifier,
    segmentation: SegmentationBranch,
    /// Keyed by segmentation block index.
    combination: BTreeMap<usize, (usize, FeatureCombine)>,
    std: StdLayer,
}

impl Model {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        Self::with_dtype(cfg, seed, DType::F32)
    }

    pub fn with_dtype(cfg: &ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(seed, dtype, Device::Cpu);
        let classifier = Classifier::new(&mut store, cfg)?;
        let segmentation = SegmentationBranch::new(&mut store, cfg)?;
        let mut combination = BTreeMap::new();
        if cfg.combination_enabled {
            for (i, p) in cfg.combination_placements.iter().enumerate() {
                let cs = stage_index(&p.classifier, 'C', 5)?;
                let ss = stage_index(&p.segmentation, 'S', 9)?;
                let block = FeatureCombine::new(
                    &mut store,
                    &format!("FCB{}", i + 1),
                    cfg.classifier_channels(cs),
                    cfg.segmentation_channels(ss),
                )?;
                combination.insert(ss, (cs, block));
            }
        }
        let std = StdLayer::new(&mut store, &cfg.std)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            classifier,
            segmentation,
            combination,
            std,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn std_layer(&self) -> &StdLayer {
        &self.std
    }

    /// Classifier stage features C1..C5 and confidence `c`.
    pub fn classifier_forward(&self, image: &Tensor, mode: Mode) -> Result<(Vec<Tensor>, Tensor)> {
        check_input(image)?;
        let ctx = Ctx { mode, frozen: self.store.frozen() };
        self.classifier.forward(&image.to_dtype(self.store.dtype())?, &ctx)
    }

    pub fn forward(&self, image: &Tensor, mode: Mode, std_enabled: bool) -> Result<ForwardOutputs> {
        check_input(image)?;
        let image = image.to_dtype(self.store.dtype())?;
        let ctx = Ctx { mode, frozen: self.store.frozen() };
        let (cls_feats, c) = self.classifier.forward(&image, &ctx)?;

        let combine = |block: usize, f: Tensor| -> Result<Tensor> {
            match self.combination.get(&block) {
                Some((stage, fcb)) => fcb.forward(&cls_feats[stage - 1], &f),
                None => Ok(f),
            }
        };
        let seg = &self.segmentation;
        let mut skips = Vec::with_capacity(5);
        let mut h = image;
        for i in 1..=5 {
            h = seg.blocks[i - 1].forward(&h, &ctx)?;
            if i == 5 {
                h = seg.aspp5.forward(&h)?;
            }
            h = combine(i, h)?;
            skips.push(h.clone());
        }
        for i in 6..=9 {
            let cat = Tensor::cat(&[&upsample2(&h)?, &skips[9 - i]], 1)?;
            h = seg.blocks[i - 1].forward(&cat, &ctx)?;
            if i == 9 {
                h = seg.aspp9.forward(&h)?;
            }
            h = combine(i, h)?;
        }
        let u = seg.head.forward(&h)?;
        let x = if std_enabled {
            self.std.forward(&u, &c)?
        } else {
            std_layer::sigmoid(&u)?
        };
        Ok(ForwardOutputs { u, c, x })
    }
}

fn check_input(image: &Tensor) -> Result<()> {
    let dims = image.dims();
    if dims.len() != 4 || dims[1] != 1 || dims[2] != PATCH_SIZE || dims[3] != PATCH_SIZE {
        return Err(Error::Shape(format!(
            "model input must be (N,1,{PATCH_SIZE},{PATCH_SIZE}), got {dims:?}"
        )));
    }
    Ok(())
}

/// Runs the model; see [`Model::forward`].
pub fn model_forward(model: &Model, image: &Tensor, mode: Mode, std_enabled: bool) -> Result<ForwardOutputs> {
    model.forward(image, mode, std_enabled)
}
