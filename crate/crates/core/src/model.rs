//! Model assembly: backbone → optional CBAM → GAP → dropout → linear head.

use ndarray::{Array2, Array4};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cbam::{Cbam, CbamCache, DEFAULT_REDUCTION_RATIO, DEFAULT_SPATIAL_KERNEL};
use crate::error::{Error, Result};
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, BatchNorm2d, BnCache, Conv2d, ConvCache, Dropout,
    DropoutCache, LeakyRelu, Linear, LinearCache, MaxPool2, Param, Phase, PoolCache,
};
use crate::rng::{keyed_rng, Domain};

pub const TINY_BACKBONE: &str = "tiny";
pub const CUSTOM_CNN: &str = "custom_cnn";

/// Backbones that attach through the adapter interface when a substrate
/// provides them. None ship with this build.
pub const ADAPTER_BACKBONES: [&str; 5] = ["efficientnet_b0", "vgg19", "resnet50", "densenet121", "mobilenetv3"];

const TINY_WIDTHS: [usize; 3] = [16, 32, 32];
const CUSTOM_CNN_WIDTHS: [usize; 4] = [32, 64, 128, 256];
const CUSTOM_CNN_SLOPE: f64 = 0.01;
const CONV_KERNEL: usize = 3;
const INPUT_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSpec {
    pub name: String,
    pub output_channels: usize,
    pub pretrained: bool,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self::tiny()
    }
}

impl BackboneSpec {
    pub fn tiny() -> Self {
        Self {
            name: TINY_BACKBONE.into(),
            output_channels: *TINY_WIDTHS.last().unwrap(),
            pretrained: false,
        }
    }

    pub fn custom_cnn() -> Self {
        Self {
            name: CUSTOM_CNN.into(),
            output_channels: *CUSTOM_CNN_WIDTHS.last().unwrap(),
            pretrained: false,
        }
    }

    /// Look up a registered backbone by name with its native channel count.
    pub fn named(name: &str) -> Result<Self> {
        match name {
            TINY_BACKBONE => Ok(Self::tiny()),
            CUSTOM_CNN => Ok(Self::custom_cnn()),
            other if ADAPTER_BACKBONES.contains(&other) => Err(Error::BackboneUnavailable { name: other.into() }),
            other => Err(Error::config(format!("unknown backbone `{other}`"))),
        }
    }

    /// Human-readable label used in report tables.
    pub fn display_name(&self) -> &'static str {
        match self.name.as_str() {
            TINY_BACKBONE => "TinyBackbone",
            CUSTOM_CNN => "CustomCNN",
            "efficientnet_b0" => "EfficientNet-B0",
            "vgg19" => "VGG19",
            "resnet50" => "ResNet50",
            "densenet121" => "DenseNet121",
            "mobilenetv3" => "MobileNetV3",
            _ => "backbone",
        }
    }

    fn builder(&self) -> Result<ConvStackConfig> {
        if self.pretrained {
            return Err(Error::PretrainedUnavailable { name: self.name.clone() });
        }
        let cfg = match self.name.as_str() {
            TINY_BACKBONE => ConvStackConfig {
                widths: TINY_WIDTHS.to_vec(),
                slope: 0.0,
            },
            CUSTOM_CNN => ConvStackConfig {
                widths: CUSTOM_CNN_WIDTHS.to_vec(),
                slope: CUSTOM_CNN_SLOPE,
            },
            other if ADAPTER_BACKBONES.contains(&other) => {
                return Err(Error::BackboneUnavailable { name: other.into() })
            }
            other => return Err(Error::config(format!("unknown backbone `{other}`"))),
        };
        let produced = *cfg.widths.last().unwrap();
        if produced != self.output_channels {
            return Err(Error::config(format!(
                "backbone `{}` produces {produced} channels, spec declares {}",
                self.name, self.output_channels
            )));
        }
        Ok(cfg)
    }
}

struct ConvStackConfig {
    widths: Vec<usize>,
    slope: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub backbone: BackboneSpec,
    pub use_cbam: bool,
    pub dropout_p: f64,
    pub num_classes: usize,
    pub reduction_ratio: usize,
    pub spatial_kernel: usize,
    /// Exclude backbone weights from optimization.
    pub freeze_backbone: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self::hybrid(BackboneSpec::tiny(), 6)
    }
}

impl ModelSpec {
    pub fn hybrid(backbone: BackboneSpec, num_classes: usize) -> Self {
        Self {
            backbone,
            use_cbam: true,
            dropout_p: 0.4,
            num_classes,
            reduction_ratio: DEFAULT_REDUCTION_RATIO,
            spatial_kernel: DEFAULT_SPATIAL_KERNEL,
            freeze_backbone: false,
        }
    }

    /// The CustomCNN baseline: four blocks, GAP, linear head, no attention.
    pub fn custom_cnn(num_classes: usize) -> Self {
        Self {
            use_cbam: false,
            dropout_p: 0.0,
            ..Self::hybrid(BackboneSpec::custom_cnn(), num_classes)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::config(format!("dropout_p = {} outside [0, 1)", self.dropout_p)));
        }
        if self.num_classes < 2 {
            return Err(Error::config(format!("num_classes = {} must be >= 2", self.num_classes)));
        }
        if self.reduction_ratio == 0 {
            return Err(Error::config("reduction_ratio must be >= 1"));
        }
        Ok(())
    }

    /// Row label used in comparison and ablation tables.
    pub fn label(&self) -> String {
        if self.use_cbam {
            format!("HybridSolarNet ({} + CBAM)", self.backbone.display_name())
        } else {
            self.backbone.display_name().to_string()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct ConvBlock {
    conv: Conv2d<f32>,
    bn: BatchNorm2d<f32>,
    act: LeakyRelu,
}

struct BlockCache {
    conv: ConvCache<f32>,
    bn: BnCache<f32>,
    act_input: Array4<f32>,
    pool: PoolCache,
}

impl ConvBlock {
    fn forward_train(&mut self, x: &Array4<f32>) -> (Array4<f32>, BlockCache) {
        let (z, conv) = self.conv.forward(x);
        let (b, bn) = self.bn.forward_train(&z);
        let (a, act_input) = self.act.forward(&b);
        let (y, pool) = MaxPool2.forward(&a);
        (
            y,
            BlockCache {
                conv,
                bn,
                act_input,
                pool,
            },
        )
    }

    fn forward_eval(&self, x: &Array4<f32>) -> (Array4<f32>, BlockCache) {
        let (z, conv) = self.conv.forward(x);
        let (b, bn) = self.bn.forward_eval(&z);
        let (a, act_input) = self.act.forward(&b);
        let (y, pool) = MaxPool2.forward(&a);
        (
            y,
            BlockCache {
                conv,
                bn,
                act_input,
                pool,
            },
        )
    }

    fn backward(&mut self, cache: &BlockCache, grad: &Array4<f32>) -> Array4<f32> {
        let g = MaxPool2.backward(&cache.pool, grad);
        let g = self.act.backward(&cache.act_input, &g);
        let g = self.bn.backward(&cache.bn, &g);
        self.conv.backward(&cache.conv, &g)
    }
}

/// Intermediates of one forward pass, consumed by [`Model::backward`].
pub struct ForwardCache {
    blocks: Vec<BlockCache>,
    block_outputs: Vec<Array4<f32>>,
    cbam: Option<(CbamCache<f32>, Array4<f32>)>,
    feature_hw: (usize, usize),
    dropout: DropoutCache<f32>,
    head: LinearCache<f32>,
}

impl ForwardCache {
    /// Output of a named feature layer, shape `(N, C, h, w)`.
    pub fn activation(&self, layer: &str, stages: &[String]) -> Option<&Array4<f32>> {
        let idx = stages.iter().position(|s| s == layer)?;
        if idx < self.block_outputs.len() {
            Some(&self.block_outputs[idx])
        } else {
            self.cbam.as_ref().map(|(_, out)| out)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    blocks: Vec<ConvBlock>,
    cbam: Option<Cbam<f32>>,
    dropout: Dropout,
    head: Linear<f32>,
}

/// Build with the default initialization stream (seed 0).
pub fn build_model(spec: &ModelSpec) -> Result<Model> {
    Model::new(spec, 0)
}

pub fn build_custom_cnn(num_classes: usize) -> Result<Model> {
    build_model(&ModelSpec::custom_cnn(num_classes))
}

/// Trainable scalar count.
pub fn count_parameters(model: &Model) -> usize {
    model.params().iter().filter(|(_, p)| p.trainable).map(|(_, p)| p.len()).sum()
}

impl Model {
    pub fn new(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let stack = spec.backbone.builder()?;
        let mut rng: ChaCha8Rng = keyed_rng(Domain::Init, seed, 0, 0);
        let mut blocks = Vec::with_capacity(stack.widths.len());
        let mut in_ch = INPUT_CHANNELS;
        for &w in &stack.widths {
            blocks.push(ConvBlock {
                conv: Conv2d::new(in_ch, w, CONV_KERNEL, &mut rng)?,
                bn: BatchNorm2d::new(w),
                act: LeakyRelu { slope: stack.slope },
            });
            in_ch = w;
        }
        let c = spec.backbone.output_channels;
        let cbam = if spec.use_cbam {
            Some(Cbam::new(c, spec.reduction_ratio, spec.spatial_kernel, &mut rng)?)
        } else {
            None
        };
        let head = Linear::new(c, spec.num_classes, &mut rng);
        let mut model = Self {
            spec: spec.clone(),
            blocks,
            cbam,
            dropout: Dropout { p: spec.dropout_p },
            head,
        };
        if spec.freeze_backbone {
            for (name, p) in model.params_mut() {
                if name.starts_with("backbone.") {
                    p.trainable = false;
                }
            }
        }
        Ok(model)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn feature_channels(&self) -> usize {
        self.spec.backbone.output_channels
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn head_parameter_count(&self) -> usize {
        self.head.params().iter().map(|(_, p)| p.len()).sum()
    }

    /// Names of the layers whose outputs are spatial feature maps, in
    /// forward order. `"backbone"` is accepted as an alias for the last block.
    pub fn feature_layers(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.blocks.len()).map(|i| format!("backbone.block{i}")).collect();
        if self.cbam.is_some() {
            names.push("cbam".into());
        }
        names
    }

    /// The CBAM output when present, otherwise the backbone output.
    pub fn default_feature_layer(&self) -> String {
        self.feature_layers().pop().unwrap()
    }

    pub fn resolve_layer(&self, layer: &str) -> Result<String> {
        let canonical = if layer == "backbone" {
            format!("backbone.block{}", self.blocks.len() - 1)
        } else {
            layer.to_string()
        };
        if self.feature_layers().contains(&canonical) {
            Ok(canonical)
        } else {
            Err(Error::UnknownLayer(layer.to_string()))
        }
    }

    fn check_input(&self, x: &Array4<f32>) -> Result<()> {
        let (n, c, h, w) = x.dim();
        if n == 0 {
            return Err(Error::shape("empty batch"));
        }
        if c != INPUT_CHANNELS {
            return Err(Error::shape(format!("model expects {INPUT_CHANNELS} input channels, got {c}")));
        }
        let min = 1usize << self.blocks.len();
        if h < min || w < min {
            return Err(Error::shape(format!(
                "input {h}×{w} too small for {} downsampling blocks (need ≥ {min})",
                self.blocks.len()
            )));
        }
        Ok(())
    }

    fn head_forward(
        &self,
        feat: Array4<f32>,
        phase: &mut Phase<'_>,
        mut cache: ForwardCache,
    ) -> (Array2<f32>, ForwardCache) {
        let (_, _, h, w) = feat.dim();
        let pooled = global_avg_pool(&feat);
        let (dropped, dropout) = self.dropout.forward(&pooled, phase);
        let (logits, head) = self.head.forward(&dropped);
        cache.feature_hw = (h, w);
        cache.dropout = dropout;
        cache.head = head;
        (logits, cache)
    }

    fn attention_forward(&self, feat: Array4<f32>, cbam: &mut Option<(CbamCache<f32>, Array4<f32>)>) -> Array4<f32> {
        match &self.cbam {
            Some(m) => {
                let (out, c) = m.forward(&feat);
                *cbam = Some((c, out.clone()));
                out
            }
            None => feat,
        }
    }

    /// Training-mode forward. Batch statistics update the running buffers;
    /// dropout masks are drawn from `rng`.
    pub fn forward_train(&mut self, x: &Array4<f32>, rng: &mut ChaCha8Rng) -> Result<(Array2<f32>, ForwardCache)> {
        self.check_input(x)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        let mut block_outputs = Vec::with_capacity(self.blocks.len());
        let mut h = x.clone();
        for b in &mut self.blocks {
            let (y, c) = b.forward_train(&h);
            blocks.push(c);
            block_outputs.push(y.clone());
            h = y;
        }
        let mut cbam = None;
        let feat = self.attention_forward(h, &mut cbam);
        let cache = ForwardCache::partial(blocks, block_outputs, cbam);
        Ok(self.head_forward(feat, &mut Phase::Train(rng), cache))
    }

    /// Eval-mode forward: running statistics, no dropout.
    pub fn forward_eval(&self, x: &Array4<f32>) -> Result<(Array2<f32>, ForwardCache)> {
        self.check_input(x)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        let mut block_outputs = Vec::with_capacity(self.blocks.len());
        let mut h = x.clone();
        for b in &self.blocks {
            let (y, c) = b.forward_eval(&h);
            blocks.push(c);
            block_outputs.push(y.clone());
            h = y;
        }
        let mut cbam = None;
        let feat = self.attention_forward(h, &mut cbam);
        let cache = ForwardCache::partial(blocks, block_outputs, cbam);
        Ok(self.head_forward(feat, &mut Phase::Eval, cache))
    }

    pub fn predict_logits(&self, x: &Array4<f32>) -> Result<Array2<f32>> {
        Ok(self.forward_eval(x)?.0)
    }

    /// Accumulate parameter gradients for `grad_logits`.
    pub fn backward(&mut self, cache: &ForwardCache, grad_logits: &Array2<f32>) {
        self.backward_to(cache, grad_logits, None);
    }

    /// Backpropagate, stopping at the named feature layer and returning the
    /// gradient with respect to its output. With no layer, runs to the input.
    pub(crate) fn backward_to(
        &mut self,
        cache: &ForwardCache,
        grad_logits: &Array2<f32>,
        stop_at: Option<&str>,
    ) -> Option<Array4<f32>> {
        let stages = self.feature_layers();
        let g = self.head.backward(&cache.head, grad_logits);
        let g = self.dropout.backward(&cache.dropout, &g);
        let (h, w) = cache.feature_hw;
        let mut g = global_avg_pool_backward(&g, h, w);
        let mut stage = stages.len();
        if let (Some(m), Some((cc, _))) = (self.cbam.as_mut(), cache.cbam.as_ref()) {
            stage -= 1;
            if stop_at == Some(stages[stage].as_str()) {
                return Some(g);
            }
            g = m.backward(cc, &g);
        }
        for (i, (b, bc)) in self.blocks.iter_mut().zip(&cache.blocks).enumerate().rev() {
            if stop_at == Some(stages[i].as_str()) {
                return Some(g);
            }
            g = b.backward(bc, &g);
        }
        None
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Every tensor in deterministic manifest order, including buffers.
    pub fn params(&self) -> Vec<(String, &Param<f32>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            for (n, p) in b.conv.params() {
                out.push((format!("backbone.block{i}.conv.{n}"), p));
            }
            for (n, p) in b.bn.params() {
                out.push((format!("backbone.block{i}.bn.{n}"), p));
            }
        }
        if let Some(m) = &self.cbam {
            for (n, p) in m.params() {
                out.push((format!("cbam.{n}"), p));
            }
        }
        for (n, p) in self.head.params() {
            out.push((format!("head.fc.{n}"), p));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Param<f32>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (n, p) in b.conv.params_mut() {
                out.push((format!("backbone.block{i}.conv.{n}"), p));
            }
            for (n, p) in b.bn.params_mut() {
                out.push((format!("backbone.block{i}.bn.{n}"), p));
            }
        }
        if let Some(m) = &mut self.cbam {
            for (n, p) in m.params_mut() {
                out.push((format!("cbam.{n}"), p));
            }
        }
        for (n, p) in self.head.params_mut() {
            out.push((format!("head.fc.{n}"), p));
        }
        out
    }

    /// Mutable access to the head, used to construct degenerate models.
    pub fn head_mut(&mut self) -> &mut Linear<f32> {
        &mut self.head
    }
}

impl ForwardCache {
    fn partial(
        blocks: Vec<BlockCache>,
        block_outputs: Vec<Array4<f32>>,
        cbam: Option<(CbamCache<f32>, Array4<f32>)>,
    ) -> Self {
        Self {
            blocks,
            block_outputs,
            cbam,
            feature_hw: (0, 0),
            dropout: DropoutCache::identity(),
            head: LinearCache::empty(),
        }
    }
}
