//! Miniature query-based mask-classification segmenter.
//!
//! The model keeps the three-part decomposition of Mask2Former-style
//! networks:
//!
//! * **backbone**: a stride-1 stem convolution followed by `backbone_depth`
//!   stride-2 convolutions, producing features `C_f x H' x W'`;
//! * **pixel decoder**: a 1x1 projection of those features to per-pixel
//!   embeddings `d x H' x W'`;
//! * **transformer decoder**: `Q` learned queries cross-attend to the
//!   flattened features, pass through a residual feed-forward layer, and feed
//!   a class head (`C + 1` logits, the last one being "no object") and a mask
//!   embedding head. Mask logits are inner products of mask embeddings with
//!   pixel embeddings.
//!
//! Both decoders only see backbone-shaped features, so a model can decode
//! features produced by any other model sharing its configuration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result, TensorError};
use crate::params::{BoundParams, ParamSet};
use crate::tensor::Tensor;

/// Label value excluded from training and evaluation.
pub const IGNORE: u8 = 255;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SegModelConfig {
    pub num_classes: usize,
    pub num_queries: usize,
    pub feature_channels: usize,
    pub backbone_depth: usize,
    pub embed_dim: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for SegModelConfig {
    fn default() -> Self {
        SegModelConfig {
            num_classes: 6,
            num_queries: 8,
            feature_channels: 16,
            backbone_depth: 2,
            embed_dim: 16,
            height: 32,
            width: 32,
        }
    }
}

impl SegModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes >= IGNORE as usize {
            return Err(Error::Config(format!(
                "num_classes must be in [2, {}), got {}",
                IGNORE, self.num_classes
            )));
        }
        if self.num_queries == 0 || self.feature_channels == 0 || self.embed_dim == 0 {
            return Err(Error::Config(
                "num_queries, feature_channels and embed_dim must be positive".into(),
            ));
        }
        let factor = 1usize << self.backbone_depth;
        if self.height == 0 || self.width == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(Error::Config(format!(
                "input {}x{} is not divisible by 2^{}",
                self.height, self.width, self.backbone_depth
            )));
        }
        Ok(())
    }

    /// Feature-map height `H'`.
    pub fn feat_height(&self) -> usize {
        self.height >> self.backbone_depth
    }

    /// Feature-map width `W'`.
    pub fn feat_width(&self) -> usize {
        self.width >> self.backbone_depth
    }

    pub fn feat_pixels(&self) -> usize {
        self.feat_height() * self.feat_width()
    }

    /// Class-head width including the "no object" column.
    pub fn cls_width(&self) -> usize {
        self.num_classes + 1
    }

    pub fn with_queries(self, num_queries: usize) -> Self {
        SegModelConfig { num_queries, ..self }
    }

    /// Same architecture apart from the query count.
    pub fn compatible_backbone(&self, other: &SegModelConfig) -> bool {
        self.with_queries(0) == other.with_queries(0)
    }

    fn ffn_hidden(&self) -> usize {
        2 * self.embed_dim
    }

    /// Names and shapes of every parameter, in storage order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let (cf, d) = (self.feature_channels, self.embed_dim);
        let mut layout = vec![
            ("backbone.stem.weight".to_string(), vec![cf, 3, 3, 3]),
            ("backbone.stem.bias".to_string(), vec![cf]),
        ];
        for i in 0..self.backbone_depth {
            layout.push((format!("backbone.down{i}.weight"), vec![cf, cf, 3, 3]));
            layout.push((format!("backbone.down{i}.bias"), vec![cf]));
        }
        let h = self.ffn_hidden();
        layout.extend([
            ("pixel_decoder.proj.weight".to_string(), vec![cf, d]),
            ("pixel_decoder.proj.bias".to_string(), vec![d]),
            ("decoder.queries".to_string(), vec![self.num_queries, d]),
            ("decoder.q_proj".to_string(), vec![d, d]),
            ("decoder.k_proj".to_string(), vec![cf, d]),
            ("decoder.v_proj".to_string(), vec![cf, d]),
            ("decoder.ffn1.weight".to_string(), vec![d, h]),
            ("decoder.ffn1.bias".to_string(), vec![h]),
            ("decoder.ffn2.weight".to_string(), vec![h, d]),
            ("decoder.ffn2.bias".to_string(), vec![d]),
            ("decoder.class_head.weight".to_string(), vec![d, self.cls_width()]),
            ("decoder.class_head.bias".to_string(), vec![self.cls_width()]),
            ("decoder.mask_embed.weight".to_string(), vec![d, d]),
            ("decoder.mask_embed.bias".to_string(), vec![d]),
        ]);
        layout
    }
}

/// Per-pixel class ids; `IGNORE` marks unlabeled pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub ids: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, ids: Vec<u8>) -> Result<Self> {
        if ids.len() != height * width {
            return Err(Error::Contract(format!(
                "label map {height}x{width} needs {} ids, got {}",
                height * width,
                ids.len()
            )));
        }
        Ok(LabelMap { height, width, ids })
    }

    pub fn filled(height: usize, width: usize, id: u8) -> Self {
        LabelMap {
            height,
            width,
            ids: vec![id; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.ids[y * self.width + x]
    }

    /// Checks that every non-ignore id is below `num_classes`.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self.ids.iter().find(|&&id| id != IGNORE && id as usize >= num_classes) {
            Some(id) => Err(Error::Contract(format!(
                "label id {id} out of range for {num_classes} classes"
            ))),
            None => Ok(()),
        }
    }
}

/// Class logits `Q x (C+1)` and mask logits `Q x H' x W'`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitPair {
    pub cls: Tensor,
    pub mask: Tensor,
}

impl LogitPair {
    pub fn num_queries(&self) -> usize {
        self.cls.shape()[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegModel {
    pub config: SegModelConfig,
    pub params: ParamSet,
}

impl SegModel {
    /// Seeded initialization: fan-in scaled uniform weights, zero biases,
    /// unit-normal queries scaled by `1/sqrt(d)`.
    pub fn init(config: SegModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (name, shape) in config.param_layout() {
            let numel: usize = shape.iter().product();
            let data: Vec<f64> = if name.ends_with("bias") {
                vec![0.0; numel]
            } else if name == "decoder.queries" {
                let scale = 1.0 / (config.embed_dim as f64).sqrt();
                (0..numel)
                    .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
                    .collect()
            } else {
                let fan_in: usize = if shape.len() == 4 {
                    shape[1] * 9
                } else {
                    shape[0]
                };
                // convolutions feed ReLUs; linear layers keep unit gain
                let gain = if shape.len() == 4 { 6.0 } else { 3.0 };
                let bound = (gain / fan_in as f64).sqrt();
                (0..numel).map(|_| rng.random_range(-bound..bound)).collect()
            };
            params.push(name, Tensor::new(shape, data)?);
        }
        Ok(SegModel { config, params })
    }

    /// Builds a model from explicit parameters, checking names and shapes.
    pub fn from_params(config: SegModelConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let layout = config.param_layout();
        let matches = layout.len() == params.len()
            && layout
                .iter()
                .zip(params.iter())
                .all(|((n, s), (pn, pt))| n == pn && s.as_slice() == pt.shape());
        if !matches {
            return Err(Error::Contract(
                "parameter set does not match the model configuration".into(),
            ));
        }
        if let Some((name, _)) = params.iter().find(|(_, t)| !t.is_finite()) {
            return Err(Error::Contract(format!("parameter `{name}` is not finite")));
        }
        Ok(SegModel { config, params })
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    /// Replaces every `backbone.` parameter with the one from `source`.
    pub fn with_backbone_of(mut self, source: &SegModel) -> Result<Self> {
        if !self.config.compatible_backbone(&source.config) {
            return Err(Error::Contract(format!(
                "backbone of {:?} does not fit {:?}",
                source.config, self.config
            )));
        }
        for (name, t) in self.params.iter_mut() {
            if name.starts_with("backbone.") {
                *t = source.params.get(name).expect("same backbone layout").clone();
            }
        }
        Ok(self)
    }

    fn check_image(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        if shape != [3, c.height, c.width] {
            return Err(TensorError::Shape {
                op: "backbone",
                detail: format!("expected image [3, {}, {}], got {shape:?}", c.height, c.width),
            }
            .into());
        }
        Ok(())
    }

    fn check_features(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        if shape != [c.feature_channels, c.feat_height(), c.feat_width()] {
            return Err(TensorError::Shape {
                op: "decode",
                detail: format!(
                    "expected features [{}, {}, {}], got {shape:?}",
                    c.feature_channels,
                    c.feat_height(),
                    c.feat_width()
                ),
            }
            .into());
        }
        Ok(())
    }

    /// Backbone on the tape: `3 x H x W -> C_f x H' x W'`.
    pub fn backbone_on<'t>(&self, p: &BoundParams<'t>, image: Var<'t>) -> Result<Var<'t>> {
        self.check_image(&image.shape())?;
        let mut x = image
            .conv2d(p.var("backbone.stem.weight"), Some(p.var("backbone.stem.bias")), 1)?
            .relu()?;
        for i in 0..self.config.backbone_depth {
            x = x
                .conv2d(
                    p.var(&format!("backbone.down{i}.weight")),
                    Some(p.var(&format!("backbone.down{i}.bias"))),
                    2,
                )?
                .relu()?;
        }
        Ok(x)
    }

    /// Pixel and transformer decoders on the tape. Returns `(cls, mask)`.
    pub fn decode_on<'t>(&self, p: &BoundParams<'t>, features: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        self.check_features(&features.shape())?;
        let c = &self.config;
        let (n, d, q) = (c.feat_pixels(), c.embed_dim, c.num_queries);
        let linear = |x: Var<'t>, w: &str, b: &str, rows: usize, cols: usize| -> Result<Var<'t>> {
            Ok(x.matmul(p.var(w))?.add(p.var(b).broadcast(&[rows, cols])?)?)
        };
        // pixels x channels
        let flat = features.reshape(&[c.feature_channels, n])?.transpose()?;
        let pixel_embed = linear(flat, "pixel_decoder.proj.weight", "pixel_decoder.proj.bias", n, d)?;

        let queries = p.var("decoder.queries");
        let qh = queries.matmul(p.var("decoder.q_proj"))?;
        let keys = flat.matmul(p.var("decoder.k_proj"))?;
        let values = flat.matmul(p.var("decoder.v_proj"))?;
        let attn = qh
            .matmul(keys.transpose()?)?
            .scale(1.0 / (d as f64).sqrt())?
            .softmax(1)?;
        let h = queries.add(attn.matmul(values)?)?;
        let hidden = linear(h, "decoder.ffn1.weight", "decoder.ffn1.bias", q, c.ffn_hidden())?.relu()?;
        let h = h.add(linear(hidden, "decoder.ffn2.weight", "decoder.ffn2.bias", q, d)?)?;

        let cls = linear(h, "decoder.class_head.weight", "decoder.class_head.bias", q, c.cls_width())?;
        let mask_embed = linear(h, "decoder.mask_embed.weight", "decoder.mask_embed.bias", q, d)?;
        let mask = mask_embed
            .matmul(pixel_embed.transpose()?)?
            .reshape(&[q, c.feat_height(), c.feat_width()])?;
        Ok((cls, mask))
    }

    /// Full forward pass on the tape.
    pub fn forward_on<'t>(&self, p: &BoundParams<'t>, image: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let features = self.backbone_on(p, image)?;
        self.decode_on(p, features)
    }

    /// Gradient-free backbone features.
    pub fn backbone_forward(&self, image: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.params.on_tape(&tape, false);
        Ok(self.backbone_on(&p, tape.constant(image.clone()))?.value())
    }

    /// Gradient-free decoding of (possibly foreign) backbone features.
    pub fn decode(&self, features: &Tensor) -> Result<LogitPair> {
        let tape = Tape::new();
        let p = self.params.on_tape(&tape, false);
        let (cls, mask) = self.decode_on(&p, tape.constant(features.clone()))?;
        Ok(LogitPair {
            cls: cls.value(),
            mask: mask.value(),
        })
    }

    /// Gradient-free end-to-end logits.
    pub fn predict(&self, image: &Tensor) -> Result<LogitPair> {
        let tape = Tape::new();
        let p = self.params.on_tape(&tape, false);
        let (cls, mask) = self.forward_on(&p, tape.constant(image.clone()))?;
        Ok(LogitPair {
            cls: cls.value(),
            mask: mask.value(),
        })
    }

    /// Predicted label map at the input resolution.
    pub fn segment(&self, image: &Tensor) -> Result<LabelMap> {
        let logits = self.predict(image)?;
        semantic_inference(&logits, self.config.height, self.config.width)
    }
}

/// Per-class, per-feature-pixel scores
/// `sum_q softmax(cls_q)[c] * sigmoid(mask_q[p])` for the real classes,
/// laid out `C x H'W'`.
pub fn class_scores(logits: &LogitPair) -> Result<Tensor> {
    let (q, width) = match *logits.cls.shape() {
        [q, w] if w >= 3 => (q, w),
        _ => {
            return Err(Error::Contract(format!(
                "class logits must be Q x (C+1), got {:?}",
                logits.cls.shape()
            )))
        }
    };
    let (mh, mw) = match *logits.mask.shape() {
        [mq, h, w] if mq == q => (h, w),
        _ => {
            return Err(Error::Contract(format!(
                "mask logits {:?} do not match {q} queries",
                logits.mask.shape()
            )))
        }
    };
    let c = width - 1;
    let probs = crate::autodiff::softmax_buf(logits.cls.shape(), logits.cls.data(), 1);
    let sig: Vec<f64> = logits
        .mask
        .data()
        .iter()
        .map(|&m| crate::autodiff::sigmoid_scalar(m))
        .collect();
    let n = mh * mw;
    let mut scores = vec![0.0; c * n];
    for qi in 0..q {
        let mrow = &sig[qi * n..(qi + 1) * n];
        for class in 0..c {
            let pc = probs[qi * width + class];
            for (s, &m) in scores[class * n..(class + 1) * n].iter_mut().zip(mrow) {
                *s += pc * m;
            }
        }
    }
    Ok(Tensor::new(vec![c, mh, mw], scores)?)
}

/// Semantic inference: per-pixel argmax of [`class_scores`] over real
/// classes (ties go to the smaller id), nearest-neighbour upsampled to
/// `out_h x out_w`.
pub fn semantic_inference(logits: &LogitPair, out_h: usize, out_w: usize) -> Result<LabelMap> {
    let scores = class_scores(logits)?;
    let (c, mh, mw) = (scores.shape()[0], scores.shape()[1], scores.shape()[2]);
    let n = mh * mw;
    let s = scores.data();
    let small: Vec<u8> = (0..n)
        .map(|pix| {
            let mut best = 0;
            for class in 1..c {
                if s[class * n + pix] > s[best * n + pix] {
                    best = class;
                }
            }
            best as u8
        })
        .collect();
    let ids = (0..out_h * out_w)
        .map(|i| {
            let (y, x) = (i / out_w, i % out_w);
            small[(y * mh / out_h) * mw + x * mw / out_w]
        })
        .collect();
    LabelMap::new(out_h, out_w, ids)
}
