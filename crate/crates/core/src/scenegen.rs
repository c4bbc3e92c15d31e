//! Procedural multi-domain street scenes with pixel-accurate labels.
//!
//! A scene is a vertical stack of background stripes (sky, vegetation band,
//! road) with dynamic-class objects composited on top. Every class has its
//! own colour, noise level and texture; every domain perturbs the palette and
//! applies a global photometric transform, which is what separates the
//! domains from each other.
//!
//! Generation is a pure function of `(spec, n, seed)`: scene `i` draws from
//! its own ChaCha stream, so scenes can be rendered in parallel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segmodel::LabelMap;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Texture {
    Flat,
    Stripes { period: usize, horizontal: bool },
    Checker { period: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStyle {
    pub name: String,
    pub color: [f64; 3],
    pub noise: f64,
    pub texture: Texture,
    pub texture_amplitude: f64,
    /// Width / height of rendered objects of this class.
    pub aspect: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub sky_class: u8,
    pub vegetation_class: u8,
    pub road_class: u8,
    /// Horizon row as a fraction of the height.
    pub horizon: [f64; 2],
    /// Vegetation band thickness as a fraction of the height.
    pub vegetation: [f64; 2],
    /// Inclusive range of dynamic objects per scene.
    pub objects: [usize; 2],
    /// Range of object size (square root of area) in pixels.
    pub object_size: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: String,
    pub height: usize,
    pub width: usize,
    pub palette: Vec<ClassStyle>,
    pub layout: Layout,
    /// Sampling prior over classes for dynamic objects.
    pub class_freq: Vec<f64>,
    /// Additive per-channel colour cast.
    pub color_shift: [f64; 3],
    /// Contrast multiplier around mid-grey.
    pub contrast: f64,
    pub is_target: bool,
}

impl DomainSpec {
    pub fn num_classes(&self) -> usize {
        self.palette.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.num_classes();
        if c < 2 || self.class_freq.len() != c {
            return Err(Error::Config(format!(
                "domain `{}`: palette has {c} classes but class_freq has {}",
                self.domain_id,
                self.class_freq.len()
            )));
        }
        if self.class_freq.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::Config(format!("domain `{}`: negative class frequency", self.domain_id)));
        }
        let total: f64 = self.class_freq.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "domain `{}`: class frequencies sum to {total}",
                self.domain_id
            )));
        }
        let l = &self.layout;
        for id in [l.sky_class, l.vegetation_class, l.road_class] {
            if id as usize >= c {
                return Err(Error::Config(format!("domain `{}`: background class {id} out of range", self.domain_id)));
            }
        }
        if l.objects[0] > l.objects[1] || l.object_size[0] > l.object_size[1] || l.horizon[0] > l.horizon[1] || l.vegetation[0] > l.vegetation[1] {
            return Err(Error::Config(format!("domain `{}`: inverted layout range", self.domain_id)));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config(format!("domain `{}`: empty image size", self.domain_id)));
        }
        Ok(())
    }

    /// Classes that dynamic objects can be drawn from.
    pub fn present_classes(&self) -> Vec<u8> {
        (0..self.num_classes() as u8)
            .filter(|&c| self.class_freq[c as usize] > 0.0)
            .collect()
    }

    /// Mean-colour offset this domain's photometric transform applies to
    /// mid-grey.
    pub fn shift_magnitude(&self) -> f64 {
        self.color_shift.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// `3 x H x W`, values in `[0, 1]`, exactly representable as `f32`.
    pub image: Tensor,
    pub labels: Option<LabelMap>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub domain_id: String,
    pub num_classes: usize,
    pub scenes: Vec<Scene>,
    pub labeled: bool,
}

impl DomainDataset {
    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    /// Copy with all labels removed.
    pub fn without_labels(&self) -> DomainDataset {
        DomainDataset {
            domain_id: self.domain_id.clone(),
            num_classes: self.num_classes,
            scenes: self
                .scenes
                .iter()
                .map(|s| Scene {
                    image: s.image.clone(),
                    labels: None,
                })
                .collect(),
            labeled: false,
        }
    }

    pub fn images(&self) -> impl Iterator<Item = &Tensor> {
        self.scenes.iter().map(|s| &s.image)
    }

    /// `(height, width)` of the first image.
    pub fn resolution(&self) -> Option<(usize, usize)> {
        self.scenes.first().map(|s| (s.image.shape()[1], s.image.shape()[2]))
    }
}

/// Unlabeled generated image. The rendering ground truth is kept for test
/// diagnostics only and is dropped when the image joins a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedImage {
    pub image: Tensor,
    hidden_labels: LabelMap,
}

impl AugmentedImage {
    #[doc(hidden)]
    pub fn diagnostic_labels(&self) -> &LabelMap {
        &self.hidden_labels
    }
}

fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Draws the label map: background stripes, then objects.
struct Canvas {
    h: usize,
    w: usize,
    labels: Vec<u8>,
    horizon: usize,
}

impl Canvas {
    fn background(spec: &DomainSpec, rng: &mut ChaCha8Rng) -> Canvas {
        let (h, w) = (spec.height, spec.width);
        let l = &spec.layout;
        let horizon = ((rng.random_range(l.horizon[0]..=l.horizon[1]) * h as f64) as usize).min(h - 1);
        let band = (rng.random_range(l.vegetation[0]..=l.vegetation[1]) * h as f64) as usize;
        let mut labels = vec![l.road_class; h * w];
        for y in 0..h {
            let id = if y < horizon {
                l.sky_class
            } else if y < horizon + band {
                l.vegetation_class
            } else {
                l.road_class
            };
            labels[y * w..(y + 1) * w].fill(id);
        }
        Canvas { h, w, labels, horizon }
    }

    /// Paints one object; returns the number of pixels written.
    fn object(&mut self, class: u8, size: f64, aspect: f64, rng: &mut ChaCha8Rng) -> usize {
        let ow = ((size * aspect.sqrt()).round() as usize).clamp(1, self.w);
        let oh = ((size / aspect.sqrt()).round() as usize).clamp(1, self.h);
        // objects stand on the ground: bottom edge below the horizon
        let lowest_bottom = (self.horizon + 1).min(self.h);
        let bottom = rng.random_range(lowest_bottom..=self.h);
        let top = bottom.saturating_sub(oh);
        let left = rng.random_range(0..=self.w - ow);
        let mut painted = 0;
        for y in top..bottom {
            for x in left..left + ow {
                self.labels[y * self.w + x] = class;
                painted += 1;
            }
        }
        painted
    }
}

fn pattern(texture: Texture, y: usize, x: usize) -> f64 {
    match texture {
        Texture::Flat => 0.0,
        Texture::Stripes { period, horizontal } => {
            let coord = if horizontal { y } else { x };
            if (coord / period.max(1)) % 2 == 0 { 1.0 } else { -1.0 }
        }
        Texture::Checker { period } => {
            let p = period.max(1);
            if (y / p + x / p) % 2 == 0 { 1.0 } else { -1.0 }
        }
    }
}

fn render(spec: &DomainSpec, labels: &[u8], rng: &mut ChaCha8Rng) -> Tensor {
    let (h, w) = (spec.height, spec.width);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut data = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let style = &spec.palette[labels[y * w + x] as usize];
            let tex = style.texture_amplitude * pattern(style.texture, y, x);
            for ch in 0..3 {
                let raw = style.color[ch] + tex + style.noise * unit.sample(rng);
                let v = (raw - 0.5) * spec.contrast + 0.5 + spec.color_shift[ch];
                data[ch * h * w + y * w + x] = v.clamp(0.0, 1.0) as f32 as f64;
            }
        }
    }
    Tensor::new(vec![3, h, w], data).expect("image shape")
}

fn object_size(spec: &DomainSpec, rng: &mut ChaCha8Rng) -> f64 {
    let [lo, hi] = spec.layout.object_size;
    rng.random_range(lo..=hi)
}

fn generate_scene(spec: &DomainSpec, picker: Option<&WeightedIndex<f64>>, rng: &mut ChaCha8Rng) -> Scene {
    let mut canvas = Canvas::background(spec, rng);
    if let Some(picker) = picker {
        let [lo, hi] = spec.layout.objects;
        let count = rng.random_range(lo..=hi);
        for _ in 0..count {
            let class = picker.sample(rng) as u8;
            let size = object_size(spec, rng);
            canvas.object(class, size, spec.palette[class as usize].aspect, rng);
        }
    }
    let image = render(spec, &canvas.labels, rng);
    Scene {
        image,
        labels: Some(LabelMap {
            height: canvas.h,
            width: canvas.w,
            ids: canvas.labels,
        }),
    }
}

/// Renders `n` labeled scenes of a domain.
pub fn make_domain(spec: &DomainSpec, n: usize, seed: u64) -> Result<DomainDataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Contract("a domain dataset needs at least one scene".into()));
    }
    let picker = WeightedIndex::new(&spec.class_freq).ok();
    let scenes = (0..n)
        .into_par_iter()
        .map(|i| generate_scene(spec, picker.as_ref(), &mut scene_rng(seed, i as u64)))
        .collect();
    Ok(DomainDataset {
        domain_id: spec.domain_id.clone(),
        num_classes: spec.num_classes(),
        scenes,
        labeled: true,
    })
}

/// Smallest fraction of an augmented image drawn by the requested class's
/// renderer.
pub const AUGMENT_MIN_FRACTION: f64 = 0.25;

/// Generates `count` unlabeled images that prominently feature `class`,
/// rendered in the style of `spec`. Context objects follow
/// `spec.class_freq`; the requested class is composited last so it stays
/// visible.
pub fn augment_for_class(class: u8, count: usize, spec: &DomainSpec, seed: u64) -> Result<Vec<AugmentedImage>> {
    spec.validate()?;
    if class as usize >= spec.num_classes() {
        return Err(Error::Contract(format!(
            "class {class} out of range for {} classes",
            spec.num_classes()
        )));
    }
    let picker = WeightedIndex::new(&spec.class_freq).ok();
    let total = spec.height * spec.width;
    let images = (0..count)
        .into_par_iter()
        .map(|i| {
            let rng = &mut scene_rng(seed ^ 0xA11C_E5ED, ((class as u64) << 32) | i as u64);
            let mut canvas = Canvas::background(spec, rng);
            if let Some(picker) = picker.as_ref() {
                let context = rng.random_range(0..=spec.layout.objects[0].max(1));
                for _ in 0..context {
                    let c = picker.sample(rng) as u8;
                    let size = object_size(spec, rng);
                    canvas.object(c, size, spec.palette[c as usize].aspect, rng);
                }
            }
            let aspect = spec.palette[class as usize].aspect;
            let mut guard = 0;
            while canvas.labels.iter().filter(|&&id| id == class).count() < (AUGMENT_MIN_FRACTION * total as f64).ceil() as usize
                && guard < 64
            {
                let size = object_size(spec, rng) * 1.5;
                canvas.object(class, size, aspect, rng);
                guard += 1;
            }
            let image = render(spec, &canvas.labels, rng);
            AugmentedImage {
                image,
                hidden_labels: LabelMap {
                    height: canvas.h,
                    width: canvas.w,
                    ids: canvas.labels,
                },
            }
        })
        .collect();
    Ok(images)
}

/// Default class styles for the six-class toy street world:
/// road, sky, vegetation, car, person, truck.
pub fn street_palette() -> Vec<ClassStyle> {
    let style = |name: &str, color: [f64; 3], noise: f64, texture: Texture, amp: f64, aspect: f64| ClassStyle {
        name: name.to_string(),
        color,
        noise,
        texture,
        texture_amplitude: amp,
        aspect,
    };
    vec![
        style("road", [0.42, 0.42, 0.45], 0.04, Texture::Flat, 0.0, 1.0),
        style("sky", [0.55, 0.72, 0.92], 0.02, Texture::Flat, 0.0, 1.0),
        style("vegetation", [0.22, 0.55, 0.20], 0.10, Texture::Checker { period: 1 }, 0.05, 1.0),
        style("car", [0.80, 0.18, 0.16], 0.05, Texture::Stripes { period: 2, horizontal: true }, 0.08, 1.8),
        style("person", [0.92, 0.76, 0.30], 0.05, Texture::Stripes { period: 2, horizontal: false }, 0.08, 0.45),
        style("truck", [0.22, 0.30, 0.82], 0.05, Texture::Checker { period: 2 }, 0.08, 1.4),
    ]
}

/// Deterministic per-domain palette perturbation of up to `jitter` per
/// channel.
pub fn jitter_palette(palette: &[ClassStyle], jitter: f64, seed: u64) -> Vec<ClassStyle> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    palette
        .iter()
        .map(|s| {
            let mut s = s.clone();
            for c in s.color.iter_mut() {
                *c = (*c + rng.random_range(-jitter..=jitter)).clamp(0.0, 1.0);
            }
            s
        })
        .collect()
}

impl DomainSpec {
    /// A toy street domain with the default palette.
    pub fn street(domain_id: &str, size: usize, class_freq: Vec<f64>) -> DomainSpec {
        DomainSpec {
            domain_id: domain_id.to_string(),
            height: size,
            width: size,
            palette: street_palette(),
            layout: Layout {
                sky_class: 1,
                vegetation_class: 2,
                road_class: 0,
                horizon: [0.30, 0.45],
                vegetation: [0.05, 0.15],
                objects: [2, 4],
                object_size: [6.0, 11.0],
            },
            class_freq,
            color_shift: [0.0; 3],
            contrast: 1.0,
            is_target: false,
        }
    }
}
