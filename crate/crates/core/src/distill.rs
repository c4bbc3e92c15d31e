//! Label-free distillation of several frozen client models into one global
//! model with `K * Q` queries.
//!
//! For every image the clients' backbone features are averaged, each client
//! decodes the fused features, and the per-query class and mask logits of all
//! clients are stacked into `K * Q` teacher rows. Student query `i` is
//! trained toward teacher row `i`: a temperature-softened KL term on the class
//! logits and a BCE + Dice term on the mask probabilities.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{concat, Var};
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::BoundParams;
use crate::scenegen::DomainDataset;
use crate::segmodel::{LogitPair, SegModel, SegModelConfig};
use crate::tensor::Tensor;
use crate::training::{batch_gradients, BatchSampler, StepRecord};

/// Smoothing constant of the distillation Dice term.
pub const DISTILL_DICE_SMOOTH: f64 = 1.0;

/// Dice denominator: `sum s + sum t` (the form used for supervised
/// training) or `sum s^2 + sum t^2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiceDenominator {
    Linear,
    Squared,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub temperature: f64,
    pub lambda_cls: f64,
    pub lambda_mask: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub fusion_enabled: bool,
    pub use_bce: bool,
    pub use_dice: bool,
    /// Include the no-object column in the class distributions.
    pub include_background: bool,
    pub dice_denominator: DiceDenominator,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            temperature: 1.0,
            lambda_cls: 1.0,
            lambda_mask: 1.0,
            iterations: 1000,
            batch_size: 2,
            optimizer: AdamWConfig::default(),
            fusion_enabled: true,
            use_bce: true,
            use_dice: true,
            include_background: true,
            dice_denominator: DiceDenominator::Linear,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(self.lambda_cls >= 0.0) || !(self.lambda_mask >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }

    fn is_constant_objective(&self) -> bool {
        self.lambda_cls == 0.0 && (self.lambda_mask == 0.0 || !(self.use_bce || self.use_dice))
    }
}

/// Concatenated teacher logits for one image; rows `[k*Q, (k+1)*Q)` come
/// from client `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherBundle {
    pub cls: Tensor,
    pub mask: Tensor,
    pub queries_per_client: usize,
    pub clients: usize,
}

/// Elementwise mean of equally shaped feature maps. The running-mean
/// update returns identical inputs bit for bit.
pub fn fuse_features(features: &[Tensor]) -> Result<Tensor> {
    let first = features
        .first()
        .ok_or_else(|| Error::Contract("no features to fuse".into()))?;
    let mut mean = first.clone();
    for (i, f) in features.iter().enumerate().skip(1) {
        if f.shape() != first.shape() {
            return Err(Error::Contract(format!(
                "cannot fuse features of shape {:?} with {:?}",
                f.shape(),
                first.shape()
            )));
        }
        let w = 1.0 / (i + 1) as f64;
        for (m, &v) in mean.data_mut().iter_mut().zip(f.data()) {
            *m += (v - *m) * w;
        }
    }
    Ok(mean)
}

fn check_clients(clients: &[SegModel]) -> Result<&SegModelConfig> {
    let first = &clients
        .first()
        .ok_or_else(|| Error::Contract("distillation needs at least one client".into()))?
        .config;
    if let Some(other) = clients.iter().find(|c| c.config != *first) {
        return Err(Error::Contract(format!(
            "client configurations differ: {first:?} vs {:?}",
            other.config
        )));
    }
    Ok(first)
}

/// Teacher rows for one image. Teachers are evaluated without gradient
/// tracking.
pub fn teacher_logits(clients: &[SegModel], image: &Tensor, fusion_enabled: bool) -> Result<TeacherBundle> {
    let cfg = check_clients(clients)?;
    let features: Vec<Tensor> = clients
        .iter()
        .map(|c| c.backbone_forward(image))
        .collect::<Result<_>>()?;
    let decoded: Vec<LogitPair> = if fusion_enabled {
        let fused = fuse_features(&features)?;
        clients.iter().map(|c| c.decode(&fused)).collect::<Result<_>>()?
    } else {
        clients
            .iter()
            .zip(&features)
            .map(|(c, f)| c.decode(f))
            .collect::<Result<_>>()?
    };
    let stack = |parts: Vec<&Tensor>| -> Result<Tensor> {
        let mut shape = parts[0].shape().to_vec();
        shape[0] *= parts.len();
        let data = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
        Ok(Tensor::new(shape, data)?)
    };
    Ok(TeacherBundle {
        cls: stack(decoded.iter().map(|d| &d.cls).collect())?,
        mask: stack(decoded.iter().map(|d| &d.mask).collect())?,
        queries_per_client: cfg.num_queries,
        clients: clients.len(),
    })
}

/// Tape version of [`teacher_logits`] for callers that bind the client
/// parameters themselves. Returns `(cls, mask)` stacked over clients.
pub fn teacher_logits_on<'t>(
    clients: &[(&SegModel, &BoundParams<'t>)],
    image: Var<'t>,
    fusion_enabled: bool,
) -> Result<(Var<'t>, Var<'t>)> {
    let features: Vec<Var<'t>> = clients
        .iter()
        .map(|(m, p)| m.backbone_on(p, image))
        .collect::<Result<_>>()?;
    let decoded: Vec<(Var<'t>, Var<'t>)> = if fusion_enabled {
        let mut fused = features[0];
        for (i, f) in features.iter().enumerate().skip(1) {
            fused = fused.add(f.sub(fused)?.scale(1.0 / (i + 1) as f64)?)?;
        }
        clients.iter().map(|(m, p)| m.decode_on(p, fused)).collect::<Result<_>>()?
    } else {
        clients
            .iter()
            .zip(&features)
            .map(|((m, p), f)| m.decode_on(p, *f))
            .collect::<Result<_>>()?
    };
    let cls: Vec<Var<'t>> = decoded.iter().map(|d| d.0).collect();
    let mask: Vec<Var<'t>> = decoded.iter().map(|d| d.1).collect();
    Ok((concat(&cls, 0)?, concat(&mask, 0)?))
}

fn drop_background<'t>(logits: Var<'t>) -> Result<Var<'t>> {
    let width = logits.shape()[1];
    let keep = Tensor::from_fn(&[width, width - 1], |i| {
        let (r, c) = (i / (width - 1), i % (width - 1));
        if r == c { 1.0 } else { 0.0 }
    });
    Ok(logits.matmul(logits.tape().constant(keep))?)
}

/// `KL(softmax(teacher / tau) || softmax(student / tau))`, averaged over
/// rows. The teacher is a constant, so gradients reach only the student.
pub fn kl_cls_loss<'t>(teacher: &Tensor, student: Var<'t>, tau: f64) -> Result<Var<'t>> {
    if teacher.shape() != student.shape().as_slice() || teacher.rank() != 2 {
        return Err(Error::Contract(format!(
            "teacher {:?} and student {:?} class logits differ",
            teacher.shape(),
            student.shape()
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let tape = student.tape();
    let t_log = tape.constant(teacher.clone()).scale(1.0 / tau)?.log_softmax(1)?.value();
    let p = t_log.map(f64::exp);
    let log_q = student.scale(1.0 / tau)?.log_softmax(1)?;
    // sum p * (log p - log q), with log p a constant
    let diff = tape.constant(t_log).sub(log_q)?;
    let rows = teacher.shape()[0] as f64;
    Ok(tape.constant(p).mul(diff)?.sum_all()?.scale(1.0 / rows)?)
}

/// Mask distillation terms `(bce, dice)` against sigmoid teacher targets.
/// BCE is averaged over all entries, Dice over rows.
pub fn mask_distill_loss<'t>(
    teacher: &Tensor,
    student: Var<'t>,
    denominator: DiceDenominator,
) -> Result<(Var<'t>, Var<'t>)> {
    if teacher.shape() != student.shape().as_slice() || teacher.rank() < 2 {
        return Err(Error::Contract(format!(
            "teacher {:?} and student {:?} mask logits differ",
            teacher.shape(),
            student.shape()
        )));
    }
    let tape = student.tape();
    let rows = teacher.shape()[0];
    let n = teacher.len() / rows;
    let t = teacher.map(crate::autodiff::sigmoid_scalar).reshaped(&[rows, n])?;
    let s = student.reshape(&[rows, n])?;
    let targets = tape.constant(t.clone());
    let bce = s.softplus()?.sub(s.mul(targets)?)?.mean_all()?;
    let probs = s.sigmoid()?;
    let num = probs.mul(targets)?.sum_axis(1)?.scale(2.0)?.add_scalar(DISTILL_DICE_SMOOTH)?;
    let (s_den, t_den): (Var<'t>, Vec<f64>) = match denominator {
        DiceDenominator::Linear => (probs, t.data().chunks(n).map(|r| r.iter().sum()).collect()),
        DiceDenominator::Squared => (
            probs.mul(probs)?,
            t.data().chunks(n).map(|r| r.iter().map(|v| v * v).sum()).collect(),
        ),
    };
    let den = s_den
        .sum_axis(1)?
        .add(tape.constant(Tensor::new(vec![rows], t_den)?))?
        .add_scalar(DISTILL_DICE_SMOOTH)?;
    let dice = num.div(den)?.mean_all()?.neg()?.add_scalar(1.0)?;
    Ok((bce, dice))
}

/// Weighted distillation objective for one student forward pass. Returns
/// the total and `[L_cls, L_m, L_total]`.
pub fn distill_objective<'t>(
    student_cls: Var<'t>,
    student_mask: Var<'t>,
    bundle: &TeacherBundle,
    cfg: &DistillConfig,
) -> Result<(Var<'t>, [f64; 3])> {
    let tape = student_cls.tape();
    let (t_cls, s_cls) = if cfg.include_background {
        (bundle.cls.clone(), student_cls)
    } else {
        let t = drop_background(tape.constant(bundle.cls.clone()))?.value();
        (t, drop_background(student_cls)?)
    };
    let cls = kl_cls_loss(&t_cls, s_cls, cfg.temperature)?;
    let (bce, dice) = mask_distill_loss(&bundle.mask, student_mask, cfg.dice_denominator)?;
    let zero = tape.constant(Tensor::scalar(0.0));
    let mask = match (cfg.use_bce, cfg.use_dice) {
        (true, true) => bce.add(dice)?,
        (true, false) => bce,
        (false, true) => dice,
        (false, false) => zero,
    };
    let total = cls.scale(cfg.lambda_cls)?.add(mask.scale(cfg.lambda_mask)?)?;
    Ok((total, [cls.item(), mask.item(), total.item()]))
}

/// Teacher bundles for every image of `dataset`, computed in parallel.
pub fn teacher_bundles(clients: &[SegModel], dataset: &DomainDataset, fusion_enabled: bool) -> Result<Vec<TeacherBundle>> {
    dataset
        .scenes
        .par_iter()
        .map(|s| teacher_logits(clients, &s.image, fusion_enabled))
        .collect()
}

/// Trains a fresh global model against frozen clients on unlabeled images.
/// Returns the model and per-step `[L_cls, L_m, L_total]`.
pub fn distill_global(
    clients: &[SegModel],
    dataset: &DomainDataset,
    model_cfg: SegModelConfig,
    cfg: &DistillConfig,
    init_seed: u64,
    seed: u64,
) -> Result<(SegModel, Vec<StepRecord>)> {
    let mut student = SegModel::init(model_cfg, init_seed)?;
    let log = distill_into(&mut student, clients, dataset, cfg, seed)?;
    Ok((student, log))
}

fn check_student(student: &SegModelConfig, clients: &[SegModel]) -> Result<()> {
    let client_cfg = check_clients(clients)?;
    if student.num_queries != clients.len() * client_cfg.num_queries {
        return Err(Error::Config(format!(
            "global model needs {} x {} = {} queries, config has {}",
            clients.len(),
            client_cfg.num_queries,
            clients.len() * client_cfg.num_queries,
            student.num_queries
        )));
    }
    if student.num_classes != client_cfg.num_classes
        || (student.height, student.width) != (client_cfg.height, client_cfg.width)
        || (student.feat_height(), student.feat_width()) != (client_cfg.feat_height(), client_cfg.feat_width())
    {
        return Err(Error::Config("global and client models disagree on classes or resolution".into()));
    }
    Ok(())
}

/// Distillation training of an existing student, e.g. one whose backbone
/// was initialized from shared public weights.
pub fn distill_into(
    student: &mut SegModel,
    clients: &[SegModel],
    dataset: &DomainDataset,
    cfg: &DistillConfig,
    seed: u64,
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    check_student(&student.config, clients)?;
    if cfg.iterations == 0 || cfg.is_constant_objective() {
        return Ok(Vec::new());
    }
    let bundles = teacher_bundles(clients, dataset, cfg.fusion_enabled)?;
    let mut sampler = BatchSampler::new(dataset.len(), cfg.batch_size, seed)?;
    let mut opt = AdamW::new(cfg.optimizer, &student.params);
    let mut log = Vec::with_capacity(cfg.iterations);
    for step in 0..cfg.iterations {
        let batch: Vec<(&Tensor, &TeacherBundle)> = sampler
            .next_batch()
            .into_iter()
            .map(|i| (&dataset.scenes[i].image, &bundles[i]))
            .collect();
        let frozen = student.clone();
        let (grads, parts) = batch_gradients(&frozen, &batch, |tape, p, item| {
            let (cls, mask) = frozen.forward_on(p, tape.constant(item.0.clone()))?;
            let (total, parts) = distill_objective(cls, mask, item.1, cfg)?;
            Ok((total, parts.to_vec()))
        })?;
        opt.step(&mut student.params, &grads)?;
        log.push(StepRecord { step, components: parts });
    }
    Ok(log)
}

/// `step,L_cls,L_m,L_total` curve.
pub fn curve_csv(log: &[StepRecord]) -> String {
    crate::training::records_csv(&["L_cls", "L_m", "L_total"], log)
}
