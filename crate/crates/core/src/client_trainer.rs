//! Supervised client training with a set-prediction loss.
//!
//! Ground truth is turned into one binary mask per class present (semantic
//! segments), queries are matched to segments by minimum cost, matched
//! queries learn the segment's class and mask, and every unmatched query is
//! pushed toward the no-object class with a reduced weight.

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid_scalar, softmax_buf, softplus_scalar, Tape, Var};
use crate::error::{Error, Result};
use crate::matching::hungarian_match;
use crate::optim::{AdamW, AdamWConfig};
use crate::params::BoundParams;
use crate::scenegen::DomainDataset;
use crate::segmodel::{LabelMap, SegModel, SegModelConfig, IGNORE};
use crate::tensor::Tensor;
use crate::training::{batch_gradients, BatchSampler, StepRecord};

/// Smoothing constant of the Dice term.
pub const DICE_SMOOTH: f64 = 1.0;

/// Per-class binary masks at feature resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct GtSegments {
    pub height: usize,
    pub width: usize,
    pub segments: Vec<(u8, Vec<f64>)>,
}

impl GtSegments {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}

/// Majority-vote downsampling of a label map to `fh x fw` (ignore pixels do
/// not vote, ties go to the smaller id, cells with no votes become
/// [`IGNORE`]).
pub fn downsample_labels(labels: &LabelMap, fh: usize, fw: usize) -> Result<LabelMap> {
    if fh == 0 || fw == 0 || fh > labels.height || fw > labels.width {
        return Err(Error::Contract(format!(
            "cannot downsample {}x{} labels to {fh}x{fw}",
            labels.height, labels.width
        )));
    }
    let mut ids = Vec::with_capacity(fh * fw);
    let mut votes = [0u32; 256];
    for cy in 0..fh {
        for cx in 0..fw {
            votes.fill(0);
            for y in cy * labels.height / fh..(cy + 1) * labels.height / fh {
                for x in cx * labels.width / fw..(cx + 1) * labels.width / fw {
                    let id = labels.get(y, x);
                    if id != IGNORE {
                        votes[id as usize] += 1;
                    }
                }
            }
            let (best, count) = votes
                .iter()
                .enumerate()
                .fold((IGNORE as usize, 0), |acc, (id, &n)| if n > acc.1 { (id, n) } else { acc });
            ids.push(if count == 0 { IGNORE } else { best as u8 });
        }
    }
    LabelMap::new(fh, fw, ids)
}

/// One segment per class present in the downsampled labels, in class order.
pub fn gt_segments(labels: &LabelMap, fh: usize, fw: usize, num_classes: usize) -> Result<GtSegments> {
    labels.validate(num_classes)?;
    let small = downsample_labels(labels, fh, fw)?;
    let segments = (0..num_classes as u8)
        .filter_map(|c| {
            let mask: Vec<f64> = small.ids.iter().map(|&id| f64::from(u8::from(id == c))).collect();
            mask.iter().any(|&v| v > 0.0).then_some((c, mask))
        })
        .collect();
    Ok(GtSegments {
        height: fh,
        width: fw,
        segments,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SetLossConfig {
    pub w_cls: f64,
    pub w_bce: f64,
    pub w_dice: f64,
    pub no_object_weight: f64,
}

impl Default for SetLossConfig {
    fn default() -> Self {
        SetLossConfig {
            w_cls: 2.0,
            w_bce: 5.0,
            w_dice: 5.0,
            no_object_weight: 0.1,
        }
    }
}

impl SetLossConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w_cls, self.w_bce, self.w_dice, self.no_object_weight];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub loss: SetLossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 1000,
            batch_size: 2,
            optimizer: AdamWConfig::default(),
            loss: SetLossConfig::default(),
        }
    }
}

/// Unweighted loss components; the scalar loss is
/// `w_cls * cls + w_bce * bce + w_dice * dice`.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub cls: f64,
    pub bce: f64,
    pub dice: f64,
}

impl LossParts {
    pub fn total(&self, cfg: &SetLossConfig) -> f64 {
        cfg.w_cls * self.cls + cfg.w_bce * self.bce + cfg.w_dice * self.dice
    }
}

fn check_logits(cls: &[usize], mask: &[usize], gt: &GtSegments) -> Result<(usize, usize, usize)> {
    match (cls, mask) {
        ([q, width], [mq, h, w]) if q == mq && *width >= 2 && *h == gt.height && *w == gt.width => {
            Ok((*q, *width, h * w))
        }
        _ => Err(Error::Contract(format!(
            "logits {cls:?} / {mask:?} do not fit {}x{} segments",
            gt.height, gt.width
        ))),
    }
}

/// Matching cost between every query (rows) and every segment (columns).
pub fn match_cost(cls: &Tensor, mask: &Tensor, gt: &GtSegments, cfg: &SetLossConfig) -> Result<Vec<Vec<f64>>> {
    let (q, width, n) = check_logits(cls.shape(), mask.shape(), gt)?;
    let probs = softmax_buf(cls.shape(), cls.data(), 1);
    let m = mask.data();
    Ok((0..q)
        .map(|qi| {
            let row = &m[qi * n..(qi + 1) * n];
            let sig: Vec<f64> = row.iter().map(|&x| sigmoid_scalar(x)).collect();
            let sig_sum: f64 = sig.iter().sum();
            let sp_sum: f64 = row.iter().map(|&x| softplus_scalar(x)).sum();
            gt.segments
                .iter()
                .map(|(c, t)| {
                    let tx: f64 = row.iter().zip(t).map(|(x, t)| x * t).sum();
                    let bce = (sp_sum - tx) / n as f64;
                    let inter: f64 = sig.iter().zip(t).map(|(s, t)| s * t).sum();
                    let t_sum: f64 = t.iter().sum();
                    let dice = 1.0 - (2.0 * inter + DICE_SMOOTH) / (sig_sum + t_sum + DICE_SMOOTH);
                    -cfg.w_cls * probs[qi * width + *c as usize] + cfg.w_bce * bce + cfg.w_dice * dice
                })
                .collect()
        })
        .collect())
}

/// Set-prediction loss on the tape for one image.
pub fn set_loss<'t>(cls: Var<'t>, mask: Var<'t>, gt: &GtSegments, cfg: &SetLossConfig) -> Result<(Var<'t>, LossParts)> {
    let (q, width, n) = check_logits(&cls.shape(), &mask.shape(), gt)?;
    let tape = cls.tape();
    let no_object = width - 1;
    let pairs = if gt.is_empty() {
        Vec::new()
    } else {
        hungarian_match(&match_cost(&cls.value(), &mask.value(), gt, cfg)?)?
    };

    // weighted cross-entropy, normalised by the total weight
    let mut target = vec![(no_object, cfg.no_object_weight); q];
    for &(qi, g) in &pairs {
        target[qi] = (gt.segments[g].0 as usize, 1.0);
    }
    let norm: f64 = target.iter().map(|t| t.1).sum();
    let mut weights = vec![0.0; q * width];
    if norm > 0.0 {
        for (qi, &(c, w)) in target.iter().enumerate() {
            weights[qi * width + c] = w / norm;
        }
    }
    let weights = tape.constant(Tensor::new(vec![q, width], weights)?);
    let cls_loss = cls.log_softmax(1)?.mul(weights)?.sum_all()?.neg()?;

    let (bce, dice) = if pairs.is_empty() {
        (tape.constant(Tensor::scalar(0.0)), tape.constant(Tensor::scalar(0.0)))
    } else {
        let g = pairs.len();
        let mut select = vec![0.0; g * q];
        let mut targets = Vec::with_capacity(g * n);
        let mut target_sums = Vec::with_capacity(g);
        for (i, &(qi, seg)) in pairs.iter().enumerate() {
            select[i * q + qi] = 1.0;
            let t = &gt.segments[seg].1;
            targets.extend_from_slice(t);
            target_sums.push(t.iter().sum::<f64>());
        }
        let select = tape.constant(Tensor::new(vec![g, q], select)?);
        let targets = tape.constant(Tensor::new(vec![g, n], targets)?);
        let target_sums = tape.constant(Tensor::new(vec![g], target_sums)?);
        let logits = select.matmul(mask.reshape(&[q, n])?)?;
        let bce = logits.softplus()?.sub(logits.mul(targets)?)?.mean_all()?;
        let probs = logits.sigmoid()?;
        let num = probs.mul(targets)?.sum_axis(1)?.scale(2.0)?.add_scalar(DICE_SMOOTH)?;
        let den = probs.sum_axis(1)?.add(target_sums)?.add_scalar(DICE_SMOOTH)?;
        let dice = num.div(den)?.mean_all()?.neg()?.add_scalar(1.0)?;
        (bce, dice)
    };
    let parts = LossParts {
        cls: cls_loss.item(),
        bce: bce.item(),
        dice: dice.item(),
    };
    let total = cls_loss
        .scale(cfg.w_cls)?
        .add(bce.scale(cfg.w_bce)?)?
        .add(dice.scale(cfg.w_dice)?)?;
    Ok((total, parts))
}

/// Full supervised loss of `model` on one labeled image.
pub fn supervised_loss<'t>(
    model: &SegModel,
    tape: &'t Tape,
    p: &BoundParams<'t>,
    image: &Tensor,
    gt: &GtSegments,
    cfg: &SetLossConfig,
) -> Result<(Var<'t>, LossParts)> {
    let (cls, mask) = model.forward_on(p, tape.constant(image.clone()))?;
    set_loss(cls, mask, gt, cfg)
}

/// Images paired with their precomputed segments.
pub(crate) fn labeled_items(dataset: &DomainDataset, model_cfg: &SegModelConfig) -> Result<Vec<(Tensor, GtSegments)>> {
    if !dataset.labeled {
        return Err(Error::Contract(format!(
            "dataset `{}` is unlabeled; supervised training needs labels",
            dataset.domain_id
        )));
    }
    dataset
        .scenes
        .iter()
        .map(|s| {
            let labels = s
                .labels
                .as_ref()
                .ok_or_else(|| Error::Contract(format!("dataset `{}` has a scene without labels", dataset.domain_id)))?;
            let gt = gt_segments(labels, model_cfg.feat_height(), model_cfg.feat_width(), model_cfg.num_classes)?;
            Ok((s.image.clone(), gt))
        })
        .collect()
}

/// Continues supervised training of `model` on a labeled dataset. Returns
/// the per-step loss components `[cls, bce, dice, total]`.
pub fn fit_supervised(model: &mut SegModel, dataset: &DomainDataset, cfg: &TrainConfig, seed: u64) -> Result<Vec<StepRecord>> {
    cfg.loss.validate()?;
    let items = labeled_items(dataset, &model.config)?;
    let mut sampler = BatchSampler::new(items.len(), cfg.batch_size, seed)?;
    let mut opt = AdamW::new(cfg.optimizer, &model.params);
    let mut log = Vec::with_capacity(cfg.iterations);
    for step in 0..cfg.iterations {
        let batch: Vec<&(Tensor, GtSegments)> = sampler.next_batch().into_iter().map(|i| &items[i]).collect();
        let frozen = model.clone();
        let (grads, parts) = batch_gradients(&frozen, &batch, |tape, p, item| {
            let (l, parts) = supervised_loss(&frozen, tape, p, &item.0, &item.1, &cfg.loss)?;
            Ok((l, vec![parts.cls, parts.bce, parts.dice, l.item()]))
        })?;
        opt.step(&mut model.params, &grads)?;
        log.push(StepRecord { step, components: parts });
    }
    Ok(log)
}

/// Trains a freshly initialized client model on its labeled domain.
/// `init_seed` fixes the initial weights, `seed` the batch order.
pub fn train_client(
    dataset: &DomainDataset,
    model_cfg: SegModelConfig,
    cfg: &TrainConfig,
    init_seed: u64,
    seed: u64,
) -> Result<(SegModel, Vec<StepRecord>)> {
    if !dataset.labeled {
        return Err(Error::Contract(format!(
            "client dataset `{}` must be labeled",
            dataset.domain_id
        )));
    }
    if dataset.num_classes != model_cfg.num_classes {
        return Err(Error::Contract(format!(
            "dataset has {} classes, model {}",
            dataset.num_classes, model_cfg.num_classes
        )));
    }
    let mut model = SegModel::init(model_cfg, init_seed)?;
    let log = fit_supervised(&mut model, dataset, cfg, seed)?;
    Ok((model, log))
}
