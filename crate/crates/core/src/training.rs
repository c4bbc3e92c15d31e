//! Minibatch gradient plumbing shared by every trainer.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamSet};
use crate::segmodel::SegModel;

/// Named loss components reported by one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub components: Vec<f64>,
}

/// `step,<columns...>` table of a training log.
pub fn records_csv(columns: &[&str], log: &[StepRecord]) -> String {
    let mut out = format!("step,{}\n", columns.join(","));
    for r in log {
        out.push_str(&r.step.to_string());
        for v in &r.components {
            out.push_str(&format!(",{v:.8}"));
        }
        out.push('\n');
    }
    out
}

/// Mean gradient over a minibatch. Each item gets its own tape; gradients
/// are reduced in item order, so the result does not depend on scheduling.
pub fn batch_gradients<T, F>(model: &SegModel, items: &[T], loss: F) -> Result<(ParamSet, Vec<f64>)>
where
    T: Sync,
    F: for<'t> Fn(&'t Tape, &BoundParams<'t>, &T) -> Result<(Var<'t>, Vec<f64>)> + Sync,
{
    if items.is_empty() {
        return Err(Error::Contract("empty minibatch".into()));
    }
    let per_item: Vec<(ParamSet, Vec<f64>)> = items
        .par_iter()
        .map(|item| {
            let tape = Tape::new();
            let p = model.params.on_tape(&tape, true);
            let (l, parts) = loss(&tape, &p, item)?;
            let mut grads = tape.backward(l)?;
            Ok((p.collect_grads(&mut grads, &model.params), parts))
        })
        .collect::<Result<_>>()?;
    let scale = 1.0 / items.len() as f64;
    let mut total = model.params.zeros_like();
    let mut parts = vec![0.0; per_item[0].1.len()];
    for (g, pt) in &per_item {
        for ((_, acc), (_, gi)) in total.iter_mut().zip(g.iter()) {
            acc.axpy(scale, gi)?;
        }
        for (a, b) in parts.iter_mut().zip(pt) {
            *a += scale * b;
        }
    }
    Ok((total, parts))
}

/// Deterministic minibatch index sampler without replacement within a
/// batch.
pub struct BatchSampler {
    rng: ChaCha8Rng,
    len: usize,
    batch: usize,
}

impl BatchSampler {
    pub fn new(len: usize, batch: usize, seed: u64) -> Result<Self> {
        if len == 0 || batch == 0 {
            return Err(Error::Contract(format!(
                "cannot sample batches of {batch} from {len} items"
            )));
        }
        Ok(BatchSampler {
            rng: ChaCha8Rng::seed_from_u64(seed),
            len,
            batch: batch.min(len),
        })
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        sample(&mut self.rng, self.len, self.batch).into_vec()
    }
}

/// Mean of each component over trailing windows of `window` records.
pub fn windowed_means(records: &[StepRecord], component: usize, window: usize) -> Vec<f64> {
    records
        .chunks(window.max(1))
        .map(|c| c.iter().map(|r| r.components[component]).sum::<f64>() / c.len() as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmodel::SegModelConfig;
    use crate::tensor::Tensor;

    fn toy_loss<'t>(model: &SegModel, tape: &'t Tape, p: &BoundParams<'t>, img: &Tensor) -> Result<(Var<'t>, Vec<f64>)> {
        let (cls, mask) = model.forward_on(p, tape.constant(img.clone()))?;
        let l = cls.sum_all()?.add(mask.mean_all()?)?;
        Ok((l, vec![l.item()]))
    }

    #[test]
    fn batch_gradient_is_item_mean() {
        let cfg = SegModelConfig {
            height: 8,
            width: 8,
            ..SegModelConfig::default()
        };
        let model = SegModel::init(cfg, 3).unwrap();
        let images: Vec<Tensor> = (0..3)
            .map(|i| Tensor::from_fn(&[3, 8, 8], |j| ((i * 7 + j) % 11) as f64 / 11.0))
            .collect();
        let (all, parts) = batch_gradients(&model, &images, |t, p, i| toy_loss(&model, t, p, i)).unwrap();
        let mut manual = model.params.zeros_like();
        let mut mean = 0.0;
        for img in &images {
            let (g, p) = batch_gradients(&model, std::slice::from_ref(img), |t, p, i| toy_loss(&model, t, p, i)).unwrap();
            for ((_, a), (_, b)) in manual.iter_mut().zip(g.iter()) {
                a.axpy(1.0 / 3.0, b).unwrap();
            }
            mean += p[0] / 3.0;
        }
        for (a, b) in all.tensors().zip(manual.tensors()) {
            assert!(a.max_abs_diff(b).unwrap() < 1e-12);
        }
        assert!((parts[0] - mean).abs() < 1e-12);
    }

    #[test]
    fn sampler_is_seeded_and_distinct() {
        let mut a = BatchSampler::new(10, 4, 1).unwrap();
        let mut b = BatchSampler::new(10, 4, 1).unwrap();
        for _ in 0..5 {
            let batch = a.next_batch();
            assert_eq!(batch, b.next_batch());
            let mut sorted = batch.clone();
            sorted.sort();
            sorted.dedup();
            assert_eq!(sorted.len(), 4);
        }
        assert!(BatchSampler::new(0, 2, 0).is_err());
    }
}
