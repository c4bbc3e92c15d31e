//! One-shot FedAvg: a single weighted parameter average of the client
//! models, then supervised fine-tuning on labeled server data.

use crate::client_trainer::{fit_supervised, TrainConfig};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::scenegen::DomainDataset;
use crate::segmodel::SegModel;
use crate::tensor::Tensor;
use crate::training::StepRecord;

/// Parameter-wise weighted average. `weights` defaults to uniform and must
/// be non-negative and sum to one.
pub fn fedavg_aggregate(models: &[SegModel], weights: Option<&[f64]>) -> Result<SegModel> {
    let first = models
        .first()
        .ok_or_else(|| Error::Contract("nothing to aggregate".into()))?;
    if let Some(m) = models.iter().find(|m| m.config != first.config || !m.params.same_layout(&first.params)) {
        return Err(Error::Contract(format!(
            "cannot average models with different architectures: {:?} vs {:?}",
            first.config, m.config
        )));
    }
    let uniform = vec![1.0 / models.len() as f64; models.len()];
    let weights = weights.unwrap_or(&uniform);
    if weights.len() != models.len() {
        return Err(Error::Contract(format!("{} weights for {} models", weights.len(), models.len())));
    }
    if weights.iter().any(|w| !(*w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!("aggregation weights {weights:?} must be non-negative and sum to 1")));
    }
    let mut params = ParamSet::new();
    for (name, t) in first.params.iter() {
        let mut acc = Tensor::zeros(t.shape());
        for (m, &w) in models.iter().zip(weights) {
            let src = m.params.get(name).expect("same layout");
            for (a, &v) in acc.data_mut().iter_mut().zip(src.data()) {
                *a += w * v;
            }
        }
        params.push(name, acc);
    }
    SegModel::from_params(first.config, params)
}

/// Supervised fine-tuning of the aggregated model on the labeled server
/// set.
pub fn fedavg_finetune(
    aggregated: &SegModel,
    server_labeled: &DomainDataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(SegModel, Vec<StepRecord>)> {
    if !server_labeled.labeled {
        return Err(Error::Contract(format!(
            "FedAvg fine-tuning needs labels, `{}` has none",
            server_labeled.domain_id
        )));
    }
    let mut model = aggregated.clone();
    let log = fit_supervised(&mut model, server_labeled, cfg, seed)?;
    Ok((model, log))
}
