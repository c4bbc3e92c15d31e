//! Cross-client prediction inconsistency on the unlabeled server set.
//!
//! Every client labels every server image. For each client the predicted
//! pixel counts of the dynamic classes are pooled over the whole set and
//! normalised into relative proportions. A class whose proportion varies a
//! lot between clients (coefficient of variation above a threshold) is
//! considered unstable and gets extra generated images.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenegen::{AugmentedImage, DomainDataset, Scene};
use crate::segmodel::{LabelMap, SegModel};

/// Stabiliser in the denominator of the inconsistency score.
pub const DEFAULT_EPS: f64 = 1e-8;
pub const DEFAULT_THRESHOLD: f64 = 1.0;

/// Labels every image with every client: `result[k][i]` is client `k`'s
/// prediction for image `i`.
pub fn predict_pseudo_labels(models: &[SegModel], server: &DomainDataset) -> Result<Vec<Vec<LabelMap>>> {
    let first = models
        .first()
        .ok_or_else(|| Error::Contract("pseudo-labelling needs at least one model".into()))?;
    if let Some(m) = models.iter().find(|m| m.config.num_classes != first.config.num_classes) {
        return Err(Error::Contract(format!(
            "models disagree on the class count ({} vs {})",
            first.config.num_classes, m.config.num_classes
        )));
    }
    let n = server.len();
    let flat: Vec<LabelMap> = (0..models.len() * n)
        .into_par_iter()
        .map(|j| models[j / n].segment(&server.scenes[j % n].image))
        .collect::<Result<_>>()?;
    let mut out: Vec<Vec<LabelMap>> = Vec::with_capacity(models.len());
    let mut it = flat.into_iter();
    for _ in 0..models.len() {
        out.push(it.by_ref().take(n).collect());
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassProportionMatrix {
    /// The class subset, in column order.
    pub classes: Vec<u8>,
    /// `counts[k][j]`: pixels client `k` assigned to `classes[j]`.
    pub counts: Vec<Vec<u64>>,
    /// Row-normalised counts; all-zero rows stay zero.
    pub values: Vec<Vec<f64>>,
    /// Clients that predicted no pixel of any class in the subset.
    pub degenerate: Vec<bool>,
}

impl ClassProportionMatrix {
    pub fn from_counts(classes: Vec<u8>, counts: Vec<Vec<u64>>) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::Contract("class subset is empty".into()));
        }
        if counts.iter().any(|r| r.len() != classes.len()) {
            return Err(Error::Contract("count rows do not match the class subset".into()));
        }
        let mut values = Vec::with_capacity(counts.len());
        let mut degenerate = Vec::with_capacity(counts.len());
        for row in &counts {
            let total: u64 = row.iter().sum();
            degenerate.push(total == 0);
            values.push(
                row.iter()
                    .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
                    .collect(),
            );
        }
        Ok(ClassProportionMatrix {
            classes,
            counts,
            values,
            degenerate,
        })
    }
}

/// Pools each client's predicted pixel counts over all images and
/// normalises them over `classes`.
pub fn class_proportions(labels: &[Vec<LabelMap>], classes: &[u8]) -> Result<ClassProportionMatrix> {
    let counts = labels
        .iter()
        .map(|maps| {
            let mut hist = [0u64; 256];
            for m in maps {
                for &id in &m.ids {
                    hist[id as usize] += 1;
                }
            }
            classes.iter().map(|&c| hist[c as usize]).collect()
        })
        .collect();
    ClassProportionMatrix::from_counts(classes.to_vec(), counts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InconsistencyReport {
    pub classes: Vec<u8>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub gamma: Vec<f64>,
    pub eps: f64,
    pub threshold: f64,
    pub unstable: Vec<u8>,
    /// Client rows left out of the statistics because they were all zero.
    pub excluded_clients: Vec<usize>,
}

/// Mean, population standard deviation and `gamma = sigma / (mu + eps)` per
/// class over the non-degenerate client rows. A class with `sigma == 0` has
/// `gamma == 0` even when `mu + eps == 0`.
pub fn inconsistency_scores(p: &ClassProportionMatrix, eps: f64, threshold: f64) -> Result<InconsistencyReport> {
    if !(eps >= 0.0) {
        return Err(Error::Config(format!("eps must be non-negative, got {eps}")));
    }
    let excluded: Vec<usize> = p.degenerate.iter().enumerate().filter(|(_, &d)| d).map(|(k, _)| k).collect();
    if !excluded.is_empty() {
        warn!("clients {excluded:?} predicted none of the scored classes; left out of the statistics");
    }
    let rows: Vec<&Vec<f64>> = p.values.iter().zip(&p.degenerate).filter(|(_, &d)| !d).map(|(r, _)| r).collect();
    let k = rows.len() as f64;
    let m = p.classes.len();
    let (mut mu, mut sigma, mut gamma) = (vec![0.0; m], vec![0.0; m], vec![0.0; m]);
    if !rows.is_empty() {
        for j in 0..m {
            mu[j] = rows.iter().map(|r| r[j]).sum::<f64>() / k;
            sigma[j] = (rows.iter().map(|r| (r[j] - mu[j]).powi(2)).sum::<f64>() / k).sqrt();
            gamma[j] = if sigma[j] == 0.0 { 0.0 } else { sigma[j] / (mu[j] + eps) };
        }
    }
    let unstable = select_unstable(&p.classes, &gamma, threshold);
    Ok(InconsistencyReport {
        classes: p.classes.clone(),
        mu,
        sigma,
        gamma,
        eps,
        threshold,
        unstable,
        excluded_clients: excluded,
    })
}

/// Classes with `gamma > threshold`, by ascending id.
pub fn select_unstable(classes: &[u8], gamma: &[f64], threshold: f64) -> Vec<u8> {
    let mut out: Vec<u8> = classes
        .iter()
        .zip(gamma)
        .filter(|(_, &g)| g > threshold)
        .map(|(&c, _)| c)
        .collect();
    out.sort_unstable();
    out
}

/// Pools the server images and the generated images (grouped by ascending
/// class id) into one unlabeled distillation set.
pub fn build_distill_set(server: &DomainDataset, augmented: &[(u8, Vec<AugmentedImage>)]) -> Result<DomainDataset> {
    let res = server.resolution();
    let mut groups: Vec<&(u8, Vec<AugmentedImage>)> = augmented.iter().collect();
    groups.sort_by_key(|g| g.0);
    let mut scenes: Vec<Scene> = server
        .scenes
        .iter()
        .map(|s| Scene {
            image: s.image.clone(),
            labels: None,
        })
        .collect();
    for (class, images) in groups {
        for img in images {
            let shape = img.image.shape();
            if res.is_some_and(|(h, w)| shape != [3, h, w]) {
                return Err(Error::Contract(format!(
                    "generated image for class {class} has shape {shape:?}, server images are {res:?}"
                )));
            }
            scenes.push(Scene {
                image: img.image.clone(),
                labels: None,
            });
        }
    }
    Ok(DomainDataset {
        domain_id: format!("{}+generated", server.domain_id),
        num_classes: server.num_classes,
        scenes,
        labeled: false,
    })
}
