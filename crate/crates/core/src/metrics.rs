//! Confusion matrices, IoU and cross-domain mIoU.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenegen::DomainDataset;
use crate::segmodel::{LabelMap, SegModel, IGNORE};

/// `counts[gt][pred]`; ignore pixels are never counted.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(Error::Contract(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height, pred.width, gt.height, gt.width
            )));
        }
        let c = self.num_classes;
        for (&p, &g) in pred.ids.iter().zip(&gt.ids) {
            if g == IGNORE {
                continue;
            }
            if g as usize >= c || p as usize >= c {
                return Err(Error::Contract(format!("label {} / prediction {p} outside {c} classes", g)));
            }
            self.counts[g as usize * c + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::Contract("confusion matrices of different size".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Per-class IoU; `None` when the class appears in neither ground truth
    /// nor prediction.
    pub fn iou(&self) -> Vec<Option<f64>> {
        let c = self.num_classes;
        (0..c)
            .map(|k| {
                let tp = self.get(k, k);
                let fn_: u64 = (0..c).map(|j| self.get(k, j)).sum::<u64>() - tp;
                let fp: u64 = (0..c).map(|i| self.get(i, k)).sum::<u64>() - tp;
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    /// Mean IoU over defined classes, or over all classes with absent ones
    /// counted as zero when `exclude_absent` is false.
    pub fn miou(&self, exclude_absent: bool) -> f64 {
        let ious = self.iou();
        let values: Vec<f64> = if exclude_absent {
            ious.iter().flatten().copied().collect()
        } else {
            ious.iter().map(|v| v.unwrap_or(0.0)).collect()
        };
        if values.is_empty() {
            0.0
        } else {
            values.iter().sum::<f64>() / values.len() as f64
        }
    }

    /// Rows as text, `;`-separated.
    pub fn encode_rows(&self) -> String {
        self.counts
            .chunks(self.num_classes)
            .map(|r| r.iter().map(u64::to_string).collect::<Vec<_>>().join(" "))
            .collect::<Vec<_>>()
            .join(";")
    }

    pub fn decode_rows(text: &str) -> Result<ConfusionMatrix> {
        let rows: Vec<Vec<u64>> = text
            .split(';')
            .map(|r| r.split_whitespace().map(|v| v.parse::<u64>()).collect::<std::result::Result<_, _>>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Contract(format!("confusion matrix: {e}")))?;
        let c = rows.len();
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::Contract("confusion matrix is not square".into()));
        }
        Ok(ConfusionMatrix {
            num_classes: c,
            counts: rows.into_iter().flatten().collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainReport {
    pub domain_id: String,
    pub images: usize,
    pub iou: Vec<Option<f64>>,
    pub miou: f64,
    pub confusion: ConfusionMatrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub domains: Vec<DomainReport>,
    /// Unweighted mean of per-domain mIoU.
    pub average_miou: f64,
}

/// Confusion matrix of `model` over a labeled dataset. Images are scored in
/// parallel and merged in order.
pub fn confusion_on(model: &SegModel, dataset: &DomainDataset) -> Result<ConfusionMatrix> {
    if !dataset.labeled {
        return Err(Error::Contract(format!("evaluation set `{}` is unlabeled", dataset.domain_id)));
    }
    let c = model.config.num_classes;
    let parts: Vec<ConfusionMatrix> = dataset
        .scenes
        .par_iter()
        .map(|s| {
            let gt = s
                .labels
                .as_ref()
                .ok_or_else(|| Error::Contract(format!("scene without labels in `{}`", dataset.domain_id)))?;
            let pred = model.segment(&s.image)?;
            let mut cm = ConfusionMatrix::new(c);
            cm.accumulate(&pred, gt)?;
            Ok(cm)
        })
        .collect::<Result<_>>()?;
    let mut cm = ConfusionMatrix::new(c);
    for p in &parts {
        cm.merge(p)?;
    }
    Ok(cm)
}

pub fn evaluate_on_domains(model: &SegModel, targets: &[DomainDataset], exclude_absent: bool) -> Result<EvalSummary> {
    let domains = targets
        .iter()
        .map(|ds| {
            let confusion = confusion_on(model, ds)?;
            Ok(DomainReport {
                domain_id: ds.domain_id.clone(),
                images: ds.len(),
                iou: confusion.iou(),
                miou: confusion.miou(exclude_absent),
                confusion,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let average_miou = if domains.is_empty() {
        0.0
    } else {
        domains.iter().map(|d| d.miou).sum::<f64>() / domains.len() as f64
    };
    Ok(EvalSummary { domains, average_miou })
}

fn fmt_iou(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{:.4}", 100.0 * x))
}

/// Per-class IoU table (percent) with an mIoU footer.
pub fn domain_report_csv(report: &DomainReport, class_names: &[String]) -> String {
    let mut out = String::from("class,iou\n");
    for (k, v) in report.iou.iter().enumerate() {
        let name = class_names.get(k).cloned().unwrap_or_else(|| format!("class{k}"));
        out.push_str(&format!("{name},{}\n", fmt_iou(*v)));
    }
    out.push_str(&format!("mIoU,{:.4}\n", 100.0 * report.miou));
    out
}

/// One row per model: per-domain mIoU (percent) and their average.
pub fn summary_csv(rows: &[(String, EvalSummary)]) -> String {
    let Some((_, first)) = rows.first() else {
        return "model,average\n".to_string();
    };
    let mut out = String::from("model");
    for d in &first.domains {
        out.push(',');
        out.push_str(&d.domain_id);
    }
    out.push_str(",average\n");
    for (name, s) in rows {
        out.push_str(name);
        for d in &s.domains {
            out.push_str(&format!(",{:.4}", 100.0 * d.miou));
        }
        out.push_str(&format!(",{:.4}\n", 100.0 * s.average_miou));
    }
    out
}

/// Per-pixel label agreement between two sets of label maps.
pub fn pixel_agreement(a: &[LabelMap], b: &[LabelMap]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Contract("agreement needs two equally long, nonempty sets".into()));
    }
    let (mut same, mut total) = (0usize, 0usize);
    for (x, y) in a.iter().zip(b) {
        if x.ids.len() != y.ids.len() {
            return Err(Error::Contract("label maps of different size".into()));
        }
        same += x.ids.iter().zip(&y.ids).filter(|(p, q)| p == q).count();
        total += x.ids.len();
    }
    Ok(same as f64 / total as f64)
}
