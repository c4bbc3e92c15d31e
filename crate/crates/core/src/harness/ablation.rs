//! Component ablation of the distillation stage.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::manifest::Stage;
use super::pipeline::{Run, GLOBAL_MODEL};
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_on_domains, EvalSummary};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Fusion,
    Augmentation,
    Bce,
    Dice,
}

impl Axis {
    pub const ALL: [Axis; 4] = [Axis::Fusion, Axis::Augmentation, Axis::Bce, Axis::Dice];
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fusion" => Ok(Axis::Fusion),
            "augmentation" | "aug" => Ok(Axis::Augmentation),
            "bce" => Ok(Axis::Bce),
            "dice" => Ok(Axis::Dice),
            other => Err(Error::Config(format!("unknown ablation axis `{other}`"))),
        }
    }
}

/// One configuration of the ablation table. The KL term is always on.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub bce: bool,
    pub dice: bool,
    pub fusion: bool,
    pub augmentation: bool,
}

impl AblationRow {
    fn new(name: &str, bce: bool, dice: bool, fusion: bool, augmentation: bool) -> Self {
        AblationRow {
            name: name.to_string(),
            bce,
            dice,
            fusion,
            augmentation,
        }
    }

    fn is_full(&self) -> bool {
        self.bce && self.dice && self.fusion && self.augmentation
    }

    /// Axes on which this row differs from the full framework.
    pub fn ablated(&self) -> Vec<Axis> {
        let on = [self.fusion, self.augmentation, self.bce, self.dice];
        Axis::ALL.into_iter().zip(on).filter(|(_, on)| !on).map(|(a, _)| a).collect()
    }

    pub fn apply(&self, base: &DistillConfig) -> DistillConfig {
        DistillConfig {
            use_bce: self.bce,
            use_dice: self.dice,
            fusion_enabled: self.fusion,
            ..*base
        }
    }
}

/// The six rows of the component table.
pub fn table_rows() -> Vec<AblationRow> {
    vec![
        AblationRow::new("KL+BCE", true, false, false, false),
        AblationRow::new("KL+Dice", false, true, false, false),
        AblationRow::new("KL+BCE+Dice", true, true, false, false),
        AblationRow::new("+fusion", true, true, true, false),
        AblationRow::new("+augmentation", true, true, false, true),
        AblationRow::new("full", true, true, true, true),
    ]
}

/// Rows whose ablated components all lie in `axes`; the full row is always
/// included.
pub fn ablation_rows(axes: &[Axis]) -> Vec<AblationRow> {
    table_rows()
        .into_iter()
        .filter(|r| r.ablated().iter().all(|a| axes.contains(a)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub row: AblationRow,
    pub summary: EvalSummary,
}

/// Distills and evaluates one student per row. Rows share the run's
/// clients, distillation set, initialization and seeds; the full row reuses
/// the run's global model when the distill stage has completed.
pub fn run_ablation(cfg: ExperimentConfig, axes: &[Axis]) -> Result<Vec<AblationResult>> {
    let mut run = Run::open(cfg)?;
    run.run_through(Stage::Augment)?;
    let targets = run.targets()?;
    let mut results = Vec::new();
    for row in ablation_rows(axes) {
        let model = if row.is_full() && run.manifest.is_complete(Stage::Distill) {
            run.load_model(GLOBAL_MODEL)?
        } else {
            log::info!("ablation row {}", row.name);
            let cfg = row.apply(&run.cfg.distill);
            // round through f32 like every persisted model
            let (model, _) = run.distill_variant(&cfg, row.augmentation)?;
            crate::checkpoint::quantize(&model)
        };
        let summary = evaluate_on_domains(&model, &targets, run.cfg.exclude_absent)?;
        results.push(AblationResult { row, summary });
    }
    let dir = run.reports_dir();
    super::write_atomic(&dir.join("ablation.csv"), ablation_csv(&results).as_bytes())?;
    super::write_atomic(&dir.join("ablation.json"), serde_json::to_string_pretty(&results)?.as_bytes())?;
    Ok(results)
}

/// `row,bce,dice,fusion,augmentation,<domains...>,average` in percent.
pub fn ablation_csv(results: &[AblationResult]) -> String {
    let mut out = String::from("row,bce,dice,fusion,augmentation");
    if let Some(first) = results.first() {
        for d in &first.summary.domains {
            out.push(',');
            out.push_str(&d.domain_id);
        }
    }
    out.push_str(",average\n");
    for r in results {
        out.push_str(&format!(
            "{},{},{},{},{}",
            r.row.name, r.row.bce, r.row.dice, r.row.fusion, r.row.augmentation
        ));
        for d in &r.summary.domains {
            out.push_str(&format!(",{:.4}", 100.0 * d.miou));
        }
        out.push_str(&format!(",{:.4}\n", 100.0 * r.summary.average_miou));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subset_rule() {
        assert_eq!(ablation_rows(&[]).iter().map(|r| r.name.as_str()).collect::<Vec<_>>(), ["full"]);
        assert_eq!(ablation_rows(&Axis::ALL).len(), 6);
        let names: Vec<String> = ablation_rows(&[Axis::Fusion]).into_iter().map(|r| r.name).collect();
        assert_eq!(names, ["+augmentation", "full"]);
        let names: Vec<String> = ablation_rows(&[Axis::Fusion, Axis::Augmentation]).into_iter().map(|r| r.name).collect();
        assert_eq!(names, ["KL+BCE+Dice", "+fusion", "+augmentation", "full"]);
    }

    #[test]
    fn rows_map_onto_distill_switches() {
        let base = DistillConfig::default();
        let dice_only = &table_rows()[1];
        let c = dice_only.apply(&base);
        assert!(!c.use_bce && c.use_dice && !c.fusion_enabled);
        assert_eq!(dice_only.ablated(), [Axis::Fusion, Axis::Augmentation, Axis::Bce]);
        assert_eq!(table_rows()[5].apply(&base), base);
    }

    #[test]
    fn axis_names_parse() {
        assert_eq!("aug".parse::<Axis>().unwrap(), Axis::Augmentation);
        assert_eq!(" Dice".parse::<Axis>().unwrap(), Axis::Dice);
        assert!("kl".parse::<Axis>().is_err());
    }
}
