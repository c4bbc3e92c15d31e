//! The one-shot protocol as resumable on-disk stages.
//!
//! Run directory layout:
//!
//! ```text
//! config.toml  manifest.json
//! data/<domain>/                 generated datasets (the server set has no label files)
//! public/pretrained.ckpt         public backbone shared by clients and the global model
//! clients/<id>/model.ckpt        one per client, written once
//! server/inconsistency.{json,csv}
//! server/distill_set/            server images plus generated images, unlabeled
//! server/global.ckpt             distilled global model
//! baseline/fedavg.ckpt
//! reports/                       summary.csv, summary.json, <model>/<domain>.csv
//! ```

use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use super::manifest::{RunManifest, Stage, StageStatus, MANIFEST_FILE};
use super::write_atomic;
use crate::baselines::{fedavg_aggregate, fedavg_finetune};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::client_trainer::fit_supervised;
use crate::dataset_io::{label_files_in, read_dataset, read_dataset_manifest, write_dataset};
use crate::distill::{curve_csv, distill_into, DistillConfig};
use crate::error::{Error, Result};
use crate::inconsistency::{
    build_distill_set, class_proportions, inconsistency_scores, predict_pseudo_labels, ClassProportionMatrix,
    InconsistencyReport,
};
use crate::metrics::{domain_report_csv, evaluate_on_domains, summary_csv, EvalSummary};
use crate::scenegen::{augment_for_class, make_domain, DomainDataset};
use crate::segmodel::{SegModel, SegModelConfig};
use crate::training::{records_csv, StepRecord};

pub const GLOBAL_MODEL: &str = "global";
pub const FEDAVG_MODEL: &str = "fedavg";
const SUPERVISED_COLUMNS: [&str; 4] = ["cls", "bce", "dice", "total"];

/// Scores and proportions persisted by the inconsistency stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InconsistencyArtifact {
    pub proportions: ClassProportionMatrix,
    pub report: InconsistencyReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model: String,
    pub summary: EvalSummary,
}

/// An experiment bound to its run directory.
pub struct Run {
    pub cfg: ExperimentConfig,
    pub root: PathBuf,
    pub manifest: RunManifest,
}

impl Run {
    /// Opens or creates the run directory. An existing manifest must carry
    /// the same config hash.
    pub fn open(cfg: ExperimentConfig) -> Result<Run> {
        cfg.validate()?;
        let root = cfg.output_dir.clone();
        std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        let hash = cfg.hash();
        let manifest_path = root.join(MANIFEST_FILE);
        let manifest = if manifest_path.exists() {
            let m = RunManifest::load(&manifest_path)?;
            if m.config_hash != hash {
                return Err(Error::Config(format!(
                    "{} holds a run with config hash {}, this config hashes to {hash}",
                    root.display(),
                    m.config_hash
                )));
            }
            m
        } else {
            let m = RunManifest::new(hash);
            write_atomic(&root.join("config.toml"), cfg.to_toml()?.as_bytes())?;
            m.save(&manifest_path)?;
            m
        };
        Ok(Run { cfg, root, manifest })
    }

    fn save_manifest(&self) -> Result<()> {
        self.manifest.save(&self.root.join(MANIFEST_FILE))
    }

    pub fn data_dir(&self, domain_id: &str) -> PathBuf {
        self.root.join("data").join(domain_id)
    }

    pub fn client_checkpoint(&self, client_id: &str) -> PathBuf {
        self.root.join("clients").join(client_id).join("model.ckpt")
    }

    pub fn model_checkpoint(&self, model: &str) -> PathBuf {
        match model {
            GLOBAL_MODEL => self.root.join("server").join("global.ckpt"),
            FEDAVG_MODEL => self.root.join("baseline").join("fedavg.ckpt"),
            client => self.client_checkpoint(client),
        }
    }

    fn public_checkpoint(&self) -> PathBuf {
        self.root.join("public").join("pretrained.ckpt")
    }

    pub fn distill_set_dir(&self) -> PathBuf {
        self.root.join("server").join("distill_set")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    fn relative(&self, path: &Path) -> String {
        path.strip_prefix(&self.root).unwrap_or(path).display().to_string()
    }

    fn note_artifact(&mut self, name: &str, path: &Path) {
        let rel = self.relative(path);
        self.manifest.artifacts.insert(name.to_string(), rel);
    }

    fn write_text(&mut self, name: &str, path: &Path, text: &str) -> Result<()> {
        write_atomic(path, text.as_bytes())?;
        self.note_artifact(name, path);
        Ok(())
    }

    /// Writes a model checkpoint and bumps its write count.
    fn write_model(&mut self, model_name: &str, model: &SegModel) -> Result<SegModel> {
        let path = self.model_checkpoint(model_name);
        let bytes = save_checkpoint(model)?;
        write_atomic(&path, &bytes)?;
        *self.manifest.checkpoint_writes.entry(model_name.to_string()).or_insert(0) += 1;
        self.note_artifact(&format!("checkpoint/{model_name}"), &path);
        self.save_manifest()?;
        // downstream stages see exactly what a reload would give
        load_checkpoint(&bytes)
    }

    fn has_model(&self, model_name: &str) -> bool {
        self.manifest.checkpoint_writes.get(model_name).is_some_and(|&n| n > 0)
            && self.model_checkpoint(model_name).exists()
    }

    pub fn load_model(&self, model_name: &str) -> Result<SegModel> {
        let path = self.model_checkpoint(model_name);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        load_checkpoint(&bytes)
    }

    fn data_seed(&self, domain_id: &str) -> u64 {
        self.cfg.stage_seed(&format!("data/{domain_id}"))
    }

    /// Writes every dataset that is not on disk yet. The server set is
    /// written without label files.
    pub fn generate_data(&mut self) -> Result<()> {
        let mut jobs: Vec<(super::config::DomainRecipe, bool)> = Vec::new();
        if self.cfg.pretrain.enabled {
            jobs.push((self.cfg.pretrain.domain.clone(), true));
        }
        jobs.extend(self.cfg.clients.iter().map(|c| (c.clone(), true)));
        jobs.push((self.cfg.server.clone(), false));
        jobs.extend(self.cfg.targets.iter().map(|t| (t.clone(), true)));
        for (recipe, labeled) in jobs {
            let dir = self.data_dir(&recipe.id);
            let present = read_dataset_manifest(&dir)
                .is_ok_and(|m| m.count == recipe.images && m.labeled == labeled && m.domain_id == recipe.id);
            if !present {
                info!("generating {} images for `{}`", recipe.images, recipe.id);
                let ds = make_domain(&recipe.spec(&self.cfg.model), recipe.images, self.data_seed(&recipe.id))?;
                let ds = if labeled { ds } else { ds.without_labels() };
                write_dataset(&dir, &ds)?;
            }
            if !labeled && !label_files_in(&dir)?.is_empty() {
                return Err(Error::Contract(format!("label files found in the server set {}", dir.display())));
            }
            self.note_artifact(&format!("data/{}", recipe.id), &dir);
        }
        self.save_manifest()
    }

    /// The public pretrained model, trained on first use.
    fn public_model(&mut self) -> Result<Option<SegModel>> {
        if !self.cfg.pretrain.enabled {
            return Ok(None);
        }
        let path = self.public_checkpoint();
        if path.exists() {
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            return load_checkpoint(&bytes).map(Some);
        }
        let data = read_dataset(&self.data_dir(&self.cfg.pretrain.domain.id), true)?;
        info!("pretraining on the public domain `{}`", data.domain_id);
        let mut model = SegModel::init(self.cfg.model, self.cfg.stage_seed("pretrain/init"))?;
        let log = fit_supervised(&mut model, &data, &self.cfg.pretrain.training, self.cfg.stage_seed("pretrain"))?;
        let bytes = save_checkpoint(&model)?;
        write_atomic(&path, &bytes)?;
        self.note_artifact("public/pretrained", &path);
        let curve = path.with_file_name("curve.csv");
        self.write_text("public/curve", &curve, &records_csv(&SUPERVISED_COLUMNS, &log))?;
        self.save_manifest()?;
        load_checkpoint(&bytes).map(Some)
    }

    /// Fresh initialization with the public backbone when pretraining is on.
    fn initial_model(&mut self, config: SegModelConfig, seed_name: &str) -> Result<SegModel> {
        let model = SegModel::init(config, self.cfg.stage_seed(seed_name))?;
        match self.public_model()? {
            Some(public) => model.with_backbone_of(&public),
            None => Ok(model),
        }
    }

    /// Trains and writes one client checkpoint unless it already exists.
    pub fn train_client(&mut self, client_id: &str) -> Result<()> {
        let recipe = self
            .cfg
            .clients
            .iter()
            .find(|c| c.id == client_id)
            .cloned()
            .ok_or_else(|| Error::Config(format!("no client named `{client_id}`")))?;
        if self.has_model(client_id) {
            info!("client `{client_id}` already trained");
            return Ok(());
        }
        self.generate_data()?;
        let data = read_dataset(&self.data_dir(&recipe.id), true)?;
        // every client starts from the same initialization
        let mut model = self.initial_model(self.cfg.model, "client_init")?;
        info!("training client `{client_id}`");
        let log = fit_supervised(
            &mut model,
            &data,
            &self.cfg.client_training,
            self.cfg.stage_seed(&format!("train_client/{client_id}")),
        )?;
        self.write_model(client_id, &model)?;
        let curve = self.client_checkpoint(client_id).with_file_name("curve.csv");
        self.write_text(&format!("curve/{client_id}"), &curve, &records_csv(&SUPERVISED_COLUMNS, &log))?;
        self.save_manifest()
    }

    fn train_clients(&mut self) -> Result<()> {
        self.generate_data()?;
        let ids: Vec<String> = self.cfg.clients.iter().map(|c| c.id.clone()).collect();
        for id in ids {
            self.train_client(&id)?;
        }
        Ok(())
    }

    /// Records the digest of every client checkpoint. Nothing is rewritten.
    fn upload_checkpoints(&mut self) -> Result<()> {
        let mut uploads = std::collections::BTreeMap::new();
        for c in &self.cfg.clients {
            let path = self.client_checkpoint(&c.id);
            if !path.exists() {
                return Err(Error::Contract(format!("client `{}` has no checkpoint to upload", c.id)));
            }
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let model = load_checkpoint(&bytes)?;
            if model.config != self.cfg.model {
                return Err(Error::Contract(format!("client `{}` uploaded a different architecture", c.id)));
            }
            uploads.insert(c.id.clone(), hex::encode(Sha256::digest(&bytes)));
        }
        self.manifest.uploads = uploads;
        Ok(())
    }

    /// Uploaded client models in config order, checked against their digests.
    pub fn uploaded_clients(&self) -> Result<Vec<SegModel>> {
        self.cfg
            .clients
            .iter()
            .map(|c| {
                let path = self.client_checkpoint(&c.id);
                let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
                let expected = self
                    .manifest
                    .uploads
                    .get(&c.id)
                    .ok_or_else(|| Error::Contract(format!("client `{}` was never uploaded", c.id)))?;
                if hex::encode(Sha256::digest(&bytes)) != *expected {
                    return Err(Error::Contract(format!("checkpoint of `{}` changed after upload", c.id)));
                }
                load_checkpoint(&bytes)
            })
            .collect()
    }

    /// Server images only; label files are never opened.
    pub fn server_images(&self) -> Result<DomainDataset> {
        read_dataset(&self.data_dir(&self.cfg.server.id), false)
    }

    fn inconsistency_path(&self) -> PathBuf {
        self.root.join("server").join("inconsistency.json")
    }

    pub fn inconsistency(&self) -> Result<InconsistencyArtifact> {
        let path = self.inconsistency_path();
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn score_inconsistency(&mut self) -> Result<()> {
        let clients = self.uploaded_clients()?;
        let server = self.server_images()?;
        let labels = predict_pseudo_labels(&clients, &server)?;
        let proportions = class_proportions(&labels, &self.cfg.inconsistency.classes)?;
        let report = inconsistency_scores(&proportions, self.cfg.inconsistency.eps, self.cfg.inconsistency.threshold)?;
        info!("inconsistency scores {:?}, unstable classes {:?}", report.gamma, report.unstable);
        let mut csv = String::from("class,mu,sigma,gamma,unstable\n");
        for (j, &c) in report.classes.iter().enumerate() {
            csv.push_str(&format!(
                "{c},{:.8},{:.8},{:.8},{}\n",
                report.mu[j],
                report.sigma[j],
                report.gamma[j],
                report.unstable.contains(&c)
            ));
        }
        let artifact = InconsistencyArtifact { proportions, report };
        let path = self.inconsistency_path();
        self.write_text("inconsistency", &path, &serde_json::to_string_pretty(&artifact)?)?;
        self.write_text("inconsistency_csv", &path.with_extension("csv"), &csv)
    }

    fn augment(&mut self) -> Result<()> {
        let server = self.server_images()?;
        let unstable = if self.cfg.augmentation.enabled {
            self.inconsistency()?.report.unstable
        } else {
            Vec::new()
        };
        let generator = self.cfg.augmentation.generator.spec(&self.cfg.model);
        let generated = unstable
            .iter()
            .map(|&c| {
                let seed = self.cfg.stage_seed(&format!("augment/{c}"));
                Ok((c, augment_for_class(c, self.cfg.augmentation.per_class, &generator, seed)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let set = build_distill_set(&server, &generated)?;
        info!("distillation set: {} server + {} generated images", server.len(), set.len() - server.len());
        let dir = self.distill_set_dir();
        write_dataset(&dir, &set)?;
        self.note_artifact("distill_set", &dir);
        Ok(())
    }

    /// Distills a student with the run's initialization and `cfg` on
    /// either the augmented set or the server images alone.
    pub fn distill_variant(&mut self, cfg: &DistillConfig, augmented: bool) -> Result<(SegModel, Vec<StepRecord>)> {
        let clients = self.uploaded_clients()?;
        let data = if augmented {
            read_dataset(&self.distill_set_dir(), false)?
        } else {
            self.server_images()?
        };
        let mut student = self.initial_model(self.cfg.global_model(), "global_init")?;
        let log = distill_into(&mut student, &clients, &data, cfg, self.cfg.stage_seed("distill"))?;
        Ok((student, log))
    }

    fn distill(&mut self) -> Result<()> {
        let cfg = self.cfg.distill;
        let (student, log) = self.distill_variant(&cfg, true)?;
        self.write_model(GLOBAL_MODEL, &student)?;
        let path = self.root.join("server").join("distill_curve.csv");
        self.write_text("curve/global", &path, &curve_csv(&log))
    }

    /// One-shot FedAvg baseline, trained on first use. Server labels are
    /// regenerated in memory from the server recipe and never written.
    pub fn fedavg_model(&mut self) -> Result<SegModel> {
        if self.has_model(FEDAVG_MODEL) {
            return self.load_model(FEDAVG_MODEL);
        }
        let clients = self.uploaded_clients()?;
        let recipe = &self.cfg.server;
        let labeled = make_domain(&recipe.spec(&self.cfg.model), recipe.images, self.data_seed(&recipe.id))?;
        let on_disk = self.server_images()?;
        if labeled.scenes.iter().zip(&on_disk.scenes).any(|(a, b)| a.image != b.image) || labeled.len() != on_disk.len() {
            return Err(Error::Contract("regenerated server images differ from the stored server set".into()));
        }
        let aggregated = fedavg_aggregate(&clients, None)?;
        info!("fine-tuning the FedAvg aggregate on labeled server data");
        let (model, log) = fedavg_finetune(&aggregated, &labeled, &self.cfg.fedavg, self.cfg.stage_seed("fedavg"))?;
        let model = self.write_model(FEDAVG_MODEL, &model)?;
        let path = self.model_checkpoint(FEDAVG_MODEL).with_file_name("curve.csv");
        self.write_text("curve/fedavg", &path, &records_csv(&SUPERVISED_COLUMNS, &log))?;
        Ok(model)
    }

    pub fn targets(&self) -> Result<Vec<DomainDataset>> {
        self.cfg
            .targets
            .iter()
            .map(|t| read_dataset(&self.data_dir(&t.id), true))
            .collect()
    }

    fn evaluate(&mut self) -> Result<()> {
        let fedavg = self.fedavg_model()?;
        let targets = self.targets()?;
        let mut models: Vec<(String, SegModel)> = self
            .cfg
            .clients
            .iter()
            .map(|c| c.id.clone())
            .zip(self.uploaded_clients()?)
            .collect();
        models.push((GLOBAL_MODEL.to_string(), self.load_model(GLOBAL_MODEL)?));
        models.push((FEDAVG_MODEL.to_string(), fedavg));
        let class_names: Vec<String> = self.cfg.server.spec(&self.cfg.model).palette.into_iter().map(|s| s.name).collect();
        let mut rows = Vec::new();
        for (name, model) in &models {
            let summary = evaluate_on_domains(model, &targets, self.cfg.exclude_absent)?;
            info!("{name}: average mIoU {:.2}", 100.0 * summary.average_miou);
            for d in &summary.domains {
                let path = self.reports_dir().join(name).join(format!("{}.csv", d.domain_id));
                self.write_text(&format!("report/{name}/{}", d.domain_id), &path, &domain_report_csv(d, &class_names))?;
            }
            rows.push((name.clone(), summary));
        }
        let summary_path = self.reports_dir().join("summary.csv");
        self.write_text("report/summary", &summary_path, &summary_csv(&rows))?;
        let json: Vec<ModelSummary> = rows
            .into_iter()
            .map(|(model, summary)| ModelSummary { model, summary })
            .collect();
        let json_path = self.reports_dir().join("summary.json");
        self.write_text("report/summary_json", &json_path, &serde_json::to_string_pretty(&json)?)
    }

    /// Parsed `reports/summary.json`.
    pub fn summaries(&self) -> Result<Vec<ModelSummary>> {
        let path = self.reports_dir().join("summary.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Executes one stage. Every earlier stage must have completed; the
    /// outcome and wall-clock time are recorded either way.
    pub fn execute(&mut self, stage: Stage) -> Result<()> {
        let wrap = |e: Error| Error::Stage {
            stage: stage.name().to_string(),
            source: Box::new(e),
        };
        if let Some(prev) = Stage::ALL[..stage.index()].iter().find(|s| !self.manifest.is_complete(**s)) {
            return Err(wrap(Error::Contract(format!("stage `{prev}` has not completed"))));
        }
        info!("stage {stage} started");
        let start = Instant::now();
        let result = match stage {
            Stage::TrainClients => self.train_clients(),
            Stage::UploadCheckpoints => self.upload_checkpoints(),
            Stage::ScoreInconsistency => self.score_inconsistency(),
            Stage::Augment => self.augment(),
            Stage::Distill => self.distill(),
            Stage::Evaluate => self.evaluate(),
        };
        let rec = self.manifest.record_mut(stage);
        rec.seconds = start.elapsed().as_secs_f64();
        match &result {
            Ok(()) => {
                rec.status = StageStatus::Completed;
                rec.error = None;
            }
            Err(e) => {
                rec.status = StageStatus::Failed;
                rec.error = Some(e.to_string());
            }
        }
        self.save_manifest()?;
        info!("stage {stage} finished in {:.1}s", self.manifest.record(stage).seconds);
        result.map_err(wrap)
    }

    /// Runs every incomplete stage up to and including `last`.
    pub fn run_through(&mut self, last: Stage) -> Result<()> {
        for stage in Stage::ALL.into_iter().take(last.index() + 1) {
            if !self.manifest.is_complete(stage) {
                self.execute(stage)?;
            }
        }
        Ok(())
    }
}

/// Runs (or resumes) the full pipeline and returns the final manifest.
pub fn run_experiment(cfg: ExperimentConfig) -> Result<RunManifest> {
    let mut run = Run::open(cfg)?;
    run.run_through(Stage::Evaluate)?;
    Ok(run.manifest)
}
