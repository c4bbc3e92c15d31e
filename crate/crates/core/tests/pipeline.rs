use fedfuse::harness::{run_ablation, run_experiment, Axis, DomainRecipe, ExperimentConfig, Run, Stage, StageStatus};
use fedfuse::Error;

fn tiny(dir: &std::path::Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::toy();
    cfg.output_dir = dir.to_path_buf();
    cfg.client_training.iterations = 3;
    cfg.fedavg.iterations = 3;
    cfg.distill.iterations = 3;
    cfg.pretrain.training.iterations = 3;
    cfg.pretrain.domain.images = 4;
    cfg.augmentation.per_class = 2;
    for r in cfg.clients.iter_mut().chain(cfg.targets.iter_mut()) {
        r.images = 4;
    }
    cfg.server.images = 6;
    cfg
}

#[test]
fn full_run_records_every_stage_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let manifest = run_experiment(cfg.clone()).unwrap();
    assert_eq!(manifest.completed_stages(), Stage::ALL.len());
    assert_eq!(manifest.checkpoint_writes.len(), 5);
    assert!(manifest.checkpoint_writes.values().all(|&n| n == 1));
    assert_eq!(manifest.uploads.len(), 3);

    let run = Run::open(cfg.clone()).unwrap();
    let models: Vec<String> = run.summaries().unwrap().into_iter().map(|s| s.model).collect();
    assert_eq!(models, ["client_a", "client_b", "client_c", "global", "fedavg"]);
    for file in ["summary.csv", "summary.json", "global/real_1.csv", "fedavg/real_2.csv"] {
        assert!(run.reports_dir().join(file).is_file(), "{file}");
    }

    // resuming a finished run does not touch any checkpoint
    let again = run_experiment(cfg).unwrap();
    assert_eq!(again, manifest);
}

#[test]
fn stages_run_in_order_and_resume_after_a_partial_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let mut run = Run::open(cfg.clone()).unwrap();
    let err = run.execute(Stage::Distill).unwrap_err();
    assert!(matches!(err, Error::Stage { ref stage, .. } if stage == "distill"), "{err}");
    run.run_through(Stage::ScoreInconsistency).unwrap();
    assert_eq!(run.manifest.next_stage(), Some(Stage::Augment));
    drop(run);

    let mut run = Run::open(cfg).unwrap();
    assert_eq!(run.manifest.completed_stages(), 3);
    run.run_through(Stage::Evaluate).unwrap();
    assert!(run.manifest.checkpoint_writes.values().all(|&n| n == 1));
}

#[test]
fn tampered_upload_fails_its_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let mut run = Run::open(cfg).unwrap();
    run.run_through(Stage::UploadCheckpoints).unwrap();
    let ckpt = run.client_checkpoint("client_b");
    let mut bytes = std::fs::read(&ckpt).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0xff;
    std::fs::write(&ckpt, bytes).unwrap();

    assert!(run.execute(Stage::ScoreInconsistency).is_err());
    let rec = run.manifest.record(Stage::ScoreInconsistency);
    assert_eq!(rec.status, StageStatus::Failed);
    assert!(rec.error.is_some());
    assert!(run.execute(Stage::Augment).is_err());
}

#[test]
fn changed_config_cannot_reuse_a_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    Run::open(cfg.clone()).unwrap();
    let mut other = cfg;
    other.seed = 9;
    assert!(Run::open(other).is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut dup = tiny(dir.path());
    dup.server.id = "client_a".into();
    assert!(Run::open(dup).is_err());

    let mut bad_class = tiny(dir.path());
    bad_class.inconsistency.classes = vec![3, 6];
    assert!(bad_class.validate().is_err());

    let mut empty = tiny(dir.path());
    empty.clients.push(DomainRecipe::new("client_d", 0, &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0]));
    assert!(empty.validate().is_err());
}

#[test]
fn ablation_subset_writes_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let results = run_ablation(cfg.clone(), &[Axis::Fusion]).unwrap();
    let names: Vec<&str> = results.iter().map(|r| r.row.name.as_str()).collect();
    assert_eq!(names, ["+augmentation", "full"]);
    let run = Run::open(cfg).unwrap();
    let csv = std::fs::read_to_string(run.reports_dir().join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("row,bce,dice,fusion,augmentation,real_1,real_2,average"));
}
