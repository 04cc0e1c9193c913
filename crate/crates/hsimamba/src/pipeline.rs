//! End-to-end commands as library functions: the CLI is a thin shell
//! around these, and the acceptance suite drives them directly.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use hsimamba_core::data::{generate_synthetic, LabelGrid, SynthSpec};
use hsimamba_core::metrics::Metrics;
use hsimamba_core::train::{make_splits, SplitSpec, Trainer};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::container::{
    container_from_parts, load_dataset, read_container, save_container, write_atomic,
    ContainerError,
};
use crate::pnm::{self, PnmError, DEFAULT_PALETTE};
use crate::runconfig::{ConfigError, RunConfig};

#[derive(Debug, Error)]
pub enum AppError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Pnm(#[from] PnmError),
    #[error("{0}")]
    Core(hsimamba_core::error::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<hsimamba_core::error::Error> for AppError {
    fn from(e: hsimamba_core::error::Error) -> Self {
        AppError::Core(e)
    }
}

/// Generates the synthetic benchmark container at
/// `<out_dir>/synthetic.hsib`; byte-identical for identical seeds.
pub fn run_gen_synth(out_dir: &Path, seed: u64) -> Result<PathBuf, AppError> {
    fs::create_dir_all(out_dir)?;
    let spec = SynthSpec {
        seed,
        ..SynthSpec::default()
    };
    let (cube, labels, names) = generate_synthetic(&spec);
    let container = container_from_parts(&cube, &labels, &names);
    let path = out_dir.join("synthetic.hsib");
    save_container(&path, &container)?;
    Ok(path)
}

/// Artifacts produced by a training run.
pub struct TrainArtifacts {
    pub log: PathBuf,
    pub metrics_report: PathBuf,
    pub checkpoint: PathBuf,
    pub map_ppm: PathBuf,
    pub map_pgm: PathBuf,
    pub metrics: Metrics,
    pub epoch_records: Vec<hsimamba_core::train::EpochRecord>,
}

/// Full training run: fit, evaluate on the test split, and emit the CSV
/// log, metrics report, classification maps, and checkpoint.
pub fn run_train(cfg: &RunConfig) -> Result<TrainArtifacts, AppError> {
    fs::create_dir_all(&cfg.out_dir)?;
    let (cube, labels, names) = load_dataset(cfg.dataset_path()?)?;
    let num_classes = names.len() as u16;
    let mut trainer = Trainer::new(&cube, &labels, num_classes, cfg.train.clone())?;

    let mut log = String::from("epoch,ce,cluster_loss,total,val_oa\n");
    let records = trainer.run(|rec| {
        let _ = writeln!(
            log,
            "{},{},{},{},{}",
            rec.epoch, rec.ce, rec.cluster_loss, rec.total, rec.val_oa
        );
    })?;

    let metrics = trainer.evaluate()?;
    let preds = trainer.predict()?;
    let map: Vec<u16> = preds.iter().map(|&c| c as u16 + 1).collect();

    let log_path = cfg.out_dir.join("train_log.csv");
    write_atomic(&log_path, log.as_bytes())?;
    let report_path = cfg.out_dir.join("metrics.txt");
    write_atomic(&report_path, format_metrics(&metrics, &names).as_bytes())?;
    let ckpt_path = cfg.out_dir.join("model.ckpt");
    checkpoint::save(&ckpt_path, &trainer)?;
    let ppm_path = cfg.out_dir.join("map.ppm");
    pnm::write_map(&ppm_path, &map, cube.width, cube.height, &DEFAULT_PALETTE)?;
    let pgm_path = cfg.out_dir.join("map.pgm");
    pnm::write_labels(&pgm_path, &map, cube.width, cube.height)?;

    Ok(TrainArtifacts {
        log: log_path,
        metrics_report: report_path,
        checkpoint: ckpt_path,
        map_ppm: ppm_path,
        map_pgm: pgm_path,
        metrics,
        epoch_records: records,
    })
}

/// Rebuilds a trainer around a checkpoint for evaluation or prediction.
fn restore_trainer(cfg: &RunConfig, ckpt: &Path) -> Result<(Trainer, Vec<String>), AppError> {
    let (cube, labels, names) = load_dataset(cfg.dataset_path()?)?;
    let num_classes = names.len() as u16;
    let mut trainer = Trainer::new(&cube, &labels, num_classes, cfg.train.clone())?;
    checkpoint::apply(&mut trainer, checkpoint::load(ckpt)?)?;
    Ok((trainer, names))
}

/// Evaluates a checkpoint on the test split and writes `metrics.txt`.
pub fn run_eval(cfg: &RunConfig, ckpt: &Path) -> Result<(Metrics, PathBuf), AppError> {
    fs::create_dir_all(&cfg.out_dir)?;
    let (trainer, names) = restore_trainer(cfg, ckpt)?;
    let metrics = trainer.evaluate()?;
    let report_path = cfg.out_dir.join("metrics.txt");
    write_atomic(&report_path, format_metrics(&metrics, &names).as_bytes())?;
    Ok((metrics, report_path))
}

/// Writes the whole-image classification maps for a checkpoint.
pub fn run_predict_map(cfg: &RunConfig, ckpt: &Path) -> Result<(PathBuf, PathBuf), AppError> {
    fs::create_dir_all(&cfg.out_dir)?;
    let (trainer, _) = restore_trainer(cfg, ckpt)?;
    let (cube, _, _) = load_dataset(cfg.dataset_path()?)?;
    let preds = trainer.predict()?;
    let map: Vec<u16> = preds.iter().map(|&c| c as u16 + 1).collect();
    let ppm_path = cfg.out_dir.join("map.ppm");
    pnm::write_map(&ppm_path, &map, cube.width, cube.height, &DEFAULT_PALETTE)?;
    let pgm_path = cfg.out_dir.join("map.pgm");
    pnm::write_labels(&pgm_path, &map, cube.width, cube.height)?;
    Ok((ppm_path, pgm_path))
}

/// Materializes the deterministic split lists to a text file.
pub fn run_make_splits(cfg: &RunConfig) -> Result<PathBuf, AppError> {
    fs::create_dir_all(&cfg.out_dir)?;
    let container = read_container(cfg.dataset_path()?)?;
    let labels = LabelGrid::new(container.height, container.width, container.labels.clone());
    let split = make_splits(&labels, cfg.train.split_rule, cfg.train.seed)?;
    let path = cfg.out_dir.join("splits.txt");
    write_atomic(&path, format_splits(&split).as_bytes())?;
    Ok(path)
}

/// Plain-text split listing: one `class <c> <subset> <indices...>` line
/// per class and subset.
pub fn format_splits(split: &SplitSpec) -> String {
    let mut out = String::from("HSISPLIT v1\n");
    let _ = writeln!(out, "seed {}", split.seed);
    for (class, cs) in &split.per_class {
        for (subset, indices) in [("train", &cs.train), ("val", &cs.val), ("test", &cs.test)] {
            let _ = write!(out, "class {class} {subset}");
            for i in indices {
                let _ = write!(out, " {i}");
            }
            out.push('\n');
        }
    }
    out
}

/// Metrics report mirroring the usual benchmark table layout: one row
/// per class, then OA / AA / Kappa (in percent).
pub fn format_metrics(metrics: &Metrics, class_names: &[String]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<5} {:<24} {:>8}", "No.", "Class", "Acc(%)");
    for (i, recall) in metrics.per_class.iter().enumerate() {
        let name = class_names
            .get(i)
            .map(String::as_str)
            .unwrap_or("(unnamed)");
        match recall {
            Some(r) => {
                let _ = writeln!(out, "C{:<4} {:<24} {:>8.2}", i + 1, name, r * 100.0);
            }
            None => {
                let _ = writeln!(out, "C{:<4} {:<24} {:>8}", i + 1, name, "-");
            }
        }
    }
    let _ = writeln!(out, "{:<5} {:<24} {:>8.2}", "OA", "-", metrics.oa * 100.0);
    let _ = writeln!(out, "{:<5} {:<24} {:>8.2}", "AA", "-", metrics.aa * 100.0);
    let _ = writeln!(
        out,
        "{:<5} {:<24} {:>8.2}",
        "Kappa",
        "-",
        metrics.kappa * 100.0
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gen_synth_is_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let a = run_gen_synth(&dir.path().join("a"), 7).unwrap();
        let b = run_gen_synth(&dir.path().join("b"), 7).unwrap();
        assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());

        let c = run_gen_synth(&dir.path().join("c"), 8).unwrap();
        assert_ne!(fs::read(dir.path().join("a/synthetic.hsib")).unwrap(), fs::read(c).unwrap());
    }

    #[test]
    fn metrics_report_shape() {
        use hsimamba_core::metrics::{compute_metrics, ConfusionMatrix};
        let cm = ConfusionMatrix::from_counts(2, vec![8, 2, 3, 7]);
        let m = compute_metrics(cm);
        let report = format_metrics(&m, &["a".into(), "b".into()]);
        assert!(report.contains("C1"));
        assert!(report.contains("OA"));
        assert!(report.contains("75.00"));
        assert!(report.contains("50.00")); // kappa ×100
    }
}
