use std::path::{Path, PathBuf};

use super::config::ExperimentConfig;
use super::run::{RequestRecord, RunOutput, SweepCurve};
use crate::error::{RcuError, Result};
use crate::lora::{adapters_from_archive, adapters_to_archive};
use crate::matrix::Archive;
use crate::ood::OodModel;
use crate::toymodel::{AdapterStack, RequestAdapters, ToyAttentionModel};

pub const CONFIG_FILE: &str = "config.toml";
pub const MODEL_FILE: &str = "model.rcm";
pub const BASE_FILE: &str = "base.json";
pub const RECORDS_FILE: &str = "records.jsonl";
pub const TABLE_FILE: &str = "table.csv";

pub fn adapter_file(request_index: usize) -> String {
    format!("adapters_request{request_index}.rcm")
}

pub fn detector_file(request_index: usize) -> String {
    format!("detector_request{request_index}.rcm")
}

pub fn training_log_file(request_index: usize) -> String {
    format!("train_log_request{request_index}.jsonl")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportFiles {
    pub records: PathBuf,
    pub table: PathBuf,
}

/// Writes `records.jsonl` (one record per line) and `table.csv` (one row per
/// request with S.U., D.U., R.D. and both utility accuracies).
pub fn emit_report(records: &[RequestRecord], dir: &Path) -> Result<ReportFiles> {
    if records.is_empty() {
        return Err(RcuError::pre("emit_report", "no records to report"));
    }
    std::fs::create_dir_all(dir)?;
    let rec_path = dir.join(RECORDS_FILE);
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    std::fs::write(&rec_path, out)?;

    let table_path = dir.join(TABLE_FILE);
    let mut w = csv::Writer::from_path(&table_path)?;
    w.write_record(["request", "ablation", "su", "du", "rd", "utility_1", "utility_2"])?;
    for r in records {
        let m = r.metrics;
        let mut row = vec![r.request_index.to_string(), r.ablation.clone()];
        row.extend(m.as_array().iter().map(|v| format!("{v:.6}")));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(ReportFiles { records: rec_path, table: table_path })
}

/// One `sweep_request{t}.csv` per curve with a `beta` column and one accuracy column per dataset.
pub fn emit_sweeps(curves: &[SweepCurve], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(curves.len());
    for c in curves {
        let path = dir.join(format!("sweep_request{}.csv", c.request_index));
        let mut w = csv::Writer::from_path(&path)?;
        let mut header = vec!["beta".to_string()];
        header.extend(c.datasets.iter().cloned());
        w.write_record(&header)?;
        for p in &c.points {
            let mut row = vec![format!("{:.2}", p.beta)];
            row.extend(p.accuracy.iter().map(|a| format!("{a:.6}")));
            w.write_record(&row)?;
        }
        w.flush()?;
        paths.push(path);
    }
    Ok(paths)
}

pub fn read_records(path: &Path) -> Result<Vec<RequestRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

/// Writes every artifact of a finished run: the resolved config, the base
/// model, per-request adapters, detectors and training logs, base accuracies
/// and the report files. Returns the paths in write order.
pub fn write_run(cfg: &ExperimentConfig, out: &RunOutput, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    let mut put = |name: String, bytes: Vec<u8>| -> Result<()> {
        let p = dir.join(name);
        std::fs::write(&p, bytes)?;
        paths.push(p);
        Ok(())
    };
    put(CONFIG_FILE.into(), cfg.to_toml()?.into_bytes())?;
    put(MODEL_FILE.into(), out.model.to_archive().to_bytes())?;
    let lambdas = cfg.effective_training().lambdas;
    for (req, det) in out.stack.requests().iter().zip(&out.detectors) {
        let t = req.request_index;
        put(adapter_file(t), adapters_to_archive(t, &req.pairs, lambdas).to_bytes())?;
        put(detector_file(t), det.to_archive().to_bytes())?;
    }
    for (t, log) in out.logs.iter().enumerate() {
        put(training_log_file(t + 1), log.to_jsonl()?.into_bytes())?;
    }
    put(BASE_FILE.into(), serde_json::to_vec_pretty(&out.base)?)?;
    let files = emit_report(out.records.records(), dir)?;
    paths.extend([files.records, files.table]);
    Ok(paths)
}

/// Model, adapters and detectors restored from a directory written by [`write_run`].
pub struct LoadedRun {
    pub config: ExperimentConfig,
    pub model: ToyAttentionModel,
    pub stack: AdapterStack,
    pub detectors: Vec<OodModel>,
}

pub fn load_model(path: &Path) -> Result<ToyAttentionModel> {
    ToyAttentionModel::from_archive(&Archive::load(path)?)
}

pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    let config = ExperimentConfig::load(&dir.join(CONFIG_FILE))?;
    let model = load_model(&dir.join(MODEL_FILE))?;
    let mut stack = AdapterStack::new(config.composition, config.update_kind());
    let mut detectors = Vec::new();
    for t in 1..=config.tasks.num_requests {
        let path = dir.join(adapter_file(t));
        if !path.exists() {
            break;
        }
        let (_, pairs) = adapters_from_archive(&Archive::load(&path)?)?;
        stack.push(&model, RequestAdapters { request_index: t, pairs, mode: config.training.skew_mode })?;
        detectors.push(OodModel::from_archive(&Archive::load(&dir.join(detector_file(t)))?)?);
    }
    if stack.is_empty() {
        return Err(RcuError::pre("load_run", format!("no adapter checkpoints in {}", dir.display())));
    }
    Ok(LoadedRun { config, model, stack, detectors })
}

#[cfg(test)]
mod tests {
    use super::super::run::{CompositeSummary, Metrics, SweepPoint};
    use super::*;

    fn record(t: usize) -> RequestRecord {
        RequestRecord {
            request_index: t,
            ablation: "full".into(),
            detector_snapshot: format!("det{t}"),
            metrics: Metrics { su: 0.05, du: 0.1, rd: 0.97, utility_1: 0.98, utility_2: 0.96 },
            su_per_request: vec![0.05; t],
            du_per_request: vec![0.1; t],
            rd_beta0: 0.97,
            composite: CompositeSummary { max_abs: 0.3, skew_ratio: vec![0.01], frobenius: vec![1.0] },
            isolation_init: 0.0,
            isolation_final: 0.0,
            beta_trace: vec![],
        }
    }

    #[test]
    fn empty_records_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(emit_report(&[], dir.path()), Err(RcuError::Precondition { .. })));
    }

    #[test]
    fn table_shape_and_byte_identical_reemit() {
        let dir = tempfile::tempdir().unwrap();
        let recs: Vec<_> = (1..=3).map(record).collect();
        let files = emit_report(&recs, dir.path()).unwrap();
        let table = std::fs::read_to_string(&files.table).unwrap();
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[1..].iter().all(|l| l.split(',').count() == 7));
        let first = (std::fs::read(&files.records).unwrap(), table.clone());
        emit_report(&recs, dir.path()).unwrap();
        assert_eq!(first, (std::fs::read(&files.records).unwrap(), std::fs::read_to_string(&files.table).unwrap()));
        assert_eq!(read_records(&files.records).unwrap(), recs);
    }

    #[test]
    fn sweep_files_and_unwritable_path() {
        let dir = tempfile::tempdir().unwrap();
        let c = SweepCurve {
            request_index: 2,
            datasets: vec!["a".into(), "b".into()],
            points: vec![SweepPoint { beta: 0.0, accuracy: vec![1.0, 0.5] }, SweepPoint { beta: 0.05, accuracy: vec![0.9, 0.5] }],
        };
        let paths = emit_sweeps(&[c], dir.path()).unwrap();
        assert_eq!(std::fs::read_to_string(&paths[0]).unwrap(), "beta,a,b\n0.00,1.000000,0.500000\n0.05,0.900000,0.500000\n");
        let file = dir.path().join("plain");
        std::fs::write(&file, "x").unwrap();
        assert!(matches!(emit_report(&[record(1)], &file.join("sub")), Err(RcuError::Io(_))));
    }
}
