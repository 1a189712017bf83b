use std::path::Path;

use fedfusion_core::codec::CommLedger;
use fedfusion_core::data::{load_dataset, save_dataset, synth_generate, MultimodalDataset};
use fedfusion_core::federation::{
    decode_model_message, encode_model_message, predict_pixels, rounds_to_jsonl, Federation, Keep, RoundLog,
};
use fedfusion_core::metrics::{comm_report, evaluate as score, write_class_map, MetricsReport};
use fedfusion_core::model::{FusionModelParams, ModelConfig};
use serde_json::{Map, Value};

use crate::config::{DatasetSource, ExperimentConfig};
use crate::CliError;

/// Files written by `train`, in write order.
pub const ARTIFACTS: [&str; 5] = ["model.mmrs", "rounds.jsonl", "comm.jsonl", "metrics.json", "map.ppm"];

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), CliError> {
    let path = dir.join(name);
    std::fs::write(&path, bytes).map_err(io_err(&path))
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<MultimodalDataset, CliError> {
    Ok(match &cfg.dataset {
        DatasetSource::Path(p) => load_dataset(p)?,
        DatasetSource::Synth(s) => synth_generate(s)?,
    })
}

fn model_for(cfg: &ExperimentConfig, d: &MultimodalDataset) -> Result<ModelConfig, CliError> {
    let m = cfg.model_config([d.modality1.shape()[2], d.modality2.shape()[2]], d.class_count);
    m.validate().map_err(|e| CliError::Config(format!("model: {e}")))?;
    cfg.federation()
        .validate(&m)
        .map_err(|e| CliError::Config(format!("federation: {e}")))?;
    Ok(m)
}

/// A finished training run and its test-split metrics.
pub struct ExperimentRun {
    pub model: FusionModelParams,
    pub logs: Vec<RoundLog>,
    pub ledger: CommLedger,
    pub metrics: MetricsReport,
    pub dataset: MultimodalDataset,
}

fn test_metrics(
    cfg: &ExperimentConfig,
    params: &FusionModelParams,
    d: &MultimodalDataset,
) -> Result<MetricsReport, CliError> {
    let p = predict_pixels(params, d, &d.test_idx, cfg.keep, cfg.codec(), cfg.tau)?;
    Ok(score(&p.predicted, &p.truth, d.class_count)?)
}

/// Trains under `cfg` and scores the final model on the test split.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentRun, CliError> {
    let dataset = load_data(cfg)?;
    let model = model_for(cfg, &dataset)?;
    let mut fed = Federation::new(&dataset, model, cfg.federation())?;
    for _ in 0..cfg.rounds {
        let log = fed.run_round()?;
        log::info!("round {} lr {:.3e} loss {:.4}", log.t, log.lr, log.mean_loss_ce());
    }
    let out = fed.into_outcome();
    let metrics = test_metrics(cfg, &out.model, &dataset)?;
    Ok(ExperimentRun {
        model: out.model,
        logs: out.logs,
        ledger: out.ledger,
        metrics,
        dataset,
    })
}

/// Flat metrics object shared by every command that emits `metrics.json`.
fn metrics_json(m: &MetricsReport, ledger: &CommLedger, keep: Keep) -> Result<String, CliError> {
    let mut obj = match serde_json::to_value(m).map_err(|e| CliError::Config(e.to_string()))? {
        Value::Object(o) => o,
        _ => Map::new(),
    };
    let c = comm_report(ledger);
    obj.insert("keep".into(), serde_json::to_value(keep).unwrap_or(Value::Null));
    obj.insert("total_bytes".into(), c.total_bytes.into());
    obj.insert("uncompressed_bytes".into(), c.uncompressed_bytes.into());
    obj.insert(
        "ratio_vs_uncompressed".into(),
        c.ratio_vs_uncompressed.map_or(Value::Null, Value::from),
    );
    let mut s = serde_json::to_string_pretty(&Value::Object(obj)).map_err(|e| CliError::Config(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn write_map(cfg: &ExperimentConfig, params: &FusionModelParams, d: &MultimodalDataset) -> Result<(), CliError> {
    let all: Vec<usize> = (0..d.labels.len()).collect();
    let p = predict_pixels(params, d, &all, cfg.keep, cfg.codec(), cfg.tau)?;
    let mut raster = vec![0i32; d.labels.len()];
    for (&i, &c) in p.indices.iter().zip(&p.predicted) {
        raster[i] = c as i32;
    }
    let path = cfg.output_dir.join("map.ppm");
    write_class_map(&path, &raster, d.height, d.width, d.class_count, cfg.palette_seed)?;
    Ok(())
}

/// Trains and writes the five [`ARTIFACTS`] into `output_dir`.
pub fn train(cfg: &ExperimentConfig) -> Result<ExperimentRun, CliError> {
    let run = run_experiment(cfg)?;
    let dir = &cfg.output_dir;
    ensure_dir(dir)?;
    write(dir, ARTIFACTS[0], &encode_model_message(&run.model)?)?;
    write(dir, ARTIFACTS[1], rounds_to_jsonl(&run.logs)?.as_bytes())?;
    write(dir, ARTIFACTS[2], run.ledger.to_jsonl().as_bytes())?;
    write(dir, ARTIFACTS[3], metrics_json(&run.metrics, &run.ledger, cfg.keep)?.as_bytes())?;
    write_map(cfg, &run.model, &run.dataset)?;
    Ok(run)
}

/// Scores a saved checkpoint on the test split; writes `metrics.json`.
pub fn evaluate(cfg: &ExperimentConfig, model_path: &Path) -> Result<MetricsReport, CliError> {
    let bytes = std::fs::read(model_path).map_err(io_err(model_path))?;
    let params = decode_model_message(&bytes)?;
    let d = load_data(cfg)?;
    let m = test_metrics(cfg, &params, &d)?;
    ensure_dir(&cfg.output_dir)?;
    write(&cfg.output_dir, "metrics.json", metrics_json(&m, &CommLedger::new(), cfg.keep)?.as_bytes())?;
    Ok(m)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    /// `None` for the uncompressed baseline.
    pub k: Option<usize>,
    pub metrics: MetricsReport,
    pub bytes_total: u64,
    /// Baseline bytes over this row's bytes.
    pub ratio: f64,
}

/// One uncompressed baseline run followed by one run per `k_list` entry;
/// writes `sweep.csv`.
pub fn sweep_k(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>, CliError> {
    let mut runs = Vec::new();
    for k in std::iter::once(None).chain(cfg.k_list.iter().map(|&k| Some(k))) {
        let c = ExperimentConfig {
            svd_k: k,
            ..cfg.clone()
        };
        log::info!("sweep k = {}", k.map_or("raw".into(), |k| k.to_string()));
        let run = run_experiment(&c)?;
        runs.push((k, run.metrics, run.ledger.totals().bytes_out));
    }
    let base = runs[0].2 as f64;
    let rows: Vec<SweepRow> = runs
        .into_iter()
        .map(|(k, metrics, bytes_total)| SweepRow {
            k,
            metrics,
            bytes_total,
            ratio: if bytes_total == 0 { 1.0 } else { base / bytes_total as f64 },
        })
        .collect();
    let mut csv = String::from("k,oa,aa,kappa,bytes_total,ratio\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.k.map_or("raw".into(), |k| k.to_string()),
            r.metrics.oa,
            r.metrics.aa,
            r.metrics.kappa.map_or(String::new(), |k| k.to_string()),
            r.bytes_total,
            r.ratio
        ));
    }
    ensure_dir(&cfg.output_dir)?;
    write(&cfg.output_dir, "sweep.csv", csv.as_bytes())?;
    Ok(rows)
}

/// Trains with only the `keep` modality (or both) and writes `metrics.json`.
pub fn ablate(cfg: &ExperimentConfig, keep: Keep) -> Result<MetricsReport, CliError> {
    let c = ExperimentConfig { keep, ..cfg.clone() };
    let run = run_experiment(&c)?;
    ensure_dir(&c.output_dir)?;
    write(&c.output_dir, "metrics.json", metrics_json(&run.metrics, &run.ledger, keep)?.as_bytes())?;
    Ok(run.metrics)
}

/// Writes the configured scene to `output_dir/dataset.mmrs`.
pub fn synth(cfg: &ExperimentConfig) -> Result<MultimodalDataset, CliError> {
    let d = load_data(cfg)?;
    ensure_dir(&cfg.output_dir)?;
    let path = cfg.output_dir.join("dataset.mmrs");
    save_dataset(&d, &path)?;
    Ok(d)
}
