//! Subcommand implementations. Each writes its artifacts and a copy of the
//! resolved configuration under the run directory.

use std::fs;
use std::path::{Path, PathBuf};

use coda_core::data::DomainDataset;
use coda_core::model::HypothesisPair;
use coda_core::probe::{KnnAccuracy, MetricsRecord};
use coda_core::trainer::{
    assemble_refined, evaluate_pair, knn_pair, model_state, pair_losses, restore_model, Datasets, Refiner, Trainer,
};
use coda_core::Tensor;
use serde::Serialize;

use crate::checkpoint::{self, Checkpoint};
use crate::config::{GridCell, RunConfig};
use crate::error::{Error, Result};
use crate::metrics::{self, JsonlSink};
use crate::plot::{self, PlotReport};

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.coda";
pub const DIRTT_METRICS_FILE: &str = "dirtt_metrics.jsonl";
pub const DIRTT_CHECKPOINT_FILE: &str = "dirtt.coda";
pub const EVAL_FILE: &str = "eval.json";
pub const PROBE_FILE: &str = "probe.json";
pub const GRID_SUMMARY_FILE: &str = "grid_summary.csv";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Creates the run directory and stores the resolved configuration in it.
pub fn prepare_run(config: &RunConfig) -> Result<PathBuf> {
    let dir = config.out_dir();
    create_dir(&dir)?;
    write_text(&dir.join(CONFIG_FILE), &config.to_json())?;
    Ok(dir)
}

fn check_finite(r: &MetricsRecord) -> Result<()> {
    let values = [Some(r.l_y_1), Some(r.l_d_1), Some(r.l_ce_1), r.l_y_2, r.l_d_2, r.l_ce_2, r.l_p, r.d_g];
    if values.iter().flatten().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("loss terms at iteration {}", r.iter)))
    }
}

fn write_dataset(path: &Path, ds: &DomainDataset) -> Result<()> {
    let io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    let width = ds.inputs.row_len();
    let mut header: Vec<String> = (0..width).map(|j| format!("x{j}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(io)?;
    for i in 0..ds.len() {
        let mut row: Vec<String> = ds.inputs.row(i).iter().map(|v| v.to_string()).collect();
        row.push(ds.labels.as_ref().map(|l| l[i].to_string()).unwrap_or_default());
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes the four splits as CSV (flattened inputs, then the label).
pub fn cmd_gen(config: &RunConfig) -> Result<Vec<PathBuf>> {
    let dir = prepare_run(config)?;
    let data = config.data.load()?;
    let mut out = Vec::new();
    for (name, ds) in [
        ("source.csv", &data.source),
        ("target.csv", &data.target),
        ("eval_source.csv", &data.eval_source),
        ("eval_target.csv", &data.eval_target),
    ] {
        let p = dir.join(name);
        write_dataset(&p, ds)?;
        out.push(p);
    }
    Ok(out)
}

/// Trains into `dir` without touching its configuration file.
fn train_into(config: &RunConfig, data: &Datasets, dir: &Path) -> Result<(Trainer, Vec<MetricsRecord>)> {
    let arch = config.arch_for(data)?;
    let mut trainer = Trainer::new(&arch, config.train.clone(), data)?;
    let mut sink = JsonlSink::create(&dir.join(METRICS_FILE))?;
    let mut records = Vec::new();
    let mut emit = |r: MetricsRecord, records: &mut Vec<MetricsRecord>| -> Result<()> {
        check_finite(&r)?;
        sink.push(&r)?;
        records.push(r);
        Ok(())
    };
    let losses = trainer.probe_losses(data)?;
    emit(trainer.evaluate(data, &losses)?, &mut records)?;
    let until = config.train.iterations;
    while trainer.iteration < until {
        let losses = trainer.step(data)?;
        if trainer.iteration % config.train.eval_every == 0 || trainer.iteration == until {
            emit(trainer.evaluate(data, &losses)?, &mut records)?;
        }
    }
    let ckpt = Checkpoint {
        iteration: trainer.iteration,
        arrays: trainer.export_state(),
    };
    checkpoint::save(&dir.join(CHECKPOINT_FILE), &ckpt)?;
    Ok((trainer, records))
}

pub struct TrainOutcome {
    pub dir: PathBuf,
    pub trainer: Trainer,
    pub records: Vec<MetricsRecord>,
}

pub fn cmd_train(config: &RunConfig) -> Result<TrainOutcome> {
    let dir = prepare_run(config)?;
    let data = config.data.load()?;
    let (trainer, records) = train_into(config, &data, &dir)?;
    Ok(TrainOutcome { dir, trainer, records })
}

fn checkpoint_path(config: &RunConfig, explicit: Option<&Path>, default: &str) -> PathBuf {
    explicit.map(Path::to_path_buf).unwrap_or_else(|| config.out_dir().join(default))
}

/// Loads a saved model; evaluation weights are the averaged ones when the
/// file carries them.
pub fn load_model(config: &RunConfig, data: &Datasets, path: &Path) -> Result<(HypothesisPair, Vec<Tensor>)> {
    let ckpt = checkpoint::load(path)?;
    Ok(restore_model(&config.arch_for(data)?, &ckpt.arrays)?)
}

fn record_for(config: &RunConfig, data: &Datasets, pair: &HypothesisPair, values: &[Tensor], iter: u64) -> Result<MetricsRecord> {
    let losses = pair_losses(pair, values, data, &config.train)?;
    let r = evaluate_pair(pair, values, data, &losses, iter)?;
    check_finite(&r)?;
    Ok(r)
}

pub fn cmd_eval(config: &RunConfig, ckpt: Option<&Path>) -> Result<MetricsRecord> {
    let dir = prepare_run(config)?;
    let data = config.data.load()?;
    let path = checkpoint_path(config, ckpt, CHECKPOINT_FILE);
    let iteration = checkpoint::load(&path)?.iteration;
    let (pair, values) = load_model(config, &data, &path)?;
    let r = record_for(config, &data, &pair, &values, iteration)?;
    write_text(&dir.join(EVAL_FILE), &metrics::to_line(&r))?;
    Ok(r)
}

pub fn cmd_probe(config: &RunConfig, ckpt: Option<&Path>) -> Result<Vec<KnnAccuracy>> {
    let dir = prepare_run(config)?;
    let data = config.data.load()?;
    let (pair, values) = load_model(config, &data, &checkpoint_path(config, ckpt, CHECKPOINT_FILE))?;
    let r = knn_pair(&pair, &values, &data, &config.k)?;
    write_text(&dir.join(PROBE_FILE), &serde_json::to_string(&r).expect("probe results serialize"))?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["k", "acc"]).expect("in-memory csv");
    for e in &r {
        w.write_record([e.k.to_string(), e.acc.to_string()]).expect("in-memory csv");
    }
    let text = String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8");
    write_text(&dir.join("knn.csv"), &text)?;
    Ok(r)
}

/// Refines every hypothesis of a trained model on target data, reporting
/// the assembled pair at the evaluation schedule.
pub fn cmd_dirtt(config: &RunConfig, ckpt: Option<&Path>) -> Result<Vec<MetricsRecord>> {
    let dir = prepare_run(config)?;
    let data = config.data.load()?;
    let (pair, values) = load_model(config, &data, &checkpoint_path(config, ckpt, CHECKPOINT_FILE))?;
    let mut refiners: Vec<Refiner> = (0..pair.len())
        .map(|i| Refiner::new(&pair, &values, i, data.target.len(), &config.train))
        .collect::<Result<_, _>>()?;
    let mut sink = JsonlSink::create(&dir.join(DIRTT_METRICS_FILE))?;
    let mut records = Vec::new();
    let until = config.train.dirtt_iterations;
    let mut iter = 0;
    loop {
        if iter == 0 || iter % config.train.eval_every == 0 || iter == until {
            let assembled = assemble_refined(&refiners)?;
            let r = record_for(config, &data, &assembled, assembled.store.values(), iter)?;
            sink.push(&r)?;
            records.push(r);
        }
        if iter == until {
            break;
        }
        for r in &mut refiners {
            let t = r.step(&data.target)?;
            if !t.loss.is_finite() {
                return Err(Error::NonFinite(format!("refinement loss at iteration {}", iter + 1)));
            }
        }
        iter += 1;
    }
    let assembled = assemble_refined(&refiners)?;
    let ckpt = Checkpoint {
        iteration: until,
        arrays: model_state(&assembled, assembled.store.values()),
    };
    checkpoint::save(&dir.join(DIRTT_CHECKPOINT_FILE), &ckpt)?;
    Ok(records)
}

/// Plots `metrics` (default: the run's metrics file) into its directory.
pub fn cmd_plot(config: &RunConfig, metrics: Option<&Path>) -> Result<PlotReport> {
    let path = metrics.map(Path::to_path_buf).unwrap_or_else(|| config.out_dir().join(METRICS_FILE));
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    plot::plot_file(&path, &dir)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridRow {
    pub cell: usize,
    pub lambda_d: f64,
    pub lambda_p: f64,
    pub lambda_div: f64,
    pub nu: f64,
    pub acc_tgt_1: f64,
    pub acc_tgt_2: Option<f64>,
    pub agree: Option<f64>,
}

pub fn cell_config(config: &RunConfig, cell: &GridCell, dir: PathBuf) -> RunConfig {
    let mut c = config.clone();
    let w = &mut c.train.weights;
    w.lambda_d = cell.lambda_d;
    w.lambda_p = cell.lambda_p;
    w.lambda_div = cell.lambda_div;
    w.nu = cell.nu;
    // the variant's pinned weights win over the grid
    if let Ok(v) = c.variant() {
        v.apply(&mut c.train);
    }
    c.grid = Default::default();
    c.out = Some(dir);
    c
}

/// Trains one run per grid cell (cells run concurrently, up to the
/// available parallelism) and writes a summary of final metrics.
pub fn cmd_grid(config: &RunConfig) -> Result<Vec<GridRow>> {
    let dir = prepare_run(config)?;
    let data = config.data.load()?;
    let cells = config.grid.cells(&config.train);
    let configs: Vec<RunConfig> = cells
        .iter()
        .enumerate()
        .map(|(i, c)| cell_config(config, c, dir.join(format!("cell-{i:03}"))))
        .collect();
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(configs.len().max(1));
    let mut results: Vec<Option<Result<MetricsRecord>>> = (0..configs.len()).map(|_| None).collect();
    let run_cell = |c: &RunConfig| -> Result<MetricsRecord> {
        let d = prepare_run(c)?;
        let (_, records) = train_into(c, &data, &d)?;
        Ok(records.last().cloned().expect("initial record is always present"))
    };
    std::thread::scope(|s| {
        for (chunk_i, chunk) in results.chunks_mut(configs.len().div_ceil(workers).max(1)).enumerate() {
            let start = chunk_i * configs.len().div_ceil(workers).max(1);
            let configs = &configs;
            let run_cell = &run_cell;
            s.spawn(move || {
                for (j, slot) in chunk.iter_mut().enumerate() {
                    *slot = Some(run_cell(&configs[start + j]));
                }
            });
        }
    });
    let mut rows = Vec::new();
    let mut w = csv::Writer::from_writer(Vec::new());
    for (i, (cell, res)) in cells.iter().zip(results).enumerate() {
        let r = res.expect("every cell runs")?;
        let row = GridRow {
            cell: i,
            lambda_d: cell.lambda_d,
            lambda_p: cell.lambda_p,
            lambda_div: cell.lambda_div,
            nu: cell.nu,
            acc_tgt_1: r.acc_tgt_1,
            acc_tgt_2: r.acc_tgt_2,
            agree: r.agree,
        };
        w.serialize(&row).expect("in-memory csv");
        rows.push(row);
    }
    let text = String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8");
    write_text(&dir.join(GRID_SUMMARY_FILE), &text)?;
    Ok(rows)
}
